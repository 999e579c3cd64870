"""Forward process simulation.

Euler-Maruyama and closed-form steps, the randomized horizon law, antithetic
path pairs and the Malliavin gradient weight. Batched helpers work on arrays
with the state dimension last.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gamma as gamma_fn
from scipy.special import gammainc, gammaincc


class NonFiniteState(FloatingPointError):
    pass


def _check_finite(x, what):
    if not np.all(np.isfinite(x)):
        raise NonFiniteState(f"non-finite state in {what}")
    return x


@dataclass(frozen=True)
class TimeSamplerSpec:
    """Gamma law with shape ``u`` and rate ``lam`` for the random horizon."""

    lam: float = 0.5
    u: float = 1.0

    def __post_init__(self):
        if self.lam <= 0 or self.u <= 0:
            raise ValueError("shape and rate must be positive")

    def density(self, x):
        x = np.asarray(x, dtype=float)
        if self.u == 1.0:
            return np.where(x >= 0, self.lam * np.exp(-self.lam * np.maximum(x, 0.0)), 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            val = self.lam**self.u * np.maximum(x, 0.0) ** (self.u - 1) * np.exp(-self.lam * x) / gamma_fn(self.u)
        return np.where(x >= 0, val, 0.0)

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        return gammainc(self.u, self.lam * np.maximum(x, 0.0))

    def survival(self, x):
        """F-bar(x) = P(tau > x)."""
        x = np.asarray(x, dtype=float)
        if self.u == 1.0:
            return np.exp(-self.lam * np.maximum(x, 0.0))
        return gammaincc(self.u, self.lam * np.maximum(x, 0.0))

    def sample_tau(self, uniform):
        """Inverse-CDF draw (exponential case only)."""
        uniform = np.asarray(uniform, dtype=float)
        if np.any(uniform <= 0.0) or np.any(uniform >= 1.0):
            raise ValueError("uniform must lie in the open interval (0, 1)")
        if self.u != 1.0:
            raise NotImplementedError("horizon sampling supports the exponential law (u = 1) only")
        out = -np.log1p(-uniform) / self.lam
        return float(out) if out.ndim == 0 else out


def euler_path(problem, x0, t0, grid, noise):
    """Euler-Maruyama path on ``grid`` (starting at ``t0``).

    ``x0`` has shape (..., d); ``noise`` holds the Brownian increments with
    shape (..., len(grid) - 1, d). Returns states of shape (..., len(grid), d).
    """
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid[0] != t0 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be increasing and start at t0")
    x = np.asarray(x0, dtype=float)
    noise = np.asarray(noise, dtype=float)
    if noise.shape[-2:] != (len(grid) - 1, problem.d):
        raise ValueError(f"noise must have trailing shape ({len(grid) - 1}, {problem.d})")
    out = [x]
    for i in range(len(grid) - 1):
        dt = grid[i + 1] - grid[i]
        x = x + problem.mu(grid[i], x) * dt + problem.sigma_diag(grid[i], x) * noise[..., i, :]
        out.append(_check_finite(x, "euler_path"))
    return np.stack(out, axis=-2)


def exact_step(problem, x, s, t, w_increment):
    if not problem.has_exact_step:
        raise NotImplementedError(f"{problem.name} has no exact SDE sampler")
    return _check_finite(problem.exact_step(np.asarray(x, dtype=float), s, t, np.asarray(w_increment, dtype=float)), "exact_step")


def step(problem, x, s, t, w_increment):
    """One transition s -> t, exact when possible (constant coefficients are exact under Euler)."""
    if problem.has_exact_step:
        return exact_step(problem, x, s, t, w_increment)
    return x + problem.mu(s, x) * (t - s) + problem.sigma_diag(s, x) * w_increment


def simulate_paths(problem, x0, grid, dw):
    """Paths on ``grid`` from (..., d) starting points with increments (..., N, d)."""
    if problem.has_exact_step:
        x = np.asarray(x0, dtype=float)
        x = np.broadcast_to(x, dw.shape[:-2] + (problem.d,))
        out = [x]
        for i in range(len(grid) - 1):
            x = exact_step(problem, x, grid[i], grid[i + 1], dw[..., i, :])
            out.append(x)
        return np.stack(out, axis=-2)
    x0 = np.broadcast_to(np.asarray(x0, dtype=float), dw.shape[:-2] + (problem.d,))
    return euler_path(problem, x0, grid[0], grid, dw)


def brownian_increments(rng, shape, grid):
    """Increments of shape (*shape, N, d_last) scaled by sqrt(diff(grid))."""
    dt = np.diff(np.asarray(grid, dtype=float))
    z = rng.standard_normal(shape)
    return z * np.sqrt(dt)[:, None]


@dataclass
class PathPair:
    times: np.ndarray
    x_path: np.ndarray
    x_hat_path: np.ndarray
    w_increments: np.ndarray
    tau: float
    terminal: bool


def sample_path_pair(problem, x, t, T, dt, sampler, rng):
    """One antithetic pair from (t, x) over the random horizon min(t + tau, T)."""
    if not t < T:
        raise ValueError("need t < T")
    x = np.asarray(x, dtype=float)
    tau = sampler.sample_tau(rng.uniform(np.nextafter(0.0, 1.0), 1.0))
    terminal = tau >= T - t
    end = T if terminal else t + tau
    if problem.exactly_simulable:
        times = np.array([t, end])
    else:
        j = int(math.floor((end - t) / dt))
        times = t + dt * np.arange(j + 1)
        if times[-1] < end - 1e-15:
            times = np.append(times, end)
        times[-1] = end
    dw = rng.standard_normal((len(times) - 1, problem.d)) * np.sqrt(np.diff(times))[:, None]
    xs, xh = [x], [x]
    for k in range(len(times) - 1):
        inc = dw[k]
        if problem.exactly_simulable:
            xs.append(step(problem, xs[-1], times[k], times[k + 1], inc))
            xh.append(step(problem, xh[-1], times[k], times[k + 1], -inc))
        else:
            xs.append(_euler_one(problem, xs[-1], times[k], times[k + 1], inc))
            xh.append(_euler_one(problem, xh[-1], times[k], times[k + 1], -inc if k == 0 else inc))
    return PathPair(times, np.array(xs), np.array(xh), dw, float(tau), bool(terminal))


def _euler_one(problem, x, s, t, inc):
    return _check_finite(x + problem.mu(s, x) * (t - s) + problem.sigma_diag(s, x) * inc, "euler step")


def malliavin_weight(sigma_at_start, w_increment_first, tau, T_minus_t, dt, exact=False):
    """sigma^{-T} W / h with h = tau ^ (T - t) ^ dt (dt dropped when exact).

    ``sigma_at_start`` may be a full (d, d) matrix or its diagonal.
    """
    h = min(tau, T_minus_t) if exact else min(tau, T_minus_t, dt)
    if h <= 0:
        raise ValueError("weight denominator must be positive")
    s = np.asarray(sigma_at_start, dtype=float)
    w = np.asarray(w_increment_first, dtype=float)
    if s.ndim == 1:
        if np.any(s == 0):
            raise np.linalg.LinAlgError("singular sigma")
        return w / s / h
    return np.linalg.solve(s.T, w) / h


# ---------------------------------------------------------------------------
# Batched antithetic endpoints for the fixed-point estimators


@dataclass
class PairEndpoints:
    """Endpoints of n_outer x n_inner antithetic pairs (flattened row-major)."""

    s_end: np.ndarray  # (B, n) end times
    x: np.ndarray  # (B, n, d)
    x_hat: np.ndarray  # (B, n, d)
    weight: np.ndarray  # (B, n, d) Malliavin weights
    terminal: np.ndarray  # (B, n) bool


def pair_endpoints(problem, t, x, tau, normals, dt, offsets=None):
    """Antithetic endpoints for outer points (t, x) and a block of inner draws.

    ``t`` (B,), ``x`` (B, d) and ``tau`` (n,). For exactly simulable problems
    ``normals`` is (n, d): one standard normal vector per inner draw scaled to
    the horizon length. Otherwise ``normals`` is a flat (K, d) array of step
    normals and ``offsets`` (n + 1,) delimits each draw's steps.
    """
    T = problem.T
    t = np.asarray(t, dtype=float)[:, None]
    x = np.asarray(x, dtype=float)
    remaining = T - t
    terminal = tau[None, :] >= remaining
    h = np.where(terminal, remaining, tau[None, :])
    s_end = t + h
    B, n, d = t.shape[0], tau.shape[0], problem.d
    if problem.exactly_simulable:
        sq = np.sqrt(h)[..., None]
        inc = sq * normals[None, :, :]
        xb = np.broadcast_to(x[:, None, :], (B, n, d))
        if problem.has_exact_step:
            xe = problem.exact_step(xb, t[..., None], s_end[..., None], inc)
            xh = problem.exact_step(xb, t[..., None], s_end[..., None], -inc)
        else:
            drift = problem.mu(t, x)[:, None, :] * h[..., None]
            diff = problem.sigma_diag(t, x)[:, None, :] * inc
            xe = xb + drift + diff
            xh = xb + drift - diff
        sig0 = problem.sigma_diag(t, x)[:, None, :]
        weight = normals[None, :, :] / (sig0 * sq)
        _check_finite(xe, "pair endpoints")
        _check_finite(xh, "pair endpoints")
        return PairEndpoints(s_end, xe, xh, weight, terminal)
    return _euler_pair_endpoints(problem, t[:, 0], x, h, terminal, normals, offsets, dt)


def _euler_pair_endpoints(problem, t, x, h, terminal, normals, offsets, dt):
    B, n = h.shape
    d = problem.d
    counts = np.diff(offsets)
    # number of sub-steps: full dt steps plus a remainder step when needed
    nfull = np.floor(h / dt + 1e-12).astype(np.int64)
    rem = h - nfull * dt
    has_rem = rem > 1e-14
    nsteps = nfull + has_rem
    if np.any(nsteps > counts[None, :]):
        raise ValueError("inner sample bank holds too few steps for this horizon")
    cur = np.broadcast_to(t[:, None], (B, n)).copy()
    xe = np.broadcast_to(x[:, None, :], (B, n, d)).copy()
    xh = xe.copy()
    weight = None
    kmax = int(nsteps.max()) if nsteps.size else 0
    for k in range(kmax):
        active = nsteps > k
        if not np.any(active):
            break
        step_len = np.where(k < nfull, dt, rem)
        step_len = np.where(active, step_len, 0.0)
        z = normals[np.minimum(offsets[:-1][None, :] + k, len(normals) - 1)]  # (B, n, d) via broadcasting
        z = np.broadcast_to(z, (B, n, d))
        inc = np.sqrt(step_len)[..., None] * z * active[..., None]
        tt = cur[..., None]
        sig_e = problem.sigma_diag(tt, xe)
        sig_h = problem.sigma_diag(tt, xh)
        if k == 0:
            weight = z / (sig_e * np.sqrt(np.where(active, step_len, 1.0))[..., None])
            xh = xh + problem.mu(tt, xh) * step_len[..., None] - sig_h * inc
        else:
            xh = xh + problem.mu(tt, xh) * step_len[..., None] + sig_h * inc
        xe = xe + problem.mu(tt, xe) * step_len[..., None] + sig_e * inc
        cur = cur + step_len
    _check_finite(xe, "euler pair endpoints")
    _check_finite(xh, "euler pair endpoints")
    return PairEndpoints(t[:, None] + h, xe, xh, weight, terminal)
