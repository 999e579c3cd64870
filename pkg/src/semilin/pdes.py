"""Test problems: semilinear parabolic PDEs with known solutions or MC baselines.

Every problem solves

    -du/dt - L u = f(t, x, u, sigma^T Du),    u(T, .) = g,
    L u = 1/2 Tr(sigma sigma^T D^2 u) + mu . Du,

and exposes the driver in the ``Du`` convention ``driver(t, x, y, du)``.
Drivers are written with :mod:`semilin.autodiff` functions so that ``y`` and
``du`` may be graph tensors while ``t`` and ``x`` are plain arrays.

All diffusion matrices used here are diagonal; ``sigma_diag`` returns the
diagonal and :meth:`PdeProblem.sigma` embeds it in a full matrix.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import autodiff as ad
from .rng import stream

log = logging.getLogger(__name__)

PROBLEM_IDS = ("bs_default", "bs_barenblatt", "hjb", "osc_square", "nonlip", "cir_osc", "osc_inverse")


def _alternating_x0(d):
    """(1.0, 0.5, 1.0, 0.5, ...)"""
    return np.where(np.arange(d) % 2 == 0, 1.0, 0.5)


class PdeProblem:
    """Base class; subclasses fill in coefficients, driver and terminal."""

    name = "base"
    defaults: dict = {}
    #: constant mu and sigma: X_{t+h} = x + mu h + sigma W_h exactly
    constant_coefficients = False
    #: geometric dynamics with a closed-form transition
    has_exact_step = False
    has_exact_solution = False
    #: "mc" when a conditional Monte-Carlo formula gives u and Du
    baseline_kind = None
    #: literature value of u(0, X0) when nothing better exists
    y0_literature = None

    def __init__(self, d, T=1.0, x0=None, **overrides):
        if d < 1:
            raise ValueError("d must be >= 1")
        unknown = set(overrides) - set(self.defaults)
        if unknown:
            raise ValueError(f"{self.name}: unknown parameters {sorted(unknown)}")
        self.d = int(d)
        self.T = float(T)
        self.params = {**self.defaults, **overrides}
        for k, v in self.params.items():
            setattr(self, k, float(v))
        self.x0 = np.asarray(self.default_x0(self.d) if x0 is None else x0, dtype=float)
        if self.x0.shape != (self.d,):
            raise ValueError(f"x0 must have shape ({self.d},)")
        self.check()

    def default_x0(self, d):
        return np.zeros(d)

    def check(self):
        pass

    def describe(self):
        return {"id": self.name, "d": self.d, "T": self.T, "x0": self.x0.tolist(), "params": dict(self.params)}

    def key(self):
        blob = json.dumps(self.describe(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    # coefficients -----------------------------------------------------------
    def mu(self, t, x):
        raise NotImplementedError

    def sigma_diag(self, t, x):
        raise NotImplementedError

    def sigma(self, t, x):
        s = self.sigma_diag(t, x)
        return s[..., :, None] * np.eye(self.d)

    def driver(self, t, x, y, du):
        """f(t, x, y, sigma^T du) with ``y`` of shape (..., 1) and ``du`` (..., d)."""
        raise NotImplementedError

    def g(self, x):
        raise NotImplementedError

    def exact_u(self, t, x):
        raise NotImplementedError(f"{self.name} has no closed-form solution")

    def exact_du(self, t, x):
        raise NotImplementedError(f"{self.name} has no closed-form gradient")

    def exact_step(self, x, s, t, dw):
        raise NotImplementedError(f"{self.name} has no exact SDE sampler")

    @property
    def exactly_simulable(self):
        return self.constant_coefficients or self.has_exact_step


def _sum_last(x):
    return np.sum(x, axis=-1, keepdims=True)


class BlackScholesDefault(PdeProblem):
    """Black-Scholes pricing with default risk (piecewise-linear driver)."""

    name = "bs_default"
    defaults = dict(mu_bar=0.02, sigma_bar=0.2, delta=2.0 / 3.0, R=0.02, gamma_h=0.2, gamma_l=0.02, v_h=50.0, v_l=70.0)
    has_exact_step = True
    y0_literature = 47.300

    def default_x0(self, d):
        return np.full(d, 100.0)

    def mu(self, t, x):
        return self.mu_bar * x

    def sigma_diag(self, t, x):
        return self.sigma_bar * x

    def hazard(self, y):
        slope = (self.gamma_h - self.gamma_l) / (self.v_h - self.v_l)
        lo, hi = min(self.gamma_l, self.gamma_h), max(self.gamma_l, self.gamma_h)
        return ad.clamp(ad.add(ad.mul(slope, ad.sub(y, self.v_h)), self.gamma_h), lo, hi)

    def driver(self, t, x, y, du):
        q = self.hazard(y)
        return ad.sub(ad.neg(ad.mul(ad.mul(1.0 - self.delta, q), y)), ad.mul(self.R, y))

    def g(self, x):
        return np.min(x, axis=-1, keepdims=True)

    def dg(self, x):
        out = np.zeros_like(x)
        np.put_along_axis(out, np.argmin(x, axis=-1)[..., None], 1.0, axis=-1)
        return out

    def exact_step(self, x, s, t, dw):
        return x * np.exp((self.mu_bar - 0.5 * self.sigma_bar**2) * (t - s) + self.sigma_bar * dw)


class BlackScholesBarenblatt(PdeProblem):
    name = "bs_barenblatt"
    defaults = dict(sigma_bar=0.4, r=0.05)
    has_exact_step = True
    has_exact_solution = True

    def default_x0(self, d):
        return _alternating_x0(d)

    def mu(self, t, x):
        return np.zeros_like(x)

    def sigma_diag(self, t, x):
        return self.sigma_bar * x

    def driver(self, t, x, y, du):
        # (1/sigma_bar) sum z_i with z_i = sigma_bar x_i du_i
        return ad.mul(-self.r, ad.sub(y, ad.reduce_sum(ad.mul(du, x), axis=-1, keepdims=True)))

    def g(self, x):
        return _sum_last(x**2)

    def exact_u(self, t, x):
        return np.exp((self.r + self.sigma_bar**2) * (self.T - _col(t, x))) * self.g(x)

    def exact_du(self, t, x):
        t = _col(t, x)
        return np.exp((self.r + self.sigma_bar**2) * (self.T - t)) * 2.0 * x

    def exact_step(self, x, s, t, dw):
        return x * np.exp(-0.5 * self.sigma_bar**2 * (t - s) + self.sigma_bar * dw)


class HamiltonJacobiBellman(PdeProblem):
    name = "hjb"
    defaults = dict(lam=1.0)
    constant_coefficients = True
    baseline_kind = "mc"

    def mu(self, t, x):
        return np.zeros_like(x)

    def sigma_diag(self, t, x):
        return np.full_like(x, math.sqrt(2.0))

    def driver(self, t, x, y, du):
        # -0.5 lam |z|^2 with z = sqrt(2) du
        return ad.mul(-self.lam, ad.reduce_sum(ad.square(du), axis=-1, keepdims=True))

    def driver_z(self, z):
        return -0.5 * self.lam * np.sum(np.square(z), axis=-1, keepdims=True)

    def g(self, x):
        return np.log(0.5 * (1.0 + _sum_last(x**2)))

    def dg(self, x):
        return 2.0 * x / (1.0 + _sum_last(x**2))

    # conditional MC: u = -1/lam log E exp(-lam g(x + sqrt2 B_{T-t}))
    mc_scale = math.sqrt(2.0)

    def mc_log_weight(self, gx):
        return -self.lam * gx

    def mc_value(self, log_mean_weight):
        return -log_mean_weight / self.lam

    def mc_value_scale(self):
        return 1.0 / self.lam


class NonLipschitzTerminal(PdeProblem):
    """HJB-type equation with a non-Lipschitz terminal condition.

    The driver is +|z|^2 / 2, the sign for which log E[exp g(x + B)] is the
    solution (Cole-Hopf), matching the reference values of this problem.
    """

    name = "nonlip"
    defaults = dict(alpha=0.5)
    constant_coefficients = True
    baseline_kind = "mc"

    def mu(self, t, x):
        return np.zeros_like(x)

    def sigma_diag(self, t, x):
        return np.ones_like(x)

    def driver(self, t, x, y, du):
        return ad.mul(0.5, ad.reduce_sum(ad.square(du), axis=-1, keepdims=True))

    def g(self, x):
        return _sum_last(np.clip(x, 0.0, 1.0) ** self.alpha)

    def dg(self, x):
        inside = (x > 0.0) & (x < 1.0)
        safe = np.where(inside, x, 1.0)
        return np.where(inside, self.alpha * safe ** (self.alpha - 1.0), 0.0)

    mc_scale = 1.0

    def mc_log_weight(self, gx):
        return gx

    def mc_value(self, log_mean_weight):
        return log_mean_weight

    def mc_value_scale(self):
        return 1.0


class OscillatingSquare(PdeProblem):
    """u = cos(sum x) exp(a (T - t)) with a clamped (y sum z)^2 nonlinearity."""

    name = "osc_square"
    defaults = dict(mu0=0.2, sigma0=1.0, a=0.5, r=0.1)
    constant_coefficients = True
    has_exact_solution = True

    def default_x0(self, d):
        return _alternating_x0(d)

    def mu(self, t, x):
        return np.full_like(x, self.mu0 / self.d)

    def sigma_diag(self, t, x):
        return np.full_like(x, self.sigma0 / math.sqrt(self.d))

    def source(self, t, x):
        s = _sum_last(x)
        e = np.exp(self.a * (self.T - t))
        return (
            np.cos(s) * (self.a + 0.5 * self.sigma0**2) * e
            + np.sin(s) * self.mu0 * e
            - self.r * (np.cos(s) * np.sin(s) * e**2) ** 2
        )

    def driver(self, t, x, y, du):
        t = _col(t, x)
        bound = np.exp(2.0 * self.a * (self.T - t))
        # y sum z / (sigma0 sqrt d) with z = sigma0 / sqrt(d) du
        arg = ad.mul(y, ad.mul(ad.reduce_sum(du, axis=-1, keepdims=True), 1.0 / self.d))
        return ad.add(self.source(t, x), ad.mul(self.r, ad.square(ad.clamp(arg, -bound, bound))))

    def g(self, x):
        return np.cos(_sum_last(x))

    def exact_u(self, t, x):
        return np.cos(_sum_last(x)) * np.exp(self.a * (self.T - _col(t, x)))

    def exact_du(self, t, x):
        return -np.sin(_sum_last(x)) * np.exp(self.a * (self.T - _col(t, x))) * np.ones_like(x)


class CirOscillating(PdeProblem):
    """Oscillating solution driven by CIR dynamics.

    The source term uses sigma_hat^2 / 2 * sum(x) in the cosine coefficient,
    which is what the generator of the CIR diffusion produces for this u.
    """

    name = "cir_osc"
    defaults = dict(a=0.1, alpha=0.2, k_hat=0.1, m_hat=0.3, sigma_hat=0.2)
    has_exact_solution = True

    def default_x0(self, d):
        return np.full(d, 0.3)

    def check(self):
        if not 2.0 * self.k_hat * self.m_hat > self.sigma_hat**2:
            raise ValueError("CIR parameters must satisfy 2 k m > sigma^2")

    def mu(self, t, x):
        return self.k_hat * (self.m_hat - x)

    def sigma_diag(self, t, x):
        return self.sigma_hat * np.sqrt(np.maximum(x, 0.0))

    def source(self, t, x):
        s = _sum_last(x)
        e = np.exp(-self.alpha * (self.T - t))
        xp = np.maximum(x, 0.0)
        return (
            np.cos(s) * (-self.alpha + 0.5 * self.sigma_hat**2 * _sum_last(xp)) * e
            + np.sin(s) * e * _sum_last(self.k_hat * (self.m_hat - x))
            + self.a * np.cos(s) * np.sin(s) * np.exp(-2.0 * self.alpha * (self.T - t)) * _sum_last(self.sigma_hat * np.sqrt(xp))
        )

    def driver(self, t, x, y, du):
        t = _col(t, x)
        sz = ad.reduce_sum(ad.mul(du, self.sigma_diag(t, x)), axis=-1, keepdims=True)
        return ad.add(self.source(t, x), ad.mul(self.a, ad.mul(y, sz)))

    def g(self, x):
        return np.cos(_sum_last(x))

    def exact_u(self, t, x):
        return np.cos(_sum_last(x)) * np.exp(-self.alpha * (self.T - _col(t, x)))

    def exact_du(self, t, x):
        return -np.sin(_sum_last(x)) * np.exp(-self.alpha * (self.T - _col(t, x))) * np.ones_like(x)


class OscillatingInverse(PdeProblem):
    """u = (2 sum x + cos sum x) exp(a (T - t)) with a y / sum(z) nonlinearity."""

    name = "osc_inverse"
    defaults = dict(mu0=0.2, sigma0=1.0, a=0.5, r=0.1)
    constant_coefficients = True
    has_exact_solution = True
    #: floor on |sum z| in the driver
    denominator_floor = 1e-8

    def default_x0(self, d):
        return _alternating_x0(d)

    def mu(self, t, x):
        return np.full_like(x, self.mu0 / self.d)

    def sigma_diag(self, t, x):
        return np.full_like(x, self.sigma0)

    def source(self, t, x):
        s = _sum_last(x)
        e = np.exp(self.a * (self.T - t))
        d = self.d
        return (
            2.0 * self.a * s * e
            + np.cos(s) * (self.a + 0.5 * d * self.sigma0**2) * e
            - self.mu0 * (2.0 - np.sin(s)) * e
            - self.r * (2.0 * s + np.cos(s)) / (self.sigma0 * (2.0 - np.sin(s)))
        )

    def driver(self, t, x, y, du):
        t = _col(t, x)
        sz = ad.mul(self.sigma0, ad.reduce_sum(du, axis=-1, keepdims=True))
        sz = ad.abs_floor(sz, self.denominator_floor)
        return ad.add(self.source(t, x), ad.div(ad.mul(self.r * self.d, y), sz))

    def g(self, x):
        s = _sum_last(x)
        return 2.0 * s + np.cos(s)

    def exact_u(self, t, x):
        s = _sum_last(x)
        return (2.0 * s + np.cos(s)) * np.exp(self.a * (self.T - _col(t, x)))

    def exact_du(self, t, x):
        s = _sum_last(x)
        return (2.0 - np.sin(s)) * np.exp(self.a * (self.T - _col(t, x))) * np.ones_like(x)


def _col(t, x):
    """Time as a column broadcastable against ``x[..., :1]``.

    Accepts a scalar, an array shaped like ``x[..., 0]`` or like ``x[..., :1]``.
    """
    t = np.asarray(t, dtype=float)
    if t.ndim == 0 or (t.ndim == np.ndim(x) and t.shape[-1] == 1):
        return t
    return t[..., None]


_REGISTRY = {
    cls.name: cls
    for cls in (
        BlackScholesDefault,
        BlackScholesBarenblatt,
        HamiltonJacobiBellman,
        OscillatingSquare,
        NonLipschitzTerminal,
        CirOscillating,
        OscillatingInverse,
    )
}


def make_problem(problem_id, d, T=1.0, x0=None, **overrides):
    """Instantiate a test problem by id with optional parameter overrides."""
    try:
        cls = _REGISTRY[problem_id]
    except KeyError:
        raise ValueError(f"unknown problem id {problem_id!r}; choose from {PROBLEM_IDS}") from None
    return cls(d, T=T, x0=x0, **overrides)


# ---------------------------------------------------------------------------
# Monte-Carlo baselines


@dataclass
class BaselineResult:
    y0: float
    y0_se: float
    z0: list
    z0_se: list
    n_samples: int
    seed: int
    problem: dict = field(default_factory=dict)

    def to_json(self):
        return {
            "y0": self.y0,
            "y0_se": self.y0_se,
            "z0": list(self.z0),
            "z0_se": list(self.z0_se),
            "n_samples": self.n_samples,
            "seed": self.seed,
            "problem": self.problem,
        }

    @classmethod
    def from_json(cls, obj):
        return cls(**obj)


MC_CHUNK = 50_000


class _MCAccumulator:
    """Streaming, overflow-safe sums for the Cole-Hopf estimators."""

    def __init__(self, d):
        self.shift = -np.inf
        self.s_w = 0.0
        self.s_w2 = 0.0
        self.s_a = np.zeros(d)
        self.s_a2 = np.zeros(d)
        self.s_aw = np.zeros(d)
        self.n = 0

    def add(self, logw, dg):
        m = max(self.shift, float(np.max(logw)))
        if m > self.shift:
            r = math.exp(self.shift - m) if np.isfinite(self.shift) else 0.0
            self.s_w *= r
            self.s_w2 *= r * r
            self.s_a *= r
            self.s_a2 *= r * r
            self.s_aw *= r * r
            self.shift = m
        w = np.exp(logw - self.shift)
        a = dg * w[:, None]
        self.s_w += w.sum()
        self.s_w2 += (w * w).sum()
        self.s_a += a.sum(0)
        self.s_a2 += (a * a).sum(0)
        self.s_aw += (a * w[:, None]).sum(0)
        self.n += len(w)

    def result(self, problem):
        n = self.n
        mw = self.s_w / n
        var_w = max(self.s_w2 / n - mw * mw, 0.0)
        y = problem.mc_value(math.log(mw) + self.shift)
        y_se = problem.mc_value_scale() * math.sqrt(var_w / n) / mw
        ma = self.s_a / n
        z = ma / mw
        # delta method for a ratio of means
        var_num = self.s_a2 / n - 2 * z * self.s_aw / n + z * z * self.s_w2 / n - (ma - z * mw) ** 2
        z_se = np.sqrt(np.maximum(var_num, 0.0) / n) / mw
        return y, y_se, z, z_se


def conditional_mc(problem, t, x, n_samples, seed, tag="mc"):
    """u(t, x) and Du(t, x) by the Cole-Hopf formulas, with standard errors."""
    if problem.baseline_kind != "mc":
        raise ValueError(f"{problem.name} has no Monte-Carlo formula")
    d = problem.d
    h = problem.T - float(t)
    acc = _MCAccumulator(d)
    done, chunk = 0, 0
    while done < n_samples:
        m = min(MC_CHUNK, n_samples - done)
        b = stream(seed, tag, chunk).standard_normal((m, d))
        xt = x + problem.mc_scale * math.sqrt(max(h, 0.0)) * b
        acc.add(problem.mc_log_weight(problem.g(xt)[:, 0]), problem.dg(xt))
        done += m
        chunk += 1
    return acc.result(problem)


def mc_baseline(problem, n_samples, seed=0):
    """Reference Y0 and Z0 = Du(0, X0) for problems with an MC formula."""
    y, y_se, z, z_se = conditional_mc(problem, 0.0, problem.x0, n_samples, seed, tag="baseline")
    return BaselineResult(
        y0=float(y),
        y0_se=float(y_se),
        z0=[float(v) for v in z],
        z0_se=[float(v) for v in z_se],
        n_samples=int(n_samples),
        seed=int(seed),
        problem=problem.describe(),
    )


class BaselineCache:
    """JSON file of baseline results keyed by problem, size and seed."""

    def __init__(self, path):
        self.path = path
        self._data = {}
        if os.path.exists(path):
            with open(path) as fh:
                self._data = json.load(fh)

    @staticmethod
    def key(problem, n_samples, seed):
        return f"{problem.name}|d={problem.d}|{problem.key()}|n={n_samples}|seed={seed}"

    def get(self, problem, n_samples, seed):
        obj = self._data.get(self.key(problem, n_samples, seed))
        return None if obj is None else BaselineResult.from_json(obj)

    def get_or_compute(self, problem, n_samples, seed):
        hit = self.get(problem, n_samples, seed)
        if hit is not None:
            return hit, self.key(problem, n_samples, seed)
        res = mc_baseline(problem, n_samples, seed)
        self._data[self.key(problem, n_samples, seed)] = res.to_json()
        os.makedirs(os.path.dirname(os.path.abspath(self.path)), exist_ok=True)
        with open(self.path, "w") as fh:
            json.dump(self._data, fh, indent=2, sort_keys=True)
        return res, self.key(problem, n_samples, seed)


class ReferenceUnavailable(LookupError):
    pass


def point_reference(problem, n_samples=10**6, seed=0, cache=None):
    """(u(0, X0), Du(0, X0) or None, label) from the best available source.

    The Monte-Carlo gradient of a problem whose terminal condition is even
    about a zero starting point is replaced by its exact value 0.
    """
    x0 = problem.x0[None]
    if problem.has_exact_solution:
        return float(problem.exact_u(0.0, x0)[0, 0]), problem.exact_du(0.0, x0)[0], "exact"
    if problem.baseline_kind == "mc":
        if cache is not None:
            res, key = cache.get_or_compute(problem, n_samples, seed)
        else:
            res, key = mc_baseline(problem, n_samples, seed), f"{problem.name}|n={n_samples}|seed={seed}"
        z = np.asarray(res.z0)
        if problem.name == "hjb" and not np.any(problem.x0):
            z = np.zeros(problem.d)
        return res.y0, z, f"mc:{key}"
    if problem.y0_literature is not None:
        return float(problem.y0_literature), None, "literature"
    raise ReferenceUnavailable(f"no reference for {problem.name}")


def reference_trajectory(problem, paths, grid, n_ref=50_000, seed=0):
    """Reference (Y, Z) along simulated paths of shape (batch, N+1, d).

    Closed-form problems are evaluated pathwise; MC problems use the
    conditional formulas at every (t_i, X_{t_i}) with ``n_ref`` samples.
    """
    grid = np.asarray(grid, dtype=float)
    if problem.has_exact_solution:
        t = np.broadcast_to(grid[None, :], paths.shape[:2])
        return problem.exact_u(t, paths)[..., 0], problem.exact_du(t, paths)
    if problem.baseline_kind == "mc":
        B, n1, d = paths.shape
        Y = np.empty((B, n1))
        Z = np.empty((B, n1, d))
        for b in range(B):
            for i in range(n1):
                if i == n1 - 1 and grid[i] >= problem.T:
                    Y[b, i] = problem.g(paths[b, i])[0]
                    Z[b, i] = problem.dg(paths[b, i])
                    continue
                y, _, z, _ = conditional_mc(problem, grid[i], paths[b, i], n_ref, seed, tag=f"ref-{b}-{i}")
                Y[b, i], Z[b, i] = y, z
        return Y, Z
    raise ReferenceUnavailable(f"no trajectory reference for {problem.name} (Y0 literature value only)")
