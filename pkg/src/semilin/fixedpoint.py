"""Fixed-point Feynman-Kac solver with randomized horizons.

The network (u, v) or (u, D-hat u) is trained so that it reproduces its own
image under the Monte-Carlo operator

    u-bar = 1/n sum_i (phi(X^i) + phi(X-hat^i)) / 2
    v-bar = 1/n sum_i W^i (phi(X^i) - phi(X-hat^i)) / 2

where X, X-hat is an antithetic pair over the horizon min(t + tau^i, T), W the
Malliavin weight and phi the randomized payoff. The inner draws (tau, W) form a
bank sampled once and frozen during training.

Schemes: "A" and "B" parameterize v with the network (first scheme); "C" and
"C_bis" take v = D-hat u (second scheme), "C" adding the gradient mismatch to
the loss.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import networks as nw
from .dbsde import fit_scaler, sample_paths, time_grid
from .metrics import ErrorReport, integral_error_y, integral_error_z, rel_error_y0, rel_error_z0
from .pdes import ReferenceUnavailable, point_reference, reference_trajectory
from .rng import derive_seed, stream
from .sde import TimeSamplerSpec, pair_endpoints
from .training import TrainingConfig, fit

log = logging.getLogger(__name__)

FIRST_SCHEME = ("A", "B")
SECOND_SCHEME = ("C", "C_bis")
BANK_CHUNK = 10_000


# ---------------------------------------------------------------------------
# inner sample bank


@dataclass
class _BankChunk:
    tau: np.ndarray
    normals: np.ndarray
    offsets: np.ndarray | None


class InnerSampleBank:
    """Frozen inner draws (tau^i and Gaussian increments), generated in chunks.

    Chunk ``j`` comes from the stream ``(seed, "bank", j)`` so the bank is a
    pure function of (seed, n, sampler, dt, problem dynamics). For dynamics
    that need Euler steps each draw stores one normal per sub-step up to its
    own horizon min(tau, T).
    """

    def __init__(self, problem, n, seed, sampler, dt, chunk=BANK_CHUNK):
        if n < 1:
            raise ValueError("bank size must be >= 1")
        self.n = int(n)
        self.seed = int(seed)
        self.sampler = sampler
        self.dt = float(dt)
        self.euler = not problem.exactly_simulable
        self.chunks = []
        done, j = 0, 0
        while done < n:
            m = min(chunk, n - done)
            rng = stream(seed, "bank", j)
            u = rng.random(m)
            u = np.where(u > 0.0, u, 2.0**-60)
            tau = np.atleast_1d(sampler.sample_tau(u))
            if self.euler:
                steps = np.ceil(np.minimum(tau, problem.T) / self.dt + 1e-9).astype(np.int64) + 1
                offsets = np.concatenate([[0], np.cumsum(steps)])
                normals = rng.standard_normal((int(offsets[-1]), problem.d))
            else:
                offsets = None
                normals = rng.standard_normal((m, problem.d))
            for a in (tau, normals, offsets):
                if a is not None:
                    a.flags.writeable = False
            self.chunks.append(_BankChunk(tau, normals, offsets))
            done += m
            j += 1

    def __iter__(self):
        return iter(self.chunks)

    def __len__(self):
        return self.n


# ---------------------------------------------------------------------------
# payoff and estimators


def phi(s, t, x, y, z, problem, sampler):
    """Randomized payoff: g(x)/F-bar(T-s) if t >= T, else f(t,x,y,z)/rho(t-s)."""
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(s > t):
        raise ValueError("phi needs s <= t")
    if sampler.u < 1.0:
        raise ValueError("densities with shape u < 1 are singular at 0")
    term = np.asarray(t >= problem.T)
    if np.all(term):
        return problem.g(x) / sampler.survival(problem.T - s)
    f = problem.driver(t, x, y, z)
    rho = sampler.density(t - s)
    if np.any(np.where(term, 1.0, rho) == 0.0):
        raise ZeroDivisionError("zero horizon density")
    drv = ad.div(f, rho)
    if not np.any(term):
        return drv
    gterm = problem.g(x) / sampler.survival(problem.T - s)
    mask = term.astype(float)
    return ad.add(ad.mul(drv, 1.0 - mask), gterm * mask)


def make_uz(net, scaler, scheme):
    """(u, z)-evaluator at arbitrary (t, x): z = v (first scheme) or D-hat u.

    Inside an active tape the results are graph tensors (input gradients are
    recorded so they can be differentiated again); otherwise plain arrays.
    """

    def uz(t, X):
        t = np.asarray(t, dtype=float).reshape(-1, 1)
        if scheme in FIRST_SCHEME:
            u, v = nw.forward_uv(net, scaler.scale_t(t), scaler.scale_x(X))
            return u, v
        tape = ad._active_tape()
        if tape is not None and ad._recording():
            xw = tape.watch(ad.tensor(X))
            u, _ = nw.forward_uv(net, scaler.scale_t(t), scaler.scale_x(xw))
            return u, ad.grad_wrt_input(u, xw, tape=tape, create_graph=True)
        with ad.Tape() as tp:
            xw = tp.watch(ad.tensor(X))
            u, _ = nw.forward_uv(net, scaler.scale_t(t), scaler.scale_x(xw))
            du = ad.grad_wrt_input(u, xw, tape=tp)
        return u.data, du.data

    return uz


@dataclass
class EstimatorSums:
    """Sums over inner draws; means are ``sum / n``."""

    n: int
    u: object  # (B, 1)
    v: object = None  # (B, d)
    u_sq: np.ndarray | None = None
    v_sq: np.ndarray | None = None

    @property
    def u_mean(self):
        return ad.mul(self.u, 1.0 / self.n)

    @property
    def v_mean(self):
        return None if self.v is None else ad.mul(self.v, 1.0 / self.n)

    def u_se(self):
        m = ad._data(self.u) / self.n
        return np.sqrt(np.maximum(self.u_sq / self.n - m * m, 0.0) / self.n)

    def v_se(self):
        m = ad._data(self.v) / self.n
        return np.sqrt(np.maximum(self.v_sq / self.n - m * m, 0.0) / self.n)


def estimator_sums(problem, sampler, uz, t, x, bank, with_v=True, antithetic=True):
    """Accumulate the (u-bar, v-bar) sums over the bank for outer points (t, x).

    Terminal contributions are summed densely per outer point, driver ones with
    ``bincount``, and chunks are added in bank order, so the result does not
    depend on threading. Second moments
    are kept when no tape is recording (for standard errors).
    """
    t = np.asarray(t, dtype=float).reshape(-1)
    x = np.asarray(x, dtype=float).reshape(len(t), problem.d)
    B, d = len(t), problem.d
    graph = ad._active_tape() is not None and ad._recording()
    su, sv = 0.0, 0.0
    su2 = np.zeros((B, 1)) if not graph else None
    sv2 = np.zeros((B, d)) if not graph else None
    surv = sampler.survival(problem.T - t)[:, None, None]
    for ch in bank:
        ep = pair_endpoints(problem, t, x, ch.tau, ch.normals, bank.dt, ch.offsets)
        m = len(ch.tau)
        tm = ep.terminal[..., None].astype(float)
        # terminal branch, dense over (B, m): no dependence on the network
        pe_t = problem.g(ep.x) / surv
        ph_t = problem.g(ep.x_hat) / surv if antithetic else pe_t
        cu_full = tm * (0.5 * (pe_t + ph_t))
        cu = cu_full.sum(axis=1)
        if with_v:
            cv_full = tm * ep.weight * (0.5 * (pe_t - ph_t) if antithetic else pe_t)
            cv = cv_full.sum(axis=1)
        # driver branch: network evaluated on those rows only
        rows = np.flatnonzero(~ep.terminal.reshape(-1))
        k = len(rows)
        if k:
            owner = rows // m
            s_d = ep.s_end.reshape(-1)[rows]
            xe = ep.x.reshape(-1, d)[rows]
            if antithetic:
                X2 = np.concatenate([xe, ep.x_hat.reshape(-1, d)[rows]], axis=0)
                s2 = np.concatenate([s_d, s_d])
            else:
                X2, s2 = xe, s_d
            u2, z2 = uz(s2, X2)
            rho = sampler.density(s2 - np.tile(t[owner], 2 if antithetic else 1))[:, None]
            p2 = ad.div(problem.driver(s2[:, None], X2, u2, z2), rho)
            if antithetic:
                pe_d, ph_d = ad.take(p2, np.arange(k)), ad.take(p2, np.arange(k, 2 * k))
                cu_d = ad.mul(ad.add(pe_d, ph_d), 0.5)
                hd = ad.mul(ad.sub(pe_d, ph_d), 0.5)
            else:
                cu_d = hd = p2
            cu = ad.add(cu, ad.scatter_add(cu_d, owner, B))
            if with_v:
                w_d = ep.weight.reshape(-1, d)[rows]
                cv_d = ad.mul(w_d, hd)
                cv = ad.add(cv, ad.scatter_add(cv_d, owner, B))
            if not graph:
                cu_full.reshape(-1, 1)[rows] += ad._data(cu_d)
                if with_v:
                    cv_full.reshape(-1, d)[rows] += ad._data(cv_d)
        su = ad.add(su, cu)
        if with_v:
            sv = ad.add(sv, cv)
        if not graph:
            su2 += (cu_full**2).sum(axis=1)
            if with_v:
                sv2 += (cv_full**2).sum(axis=1)
    return EstimatorSums(bank.n, su, sv if with_v else None, su2, sv2 if with_v else None)


def tbar_first_scheme(net, scaler, t, x, bank, problem, sampler):
    """(u-bar, v-bar) with the network's own v in the gradient slot."""
    est = estimator_sums(problem, sampler, make_uz(net, scaler, net.spec.arch), t, x, bank)
    return est.u_mean, est.v_mean


def tbar_second_scheme(net, scaler, t, x, bank, problem, sampler, with_v=True):
    """(u-bar, v-bar or None) with D-hat u in the gradient slot."""
    est = estimator_sums(problem, sampler, make_uz(net, scaler, "C"), t, x, bank, with_v=with_v)
    return est.u_mean, est.v_mean


def _outer_values(net, scaler, scheme, t, x):
    return make_uz(net, scaler, scheme)(t, x)


def loss_first_scheme(net, scaler, t, x, bank, problem, sampler):
    ubar, vbar = tbar_first_scheme(net, scaler, t, x, bank, problem, sampler)
    u, v = _outer_values(net, scaler, net.spec.arch, t, x)
    return ad.reduce_mean(ad.add(ad.square(ad.sub(ubar, u)), ad.reduce_sum(ad.square(ad.sub(vbar, v)), axis=-1, keepdims=True)))


def loss_second_scheme(net, scaler, t, x, bank, problem, sampler, variant="C"):
    if variant not in SECOND_SCHEME:
        raise ValueError(f"variant must be one of {SECOND_SCHEME}")
    ubar, vbar = tbar_second_scheme(net, scaler, t, x, bank, problem, sampler, with_v=(variant == "C"))
    u, du = _outer_values(net, scaler, "C", t, x)
    err = ad.square(ad.sub(ubar, u))
    if variant == "C":
        err = ad.add(err, ad.reduce_sum(ad.square(ad.sub(vbar, du)), axis=-1, keepdims=True))
    return ad.reduce_mean(err)


def fixed_point_loss(net, scaler, t, x, bank, problem, sampler, scheme):
    if scheme in FIRST_SCHEME:
        return loss_first_scheme(net, scaler, t, x, bank, problem, sampler)
    return loss_second_scheme(net, scaler, t, x, bank, problem, sampler, variant=scheme)


# ---------------------------------------------------------------------------
# outer points


def sample_outer(problem, batch, rng, dt):
    """zeta ~ U[0, T] and X_zeta started at X0 (exact when possible, else Euler)."""
    zeta = rng.uniform(0.0, problem.T, batch)
    d = problem.d
    if problem.exactly_simulable:
        z = rng.standard_normal((batch, d))
        x0 = np.broadcast_to(problem.x0, (batch, d))
        inc = np.sqrt(zeta)[:, None] * z
        if problem.has_exact_step:
            x = problem.exact_step(x0, 0.0, zeta[:, None], inc)
        else:
            x = x0 + problem.mu(0.0, x0) * zeta[:, None] + problem.sigma_diag(0.0, x0) * inc
        return zeta, x
    nfull = np.floor(zeta / dt + 1e-12).astype(np.int64)
    rem = zeta - nfull * dt
    kmax = int(nfull.max()) + 1
    z = rng.standard_normal((kmax, batch, d))
    x = np.broadcast_to(problem.x0, (batch, d)).copy()
    cur = np.zeros(batch)
    for k in range(kmax):
        h = np.where(k < nfull, dt, np.where(k == nfull, rem, 0.0))
        x = x + problem.mu(cur[:, None], x) * h[:, None] + problem.sigma_diag(cur[:, None], x) * np.sqrt(h)[:, None] * z[k]
        cur = cur + h
    return zeta, x


# ---------------------------------------------------------------------------
# training and evaluation


@dataclass
class FixedPointState:
    problem: object
    net: nw.Network
    scaler: nw.InputScaler
    bank: InnerSampleBank
    sampler: TimeSamplerSpec
    scheme: str
    config: TrainingConfig
    grid: np.ndarray
    result: object = None
    seed: int = 0
    final_train_loss: float = math.nan
    extras: dict = field(default_factory=dict)

    @property
    def dt(self):
        return self.grid[1] - self.grid[0]


def train_fixed_point(problem, spec, config=None, seed=0, on_record=None):
    """Train a fixed-point network with a frozen inner bank and fresh outer batches."""
    config = config or TrainingConfig()
    scheme = spec.arch
    if scheme not in nw.FIXED_POINT_ARCHS:
        raise ValueError(f"arch {scheme!r} is not a fixed-point network")
    grid = time_grid(problem.T, config.n_steps)
    dt = grid[1] - grid[0]
    sampler = TimeSamplerSpec(lam=config.lam)
    scaler = fit_scaler(problem, grid, seed, config.scaler_paths)
    net = nw.build(spec, seed=seed)
    net.init_output_bias(scaler.y_mean)
    bank = InnerSampleBank(problem, config.n_inner, seed, sampler, dt)
    params = net.parameters()
    t_test, x_test = sample_outer(problem, config.test_size, stream(seed, "fp-test"), dt)
    last = {}

    def step_fn(it):
        t, x = sample_outer(problem, config.fp_batch_size, stream(seed, "outer", it), dt)
        with ad.Tape() as tape:
            loss = fixed_point_loss(net, scaler, t, x, bank, problem, sampler, scheme)
            grads = tape.gradient(loss, params)
        last["loss"] = loss.item()
        return loss.item(), [g.data for g in grads]

    def test_fn():
        return float(ad._data(fixed_point_loss(net, scaler, t_test, x_test, bank, problem, sampler, scheme)))

    result = fit(params, step_fn, test_fn, net.snapshot, net.restore, config, on_record)
    state = FixedPointState(problem, net, scaler, bank, sampler, scheme, config, grid, result, seed)
    state.final_train_loss = last.get("loss", math.nan)
    return state


def loss_value(state, t, x, bank=None):
    """Loss at the current parameters; no graph is recorded."""
    return float(ad._data(fixed_point_loss(state.net, state.scaler, t, x, bank or state.bank, state.problem, state.sampler, state.scheme)))


def network_values(state, t, x):
    """Raw network (u, v or D-hat u) at points (t, x) without post-processing."""
    u, z = make_uz(state.net, state.scaler, state.scheme)(np.atleast_1d(t), np.atleast_2d(x))
    return ad._data(u), ad._data(z)


def postprocess_eval(state, t, x, n_eval, seed, with_v=True, antithetic=True):
    """(u-bar, v-bar, se_u, se_v) from a fresh bank of ``n_eval`` draws."""
    bank = InnerSampleBank(state.problem, n_eval, seed, state.sampler, state.dt)
    uz = make_uz(state.net, state.scaler, state.scheme)
    est = estimator_sums(state.problem, state.sampler, uz, np.atleast_1d(t), np.atleast_2d(x), bank, with_v=with_v, antithetic=antithetic)
    v = est.v_mean if with_v else None
    return ad._data(est.u_mean), (None if v is None else ad._data(v)), est.u_se(), (est.v_se() if with_v else None)


def evaluate(state, n_eval_point=10**6, n_eval_traj=10**5, traj_count=10, seed=None, n_ref=50000, baseline_samples=10**6, cache=None, traj_eval=True):
    """Errors of the post-processed solution at (0, X0) and along trajectories."""
    problem = state.problem
    seed = state.seed if seed is None else seed
    x0 = problem.x0[None]
    ub, vb, _, _ = postprocess_eval(state, [0.0], x0, n_eval_point, derive_seed(seed, "eval-point"))
    y0, z0 = float(ub[0, 0]), vb[0]
    y_ref, z_ref, label = point_reference(problem, baseline_samples, seed, cache)
    rep = ErrorReport(y0=y0, y0_ref=y_ref, z0=z0.tolist(), reference=label)
    rep.rel_y0 = rel_error_y0(y0, y_ref)
    if z_ref is not None:
        rep.z0_ref = list(map(float, z_ref))
        rep.rel_z0 = rel_error_z0(z0, z_ref)
    if traj_eval and traj_count > 0:
        grid = state.grid
        X, _ = sample_paths(problem, grid, stream(seed, "fp-traj"), traj_count)
        try:
            Yr, Zr = reference_trajectory(problem, X, grid, n_ref=n_ref, seed=seed)
        except ReferenceUnavailable:
            Yr = None
        if Yr is not None:
            Y = np.empty(Yr.shape)
            Z = np.empty(Zr.shape)
            for i, ti in enumerate(grid):
                if ti >= problem.T:
                    # at maturity u-bar reduces to g; the gradient comes from the network
                    Y[:, i] = problem.g(X[:, i])[:, 0]
                    Z[:, i] = network_values(state, np.full(traj_count, ti), X[:, i])[1]
                    continue
                ub, vb, _, _ = postprocess_eval(state, np.full(traj_count, ti), X[:, i], n_eval_traj, derive_seed(seed, "eval-traj", i))
                Y[:, i], Z[:, i] = ub[:, 0], vb
            dt = grid[1] - grid[0]
            rep.int_y = integral_error_y(Y, Yr, dt)
            rep.int_z = integral_error_z(Z, Zr, dt)
    rep.final_test_loss = state.result.best_test_loss if state.result else math.nan
    rep.best_iteration = state.result.best_iteration if state.result else -1
    return rep


