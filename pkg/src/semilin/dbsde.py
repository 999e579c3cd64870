"""Deep BSDE forward shooting: rollout, losses, training and evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import networks as nw
from .metrics import ErrorReport, integral_error_y, integral_error_z, rel_error_y0, rel_error_z0
from .pdes import ReferenceUnavailable, point_reference, reference_trajectory
from .rng import stream
from .sde import simulate_paths
from .training import TrainingConfig, fit

log = logging.getLogger(__name__)


def time_grid(T, N):
    return np.linspace(0.0, T, N + 1)


def sample_paths(problem, grid, rng, batch):
    """(X, dW) with X of shape (batch, N+1, d) and dW of shape (batch, N, d)."""
    dt = np.diff(grid)
    dW = rng.standard_normal((batch, len(dt), problem.d)) * np.sqrt(dt)[:, None]
    return simulate_paths(problem, problem.x0, grid, dW), dW


def fit_scaler(problem, grid, seed, n_paths=10000):
    X, _ = sample_paths(problem, grid, stream(seed, "scaler"), n_paths)
    return nw.InputScaler.fit(X, problem.g(X[:, -1]), problem.T, grid[1] - grid[0])


@dataclass
class RolloutBatch:
    grid: np.ndarray
    X: np.ndarray
    dW: np.ndarray
    Y: list  # N+1 entries of shape (batch, 1)
    kappa: list  # N entries of shape (batch, d)

    def Y_array(self):
        return np.concatenate([ad._data(y) for y in self.Y], axis=1)

    def kappa_array(self):
        return np.stack([ad._data(k) for k in self.kappa], axis=1)


def _kappa_at(net, scaler, problem, i, t, x, y, state, training):
    arch = net.spec.arch
    if arch in nw.PER_STEP:
        inputs = {"X": scaler.scale_x(x)}
        if arch == "c":
            inputs["g"] = scaler.scale_y(problem.g(x))
        return nw.forward_kappa(net, inputs, step=i, training=training, update_stats=training)
    inputs = {"t": np.full((x.shape[0], 1), scaler.scale_t(t)), "X": scaler.scale_x(x)}
    if arch != "g":
        inputs["Y"] = scaler.scale_y(y)
        inputs["g"] = scaler.scale_y(problem.g(x))
    return nw.forward_kappa(net, inputs, state=state)


def rollout(problem, net, scaler, X, dW, grid, training=True, kappa_fn=None, y0=None):
    """Y along the paths by the explicit Euler scheme of the BSDE.

    ``kappa_fn(i, t, x, y)`` together with ``y0`` may replace the network
    (used to plug in known solutions).
    """
    B = X.shape[0]
    if y0 is not None:
        y = ad.mul(np.ones((B, 1)), y0)
    elif net is not None:
        y = ad.mul(np.ones((B, 1)), net.params["y0"])
    else:
        raise ValueError("rollout needs a network or an explicit y0")
    if kappa_fn is None and net is None:
        raise ValueError("rollout needs a network or kappa_fn")
    state = nw.initial_state(net, B) if net is not None and net.spec.arch in nw.RECURRENT else None
    Ys, ks = [y], []
    for i in range(len(grid) - 1):
        t, x = grid[i], X[:, i]
        if kappa_fn is not None:
            kappa = kappa_fn(i, t, x, y)
        else:
            kappa, state = _kappa_at(net, scaler, problem, i, t, x, y, state, training)
        dt = grid[i + 1] - grid[i]
        f = problem.driver(t, x, y, kappa)
        noise = ad.reduce_sum(ad.mul(kappa, problem.sigma_diag(t, x) * dW[:, i]), axis=-1, keepdims=True)
        y = ad.add(ad.sub(y, ad.mul(f, dt)), noise)
        Ys.append(y)
        ks.append(kappa)
    return RolloutBatch(grid, X, dW, Ys, ks)


def terminal_loss(rb, g):
    r = ad.sub(rb.Y[-1], g(rb.X[:, -1]))
    return ad.reduce_mean(ad.square(r))


def soft_constraint_loss(problem, u_model, X, dW, grid):
    """Euler residuals of the BSDE enforced as a penalty plus terminal matching.

    ``u_model(t, x)`` maps times (M,) and a watched (M, d) tensor to (M, 1).
    Z-hat is the input gradient of ``u_model``.
    """
    B, n1, d = X.shape
    N = n1 - 1
    tape = ad._active_tape()
    if tape is None:
        raise ad.TapeError("soft_constraint_loss needs an active tape")
    t_all = np.repeat(grid[None, :], B, axis=0).reshape(-1)
    x_all = tape.watch(ad.tensor(X.reshape(-1, d)))
    u_all = u_model(t_all, x_all)
    z_all = ad.grad_wrt_input(u_all, x_all, tape=tape, create_graph=True)
    idx = np.arange(B * n1).reshape(B, n1)
    total = 0.0
    for i in range(N):
        rows, nxt = idx[:, i], idx[:, i + 1]
        y_i, y_n = ad.take(u_all, rows), ad.take(u_all, nxt)
        z_i = ad.take(z_all, rows)
        x_i = X[:, i]
        dt = grid[i + 1] - grid[i]
        f = problem.driver(grid[i], x_i, y_i, z_i)
        noise = ad.reduce_sum(ad.mul(z_i, problem.sigma_diag(grid[i], x_i) * dW[:, i]), axis=-1, keepdims=True)
        res = ad.sub(ad.add(ad.sub(y_n, y_i), ad.mul(f, dt)), noise)
        total = ad.add(total, ad.square(res))
    term = ad.sub(problem.g(X[:, -1]), ad.take(u_all, idx[:, -1]))
    return ad.reduce_mean(ad.add(total, ad.square(term)))


def network_u_model(net, scaler):
    """u(t, x) callable for a fixed-point style network (arch C)."""

    def u_model(t, x):
        u, _ = nw.forward_uv(net, scaler.scale_t(t)[:, None], scaler.scale_x(x))
        return u

    return u_model


@dataclass
class DbsdeState:
    problem: object
    net: nw.Network
    scaler: nw.InputScaler
    grid: np.ndarray
    config: TrainingConfig
    result: object = None
    loss_kind: str = "terminal"
    seed: int = 0

    @property
    def y0(self):
        if self.loss_kind == "soft":
            u = network_u_model(self.net, self.scaler)(np.zeros(1), ad.tensor(self.problem.x0[None]))
            return float(ad._data(u)[0, 0])
        return float(self.net.params["y0"].data[0])


def _loss(problem, net, scaler, X, dW, grid, loss_kind, training):
    if loss_kind == "soft":
        return soft_constraint_loss(problem, network_u_model(net, scaler), X, dW, grid)
    rb = rollout(problem, net, scaler, X, dW, grid, training=training)
    return terminal_loss(rb, problem.g)


def train(problem, spec, config=None, seed=0, loss_kind="terminal", on_record=None):
    """Train a Deep BSDE solver; returns the state holding the best snapshot."""
    config = config or TrainingConfig()
    if loss_kind == "soft" and spec.arch not in ("C", "C_bis"):
        raise ValueError("the soft-constraint loss needs a u network with input differentiation (arch C)")
    if loss_kind == "terminal" and spec.arch not in nw.DBSDE_ARCHS:
        raise ValueError(f"arch {spec.arch!r} has no kappa head")
    grid = time_grid(problem.T, config.n_steps)
    if spec.arch in nw.PER_STEP and spec.n_steps != config.n_steps:
        raise ValueError("per-step network n_steps must equal the time grid size")
    scaler = fit_scaler(problem, grid, seed, config.scaler_paths)
    net = nw.build(spec, seed=seed)
    if "y0" in net.params:
        # E[g(X_T)] over the scaler paths
        net.params["y0"].data = np.array([scaler.y_mean])
    elif loss_kind == "soft":
        net.init_output_bias(scaler.y_mean)
    params = net.parameters()
    X_test, dW_test = sample_paths(problem, grid, stream(seed, "test"), config.test_size)

    def step_fn(it):
        X, dW = sample_paths(problem, grid, stream(seed, "batch", it), config.batch_size)
        with ad.Tape() as tape:
            loss = _loss(problem, net, scaler, X, dW, grid, loss_kind, True)
            grads = tape.gradient(loss, params)
        return loss.item(), [g.data for g in grads]

    def test_fn():
        if loss_kind == "soft":
            with ad.Tape():
                return ad._data(_loss(problem, net, scaler, X_test, dW_test, grid, loss_kind, False)).item()
        return ad._data(_loss(problem, net, scaler, X_test, dW_test, grid, loss_kind, False)).item()

    result = fit(params, step_fn, test_fn, net.snapshot, net.restore, config, on_record)
    return DbsdeState(problem, net, scaler, grid, config, result, loss_kind, seed)


def test_loss(state, X, dW):
    if state.loss_kind == "soft":
        with ad.Tape():
            return ad._data(_loss(state.problem, state.net, state.scaler, X, dW, state.grid, "soft", False)).item()
    return ad._data(_loss(state.problem, state.net, state.scaler, X, dW, state.grid, "terminal", False)).item()


def predicted_trajectories(state, X, dW):
    """(Y, Z) on the grid: Y (paths, N+1), Z (paths, N+1, d).

    Z at maturity is the network evaluated at (T, X_T): merged and recurrent
    nets take one more step, per-step nets reuse the last step's network.
    """
    problem, net, scaler, grid = state.problem, state.net, state.scaler, state.grid
    if state.loss_kind == "soft":
        B, n1, d = X.shape
        with ad.Tape() as tape:
            xt = tape.watch(ad.tensor(X.reshape(-1, d)))
            u = network_u_model(net, scaler)(np.repeat(grid[None], B, 0).reshape(-1), xt)
            z = ad.grad_wrt_input(u, xt, tape=tape)
        return u.data.reshape(B, n1), z.data.reshape(B, n1, d)
    rb = rollout(problem, net, scaler, X, dW, grid, training=False)
    Y = rb.Y_array()
    K = rb.kappa_array()
    N = len(grid) - 1
    arch = net.spec.arch
    x_T, y_T = X[:, -1], rb.Y[-1]
    if arch in nw.PER_STEP:
        k_T, _ = _kappa_at(net, scaler, problem, max(N - 1, 1) if N > 1 else 0, grid[-1], x_T, y_T, None, False)
    elif arch in nw.RECURRENT:
        # rerun the recurrence to carry the state to maturity
        B = X.shape[0]
        st = nw.initial_state(net, B)
        for i in range(N):
            _, st = _kappa_at(net, scaler, problem, i, grid[i], X[:, i], rb.Y[i], st, False)
        k_T, _ = _kappa_at(net, scaler, problem, N, grid[-1], x_T, y_T, st, False)
    else:
        k_T, _ = _kappa_at(net, scaler, problem, N, grid[-1], x_T, y_T, None, False)
    Z = np.concatenate([K, ad._data(k_T)[:, None, :]], axis=1)
    return Y, Z


def evaluate(state, n_paths=1500, seed=None, n_ref=50000, n_ref_paths=10, baseline_samples=10**6, cache=None):
    """Error report against the exact solution or Monte-Carlo references.

    Exact problems use ``n_paths`` evaluation paths. Problems whose reference
    needs conditional Monte Carlo use the first ``n_ref_paths`` of them.
    """
    problem, grid = state.problem, state.grid
    seed = state.seed if seed is None else seed
    X, dW = sample_paths(problem, grid, stream(seed, "final"), n_paths)
    y0 = state.y0
    Y, Z = predicted_trajectories(state, X, dW)
    z0 = Z[0, 0]
    y_ref, z_ref, label = point_reference(problem, baseline_samples, seed, cache)
    rep = ErrorReport(y0=y0, y0_ref=y_ref, z0=z0.tolist(), reference=label)
    rep.rel_y0 = rel_error_y0(y0, y_ref)
    if z_ref is not None:
        rep.z0_ref = list(map(float, z_ref))
        rep.rel_z0 = rel_error_z0(z0, z_ref)
    try:
        k = n_paths if problem.has_exact_solution else min(n_ref_paths, n_paths)
        Yr, Zr = reference_trajectory(problem, X[:k], grid, n_ref=n_ref, seed=seed)
        dt = grid[1] - grid[0]
        rep.int_y = integral_error_y(Y[:k], Yr, dt)
        rep.int_z = integral_error_z(Z[:k], Zr, dt)
    except ReferenceUnavailable:
        pass
    rep.final_test_loss = state.result.best_test_loss if state.result else test_loss(state, *sample_paths(problem, grid, stream(state.seed, "test"), state.config.test_size))
    rep.best_iteration = state.result.best_iteration if state.result else -1
    return rep
