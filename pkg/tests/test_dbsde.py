import math

import numpy as np
import pytest

from semilin import autodiff as ad
from semilin import dbsde
from semilin import networks as nw
from semilin.metrics import integral_error_y, integral_error_z, rel_error_y0, rel_error_z0
from semilin.pdes import PdeProblem, make_problem
from semilin.rng import stream
from semilin.training import LrSchedule, TrainingConfig, TrainingDiverged, fit


class _ConstDriver(PdeProblem):
    """Brownian motion with a constant driver c and terminal g = c0."""

    name = "const_driver"
    defaults = dict(c=0.0, c0=0.0)
    constant_coefficients = True

    def mu(self, t, x):
        return np.zeros_like(x)

    def sigma_diag(self, t, x):
        return np.ones_like(x)

    def driver(self, t, x, y, du):
        return ad.add(ad.mul(y, 0.0), self.c)

    def g(self, x):
        return np.full(np.shape(x)[:-1] + (1,), self.c0)


def _paths(problem, N, batch, seed=0):
    grid = dbsde.time_grid(problem.T, N)
    X, dW = dbsde.sample_paths(problem, grid, stream(seed, "t"), batch)
    return grid, X, dW


def test_driftless_rollout_is_constant():
    p = _ConstDriver(2)
    grid, X, dW = _paths(p, 10, 7)
    rb = dbsde.rollout(p, None, None, X, dW, grid, kappa_fn=lambda i, t, x, y: np.zeros_like(x), y0=1.3)
    np.testing.assert_array_equal(rb.Y_array(), 1.3)


def test_constant_driver_rollout():
    p = _ConstDriver(2, c=0.7)
    grid, X, dW = _paths(p, 10, 7)
    rb = dbsde.rollout(p, None, None, X, dW, grid, kappa_fn=lambda i, t, x, y: np.zeros_like(x), y0=1.0)
    np.testing.assert_allclose(rb.Y_array()[:, -1], 1.0 - 0.7, atol=1e-14)


def test_hard_constraint_identity_with_network():
    p = make_problem("osc_square", 3)
    spec = nw.NetworkSpec("f", 3)
    net = nw.build(spec, seed=1)
    grid, X, dW = _paths(p, 12, 9)
    scaler = dbsde.fit_scaler(p, grid, 0, 500)
    rb = dbsde.rollout(p, net, scaler, X, dW, grid, training=False)
    Y, K = rb.Y_array(), rb.kappa_array()
    for i in range(12):
        dt = grid[i + 1] - grid[i]
        f = p.driver(grid[i], X[:, i], Y[:, i : i + 1], K[:, i])[:, 0]
        z_dw = (K[:, i] * p.sigma_diag(grid[i], X[:, i]) * dW[:, i]).sum(axis=1)
        np.testing.assert_allclose(Y[:, i + 1] - Y[:, i], -f * dt + z_dw, atol=1e-12, rtol=0)


def _exact_kappa(p):
    return lambda i, t, x, y: p.exact_du(t, x)


def test_exact_plugin_terminal_loss_decreases_with_n():
    p = make_problem("osc_square", 1)
    y0 = float(p.exact_u(0.0, p.x0[None])[0, 0])
    losses = []
    for N in (20, 80):
        grid, X, dW = _paths(p, N, 4000, seed=N)
        rb = dbsde.rollout(p, None, None, X, dW, grid, kappa_fn=_exact_kappa(p), y0=y0)
        losses.append(float(dbsde.terminal_loss(rb, p.g)))
    # with the exact solution plugged in only the Euler error remains, which is first order in dt
    assert 3.0 < losses[0] / losses[1] < 5.5


def test_exact_plugin_pathwise_error_is_half_order():
    # the forward-shot Y drifts away from u(t, X_t) by a sum of per-step residuals,
    # so its integral error halves when N is multiplied by 4 even for the exact Du
    p = make_problem("osc_square", 4, r=0.1)
    y0 = float(p.exact_u(0.0, p.x0[None])[0, 0])
    errs = []
    for N in (20, 80):
        grid, X, dW = _paths(p, N, 1500, seed=N)
        rb = dbsde.rollout(p, None, None, X, dW, grid, kappa_fn=_exact_kappa(p), y0=y0)
        Yr = np.stack([p.exact_u(t, X[:, i])[:, 0] for i, t in enumerate(grid)], axis=1)
        errs.append(integral_error_y(rb.Y_array(), Yr, grid[1] - grid[0]))
    assert 1.6 < errs[0] / errs[1] < 2.5


def test_terminal_loss_examples():
    p = _ConstDriver(2, c0=0.5)
    grid, X, dW = _paths(p, 4, 6)
    rb = dbsde.rollout(p, None, None, X, dW, grid, kappa_fn=lambda i, t, x, y: np.zeros_like(x), y0=0.5)
    assert float(dbsde.terminal_loss(rb, p.g)) == 0.0
    rb = dbsde.rollout(p, None, None, X, dW, grid, kappa_fn=lambda i, t, x, y: np.zeros_like(x), y0=0.5 + 0.1)
    assert float(dbsde.terminal_loss(rb, p.g)) == pytest.approx(0.01, rel=1e-12)
    q = make_problem("osc_square", 2)
    grid, X, dW = _paths(q, 5, 30)
    kap = lambda i, t, x, y: np.sin(x)
    rb = dbsde.rollout(q, None, None, X, dW, grid, kappa_fn=kap, y0=0.3)
    direct = np.mean((rb.Y_array()[:, -1] - q.g(X[:, -1])[:, 0]) ** 2)
    assert float(dbsde.terminal_loss(rb, q.g)) == pytest.approx(direct, abs=1e-12)


def test_terminal_loss_gradient_wrt_y0():
    p = make_problem("osc_square", 2, r=0.0)  # Y-independent driver
    grid, X, dW = _paths(p, 10, 50)
    kap = lambda i, t, x, y: 0.3 * np.cos(x)
    with ad.Tape() as tape:
        y0 = ad.parameter(np.array([0.2]))
        rb = dbsde.rollout(p, None, None, X, dW, grid, kappa_fn=kap, y0=y0)
        loss = dbsde.terminal_loss(rb, p.g)
    (g,) = tape.gradient(loss, [y0])
    expected = 2 * np.mean(rb.Y_array()[:, -1] - p.g(X[:, -1])[:, 0])
    assert g.item() == pytest.approx(expected, rel=1e-12)


def _osc_u_model(p):
    def u(t, x):
        e = np.exp(p.a * (p.T - np.asarray(t)))[:, None]
        return ad.mul(ad.cos(ad.reduce_sum(x, axis=1, keepdims=True)), e)

    return u


def test_soft_loss_exact_plugin_decreases_with_n():
    p = make_problem("osc_square", 1)
    vals = []
    for N in (50, 200):
        grid, X, dW = _paths(p, N, 200, seed=N)
        with ad.Tape():
            vals.append(float(ad._data(dbsde.soft_constraint_loss(p, _osc_u_model(p), X, dW, grid))))
    assert vals[1] < vals[0] < 0.05


def test_soft_loss_constant_solution_is_zero():
    p = _ConstDriver(2, c=0.0, c0=1.5)
    grid, X, dW = _paths(p, 6, 5)
    with ad.Tape():
        loss = dbsde.soft_constraint_loss(p, lambda t, x: ad.add(ad.mul(ad.slice_cols(x, 0, 1), 0.0), 1.5), X, dW, grid)
    assert float(ad._data(loss)) == 0.0


def test_soft_loss_single_step_zero_noise():
    p = _ConstDriver(1, c=0.4, c0=0.0)
    grid = np.array([0.0, 1.0])
    X = np.array([[[0.0], [0.0]]])
    dW = np.zeros((1, 1, 1))

    def u(t, x):
        return ad.add(ad.mul(ad.slice_cols(x, 0, 1), 0.0), np.where(np.asarray(t) == 0.0, 2.0, 1.0)[:, None])

    with ad.Tape():
        loss = float(ad._data(dbsde.soft_constraint_loss(p, u, X, dW, grid)))
    y0, y1 = 2.0, 1.0
    assert loss == pytest.approx((y1 - y0 + 0.4 * 1.0) ** 2 + (0.0 - y1) ** 2)


def test_soft_loss_needs_input_gradient_arch():
    with pytest.raises(ValueError):
        dbsde.train(make_problem("osc_square", 2), nw.NetworkSpec("f", 2), TrainingConfig(iterations=0), loss_kind="soft")


# ---------------------------------------------------------------------------
# training procedure


def test_lr_halves_on_small_improvement():
    s = LrSchedule(1e-2)
    s.end_period(10.0)
    assert s.end_period(9.6) == 5e-3


def test_lr_kept_on_large_improvement():
    s = LrSchedule(1e-2)
    s.end_period(10.0)
    assert s.end_period(9.0) == 1e-2


def test_lr_sequence_is_power_of_two_and_non_increasing():
    s = LrSchedule(0.01)
    rng = np.random.default_rng(0)
    rates = [s.end_period(m) for m in np.abs(rng.normal(size=40)) + 1]
    k = [round(math.log2(0.01 / r)) for r in rates]
    assert all(r == 0.01 * 2.0 ** -kk for r, kk in zip(rates, k))
    assert all(a <= b for a, b in zip(k, k[1:]))


def _least_squares_problem():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(40, 3))
    b = rng.normal(size=40)
    w = ad.parameter(np.zeros(3))

    def loss_grad():
        r = A @ w.data - b
        return float(r @ r / len(b)), [2 * A.T @ r / len(b)]

    return A, b, w, loss_grad


def test_fit_converges_on_convex_problem():
    A, b, w, loss_grad = _least_squares_problem()
    cfg = TrainingConfig(iterations=6000, lr0=0.05, period=200, test_every=10)
    fit([w], lambda it: loss_grad(), lambda: loss_grad()[0], lambda: [w.data.copy()], lambda s: setattr(w, "data", s[0]), cfg)
    np.testing.assert_allclose(w.data, np.linalg.lstsq(A, b, rcond=None)[0], atol=1e-6)


def test_fit_halving_matches_synthetic_loss_stream():
    # a test-loss stream whose period means are 10, 9.6, 9.0: halve once, then keep
    means = iter([10.0] * 5 + [9.6] * 5 + [9.0] * 5 + [9.0])
    w = ad.parameter(np.zeros(1))
    cfg = TrainingConfig(iterations=15, period=5, test_every=1, lr0=0.1)
    rates = []
    res = fit(
        [w],
        lambda it: (0.0, [np.zeros(1)]),
        lambda: next(means),
        lambda: None,
        lambda s: None,
        cfg,
        on_record=lambda rec: rates.append(rec[3]),
    )
    assert rates[:5] == [0.1] * 5 and rates[5:10] == [0.1] * 5 and rates[10:15] == [0.05] * 5
    assert res.final_lr == 0.05


def test_fit_reports_divergence_with_history():
    w = ad.parameter(np.zeros(1))
    cfg = TrainingConfig(iterations=10, test_every=1)
    with pytest.raises(TrainingDiverged) as exc:
        fit([w], lambda it: (math.nan if it == 3 else 1.0, [np.zeros(1)]), lambda: 1.0, lambda: None, lambda s: None, cfg)
    assert len(exc.value.history) == 4


def test_y0_initialized_to_mean_terminal_payoff():
    p = make_problem("osc_square", 2)
    cfg = TrainingConfig(iterations=0, n_steps=10, scaler_paths=500, test_size=50)
    st = dbsde.train(p, nw.NetworkSpec("f", 2), cfg, seed=3)
    grid = dbsde.time_grid(p.T, 10)
    dW = stream(3, "scaler").standard_normal((500, 10, 2)) * np.sqrt(0.1)
    xT = p.x0 + p.mu(0, p.x0) * 1.0 + p.sigma_diag(0, p.x0) * dW.sum(axis=1)
    assert st.y0 == pytest.approx(p.g(xT).mean(), rel=1e-12)
    assert len(grid) == 11


def test_best_snapshot_reproduces_min_test_loss():
    p = make_problem("osc_square", 2)
    cfg = TrainingConfig(iterations=60, n_steps=10, batch_size=64, test_every=10, test_size=200, scaler_paths=500, lr0=0.05)
    st = dbsde.train(p, nw.NetworkSpec("f", 2), cfg, seed=1)
    tests = [h[2] for h in st.result.history]
    assert st.result.best_test_loss == min(tests)
    X, dW = dbsde.sample_paths(p, st.grid, stream(1, "test"), cfg.test_size)
    assert dbsde.test_loss(st, X, dW) == st.result.best_test_loss


def test_training_is_deterministic():
    p = make_problem("osc_square", 2)
    cfg = TrainingConfig(iterations=10, n_steps=5, batch_size=32, test_every=5, test_size=50, scaler_paths=100)
    a = dbsde.train(p, nw.NetworkSpec("h", 2), cfg, seed=2)
    b = dbsde.train(p, nw.NetworkSpec("h", 2), cfg, seed=2)
    assert a.result.history == b.result.history
    np.testing.assert_array_equal(a.net.get_flat(), b.net.get_flat())


@pytest.mark.parametrize("arch", nw.DBSDE_ARCHS)
def test_every_arch_trains_and_evaluates(arch):
    p = make_problem("osc_square", 2)
    cfg = TrainingConfig(iterations=3, n_steps=4, batch_size=16, test_every=2, test_size=20, scaler_paths=50)
    st = dbsde.train(p, nw.NetworkSpec(arch, 2, n_steps=4), cfg, seed=0)
    rep = dbsde.evaluate(st, n_paths=30)
    assert np.isfinite([rep.rel_y0, rep.rel_z0, rep.int_y, rep.int_z]).all()
    assert rep.reference == "exact"


def test_soft_loss_training_runs():
    p = make_problem("osc_square", 2)
    cfg = TrainingConfig(iterations=3, n_steps=4, batch_size=16, test_every=2, test_size=20, scaler_paths=50)
    st = dbsde.train(p, nw.NetworkSpec("C", 2), cfg, seed=0, loss_kind="soft")
    rep = dbsde.evaluate(st, n_paths=30)
    assert np.isfinite([rep.rel_y0, rep.int_y, rep.int_z]).all()


def test_zero_driver_y0_approaches_expected_payoff():
    p = make_problem("hjb", 2, lam=0.0)
    cfg = TrainingConfig(iterations=400, n_steps=10, batch_size=128, test_every=50, test_size=500, scaler_paths=2000, lr0=0.01)
    st = dbsde.train(p, nw.NetworkSpec("f", 2), cfg, seed=0)
    b = stream(9, "oracle").standard_normal((100_000, 2))
    gx = p.g(math.sqrt(2.0) * b)[:, 0]
    se = gx.std() / math.sqrt(len(gx))
    # the solver only sees batches of paths; its own sampling error dominates the oracle's
    solver_se = gx.std() / math.sqrt(cfg.test_size)
    assert abs(st.y0 - gx.mean()) <= 3 * math.hypot(se, solver_se)


# ---------------------------------------------------------------------------
# error measures


def test_errors_vanish_for_exact_prediction():
    rng = np.random.default_rng(0)
    Y = rng.normal(size=(5, 11))
    Z = rng.normal(size=(5, 11, 3))
    assert integral_error_y(Y, Y, 0.1) == 0.0 == integral_error_z(Z, Z, 0.1)
    assert rel_error_y0(2.0, 2.0) == 0.0 == rel_error_z0([1.0, 2.0], [1.0, 2.0])


def test_constant_error_integrates_to_error_times_maturity():
    Y = np.zeros((4, 21))
    assert integral_error_y(Y + 0.3, Y, 0.05) == pytest.approx(0.3 * 1.0, rel=1e-12)


def test_z_error_is_ratio_of_squared_norms():
    assert rel_error_z0([1.0, 1.0], [2.0, 0.0]) == pytest.approx((1 + 1) / 4)
    assert rel_error_z0([0.1, 0.0], [0.0, 0.0]) == pytest.approx(0.01)
