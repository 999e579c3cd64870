import math

import numpy as np
import pytest

from semilin import autodiff as ad
from semilin.pdes import (
    PROBLEM_IDS,
    BaselineCache,
    ReferenceUnavailable,
    conditional_mc,
    make_problem,
    mc_baseline,
    point_reference,
    reference_trajectory,
)
from semilin.rng import stream

import pde_oracle


@pytest.mark.parametrize("pid", pde_oracle.RESIDUAL_PROBLEMS)
@pytest.mark.parametrize("d", [1, 3])
def test_exact_solution_satisfies_pde(pid, d):
    assert pde_oracle.worst_relative_residual(make_problem(pid, d), seed=d) <= 1e-6


@pytest.mark.parametrize("r", [0.0, 0.1, 0.5])
def test_residual_holds_for_each_r(r):
    assert pde_oracle.worst_relative_residual(make_problem("osc_square", 2, r=r), n_points=5) <= 1e-6


@pytest.mark.parametrize("pid", pde_oracle.RESIDUAL_PROBLEMS)
def test_terminal_consistency(pid):
    p = make_problem(pid, 4)
    x = np.abs(np.random.default_rng(0).normal(size=(50, 4)))
    np.testing.assert_allclose(p.exact_u(p.T, x), p.g(x), atol=1e-12, rtol=0)


def test_exact_gradient_matches_differences_of_terminal():
    for pid in pde_oracle.RESIDUAL_PROBLEMS:
        p = make_problem(pid, 3)
        x = np.abs(np.random.default_rng(1).normal(size=(4, 3))) + 0.1
        np.testing.assert_allclose(p.exact_du(p.T, x), _terminal_grad(p, x), rtol=1e-8, atol=1e-10)


def _terminal_grad(p, x):
    h = 1e-6
    return np.stack([(p.g(x + h * e) - p.g(x - h * e))[:, 0] / (2 * h) for e in np.eye(p.d)], axis=1)


def test_osc_square_clamp_is_inactive_at_solution():
    p = make_problem("osc_square", 5)
    rng = np.random.default_rng(2)
    for _ in range(200):
        t = rng.uniform(0, 1)
        x = rng.normal(size=(1, 5)) * 2
        u = p.exact_u(t, x)[0, 0]
        du = p.exact_du(t, x)[0]
        assert abs(u * du.sum() / p.d) <= math.exp(2 * p.a * (p.T - t))


def test_cir_parameter_condition_is_enforced():
    with pytest.raises(ValueError):
        make_problem("cir_osc", 2, k_hat=0.1, m_hat=0.1, sigma_hat=0.5)


def test_bs_default_driver_continuous_across_breakpoints():
    p = make_problem("bs_default", 2)
    x = np.full((1, 2), 100.0)
    du = np.zeros((1, 2))
    for v in (p.v_h, p.v_l):
        lo = p.driver(0.0, x, np.array([[v - 1e-9]]), du)
        hi = p.driver(0.0, x, np.array([[v + 1e-9]]), du)
        assert abs(lo - hi).max() < 1e-8


def test_bs_default_terminal_subgradient_is_first_argmin():
    p = make_problem("bs_default", 3)
    np.testing.assert_array_equal(p.dg(np.array([[3.0, 1.0, 1.0]])), [[0.0, 1.0, 0.0]])


def test_hjb_driver_example():
    p = make_problem("hjb", 2, lam=1.0)
    z = np.array([[1.0, 1.0]])  # |z|^2 = 2
    du = z / math.sqrt(2.0)
    assert float(p.driver(0.0, np.zeros((1, 2)), np.zeros((1, 1)), du)[0, 0]) == pytest.approx(-1.0)


def test_bs_barenblatt_closed_form_value():
    p = make_problem("bs_barenblatt", 2)
    np.testing.assert_array_equal(p.x0, [1.0, 0.5])
    assert p.exact_u(0.0, p.x0[None])[0, 0] == pytest.approx(math.exp(0.21) * 1.25, rel=1e-14)


def test_osc_square_terminal_example():
    p = make_problem("osc_square", 1)
    assert p.exact_u(p.T, np.zeros((1, 1)))[0, 0] == 1.0 == p.g(np.zeros((1, 1)))[0, 0]


def test_osc_square_reference_formulas():
    p = make_problem("osc_square", 3)
    x = np.array([[0.3, -0.1, 0.7]])
    y, z, label = point_reference(p)
    e = math.exp(p.a * p.T)
    assert y == pytest.approx(math.cos(p.x0.sum()) * e)
    np.testing.assert_allclose(z, -math.sin(p.x0.sum()) * e)
    assert label == "exact"
    Y, Z = reference_trajectory(p, x[:, None, :].repeat(2, axis=1), np.array([0.0, 1.0]))
    assert Y[0, 1] == pytest.approx(math.cos(0.9))
    np.testing.assert_allclose(Z[0, 0], -math.sin(0.9) * e)


def test_osc_inverse_terminal_reference():
    p = make_problem("osc_inverse", 2)
    x = np.array([[0.4, -1.3]])
    assert p.exact_u(p.T, x)[0, 0] == p.g(x)[0, 0]


def test_osc_inverse_denominator_floor():
    p = make_problem("osc_inverse", 2)
    f = p.driver(0.5, np.zeros((1, 2)), np.ones((1, 1)), np.zeros((1, 2)))
    assert np.isfinite(f).all()


def test_unknown_problem_and_parameter():
    with pytest.raises(ValueError):
        make_problem("nope", 2)
    with pytest.raises(ValueError):
        make_problem("osc_square", 2, bogus=1.0)
    assert len(PROBLEM_IDS) == 7


def test_drivers_accept_tensors():
    for pid in PROBLEM_IDS:
        p = make_problem(pid, 3)
        with ad.Tape() as tape:
            du = ad.parameter(np.full((2, 3), 0.1))
            y = ad.parameter(np.ones((2, 1)))
            f = p.driver(np.zeros(2), np.tile(p.x0, (2, 1)), y, du)
            loss = ad.reduce_sum(f)
        g = tape.gradient(loss, [y, du])
        assert all(np.isfinite(gi.data).all() for gi in g)


def test_hjb_small_lambda_limit():
    p = make_problem("hjb", 2, lam=1e-4)
    y, y_se, _, _ = conditional_mc(p, 0.0, p.x0, 200_000, seed=1)
    b = stream(2, "direct").standard_normal((200_000, 2))
    gx = p.g(math.sqrt(2.0) * b)[:, 0]
    direct, se = gx.mean(), gx.std() / math.sqrt(len(gx))
    assert abs(y - direct) <= 3 * math.hypot(y_se, se) + 1e-4  # O(lam) bias allowance


def test_hjb_self_consistency_at_interior_point():
    p = make_problem("hjb", 2)
    x = np.array([0.5, 0.0])
    a = conditional_mc(p, 0.0, x, 50_000, seed=1)
    b = conditional_mc(p, 0.0, x, 50_000, seed=2)
    assert abs(a[0] - b[0]) <= 3 * math.hypot(a[1], b[1])
    assert np.all(np.abs(a[2] - b[2]) <= 3 * np.hypot(a[3], b[3]))


def test_mc_is_overflow_safe():
    p = make_problem("hjb", 2, lam=800.0)
    y, se, _, _ = conditional_mc(p, 0.0, p.x0, 10_000, seed=0)
    assert np.isfinite(y) and np.isfinite(se)


def test_nonlip_baseline_close_to_reference_at_small_sample():
    res = mc_baseline(make_problem("nonlip", 10), 200_000, seed=3)
    assert abs(res.y0 - 4.6585) <= 5 * res.y0_se + 2e-3
    assert res.y0_se > 0 and all(s > 0 for s in res.z0_se)


def test_baseline_cache_roundtrip(tmp_path):
    p = make_problem("hjb", 3)
    cache = BaselineCache(str(tmp_path / "b.json"))
    res, key = cache.get_or_compute(p, 1000, 4)
    again = BaselineCache(str(tmp_path / "b.json")).get(p, 1000, 4)
    assert again == res and key.startswith("hjb|d=3")
    y, z, label = point_reference(p, n_samples=1000, seed=4, cache=cache)
    assert label == f"mc:{key}" and y == res.y0
    np.testing.assert_array_equal(z, 0.0)  # symmetric terminal at the origin


def test_references_for_literature_only_problem():
    p = make_problem("bs_default", 2)
    y, z, label = point_reference(p)
    assert (y, z, label) == (47.3, None, "literature")
    with pytest.raises(ReferenceUnavailable):
        reference_trajectory(p, np.ones((1, 2, 2)), np.array([0.0, 1.0]))


def test_problem_key_is_stable_and_parameter_sensitive():
    a, b = make_problem("osc_square", 2), make_problem("osc_square", 2)
    assert a.key() == b.key()
    assert make_problem("osc_square", 2, r=0.2).key() != a.key()
