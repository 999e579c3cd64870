import numpy as np
import pytest

from semilin import autodiff as ad
from semilin import networks as nw

import fd_oracle
from param_table import PARAM_COUNTS


@pytest.mark.parametrize("arch", sorted(PARAM_COUNTS))
@pytest.mark.parametrize("col,d", [(0, 10), (1, 100)])
def test_parameter_counts_match_table(arch, col, d):
    assert nw.param_count(nw.NetworkSpec(arch, d, n_steps=100)) == PARAM_COUNTS[arch][col]


def _inputs(spec, batch, rng):
    return {
        "t": np.full((batch, 1), -0.3),
        "X": rng.normal(size=(batch, spec.d)),
        "Y": rng.normal(size=(batch, 1)),
        "g": rng.normal(size=(batch, 1)),
    }


def _zero(net, names=None):
    for n, p in net.named_parameters():
        if names is None or any(n.startswith(k) for k in names):
            p.data[...] = 0.0


def test_zero_weights_give_zero_kappa():
    spec = nw.NetworkSpec("b", 3, n_steps=4)
    net = nw.build(spec, seed=1)
    _zero(net)
    k, _ = nw.forward_kappa(net, _inputs(spec, 5, np.random.default_rng(0)), step=2)
    np.testing.assert_array_equal(ad._data(k), 0.0)


def test_residual_block_with_zero_inner_weights_is_identity():
    rng = np.random.default_rng(0)
    deep = nw.build(nw.NetworkSpec("c", 3, h=3, n_steps=3), seed=2)
    shallow = nw.build(nw.NetworkSpec("c", 3, h=1, n_steps=3), seed=2)
    for name, p in shallow.named_parameters():
        p.data = deep.params[name].data.copy()
    _zero(deep, ["step1.L2", "step1.L3"])
    inp = _inputs(deep.spec, 6, rng)
    a, _ = nw.forward_kappa(deep, inp, step=1)
    b, _ = nw.forward_kappa(shallow, inp, step=1)
    np.testing.assert_array_equal(ad._data(a), ad._data(b))


def test_lstm_with_zero_gate_weights_outputs_bias():
    spec = nw.NetworkSpec("g", 2)
    net = nw.build(spec, seed=0)
    _zero(net, ["L1", "L2"])
    k, state = nw.forward_kappa(net, _inputs(spec, 3, np.random.default_rng(0)), state=nw.initial_state(net, 3))
    for h, _ in state.layers:
        np.testing.assert_array_equal(ad._data(h), 0.0)
    np.testing.assert_array_equal(ad._data(k), np.tile(net.params["out.b"].data, (3, 1)))


def test_arch_b_zero_output_layer_gives_zero_u_and_v():
    net = nw.build(nw.NetworkSpec("B", 3), seed=0)
    _zero(net, ["out."])
    u, v = nw.forward_uv(net, np.zeros(4), np.random.default_rng(1).normal(size=(4, 3)))
    assert ad._data(u).shape == (4, 1) and ad._data(v).shape == (4, 3)
    np.testing.assert_array_equal(ad._data(u), 0.0)
    np.testing.assert_array_equal(ad._data(v), 0.0)


def test_arch_a_subnetworks_are_separate():
    net = nw.build(nw.NetworkSpec("A", 2), seed=0)
    x = np.random.default_rng(1).normal(size=(5, 2))
    _, v0 = nw.forward_uv(net, np.zeros(5), x)
    for n, p in net.named_parameters():
        if n.startswith("u."):
            p.data = p.data + 0.37
    u1, v1 = nw.forward_uv(net, np.zeros(5), x)
    np.testing.assert_array_equal(ad._data(v0), ad._data(v1))


def test_arch_c_input_gradient_matches_network_differences():
    net = nw.build(nw.NetworkSpec("C", 2), seed=4)
    x = np.random.default_rng(2).normal(size=(6, 2))
    with ad.Tape() as tape:
        X = tape.watch(ad.tensor(x))
        u, _ = nw.forward_uv(net, np.full(6, 0.2), X)
        du = ad.grad_wrt_input(u, X, tape).data
    h = 1e-5
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        up = ad._data(nw.forward_uv(net, np.full(6, 0.2), x + e)[0])[:, 0]
        um = ad._data(nw.forward_uv(net, np.full(6, 0.2), x - e)[0])[:, 0]
        np.testing.assert_allclose(du[:, j], (up - um) / (2 * h), rtol=1e-4, atol=1e-9)


@pytest.mark.parametrize("arch", ["g", "h", "i", "j"])
def test_recurrent_sequence_consistency(arch):
    spec = nw.NetworkSpec(arch, 3)
    net = nw.build(spec, seed=5)
    rng = np.random.default_rng(6)
    seq = [_inputs(spec, 4, rng) for _ in range(5)]
    outs, final = nw.forward_sequence(net, seq)
    state = nw.initial_state(net, 4)
    for k, inp in enumerate(seq):
        y, state = nw.forward_kappa(net, inp, state=state)
        np.testing.assert_array_equal(ad._data(y), ad._data(outs[k]))
    for (h1, c1), (h2, c2) in zip(state.layers, final.layers):
        np.testing.assert_array_equal(ad._data(h1), ad._data(h2))


def test_per_step_networks_share_no_parameters():
    spec = nw.NetworkSpec("b", 2, n_steps=4)
    net = nw.build(spec, seed=0)
    inp = _inputs(spec, 3, np.random.default_rng(0))
    with ad.Tape() as tape:
        k, _ = nw.forward_kappa(net, inp, step=2)
        loss = ad.reduce_sum(ad.square(k))
    names = [n for n, _ in net.named_parameters()]
    grads = tape.gradient(loss, net.parameters())
    for n, g in zip(names, grads):
        if not n.startswith("step2."):
            assert not np.any(g.data), n


def test_per_step_zero_returns_free_kappa0():
    spec = nw.NetworkSpec("a", 2, n_steps=3)
    net = nw.build(spec, seed=0)
    net.params["kappa0"].data[:] = [0.5, -1.0]
    k, _ = nw.forward_kappa(net, _inputs(spec, 4, np.random.default_rng(0)), step=0)
    np.testing.assert_array_equal(ad._data(k), np.tile([0.5, -1.0], (4, 1)))


def test_batchnorm_restricted_to_arch_a():
    with pytest.raises(ValueError):
        nw.NetworkSpec("b", 2, batchnorm=True)
    assert nw.NetworkSpec("a", 2).batchnorm


@pytest.mark.parametrize("arch", nw.ALL_ARCHS)
def test_architecture_gradients_match_finite_differences(arch):
    spec = nw.NetworkSpec(arch, 2, h=2, w=3, n_steps=3)
    net = nw.build(spec, seed=9)
    rng = np.random.default_rng(10)
    batch = 4
    inp = _inputs(spec, batch, rng)
    arrays = [p.data.copy() for p in net.parameters()]

    def forward():
        if arch in nw.FIXED_POINT_ARCHS:
            u, v = nw.forward_uv(net, np.full(batch, 0.1), inp["X"])
            return u if v is None else ad.concat([u, v], axis=-1)
        if arch in nw.PER_STEP:
            return nw.forward_kappa(net, inp, step=1, update_stats=False)[0]
        return nw.forward_sequence(net, [inp, inp])[0][-1]

    def fn(*params):
        return _with_params(net, params, forward)

    assert fd_oracle.check_case(fn, arrays, rng) <= 1.0


def _with_params(net, params, call):
    """Run ``call`` with ``net`` temporarily holding ``params`` (in ``parameters()`` order)."""
    names = list(net.params)
    old = dict(net.params)
    bn_old = {k: (st.gamma, st.beta) for k, st in net.bn.items()}
    it = iter(params)
    for name in names:
        net.params[name] = next(it)
    for st in net.bn.values():
        st.gamma, st.beta = next(it), next(it)
    try:
        return call()
    finally:
        net.params.update(old)
        for k, (g, b) in bn_old.items():
            net.bn[k].gamma, net.bn[k].beta = g, b


def test_scaler_examples():
    s = nw.InputScaler(T=1.0, dt=0.01, x_mean=[1.0, 2.0], x_std=[0.5, 2.0], y_mean=3.0)
    assert s.scale_t(0.0) == pytest.approx(-1.0)
    assert s.scale_t(0.99) == pytest.approx(1.0)
    np.testing.assert_array_equal(s.scale_x(np.array([[1.0, 2.0]])), [[0.0, 0.0]])
    with pytest.raises(ValueError):
        nw.InputScaler(1.0, 0.01, [0.0], [0.0], 1.0)


def test_scaler_fit_and_json_roundtrip():
    rng = np.random.default_rng(0)
    paths = rng.normal(2.0, 3.0, size=(200, 11, 2))
    s = nw.InputScaler.fit(paths, np.full((200, 1), 4.0), 1.0, 0.1)
    assert s.y_mean == 4.0 and np.all(s.x_std > 0)
    s2 = nw.InputScaler.from_json(s.to_json())
    np.testing.assert_array_equal(s2.x_mean, s.x_mean)


def test_build_is_deterministic_per_seed():
    a = nw.build(nw.NetworkSpec("f", 3), seed=1)
    b = nw.build(nw.NetworkSpec("f", 3), seed=1)
    c = nw.build(nw.NetworkSpec("f", 3), seed=2)
    np.testing.assert_array_equal(a.get_flat(), b.get_flat())
    assert not np.array_equal(a.get_flat(), c.get_flat())


def test_lstm_forget_bias_and_bias_scale():
    net = nw.build(nw.NetworkSpec("g", 10), seed=0)
    b = net.params["L1.b"].data
    w = 20
    assert abs(b[w : 2 * w].mean() - 1.0) < 0.1
    assert 0.05 < net.params["out.b"].data.std() < 0.2


def test_checkpoint_roundtrip(tmp_path):
    net = nw.build(nw.NetworkSpec("a", 2, n_steps=3), seed=3)
    spec = net.spec
    inp = _inputs(spec, 8, np.random.default_rng(0))
    nw.forward_kappa(net, inp, step=1)  # moves the running statistics
    path = str(tmp_path / "ck")
    nw.save_checkpoint(net, path, extra={"note": 1})
    assert nw.checkpoint_exists(path)
    net2, extra = nw.load_checkpoint(path)
    assert extra == {"note": 1}
    np.testing.assert_array_equal(net.get_flat(), net2.get_flat())
    for k in net.bn:
        np.testing.assert_array_equal(net.bn[k].moving_mean, net2.bn[k].moving_mean)
    a, _ = nw.forward_kappa(net, inp, step=1, training=False)
    b, _ = nw.forward_kappa(net2, inp, step=1, training=False)
    np.testing.assert_array_equal(ad._data(a), ad._data(b))


def test_snapshot_restore():
    net = nw.build(nw.NetworkSpec("C", 2), seed=0)
    snap = net.snapshot()
    before = net.get_flat().copy()
    for p in net.parameters():
        p.data = p.data + 1.0
    net.restore(snap)
    np.testing.assert_array_equal(net.get_flat(), before)
