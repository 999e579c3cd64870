"""Network architectures for the Deep BSDE (a-j) and fixed-point (A, B, C) solvers.

Arch ids
    a  per-step FC, ReLU, batch norm on hidden layers
    b  per-step FC, ELU
    c  per-step FC, ELU, input (X, g(X)), residual connections
    d  merged FC on (t, X, Y, g(X)), ELU
    e  d plus shortcut connections re-injecting the input vector
    f  d plus residual connections
    g  stacked LSTM on (t, X)
    h  g with inputs (t, X, Y, g(X))
    i  one LSTM layer followed by residual FC-ELU layers
    j  h with residual connections
    A  two tanh networks for u and Du
    B  one tanh network with a (1 + d) head
    C  one tanh network for u, Du by automatic differentiation (C_bis: same net)

Per-step nets use one network per interior time step, a free Y0 and a free
kappa_0. Merged and recurrent nets share one network over time and output
kappa_0 themselves. LSTM layers use a per-unit (diagonal) recurrent weight.
"""

from __future__ import annotations

import json
import logging
import math
import os
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .rng import stream

log = logging.getLogger(__name__)

PER_STEP = ("a", "b", "c")
MERGED = ("d", "e", "f")
RECURRENT = ("g", "h", "i", "j")
DBSDE_ARCHS = PER_STEP + MERGED + RECURRENT
FIXED_POINT_ARCHS = ("A", "B", "C", "C_bis")
ALL_ARCHS = DBSDE_ARCHS + FIXED_POINT_ARCHS
ARCH_NAMES = {
    "a": "FC_DBSDE",
    "b": "FC_ELU",
    "c": "FC_Residual",
    "d": "FC_Merged",
    "e": "FC_Merged_Shortcut",
    "f": "FC_Merged_Residual",
    "g": "LSTM",
    "h": "Augmented_LSTM",
    "i": "Hybrid_LSTM",
    "j": "Residual_LSTM",
    "A": "FP_Separated",
    "B": "FP_Shared",
    "C": "FP_AutoDiff",
    "C_bis": "FP_AutoDiff",
}
BIAS_STD = 0.1
FORGET_BIAS = 1.0
CHECKPOINT_VERSION = 1


@dataclass
class NetworkSpec:
    arch: str
    d: int
    h: int | None = None
    w: int | None = None
    n_steps: int = 100
    batchnorm: bool | None = None

    def __post_init__(self):
        if self.arch not in ALL_ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.h is None:
            self.h = 3 if self.arch in FIXED_POINT_ARCHS else 2
        if self.w is None:
            self.w = 2 * self.d
        if self.batchnorm is None:
            self.batchnorm = self.arch == "a"
        elif self.batchnorm and self.arch != "a":
            raise ValueError(f"batch norm is only supported in per-step arch 'a', not {self.arch!r}")
        if self.h < 1 or self.w < 1 or self.d < 1:
            raise ValueError("h, w and d must be >= 1")
        if self.arch in PER_STEP and self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")

    @property
    def input_dim(self):
        a, d = self.arch, self.d
        if a in ("a", "b"):
            return d
        if a == "c":
            return d + 1
        if a == "g" or a in FIXED_POINT_ARCHS:
            return d + 1
        return d + 3  # (t, X, Y, g)

    def to_json(self):
        return asdict(self)


class LstmState:
    """Per-layer (hidden, cell) pairs; zeros initially."""

    def __init__(self, layers):
        self.layers = list(layers)

    @classmethod
    def zeros(cls, n_layers, batch, w):
        return cls([(np.zeros((batch, w)), np.zeros((batch, w))) for _ in range(n_layers)])

    def __len__(self):
        return len(self.layers)


class Network:
    """Parameters (trainable tensors) plus batch-norm running statistics."""

    def __init__(self, spec):
        self.spec = spec
        self.params: OrderedDict[str, ad.Tensor] = OrderedDict()
        self.bn: OrderedDict[str, ad.BatchNormState] = OrderedDict()

    # bookkeeping -------------------------------------------------------------
    def _add(self, name, value):
        t = ad.parameter(np.asarray(value, dtype=float), name=name)
        self.params[name] = t
        return t

    def parameters(self):
        """All trainable tensors, batch-norm scales and shifts included."""
        out = list(self.params.values())
        for st in self.bn.values():
            out.extend([st.gamma, st.beta])
        return out

    def named_parameters(self):
        out = list(self.params.items())
        for k, st in self.bn.items():
            out.extend([(f"{k}.gamma", st.gamma), (f"{k}.beta", st.beta)])
        return out

    def param_count(self):
        return int(sum(p.data.size for p in self.parameters()))

    def get_flat(self):
        return np.concatenate([p.data.ravel() for p in self.parameters()])

    def snapshot(self):
        """Copy of all values (trainable and running statistics)."""
        return (
            [p.data.copy() for p in self.parameters()],
            {k: st.copy_stats() for k, st in self.bn.items()},
        )

    def restore(self, snap):
        vals, stats = snap
        for p, v in zip(self.parameters(), vals):
            p.data = v.copy()
        for k, s in stats.items():
            self.bn[k].set_stats(s)

    def init_output_bias(self, value):
        """Start the u head at ``value`` (fixed-point nets)."""
        key = "u.out.b" if "u.out.b" in self.params else "out.b"
        b = self.params[key].data
        b[..., 0] = value


def param_count(spec):
    return build(spec, seed=0).param_count()


# ---------------------------------------------------------------------------
# initialization


class _Init:
    def __init__(self, seed):
        self.seed = seed
        self.k = 0

    def _rng(self):
        self.k += 1
        return stream(self.seed, "init", self.k)

    def xavier(self, fan_in, fan_out, shape=None):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return self._rng().uniform(-bound, bound, shape or (fan_in, fan_out))

    def bias(self, n):
        return BIAS_STD * self._rng().standard_normal(n)


def _dense(net, init, name, n_in, n_out, bias=True):
    net._add(f"{name}.W", init.xavier(n_in, n_out))
    if bias:
        net._add(f"{name}.b", init.bias(n_out))


def _lstm(net, init, name, n_in, w):
    net._add(f"{name}.W", init.xavier(n_in, 4 * w))
    b = init.bias(4 * w)
    b[w : 2 * w] += FORGET_BIAS
    net._add(f"{name}.b", b)
    net._add(f"{name}.U", init.xavier(w, w, shape=(4 * w,)))


def _fc_stack(net, init, prefix, spec, n_in, n_out, shortcut=False, bn=False, first_lstm=False, lstm=False):
    w, h = spec.w, spec.h
    for k in range(1, h + 1):
        fan = n_in if k == 1 else w + (n_in if shortcut else 0)
        if lstm or (first_lstm and k == 1):
            _lstm(net, init, f"{prefix}L{k}", fan, w)
        else:
            _dense(net, init, f"{prefix}L{k}", fan, w, bias=not bn)
            if bn:
                net.bn[f"{prefix}L{k}.bn"] = ad.BatchNormState(w, name=f"{prefix}L{k}.bn")
    _dense(net, init, f"{prefix}out", w + (n_in if shortcut else 0), n_out)


def build(spec, seed=0):
    """Initialized network: Xavier-uniform weights, N(0, 0.1^2) biases."""
    net = Network(spec)
    init = _Init(seed)
    a, d, n_in = spec.arch, spec.d, spec.input_dim
    if a in DBSDE_ARCHS:
        net._add("y0", np.zeros(1))
    if a in PER_STEP:
        net._add("kappa0", np.zeros(d))
        for i in range(1, spec.n_steps):
            _fc_stack(net, init, f"step{i}.", spec, n_in, d, bn=spec.batchnorm)
    elif a in MERGED:
        _fc_stack(net, init, "", spec, n_in, d, shortcut=(a == "e"))
    elif a in ("g", "h", "j"):
        _fc_stack(net, init, "", spec, n_in, d, lstm=True)
    elif a == "i":
        _fc_stack(net, init, "", spec, n_in, d, first_lstm=True)
    elif a == "A":
        _fc_stack(net, init, "u.", spec, n_in, 1)
        _fc_stack(net, init, "v.", spec, n_in, d)
    elif a == "B":
        _fc_stack(net, init, "", spec, n_in, d + 1)
    else:  # C, C_bis
        _fc_stack(net, init, "", spec, n_in, 1)
    return net


# ---------------------------------------------------------------------------
# forward passes


def _act(arch):
    if arch == "a":
        return ad.relu
    if arch in FIXED_POINT_ARCHS:
        return ad.tanh
    return ad.elu


def _residual(arch):
    return arch in ("c", "f", "i", "j")


def _lstm_cell(net, name, x, state):
    w = net.spec.w
    hprev, cprev = state
    z = ad.affine(x, net.params[f"{name}.W"], net.params[f"{name}.b"])
    z = ad.add(z, ad.mul(ad.concat([hprev] * 4, axis=-1), net.params[f"{name}.U"]))
    i_g = ad.sigmoid(ad.slice_cols(z, 0, w))
    f_g = ad.sigmoid(ad.slice_cols(z, w, 2 * w))
    c_t = ad.tanh(ad.slice_cols(z, 2 * w, 3 * w))
    o_g = ad.sigmoid(ad.slice_cols(z, 3 * w, 4 * w))
    c = ad.add(ad.mul(f_g, cprev), ad.mul(i_g, c_t))
    hnew = ad.mul(o_g, ad.tanh(c))
    return hnew, (hnew, c)


def _run_stack(net, prefix, x, training=True, state=None, update_stats=True):
    """Hidden layers plus output layer; returns (output, new recurrent states)."""
    spec = net.spec
    a, h = spec.arch, spec.h
    act = _act(a)
    shortcut = a == "e"
    new_states = []
    state_iter = iter(state.layers) if state is not None else None

    def layer(k, inp):
        name = f"{prefix}L{k}"
        if f"{name}.U" in net.params:
            out, st = _lstm_cell(net, name, inp, next(state_iter))
            new_states.append(st)
            return out
        if shortcut and k > 1:
            inp = ad.concat([inp, x], axis=-1)
        if spec.batchnorm:
            z = ad.matmul(inp, net.params[f"{name}.W"])
            z = ad.batchnorm(z, net.bn[f"{name}.bn"], training=training, update_stats=update_stats)
            return act(z)
        return act(ad.affine(inp, net.params[f"{name}.W"], net.params[f"{name}.b"]))

    out = layer(1, x)
    k = 2
    while k <= h:
        if _residual(a):
            if k + 1 <= h:
                inner = layer(k + 1, layer(k, out))
                k += 2
            else:
                inner = layer(k, out)
                k += 1
            out = ad.add(out, inner)
        else:
            out = layer(k, out)
            k += 1
    if shortcut:
        out = ad.concat([out, x], axis=-1)
    y = ad.affine(out, net.params[f"{prefix}out.W"], net.params[f"{prefix}out.b"])
    return y, (LstmState(new_states) if new_states else None)


_warned_unscaled = False


def _check_scaled(arr):
    global _warned_unscaled
    a = ad._data(arr)
    if not _warned_unscaled and a.size and np.max(np.abs(a)) > 10.0:
        _warned_unscaled = True
        log.warning("network inputs exceed [-10, 10]; are they scaled?")


def n_lstm_layers(spec):
    if spec.arch in ("g", "h", "j"):
        return spec.h
    if spec.arch == "i":
        return 1
    return 0


def initial_state(net, batch):
    return LstmState.zeros(n_lstm_layers(net.spec), batch, net.spec.w)


def forward_kappa(net, inputs, state=None, step=None, training=True, update_stats=True):
    """kappa (approximation of Du) for one time step.

    ``inputs`` maps any of "t", "X", "Y", "g" to scaled arrays/tensors.
    Per-step archs need ``step`` (0 returns the free kappa_0); recurrent
    archs need ``state``. Returns (kappa, new_state).
    """
    spec = net.spec
    a = spec.arch
    if a not in DBSDE_ARCHS:
        raise ValueError(f"arch {a!r} has no kappa head")
    X = inputs["X"]
    batch = ad._data(X).shape[0]
    if a in PER_STEP:
        if step is None:
            raise ValueError("per-step archs need the step index")
        if step == 0:
            k0 = net.params["kappa0"]
            return ad.add(ad.mul(np.ones((batch, 1)), ad.reshape(k0, (1, spec.d))), 0.0), None
        if not 1 <= step < spec.n_steps:
            raise ValueError(f"step {step} out of range for {spec.n_steps} steps")
        feats = [X] if a != "c" else [X, inputs["g"]]
        x = ad.concat(feats, axis=-1) if len(feats) > 1 else X
        _check_scaled(x)
        y, _ = _run_stack(net, f"step{step}.", x, training=training, update_stats=update_stats)
        return y, None
    t = inputs["t"]
    t_col = np.broadcast_to(np.reshape(ad._data(t), (-1, 1)), (batch, 1)) if not isinstance(t, ad.Tensor) else t
    feats = [t_col, X] if a == "g" else [t_col, X, inputs["Y"], inputs["g"]]
    x = ad.concat(feats, axis=-1)
    _check_scaled(x)
    if a in RECURRENT:
        if state is None:
            raise ValueError(f"recurrent arch {a!r} needs an LstmState")
        return _run_stack(net, "", x, state=state)
    y, _ = _run_stack(net, "", x)
    return y, None


def forward_sequence(net, inputs_seq, state=None):
    """Feed a list of per-step input dicts through a recurrent net."""
    outs = []
    batch = ad._data(inputs_seq[0]["X"]).shape[0]
    state = state if state is not None else initial_state(net, batch)
    for inp in inputs_seq:
        k, state = forward_kappa(net, inp, state=state)
        outs.append(k)
    return outs, state


def forward_uv(net, t, X):
    """(u, v) for fixed-point nets on scaled inputs; v is None for C / C_bis."""
    a = net.spec.arch
    if a not in FIXED_POINT_ARCHS:
        raise ValueError(f"arch {a!r} is not a fixed-point network")
    batch = ad._data(X).shape[0]
    t_col = t if isinstance(t, ad.Tensor) else np.broadcast_to(np.reshape(np.asarray(t, dtype=float), (-1, 1)), (batch, 1))
    x = ad.concat([t_col, X], axis=-1)
    if a == "A":
        u, _ = _run_stack(net, "u.", x)
        v, _ = _run_stack(net, "v.", x)
        return u, v
    y, _ = _run_stack(net, "", x)
    if a == "B":
        return ad.slice_cols(y, 0, 1), ad.slice_cols(y, 1, net.spec.d + 1)
    return y, None


# ---------------------------------------------------------------------------
# input scaling


class InputScaler:
    """Centering and rescaling of network inputs."""

    def __init__(self, T, dt, x_mean, x_std, y_mean):
        self.T = float(T)
        self.dt = float(dt)
        self.x_mean = np.asarray(x_mean, dtype=float)
        self.x_std = np.asarray(x_std, dtype=float)
        if np.any(self.x_std <= 0):
            raise ValueError("X_std entries must be positive")
        self.y_mean = float(y_mean)
        if self.y_mean == 0.0:
            log.warning("Y_mean is zero; Y and g(X) inputs are centered but not rescaled")
        self.y_scale = abs(self.y_mean) if self.y_mean != 0.0 else 1.0

    @classmethod
    def fit(cls, paths, g_terminal, T, dt):
        """From M pre-simulated paths (M, N+1, d) and g at maturity (M, 1)."""
        flat = paths.reshape(-1, paths.shape[-1])
        std = flat.std(axis=0)
        std = np.where(std > 1e-12, std, 1.0)
        return cls(T, dt, flat.mean(axis=0), std, float(np.mean(g_terminal)))

    def scale_t(self, t):
        half = 0.5 * (self.T - self.dt)
        return (np.asarray(t, dtype=float) - half) / half

    def scale_x(self, X):
        return ad.div(ad.sub(X, self.x_mean), self.x_std)

    def scale_y(self, Y):
        return ad.mul(ad.sub(Y, self.y_mean), 1.0 / self.y_scale)

    def to_json(self):
        return {"T": self.T, "dt": self.dt, "x_mean": self.x_mean.tolist(), "x_std": self.x_std.tolist(), "y_mean": self.y_mean}

    @classmethod
    def from_json(cls, obj):
        return cls(obj["T"], obj["dt"], obj["x_mean"], obj["x_std"], obj["y_mean"])


def scale_inputs(scaler, t, X, Y=None, gX=None):
    """(t~, X~, Y~, g~); None entries pass through."""
    return (
        None if t is None else scaler.scale_t(t),
        None if X is None else scaler.scale_x(X),
        None if Y is None else scaler.scale_y(Y),
        None if gX is None else scaler.scale_y(gX),
    )


# ---------------------------------------------------------------------------
# checkpoints: flat float64 binary + JSON sidecar


def save_checkpoint(net, path, extra=None):
    entries, chunks, off = [], [], 0
    items = [(n, p.data) for n, p in net.named_parameters()]
    for k, st in net.bn.items():
        items += [(f"{k}.moving_mean", st.moving_mean), (f"{k}.moving_var", st.moving_var)]
    for name, arr in items:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": off})
        chunks.append(arr.ravel())
        off += arr.size
    np.concatenate(chunks).astype("<f8").tofile(path + ".bin")
    meta = {"format": "semilin-checkpoint", "version": CHECKPOINT_VERSION, "spec": net.spec.to_json(), "entries": entries}
    if extra:
        meta["extra"] = extra
    with open(path + ".json", "w") as fh:
        json.dump(meta, fh, indent=1)


def load_checkpoint(path):
    with open(path + ".json") as fh:
        meta = json.load(fh)
    if meta.get("format") != "semilin-checkpoint" or meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError("unsupported checkpoint format or version")
    flat = np.fromfile(path + ".bin", dtype="<f8")
    net = build(NetworkSpec(**meta["spec"]), seed=0)
    table = {n: p for n, p in net.named_parameters()}
    for e in meta["entries"]:
        size = int(np.prod(e["shape"])) if e["shape"] else 1
        val = flat[e["offset"] : e["offset"] + size].reshape(e["shape"])
        name = e["name"]
        if name in table:
            table[name].data = val.copy()
        elif name.endswith(".moving_mean"):
            net.bn[name[: -len(".moving_mean")]].moving_mean = val.copy()
        elif name.endswith(".moving_var"):
            net.bn[name[: -len(".moving_var")]].moving_var = val.copy()
        else:
            raise ValueError(f"unknown checkpoint entry {name}")
    return net, meta.get("extra")


def checkpoint_exists(path):
    return os.path.exists(path + ".json") and os.path.exists(path + ".bin")
