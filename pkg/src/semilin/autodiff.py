"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Operations are recorded on the active :class:`Tape` (define-by-run).  Every
vector-Jacobian product is itself written with the operations of this module,
so a backward sweep run with ``create_graph=True`` is recorded too and can be
differentiated once more.  The fixed-point losses need exactly that: they
contain the input gradient of a network, and the optimizer needs the
parameter gradient of the loss.

Functions accept plain ``numpy`` arrays as well as :class:`Tensor` objects.
When no argument is a tensor, the plain array result is returned, which lets
PDE drivers be written once for both data and graph evaluation.
"""

from __future__ import annotations

import itertools
import threading

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "BatchNormState",
    "NonFiniteError",
    "TapeError",
    "tensor",
    "parameter",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "concat",
    "affine",
    "relu",
    "elu",
    "tanh",
    "sigmoid",
    "sin",
    "cos",
    "exp",
    "log",
    "sqrt",
    "square",
    "clamp",
    "abs_floor",
    "reduce_sum",
    "reduce_mean",
    "batchnorm",
    "transpose",
    "slice_cols",
    "take",
    "scatter_add",
    "grad_wrt_input",
    "no_record",
]

DTYPE = np.float64
_ids = itertools.count()
_local = threading.local()

#: Run an ``isfinite`` scan on every op output.
CHECK_FINITE = True


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class TapeError(RuntimeError):
    """Misuse of the tape (double backward, unflagged input, ...)."""


def _active_tape():
    return getattr(_local, "tape", None)


def _recording():
    return getattr(_local, "recording", True)


class no_record:
    """Context manager suspending tape recording on this thread."""

    def __enter__(self):
        self._prev = _recording()
        _local.recording = False
        return self

    def __exit__(self, *exc):
        _local.recording = self._prev
        return False


class Tensor:
    """Dense array plus bookkeeping for the tape.

    ``trainable`` tensors are parameters: using one on an active tape adds
    it to that tape's parameter registry.
    """

    __array_priority__ = 1000
    __slots__ = ("data", "id", "trainable", "name", "_tape")

    def __init__(self, data, trainable=False, name=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.id = next(_ids)
        self.trainable = trainable
        self.name = name
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = "param" if self.trainable else "tensor"
        return f"{tag}#{self.id}(shape={self.shape})"

    # arithmetic sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    @property
    def T(self):
        return transpose(self)


def tensor(data):
    return Tensor(data)


def parameter(data, name=None):
    return Tensor(data, trainable=True, name=name)


class _Node:
    __slots__ = ("kind", "inputs", "out", "vjp", "index")

    def __init__(self, kind, inputs, out, vjp, index):
        self.kind = kind
        self.inputs = inputs
        self.out = out
        self.vjp = vjp
        self.index = index


class Tape:
    """Append-only record of operations.

    Use as a context manager; ops executed inside are recorded when at least
    one input is tracked (a trainable parameter, a watched input, or the
    output of an earlier recorded node).
    """

    def __init__(self):
        self.nodes = []
        self.parameters = {}
        self.watched = {}
        self._tracked = set()
        self._consumed = False
        self._prev = []

    def __enter__(self):
        # a stack, since backward(create_graph=True) re-enters the tape
        self._prev.append(_active_tape())
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = self._prev.pop()
        return False

    def watch(self, t):
        """Flag ``t`` for differentiation (the input of a D-hat evaluation)."""
        if not isinstance(t, Tensor):
            raise TypeError("only Tensors can be watched")
        self.watched[t.id] = t
        self._tracked.add(t.id)
        return t

    def _is_tracked(self, t):
        if t.trainable:
            if t.id not in self.parameters:
                self.parameters[t.id] = t
                self._tracked.add(t.id)
            return True
        return t.id in self._tracked

    def _record(self, kind, inputs, out, vjp):
        node = _Node(kind, inputs, out, vjp, len(self.nodes))
        self.nodes.append(node)
        self._tracked.add(out.id)
        out._tape = self
        return node

    def _relevant(self, sources, n_nodes):
        """Ids of tensors lying downstream of ``sources``."""
        rel = set(sources)
        for node in self.nodes[:n_nodes]:
            for t in node.inputs:
                if t.id in rel:
                    rel.add(node.out.id)
                    break
        return rel

    def backward(self, loss, sources=None, create_graph=False, seed=None):
        """Reverse sweep from ``loss``; returns ``{tensor id: Tensor}``.

        ``sources`` restricts which leaves need gradients (default: every
        registered parameter and watched input).  With ``create_graph`` the
        sweep is recorded on this tape and the tape stays usable; otherwise
        it is consumed.
        """
        if self._consumed:
            raise TapeError("tape already consumed by a backward pass; re-record the forward pass")
        if not isinstance(loss, Tensor) or loss.id not in self._tracked:
            raise TapeError("loss was not produced on this tape")
        if seed is None:
            if loss.data.size != 1:
                raise TapeError(f"loss must be scalar, got shape {loss.shape}")
            seed = np.ones_like(loss.data)
        if sources is None:
            src = set(self.parameters) | set(self.watched)
        else:
            src = {s.id for s in sources}
        n_nodes = len(self.nodes)
        rel = self._relevant(src, n_nodes)
        grads = {loss.id: Tensor(seed)}

        def run():
            for node in reversed(self.nodes[:n_nodes]):
                g = grads.pop(node.out.id, None) if node.out.id not in src else grads.get(node.out.id)
                if g is None:
                    continue
                needs = tuple(t.id in rel for t in node.inputs)
                if not any(needs):
                    continue
                gin = node.vjp(g, needs)
                for t, gi, need in zip(node.inputs, gin, needs):
                    if not need or gi is None:
                        continue
                    prev = grads.get(t.id)
                    grads[t.id] = gi if prev is None else add(prev, gi)

        if create_graph:
            with self:
                run()
        else:
            with no_record():
                run()
            self._consumed = True
        return {k: v for k, v in grads.items() if k in src}

    def gradient(self, loss, sources, create_graph=False):
        """Gradients of ``loss`` w.r.t. each of ``sources`` (zeros if unreachable)."""
        g = self.backward(loss, sources=sources, create_graph=create_graph)
        return [g.get(s.id, Tensor(np.zeros_like(s.data))) for s in sources]


# ---------------------------------------------------------------------------
# op plumbing


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check(kind, arr, node_id=None):
    if CHECK_FINITE and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite output in op '{kind}' (node {node_id})")
    return arr


def _make(kind, out_data, args, vjp):
    """Wrap an op result; record it when some tensor input is tracked."""
    tape = _active_tape()
    out = Tensor(out_data)
    if tape is not None and _recording():
        tensors = [a for a in args if isinstance(a, Tensor)]
        if any(tape._is_tracked(t) for t in tensors):
            inputs = tuple(_as_tensor(a) for a in args)
            node = tape._record(kind, inputs, out, vjp)
            _check(kind, out.data, node.index)
            return out
    _check(kind, out.data)
    return out


def _any_tensor(*args):
    return any(isinstance(a, Tensor) for a in args)


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DTYPE)


def _sum_to_shape(g, shape):
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == tuple(shape):
        return g
    nlead = g.ndim - len(shape)
    axes = tuple(range(nlead)) + tuple(
        i + nlead for i, s in enumerate(shape) if s == 1 and g.shape[i + nlead] != 1
    )
    r = reduce_sum(g, axis=axes, keepdims=True)
    if nlead:
        r = reshape(r, shape)
    return r


def reshape(x, shape):
    if not _any_tensor(x):
        return np.reshape(x, shape)
    in_shape = x.shape

    def vjp(g, needs):
        return (reshape(g, in_shape),)

    return _make("reshape", np.reshape(x.data, shape), (x,), vjp)


def broadcast_to(x, shape):
    if not _any_tensor(x):
        return np.broadcast_to(x, shape)
    in_shape = x.shape

    def vjp(g, needs):
        return (_sum_to_shape(g, in_shape),)

    return _make("broadcast", np.broadcast_to(x.data, shape).copy(), (x,), vjp)


# ---------------------------------------------------------------------------
# elementwise binary ops (numpy broadcasting, gradients summed back)


def add(a, b):
    if not _any_tensor(a, b):
        return np.add(a, b)
    sa, sb = np.shape(_data(a)), np.shape(_data(b))

    def vjp(g, needs):
        return (
            _sum_to_shape(g, sa) if needs[0] else None,
            _sum_to_shape(g, sb) if needs[1] else None,
        )

    return _make("add", _data(a) + _data(b), (a, b), vjp)


def sub(a, b):
    if not _any_tensor(a, b):
        return np.subtract(a, b)
    sa, sb = np.shape(_data(a)), np.shape(_data(b))

    def vjp(g, needs):
        return (
            _sum_to_shape(g, sa) if needs[0] else None,
            _sum_to_shape(neg(g), sb) if needs[1] else None,
        )

    return _make("sub", _data(a) - _data(b), (a, b), vjp)


def mul(a, b):
    if not _any_tensor(a, b):
        return np.multiply(a, b)
    sa, sb = np.shape(_data(a)), np.shape(_data(b))

    def vjp(g, needs):
        return (
            _sum_to_shape(mul(g, b), sa) if needs[0] else None,
            _sum_to_shape(mul(g, a), sb) if needs[1] else None,
        )

    return _make("mul", _data(a) * _data(b), (a, b), vjp)


def div(a, b):
    if not _any_tensor(a, b):
        return np.divide(a, b)
    sa, sb = np.shape(_data(a)), np.shape(_data(b))

    def vjp(g, needs):
        ga = gb = None
        if needs[0]:
            ga = _sum_to_shape(div(g, b), sa)
        if needs[1]:
            gb = _sum_to_shape(neg(div(mul(g, a), square(b))), sb)
        return ga, gb

    return _make("div", _data(a) / _data(b), (a, b), vjp)


def neg(x):
    if not _any_tensor(x):
        return np.negative(x)

    def vjp(g, needs):
        return (neg(g),)

    return _make("neg", -x.data, (x,), vjp)


# ---------------------------------------------------------------------------
# linear algebra


def transpose(x):
    if not _any_tensor(x):
        return np.transpose(x)

    def vjp(g, needs):
        return (transpose(g),)

    return _make("transpose", x.data.T.copy(), (x,), vjp)


def matmul(a, b):
    """2-D matrix product."""
    A, B = _data(a), _data(b)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise ValueError(f"matmul shape mismatch: {A.shape} @ {B.shape}")
    if not _any_tensor(a, b):
        return A @ B

    def vjp(g, needs):
        return (
            matmul(g, transpose(b)) if needs[0] else None,
            matmul(transpose(a), g) if needs[1] else None,
        )

    return _make("matmul", A @ B, (a, b), vjp)


def affine(x, w, b=None):
    """``x @ w + b`` as one node (``b`` optional)."""
    X, W = _data(x), _data(w)
    if X.ndim != 2 or W.ndim != 2 or X.shape[1] != W.shape[0]:
        raise ValueError(f"affine shape mismatch: {X.shape} @ {W.shape}")
    out = X @ W
    if b is not None:
        B = _data(b)
        if B.shape != (W.shape[1],):
            raise ValueError(f"affine bias shape {B.shape} != ({W.shape[1]},)")
        out = out + B
    if not _any_tensor(x, w, b):
        return out
    args = (x, w) if b is None else (x, w, b)

    def vjp(g, needs):
        gx = matmul(g, transpose(w)) if needs[0] else None
        gw = matmul(transpose(x), g) if needs[1] else None
        if b is None:
            return gx, gw
        gb = reduce_sum(g, axis=0) if needs[2] else None
        return gx, gw, gb

    return _make("affine", out, args, vjp)


def concat(xs, axis=-1):
    datas = [_data(x) for x in xs]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as e:
        raise ValueError(f"concat shape mismatch: {[d.shape for d in datas]}") from e
    if not _any_tensor(*xs):
        return out
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [d.shape[ax] for d in datas])

    def vjp(g, needs):
        return tuple(
            _slice_axis(g, int(bounds[i]), int(bounds[i + 1]), ax) if need else None
            for i, need in enumerate(needs)
        )

    return _make("concat", out, tuple(xs), vjp)


def _slice_axis(x, start, stop, axis):
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    if not _any_tensor(x):
        return np.asarray(x)[idx]
    full = x.shape

    def vjp(g, needs):
        return (_pad_axis(g, full, start, axis),)

    return _make("slice", x.data[idx].copy(), (x,), vjp)


def _pad_axis(x, full_shape, start, axis):
    stop = start + x.shape[axis]
    idx = [slice(None)] * len(full_shape)
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = np.zeros(full_shape, dtype=DTYPE)
    out[idx] = _data(x)
    if not _any_tensor(x):
        return out

    def vjp(g, needs):
        return (_slice_axis(g, start, stop, axis),)

    return _make("pad", out, (x,), vjp)


def slice_cols(x, start, stop):
    """Columns ``start:stop`` of a 2-D array."""
    return _slice_axis(x, start, stop, -1)


def take(x, idx):
    """Rows ``x[idx]`` (integer index array)."""
    idx = np.asarray(idx, dtype=np.intp)
    if not _any_tensor(x):
        return np.asarray(x)[idx]
    n = x.shape[0]

    def vjp(g, needs):
        return (scatter_add(g, idx, n),)

    return _make("take", x.data[idx], (x,), vjp)


def _scatter_rows(vals, idx, n):
    out = np.zeros((n,) + vals.shape[1:], dtype=DTYPE)
    if vals.ndim == 1:
        return np.bincount(idx, weights=vals, minlength=n).astype(DTYPE)
    flat = vals.reshape(len(vals), -1)
    o = out.reshape(n, -1)
    for j in range(flat.shape[1]):
        o[:, j] = np.bincount(idx, weights=flat[:, j], minlength=n)
    return out


def scatter_add(x, idx, n):
    """``out[idx[k]] += x[k]`` into ``n`` rows; sequential, deterministic order."""
    idx = np.asarray(idx, dtype=np.intp)
    X = _data(x)
    if X.shape[0] != len(idx):
        raise ValueError(f"scatter_add: {X.shape[0]} rows but {len(idx)} indices")
    out = _scatter_rows(X, idx, n)
    if not _any_tensor(x):
        return out

    def vjp(g, needs):
        return (take(g, idx),)

    return _make("scatter_add", out, (x,), vjp)


# ---------------------------------------------------------------------------
# unary ops


def relu(x):
    if not _any_tensor(x):
        return np.maximum(x, 0.0)
    mask = (x.data > 0).astype(DTYPE)

    def vjp(g, needs):
        return (mul(g, mask),)

    return _make("relu", x.data * mask, (x,), vjp)


def elu(x):
    """ELU with alpha = 1."""
    X = _data(x)
    pos = X > 0
    out = np.where(pos, X, np.expm1(np.minimum(X, 0.0)))
    if not _any_tensor(x):
        return out
    mask = pos.astype(DTYPE)
    res = None

    def vjp(g, needs):
        # d elu = 1 on x > 0, elu(x) + 1 elsewhere
        deriv = add(mul(add(res, 1.0), 1.0 - mask), mask)
        return (mul(g, deriv),)

    res = _make("elu", out, (x,), vjp)
    return res


def tanh(x):
    if not _any_tensor(x):
        return np.tanh(x)
    res = None

    def vjp(g, needs):
        return (mul(g, sub(1.0, square(res))),)

    res = _make("tanh", np.tanh(x.data), (x,), vjp)
    return res


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x):
    if not _any_tensor(x):
        return _sigmoid(np.asarray(x, dtype=DTYPE))
    res = None

    def vjp(g, needs):
        return (mul(g, mul(res, sub(1.0, res))),)

    res = _make("sigmoid", _sigmoid(x.data), (x,), vjp)
    return res


def sin(x):
    if not _any_tensor(x):
        return np.sin(x)

    def vjp(g, needs):
        return (mul(g, cos(x)),)

    return _make("sin", np.sin(x.data), (x,), vjp)


def cos(x):
    if not _any_tensor(x):
        return np.cos(x)

    def vjp(g, needs):
        return (neg(mul(g, sin(x))),)

    return _make("cos", np.cos(x.data), (x,), vjp)


def exp(x):
    if not _any_tensor(x):
        return np.exp(x)
    res = None

    def vjp(g, needs):
        return (mul(g, res),)

    res = _make("exp", np.exp(x.data), (x,), vjp)
    return res


def log(x):
    if not _any_tensor(x):
        return np.log(x)

    def vjp(g, needs):
        return (div(g, x),)

    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _make("log", out, (x,), vjp)


def sqrt(x):
    if not _any_tensor(x):
        return np.sqrt(x)
    res = None

    def vjp(g, needs):
        return (div(g, mul(2.0, res)),)

    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)
    res = _make("sqrt", out, (x,), vjp)
    return res


def square(x):
    if not _any_tensor(x):
        return np.square(x)

    def vjp(g, needs):
        return (mul(g, mul(2.0, x)),)

    return _make("square", np.square(x.data), (x,), vjp)


def clamp(x, lo, hi):
    """Saturate to ``[lo, hi]``; zero gradient strictly outside, one on the closed interval."""
    lo_a, hi_a = np.asarray(lo, dtype=DTYPE), np.asarray(hi, dtype=DTYPE)
    if np.any(lo_a > hi_a):
        raise ValueError("clamp requires lo <= hi")
    X = _data(x)
    out = np.minimum(np.maximum(X, lo_a), hi_a)
    if not _any_tensor(x):
        return out
    mask = ((X >= lo_a) & (X <= hi_a)).astype(DTYPE)

    def vjp(g, needs):
        return (mul(g, mask),)

    return _make("clamp", out, (x,), vjp)


def abs_floor(x, eps):
    """Replace entries with ``|x| < eps`` by ``sign(x) * eps`` (``+eps`` at 0)."""
    X = _data(x)
    small = np.abs(X) < eps
    out = np.where(small, np.where(X < 0, -eps, eps), X)
    if not _any_tensor(x):
        return out
    mask = (~small).astype(DTYPE)

    def vjp(g, needs):
        return (mul(g, mask),)

    return _make("abs_floor", out, (x,), vjp)


# ---------------------------------------------------------------------------
# reductions


def reduce_sum(x, axis=None, keepdims=False):
    if not _any_tensor(x):
        return np.sum(x, axis=axis, keepdims=keepdims)
    in_shape = x.shape
    out = np.sum(x.data, axis=axis, keepdims=True)
    kept_shape = out.shape
    if not keepdims:
        out = np.sum(x.data, axis=axis)

    def vjp(g, needs):
        return (broadcast_to(reshape(g, kept_shape), in_shape),)

    return _make("reduce_sum", np.asarray(out), (x,), vjp)


def reduce_mean(x, axis=None, keepdims=False):
    X = _data(x)
    n = X.size if axis is None else int(np.prod([X.shape[a] for a in np.atleast_1d(axis)]))
    if not _any_tensor(x):
        return np.mean(X, axis=axis, keepdims=keepdims)
    return mul(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# batch normalization


class BatchNormState:
    """Per-feature BN parameters and running statistics."""

    def __init__(self, n_features, momentum=0.99, epsilon=1e-6, name="bn"):
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        self.gamma = parameter(np.ones(n_features), name=f"{name}.gamma")
        self.beta = parameter(np.zeros(n_features), name=f"{name}.beta")
        self.moving_mean = np.zeros(n_features)
        self.moving_var = np.ones(n_features)
        self.momentum = momentum
        self.epsilon = epsilon

    def copy_stats(self):
        return self.moving_mean.copy(), self.moving_var.copy()

    def set_stats(self, stats):
        self.moving_mean, self.moving_var = stats[0].copy(), stats[1].copy()


def batchnorm(x, state, training=True, update_stats=True):
    """Batch normalization of a (batch, features) array.

    Training mode normalizes with the batch statistics (and updates the running
    ones unless ``update_stats`` is false); inference uses the running ones.
    """
    X = _data(x)
    if X.ndim != 2 or X.shape[1] != state.gamma.shape[0]:
        raise ValueError(f"batchnorm expects (batch, {state.gamma.shape[0]}), got {X.shape}")
    gamma, beta, eps = state.gamma, state.beta, state.epsilon
    if training:
        mean = X.mean(axis=0)
        var = X.var(axis=0)
        if update_stats:
            m = state.momentum
            state.moving_mean = m * state.moving_mean + (1 - m) * mean
            state.moving_var = m * state.moving_var + (1 - m) * var
    else:
        mean, var = state.moving_mean, state.moving_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (X - mean) * inv
    out = xhat * gamma.data + beta.data
    if not _any_tensor(x, gamma, beta):
        return out
    def vjp(g, needs):
        gx = gg = gb = None
        if training:
            # recompute the normalization as a graph so the sweep is differentiable
            centered = sub(x, reduce_mean(x, axis=0, keepdims=True))
            inv_t = div(1.0, sqrt(add(reduce_mean(square(centered), axis=0, keepdims=True), eps)))
            xh = mul(centered, inv_t)
        else:
            xh = mul(sub(x, mean), inv)
        if needs[0]:
            gxh = mul(g, gamma)
            if training:
                m1 = reduce_mean(gxh, axis=0, keepdims=True)
                m2 = reduce_mean(mul(gxh, xh), axis=0, keepdims=True)
                gx = mul(inv_t, sub(sub(gxh, m1), mul(xh, m2)))
            else:
                gx = mul(gxh, inv)
        if needs[1]:
            gg = reduce_sum(mul(g, xh), axis=0)
        if needs[2]:
            gb = reduce_sum(g, axis=0)
        return gx, gg, gb

    return _make("batchnorm", out, (x, gamma, beta), vjp)


# ---------------------------------------------------------------------------


def grad_wrt_input(output, inp, tape=None, create_graph=False):
    """Gradient of per-row scalar outputs w.r.t. a watched input (the D-hat operator).

    ``output`` has shape (batch,) or (batch, 1); rows must be independent
    (no training-mode batch norm).  The result has the shape of ``inp``.
    With ``create_graph`` the computation is recorded, so a loss built from
    it can be differentiated w.r.t. the parameters.
    """
    tape = tape or _active_tape()
    if tape is None:
        raise TapeError("grad_wrt_input needs an active tape")
    if inp.id not in tape.watched:
        raise TapeError("input was not flagged with tape.watch before the forward pass")
    if output.ndim == 2 and output.shape[1] != 1 or output.ndim > 2:
        raise ValueError(f"network output must be scalar per row, got {output.shape}")
    was = tape._consumed
    g = tape.backward(output, sources=[inp], create_graph=create_graph, seed=np.ones_like(output.data))
    tape._consumed = was
    return g.get(inp.id, Tensor(np.zeros_like(inp.data)))
