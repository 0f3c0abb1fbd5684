"""Dense float64 tensors with a tape-based reverse-mode gradient.

A :class:`Record` owns every node created while evaluating a model once.
Parameters are registered by name; :meth:`Record.backward` walks the tape
in reverse and returns one gradient array per registered parameter.

Operations accept arbitrary leading batch dimensions where that is natural
(``conv1d_valid`` on ``(..., C_in, L)``, ``dense`` on ``(..., n)``).
"""

from __future__ import annotations

import hashlib
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError

DTYPE = np.float64


class Node:
    """One value on the tape."""

    __slots__ = ("value", "record", "parents", "backward_fn", "requires_grad", "index", "label")

    def __init__(self, value, record, parents=(), backward_fn=None, requires_grad=False, label=""):
        self.value = value
        self.record = record
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.index = -1
        self.label = label

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.label or 'const'}, shape={self.value.shape})"


class Record:
    """Ordered log of primitive applications plus a named parameter registry.

    Single-owner: never share one record between threads while it is being
    extended or differentiated.
    """

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}
        self.check_finite = check_finite
        self._scopes: list[str] = []

    @contextmanager
    def scope(self, name: str):
        self._scopes.append(name)
        try:
            yield
        finally:
            self._scopes.pop()

    @property
    def current_scope(self) -> str:
        return "/".join(self._scopes)

    def _push(self, node: Node) -> Node:
        node.index = len(self.nodes)
        self.nodes.append(node)
        return node

    def param(self, name: str, value) -> Node:
        if name in self.params:
            raise ValueError(f"parameter {name!r} registered twice")
        arr = np.asarray(value, dtype=DTYPE)
        node = self._push(Node(arr, self, requires_grad=True, label=name))
        self.params[name] = node
        return node

    def constant(self, value) -> Node:
        return self._push(Node(np.asarray(value, dtype=DTYPE), self, label="const"))

    def apply(self, op: str, value, parents, backward_fn) -> Node:
        value = np.asarray(value, dtype=DTYPE)
        if self.check_finite and not np.all(np.isfinite(value)):
            where = self.current_scope or "<root>"
            raise NumericError(f"non-finite values produced by {op} in layer {where}")
        requires_grad = any(p.requires_grad for p in parents)
        label = f"{self.current_scope}:{op}" if self._scopes else op
        return self._push(Node(value, self, tuple(parents), backward_fn if requires_grad else None,
                               requires_grad, label))

    def backward(self, loss: Node) -> dict[str, np.ndarray]:
        """Gradients of a scalar ``loss`` for every registered parameter.

        Parameters that do not influence ``loss`` get zero arrays.
        """
        if loss.record is not self or loss.index < 0 or self.nodes[loss.index] is not loss:
            raise ValueError("loss node does not belong to this record")
        if loss.value.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
        grads: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
        for node in reversed(self.nodes[: loss.index + 1]):
            g = grads.get(node.index)
            if g is None or node.backward_fn is None:
                continue
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.value.shape:
                    raise AssertionError(f"{node.label}: gradient shape {pg.shape} != {parent.value.shape}")
                if parent.index in grads:
                    grads[parent.index] = grads[parent.index] + pg
                else:
                    grads[parent.index] = pg
        return {
            name: grads.get(node.index, np.zeros_like(node.value))
            for name, node in self.params.items()
        }


def _rec(*xs) -> Record:
    for x in xs:
        if isinstance(x, Node):
            return x.record
    raise TypeError("at least one operand must be a Node")


def _node(rec: Record, x) -> Node:
    if isinstance(x, Node):
        if x.record is not rec:
            raise ValueError("operands belong to different records")
        return x
    return rec.constant(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Node:
    rec = _rec(a, b)
    a, b = _node(rec, a), _node(rec, b)
    sa, sb = a.value.shape, b.value.shape
    return rec.apply("add", a.value + b.value, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Node:
    rec = _rec(a, b)
    a, b = _node(rec, a), _node(rec, b)
    av, bv = a.value, b.value
    def back(g):
        ga = _unbroadcast(g * bv, av.shape) if a.requires_grad else None
        gb = _unbroadcast(g * av, bv.shape) if b.requires_grad else None
        return ga, gb

    return rec.apply("mul", av * bv, (a, b), back)


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return a.record.apply("scale", a.value * c, (a,), lambda g: (g * c,))


def reshape(a: Node, shape) -> Node:
    old = a.value.shape
    return a.record.apply("reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Node, axes) -> Node:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return a.record.apply("transpose", np.transpose(a.value, axes), (a,),
                          lambda g: (np.transpose(g, inv),))


def take(a: Node, index, axis: int) -> Node:
    """Gather along ``axis`` with an integer index array."""
    index = np.asarray(index)
    shape = a.value.shape

    def back(g):
        out = np.zeros(shape, dtype=DTYPE)
        if axis % len(shape) == 0 and index.ndim == 1 and index.size:
            # segment sums over sorted indices instead of the slow np.add.at
            order = np.argsort(index, kind="stable")
            sidx = index[order]
            starts = np.flatnonzero(np.r_[True, sidx[1:] != sidx[:-1]])
            out[sidx[starts]] = np.add.reduceat(g[order], starts, axis=0)
        else:
            np.add.at(out, (slice(None),) * (axis % len(shape)) + (index,), g)
        return (out,)

    return a.record.apply("take", np.take(a.value, index, axis=axis), (a,), back)


def concat(nodes, axis: int = -1) -> Node:
    rec = _rec(*nodes)
    nodes = [_node(rec, n) for n in nodes]
    sizes = [n.value.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]
    return rec.apply("concat", np.concatenate([n.value for n in nodes], axis=axis), nodes,
                     lambda g: tuple(np.split(g, splits, axis=axis)))


def relu(a: Node) -> Node:
    mask = a.value > 0
    return a.record.apply("relu", np.maximum(a.value, 0.0), (a,), lambda g: (g * mask,))


def matmul(a, b) -> Node:
    """``a @ b`` for operands with at least two dimensions."""
    rec = _rec(a, b)
    a, b = _node(rec, a), _node(rec, b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul operands need at least 2 dimensions")

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape) if b.requires_grad else None
        return ga, gb

    return rec.apply("matmul", av @ bv, (a, b), back)


def sum_all(a: Node) -> Node:
    shape = a.value.shape
    return a.record.apply("sum", np.sum(a.value), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Node) -> Node:
    shape, n = a.value.shape, a.value.size
    return a.record.apply("mean", np.mean(a.value), (a,),
                          lambda g: (np.full(shape, g / n, dtype=DTYPE),))


# ---------------------------------------------------------------------------
# layer primitives
# ---------------------------------------------------------------------------


def conv1d_valid(x, kernels, bias) -> Node:
    """Valid (unpadded) cross-correlation over the last axis.

    ``x`` is ``(..., C_in, L)``, ``kernels`` ``(C_out, C_in, k)``, ``bias``
    ``(C_out,)``; the result is ``(..., C_out, L - k + 1)``.
    """
    rec = _rec(x, kernels, bias)
    x, kernels, bias = _node(rec, x), _node(rec, kernels), _node(rec, bias)
    xv, wv, bv = x.value, kernels.value, bias.value
    if wv.ndim != 3 or bv.shape != (wv.shape[0],):
        raise ValueError(f"bad kernel/bias shapes {wv.shape}, {bv.shape}")
    c_out, c_in, k = wv.shape
    if xv.ndim < 2 or xv.shape[-2] != c_in:
        raise ValueError(f"input shape {xv.shape} incompatible with {c_in} input channels")
    length = xv.shape[-1]
    if k > length:
        raise ValueError(f"kernel length {k} exceeds input length {length}")
    lead = xv.shape[:-2]
    l_out = length - k + 1
    x3 = xv.reshape(-1, c_in, length)
    # (N, C_in, L', k) -> (N, L', C_in*k)
    cols = sliding_window_view(x3, k, axis=-1).transpose(0, 2, 1, 3).reshape(x3.shape[0], l_out, c_in * k)
    wmat = wv.reshape(c_out, c_in * k)
    out = cols @ wmat.T + bv  # (N, L', C_out)
    out = np.swapaxes(out, 1, 2).reshape(lead + (c_out, l_out))

    def back(g):
        g3 = np.swapaxes(g.reshape(-1, c_out, l_out), 1, 2)  # (N, L', C_out)
        gw = np.tensordot(g3, cols, axes=([0, 1], [0, 1])).reshape(wv.shape)
        gb = g3.sum(axis=(0, 1))
        if not x.requires_grad:
            return None, gw, gb
        gcols = (g3 @ wmat).reshape(-1, l_out, c_in, k)
        gx = np.zeros_like(x3)
        for j in range(k):
            gx[:, :, j:j + l_out] += np.swapaxes(gcols[:, :, :, j], 1, 2)
        return gx.reshape(xv.shape), gw, gb

    return rec.apply("conv1d", out, (x, kernels, bias), back)


def max_over(x: Node, axis: int = -1):
    """Max along ``axis``; returns ``(node, argmax)``.

    Ties resolve to the first maximal index, and the gradient flows only
    there.
    """
    xv = x.value
    if xv.shape[axis] < 1:
        raise ValueError("cannot max-pool over an empty axis")
    n = xv.shape[axis]
    if n <= 16:
        # np.argmax is slow over short axes; strict ">" keeps the first maximum
        moved = np.moveaxis(xv, axis, 0)
        out = moved[0].copy()
        idx = np.zeros(out.shape, dtype=np.intp)
        for t in range(1, n):
            better = moved[t] > out
            idx[better] = t
            np.maximum(out, moved[t], out=out)
    else:
        idx = np.argmax(xv, axis=axis)
        out = np.take_along_axis(xv, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def back(g):
        gx = np.zeros_like(xv)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return x.record.apply("max", out, (x,), back), idx


def maxpool_over_time(x: Node):
    """Max over the last (time) axis of a ``(..., C, L)`` input."""
    return max_over(x, axis=-1)


def softmax_array(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    scores = np.asarray(scores, dtype=DTYPE)
    if not np.all(np.isfinite(scores)):
        raise NumericError("softmax input contains non-finite values")
    if scores.shape[axis] < 1:
        raise ValueError("softmax over an empty axis")
    shifted = scores - np.max(scores, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax(x: Node, axis: int = -1) -> Node:
    p = softmax_array(x.value, axis=axis)

    def back(g):
        return (p * (g - np.sum(g * p, axis=axis, keepdims=True)),)

    return x.record.apply("softmax", p, (x,), back)


def dense(x, weight, bias=None) -> Node:
    """Affine map ``x @ weight.T + bias`` over the last axis; weight is ``(m, n)``."""
    rec = _rec(x, weight, bias)
    x, weight = _node(rec, x), _node(rec, weight)
    xv, wv = x.value, weight.value
    if wv.ndim != 2 or xv.shape[-1] != wv.shape[1]:
        raise ValueError(f"dense: input {xv.shape} incompatible with weight {wv.shape}")
    out = xv @ wv.T
    parents = [x, weight]
    if bias is not None:
        bias = _node(rec, bias)
        if bias.value.shape != (wv.shape[0],):
            raise ValueError(f"dense: bias shape {bias.value.shape} != ({wv.shape[0]},)")
        out = out + bias.value
        parents.append(bias)

    def back(g):
        gx = g @ wv if x.requires_grad else None
        gw = g.reshape(-1, wv.shape[0]).T @ xv.reshape(-1, wv.shape[1])
        if bias is None:
            return gx, gw
        return gx, gw, g.reshape(-1, wv.shape[0]).sum(axis=0)

    return rec.apply("dense", out, parents, back)


def dropout(x: Node, rate: float, rng: np.random.Generator | None, training: bool) -> Node:
    """Inverted dropout: kept values are divided by ``1 - rate``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    mask = (rng.random(x.value.shape) >= rate) / (1.0 - rate)
    return x.record.apply("dropout", x.value * mask, (x,), lambda g: (g * mask,))


def mse_loss(pred, target) -> Node:
    rec = _rec(pred, target)
    pred, target = _node(rec, pred), _node(rec, target)
    if pred.value.shape != target.value.shape:
        raise ValueError(f"mse_loss: shape {pred.value.shape} != {target.value.shape}")
    diff = pred.value - target.value
    n = diff.size

    def back(g):
        gp = g * 2.0 * diff / n
        return gp, -gp

    return rec.apply("mse", np.mean(diff * diff), (pred, target), back)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> dict:
    """One Adam update with bias correction. Returns new parameter arrays."""
    for name, p in params.items():
        if name not in grads:
            raise ValueError(f"missing gradient for {name!r}")
        if grads[name].shape != p.shape:
            raise ValueError(f"gradient shape {grads[name].shape} != parameter {name!r} {p.shape}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    out = {}
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        out[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


# ---------------------------------------------------------------------------
# seeded random streams
# ---------------------------------------------------------------------------


def rng_stream(seed: int, label: str = "") -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, label)``.

    The key is derived with SHA-256 so the same pair gives the same draws on
    every platform, and distinct labels give independent streams.
    """
    digest = hashlib.sha256(f"{int(seed)}\x00{label}".encode()).digest()
    key = np.frombuffer(digest[:16], dtype="<u8").copy()
    return np.random.Generator(np.random.Philox(key=key))
