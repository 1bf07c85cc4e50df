"""Dense f64 tensors with a recorded tape for reverse-mode differentiation.

Storage is row-major numpy float64. A Tape records every operation needed to
pull gradients back to its leaves; tensors without a tape handle are plain
immutable values. Tapes are single-threaded; distinct tapes may be used from
different workers concurrently.

Op domains: `log` requires strictly positive input, `div_elem` a denominator
bounded away from zero. Within those domains every forward op maps finite
inputs to finite outputs. `relu` uses the subgradient 0 at exactly 0.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import (
    DetachedNode,
    NonFiniteEvaluation,
    NonScalarLoss,
    ShapeMismatch,
    UnknownOp,
)


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function, any shape."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    neg = ~pos
    ex = np.exp(x[neg])
    out[neg] = ex / (1.0 + ex)
    return out


class Tensor:
    """A dense f64 value, optionally attached to a node on a Tape."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape: "Tape | None" = None, node_id: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return apply("matmul", [self, other])

    def __add__(self, other: "Tensor") -> "Tensor":
        return apply("add", [self, other])

    def __sub__(self, other: "Tensor") -> "Tensor":
        return apply("sub", [self, other])

    def __mul__(self, other: "Tensor") -> "Tensor":
        return apply("mul_elem", [self, other])

    def __repr__(self) -> str:
        tag = "" if self.node_id is None else f", node={self.node_id}"
        return f"Tensor(shape={self.shape}{tag})"


class _Node:
    __slots__ = ("op", "parents", "attrs", "value")

    def __init__(self, op: str, parents: tuple[int, ...], attrs: dict, value: np.ndarray):
        self.op = op
        self.parents = parents
        self.attrs = attrs
        self.value = value


class Tape:
    """Append-only computation record. Parents of node i always have id < i."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.last_backward_visits = 0

    def _record(self, op: str, parents: tuple[int, ...], attrs: dict, value: np.ndarray) -> Tensor:
        self.nodes.append(_Node(op, parents, attrs, value))
        return Tensor(value, self, len(self.nodes) - 1)

    def leaf(self, data) -> Tensor:
        """Record an input tensor. The array is copied so later external
        mutation cannot corrupt saved forward values."""
        arr = np.array(data, dtype=np.float64)
        return self._record("leaf", (), {}, arr)

    def const(self, value: float) -> Tensor:
        """Scalar leaf, shape ()."""
        return self.leaf(np.float64(value))

    def backward(self, loss: Tensor) -> dict[int, Tensor]:
        """Reverse sweep from a scalar loss.

        Returns d(loss)/d(node) for every node on the tape; leaves that the
        loss does not depend on get zero gradients. Each node is visited
        exactly once (ids are topological by construction).
        """
        if loss.tape is not self or loss.node_id is None:
            raise DetachedNode("loss tensor is not attached to this tape")
        if loss.data.shape != ():
            raise NonScalarLoss(f"loss must be a scalar, got shape {loss.data.shape}")

        grads: dict[int, np.ndarray] = {loss.node_id: np.array(1.0)}
        visits = 0
        for nid in range(len(self.nodes) - 1, -1, -1):
            visits += 1
            node = self.nodes[nid]
            g = grads.get(nid)
            if g is None or node.op == "leaf":
                continue
            parent_vals = [self.nodes[p].value for p in node.parents]
            contribs = _OPS[node.op].vjp(g, parent_vals, node.value, node.attrs)
            for pid, contrib in zip(node.parents, contribs):
                if contrib is None:
                    continue
                if pid in grads:
                    grads[pid] = grads[pid] + contrib
                else:
                    grads[pid] = contrib
        self.last_backward_visits = visits

        out: dict[int, Tensor] = {}
        for nid, node in enumerate(self.nodes):
            arr = grads.get(nid)
            if arr is None:
                arr = np.zeros_like(node.value)
            out[nid] = Tensor(arr)
        return out


class _Op:
    __slots__ = ("forward", "vjp")

    def __init__(self, forward: Callable, vjp: Callable):
        self.forward = forward
        self.vjp = vjp


def _need_2d(name: str, *vals: np.ndarray) -> None:
    for v in vals:
        if v.ndim != 2:
            raise ShapeMismatch(f"{name} requires 2-d inputs, got shape {v.shape}")


def _same_shape(name: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{name}: shapes {a.shape} and {b.shape} differ")


def _fwd_matmul(vals, attrs):
    a, b = vals
    _need_2d("matmul", a, b)
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: inner dims {a.shape} x {b.shape}")
    return a @ b


def _vjp_matmul(g, vals, out, attrs):
    a, b = vals
    return [g @ b.T, a.T @ g]


def _fwd_add(vals, attrs):
    a, b = vals
    _same_shape("add", a, b)
    return a + b


def _fwd_sub(vals, attrs):
    a, b = vals
    _same_shape("sub", a, b)
    return a - b


def _fwd_mul(vals, attrs):
    a, b = vals
    _same_shape("mul_elem", a, b)
    return a * b


def _fwd_div(vals, attrs):
    a, b = vals
    _same_shape("div_elem", a, b)
    return a / b


def _vjp_div(g, vals, out, attrs):
    a, b = vals
    return [g / b, -g * a / (b * b)]


def _fwd_scale(vals, attrs):
    (a,) = vals
    return a * attrs["c"]


def _fwd_relu(vals, attrs):
    return np.maximum(vals[0], 0.0)


def _fwd_log(vals, attrs):
    (a,) = vals
    if np.any(a <= 0.0):
        raise NonFiniteEvaluation("log: input must be strictly positive")
    return np.log(a)


def _fwd_softmax_rows(vals, attrs):
    (a,) = vals
    _need_2d("softmax_rows", a)
    shifted = a - a.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _vjp_softmax_rows(g, vals, out, attrs):
    dot = (g * out).sum(axis=1, keepdims=True)
    return [out * (g - dot)]


def _fwd_mean_all(vals, attrs):
    return np.asarray(vals[0].mean())


def _fwd_sum_all(vals, attrs):
    return np.asarray(vals[0].sum())


def _fwd_concat_rows(vals, attrs):
    _need_2d("concat_rows", *vals)
    cols = vals[0].shape[1]
    for v in vals:
        if v.shape[1] != cols:
            raise ShapeMismatch("concat_rows: column counts differ")
    return np.concatenate(vals, axis=0)


def _vjp_concat_rows(g, vals, out, attrs):
    contribs = []
    start = 0
    for v in vals:
        contribs.append(g[start:start + v.shape[0]])
        start += v.shape[0]
    return contribs


def _fwd_slice_rows(vals, attrs):
    (a,) = vals
    _need_2d("slice_rows", a)
    start, stop = attrs["start"], attrs["stop"]
    if not (0 <= start < stop <= a.shape[0]):
        raise ShapeMismatch(f"slice_rows: [{start}:{stop}] out of range for {a.shape}")
    return a[start:stop].copy()


def _vjp_slice_rows(g, vals, out, attrs):
    (a,) = vals
    full = np.zeros_like(a)
    full[attrs["start"]:attrs["stop"]] = g
    return [full]


def _fwd_transpose2d(vals, attrs):
    (a,) = vals
    _need_2d("transpose2d", a)
    return a.T.copy()


def _fwd_reshape(vals, attrs):
    (a,) = vals
    shape = tuple(attrs["shape"])
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeMismatch(f"reshape: {a.shape} -> {shape}")
    return a.reshape(shape).copy()


def _fwd_broadcast_add_row(vals, attrs):
    a, b = vals
    _need_2d("broadcast_add_row", a)
    if b.shape != (1, a.shape[1]):
        raise ShapeMismatch(f"broadcast_add_row: row {b.shape} vs matrix {a.shape}")
    return a + b


def _fwd_patchify2d(vals, attrs):
    (a,) = vals
    _need_2d("patchify2d", a)
    p = attrs["patch"]
    h, w = a.shape
    if h % p or w % p:
        raise ShapeMismatch(f"patchify2d: {a.shape} not divisible by patch {p}")
    gh, gw = h // p, w // p
    return a.reshape(gh, p, gw, p).transpose(0, 2, 1, 3).reshape(gh * gw, p * p).copy()


def _vjp_patchify2d(g, vals, out, attrs):
    (a,) = vals
    p = attrs["patch"]
    h, w = a.shape
    gh, gw = h // p, w // p
    return [g.reshape(gh, gw, p, p).transpose(0, 2, 1, 3).reshape(h, w)]


def _fwd_unpatchify2d(vals, attrs):
    (a,) = vals
    _need_2d("unpatchify2d", a)
    p, h, w = attrs["patch"], attrs["height"], attrs["width"]
    gh, gw = h // p, w // p
    if h % p or w % p or a.shape != (gh * gw, p * p):
        raise ShapeMismatch(f"unpatchify2d: {a.shape} vs ({h},{w}) patch {p}")
    return a.reshape(gh, gw, p, p).transpose(0, 2, 1, 3).reshape(h, w).copy()


def _vjp_unpatchify2d(g, vals, out, attrs):
    p = attrs["patch"]
    h, w = attrs["height"], attrs["width"]
    gh, gw = h // p, w // p
    return [g.reshape(gh, p, gw, p).transpose(0, 2, 1, 3).reshape(gh * gw, p * p)]


_OPS: dict[str, _Op] = {
    "matmul": _Op(_fwd_matmul, _vjp_matmul),
    "add": _Op(_fwd_add, lambda g, v, o, a: [g, g]),
    "sub": _Op(_fwd_sub, lambda g, v, o, a: [g, -g]),
    "mul_elem": _Op(_fwd_mul, lambda g, v, o, a: [g * v[1], g * v[0]]),
    "div_elem": _Op(_fwd_div, _vjp_div),
    "scale": _Op(_fwd_scale, lambda g, v, o, a: [g * a["c"]]),
    "relu": _Op(_fwd_relu, lambda g, v, o, a: [g * (v[0] > 0.0)]),
    # derivative from the input, not the rounded output: keeps a nonzero
    # gradient in saturation, where out*(1-out) rounds to exactly 0
    "sigmoid": _Op(
        lambda v, a: stable_sigmoid(v[0]),
        lambda g, v, o, a: [g * stable_sigmoid(v[0]) * stable_sigmoid(-v[0])],
    ),
    "log": _Op(_fwd_log, lambda g, v, o, a: [g / v[0]]),
    "softmax_rows": _Op(_fwd_softmax_rows, _vjp_softmax_rows),
    "mean_all": _Op(_fwd_mean_all, lambda g, v, o, a: [np.full_like(v[0], float(g) / v[0].size)]),
    "sum_all": _Op(_fwd_sum_all, lambda g, v, o, a: [np.full_like(v[0], float(g))]),
    "concat_rows": _Op(_fwd_concat_rows, _vjp_concat_rows),
    "slice_rows": _Op(_fwd_slice_rows, _vjp_slice_rows),
    "transpose2d": _Op(_fwd_transpose2d, lambda g, v, o, a: [g.T.copy()]),
    "reshape": _Op(_fwd_reshape, lambda g, v, o, a: [g.reshape(v[0].shape)]),
    "broadcast_add_row": _Op(_fwd_broadcast_add_row, lambda g, v, o, a: [g, g.sum(axis=0, keepdims=True)]),
    "patchify2d": _Op(_fwd_patchify2d, _vjp_patchify2d),
    "unpatchify2d": _Op(_fwd_unpatchify2d, _vjp_unpatchify2d),
}

OP_KINDS = tuple(sorted(k for k in _OPS if k != "leaf"))


def apply(op: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Run one op, recording it on the inputs' tape.

    All inputs must live on the same tape. Raises UnknownOp for a kind not
    in OP_KINDS and ShapeMismatch when extents do not conform.
    """
    if op not in _OPS or op == "leaf":
        raise UnknownOp(f"unknown op kind: {op!r}")
    if not inputs:
        raise ShapeMismatch(f"{op}: at least one input required")
    tape = inputs[0].tape
    if tape is None:
        raise DetachedNode(f"{op}: inputs must be attached to a tape")
    parents = []
    for t in inputs:
        if t.tape is not tape or t.node_id is None:
            raise DetachedNode(f"{op}: all inputs must share one tape")
        parents.append(t.node_id)
    value = _OPS[op].forward([t.data for t in inputs], attrs)
    return tape._record(op, tuple(parents), attrs, value)


# Thin wrappers so calling code reads like math.

def matmul(a, b):
    return apply("matmul", [a, b])


def add(a, b):
    return apply("add", [a, b])


def sub(a, b):
    return apply("sub", [a, b])


def mul_elem(a, b):
    return apply("mul_elem", [a, b])


def div_elem(a, b):
    return apply("div_elem", [a, b])


def scale(a, c: float):
    return apply("scale", [a], c=float(c))


def relu(a):
    return apply("relu", [a])


def sigmoid(a):
    return apply("sigmoid", [a])


def log(a):
    return apply("log", [a])


def softmax_rows(a):
    return apply("softmax_rows", [a])


def mean_all(a):
    return apply("mean_all", [a])


def sum_all(a):
    return apply("sum_all", [a])


def concat_rows(tensors):
    return apply("concat_rows", list(tensors))


def slice_rows(a, start: int, stop: int):
    return apply("slice_rows", [a], start=int(start), stop=int(stop))


def transpose2d(a):
    return apply("transpose2d", [a])


def reshape(a, shape):
    return apply("reshape", [a], shape=tuple(int(s) for s in shape))


def broadcast_add_row(a, b):
    return apply("broadcast_add_row", [a, b])


def patchify2d(a, patch: int):
    return apply("patchify2d", [a], patch=int(patch))


def unpatchify2d(a, patch: int, height: int, width: int):
    return apply("unpatchify2d", [a], patch=int(patch), height=int(height), width=int(width))


def grad_check(f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-5) -> float:
    """Compare reverse-mode gradients of f against central finite differences.

    f must map a leaf tensor to a scalar tensor on the same tape. Returns
    max over coordinates of |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
    """
    x = np.asarray(x, dtype=np.float64)

    tape = Tape()
    leaf = tape.leaf(x)
    out = f(leaf)
    if out.data.shape != ():
        raise NonScalarLoss("grad_check target must return a scalar")
    g_ad = tape.backward(out)[leaf.node_id].data

    def value_at(arr: np.ndarray) -> float:
        t = Tape()
        v = f(t.leaf(arr)).item()
        if not np.isfinite(v):
            raise NonFiniteEvaluation("grad_check: non-finite evaluation")
        return v

    g_fd = np.zeros_like(x)
    flat = x.reshape(-1)
    fd_flat = g_fd.reshape(-1)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + eps
        up = value_at(bumped.reshape(x.shape))
        bumped[i] = flat[i] - eps
        down = value_at(bumped.reshape(x.shape))
        fd_flat[i] = (up - down) / (2.0 * eps)

    if not np.all(np.isfinite(g_ad)):
        raise NonFiniteEvaluation("grad_check: non-finite autodiff gradient")
    denom = np.maximum(1e-8, np.abs(g_ad) + np.abs(g_fd))
    return float(np.max(np.abs(g_ad - g_fd) / denom))
