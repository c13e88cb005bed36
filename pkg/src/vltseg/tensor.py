"""Dense float64 tensors with reverse-mode automatic differentiation.

A `Tensor` wraps a C-contiguous float64 numpy array (the flat row-major
buffer plus shape metadata) and an optional graph node.  Every operation
that can influence a gradient appends one node to the implicit autodiff
graph: the node stores the operation kind, references to its input
tensors, and a closure over whatever activations the backward rule needs.
Construction order is topological by definition (inputs are created
before results), so `backward` walks nodes in decreasing creation id,
which is a deterministic reverse-topological order.

Contracts common to all operations:

* results are float64 and finite; an overflow raises `NumericsError`
  instead of propagating inf/NaN,
* tensors are immutable values after creation,
* broadcasting, where allowed, follows the numpy trailing-dimension rule
  (align shapes at the last axis; extents must match or be 1, and a
  lower-rank operand is padded with leading 1s).  Anything else must be
  an explicit `reshape`.
"""

from __future__ import annotations

import itertools

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NumericsError(ArithmeticError):
    """An operation produced a non-finite value from finite inputs."""


class InvalidMaskError(ValueError):
    """A softmax row has no unmasked entry."""


class GraphError(RuntimeError):
    """Autodiff contract violation, e.g. backward from a non-scalar."""


class ValidationError(ValueError):
    """An argument value is outside the documented domain."""


_ids = itertools.count()


class Node:
    """One autodiff graph record: operation kind, inputs, backward rule.

    `backward` maps the gradient at this node's output to a tuple of
    gradients, one per parent, in parent order.
    """

    __slots__ = ("op", "parents", "backward")

    def __init__(self, op, parents, backward):
        self.op = op
        self.parents = parents
        self.backward = backward


class Tensor:
    """Immutable dense float64 array participating in the autodiff graph.

    `data` is the numpy array (C-contiguous, so its buffer is the flat
    row-major value sequence).  `graph_id` is the creation id; ids grow
    monotonically, giving the graph its topological order.  Leaves with
    `requires_grad` receive entries in the map returned by `backward`.
    """

    __slots__ = ("data", "requires_grad", "graph_id", "node", "_needs")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        if any(s <= 0 for s in arr.shape):
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.graph_id = next(_ids)
        self.node = None
        self._needs = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; floats are lifted to constant tensors.
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return add(self, scale(_lift(other), -1.0))

    def __rsub__(self, other):
        return add(_lift(other), scale(self, -1.0))

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self):
        return mean_all(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _wrap(op: str, out: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    """Finish an op: finiteness check, then attach a node if grads flow."""
    if not np.isfinite(out).all():
        raise NumericsError(f"{op}: non-finite values in result")
    t = Tensor(out)
    if any(p._needs for p in parents):
        t._needs = True
        t.node = Node(op, parents, backward)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    for da, db in zip(reversed(sa), reversed(sb)):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: shapes {sa} and {sb} do not broadcast")


# ---------------------------------------------------------------------------
# Elementwise operations
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    with np.errstate(over="ignore"):
        out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _wrap("add", out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)
    with np.errstate(over="ignore"):
        out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _wrap("mul", out, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    with np.errstate(over="ignore"):
        out = x.data * c

    def bw(g):
        return (g * c,)

    return _wrap("scale", out, (x,), bw)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def bw(g):
        return (g * (x.data > 0.0),)

    return _wrap("relu", out, (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    # Stable in both tails: exp is only taken of non-positive arguments.
    d = x.data
    out = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                   np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def bw(g):
        return (g * out * (1.0 - out),)

    return _wrap("sigmoid", out, (x,), bw)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def bw(g):
        return (g * (1.0 - out * out),)

    return _wrap("tanh", out, (x,), bw)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Accepts plain 2-D operands or stacked operands with identical leading
    (batch) extents; the product contracts a's last axis with b's
    second-to-last axis.
    """
    sa, sb = a.shape, b.shape
    if len(sa) < 2 or len(sb) < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {sa} x {sb}")
    if sa[-1] != sb[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree, {sa} x {sb}")
    if sa[:-2] != sb[:-2]:
        raise ShapeError(f"matmul: leading extents disagree, {sa} x {sb}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a.data @ b.data

    def bw(g):
        da = g @ np.swapaxes(b.data, -1, -2) if a._needs else None
        db = np.swapaxes(a.data, -1, -2) @ g if b._needs else None
        return da, db

    return _wrap("matmul", out, (a, b), bw)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    `x` is [C_in, H, W], `kernel` is [C_out, C_in, k, k] with odd k.
    Output extents are floor((H + 2*pad - k) / stride) + 1 and likewise
    for W.  Implemented by unfolding the input into patch columns and
    contracting with one matrix product.
    """
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: expected [C,H,W] x [O,C,k,k], got {x.shape} x {kernel.shape}")
    c_in, h, w = x.shape
    c_out, kc, kh, kw = kernel.shape
    if kc != c_in:
        raise ShapeError(f"conv2d: input has {c_in} channels, kernel expects {kc}")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd size, got {kh}x{kw}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    k = kh
    h_out = (h + 2 * pad - k) // stride + 1
    w_out = (w + 2 * pad - k) // stride + 1
    if h_out <= 0 or w_out <= 0:
        raise ShapeError(
            f"conv2d: non-positive output extent {h_out}x{w_out} "
            f"for input {h}x{w}, k={k}, stride={stride}, pad={pad}")

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    s0, s1, s2 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(c_in, k, k, h_out, w_out),
        strides=(s0, s1, s2, s1 * stride, s2 * stride),
    )
    cols = windows.reshape(c_in * k * k, h_out * w_out)
    k2d = kernel.data.reshape(c_out, c_in * k * k)
    with np.errstate(over="ignore", invalid="ignore"):
        out = (k2d @ cols).reshape(c_out, h_out, w_out)

    def bw(g):
        g2d = g.reshape(c_out, h_out * w_out)
        dkernel = (g2d @ cols.T).reshape(kernel.shape) if kernel._needs else None
        if not x._needs:
            return None, dkernel
        dcols = (k2d.T @ g2d).reshape(c_in, k, k, h_out, w_out)
        dxp = np.zeros((c_in, h + 2 * pad, w + 2 * pad))
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += dcols[:, i, j]
        dx = dxp[:, pad:pad + h, pad:pad + w] if pad else dxp
        return dx, dkernel

    return _wrap("conv2d", out, (x, kernel), bw)


# ---------------------------------------------------------------------------
# Normalization and loss
# ---------------------------------------------------------------------------


def softmax_masked(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with optional boolean mask.

    Masked positions get an exact 0; unmasked entries are exp-normalized
    among themselves after max-subtraction.  Every row must keep at least
    one unmasked position.
    """
    d = x.data
    if mask is None:
        e = np.exp(d - d.max(axis=-1, keepdims=True))
        out = e / e.sum(axis=-1, keepdims=True)
    else:
        mask = np.asarray(mask, dtype=bool)
        try:
            mb = np.broadcast_to(mask, d.shape)
        except ValueError:
            raise ShapeError(f"softmax_masked: mask {mask.shape} does not fit {d.shape}")
        if not mb.any(axis=-1).all():
            raise InvalidMaskError("softmax_masked: a row is fully masked")
        m = np.where(mb, d, -np.inf).max(axis=-1, keepdims=True)
        e = np.exp(np.where(mb, d - m, 0.0)) * mb
        out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _wrap("softmax_masked", out, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance normalization over the last axis, then affine.

    A constant row has zero variance; eps floors the denominator so the
    normalized value is 0 and the output is the bias.
    """
    c = x.shape[-1]
    if c < 2:
        raise ShapeError(f"layer_norm: last extent must be >= 2, got {c}")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} must be ({c},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        gg = g * gamma.data
        dx = inv / c * (c * gg - gg.sum(axis=-1, keepdims=True)
                        - xhat * (gg * xhat).sum(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _wrap("layer_norm", out, (x, gamma, beta), bw)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross entropy of logits against {0,1} targets.

    Uses the stable closed form max(z,0) - z*t + log(1 + exp(-|z|)).
    """
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: targets {t.shape} vs logits {logits.shape}")
    if not np.isin(t, (0.0, 1.0)).all():
        raise ValidationError("bce_with_logits: targets must be exactly 0 or 1")
    z = logits.data
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray(per.mean())
    n = z.size

    def bw(g):
        p = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                     np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
        return ((p - t) * (g / n),)

    return _wrap("bce_with_logits", out, (logits,), bw)


# ---------------------------------------------------------------------------
# Shape and indexing operations
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    out = x.data.reshape(shape)

    def bw(g):
        return (g.reshape(x.shape),)

    return _wrap("reshape", out, (x,), bw)


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of {x.shape}")
    out = np.ascontiguousarray(x.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _wrap("transpose", out, (x,), bw)


def swap_last2(x: Tensor) -> Tensor:
    axes = tuple(range(x.data.ndim - 2)) + (x.data.ndim - 1, x.data.ndim - 2)
    return transpose(x, axes)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _wrap("concat", out, tuple(tensors), bw)


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _wrap("sum", out, (x,), bw)


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    out = np.asarray(x.data.mean())

    def bw(g):
        return (np.full(x.shape, float(g) / n),)

    return _wrap("mean", out, (x,), bw)


def gather_rows(x: Tensor, idx) -> Tensor:
    """Select rows of a 2-D tensor; duplicated indices accumulate on backward."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1 or x.data.ndim != 2:
        raise ShapeError(f"gather_rows: need 2-D tensor and 1-D index, got {x.shape}, {idx.shape}")
    if idx.size == 0:
        raise ShapeError("gather_rows: empty index")
    if (idx < 0).any() or (idx >= x.shape[0]).any():
        raise ValidationError(f"gather_rows: index out of range for {x.shape[0]} rows")
    out = x.data[idx]

    def bw(g):
        dx = np.zeros(x.shape)
        np.add.at(dx, idx, g)
        return (dx,)

    return _wrap("gather_rows", out, (x,), bw)


def resize_nearest(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    """Nearest-neighbor resize of a [C, H, W] tensor to [C, H', W'].

    Source indices follow the floor rule i_src = i_out * H // H', which for
    integer upscales duplicates each source pixel into a uniform block.
    """
    if x.data.ndim != 3:
        raise ShapeError(f"resize_nearest: expected [C,H,W], got {x.shape}")
    c, h, w = x.shape
    ho, wo = int(out_hw[0]), int(out_hw[1])
    if ho < 1 or wo < 1:
        raise ShapeError(f"resize_nearest: bad target extents {out_hw}")
    rows = np.arange(ho) * h // ho
    cols = np.arange(wo) * w // wo
    out = np.ascontiguousarray(x.data[:, rows[:, None], cols[None, :]])

    def bw(g):
        dx = np.zeros(x.shape)
        ci = np.arange(c)[:, None, None]
        np.add.at(dx, (ci, rows[None, :, None], cols[None, None, :]), g)
        return (dx,)

    return _wrap("resize_nearest", out, (x,), bw)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsample of a [C, H, W] tensor."""
    _, h, w = x.shape
    return resize_nearest(x, (2 * h, 2 * w))


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> dict[int, Tensor]:
    """Reverse-mode gradient accumulation from a scalar loss.

    Returns a map from graph id to gradient tensor covering every tensor
    marked `requires_grad` that the loss reaches.  Nodes are processed in
    decreasing creation id, a deterministic reverse-topological order.
    """
    if loss.shape != ():
        raise GraphError(f"backward: loss must be a scalar, got shape {loss.shape}")

    # Collect tensors reachable through graph nodes.
    reachable: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.graph_id in reachable:
            continue
        reachable[t.graph_id] = t
        if t.node is not None:
            stack.extend(t.node.parents)

    grads: dict[int, np.ndarray] = {loss.graph_id: np.ones(())}
    result: dict[int, Tensor] = {}
    for gid in sorted(reachable, reverse=True):
        t = reachable[gid]
        g = grads.pop(gid, None)
        if g is None:
            continue
        if t.requires_grad:
            result[gid] = Tensor(g.reshape(t.shape))
        if t.node is None:
            continue
        parent_grads = t.node.backward(g)
        for p, pg in zip(t.node.parents, parent_grads):
            if not p._needs or pg is None:
                continue
            acc = grads.get(p.graph_id)
            grads[p.graph_id] = pg if acc is None else acc + pg
    return result
