"""Minimal reverse-mode automatic differentiation on numpy arrays.

A :class:`Tape` records every primitive applied to a tracked tensor in
execution order, so the record is already topologically sorted and the
backward pass is a single reverse sweep.  Tensors that do not descend from a
leaf are plain constants and cost nothing to track.

    >>> tape = Tape()
    >>> x = tape.leaf(np.array([1.0, 2.0]))
    >>> loss = sum(mul(x, x))
    >>> tape.gradient(loss, x)[0]
    array([2., 4.])
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import fft


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


class Tensor:
    """An array plus (optionally) its node id on a tape."""

    __slots__ = ("data", "tape", "node")
    __array_priority__ = 100

    def __init__(self, data, tape=None, node=None):
        self.data = np.asarray(data)
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def tracked(self):
        return self.tape is not None

    def numpy(self):
        return self.data

    def __repr__(self):
        flag = f", node={self.node}" if self.tracked else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Node:
    op: str
    inputs: tuple
    backward: object = None
    shape: tuple = ()

    @property
    def is_leaf(self):
        return self.backward is None


@dataclass
class Tape:
    """Ordered record of primitive operations.

    Each node stores the ids of its tracked inputs (``None`` for constants)
    and a closure mapping the output cotangent to input cotangents.
    """

    nodes: list = field(default_factory=list)

    def leaf(self, data):
        data = np.asarray(data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        node = Node("leaf", (), None, data.shape)
        self.nodes.append(node)
        return Tensor(data, self, len(self.nodes) - 1)

    def record(self, op, out, inputs, backward):
        ids = []
        for t in inputs:
            if isinstance(t, Tensor) and t.tracked:
                if t.tape is not self:
                    raise ValueError("inputs belong to different tapes")
                ids.append(t.node)
            else:
                ids.append(None)
        self.nodes.append(Node(op, tuple(ids), backward, out.shape))
        return Tensor(out, self, len(self.nodes) - 1)

    def backward(self, loss):
        """Cotangents of every node reachable from ``loss``, keyed by node id."""
        if not isinstance(loss, Tensor) or loss.tape is not self:
            raise ValueError("loss node is not on this tape")
        if loss.node is None or not 0 <= loss.node < len(self.nodes):
            raise ValueError("loss node is not on this tape")
        if loss.data.size != 1 or loss.data.ndim > 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        grads = {loss.node: np.ones_like(loss.data)}
        for idx in range(loss.node, -1, -1):
            g = grads.get(idx)
            node = self.nodes[idx]
            if g is None or node.is_leaf:
                continue
            needs = tuple(i is not None for i in node.inputs)
            in_grads = node.backward(g, needs)
            for i, gi in zip(node.inputs, in_grads):
                if i is None or gi is None:
                    continue
                if i in grads:
                    grads[i] = grads[i] + gi
                else:
                    grads[i] = gi
            if idx != loss.node:
                del grads[idx]
        return grads

    def gradient(self, loss, *leaves):
        """Gradients of scalar ``loss`` w.r.t. ``leaves`` (zeros if unreachable)."""
        grads = self.backward(loss)
        out = []
        for leaf in leaves:
            if leaf.tape is not self or not self.nodes[leaf.node].is_leaf:
                raise ValueError("gradient requested for a non-leaf tensor")
            g = grads.get(leaf.node)
            out.append(np.zeros_like(leaf.data) if g is None else g)
        return out


def _data(t):
    return t.data if isinstance(t, Tensor) else np.asarray(t)


def _finite(op, out):
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"non-finite output from {op}")
    return out


def _emit(op, out, inputs, backward):
    out = _finite(op, out)
    for t in inputs:
        if isinstance(t, Tensor) and t.tracked:
            return t.tape.record(op, out, inputs, backward)
    return Tensor(out)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


# ---------------------------------------------------------------- elementwise

def add(a, b):
    da, db = _data(a), _data(b)
    _broadcast_shape("add", da, db)

    def backward(g, needs):
        return (_unbroadcast(g, da.shape) if needs[0] else None,
                _unbroadcast(g, db.shape) if needs[1] else None)

    return _emit("add", da + db, (a, b), backward)


def sub(a, b):
    da, db = _data(a), _data(b)
    _broadcast_shape("sub", da, db)

    def backward(g, needs):
        return (_unbroadcast(g, da.shape) if needs[0] else None,
                _unbroadcast(-g, db.shape) if needs[1] else None)

    return _emit("sub", da - db, (a, b), backward)


def scale(a, c):
    """Multiply by a python scalar."""
    da = _data(a)
    c = float(c)

    def backward(g, needs):
        return (g * c,)

    return _emit("scale", da * da.dtype.type(c), (a,), backward)


def mul(a, b):
    da, db = _data(a), _data(b)
    _broadcast_shape("mul", da, db)

    def backward(g, needs):
        return (_unbroadcast(g * db, da.shape) if needs[0] else None,
                _unbroadcast(g * da, db.shape) if needs[1] else None)

    return _emit("mul", da * db, (a, b), backward)


def relu(a):
    da = _data(a)
    mask = da > 0

    def backward(g, needs):
        return (g * mask,)

    return _emit("relu", np.where(mask, da, da.dtype.type(0)), (a,), backward)


def clip(a, lo, hi):
    """Elementwise clip; ``lo``/``hi`` are constants (scalars or arrays)."""
    da = _data(a)
    lo, hi = _data(lo), _data(hi)
    mask = (da >= lo) & (da <= hi)

    def backward(g, needs):
        return (g * mask,)

    return _emit("clip", np.clip(da, lo, hi).astype(da.dtype, copy=False), (a,), backward)


def sign(a):
    """Sign with sign(0) = 0; derivative is zero almost everywhere."""
    da = _data(a)

    def backward(g, needs):
        return (np.zeros_like(da),)

    return _emit("sign", np.sign(da), (a,), backward)


# ---------------------------------------------------------------- reductions

def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    da = _data(a)

    def backward(g, needs):
        if axis is None:
            return (np.broadcast_to(g, da.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), da.shape).copy(),)

    return _emit("sum", np.sum(da, axis=axis), (a,), backward)


def reshape(a, shape):
    da = _data(a)
    try:
        out = da.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {da.shape} to {shape}") from None

    def backward(g, needs):
        return (g.reshape(da.shape),)

    return _emit("reshape", out, (a,), backward)


def flatten(a):
    """Collapse all but the leading (batch) axis."""
    da = _data(a)
    return reshape(a, (da.shape[0], int(np.prod(da.shape[1:]))))


def concat(tensors, axis=0):
    arrays = [_data(t) for t in tensors]
    sizes = np.cumsum([x.shape[axis] for x in arrays])[:-1]
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None

    def backward(g, needs):
        return tuple(np.split(g, sizes, axis=axis))

    return _emit("concat", out, tuple(tensors), backward)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    da, db = _data(a), _data(b)
    if da.ndim != 2 or db.ndim != 2 or da.shape[1] != db.shape[0]:
        raise ShapeError(f"matmul: shapes {da.shape} and {db.shape} do not conform")

    def backward(g, needs):
        return (g @ db.T if needs[0] else None, da.T @ g if needs[1] else None)

    return _emit("matmul", da @ db, (a, b), backward)


def _conv_forward(x, w, pad):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    out = cols @ w.reshape(o, -1).T
    return out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2), cols


def conv2d(x, w, b=None):
    """Stride-1 cross-correlation with symmetric zero padding k // 2 (odd k)."""
    dx, dw = _data(x), _data(w)
    if dx.ndim != 4 or dw.ndim != 4 or dx.shape[1] != dw.shape[1]:
        raise ShapeError(f"conv2d: input {dx.shape} and kernel {dw.shape} do not conform")
    k = dw.shape[2]
    if k % 2 == 0 or dw.shape[3] != k:
        raise ShapeError("conv2d: kernel must be square with odd size")
    pad = k // 2
    out, cols = _conv_forward(dx, dw, pad)
    if b is not None:
        db = _data(b)
        if db.shape != (dw.shape[0],):
            raise ShapeError(f"conv2d: bias shape {db.shape} != ({dw.shape[0]},)")
        out = out + db[None, :, None, None]

    def backward(g, needs):
        gx = gw = gb = None
        if needs[0]:
            flipped = dw[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            gx, _ = _conv_forward(g, np.ascontiguousarray(flipped), pad)
        if needs[1]:
            gflat = g.transpose(0, 2, 3, 1).reshape(-1, dw.shape[0])
            gw = (gflat.T @ cols).reshape(dw.shape)
        if len(needs) > 2 and needs[2]:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb)

    inputs = (x, w) if b is None else (x, w, b)
    return _emit("conv2d", out, inputs, backward)


def avg_pool(x, size):
    """Non-overlapping ``size`` x ``size`` average pooling."""
    dx = _data(x)
    n, c, h, w = dx.shape
    if h % size or w % size:
        raise ShapeError(f"avg_pool: {h}x{w} not divisible by {size}")
    out = dx.reshape(n, c, h // size, size, w // size, size).mean(axis=(3, 5))
    inv = dx.dtype.type(1.0 / (size * size))

    def backward(g, needs):
        return (np.repeat(np.repeat(g, size, axis=2), size, axis=3) * inv,)

    return _emit("avg_pool", out.astype(dx.dtype, copy=False), (x,), backward)


def smooth2d(x, kernel):
    """Depthwise 2-D correlation with a fixed odd-sized kernel, zero padded."""
    dx = _data(x)
    kernel = np.asarray(kernel, dtype=dx.dtype)
    k = kernel.shape[0]
    if kernel.ndim != 2 or kernel.shape[1] != k or k % 2 == 0:
        raise ShapeError("smooth2d: kernel must be square with odd size")
    if dx.ndim != 4:
        raise ShapeError("smooth2d: expected (N, C, H, W) input")
    r = k // 2

    def correlate(a, ker):
        h, w = a.shape[2:]
        ap = np.pad(a, ((0, 0), (0, 0), (r, r), (r, r)))
        out = np.zeros_like(a)
        for i in range(k):
            for j in range(k):
                if ker[i, j] != 0:
                    out += ker[i, j] * ap[:, :, i:i + h, j:j + w]
        return out

    def backward(g, needs):
        return (correlate(g, kernel[::-1, ::-1]),)

    return _emit("smooth2d", correlate(dx, kernel), (x,), backward)


def take(x, index):
    """Gather spatial positions through an index map.

    ``index`` has the output's spatial shape and holds flat ``H * W`` source
    positions; ``-1`` marks zero fill.  This is how nearest-neighbour resizes
    and padding stay exactly differentiable.
    """
    dx = _data(x)
    n, c, h, w = dx.shape
    index = np.asarray(index)
    if index.ndim != 2 or index.max(initial=-1) >= h * w:
        raise ShapeError("take: index map out of range")
    flat = dx.reshape(n, c, h * w)
    valid = index >= 0
    src = np.where(valid, index, 0).ravel()
    out = flat[:, :, src] * valid.ravel()
    out = out.reshape(n, c, *index.shape).astype(dx.dtype, copy=False)

    def backward(g, needs):
        gx = np.zeros((n, c, h * w), dtype=g.dtype)
        gv = g.reshape(n, c, -1)[:, :, valid.ravel()]
        np.add.at(gx, (slice(None), slice(None), index.ravel()[valid.ravel()]), gv)
        return (gx.reshape(n, c, h, w),)

    return _emit("take", out, (x,), backward)


# ---------------------------------------------------------------- spectral

def dct2(x):
    """Orthonormal type-II DCT over the last two axes."""
    dx = _data(x)

    def backward(g, needs):
        return (fft.idctn(g, type=2, axes=(-2, -1), norm="ortho"),)

    return _emit("dct2", fft.dctn(dx, type=2, axes=(-2, -1), norm="ortho"), (x,), backward)


def idct2(x):
    """Inverse of :func:`dct2`."""
    dx = _data(x)

    def backward(g, needs):
        return (fft.dctn(g, type=2, axes=(-2, -1), norm="ortho"),)

    return _emit("idct2", fft.idctn(dx, type=2, axes=(-2, -1), norm="ortho"), (x,), backward)


# ---------------------------------------------------------------- loss

def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels, reduction="mean"):
    """Cross-entropy of integer ``labels`` under softmax(``logits``).

    ``reduction`` is ``"mean"``, ``"sum"`` or ``"none"`` (per-row losses).
    """
    z = _data(logits)
    labels = np.asarray(labels)
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {z.shape} vs labels {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= z.shape[1]:
        raise ShapeError("softmax_cross_entropy: label out of range")
    rows = np.arange(z.shape[0])
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    per_row = lse - shifted[rows, labels]
    probs = softmax(z)
    probs[rows, labels] -= 1

    if reduction == "none":
        out = per_row

        def backward(g, needs):
            return (probs * g[:, None],)
    elif reduction in ("mean", "sum"):
        c = 1.0 / z.shape[0] if reduction == "mean" else 1.0
        out = per_row.sum() * c

        def backward(g, needs):
            return (probs * (g * c),)
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    return _emit("softmax_ce", np.asarray(out, dtype=z.dtype), (logits,), backward)


OPS = {
    "add": add,
    "sub": sub,
    "scale": scale,
    "mul": mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "avg_pool": avg_pool,
    "flatten": flatten,
    "reshape": reshape,
    "sum": sum,
    "concat": concat,
    "softmax_ce": softmax_cross_entropy,
    "clip": clip,
    "sign": sign,
    "dct2": dct2,
    "idct2": idct2,
    "smooth2d": smooth2d,
    "take": take,
}


def forward(op, inputs, **attrs):
    """Apply primitive ``op`` by name."""
    try:
        fn = OPS[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------- checking

@dataclass
class GradCheckReport:
    max_rel_error: float
    per_leaf: list
    tolerance: float

    @property
    def passed(self):
        return self.max_rel_error <= self.tolerance


def gradient_check(fn, arrays, tolerance=1e-4, coords=10, h=1e-5, seed=0, floor=1e-8):
    """Compare tape gradients of ``fn`` against central differences.

    ``fn`` receives one tensor per entry of ``arrays`` and returns a scalar
    tensor.  ``coords`` coordinates per leaf are probed at random.  The
    relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tape = Tape()
    leaves = [tape.leaf(a) for a in arrays]
    analytic = tape.gradient(fn(*leaves), *leaves)
    rng = np.random.default_rng(seed)

    def value(args):
        return float(fn(*[Tensor(a) for a in args]).data)

    per_leaf = []
    for i, a in enumerate(arrays):
        picks = rng.choice(a.size, size=min(coords, a.size), replace=False)
        worst = 0.0
        for flat in picks:
            idx = np.unravel_index(flat, a.shape)
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[i][idx] += h
            minus[i][idx] -= h
            numeric = (value(plus) - value(minus)) / (2 * h)
            exact = analytic[i][idx]
            denom = max(abs(exact), abs(numeric), floor)
            worst = max(worst, abs(exact - numeric) / denom)
        per_leaf.append(worst)
    return GradCheckReport(max(per_leaf, default=0.0), per_leaf, tolerance)
