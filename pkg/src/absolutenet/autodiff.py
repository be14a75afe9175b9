"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tape` records every operation applied to tensors created through
:meth:`Tape.variable`. Operations on plain (untracked) tensors are evaluated
eagerly and never recorded, so the same functions serve inference and
training.

Layout convention for images is channels-last: ``(N, ch, t, C)``.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "Tape", "backward", "as_tensor", "make_rng", "derive_seed",
    "add", "sub", "mul", "div", "scalar_mul", "neg", "square", "abs_",
    "log_abs_eps", "exp", "log", "rsqrt", "mean", "variance", "normalize", "matmul",
    "concat", "reshape", "transpose", "conv2d", "depthwise_conv2d",
    "separable_conv2d", "avg_pool", "log_softmax", "softmax", "pad_amounts",
]

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class Tensor:
    """Immutable n-d array, optionally bound to a node on a :class:`Tape`."""

    __slots__ = ("data", "tape", "node")
    __array_priority__ = 100

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None):
        arr = np.asarray(data)
        # numpy float arrays keep their precision; everything else gets the default
        if arr.dtype.kind != "f" or not isinstance(data, (np.ndarray, np.generic)):
            arr = arr.astype(DEFAULT_DTYPE)
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tracked = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tracked})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)


class Tape:
    """Ordered record of operations for reverse-mode differentiation.

    Nodes are appended as operations execute, so the record is always in
    topological order. Each node stores its input node ids and a closure
    holding whatever forward values its gradient rule needs.
    """

    def __init__(self):
        self.nodes: list[tuple[str, tuple[int, ...], Callable | None, tuple[int, ...]]] = []

    def __len__(self):
        return len(self.nodes)

    def variable(self, value) -> Tensor:
        """Register ``value`` as a leaf and return the tracked tensor."""
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        node = len(self.nodes)
        self.nodes.append(("leaf", (), None, arr.shape))
        return Tensor(arr, self, node)

    def record(self, op: str, out: np.ndarray, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
        node = len(self.nodes)
        self.nodes.append((op, tuple(t.node if t.tape is self else -1 for t in inputs), rule, out.shape))
        return Tensor(out, self, node)

    def leaves(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n[0] == "leaf"]

    def gradient(self, output: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``output`` with respect to each tensor in ``wrt``."""
        grads = backward(self, output)
        return [grads[t.node] for t in wrt]


def backward(tape: Tape, output: Tensor | int) -> dict[int, np.ndarray]:
    """Reverse-mode sweep from a scalar output node.

    Returns a mapping from every leaf node id to its gradient. Leaves that do
    not influence the output receive zero arrays.
    """
    out_node = output.node if isinstance(output, Tensor) else output
    if isinstance(output, Tensor) and output.tape is not tape:
        raise ValueError("output tensor was not recorded on this tape")
    if out_node is None or not 0 <= out_node < len(tape.nodes):
        raise ValueError(f"unknown output node {out_node}")
    out_shape = tape.nodes[out_node][3]
    if int(np.prod(out_shape)) != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {out_shape}")

    dtype = output.dtype if isinstance(output, Tensor) else DEFAULT_DTYPE
    adj: dict[int, np.ndarray] = {out_node: np.ones(out_shape, dtype=dtype)}
    for i in range(out_node, -1, -1):
        op, inputs, rule, _ = tape.nodes[i]
        g = adj.get(i)
        if g is None or rule is None:
            continue
        if op != "leaf":
            del adj[i]
        for j, gi in zip(inputs, rule(g)):
            if j < 0 or gi is None:
                continue
            adj[j] = adj[j] + gi if j in adj else gi

    result = {}
    for i in tape.leaves():
        result[i] = adj[i] if i in adj else np.zeros(tape.nodes[i][3], dtype=dtype)
    return result


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_dtype_of(x)))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Coerce operands; bare Python scalars adopt the tensor operand's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def _dtype_of(x):
    arr = np.asarray(x)
    return arr.dtype if arr.dtype.kind == "f" else DEFAULT_DTYPE


def _tape_of(*ts: Tensor) -> Tape | None:
    tape = None
    for t in ts:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError("operands belong to different tapes")
            tape = t.tape
    return tape


def _emit(op: str, out: np.ndarray, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(out)
    return tape.record(op, out, inputs, rule)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    g = g.sum(axis=tuple(range(g.ndim - len(shape)))) if g.ndim > len(shape) else g
    axes = tuple(i for i, (a, b) in enumerate(zip(g.shape, shape)) if b == 1 and a != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; identical seeds give identical streams."""
    return np.random.default_rng(np.random.SeedSequence(int(seed) & (2**64 - 1)))


def derive_seed(seed: int, *keys: int) -> int:
    """Stable 64-bit child seed for ``(seed, *keys)``."""
    ss = np.random.SeedSequence([int(seed) & (2**64 - 1), *[int(k) for k in keys]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")
    x, y = a.data, b.data
    return _emit("mul", x * y, (a, b),
                 lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "div")
    x, y = a.data, b.data
    out = x / y
    return _emit("div", out, (a, b),
                 lambda g: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * out / y, y.shape)))


def scalar_mul(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = a.dtype.type(c)
    return _emit("scalar_mul", a.data * c, (a,), lambda g: (g * c,))


def neg(a) -> Tensor:
    return scalar_mul(a, -1.0)


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _emit("square", x * x, (a,), lambda g: (2 * g * x,))


def abs_(a) -> Tensor:
    """``|x|`` with the subgradient at zero taken as 0."""
    a = as_tensor(a)
    x = a.data
    return _emit("abs", np.abs(x), (a,), lambda g: (g * np.sign(x),))


def log_abs_eps(a, eps: float = 1e-7) -> Tensor:
    """``ln(|x| + eps)``; finite at zero, gradient ``sign(x) / (|x| + eps)``."""
    a = as_tensor(a)
    x = a.data
    denom = np.abs(x) + x.dtype.type(eps)
    return _emit("log_abs_eps", np.log(denom), (a,), lambda g: (g * np.sign(x) / denom,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _emit("log", np.log(x), (a,), lambda g: (g / x,))


def rsqrt(a) -> Tensor:
    a = as_tensor(a)
    out = 1.0 / np.sqrt(a.data)
    return _emit("rsqrt", out, (a,), lambda g: (-0.5 * g * out ** 3,))


# -- reductions ----------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(out))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes]))
    shape = a.shape
    kept = tuple(1 if i in axes else d for i, d in enumerate(shape))

    def rule(g):
        return (np.broadcast_to(g.reshape(kept) / n, shape),)

    return _emit("mean", a.data.mean(axis=axes, keepdims=keepdims), (a,), rule)


def variance(a, axis=None, keepdims: bool = False) -> Tensor:
    """Population variance (divides by n)."""
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes]))
    kept = tuple(1 if i in axes else d for i, d in enumerate(a.shape))
    centered = a.data - a.data.mean(axis=axes, keepdims=True)
    out = (centered * centered).mean(axis=axes, keepdims=keepdims)
    return _emit("variance", out, (a,), lambda g: (g.reshape(kept) * (2.0 / n) * centered,))


def _mean_over(x: np.ndarray, axes: tuple[int, ...]) -> np.ndarray:
    if axes == (x.ndim - 1,):
        # BLAS contraction beats ufunc.reduce on a short trailing axis
        return (x @ np.full(x.shape[-1], 1.0 / x.shape[-1], dtype=x.dtype))[..., None]
    return x.mean(axis=axes, keepdims=True)


def normalize(a, axis=-1, eps: float = 1e-5) -> Tensor:
    """``(x - mean) / sqrt(var + eps)`` over ``axis``, as one fused node."""
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    x = a.data
    centered = x - _mean_over(x, axes)
    inv = 1.0 / np.sqrt(_mean_over(centered * centered, axes) + x.dtype.type(eps))
    xhat = centered * inv

    def rule(g):
        return (inv * (g - _mean_over(g, axes) - xhat * _mean_over(g * xhat, axes)),)

    return _emit("normalize", xhat, (a,), rule)


# -- linear algebra and structure ---------------------------------------------

def matmul(a, b) -> Tensor:
    """Contract the last axis of ``a`` with the first axis of a 2-d ``b``.

    ``a`` may carry any number of leading axes; when ``b`` is not 2-d the call
    falls back to ``np.matmul`` broadcasting semantics.
    """
    a, b = as_tensor(a), as_tensor(b)
    x, w = a.data, b.data
    if b.ndim == 2:
        if x.shape[-1] != w.shape[0]:
            raise ShapeError(f"matmul: last axis {x.shape[-1]} != {w.shape[0]}")
        out = x @ w

        def rule(g):
            gx = g @ w.T
            gw = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return gx, gw

        return _emit("matmul", out, (a, b), rule)
    try:
        out = np.matmul(x, w)
    except ValueError as exc:
        raise ShapeError(f"matmul: {exc}") from None

    def rule_nd(g):
        gx = np.matmul(g, np.swapaxes(w, -1, -2))
        gw = np.matmul(np.swapaxes(x, -1, -2), g)
        return _unbroadcast(gx, x.shape), _unbroadcast(gw, w.shape)

    return _emit("matmul", out, (a, b), rule_nd)


def concat(tensors: Sequence, axis: int) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat needs at least one tensor")
    nd = ts[0].ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"concat axis {axis} out of range for rank {nd}")
    axis %= nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != axis):
            raise ShapeError(f"concat: incompatible shapes {ts[0].shape} and {t.shape} on axis {axis}")
    cuts = np.cumsum([t.shape[axis] for t in ts])[:-1]
    out = np.concatenate([t.data for t in ts], axis=axis)
    return _emit("concat", out, ts, lambda g: tuple(np.split(g, cuts, axis=axis)))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {src} into {tuple(shape)}") from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(src),))


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"invalid permutation {axes} for rank {a.ndim}")
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


# -- convolution and pooling --------------------------------------------------

def pad_amounts(size: int, k: int, padding: str) -> tuple[int, int]:
    """Zero padding ``(before, after)`` along one axis; odd deficits pad the trailing side."""
    if padding == "valid":
        return 0, 0
    if padding == "same":
        total = k - 1
        return total // 2, total - total // 2
    raise ValueError(f"padding must be 'valid' or 'same', got {padding!r}")


def _batched(x: Tensor, rank: int) -> tuple[Tensor, bool]:
    if x.ndim == rank - 1:
        return reshape(x, (1, *x.shape)), True
    if x.ndim != rank:
        raise ShapeError(f"expected rank {rank - 1} or {rank} input, got shape {x.shape}")
    return x, False


def _pad_hw(x: Tensor, kh: int, kw: int, padding: str) -> Tensor:
    ph, pw = pad_amounts(x.shape[1], kh, padding), pad_amounts(x.shape[2], kw, padding)
    if ph == (0, 0) and pw == (0, 0):
        return x
    src = x.shape
    out = np.pad(x.data, ((0, 0), ph, pw, (0, 0)))
    h0, w0 = ph[0], pw[0]
    return _emit("pad", out, (x,), lambda g: (g[:, h0:h0 + src[1], w0:w0 + src[2], :],))


def conv2d(x, kernel, padding: str = "valid") -> Tensor:
    """Bias-free 2-d cross-correlation.

    ``x`` is ``(N, ch, t, C_in)`` (or unbatched ``(ch, t, C_in)``) and
    ``kernel`` is ``(k_ch, k_t, C_in, C_out)``. Output element
    ``y[n, i, j, o] = sum_{m, l, c} x[n, i+m, j+l, c] * kernel[m, l, c, o]``.
    """
    x, k = as_tensor(x), as_tensor(kernel)
    x, squeeze = _batched(x, 4)
    if k.ndim != 4:
        raise ShapeError(f"conv2d kernel must be rank 4, got {k.shape}")
    kh, kw, cin, cout = k.shape
    if x.shape[3] != cin:
        raise ShapeError(f"conv2d: input has {x.shape[3]} feature layers, kernel expects {cin}")
    x = _pad_hw(x, kh, kw, padding)
    n, h, w, _ = x.shape
    if kh > h or kw > w:
        raise ShapeError(f"conv2d: kernel ({kh}, {kw}) larger than input ({h}, {w})")
    ho, wo = h - kh + 1, w - kw + 1
    xd, kd = x.data, k.data
    # im2col: rows are output positions, columns run over (kh, kw, cin)
    win = sliding_window_view(xd, (kh, kw), axis=(1, 2))  # (n, ho, wo, cin, kh, kw)
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * cin)
    k2 = kd.reshape(kh * kw * cin, cout)
    out = (cols @ k2).reshape(n, ho, wo, cout)
    need_x = x.tape is not None

    def rule(g):
        g2 = g.reshape(-1, cout)
        gk = (cols.T @ g2).reshape(kh, kw, cin, cout)
        if not need_x:
            return None, gk
        gcols = (g2 @ k2.T).reshape(n, ho, wo, kh, kw, cin)
        gx = np.zeros_like(xd)
        for m in range(kh):
            for l in range(kw):
                gx[:, m:m + ho, l:l + wo, :] += gcols[:, :, :, m, l, :]
        return gx, gk

    y = _emit("conv2d", out, (x, k), rule)
    return reshape(y, y.shape[1:]) if squeeze else y


def depthwise_conv2d(x, kernel, padding: str = "valid") -> Tensor:
    """One ``(k_ch, k_t)`` filter per feature layer; ``kernel`` is ``(k_ch, k_t, C)``."""
    x, k = as_tensor(x), as_tensor(kernel)
    x, squeeze = _batched(x, 4)
    if k.ndim != 3:
        raise ShapeError(f"depthwise kernel must be rank 3, got {k.shape}")
    kh, kw, c = k.shape
    if x.shape[3] != c:
        raise ShapeError(f"depthwise_conv2d: input has {x.shape[3]} feature layers, kernel expects {c}")
    x = _pad_hw(x, kh, kw, padding)
    n, h, w, _ = x.shape
    if kh > h or kw > w:
        raise ShapeError(f"depthwise_conv2d: kernel ({kh}, {kw}) larger than input ({h}, {w})")
    ho, wo = h - kh + 1, w - kw + 1
    xd, kd = x.data, k.data
    out = np.zeros((n, ho, wo, c), dtype=np.result_type(xd, kd))
    for m in range(kh):
        for l in range(kw):
            out += xd[:, m:m + ho, l:l + wo, :] * kd[m, l]

    def rule(g):
        gx = np.zeros_like(xd)
        gk = np.empty_like(kd)
        for m in range(kh):
            for l in range(kw):
                gx[:, m:m + ho, l:l + wo, :] += g * kd[m, l]
                gk[m, l] = np.einsum("nhwc,nhwc->c", xd[:, m:m + ho, l:l + wo, :], g)
        return gx, gk

    y = _emit("depthwise_conv2d", out, (x, k), rule)
    return reshape(y, y.shape[1:]) if squeeze else y


def separable_conv2d(x, depthwise, pointwise, padding: str = "valid") -> Tensor:
    """Depthwise convolution followed by a 1x1 feature-mixing convolution."""
    pw = as_tensor(pointwise)
    if pw.ndim != 2:
        raise ShapeError(f"pointwise kernel must be (C_in, C_out), got {pw.shape}")
    return matmul(depthwise_conv2d(x, depthwise, padding), pw)


def avg_pool(x, pool: int, stride: int) -> Tensor:
    """Mean over ``(1, pool)`` windows along the temporal axis, no padding.

    ``x`` is ``(N, ch, t, F)``; output length is ``(t - pool) // stride + 1``.
    """
    x = as_tensor(x)
    x, squeeze = _batched(x, 4)
    t = x.shape[2]
    if pool < 1 or stride < 1:
        raise ValueError("pool and stride must be positive")
    if pool > t:
        raise ShapeError(f"avg_pool: pool {pool} exceeds temporal length {t}")
    to = (t - pool) // stride + 1
    xd = x.data
    win = sliding_window_view(xd, pool, axis=2)[:, :, ::stride]  # (n, ch, to, f, pool)
    out = win.mean(axis=-1)
    span = stride * (to - 1) + 1

    def rule(g):
        gx = np.zeros_like(xd)
        share = g / pool
        for k in range(pool):
            gx[:, :, k:k + span:stride, :] += share
        return (gx,)

    y = _emit("avg_pool", out, (x,), rule)
    return reshape(y, y.shape[1:]) if squeeze else y


# -- softmax family -----------------------------------------------------------

def log_softmax(a) -> Tensor:
    """Log-probabilities along the last axis via the log-sum-exp shift."""
    a = as_tensor(a)
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    p = np.exp(out)
    return _emit("log_softmax", out, (a,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def softmax(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)
    return _emit("softmax", p, (a,), lambda g: (p * (g - (g * p).sum(axis=-1, keepdims=True)),))
