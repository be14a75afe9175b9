"""Layer vocabulary for AbsoluteNet and the parameter file format.

Layers are small stateless descriptions: they know their parameter shapes,
how to initialise them, their output shape, and how to run forward given a
:class:`Context` that maps qualified parameter names to tensors. Parameter
storage lives on the model so checkpoints are plain ``dict[str, ndarray]``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

MODES = ("train", "infer")


@dataclass
class Context:
    """Per-call state threaded through a forward pass."""

    params: dict[str, Tensor]
    mode: str = "infer"
    rng: np.random.Generator | None = None
    updates: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=np.float32):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    """Base class. ``label`` is the human-readable row name used in reports."""

    label = "Layer"

    def __init__(self, name: str, label: str | None = None):
        self.name = name
        if label is not None:
            self.label = label

    def param_shapes(self, in_shape: tuple[int, ...]) -> dict[str, tuple[tuple[int, ...], bool]]:
        """``{local_name: (shape, trainable)}`` for a per-sample input shape."""
        return {}

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape

    def init_params(self, in_shape, rng, dtype=np.float32) -> dict[str, np.ndarray]:
        return {}

    def param_count(self, in_shape) -> tuple[int, int]:
        """``(trainable, non_trainable)`` scalar counts."""
        tr = nt = 0
        for shape, trainable in self.param_shapes(in_shape).values():
            n = int(np.prod(shape))
            if trainable:
                tr += n
            else:
                nt += n
        return tr, nt

    def p(self, ctx: Context, key: str) -> Tensor:
        return ctx.params[f"{self.name}/{key}"]

    def forward(self, x: Tensor, ctx: Context) -> Tensor:
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r})"


def _require_rank(in_shape, rank, who):
    if len(in_shape) != rank:
        raise ShapeError(f"{who}: expected rank-{rank} per-sample input, got {in_shape}")


class Conv2D(Layer):
    label = "Conv2D"

    def __init__(self, name, filters: int, kernel: tuple[int, int], padding="valid", label=None):
        super().__init__(name, label)
        self.filters, self.kernel, self.padding = filters, tuple(kernel), padding

    def param_shapes(self, in_shape):
        _require_rank(in_shape, 3, self.name)
        return {"kernel": ((*self.kernel, in_shape[2], self.filters), True)}

    def output_shape(self, in_shape):
        _require_rank(in_shape, 3, self.name)
        h, w, _ = in_shape
        kh, kw = self.kernel
        if self.padding == "same":
            return (h, w, self.filters)
        if kh > h or kw > w:
            raise ShapeError(f"{self.name}: kernel {self.kernel} does not fit input {in_shape}")
        return (h - kh + 1, w - kw + 1, self.filters)

    def init_params(self, in_shape, rng, dtype=np.float32):
        kh, kw = self.kernel
        cin = in_shape[2]
        shape = (kh, kw, cin, self.filters)
        return {"kernel": glorot_uniform(rng, shape, kh * kw * cin, kh * kw * self.filters, dtype)}

    def forward(self, x, ctx):
        return ad.conv2d(x, self.p(ctx, "kernel"), self.padding)


class SeparableConv2D(Layer):
    label = "Separable Conv2D"

    def __init__(self, name, filters: int, kernel: tuple[int, int], padding="same", label=None):
        super().__init__(name, label)
        self.filters, self.kernel, self.padding = filters, tuple(kernel), padding

    def param_shapes(self, in_shape):
        _require_rank(in_shape, 3, self.name)
        c = in_shape[2]
        return {"depthwise": ((*self.kernel, c), True), "pointwise": ((c, self.filters), True)}

    def output_shape(self, in_shape):
        h, w, _ = Conv2D.output_shape(self, in_shape)
        return (h, w, self.filters)

    def init_params(self, in_shape, rng, dtype=np.float32):
        kh, kw = self.kernel
        c = in_shape[2]
        return {
            "depthwise": glorot_uniform(rng, (kh, kw, c), kh * kw * c, kh * kw, dtype),
            "pointwise": glorot_uniform(rng, (c, self.filters), c, self.filters, dtype),
        }

    def forward(self, x, ctx):
        return ad.separable_conv2d(x, self.p(ctx, "depthwise"), self.p(ctx, "pointwise"), self.padding)


class LayerNorm(Layer):
    """Normalise over the trailing feature axis at every position."""

    label = "Layer Normalization"

    def __init__(self, name, eps: float = 1e-5, label=None):
        super().__init__(name, label)
        self.eps = eps

    def param_shapes(self, in_shape):
        f = in_shape[-1]
        return {"gamma": ((f,), True), "beta": ((f,), True)}

    def init_params(self, in_shape, rng, dtype=np.float32):
        f = in_shape[-1]
        return {"gamma": np.ones(f, dtype), "beta": np.zeros(f, dtype)}

    def forward(self, x, ctx):
        return layer_norm(x, self.p(ctx, "gamma"), self.p(ctx, "beta"), self.eps)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = ad.as_tensor(x), ad.as_tensor(gamma), ad.as_tensor(beta)
    f = x.shape[-1]
    if gamma.shape != (f,) or beta.shape != (f,):
        raise ShapeError(f"layer_norm: gamma/beta must have shape ({f},), got {gamma.shape}, {beta.shape}")
    return ad.add(ad.mul(ad.normalize(x, -1, eps), gamma), beta)


def batch_norm(x, gamma, beta, moving_mean, moving_var, momentum: float = 0.9,
               eps: float = 1e-5, mode: str = "infer"):
    """Feature-axis batch normalisation.

    Returns ``(output, (new_moving_mean, new_moving_var))``; the second item
    is ``None`` in infer mode. Moving statistics are never differentiated.
    """
    x, gamma, beta = ad.as_tensor(x), ad.as_tensor(gamma), ad.as_tensor(beta)
    mm = np.asarray(moving_mean.data if isinstance(moving_mean, Tensor) else moving_mean)
    mv = np.asarray(moving_var.data if isinstance(moving_var, Tensor) else moving_var)
    f = x.shape[-1]
    for arr in (gamma.data, beta.data, mm, mv):
        if arr.shape != (f,):
            raise ShapeError(f"batch_norm: per-feature arrays must have shape ({f},), got {arr.shape}")
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("batch_norm in train mode needs a batch of at least 2")
        axes = tuple(range(x.ndim - 1))
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        xhat = ad.normalize(x, axes, eps)
        new_mean = (momentum * mm + (1 - momentum) * mu).astype(mm.dtype)
        new_var = (momentum * mv + (1 - momentum) * var).astype(mv.dtype)
        updates = (new_mean, new_var)
    elif mode == "infer":
        scale = (1.0 / np.sqrt(mv + eps)).astype(x.dtype)
        xhat = ad.mul(ad.sub(x, mm.astype(x.dtype)), scale)
        updates = None
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return ad.add(ad.mul(xhat, gamma), beta), updates


class BatchNorm(Layer):
    label = "Batch Normalization"

    def __init__(self, name, momentum: float = 0.9, eps: float = 1e-5, label=None):
        super().__init__(name, label)
        self.momentum, self.eps = momentum, eps

    def param_shapes(self, in_shape):
        f = (in_shape[-1],)
        return {"gamma": (f, True), "beta": (f, True),
                "moving_mean": (f, False), "moving_var": (f, False)}

    def init_params(self, in_shape, rng, dtype=np.float32):
        f = in_shape[-1]
        return {"gamma": np.ones(f, dtype), "beta": np.zeros(f, dtype),
                "moving_mean": np.zeros(f, dtype), "moving_var": np.ones(f, dtype)}

    def forward(self, x, ctx):
        out, updates = batch_norm(
            x, self.p(ctx, "gamma"), self.p(ctx, "beta"),
            self.p(ctx, "moving_mean"), self.p(ctx, "moving_var"),
            self.momentum, self.eps, ctx.mode)
        if updates is not None:
            ctx.updates[f"{self.name}/moving_mean"], ctx.updates[f"{self.name}/moving_var"] = updates
        return out


ACTIVATIONS = {
    "square": ("Squared Activation", ad.square),
    "abs": ("Absolute Activation", ad.abs_),
    "log_abs": ("Logarithmic Activation", None),
}


class Activation(Layer):
    def __init__(self, name, kind: str, eps: float = 1e-7, label=None):
        if kind not in ACTIVATIONS:
            raise ValueError(f"unknown activation {kind!r}")
        super().__init__(name, label or ACTIVATIONS[kind][0])
        self.kind, self.eps = kind, eps

    def forward(self, x, ctx):
        if self.kind == "log_abs":
            return ad.log_abs_eps(x, self.eps)
        return ACTIVATIONS[self.kind][1](x)


def avg_pool_length(t: int, pool: int, stride: int) -> int:
    if pool > t:
        raise ShapeError(f"pool size {pool} exceeds temporal length {t}")
    return (t - pool) // stride + 1


class AvgPool(Layer):
    label = "Average Pooling 2D"

    def __init__(self, name, pool: int, stride: int, label=None):
        super().__init__(name, label)
        self.pool, self.stride = pool, stride

    def output_shape(self, in_shape):
        _require_rank(in_shape, 3, self.name)
        h, w, f = in_shape
        return (h, avg_pool_length(w, self.pool, self.stride), f)

    def forward(self, x, ctx):
        return ad.avg_pool(x, self.pool, self.stride)


def dropout(x, rate: float, mode: str = "infer", rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity in infer mode or when ``rate == 0``."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = ad.as_tensor(x)
    if mode == "infer" or rate == 0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1 - rate)
    return ad.mul(x, keep)


class Dropout(Layer):
    def __init__(self, name, rate: float, label=None):
        super().__init__(name, label or f"Dropout ({rate:.0%})")
        if not 0 <= rate < 1:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, ctx):
        return dropout(x, self.rate, ctx.mode, ctx.rng)


def dense(x, weight, bias) -> Tensor:
    x, weight = ad.as_tensor(x), ad.as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"dense: input features {x.shape[-1]} do not match weight {weight.shape}")
    return ad.add(ad.matmul(x, weight), bias)


class Dense(Layer):
    """Affine map on the trailing axis, applied at every leading position."""

    def __init__(self, name, units: int, activation: str | None = None, label=None):
        if label is None:
            label = {"abs": "Dense (Absolute Activation)", None: "Dense (Softmax)"}[activation]
        super().__init__(name, label)
        self.units, self.activation = units, activation

    def param_shapes(self, in_shape):
        return {"weight": ((in_shape[-1], self.units), True), "bias": ((self.units,), True)}

    def output_shape(self, in_shape):
        return (*in_shape[:-1], self.units)

    def init_params(self, in_shape, rng, dtype=np.float32):
        fin = in_shape[-1]
        return {"weight": glorot_uniform(rng, (fin, self.units), fin, self.units, dtype),
                "bias": np.zeros(self.units, dtype)}

    def forward(self, x, ctx):
        y = dense(x, self.p(ctx, "weight"), self.p(ctx, "bias"))
        return ad.abs_(y) if self.activation == "abs" else y


class Flatten(Layer):
    label = "Flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, ctx):
        return ad.reshape(x, (x.shape[0], -1))


class Concatenate(Layer):
    label = "Concatenation"

    def output_shape(self, in_shapes):
        return (*in_shapes[0][:-1], sum(s[-1] for s in in_shapes))

    def forward(self, xs, ctx):
        return ad.concat(xs, axis=-1)


# -- parameter file format ---------------------------------------------------

MAGIC = b"ABSN"
FORMAT_VERSION = 1


class ParamFormatError(ValueError):
    pass


def dump_params(params: dict[str, np.ndarray], fh: BinaryIO) -> None:
    """Write parameters as: magic, u32 version, then per tensor
    ``u16 name_len, name, u8 rank, u32 extents..., float32 LE values``."""
    fh.write(MAGIC + struct.pack("<I", FORMAT_VERSION))
    for name, arr in params.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        fh.write(struct.pack("<H", len(raw)) + raw)
        fh.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_params(fh: BinaryIO) -> dict[str, np.ndarray]:
    buf = fh.read()
    if buf[:4] != MAGIC:
        raise ParamFormatError("not a parameter file (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != FORMAT_VERSION:
        raise ParamFormatError(f"unsupported parameter format version {version}")
    pos, out = 8, {}
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<H", buf, pos)
            name = buf[pos + 2:pos + 2 + n].decode("utf-8")
            pos += 2 + n
            (rank,) = struct.unpack_from("<B", buf, pos)
            shape = struct.unpack_from(f"<{rank}I", buf, pos + 1)
            pos += 1 + 4 * rank
            count = int(np.prod(shape))
            if pos + 4 * count > len(buf):
                raise ParamFormatError(f"truncated data for parameter {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * count
    except struct.error as exc:
        raise ParamFormatError(f"truncated parameter file: {exc}") from None
    return out


def save_params(params: dict[str, np.ndarray], path) -> None:
    with open(path, "wb") as fh:
        dump_params(params, fh)


def read_params(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return load_params(fh)
