"""Central finite-difference verification of every primitive and layer.

Each check projects the op output onto fixed random weights to get a scalar,
differentiates it on a tape, and compares against central differences in
float64. The reported error is the normwise relative error
``max|analytic - numeric| / max(max|analytic|, max|numeric|, floor)`` per
input, where ``floor`` is 1e-3 of the largest gradient magnitude across all
inputs of the check (so exactly-zero gradients do not divide noise by noise).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .layers import Context, batch_norm, dense, layer_norm
from .model import AbsoluteNet, ModelConfig

DEFAULT_TOLERANCE = 1e-4
KINK_TOLERANCE = 1e-2


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)


def _scalarize(out: Tensor, weights: np.ndarray) -> Tensor:
    return ad.mean(ad.mul(out, weights))


def analytic_grads(fn: Callable, inputs: Sequence[np.ndarray], weights: np.ndarray) -> list[np.ndarray]:
    tape = Tape()
    ts = [tape.variable(x) for x in inputs]
    loss = _scalarize(fn(*ts), weights)
    return tape.gradient(loss, ts)


def numeric_grads(fn: Callable, inputs: Sequence[np.ndarray], weights: np.ndarray, h: float = 1e-5,
                  coords: Sequence[np.ndarray | None] | None = None) -> list[np.ndarray]:
    """Central differences. ``coords[i]`` restricts input ``i`` to a subset of
    flat indices (others are left as NaN)."""
    arrays = [np.array(x, dtype=np.float64) for x in inputs]

    def f():
        return float(_scalarize(fn(*[Tensor(a) for a in arrays]), weights).item())

    grads = []
    for i, a in enumerate(arrays):
        g = np.full(a.size, np.nan) if coords and coords[i] is not None else np.zeros(a.size)
        flat = a.reshape(-1)
        idx = range(a.size) if not coords or coords[i] is None else coords[i]
        for j in idx:
            orig = flat[j]
            flat[j] = orig + h
            up = f()
            flat[j] = orig - h
            down = f()
            flat[j] = orig
            g[j] = (up - down) / (2 * h)
        grads.append(g.reshape(a.shape))
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 0.0) -> float:
    mask = ~np.isnan(numeric)
    a, n = np.asarray(analytic)[mask], numeric[mask]
    if a.size == 0:
        return 0.0
    scale = max(np.max(np.abs(a)), np.max(np.abs(n)), floor, 1e-300)
    return float(np.max(np.abs(a - n)) / scale)


def check(name: str, fn: Callable, inputs: Sequence[np.ndarray], rng: np.random.Generator,
          tolerance: float = DEFAULT_TOLERANCE, h: float = 1e-5, max_coords: int | None = None) -> CheckResult:
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    out_shape = fn(*[Tensor(x) for x in inputs]).shape
    weights = rng.standard_normal(out_shape)
    coords = None
    if max_coords is not None:
        coords = [None if x.size <= max_coords else np.sort(rng.choice(x.size, max_coords, replace=False))
                  for x in inputs]
    an = analytic_grads(fn, inputs, weights)
    nu = numeric_grads(fn, inputs, weights, h, coords)
    floor = 1e-3 * max(float(np.nanmax(np.abs(n))) if n.size else 0.0 for n in nu)
    err = max(relative_error(a, n, floor) for a, n in zip(an, nu))
    return CheckResult(name, err, tolerance)


def _away_from_zero(x: np.ndarray, margin: float = 0.1) -> np.ndarray:
    return np.where(x >= 0, x + margin, x - margin)


def _small_model_config() -> ModelConfig:
    return ModelConfig(input_channels=4, input_samples=20, spatial_kernel=4, temporal_kernel=3,
                       st_spatial_filters=3, st_temporal_filters=4, ts_temporal_filters=3,
                       ts_spatial_filters=4, separable_kernel=3, separable_filters=3,
                       pool_size=5, pool_stride=2, dropout=0.0)


def _model_fn(model: AbsoluteNet, x: np.ndarray, mode: str):
    names = [k for k in model.params if model.trainable[k]]
    fixed = {k: Tensor(v) for k, v in model.params.items() if not model.trainable[k]}

    def fn(*ts):
        ctx = Context({**fixed, **dict(zip(names, ts))}, mode, ad.make_rng(0))
        return model.logits(Tensor(x), ctx)

    return fn, [model.params[k] for k in names]


def registry(rng: np.random.Generator) -> dict[str, Callable[[], tuple[Callable, list[np.ndarray], float]]]:
    """Named checks: each factory returns ``(fn, inputs, tolerance)``."""
    r = lambda *s: rng.standard_normal(s)
    pos = lambda *s: rng.uniform(0.5, 2.0, s)
    T = DEFAULT_TOLERANCE

    def model_check(variant: str, mode: str):
        def make():
            cfg = _small_model_config()
            from dataclasses import replace
            model = AbsoluteNet(replace(cfg, variant=variant), seed=1, dtype=np.float64)
            fn, inputs = _model_fn(model, r(3, 4, 20, 1), mode)
            return fn, inputs, T
        return make

    checks = {
        "add": lambda: (ad.add, [r(3, 4), r(4)], T),
        "sub": lambda: (ad.sub, [r(3, 4), r(3, 1)], T),
        "mul": lambda: (ad.mul, [r(3, 4), r(3, 4)], T),
        "div": lambda: (ad.div, [r(3, 4), pos(3, 4)], T),
        "scalar_mul": lambda: ((lambda a: ad.scalar_mul(a, -2.5)), [r(5)], T),
        "square": lambda: (ad.square, [r(4, 5)], T),
        "abs": lambda: (ad.abs_, [_away_from_zero(r(4, 5))], T),
        "abs_near_kink": lambda: (ad.abs_, [rng.choice([-1, 1], 20) * rng.uniform(1e-3, 1e-2, 20)],
                                  KINK_TOLERANCE),
        "log_abs": lambda: ((lambda a: ad.log_abs_eps(a, 1e-7)), [_away_from_zero(r(4, 5))], T),
        "log_abs_near_kink": lambda: ((lambda a: ad.log_abs_eps(a, 1e-7)),
                                      [rng.choice([-1, 1], 20) * rng.uniform(1e-3, 1e-2, 20)], KINK_TOLERANCE),
        "exp": lambda: (ad.exp, [r(4, 3)], T),
        "log": lambda: (ad.log, [pos(4, 3)], T),
        "rsqrt": lambda: (ad.rsqrt, [pos(4, 3)], T),
        "mean": lambda: ((lambda a: ad.mean(a, axis=(0, 2))), [r(3, 4, 5)], T),
        "variance": lambda: ((lambda a: ad.variance(a, axis=-1, keepdims=True)), [r(3, 6)], T),
        "normalize": lambda: ((lambda a: ad.normalize(a, -1, 1e-5)), [r(3, 2, 6)], T),
        "normalize_multi_axis": lambda: ((lambda a: ad.normalize(a, (0, 1, 2), 1e-5)), [r(3, 1, 5, 4)], T),
        "matmul": lambda: (ad.matmul, [r(2, 3, 4), r(4, 5)], T),
        "matmul_batched": lambda: (ad.matmul, [r(2, 3, 4), r(2, 4, 5)], T),
        "concat": lambda: ((lambda a, b: ad.concat([a, b], axis=-1)), [r(1, 4, 3), r(1, 4, 2)], T),
        "reshape": lambda: ((lambda a: ad.reshape(a, (6, 2))), [r(3, 4)], T),
        "transpose": lambda: ((lambda a: ad.transpose(a, (2, 0, 1))), [r(2, 3, 4)], T),
        "conv2d_valid": lambda: ((lambda x, k: ad.conv2d(x, k, "valid")), [r(2, 5, 7, 2), r(3, 2, 2, 3)], T),
        "conv2d_same": lambda: ((lambda x, k: ad.conv2d(x, k, "same")), [r(2, 4, 6, 2), r(2, 3, 2, 2)], T),
        "conv2d_spatial": lambda: ((lambda x, k: ad.conv2d(x, k)), [r(2, 6, 5, 1), r(6, 1, 1, 3)], T),
        "depthwise_conv2d": lambda: ((lambda x, k: ad.depthwise_conv2d(x, k, "same")),
                                     [r(2, 1, 8, 3), r(1, 3, 3)], T),
        "separable_conv2d": lambda: ((lambda x, d, p: ad.separable_conv2d(x, d, p, "same")),
                                     [r(2, 1, 8, 3), r(1, 3, 3), r(3, 4)], T),
        "avg_pool": lambda: ((lambda x: ad.avg_pool(x, 4, 3)), [r(2, 1, 14, 3)], T),
        "log_softmax": lambda: (ad.log_softmax, [r(4, 3)], T),
        "softmax": lambda: (ad.softmax, [r(4, 3)], T),
        "layer_norm": lambda: ((lambda x, g, b: layer_norm(x, g, b, 1e-5)), [r(2, 1, 5, 4), r(4), r(4)], T),
        "batch_norm_train": lambda: ((lambda x, g, b: batch_norm(x, g, b, np.zeros(4), np.ones(4),
                                                                 mode="train")[0]),
                                     [r(3, 1, 5, 4), r(4), r(4)], T),
        "batch_norm_infer": lambda: ((lambda x, g, b: batch_norm(x, g, b, np.full(4, 0.3), np.full(4, 2.0),
                                                                 mode="infer")[0]),
                                     [r(3, 1, 5, 4), r(4), r(4)], T),
        "dense": lambda: (dense, [r(2, 1, 5, 4), r(4, 3), r(3)], T),
        "dense_abs": lambda: ((lambda x, w, b: ad.abs_(dense(x, w, b))),
                              [_away_from_zero(r(2, 4)), 0.1 * r(4, 3), _away_from_zero(r(3), 2.0)], T),
        "cross_entropy": lambda: (_ce_fn(rng), [r(6, 2)], T),
    }
    for variant in ("full", "no_temporal_spatial", "no_spatial_temporal", "no_fusion1", "no_fusion2"):
        checks[f"model_{variant}"] = model_check(variant, "train")
    checks["model_full_infer"] = model_check("full", "infer")
    return checks


def _ce_fn(rng):
    from .training import cross_entropy
    labels = rng.integers(0, 2, 6)
    return lambda z: cross_entropy(z, labels)


def run_checks(names: Sequence[str] | None = None, tolerance: float | None = None,
               seed: int = 0) -> list[CheckResult]:
    rng = ad.make_rng(seed)
    reg = registry(rng)
    names = list(reg) if not names else list(names)
    unknown = [n for n in names if n not in reg]
    if unknown:
        raise KeyError(f"unknown check(s): {', '.join(unknown)}")
    results = []
    for name in names:
        fn, inputs, tol = reg[name]()
        res = check(name, fn, inputs, rng, tol if tolerance is None else tolerance)
        results.append(res)
    return results


UNARY = {"abs": ad.abs_, "log_abs": lambda x: ad.log_abs_eps(x, 1e-7), "square": ad.square,
         "exp": ad.exp, "log": ad.log, "rsqrt": ad.rsqrt}


def gradient_at(op: str, value: float) -> float:
    """Analytic derivative of a unary primitive at a point."""
    if op not in UNARY:
        raise KeyError(f"no unary primitive {op!r}; choose from {sorted(UNARY)}")
    tape = Tape()
    x = tape.variable(np.array([value], dtype=np.float64))
    y = ad.mean(UNARY[op](x))
    return float(tape.gradient(y, [x])[0][0])
