"""AbsoluteNet assembly, ablation variants and the layer-wise report."""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .layers import (Activation, AvgPool, BatchNorm, Concatenate, Context, Conv2D, Dense,
                     Dropout, Flatten, LayerNorm, SeparableConv2D, avg_pool_length,
                     read_params, save_params)

VARIANTS = ("full", "no_temporal_spatial", "no_spatial_temporal", "no_fusion1", "no_fusion2",
            "single_modality")
ABLATION_STUDIES = {1: "no_temporal_spatial", 2: "no_spatial_temporal", 3: "no_fusion1",
                    4: "no_fusion2"}
CLASS_NAMES = ("standard", "deviant")


@dataclass(frozen=True)
class ModelConfig:
    input_channels: int = 28
    input_samples: int = 150
    spatial_kernel: int = 28
    temporal_kernel: int = 5
    st_spatial_filters: int = 40
    st_temporal_filters: int = 60
    ts_temporal_filters: int = 20
    ts_spatial_filters: int = 60
    separable_kernel: int = 3
    separable_filters: int = 10
    pool_size: int = 25
    pool_stride: int = 8
    dropout: float = 0.3
    log_eps: float = 1e-7
    norm_eps: float = 1e-5
    bn_momentum: float = 0.9
    n_classes: int = 2
    variant: str = "full"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        ints = {k: v for k, v in asdict(self).items() if isinstance(v, int) and not isinstance(v, bool)}
        bad = [k for k, v in ints.items() if v < 1]
        if bad:
            raise ValueError(f"config fields must be positive: {', '.join(bad)}")
        if self.spatial_kernel != self.input_channels:
            raise ValueError(f"spatial_kernel ({self.spatial_kernel}) must equal input_channels "
                             f"({self.input_channels})")
        if not 0 <= self.dropout < 1:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @classmethod
    def single_modality(cls, **kw) -> "ModelConfig":
        kw = {"input_channels": 14, "spatial_kernel": 14, "variant": "single_modality", **kw}
        return cls(**kw)

    def with_channels(self, n: int) -> "ModelConfig":
        return replace(self, input_channels=n, spatial_kernel=n)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


def ablate(config: ModelConfig, study: int) -> ModelConfig:
    """Config for ablation study 1-4 of a full-variant base config."""
    if study not in ABLATION_STUDIES:
        raise ValueError(f"ablation study must be one of 1-4, got {study!r}")
    if config.variant != "full":
        raise ValueError("ablation starts from the full variant")
    return replace(config, variant=ABLATION_STUDIES[study])


@dataclass
class ReportRow:
    block: str
    layer: str
    output_shape: tuple[int, ...]
    params: int
    trainable: int


@dataclass
class LayerReport:
    rows: list[ReportRow]
    trainable: int
    non_trainable: int

    @property
    def total(self) -> int:
        return self.trainable + self.non_trainable

    def records(self) -> list[dict]:
        return [{"block": r.block, "layer": r.layer, "output_shape": list(r.output_shape),
                 "params": r.params} for r in self.rows]

    def format(self) -> str:
        lines = [f"{'Block':<20} {'Layer':<30} {'Output Dimension':<18} {'Params':>8}"]
        for r in self.rows:
            lines.append(f"{r.block:<20} {r.layer:<30} {fmt_shape(r.output_shape):<18} {r.params:>8,}")
        lines.append(f"Total trainable parameters: {self.trainable:,}")
        lines.append(f"Total parameters: {self.total:,}")
        return "\n".join(lines)


def fmt_shape(shape) -> str:
    if len(shape) == 1:
        return f"({shape[0]},)"
    return "(" + ", ".join(str(s) for s in shape) + ")"


class AbsoluteNet:
    """Dual-stream spatio-temporal CNN for two-class epoch classification.

    Parameters live in ``self.params`` (qualified ``layer/name`` keys); the
    layer objects are pure descriptions. Inputs are ``(N, ch, t)`` or
    ``(N, ch, t, 1)`` arrays.
    """

    def __init__(self, config: ModelConfig | None = None, seed: int = 0, dtype=np.float32):
        self.config = config or ModelConfig()
        self.dtype = np.dtype(dtype)
        self._define()
        self._propagate()
        self.init(seed)

    # -- graph definition ---------------------------------------------------
    def _define(self):
        c = self.config
        ks, kt = (c.spatial_kernel, 1), (1, c.temporal_kernel)
        v = c.variant
        self.blocks: list[tuple[str, list]] = []
        self.branch_a = []
        self.branch_b = []
        if v != "no_spatial_temporal":
            self.branch_a = [
                Conv2D("st_spatial", c.st_spatial_filters, ks, label="Spatial Conv2D"),
                LayerNorm("st_norm1", c.norm_eps),
                Activation("st_square", "square"),
                Conv2D("st_temporal", c.st_temporal_filters, kt, label="Temporal Conv2D"),
                LayerNorm("st_norm2", c.norm_eps),
                Activation("st_abs", "abs"),
            ]
            self.blocks.append(("Spatial-Temporal", self.branch_a))
        if v != "no_temporal_spatial":
            self.branch_b = [
                Conv2D("ts_temporal", c.ts_temporal_filters, kt, label="Temporal Conv2D"),
                LayerNorm("ts_norm1", c.norm_eps),
                Activation("ts_square", "square"),
                Conv2D("ts_spatial", c.ts_spatial_filters, ks, label="Spatial Conv2D"),
                LayerNorm("ts_norm2", c.norm_eps),
                Activation("ts_abs", "abs"),
            ]
            self.blocks.append(("Temporal-Spatial", self.branch_b))
        self.concat = Concatenate("concat") if self.branch_a and self.branch_b else None
        self.merge = ([self.concat] if self.concat else []) + [BatchNorm("batch_norm", c.bn_momentum, c.norm_eps)]
        self.blocks.append(("Concatenation", self.merge))
        self.fusion1 = []
        if v != "no_fusion1":
            self.fusion1 = [
                SeparableConv2D("separable", c.separable_filters, (1, c.separable_kernel), "same"),
                LayerNorm("sep_norm", c.norm_eps),
                Activation("sep_abs", "abs"),
            ]
            self.blocks.append(("Fusion Block 1", self.fusion1))
        self.fusion2 = []
        if v != "no_fusion2":
            self.fusion2 = [
                AvgPool("avg_pool", c.pool_size, c.pool_stride),
                Activation("log_abs", "log_abs", c.log_eps),
                Dropout("dropout", c.dropout),
            ]
            self.blocks.append(("Fusion Block 2", self.fusion2))
        self.head = [
            Dense("dense_abs", 2, "abs"),
            Flatten("flatten"),
            Dense("dense_out", c.n_classes, None),
        ]
        self.blocks.append(("Classification Head", self.head))

    @property
    def layers(self) -> list:
        return [layer for _, group in self.blocks for layer in group]

    def _propagate(self):
        """Shape-check the whole graph and cache per-layer input/output shapes."""
        c = self.config
        shape_in = (c.input_channels, c.input_samples, 1)
        self.input_shape = shape_in
        self.shapes: dict[str, tuple[tuple, tuple]] = {}

        def run(seq, shape):
            for layer in seq:
                out = layer.output_shape(shape)
                self.shapes[layer.name] = (shape, out)
                shape = out
            return shape

        outs = [run(br, shape_in) for br in (self.branch_a, self.branch_b) if br]
        if len(outs) == 2:
            if outs[0][:-1] != outs[1][:-1]:
                raise ShapeError(f"branch outputs {outs[0]} and {outs[1]} cannot be concatenated")
            merged = self.concat.output_shape(outs)
            self.shapes["concat"] = (tuple(outs), merged)
        else:
            merged = outs[0]
        bn = self.merge[-1]
        self.shapes[bn.name] = (merged, merged)
        shape = run(self.fusion1 + self.fusion2 + self.head, merged)
        if shape != (c.n_classes,):
            raise ShapeError(f"unexpected network output shape {shape}")

    def init(self, seed: int):
        rng = ad.make_rng(seed)
        self.params: dict[str, np.ndarray] = {}
        self.trainable: dict[str, bool] = {}
        for layer in self.layers:
            in_shape = self.shapes[layer.name][0]
            if isinstance(layer, Concatenate):
                continue
            shapes = layer.param_shapes(in_shape)
            init = layer.init_params(in_shape, rng, self.dtype)
            for key, (shape, trainable) in shapes.items():
                q = f"{layer.name}/{key}"
                assert init[key].shape == tuple(shape)
                self.params[q] = init[key]
                self.trainable[q] = trainable

    # -- execution -------------------------------------------------------------
    def _prepare(self, x) -> np.ndarray:
        arr = np.asarray(x.data if isinstance(x, Tensor) else x)
        if arr.ndim == 3:
            arr = arr[..., None]
        c = self.config
        if arr.ndim != 4 or arr.shape[1:] != (c.input_channels, c.input_samples, 1):
            raise ShapeError(f"expected batch of shape (N, {c.input_channels}, {c.input_samples}[, 1]), "
                             f"got {arr.shape}")
        return arr.astype(self.dtype, copy=False)

    def logits(self, x, ctx: Context) -> Tensor:
        """Pre-softmax class scores for a batch."""
        x = x if isinstance(x, Tensor) else Tensor(self._prepare(x))

        def run(seq, h):
            for layer in seq:
                h = layer.forward(h, ctx)
            return h

        outs = [run(br, x) for br in (self.branch_a, self.branch_b) if br]
        h = self.concat.forward(outs, ctx) if self.concat else outs[0]
        return run(self.merge[-1:] + self.fusion1 + self.fusion2 + self.head, h)

    def context(self, mode: str = "infer", rng=None, params=None) -> Context:
        params = self.params if params is None else params
        return Context({k: Tensor(v) for k, v in params.items()}, mode, rng)

    def forward(self, x, mode: str = "infer", rng=None, batch_size: int = 256) -> np.ndarray:
        """Class probabilities ``(N, n_classes)``."""
        arr = self._prepare(x)
        out = []
        for i in range(0, len(arr), batch_size):
            ctx = self.context(mode, rng)
            out.append(ad.softmax(self.logits(Tensor(arr[i:i + batch_size]), ctx)).data)
        if not out:
            return np.zeros((0, self.config.n_classes), dtype=self.dtype)
        return np.concatenate(out)

    # -- introspection ---------------------------------------------------------
    def report(self) -> LayerReport:
        rows = []
        for block, group in self.blocks:
            for layer in group:
                in_shape, out_shape = self.shapes[layer.name]
                if isinstance(layer, Concatenate):
                    tr = nt = 0
                else:
                    tr, nt = layer.param_count(in_shape)
                rows.append(ReportRow(block, layer.label, tuple(out_shape), tr + nt, tr))
        trainable = sum(int(v.size) for k, v in self.params.items() if self.trainable[k])
        non_trainable = sum(int(v.size) for k, v in self.params.items() if not self.trainable[k])
        return LayerReport(rows, trainable, non_trainable)

    def n_parameters(self, trainable_only: bool = True) -> int:
        return sum(int(v.size) for k, v in self.params.items() if self.trainable[k] or not trainable_only)

    def get_weights(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def set_weights(self, weights: dict[str, np.ndarray]):
        missing = set(self.params) ^ set(weights)
        if missing:
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        for k, v in weights.items():
            if v.shape != self.params[k].shape:
                raise ShapeError(f"{k}: expected {self.params[k].shape}, got {v.shape}")
            self.params[k] = np.array(v, dtype=self.dtype)

    def astype(self, dtype) -> "AbsoluteNet":
        other = copy.copy(self)
        other.dtype = np.dtype(dtype)
        other.params = {k: v.astype(dtype) for k, v in self.params.items()}
        other.trainable = dict(self.trainable)
        return other

    def save(self, path):
        save_params(self.params, path)

    def load(self, path):
        self.set_weights(read_params(path))
        return self


def closed_form_param_counts(config: ModelConfig) -> tuple[int, int]:
    """``(trainable, non_trainable)`` from layer arithmetic alone.

    Written independently of the layer classes so it can cross-check them.
    """
    c = config
    ch, t = c.input_channels, c.input_samples
    kt, ks = c.temporal_kernel, c.spatial_kernel
    trainable = 0
    width = 0
    t_after = t - kt + 1
    if c.variant != "no_spatial_temporal":
        trainable += ks * 1 * 1 * c.st_spatial_filters + 2 * c.st_spatial_filters
        trainable += 1 * kt * c.st_spatial_filters * c.st_temporal_filters + 2 * c.st_temporal_filters
        width += c.st_temporal_filters
    if c.variant != "no_temporal_spatial":
        trainable += 1 * kt * 1 * c.ts_temporal_filters + 2 * c.ts_temporal_filters
        trainable += ks * 1 * c.ts_temporal_filters * c.ts_spatial_filters + 2 * c.ts_spatial_filters
        width += c.ts_spatial_filters
    trainable += 2 * width
    non_trainable = 2 * width
    if c.variant != "no_fusion1":
        trainable += 1 * c.separable_kernel * width + width * c.separable_filters
        width = c.separable_filters
        trainable += 2 * width
    length = t_after
    if c.variant != "no_fusion2":
        length = (t_after - c.pool_size) // c.pool_stride + 1
    trainable += width * 2 + 2
    trainable += length * 2 * c.n_classes + c.n_classes
    return trainable, non_trainable


# Layer-wise architecture as published: (block, layer, output shape, params).
TABLE2 = [
    ("Spatial-Temporal", "Spatial Conv2D", (1, 150, 40), 1120),
    ("Spatial-Temporal", "Layer Normalization", (1, 150, 40), 80),
    ("Spatial-Temporal", "Squared Activation", (1, 150, 40), 0),
    ("Spatial-Temporal", "Temporal Conv2D", (1, 146, 60), 12000),
    ("Spatial-Temporal", "Layer Normalization", (1, 146, 60), 120),
    ("Spatial-Temporal", "Absolute Activation", (1, 146, 60), 0),
    ("Temporal-Spatial", "Temporal Conv2D", (28, 146, 20), 100),
    ("Temporal-Spatial", "Layer Normalization", (28, 146, 20), 40),
    ("Temporal-Spatial", "Squared Activation", (28, 146, 20), 0),
    ("Temporal-Spatial", "Spatial Conv2D", (1, 146, 60), 33600),
    ("Temporal-Spatial", "Layer Normalization", (1, 146, 60), 120),
    ("Temporal-Spatial", "Absolute Activation", (1, 146, 60), 0),
    ("Concatenation", "Concatenation", (1, 146, 120), 0),
    ("Concatenation", "Batch Normalization", (1, 146, 120), 480),
    ("Fusion Block 1", "Separable Conv2D", (1, 146, 10), 1560),
    ("Fusion Block 1", "Layer Normalization", (1, 146, 10), 20),
    ("Fusion Block 1", "Absolute Activation", (1, 146, 10), 0),
    ("Fusion Block 2", "Average Pooling 2D", (1, 16, 10), 0),
    ("Fusion Block 2", "Logarithmic Activation", (1, 16, 10), 0),
    ("Fusion Block 2", "Dropout (30%)", (1, 16, 10), 0),
    ("Classification Head", "Dense (Absolute Activation)", (1, 16, 2), 22),
    ("Classification Head", "Flatten", (32,), 0),
    ("Classification Head", "Dense (Softmax)", (2,), 66),
]
TABLE2_TRAINABLE = 49088
TABLE2_TOTAL = 49328


@dataclass
class Comparison:
    lines: list[str] = field(default_factory=list)
    mismatches: int = 0

    @property
    def ok(self) -> bool:
        return self.mismatches == 0


def compare_with_table2(report: LayerReport) -> Comparison:
    cmp = Comparison()
    n = max(len(report.rows), len(TABLE2))
    for i in range(n):
        got = report.rows[i] if i < len(report.rows) else None
        exp = TABLE2[i] if i < len(TABLE2) else None
        if got is None or exp is None:
            cmp.mismatches += 1
            cmp.lines.append(f"row {i + 1}: got {got!r}, expected {exp!r}  MISMATCH")
            continue
        ok = (got.layer == exp[1] and tuple(got.output_shape) == exp[2] and got.params == exp[3])
        cmp.mismatches += not ok
        cmp.lines.append(
            f"{got.layer:<30} {fmt_shape(got.output_shape):<16} {got.params:>7,}  | "
            f"{exp[1]:<30} {fmt_shape(exp[2]):<16} {exp[3]:>7,}  {'ok' if ok else 'MISMATCH'}")
    for label, got, exp in (("Total trainable", report.trainable, TABLE2_TRAINABLE),
                            ("Total parameters", report.total, TABLE2_TOTAL)):
        ok = got == exp
        cmp.mismatches += not ok
        cmp.lines.append(f"{label:<30} {got:>24,}  | {exp:>47,}  {'ok' if ok else 'MISMATCH'}")
    return cmp
