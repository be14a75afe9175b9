"""Loss, Adam, the training loop, k-fold cross-validation and metrics."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .layers import Context
from .model import AbsoluteNet, ModelConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 9e-4
    epochs_select: int = 200
    epochs_retrain: int = 100
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    n_folds: int = 5
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs_select < 1 or self.epochs_retrain < 0:
            raise ValueError("epochs_select must be >= 1 and epochs_retrain >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (batch normalisation)")
        if self.n_folds < 2:
            raise ValueError("n_folds must be at least 2")

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        return cls(**{"epochs_select": 30, "epochs_retrain": 10, **kw})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


# -- loss ------------------------------------------------------------------------

def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(``logits``)."""
    logits = ad.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got {labels.shape[0]}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    onehot = np.zeros((n, k), dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1.0
    # mean over n*k cells of the masked log-probs, rescaled to a per-row mean
    return ad.scalar_mul(ad.mean(ad.mul(ad.log_softmax(logits), onehot)), -k)


def cross_entropy_probs(probs: np.ndarray, labels) -> float:
    p = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= p.shape[1]):
        raise ValueError(f"labels must lie in [0, {p.shape[1]})")
    return float(-np.mean(np.log(np.clip(p[np.arange(len(labels)), labels], 1e-300, None))))


# -- optimiser -------------------------------------------------------------------

class Adam:
    """Adam with bias correction, one moment pair per named parameter."""

    def __init__(self, lr=9e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    @classmethod
    def from_config(cls, cfg: TrainConfig, lr: float | None = None) -> "Adam":
        return cls(cfg.learning_rate if lr is None else lr, cfg.beta1, cfg.beta2, cfg.adam_eps)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update ``params`` in place from ``grads`` (keys must be a subset)."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, g in grads.items():
            p = params[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * (g * g)
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            params[name] = (p - update).astype(p.dtype, copy=False)


# -- metrics ---------------------------------------------------------------------

@dataclass(frozen=True)
class Metrics:
    """Confusion counts with deviant (class 1) as the positive class."""

    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else float("nan")

    @property
    def sensitivity(self) -> float:
        d = self.tp + self.fn
        return self.tp / d if d else float("nan")

    @property
    def specificity(self) -> float:
        d = self.tn + self.fp
        return self.tn / d if d else float("nan")

    @classmethod
    def from_predictions(cls, y_true, y_pred) -> "Metrics":
        y_true = np.asarray(y_true).astype(bool)
        y_pred = np.asarray(y_pred).astype(bool)
        return cls(tp=int(np.sum(y_true & y_pred)), fp=int(np.sum(~y_true & y_pred)),
                   tn=int(np.sum(~y_true & ~y_pred)), fn=int(np.sum(y_true & ~y_pred)))

    def as_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
                "accuracy": self.accuracy, "sensitivity": self.sensitivity,
                "specificity": self.specificity}


def predict_labels(probs: np.ndarray) -> np.ndarray:
    """Argmax with ties resolved toward class 0 (standard)."""
    return np.argmax(probs, axis=1)


def evaluate(model: AbsoluteNet, X, y) -> Metrics:
    if len(X) == 0:
        raise ValueError("cannot evaluate on an empty set")
    return Metrics.from_predictions(y, predict_labels(model.forward(X, "infer")))


# -- training --------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float = float("nan")
    val_acc: float = float("nan")


@dataclass
class TrainReport:
    history: list[EpochRecord] = field(default_factory=list)
    selected_epoch: int | None = None
    test_metrics: Metrics | None = None
    wall_time: float = 0.0
    seed: int = 0
    config: dict = field(default_factory=dict)

    @property
    def train_losses(self) -> list[float]:
        return [r.train_loss for r in self.history]

    @property
    def val_losses(self) -> list[float]:
        return [r.val_loss for r in self.history]


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    # batch norm needs two samples per batch
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    return chunks


def train_step(model: AbsoluteNet, optimizer: Adam, xb: np.ndarray, yb: np.ndarray,
               rng: np.random.Generator) -> tuple[float, np.ndarray]:
    """One gradient update; returns the batch loss and the batch probabilities."""
    tape = Tape()
    tensors = {}
    trainable = []
    for name, value in model.params.items():
        if model.trainable[name]:
            tensors[name] = tape.variable(value)
            trainable.append(name)
        else:
            tensors[name] = Tensor(value)
    ctx = Context(tensors, "train", rng)
    logits = model.logits(xb, ctx)
    loss = cross_entropy(logits, yb)
    grads = ad.backward(tape, loss)
    optimizer.step(model.params, {n: grads[tensors[n].node] for n in trainable})
    for name, value in ctx.updates.items():
        model.params[name] = value
    return loss.item(), ad.softmax(Tensor(logits.data)).data


def train(model: AbsoluteNet, X_train, y_train, X_val=None, y_val=None, config: TrainConfig | None = None,
          epochs: int | None = None, seed: int | None = None, optimizer: Adam | None = None,
          train_ids: Sequence[int] | None = None,
          batch_hook: Callable[[np.ndarray], None] | None = None) -> tuple[TrainReport, dict]:
    """Mini-batch training with best-validation-loss checkpointing.

    With a validation set, the weights with the lowest validation loss are
    restored at the end and returned as the checkpoint. Without one, the final
    weights are the checkpoint. ``batch_hook`` receives the ids (``train_ids``
    or positional indices) of every batch used for a gradient update.
    """
    config = config or TrainConfig()
    epochs = config.epochs_select if epochs is None else epochs
    seed = config.seed if seed is None else seed
    X_train = model._prepare(X_train)
    y_train = np.asarray(y_train, dtype=np.int64)
    if len(X_train) < 2:
        raise ValueError("training set needs at least two trials")
    if len(y_train) != len(X_train):
        raise ValueError("X_train and y_train lengths differ")
    has_val = X_val is not None
    if has_val:
        X_val = model._prepare(X_val)
        y_val = np.asarray(y_val, dtype=np.int64)
        if len(X_val) == 0:
            raise ValueError("validation set is empty")
    ids = np.arange(len(X_train)) if train_ids is None else np.asarray(train_ids)

    rng = ad.make_rng(seed)
    optimizer = optimizer or Adam.from_config(config)
    report = TrainReport(seed=seed, config=config.to_dict())
    best_loss, best = np.inf, model.get_weights()
    start = time.perf_counter()
    for epoch in range(1, epochs + 1):
        total_loss = 0.0
        correct = 0
        for idx in _batches(len(X_train), config.batch_size, rng):
            if batch_hook is not None:
                batch_hook(ids[idx])
            loss, probs = train_step(model, optimizer, X_train[idx], y_train[idx], rng)
            total_loss += loss * len(idx)
            correct += int(np.sum(predict_labels(probs) == y_train[idx]))
        rec = EpochRecord(epoch, total_loss / len(X_train), correct / len(X_train))
        if not np.isfinite(rec.train_loss):
            raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
        if has_val:
            probs = model.forward(X_val, "infer")
            rec.val_loss = cross_entropy_probs(probs, y_val)
            rec.val_acc = float(np.mean(predict_labels(probs) == y_val))
            if rec.val_loss < best_loss:
                best_loss, best = rec.val_loss, model.get_weights()
                report.selected_epoch = epoch
        report.history.append(rec)
        logger.debug("epoch %d: %s", epoch, rec)
    if has_val:
        model.set_weights(best)
    else:
        best = model.get_weights()
        report.selected_epoch = epochs
    report.wall_time = time.perf_counter() - start
    return report, best


# -- cross-validation ------------------------------------------------------------

@dataclass(frozen=True)
class FoldSplit:
    fold: int
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def stratified_folds(labels, n_folds: int = 5, seed: int = 0) -> list[FoldSplit]:
    """Class-stratified k-fold partition with a 3:1 train/validation split of the rest.

    Indices of each class are shuffled, laid end to end and dealt round-robin,
    so every fold's size and per-class counts are within one trial of exact
    proportions.
    """
    labels = np.asarray(labels)
    n = len(labels)
    classes = np.unique(labels)
    if n_folds < 2:
        raise ValueError("need at least two folds")
    for c in classes:
        if np.sum(labels == c) < n_folds:
            raise ValueError(f"class {c} has fewer than {n_folds} trials")
    if len(classes) < 2:
        raise ValueError("both classes must be present")
    rng = ad.make_rng(seed)
    order = np.concatenate([rng.permutation(np.flatnonzero(labels == c)) for c in classes])
    fold_of = np.empty(n, dtype=np.int64)
    fold_of[order] = np.arange(n) % n_folds
    splits = []
    for k in range(n_folds):
        test = np.sort(np.flatnonzero(fold_of == k))
        rest = order[fold_of[order] != k]
        is_val = (np.arange(len(rest)) % 4) == 0
        splits.append(FoldSplit(k, np.sort(rest[~is_val]), np.sort(rest[is_val]), test))
    return splits


@dataclass
class FoldResult:
    fold: int
    select: TrainReport
    retrain: TrainReport | None
    metrics: Metrics
    split: FoldSplit
    model: AbsoluteNet | None = None


@dataclass
class CVResult:
    folds: list[FoldResult]

    def summary(self) -> dict[str, tuple[float, float]]:
        out = {}
        for key in ("accuracy", "sensitivity", "specificity"):
            vals = np.array([getattr(f.metrics, key) for f in self.folds])
            out[key] = (float(np.mean(vals)), float(np.std(vals)))
        return out

    def format_cells(self) -> str:
        """Accuracy, sensitivity and specificity as percentage ``mean ± std`` cells."""
        cells = [f"{100 * m:.2f} ± {100 * sd:.2f}" for m, sd in self.summary().values()]
        return "  ".join(f"{c:>16}" for c in cells)

    def format_row(self, label: str = "") -> str:
        return f"{label:<12} {self.format_cells()}"


def run_fold(data, labels, split: FoldSplit, model_config: ModelConfig, train_config: TrainConfig,
             seed: int, batch_hook=None) -> FoldResult:
    model = AbsoluteNet(model_config, seed=ad.derive_seed(seed, 0))
    hook = None if batch_hook is None else (lambda ids: batch_hook(split.fold, ids))
    select, _ = train(model, data[split.train], labels[split.train], data[split.val], labels[split.val],
                      train_config, epochs=train_config.epochs_select, seed=ad.derive_seed(seed, 1),
                      train_ids=split.train, batch_hook=hook)
    retrain = None
    if train_config.epochs_retrain > 0:
        combined = np.sort(np.concatenate([split.train, split.val]))
        retrain, _ = train(model, data[combined], labels[combined], config=train_config,
                           epochs=train_config.epochs_retrain, seed=ad.derive_seed(seed, 2),
                           train_ids=combined, batch_hook=hook)
    metrics = evaluate(model, data[split.test], labels[split.test])
    select.test_metrics = metrics
    return FoldResult(split.fold, select, retrain, metrics, split, model)


def cross_validate(data, labels, model_config: ModelConfig | None = None,
                   train_config: TrainConfig | None = None, n_jobs: int = 1,
                   batch_hook: Callable[[int, np.ndarray], None] | None = None,
                   folds: Sequence[int] | None = None) -> CVResult:
    """k-fold protocol: select the best-validation checkpoint, retrain it on
    train+validation, then score once on the held-out fold.

    ``folds`` restricts the run to a subset of fold indices; the splits and
    per-fold seeds are the same as in a full run.
    """
    model_config = model_config or ModelConfig()
    train_config = train_config or TrainConfig()
    data = np.asarray(data)
    labels = np.asarray(labels, dtype=np.int64)
    splits = stratified_folds(labels, train_config.n_folds, train_config.seed)
    for s in splits:
        if len(np.unique(labels[s.test])) < 2:
            raise ValueError(f"fold {s.fold} lacks one of the classes")
    if folds is not None:
        bad = [k for k in folds if not 0 <= k < len(splits)]
        if bad or not folds:
            raise ValueError(f"fold indices must lie in [0, {len(splits)}), got {list(folds)}")
        splits = [splits[k] for k in sorted(set(folds))]
    seeds = [ad.derive_seed(train_config.seed, 100 + s.fold) for s in splits]
    if n_jobs == 1:
        results = [run_fold(data, labels, s, model_config, train_config, sd, batch_hook)
                   for s, sd in zip(splits, seeds)]
    else:
        from joblib import Parallel, delayed
        results = Parallel(n_jobs=n_jobs, backend="threading")(
            delayed(run_fold)(data, labels, s, model_config, train_config, sd, batch_hook)
            for s, sd in zip(splits, seeds))
    return CVResult(sorted(results, key=lambda r: r.fold))

