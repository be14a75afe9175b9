"""AbsoluteNet: a dual-stream spatio-temporal CNN for single-trial fNIRS
oddball classification, built on a small numpy reverse-mode autodiff engine."""
from importlib.metadata import PackageNotFoundError, version as _version

try:
    __version__ = _version("artifact")
except PackageNotFoundError:  # pragma: no cover - source checkout without install
    __version__ = "0.1.0"

from .autodiff import ShapeError, Tape, Tensor, backward
from .data import (HrfConfig, ParadigmConfig, TrialSet, balance, gen_paradigm, read_dataset,
                   split_modality, synth_epochs, write_dataset)
from .estimator import AbsoluteNetClassifier
from .ga import GaConfig, GeneBounds, Genome, run_ga
from .model import AbsoluteNet, ModelConfig, ablate, closed_form_param_counts, compare_with_table2
from .training import Metrics, TrainConfig, cross_validate, evaluate, stratified_folds, train

__all__ = [
    "AbsoluteNet", "AbsoluteNetClassifier", "GaConfig", "GeneBounds", "Genome", "HrfConfig", "Metrics",
    "ModelConfig", "ParadigmConfig", "ShapeError", "Tape", "Tensor", "TrainConfig", "TrialSet",
    "ablate", "backward", "balance", "closed_form_param_counts", "compare_with_table2", "cross_validate",
    "evaluate", "gen_paradigm", "read_dataset", "run_ga", "split_modality", "stratified_folds",
    "synth_epochs", "train", "write_dataset", "__version__",
]
