"""Command-line entry point: ``absolutenet <command> ...``.

Exit codes: 0 success, 1 verification or comparison failure, 2 usage error,
3 I/O error. Every command writes a run manifest (JSON) next to its outputs;
``absolutenet replay <manifest>`` re-runs it and compares output digests.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import io
import json
import logging
import os
import subprocess
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import (DatasetError, HrfConfig, ParadigmConfig, read_dataset, split_modality,
                   synth_epochs, write_dataset, N_OPTODE_CHANNELS)
from .ga import GaConfig, GeneBounds, run_ga
from .gradcheck import UNARY, gradient_at, registry, run_checks
from .layers import ParamFormatError
from .model import (ABLATION_STUDIES, VARIANTS, AbsoluteNet, ModelConfig, closed_form_param_counts,
                    compare_with_table2)
from .training import CVResult, TrainConfig, cross_validate, run_fold, stratified_folds
from . import autodiff as ad

logger = logging.getLogger("absolutenet")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

EPOCH_FIELDS = ("fold", "phase", "epoch", "train_loss", "train_acc", "val_loss", "val_acc")
FOLD_FIELDS = ("fold", "n_train", "n_val", "n_test", "selected_epoch", "tp", "fp", "tn", "fn",
               "accuracy", "sensitivity", "specificity")
ABLATION_FIELDS = ("study", "variant", "trainable_params", "non_trainable_params",
                   "accuracy_mean", "accuracy_std", "sensitivity_mean", "sensitivity_std",
                   "specificity_mean", "specificity_std")
ARCH_FIELDS = ("block", "layer", "output_shape", "params", "trainable")
GRADCHECK_FIELDS = ("check", "max_rel_error", "tolerance", "passed")

CONFIG_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "hrf": HrfConfig,
                   "paradigm": ParadigmConfig, "ga": GaConfig, "bounds": GeneBounds}


class UsageError(Exception):
    pass


# -- config handling -------------------------------------------------------------

def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


def load_config_file(path) -> dict:
    """Read a JSON config of ``{section: {field: value}}`` and validate the keys."""
    try:
        cfg = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise UsageError(f"{path}: top level must be an object of sections")
    for section, values in cfg.items():
        if section == "seed":
            continue
        if section not in CONFIG_SECTIONS:
            # extra top-level keys (e.g. "fitness" in a GA export) are informational
            logger.debug("ignoring config key %r", section)
            continue
        if not isinstance(values, dict):
            raise UsageError(f"{path}: section {section!r} must be an object")
        known = {f.name for f in fields(CONFIG_SECTIONS[section])}
        unknown = sorted(set(values) - known)
        if unknown:
            raise UsageError(f"{path}: unknown {section} field(s): {', '.join(unknown)}")
    return cfg


def merge_config(base: dict, extra: dict) -> dict:
    out = {k: dict(v) if isinstance(v, dict) else v for k, v in base.items()}
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k].update(v)
        else:
            out[k] = v
    return out


def build_section(name: str, raw: dict, default):
    values = {k: _tuplify(v) for k, v in raw.get(name, {}).items() if k in CONFIG_SECTIONS[name].__dataclass_fields__}
    try:
        return replace(default, **values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {name} config: {exc}") from exc


def resolve_seed(args, raw: dict) -> int:
    if args.seed is not None:
        return args.seed
    if "seed" in raw:
        return int(raw["seed"])
    env = os.environ.get("FNIRS_SEED")
    if env:
        try:
            return int(env)
        except ValueError as exc:
            raise UsageError(f"FNIRS_SEED must be an integer, got {env!r}") from exc
    return 0


def _set(cfg, name, **kw):
    """``dataclasses.replace`` for explicit flags only, with usage errors naming the field."""
    kw = {k: v for k, v in kw.items() if v is not None}
    if not kw:
        return cfg
    try:
        return replace(cfg, **kw)
    except ValueError as exc:
        raise UsageError(f"invalid {name} setting ({', '.join(kw)}): {exc}") from exc


# -- run context -----------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def artifact_version() -> str:
    rev = None
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0:
            rev = out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"{__version__}+g{rev}" if rev else __version__


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class Run:
    """Collects resolved config, inputs and outputs of one command for its manifest."""

    def __init__(self, args, argv):
        self.args = args
        self.argv = list(argv)
        self.out_dir = Path(args.out_dir or Path("absolutenet-runs") / args.command)
        self.started = _now()
        self.config: dict = {}
        self.inputs: dict[str, dict] = {}
        self.outputs: dict[str, dict] = {}
        self.seed = 0
        self.result: dict = {}

    def ensure_dir(self):
        self.out_dir.mkdir(parents=True, exist_ok=True)

    def add_input(self, key, path):
        self.inputs[key] = {"path": str(path), "sha256": sha256_file(path)}

    def write_text(self, key, name_or_path, text: str) -> Path:
        path = Path(name_or_path)
        if not path.is_absolute() and path.parent == Path("."):
            self.ensure_dir()
            path = self.out_dir / path
        path.write_text(text)
        self.add_output(key, path)
        return path

    def add_output(self, key, path):
        self.outputs[key] = {"path": str(path), "sha256": sha256_file(path)}

    def manifest(self, exit_code: int) -> dict:
        return {"command": self.args.command, "argv": self.argv, "seed": self.seed,
                "threads": self.args.threads, "config": self.config, "version": artifact_version(),
                "started": self.started, "finished": _now(), "inputs": self.inputs,
                "outputs": self.outputs, "result": self.result, "exit_code": exit_code}

    def write_manifest(self, exit_code: int) -> Path:
        path = Path(self.args.manifest) if self.args.manifest else self.out_dir / "manifest.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.manifest(exit_code), indent=2, sort_keys=True, default=str) + "\n")
        return path


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def to_csv(fieldnames, rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r[k]) for k in fieldnames})
    return buf.getvalue()


def epoch_rows(result: CVResult) -> list[dict]:
    rows = []
    for f in result.folds:
        for phase, rep in (("select", f.select), ("retrain", f.retrain)):
            if rep is None:
                continue
            for rec in rep.history:
                rows.append({"fold": f.fold, "phase": phase, **asdict(rec)})
    return rows


def fold_rows(result: CVResult) -> list[dict]:
    return [{"fold": f.fold, "n_train": len(f.split.train), "n_val": len(f.split.val),
             "n_test": len(f.split.test), "selected_epoch": f.select.selected_epoch,
             **f.metrics.as_dict()} for f in result.folds]


# -- shared command pieces ---------------------------------------------------------

def _load_dataset(run: Run, path):
    ts = read_dataset(path)
    run.add_input("dataset", path)
    return ts


def _model_for_input(base: ModelConfig, which: str) -> ModelConfig:
    if which == "both":
        return base
    variant = "single_modality" if base.variant == "full" else base.variant
    return replace(base.with_channels(N_OPTODE_CHANNELS), variant=variant)


def _train_config(args, raw, seed) -> TrainConfig:
    cfg = build_section("train", raw, TrainConfig.desk())
    cfg = _set(cfg, "train", learning_rate=getattr(args, "lr", None),
               epochs_select=getattr(args, "epochs_select", None),
               epochs_retrain=getattr(args, "epochs_retrain", None),
               batch_size=getattr(args, "batch_size", None), n_folds=getattr(args, "folds", None))
    return replace(cfg, seed=seed)


def _model_config(args, raw) -> ModelConfig:
    return build_section("model", raw, ModelConfig())


def _fold_subset(args):
    k = getattr(args, "max_folds", None)
    if k is None:
        return None
    if k < 1:
        raise UsageError("--max-folds must be at least 1")
    return list(range(k))


# -- commands ------------------------------------------------------------------------

def cmd_gen(run: Run, raw: dict) -> int:
    a = run.args
    if a.trials_per_class is not None and a.trials_per_class < 1:
        raise UsageError("trials_per_class must be at least 1")
    presets = {"default": HrfConfig(), "easy": HrfConfig.easy(), "null": HrfConfig.null()}
    hrf = build_section("hrf", raw, presets[a.difficulty])
    hrf = _set(hrf, "hrf", noise_sigma=a.noise_sigma)
    paradigm = build_section("paradigm", raw, ParadigmConfig())
    run.config = {"hrf": asdict(hrf), "paradigm": asdict(paradigm),
                  "trials_per_class": a.trials_per_class}
    ts = synth_epochs(a.trials_per_class, paradigm, hrf, seed=run.seed)
    out = Path(a.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(ts, out)
    run.add_output("dataset", out)
    run.add_output("sidecar", out.with_name(out.name + ".json"))
    counts = ts.class_counts()
    ratio = np.asarray(hrf.deviant_amplitude) / np.asarray(hrf.standard_amplitude)
    print(f"wrote {len(ts)} trials ({counts.get(0, 0)} standard / {counts.get(1, 0)} deviant), "
          f"shape {ts.data.shape} -> {out}")
    print(f"noise sigma {hrf.noise_sigma}, deviant/standard amplitude ratio per ROI "
          f"{np.round(ratio, 3).tolist()}, seed {run.seed}")
    run.result = {"n_trials": len(ts), "class_counts": {str(k): v for k, v in counts.items()}}
    return EXIT_OK


def cmd_verify_arch(run: Run, raw: dict) -> int:
    a = run.args
    base = _model_config(a, raw)
    variant = {"single": "single_modality"}.get(a.variant, a.variant)
    if variant == "single_modality":
        base = replace(base.with_channels(N_OPTODE_CHANNELS), variant=variant)
    else:
        base = _set(base, "model", variant=variant)
    cfg = _set(base, "model", pool_size=a.pool_size, pool_stride=a.pool_stride,
               temporal_kernel=a.temporal_kernel, separable_kernel=a.separable_kernel)
    run.config = {"model": cfg.to_dict()}
    model = AbsoluteNet(cfg, seed=run.seed)
    report = model.report()
    run.write_text("architecture", "architecture.csv", to_csv(ARCH_FIELDS, [
        {"block": r.block, "layer": r.layer, "output_shape": "x".join(map(str, r.output_shape)),
         "params": r.params, "trainable": r.trainable} for r in report.rows]))
    closed = closed_form_param_counts(cfg)
    counter_ok = closed == (report.trainable, report.non_trainable)
    ok = counter_ok
    if cfg.variant == "full":
        cmp = compare_with_table2(report)
        print(f"{'computed':<56}| {'published':<56}")
        print("\n".join(cmp.lines))
        print(f"{cmp.mismatches} mismatch(es) against the published layer table")
        ok = ok and cmp.ok
        run.result["table_mismatches"] = cmp.mismatches
    else:
        print(report.format())
        print("(no published layer table for this variant)")
    print(f"closed-form counter: trainable {closed[0]:,}, non-trainable {closed[1]:,} "
          f"{'ok' if counter_ok else 'MISMATCH'}")
    run.result.update({"trainable": report.trainable, "total": report.total, "ok": ok})
    return EXIT_OK if ok else EXIT_FAIL


def _write_cv_outputs(run: Run, result: CVResult, prefix: str = ""):
    run.write_text(f"{prefix}epochs", f"{prefix}epochs.csv", to_csv(EPOCH_FIELDS, epoch_rows(result)))
    run.write_text(f"{prefix}folds", f"{prefix}folds.csv", to_csv(FOLD_FIELDS, fold_rows(result)))


def _summary_dict(result: CVResult) -> dict:
    return {k: {"mean": m, "std": sd} for k, (m, sd) in result.summary().items()}


def cmd_cv(run: Run, raw: dict) -> int:
    a = run.args
    ts = split_modality(_load_dataset(run, a.dataset), a.input)
    model_cfg = _model_for_input(_model_config(a, raw), a.input)
    train_cfg = _train_config(a, raw, run.seed)
    run.config = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "input": a.input}
    result = cross_validate(ts.data, ts.labels, model_cfg, train_cfg, n_jobs=a.threads,
                            folds=_fold_subset(a))
    _write_cv_outputs(run, result)
    summary = _summary_dict(result)
    run.write_text("summary", "summary.json", json.dumps(
        {"input": a.input, "folds": [f.fold for f in result.folds], **summary}, indent=2) + "\n")
    label = {"both": "HbO2+HbR", "hbo2": "HbO2", "hbr": "HbR"}[a.input]
    print(f"{'Input':<12} {'Accuracy':>16}  {'Sensitivity':>16}  {'Specificity':>16}")
    print(result.format_row(label))
    run.result = summary
    return EXIT_OK


def cmd_train(run: Run, raw: dict) -> int:
    a = run.args
    ts = split_modality(_load_dataset(run, a.dataset), a.input)
    model_cfg = _model_for_input(_model_config(a, raw), a.input)
    train_cfg = _train_config(a, raw, run.seed)
    splits = stratified_folds(ts.labels, train_cfg.n_folds, train_cfg.seed)
    if not 0 <= a.fold < len(splits):
        raise UsageError(f"--fold must lie in [0, {len(splits)})")
    run.config = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "input": a.input,
                  "fold": a.fold}
    seed = ad.derive_seed(train_cfg.seed, 100 + a.fold)
    fold = run_fold(ts.data, ts.labels.astype(np.int64), splits[a.fold], model_cfg, train_cfg, seed)
    result = CVResult([fold])
    _write_cv_outputs(run, result)
    run.ensure_dir()
    weights = run.out_dir / "model.absn"
    fold.model.save(weights)
    run.add_output("model", weights)
    m = fold.metrics
    print(f"fold {a.fold}: selected epoch {fold.select.selected_epoch}, test accuracy {m.accuracy:.4f}, "
          f"sensitivity {m.sensitivity:.4f}, specificity {m.specificity:.4f}")
    run.result = m.as_dict()
    return EXIT_OK


def cmd_ablate(run: Run, raw: dict) -> int:
    a = run.args
    ts = split_modality(_load_dataset(run, a.dataset), a.input)
    base = _model_config(a, raw)
    if base.variant != "full":
        raise UsageError("ablation starts from the full variant")
    base = base if a.input == "both" else base.with_channels(N_OPTODE_CHANNELS)
    train_cfg = _train_config(a, raw, run.seed)
    run.config = {"model": base.to_dict(), "train": train_cfg.to_dict(), "input": a.input}
    studies = [(0, "full")] + sorted(ABLATION_STUDIES.items())
    rows = []
    print(f"{'Study':<5} {'Variant':<22} {'Params':>7} {'Accuracy':>16}  {'Sensitivity':>16}  "
          f"{'Specificity':>16}")
    for study, variant in studies:
        cfg = replace(base, variant=variant)
        result = cross_validate(ts.data, ts.labels, cfg, train_cfg, n_jobs=a.threads,
                                folds=_fold_subset(a))
        trainable, non_trainable = closed_form_param_counts(cfg)
        s = result.summary()
        rows.append({"study": study, "variant": variant, "trainable_params": trainable,
                     "non_trainable_params": non_trainable,
                     **{f"{k}_{stat}": v for k, (m, sd) in s.items()
                        for stat, v in (("mean", m), ("std", sd))}})
        print(f"{study:<5} {variant:<22} {trainable:>7,} {result.format_cells()}")
    run.write_text("ablation", "ablation.csv", to_csv(ABLATION_FIELDS, rows))
    run.result = {"rows": len(rows)}
    return EXIT_OK


def cmd_ga(run: Run, raw: dict) -> int:
    a = run.args
    ts = _load_dataset(run, a.dataset)
    ts = split_modality(ts, a.input)
    model_cfg = _model_for_input(_model_config(a, raw), a.input)
    train_cfg = _train_config(a, raw, run.seed)
    ga_cfg = build_section("ga", raw, GaConfig())
    ga_cfg = _set(ga_cfg, "ga", population=a.pop, generations=a.gens, mutation_rate=a.mutation_rate,
                  elite_count=a.elite, fitness_epochs=a.fitness_epochs)
    ga_cfg = replace(ga_cfg, seed=run.seed)
    bounds = build_section("bounds", raw, GeneBounds())
    run.config = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "ga": asdict(ga_cfg),
                  "bounds": asdict(bounds), "input": a.input}
    result = run_ga(ts.data, ts.labels, ga_cfg, bounds, model_cfg, train_cfg, n_jobs=a.threads)
    run.write_text("log", "ga_log.csv", result.to_csv())
    run.write_text("best", "best_config.json", result.best_overrides_json())
    traj = ", ".join(f"{f:.5f}" for f in result.best_per_generation)
    print(f"best fitness per generation: {traj}")
    print(f"best genome: {result.best}")
    running = np.minimum.accumulate(result.best_per_generation)
    monotone = bool(np.all(np.diff(result.best_per_generation) <= 0))
    run.result = {"best_per_generation": result.best_per_generation, "best_fitness": result.best_fitness,
                  "monotone": monotone, "best_so_far": running.tolist()}
    return EXIT_OK if monotone else EXIT_FAIL


def cmd_gradcheck(run: Run, raw: dict) -> int:
    a = run.args
    names = a.op or None
    if a.at is not None:
        if not names or len(names) != 1 or names[0] not in UNARY:
            raise UsageError(f"--at needs exactly one unary --op from: {', '.join(sorted(UNARY))}")
        g = gradient_at(names[0], a.at)
        print(f"d/dx {names[0]}(x) at x={a.at!r}: {g!r}")
        run.result = {"op": names[0], "at": a.at, "gradient": g}
        return EXIT_OK
    available = registry(ad.make_rng(0))
    unknown = [n for n in names or [] if n not in available]
    if unknown:
        raise UsageError(f"unknown check(s) {', '.join(unknown)}; available: {', '.join(available)}")
    run.config = {"tolerance": a.tolerance, "checks": names or list(available)}
    results = run_checks(names, a.tolerance, seed=run.seed)
    rows = []
    for r in results:
        print(f"{r.name:<28} max rel error {r.max_rel_error:.3e}  (tol {r.tolerance:.0e})  "
              f"{'ok' if r.passed else 'FAIL'}")
        rows.append({"check": r.name, "max_rel_error": r.max_rel_error, "tolerance": r.tolerance,
                     "passed": r.passed})
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    run.write_text("gradcheck", "gradcheck.csv", to_csv(GRADCHECK_FIELDS, rows))
    run.result = {"failed": failed}
    return EXIT_FAIL if failed else EXIT_OK


def cmd_replay(run: Run, raw: dict) -> int:
    a = run.args
    manifest = json.loads(Path(a.manifest_file).read_text())
    run.add_input("manifest", a.manifest_file)
    argv = list(manifest["argv"])
    replay_args = build_parser().parse_args(argv)
    if replay_args.command == "replay":
        raise UsageError("cannot replay a replay manifest")
    out_dir = run.out_dir
    replay_args.out_dir = str(out_dir / "outputs")
    replay_args.manifest = str(out_dir / "replayed-manifest.json")
    if replay_args.command == "gen":
        replay_args.output = str(out_dir / "outputs" / Path(replay_args.output).name)
    for key, rec in manifest.get("inputs", {}).items():
        if Path(rec["path"]).exists() and sha256_file(rec["path"]) != rec["sha256"]:
            print(f"input {key} ({rec['path']}) changed since the recorded run")
            return EXIT_FAIL
    if replay_args.seed is None:
        replay_args.seed = manifest["seed"]
    inner = Run(replay_args, argv)
    code = execute(inner)
    diffs = []
    for key, rec in manifest.get("outputs", {}).items():
        new = inner.outputs.get(key)
        same = new is not None and new["sha256"] == rec["sha256"]
        print(f"{key:<12} {'identical' if same else 'DIFFERENT'}")
        if not same:
            diffs.append(key)
    run.result = {"replayed_exit_code": code, "different": diffs}
    run.outputs = inner.outputs
    return EXIT_FAIL if diffs or code != manifest.get("exit_code", 0) else EXIT_OK


COMMANDS = {"gen": cmd_gen, "verify-arch": cmd_verify_arch, "train": cmd_train, "cv": cmd_cv,
            "ablate": cmd_ablate, "ga": cmd_ga, "gradcheck": cmd_gradcheck, "replay": cmd_replay}


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file of {section: {field: value}}")
    common.add_argument("--config-override", action="append", default=[], metavar="FILE",
                        help="JSON file merged over --config (repeatable)")
    common.add_argument("--seed", type=int, help="random seed (default: $FNIRS_SEED or 0)")
    common.add_argument("--threads", type=int, default=1,
                        help="parallel folds / fitness evaluations; 1 is bit-reproducible")
    common.add_argument("--out-dir", help="output directory (default: absolutenet-runs/<command>)")
    common.add_argument("--manifest", help="manifest path (default: <out-dir>/manifest.json)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="absolutenet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def data_cmd(name, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.add_argument("dataset", help=".fnid dataset file")
        sp.add_argument("--input", choices=("hbo2", "hbr", "both"), default="both")
        return sp

    def train_opts(sp, cv=True):
        sp.add_argument("--lr", type=float, help="learning rate")
        sp.add_argument("--epochs-select", type=int, help="checkpoint-selection epochs (desk 30)")
        sp.add_argument("--epochs-retrain", type=int, help="retraining epochs on train+val (desk 10)")
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--folds", type=int, help="number of CV folds (5)")
        if cv:
            sp.add_argument("--max-folds", type=int, help="only run the first K folds")

    sp = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    sp.add_argument("-o", "--output", required=True, help="output .fnid path")
    sp.add_argument("--trials-per-class", type=int, default=918)
    sp.add_argument("--difficulty", choices=("default", "easy", "null"), default="default")
    sp.add_argument("--noise-sigma", type=float)

    sp = sub.add_parser("verify-arch", parents=[common], help="check the layer table and parameter counts")
    sp.add_argument("--variant", choices=VARIANTS + ("single",), default="full")
    sp.add_argument("--pool-size", type=int)
    sp.add_argument("--pool-stride", type=int)
    sp.add_argument("--temporal-kernel", type=int)
    sp.add_argument("--separable-kernel", type=int)

    sp = data_cmd("train", "train on one fold and save the weights")
    train_opts(sp, cv=False)
    sp.add_argument("--fold", type=int, default=0)
    train_opts(data_cmd("cv", "k-fold cross-validation"))
    train_opts(data_cmd("ablate", "full model and the four ablation variants"))

    sp = data_cmd("ga", "genetic hyperparameter search")
    train_opts(sp, cv=False)
    sp.add_argument("--pop", type=int, help="population size (8)")
    sp.add_argument("--gens", type=int, help="generations (3)")
    sp.add_argument("--mutation-rate", type=float)
    sp.add_argument("--elite", type=int)
    sp.add_argument("--fitness-epochs", type=int)

    sp = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient verification")
    sp.add_argument("--op", action="append", help="check name (repeatable; default all)")
    sp.add_argument("--at", type=float, help="report the analytic derivative of a unary --op at a point")
    sp.add_argument("--tolerance", type=float, help="override every check's tolerance")

    sp = sub.add_parser("replay", parents=[common], help="re-run a manifest and compare outputs")
    sp.add_argument("manifest_file")
    return p


def execute(run: Run) -> int:
    args = run.args
    raw: dict = {}
    if args.config:
        raw = load_config_file(args.config)
    for path in args.config_override:
        raw = merge_config(raw, load_config_file(path))
        run.add_input(f"override:{path}", path)
    if args.config:
        run.add_input("config", args.config)
    if args.threads < 1:
        raise UsageError("--threads must be at least 1")
    run.seed = resolve_seed(args, raw)
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=args.threads):
        return COMMANDS[args.command](run, raw)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    run = Run(args, argv)
    try:
        code = execute(run)
    except UsageError as exc:
        print(f"absolutenet {args.command}: error: {exc}", file=sys.stderr)
        code = EXIT_USAGE
    except (DatasetError, ParamFormatError, OSError) as exc:
        print(f"absolutenet {args.command}: I/O error: {exc}", file=sys.stderr)
        code = EXIT_IO
    except ValueError as exc:
        print(f"absolutenet {args.command}: error: {exc}", file=sys.stderr)
        code = EXIT_USAGE
    try:
        path = run.write_manifest(code)
        logger.info("manifest written to %s", path)
    except OSError as exc:
        print(f"absolutenet {args.command}: could not write manifest: {exc}", file=sys.stderr)
        code = code or EXIT_IO
    return code


if __name__ == "__main__":
    sys.exit(main())
