"""Synthetic auditory-oddball fNIRS epochs and the ``.fnid`` dataset format.

The generator works at the concentration-change level: each epoch is a
15 s window (150 samples at 10 Hz) of 14 HbO2 channels followed by 14 HbR
channels. Class 0 is the standard tone, class 1 the deviant.
"""
from __future__ import annotations

import json
import struct
from functools import lru_cache
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import gamma as gamma_dist

from .autodiff import derive_seed, make_rng

STANDARD, DEVIANT = 0, 1
N_OPTODE_CHANNELS = 14
SAMPLE_RATE_HZ = 10.0
EPOCH_SECONDS = 15.0
N_SAMPLES = int(EPOCH_SECONDS * SAMPLE_RATE_HZ)
CHANNEL_NAMES = ([f"HbO2_{i + 1:02d}" for i in range(N_OPTODE_CHANNELS)]
                 + [f"HbR_{i + 1:02d}" for i in range(N_OPTODE_CHANNELS)])
# frontal, left auditory, right auditory
ROI_OF_CHANNEL = np.array([0, 0, 0, 0, 1, 1, 1, 1, 1, 2, 2, 2, 2, 2])
ROI_NAMES = ("F", "LA", "RA")


class DatasetError(ValueError):
    """Malformed or inconsistent dataset file."""


@dataclass(frozen=True)
class ParadigmConfig:
    runs_per_subject: int = 6
    deviants_per_run: int = 20
    standards_per_run: tuple[int, int] = (120, 140)
    stimulus_ms: int = 500
    isi_ms: int = 2000
    subjects: int = 9
    min_standards_between: int = 2

    def __post_init__(self):
        lo, hi = self.standards_per_run
        if lo > hi:
            raise ValueError("standards_per_run must be an increasing (low, high) range")
        for name in ("runs_per_subject", "stimulus_ms", "isi_ms", "subjects"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.deviants_per_run < 0 or lo < 0:
            raise ValueError("event counts must be non-negative")

    @property
    def soa_s(self) -> float:
        """Onset-to-onset spacing: tone duration plus the silent interval."""
        return (self.stimulus_ms + self.isi_ms) / 1000.0


@dataclass(frozen=True)
class Event:
    onset_s: float
    label: int


def gen_paradigm(n_deviants: int, n_standards: int, rng: np.random.Generator,
                 config: ParadigmConfig | None = None) -> list[Event]:
    """One run's tone sequence with at least ``min_standards_between``
    standards separating consecutive deviants."""
    config = config or ParadigmConfig()
    gap_min = config.min_standards_between
    if n_deviants < 0 or n_standards < 0:
        raise ValueError("event counts must be non-negative")
    if n_deviants == 0:
        labels = [STANDARD] * n_standards
    else:
        needed = gap_min * (n_deviants - 1)
        if n_standards < needed:
            raise ValueError(f"{n_standards} standards cannot separate {n_deviants} deviants "
                             f"by {gap_min} each (need {needed})")
        # n_deviants + 1 gaps; the interior ones start at the minimum
        extra = rng.multinomial(n_standards - needed, np.full(n_deviants + 1, 1.0 / (n_deviants + 1)))
        gaps = extra.copy()
        gaps[1:-1] += gap_min
        labels = [STANDARD] * int(gaps[0])
        for g in gaps[1:]:
            labels += [DEVIANT] + [STANDARD] * int(g)
    soa = config.soa_s
    return [Event(i * soa, lab) for i, lab in enumerate(labels)]


def gap_positions(labels) -> np.ndarray:
    """Position of each standard within its run of standards after a deviant.

    ``k`` means the k-th standard since the last deviant, counted only when
    the run is closed by a later deviant; everything else is 0.
    """
    labels = np.asarray(labels)
    pos = np.zeros(len(labels), dtype=np.int64)
    last_dev = None
    for i, lab in enumerate(labels):
        if lab == DEVIANT:
            if last_dev is not None:
                pos[last_dev + 1:i] = np.arange(1, i - last_dev)
            last_dev = i
    return pos


def balance(sequence, rng: np.random.Generator, positions=(3, 4)) -> np.ndarray:
    """Pick as many standards as there are deviants, drawn from the 3rd or 4th
    tone of an inter-deviant gap. Returns sorted event indices."""
    labels = np.array([e.label if isinstance(e, Event) else e for e in sequence])
    n_dev = int(np.sum(labels == DEVIANT))
    eligible = np.flatnonzero(np.isin(gap_positions(labels), positions))
    if len(eligible) < n_dev:
        raise ValueError(f"only {len(eligible)} eligible standards for {n_dev} deviants")
    return np.sort(rng.choice(eligible, size=n_dev, replace=False))


@dataclass(frozen=True)
class HrfConfig:
    peak_time_s: float = 6.0
    undershoot_time_s: float = 12.0
    dispersion_s: float = 1.0
    undershoot_ratio: float = 6.0
    # (F, LA, RA) response amplitude per class
    standard_amplitude: tuple[float, float, float] = (0.4, 1.0, 1.0)
    deviant_amplitude: tuple[float, float, float] = (1.0, 1.4, 1.4)
    hbr_ratio: float = -0.35
    hbr_delay_s: float = 1.0
    noise_sigma: float = 0.6
    # (frequency Hz, amplitude): Mayer waves and respiration
    sinusoids: tuple[tuple[float, float], ...] = ((0.1, 0.4), (0.3, 0.2))
    trial_jitter_s: float = 0.5
    amplitude_jitter: float = 0.2
    channel_gain_sd: float = 0.15

    def __post_init__(self):
        if not self.peak_time_s < self.undershoot_time_s:
            raise ValueError("peak_time_s must precede undershoot_time_s")
        if not self.hbr_ratio < 0:
            raise ValueError("hbr_ratio must be negative")
        if self.noise_sigma < 0 or self.trial_jitter_s < 0 or self.amplitude_jitter < 0:
            raise ValueError("noise and jitter settings must be non-negative")

    @classmethod
    def easy(cls, **kw) -> "HrfConfig":
        """Clearly separable classes: deviant response 3x the standard, little white noise."""
        base = dict(standard_amplitude=(0.5, 1.0, 1.0), deviant_amplitude=(1.5, 3.0, 3.0),
                    noise_sigma=0.1, amplitude_jitter=0.1)
        return cls(**{**base, **kw})

    @classmethod
    def null(cls, **kw) -> "HrfConfig":
        """Both classes drawn from the same distribution."""
        base = cls()
        return cls(**{"deviant_amplitude": base.standard_amplitude, **kw})

    def amplitude(self, label: int) -> np.ndarray:
        amp = self.deviant_amplitude if label == DEVIANT else self.standard_amplitude
        return np.asarray(amp, dtype=np.float64)[ROI_OF_CHANNEL]


def double_gamma(t: np.ndarray, cfg: HrfConfig) -> np.ndarray:
    """Peak-normalised rise / undershoot / return-to-baseline response."""
    t = np.asarray(t, dtype=np.float64)
    d = cfg.dispersion_s
    peak = gamma_dist.pdf(t, cfg.peak_time_s / d + 1, scale=d)
    under = gamma_dist.pdf(t, cfg.undershoot_time_s / d + 1, scale=d)
    h = peak - under / cfg.undershoot_ratio
    norm = _hrf_peak(cfg.peak_time_s, cfg.undershoot_time_s, d, cfg.undershoot_ratio)
    return np.where(t >= 0, h / norm, 0.0)


@lru_cache(maxsize=32)
def _hrf_peak(peak_time, undershoot_time, d, ratio) -> float:
    grid = np.linspace(0, 4 * undershoot_time, 4001)
    return float(np.max(gamma_dist.pdf(grid, peak_time / d + 1, scale=d)
                        - gamma_dist.pdf(grid, undershoot_time / d + 1, scale=d) / ratio))


@dataclass
class TrialSet:
    data: np.ndarray          # (n_trials, n_channels, n_samples) float32
    labels: np.ndarray        # (n_trials,) uint8
    subject: np.ndarray = None
    run: np.ndarray = None
    sample_rate: float = SAMPLE_RATE_HZ
    channel_names: list[str] = field(default_factory=lambda: list(CHANNEL_NAMES))
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"data must be (trials, channels, samples), got {self.data.shape}")
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        n = len(self.data)
        if self.labels.shape != (n,):
            raise ValueError("one label per trial required")
        self.subject = np.zeros(n, np.int32) if self.subject is None else np.asarray(self.subject, np.int32)
        self.run = np.zeros(n, np.int32) if self.run is None else np.asarray(self.run, np.int32)
        if len(self.channel_names) != self.data.shape[1]:
            raise ValueError("channel_names length does not match channel count")

    def __len__(self):
        return len(self.labels)

    @property
    def n_channels(self) -> int:
        return self.data.shape[1]

    @property
    def n_samples(self) -> int:
        return self.data.shape[2]

    def class_counts(self) -> dict[int, int]:
        return {STANDARD: int(np.sum(self.labels == STANDARD)), DEVIANT: int(np.sum(self.labels == DEVIANT))}

    def subset(self, idx) -> "TrialSet":
        idx = np.asarray(idx)
        return replace(self, data=self.data[idx], labels=self.labels[idx],
                       subject=self.subject[idx], run=self.run[idx])


def _trial_signal(label, cfg: HrfConfig, t, gains, rng) -> np.ndarray:
    """Noise-free 28-channel epoch for one trial."""
    delay_onset = rng.uniform(0.0, cfg.trial_jitter_s) if cfg.trial_jitter_s else 0.0
    scale = 1.0 + cfg.amplitude_jitter * rng.standard_normal() if cfg.amplitude_jitter else 1.0
    response = double_gamma(t - delay_onset, cfg)
    hbo = (scale * gains * cfg.amplitude(label))[:, None] * response[None, :]
    delay = int(round(cfg.hbr_delay_s * SAMPLE_RATE_HZ))
    hbr = np.zeros_like(hbo)
    hbr[:, delay:] = cfg.hbr_ratio * hbo[:, :hbo.shape[1] - delay]
    return np.concatenate([hbo, hbr])


def _noise(cfg: HrfConfig, t, rng) -> np.ndarray:
    n_ch = 2 * N_OPTODE_CHANNELS
    out = cfg.noise_sigma * rng.standard_normal((n_ch, len(t))) if cfg.noise_sigma else np.zeros((n_ch, len(t)))
    for freq, amp in cfg.sinusoids:
        if amp == 0:
            continue
        phase = rng.uniform(0, 2 * np.pi)
        # shared physiological oscillation with mild per-channel scaling
        weights = amp * (1.0 + 0.2 * rng.standard_normal(n_ch))
        out += weights[:, None] * np.sin(2 * np.pi * freq * t + phase)[None, :]
    return out


def synth_epochs(trials_per_class: int | None = 918, paradigm: ParadigmConfig | None = None,
                 hrf: HrfConfig | None = None, seed: int = 0) -> TrialSet:
    """Generate a balanced synthetic oddball dataset.

    For every subject and run a tone sequence is drawn and balanced; the
    selected trials are then subsampled (per class, seeded) down to
    ``trials_per_class``. When more trials are requested than the paradigm
    yields, extra runs are simulated for additional synthetic subjects.
    """
    paradigm = paradigm or ParadigmConfig()
    hrf = hrf or HrfConfig()
    per_run = paradigm.deviants_per_run
    if trials_per_class is not None and trials_per_class < 0:
        raise ValueError("trials_per_class must be non-negative")
    if trials_per_class == 0:
        return TrialSet(np.zeros((0, 2 * N_OPTODE_CHANNELS, N_SAMPLES), np.float32), np.zeros(0, np.uint8),
                        meta=_meta(paradigm, hrf, seed, trials_per_class))
    if per_run < 1:
        raise ValueError("deviants_per_run must be positive to generate trials")
    n_subjects = paradigm.subjects
    if trials_per_class is not None:
        n_subjects = max(n_subjects, -(-trials_per_class // (per_run * paradigm.runs_per_subject)))
    t = np.arange(N_SAMPLES) / SAMPLE_RATE_HZ

    chunks, labels, subjects, runs = [], [], [], []
    for subj in range(n_subjects):
        srng = make_rng(derive_seed(seed, subj))
        gains = np.clip(1.0 + hrf.channel_gain_sd * srng.standard_normal(N_OPTODE_CHANNELS), 0.1, None)
        for run in range(paradigm.runs_per_subject):
            rng = make_rng(derive_seed(seed, subj, run))
            lo, hi = paradigm.standards_per_run
            seq = gen_paradigm(per_run, int(rng.integers(lo, hi + 1)), rng, paradigm)
            std_idx = balance(seq, rng)
            dev_idx = np.array([i for i, e in enumerate(seq) if e.label == DEVIANT])
            for i in np.sort(np.concatenate([std_idx, dev_idx])):
                lab = seq[i].label
                chunks.append(_trial_signal(lab, hrf, t, gains, rng) + _noise(hrf, t, rng))
                labels.append(lab)
                subjects.append(subj)
                runs.append(run)

    data = np.asarray(chunks, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.uint8)
    keep = np.arange(len(labels))
    if trials_per_class is not None:
        pick = make_rng(derive_seed(seed, 2**31))
        keep = np.sort(np.concatenate([
            pick.choice(np.flatnonzero(labels == c), size=trials_per_class, replace=False)
            for c in (STANDARD, DEVIANT)]))
    return TrialSet(data[keep], labels[keep], np.asarray(subjects)[keep], np.asarray(runs)[keep],
                    meta=_meta(paradigm, hrf, seed, trials_per_class))


def _meta(paradigm, hrf, seed, trials_per_class) -> dict:
    return {"generator": {"paradigm": asdict(paradigm), "hrf": asdict(hrf),
                          "trials_per_class": trials_per_class}, "seed": int(seed)}


def split_modality(ts: TrialSet, which: str) -> TrialSet:
    """Select HbO2 (first 14), HbR (last 14) or both channel groups."""
    if ts.n_channels != 2 * N_OPTODE_CHANNELS:
        raise ValueError(f"expected {2 * N_OPTODE_CHANNELS} channels, got {ts.n_channels}")
    sl = {"both": slice(None), "hbo2": slice(0, N_OPTODE_CHANNELS),
          "hbr": slice(N_OPTODE_CHANNELS, None)}.get(which)
    if sl is None:
        raise ValueError(f"modality must be hbo2, hbr or both, got {which!r}")
    if which == "both":
        return ts
    return replace(ts, data=ts.data[:, sl], channel_names=ts.channel_names[sl],
                   meta={**ts.meta, "modality": which})


# -- file format -----------------------------------------------------------------

MAGIC = b"FNID"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIf")


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_dataset(ts: TrialSet, path) -> None:
    """Binary epochs file plus a JSON sidecar with subject/run map and provenance."""
    n, c, s = ts.data.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, c, s, ts.sample_rate))
        fh.write(np.ascontiguousarray(ts.data, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(ts.labels, dtype=np.uint8).tobytes())
    meta = {"n_trials": n, "channel_names": ts.channel_names, "subject": ts.subject.tolist(),
            "run": ts.run.tolist(), **ts.meta}
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_dataset(path) -> TrialSet:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise DatasetError("file shorter than the dataset header")
    magic, version, n, c, s, rate = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise DatasetError(f"bad magic {magic!r}")
    if version != VERSION:
        raise DatasetError(f"unsupported dataset version {version}")
    expected = _HEADER.size + 4 * n * c * s + n
    if len(buf) != expected:
        raise DatasetError(f"header declares {n} trials ({expected} bytes) but file has {len(buf)} bytes")
    data = np.frombuffer(buf, dtype="<f4", count=n * c * s, offset=_HEADER.size).reshape(n, c, s)
    labels = np.frombuffer(buf, dtype=np.uint8, count=n, offset=_HEADER.size + 4 * n * c * s)
    meta, subject, run = {}, None, None
    names = CHANNEL_NAMES if c == len(CHANNEL_NAMES) else [f"ch{i + 1:02d}" for i in range(c)]
    side = sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text())
        if meta.get("n_trials", n) != n:
            raise DatasetError("sidecar trial count disagrees with the binary header")
        subject, run = meta.pop("subject", None), meta.pop("run", None)
        names = meta.pop("channel_names", names)
        meta.pop("n_trials", None)
    return TrialSet(data.astype(np.float32), labels.copy(), subject, run, float(rate), list(names), meta)
