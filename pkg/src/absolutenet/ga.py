"""Elitist genetic search over learning rate, kernel sizes and pooling."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .model import AbsoluteNet, ModelConfig
from .training import TrainConfig, stratified_folds, train

logger = logging.getLogger(__name__)

GENES = ("learning_rate", "temporal_kernel", "separable_kernel", "pool_size", "pool_stride")


@dataclass(frozen=True)
class Genome:
    learning_rate: float
    temporal_kernel: int
    separable_kernel: int
    pool_size: int
    pool_stride: int

    def key(self) -> tuple:
        return (float(self.learning_rate), int(self.temporal_kernel), int(self.separable_kernel),
                int(self.pool_size), int(self.pool_stride))

    def model_config(self, base: ModelConfig) -> ModelConfig:
        return replace(base, temporal_kernel=self.temporal_kernel, separable_kernel=self.separable_kernel,
                       pool_size=self.pool_size, pool_stride=self.pool_stride)

    def train_config(self, base: TrainConfig) -> TrainConfig:
        return replace(base, learning_rate=self.learning_rate)

    def overrides(self) -> dict:
        g = asdict(self)
        return {"model": {k: g[k] for k in GENES[1:]}, "train": {"learning_rate": g["learning_rate"]}}


@dataclass(frozen=True)
class GeneBounds:
    learning_rate: tuple[float, float] = (1e-5, 1e-2)
    temporal_kernel: tuple[int, int] = (3, 11)
    separable_kernel: tuple[int, int] = (3, 7)
    pool_size: tuple[int, int] = (5, 50)
    pool_stride: tuple[int, int] = (1, 16)

    def __post_init__(self):
        for f in fields(self):
            lo, hi = getattr(self, f.name)
            if lo > hi:
                raise ValueError(f"bounds for {f.name} are inverted: {lo} > {hi}")
        if self.learning_rate[0] <= 0:
            raise ValueError("learning-rate bounds must be positive")

    def contains(self, g: Genome) -> bool:
        return all(getattr(self, n)[0] <= getattr(g, n) <= getattr(self, n)[1] for n in GENES)


@dataclass(frozen=True)
class GaConfig:
    population: int = 8
    generations: int = 3
    mutation_rate: float = 0.1
    elite_count: int = 2
    fitness_epochs: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.population < 2:
            raise ValueError("population must be at least 2")
        if self.generations < 1:
            raise ValueError("generations must be at least 1")
        if not 0 <= self.mutation_rate <= 1:
            raise ValueError("mutation_rate must lie in [0, 1]")
        if not 1 <= self.elite_count <= self.population:
            raise ValueError("elite_count must be between 1 and the population size")
        if self.fitness_epochs < 1:
            raise ValueError("fitness_epochs must be positive")


def feasible(genome: Genome, base: ModelConfig) -> bool:
    try:
        cfg = genome.model_config(base)
        return cfg.pool_size <= cfg.input_samples - cfg.temporal_kernel + 1
    except ValueError:
        return False


def _sample(bounds: GeneBounds, rng: np.random.Generator) -> Genome:
    lo, hi = np.log10(bounds.learning_rate)
    return Genome(
        learning_rate=float(10 ** rng.uniform(lo, hi)) if hi > lo else float(bounds.learning_rate[0]),
        temporal_kernel=int(rng.integers(bounds.temporal_kernel[0], bounds.temporal_kernel[1] + 1)),
        separable_kernel=int(rng.integers(bounds.separable_kernel[0], bounds.separable_kernel[1] + 1)),
        pool_size=int(rng.integers(bounds.pool_size[0], bounds.pool_size[1] + 1)),
        pool_stride=int(rng.integers(bounds.pool_stride[0], bounds.pool_stride[1] + 1)),
    )


def init_population(config: GaConfig, bounds: GeneBounds, rng: np.random.Generator,
                    base: ModelConfig | None = None, max_tries: int = 1000) -> list[Genome]:
    base = base or ModelConfig()
    pop = []
    for _ in range(config.population):
        for _ in range(max_tries):
            g = _sample(bounds, rng)
            if feasible(g, base):
                pop.append(g)
                break
        else:
            raise ValueError("no feasible genome found within the given bounds")
    return pop


def genome_seed(seed: int, genome: Genome) -> int:
    return ad.derive_seed(seed, zlib.crc32(repr(genome.key()).encode()))


class Fitness:
    """Best validation loss on the first fold, memoised per genome."""

    def __init__(self, data, labels, base_model: ModelConfig, base_train: TrainConfig,
                 epochs: int, seed: int):
        self.data = np.asarray(data)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.base_model, self.base_train = base_model, base_train
        self.epochs, self.seed = epochs, seed
        self.split = stratified_folds(self.labels, base_train.n_folds, base_train.seed)[0]
        self.cache: dict[tuple, float] = {}

    def __call__(self, genome: Genome) -> float:
        key = genome.key()
        if key not in self.cache:
            self.cache[key] = self._evaluate(genome)
        return self.cache[key]

    def _evaluate(self, genome: Genome) -> float:
        if not feasible(genome, self.base_model):
            return math.inf
        s = self.split
        seed = genome_seed(self.seed, genome)
        try:
            model = AbsoluteNet(genome.model_config(self.base_model), seed=ad.derive_seed(seed, 0))
            report, _ = train(model, self.data[s.train], self.labels[s.train], self.data[s.val],
                              self.labels[s.val], genome.train_config(self.base_train),
                              epochs=self.epochs, seed=ad.derive_seed(seed, 1))
        except (ValueError, FloatingPointError) as exc:
            logger.warning("genome %s culled: %s", genome, exc)
            return math.inf
        best = min(report.val_losses)
        return float(best) if np.isfinite(best) else math.inf


def _mutate(g: Genome, bounds: GeneBounds, rate: float, rng: np.random.Generator) -> Genome:
    genes = asdict(g)
    for name in GENES:
        if rng.random() >= rate:
            continue
        lo, hi = getattr(bounds, name)
        if name == "learning_rate":
            llo, lhi = np.log10(lo), np.log10(hi)
            step = rng.normal(0.0, 0.1 * (lhi - llo)) if lhi > llo else 0.0
            genes[name] = float(10 ** np.clip(np.log10(genes[name]) + step, llo, lhi))
        else:
            genes[name] = int(np.clip(genes[name] + rng.integers(-2, 3), lo, hi))
    return Genome(**genes)


def crossover(a: Genome, b: Genome, rng: np.random.Generator) -> Genome:
    """Uniform crossover: every gene comes from a randomly chosen parent."""
    pick = rng.random(len(GENES)) < 0.5
    da, db = asdict(a), asdict(b)
    return Genome(**{n: (da[n] if p else db[n]) for n, p in zip(GENES, pick)})


def evolve(population: list[Genome], fitnesses: list[float], config: GaConfig, bounds: GeneBounds,
           rng: np.random.Generator, base: ModelConfig | None = None) -> tuple[list[Genome], Genome]:
    """Next generation: elites copied unchanged, the rest bred from
    rank-weighted parents by uniform crossover and bounded mutation."""
    base = base or ModelConfig()
    n = len(population)
    if n < 2:
        raise ValueError("population must contain at least two genomes")
    if len(fitnesses) != n:
        raise ValueError("one fitness value per genome required")
    order = sorted(range(n), key=lambda i: (fitnesses[i], i))
    ranked = [population[i] for i in order]
    elites = ranked[:min(config.elite_count, n)]
    weights = np.arange(n, 0, -1, dtype=np.float64)
    weights /= weights.sum()
    children = list(elites)
    while len(children) < n:
        pa, pb = rng.choice(n, size=2, p=weights)
        child = _mutate(crossover(ranked[pa], ranked[pb], rng), bounds, config.mutation_rate, rng)
        if not feasible(child, base):
            child = ranked[pa]
        children.append(child)
    return children, ranked[0]


@dataclass
class GaResult:
    records: list[dict] = field(default_factory=list)
    best_per_generation: list[float] = field(default_factory=list)
    best: Genome | None = None
    best_fitness: float = math.inf

    LOG_FIELDS = ("generation", "index", *GENES, "fitness", "seed")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=self.LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.records:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()

    def best_overrides_json(self) -> str:
        payload = {**self.best.overrides(), "fitness": self.best_fitness}
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def run_ga(data, labels, ga_config: GaConfig | None = None, bounds: GeneBounds | None = None,
           base_model: ModelConfig | None = None, base_train: TrainConfig | None = None,
           n_jobs: int = 1) -> GaResult:
    ga_config = ga_config or GaConfig()
    bounds = bounds or GeneBounds()
    base_model = base_model or ModelConfig()
    base_train = base_train or TrainConfig(seed=ga_config.seed)
    rng = ad.make_rng(ga_config.seed)
    fitness = Fitness(data, labels, base_model, base_train, ga_config.fitness_epochs, ga_config.seed)
    population = init_population(ga_config, bounds, rng, base_model)
    result = GaResult()
    for gen in range(ga_config.generations):
        pending = list(dict.fromkeys(g.key() for g in population if g.key() not in fitness.cache))
        if n_jobs != 1 and pending:
            from joblib import Parallel, delayed
            by_key = {g.key(): g for g in population}
            values = Parallel(n_jobs=n_jobs, backend="threading")(
                delayed(fitness._evaluate)(by_key[k]) for k in pending)
            fitness.cache.update(zip(pending, values))
        scores = [fitness(g) for g in population]
        for i, (g, f) in enumerate(zip(population, scores)):
            result.records.append({"generation": gen, "index": i, **asdict(g), "fitness": f,
                                   "seed": genome_seed(ga_config.seed, g)})
        i_best = min(range(len(scores)), key=lambda i: (scores[i], i))
        if scores[i_best] < result.best_fitness or result.best is None:
            result.best, result.best_fitness = population[i_best], scores[i_best]
        result.best_per_generation.append(min(scores))
        logger.info("generation %d best fitness %.5f", gen, min(scores))
        if gen + 1 < ga_config.generations:
            population, _ = evolve(population, scores, ga_config, bounds, rng, base_model)
    return result
