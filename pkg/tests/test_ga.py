"""Genetic search operators, fitness and search-log determinism."""
import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from absolutenet import autodiff as ad
from absolutenet.ga import (Fitness, GaConfig, GeneBounds, Genome, crossover, evolve, feasible,
                            init_population, run_ga)
from absolutenet.model import ModelConfig
from absolutenet.training import TrainConfig

TINY_BOUNDS = GeneBounds(temporal_kernel=(3, 5), separable_kernel=(3, 5), pool_size=(3, 10),
                         pool_stride=(1, 4))
TINY_TRAIN = TrainConfig(batch_size=8, epochs_select=2, epochs_retrain=0)


def genome(**kw):
    base = dict(learning_rate=1e-3, temporal_kernel=5, separable_kernel=3, pool_size=25, pool_stride=8)
    return Genome(**{**base, **kw})


class TestInit:
    def test_within_bounds(self, rng):
        bounds = GeneBounds()
        pop = init_population(GaConfig(), bounds, rng)
        assert len(pop) == 8
        assert all(bounds.contains(g) and feasible(g, ModelConfig()) for g in pop)
        assert len({g.key() for g in pop}) == 8

    def test_collapsed_bounds(self, rng):
        b = GeneBounds(learning_rate=(1e-3, 1e-3), temporal_kernel=(5, 5), separable_kernel=(3, 3),
                       pool_size=(25, 25), pool_stride=(8, 8))
        pop = init_population(GaConfig(population=4), b, rng)
        assert len({g.key() for g in pop}) == 1
        assert pop[0] == genome()

    def test_learning_rate_log_uniform(self, rng):
        pop = init_population(GaConfig(population=1000, elite_count=1), GeneBounds(), rng)
        logs = np.log10([g.learning_rate for g in pop])
        counts, _ = np.histogram(logs, bins=10, range=(-5, -2))
        assert stats.chisquare(counts).pvalue > 0.001

    def test_infeasible_region(self, rng):
        b = GeneBounds(pool_size=(200, 210))
        with pytest.raises(ValueError, match="feasible"):
            init_population(GaConfig(population=2), b, rng)

    def test_inverted_bounds(self):
        with pytest.raises(ValueError):
            GeneBounds(pool_size=(10, 5))

    @pytest.mark.parametrize("kw", [{"population": 1}, {"mutation_rate": 1.5}, {"elite_count": 0},
                                    {"generations": 0}])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            GaConfig(**kw)


class TestOperators:
    def test_identical_parents_without_mutation(self, rng):
        g = genome()
        pop, _ = evolve([g, g, g], [1.0, 1.0, 1.0], GaConfig(population=3, mutation_rate=0.0, elite_count=1),
                        GeneBounds(), rng)
        assert all(c == g for c in pop)

    def test_crossover_takes_each_gene_from_a_parent(self, rng):
        a, b = genome(), genome(learning_rate=1e-4, temporal_kernel=9, separable_kernel=7, pool_size=10,
                                pool_stride=2)
        for _ in range(20):
            c = crossover(a, b, rng)
            for name in ("learning_rate", "temporal_kernel", "separable_kernel", "pool_size", "pool_stride"):
                assert getattr(c, name) in (getattr(a, name), getattr(b, name))

    def test_elites_survive_unchanged(self, rng):
        pop = init_population(GaConfig(), GeneBounds(), rng)
        fit = list(np.linspace(1.0, 0.2, len(pop)))
        nxt, best = evolve(pop, fit, GaConfig(elite_count=2, mutation_rate=1.0), GeneBounds(), rng)
        assert nxt[:2] == [pop[-1], pop[-2]] and best == pop[-1]

    def test_bound_closure_under_heavy_mutation(self, rng):
        bounds = GeneBounds()
        cfg = GaConfig(mutation_rate=1.0)
        pop = init_population(cfg, bounds, rng)
        for _ in range(30):
            pop, _ = evolve(pop, list(rng.random(len(pop))), cfg, bounds, rng)
            assert all(bounds.contains(g) and feasible(g, ModelConfig()) for g in pop)

    def test_population_too_small(self, rng):
        with pytest.raises(ValueError):
            evolve([genome()], [0.0], GaConfig(), GeneBounds(), rng)


class TestFitness:
    def test_identical_genomes_same_value_and_memoised(self, tiny_config, tiny_data):
        X, y = tiny_data
        g = genome(temporal_kernel=3, pool_size=5, pool_stride=4)
        f1 = Fitness(X, y, tiny_config, TINY_TRAIN, epochs=2, seed=1)
        f2 = Fitness(X, y, tiny_config, TINY_TRAIN, epochs=2, seed=1)
        assert f1(g) == f2(g) and math.isfinite(f1(g))
        f1.cache[g.key()] = -1.0
        assert f1(replace(g)) == -1.0

    def test_infeasible_is_infinite(self, tiny_config, tiny_data):
        X, y = tiny_data
        f = Fitness(X, y, tiny_config, TINY_TRAIN, epochs=1, seed=0)
        assert f(genome(pool_size=50)) == math.inf

    def test_training_failure_is_culled(self, tiny_config, tiny_data):
        X, y = tiny_data
        X = X.copy()
        X[:] = np.nan
        f = Fitness(X, y, tiny_config, TINY_TRAIN, epochs=1, seed=0)
        assert f(genome(temporal_kernel=3, pool_size=5, pool_stride=4)) == math.inf


class TestSearch:
    def test_monotone_bounded_and_reproducible(self, tiny_config, tiny_data):
        X, y = tiny_data
        cfg = GaConfig(population=4, generations=3, fitness_epochs=1, seed=2)
        a = run_ga(X, y, cfg, TINY_BOUNDS, tiny_config, TINY_TRAIN)
        assert all(np.diff(a.best_per_generation) <= 0)
        assert all(TINY_BOUNDS.contains(Genome(**{k: r[k] for k in Genome.__dataclass_fields__}))
                   for r in a.records)
        assert len(a.records) == 12
        b = run_ga(X, y, cfg, TINY_BOUNDS, tiny_config, TINY_TRAIN, n_jobs=2)
        assert a.to_csv() == b.to_csv()
        assert a.best_fitness == min(a.best_per_generation)

    def test_best_overrides_shape(self, tiny_config, tiny_data):
        X, y = tiny_data
        res = run_ga(X, y, GaConfig(population=2, generations=1, fitness_epochs=1), TINY_BOUNDS,
                     tiny_config, TINY_TRAIN)
        import json
        data = json.loads(res.best_overrides_json())
        assert set(data) == {"model", "train", "fitness"}
        assert ModelConfig.from_dict({**tiny_config.to_dict(), **data["model"]}) == res.best.model_config(tiny_config)
