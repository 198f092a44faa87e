import math

import numpy as np
import pytest

from screenpipe import gatune as G
from screenpipe.errors import ConfigError


def surrogate(g):
    return -(g.learning_rate - 3e-3) ** 2 - (g.dropout - 0.4) ** 2


GRID = {
    "base": G.Genome(1e-3, 1e-5, 0.9, 8, 0.5),
    "learning_rate": np.geomspace(1e-4, 1e-2, 50),
    "dropout": np.linspace(0.1, 0.8, 50),
}


class TestSampling:
    def test_degenerate_range(self):
        r = G.GeneRanges(learning_rate=(2e-3, 2e-3), dropout=(0.3, 0.3), batch_size=(16,))
        g = G.sample_genome(r, seed=4)
        assert g.learning_rate == 2e-3 and g.dropout == 0.3 and g.batch_size == 16

    def test_ranges_and_log_uniform_median(self):
        rng = np.random.default_rng(0)
        genomes = [G.sample_genome(seed=rng) for _ in range(10_000)]
        lrs = np.array([g.learning_rate for g in genomes])
        assert lrs.min() >= 1e-4 and lrs.max() <= 1e-2
        assert 8e-4 <= np.median(lrs) <= 1.3e-3
        assert all(G.DEFAULT_RANGES.contains(g) for g in genomes)

    def test_deterministic(self):
        assert G.sample_genome(seed=9) == G.sample_genome(seed=9)

    def test_bad_ranges(self):
        with pytest.raises(ConfigError):
            G.GeneRanges(learning_rate=(1e-2, 1e-4))
        with pytest.raises(ConfigError):
            G.GeneRanges(batch_size=())
        with pytest.raises(ConfigError):
            G.GeneRanges(decay_factor=(0.0, 1e-4))


class TestOperators:
    def test_crossover_identity(self):
        a = G.sample_genome(seed=1)
        assert G.crossover(a, a, seed=3) == a

    def test_crossover_genes_from_parents_at_half_rate(self):
        a, b = G.sample_genome(seed=1), G.sample_genome(seed=2)
        rng = np.random.default_rng(0)
        from_a = np.zeros(5)
        for _ in range(10_000):
            c = G.crossover(a, b, rng)
            for k, name in enumerate(G.Genome.__dataclass_fields__):
                v = getattr(c, name)
                assert v in (getattr(a, name), getattr(b, name))
                from_a[k] += v == getattr(a, name)
        assert np.all(np.abs(from_a / 10_000 - 0.5) < 0.02)

    def test_mutate_rate_zero(self):
        g = G.sample_genome(seed=5)
        assert G.mutate(g, 0.0, seed=1) == g

    def test_mutate_rate_one(self):
        g = G.sample_genome(seed=5)
        for s in range(50):
            m = G.mutate(g, 1.0, seed=s)
            assert G.DEFAULT_RANGES.contains(m)
            assert all(getattr(m, n) != getattr(g, n) for n in G.CONTINUOUS)

    def test_clamp_at_max(self):
        g = G.Genome(1e-2, 1e-4, 0.99, 8, 0.8)
        rng = np.random.default_rng(0)
        for _ in range(200):
            m = G.mutate(g, 1.0, rng)
            assert m.learning_rate <= 1e-2 and m.dropout <= 0.8 and m.momentum <= 0.99
        # an upward step from the maximum clamps to exactly the maximum
        ups = [G.mutate(g, 1.0, s) for s in range(100)]
        assert any(m.learning_rate == 1e-2 for m in ups)

    def test_bad_rate(self):
        with pytest.raises(ConfigError):
            G.mutate(G.sample_genome(seed=0), 1.5)


class TestRunGa:
    def test_degenerate_population(self):
        rng = np.random.default_rng([3, 5])
        first = G.sample_genome(G.DEFAULT_RANGES, rng)
        best, rec = G.run_ga(surrogate, G.GaConfig(population=1, parents=1, generations=4, seed=3))
        assert best == first
        assert rec.evaluations == 1

    def test_monotone_and_deterministic(self):
        cfg = G.GaConfig(population=10, parents=3, generations=8, seed=2)
        b1, r1 = G.run_ga(surrogate, cfg)
        b2, r2 = G.run_ga(surrogate, cfg)
        assert b1 == b2 and r1.to_json() == r2.to_json()
        assert all(y >= x for x, y in zip(r1.best_trace, r1.best_trace[1:]))
        for gen in r1.generations:
            assert all(G.DEFAULT_RANGES.contains(g) for g in gen.genomes)
        lines = r1.summary_csv().splitlines()
        assert lines[0] == "generation,best,mean" and len(lines) == 9

    def test_threads_match_serial(self):
        cfg = G.GaConfig(population=12, parents=4, generations=5, seed=7)
        _, serial = G.run_ga(surrogate, cfg)
        cfg.workers = 4
        _, threaded = G.run_ga(surrogate, cfg)
        assert serial.to_json().replace('"workers": 1', '"workers": 4') == threaded.to_json()

    def test_ties_broken_by_index(self):
        _, rec = G.run_ga(lambda g: 1.0, G.GaConfig(population=6, parents=2, generations=2, seed=0))
        assert rec.generations[0].ranking == list(range(6))
        assert rec.best_genome == rec.generations[0].genomes[0]

    def test_cache_skips_known_genomes(self):
        calls = []

        def fit(g):
            calls.append(g)
            return surrogate(g)

        _, rec = G.run_ga(fit, G.GaConfig(population=8, parents=3, generations=6, seed=1))
        assert len(calls) == rec.evaluations == len({g.key() for g in calls})

    def test_fitness_failure_keeps_partial_record(self):
        state = {"n": 0}

        def fit(g):
            state["n"] += 1
            if state["n"] > 15:
                raise RuntimeError("trainer crashed")
            return surrogate(g)

        with pytest.raises(G.GaAborted) as info:
            G.run_ga(fit, G.GaConfig(population=10, parents=3, generations=5, seed=0))
        assert len(info.value.record.generations) == 1

    def test_grid_oracle(self):
        best, _ = G.grid_search(surrogate, GRID)
        assert best.dropout == pytest.approx(0.4)
        assert best.learning_rate == pytest.approx(1e-4 * 10 ** (72 / 49))

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            G.GaConfig(population=5, parents=5)
        with pytest.raises(ConfigError):
            G.GaConfig(population=5, parents=0)
