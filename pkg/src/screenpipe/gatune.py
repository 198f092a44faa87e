"""Genetic-algorithm search over training hyperparameters.

A genome holds five genes: learning rate, learning-rate decay, momentum,
batch size and dropout rate. Each generation keeps the best ``S``
genomes unchanged and refills the population with mutated uniform
crossovers of random elite pairs.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, ScreenpipeError

CONTINUOUS = ("learning_rate", "decay_factor", "momentum", "dropout")
LOG_GENES = ("learning_rate", "decay_factor")
MUTATION_SIGMA = 0.25


@dataclass(frozen=True)
class Genome:
    learning_rate: float
    decay_factor: float
    momentum: float
    batch_size: int
    dropout: float

    def key(self):
        return (self.learning_rate, self.decay_factor, self.momentum, self.batch_size, self.dropout)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class GeneRanges:
    learning_rate: tuple = (1e-4, 1e-2)
    decay_factor: tuple = (1e-6, 1e-4)
    momentum: tuple = (0.5, 0.99)
    batch_size: tuple = (4, 8, 16, 32)
    dropout: tuple = (0.1, 0.8)

    def __post_init__(self):
        for name in CONTINUOUS:
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise ConfigError(f"{name} range must satisfy low <= high, got {(lo, hi)}")
            if name in LOG_GENES and lo <= 0:
                raise ConfigError(f"{name} is sampled log-uniformly and needs a positive range")
        if not self.batch_size:
            raise ConfigError("batch_size choice set is empty")

    def contains(self, g):
        ok = all(getattr(self, n)[0] <= getattr(g, n) <= getattr(self, n)[1] for n in CONTINUOUS)
        return ok and g.batch_size in self.batch_size


DEFAULT_RANGES = GeneRanges()


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _draw(name, ranges, rng):
    lo, hi = getattr(ranges, name)
    if lo == hi:
        rng.random()  # keep the stream aligned with the non-degenerate case
        return float(lo)
    if name in LOG_GENES:
        return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))
    return float(rng.uniform(lo, hi))


def sample_genome(ranges=DEFAULT_RANGES, seed=None):
    rng = _rng(seed)
    genes = {name: _draw(name, ranges, rng) for name in ("learning_rate", "decay_factor", "momentum")}
    genes["batch_size"] = int(ranges.batch_size[int(rng.integers(len(ranges.batch_size)))])
    genes["dropout"] = _draw("dropout", ranges, rng)
    return Genome(**genes)


def crossover(a, b, seed=None):
    """Uniform crossover: each gene comes from ``a`` or ``b`` with probability 1/2."""
    rng = _rng(seed)
    pick = rng.random(5) < 0.5
    genes = {name: getattr(a if take_a else b, name) for name, take_a in zip(Genome.__dataclass_fields__, pick)}
    return Genome(**genes)


def mutate(g, rate, seed=None, ranges=DEFAULT_RANGES, sigma=MUTATION_SIGMA):
    """Per gene with probability ``rate``: continuous genes are scaled by
    ``exp(N(0, sigma))`` and clamped to range, batch size is re-drawn."""
    if not 0.0 <= rate <= 1.0:
        raise ConfigError(f"mutation rate must be in [0, 1], got {rate}")
    rng = _rng(seed)
    genes = g.to_dict()
    for name in Genome.__dataclass_fields__:
        hit = rng.random() < rate
        step = rng.normal(0.0, sigma)
        choice = int(rng.integers(len(ranges.batch_size)))
        if not hit:
            continue
        if name == "batch_size":
            genes[name] = int(ranges.batch_size[choice])
        else:
            lo, hi = getattr(ranges, name)
            genes[name] = float(min(max(genes[name] * math.exp(step), lo), hi))
    return Genome(**genes)


# -- the generational loop ---------------------------------------------------

@dataclass
class GaConfig:
    population: int = 20
    parents: int = 5
    generations: int = 30
    fitness_epochs: int = 30
    mutation_rate: float = 0.2
    seed: int = 0
    workers: int = 1
    ranges: GeneRanges = field(default_factory=GeneRanges)

    def __post_init__(self):
        if self.population < 1 or self.generations < 1:
            raise ConfigError("population and generations must be >= 1")
        if not 1 <= self.parents <= self.population:
            raise ConfigError(f"parents must be in [1, population], got {self.parents}")
        if self.parents == self.population and self.population > 1:
            raise ConfigError("parents must be fewer than the population")
        if not 0.0 <= self.mutation_rate <= 1.0:
            raise ConfigError("mutation_rate must be in [0, 1]")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")


@dataclass
class Generation:
    index: int
    genomes: list
    fitness: list
    ranking: list
    best: float


@dataclass
class GaRun:
    config: GaConfig
    generations: list = field(default_factory=list)
    best_genome: Genome = None
    best_fitness: float = -math.inf
    evaluations: int = 0

    @property
    def best_trace(self):
        return [g.best for g in self.generations]

    def to_json(self):
        cfg = asdict(self.config)
        return json.dumps({
            "config": cfg,
            "best_genome": None if self.best_genome is None else self.best_genome.to_dict(),
            "best_fitness": self.best_fitness,
            "evaluations": self.evaluations,
            "generations": [
                {"index": g.index, "best": g.best, "ranking": g.ranking,
                 "genomes": [x.to_dict() for x in g.genomes], "fitness": g.fitness}
                for g in self.generations
            ],
        }, indent=2, sort_keys=True)

    def summary_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["generation", "best", "mean"])
        for g in self.generations:
            w.writerow([g.index, repr(float(g.best)), repr(float(np.mean(g.fitness)))])
        return buf.getvalue()


class GaAborted(ScreenpipeError, RuntimeError):
    """The fitness function failed; ``record`` holds the completed generations."""

    def __init__(self, message, record):
        super().__init__(message)
        self.record = record


def _rank(fitness):
    return sorted(range(len(fitness)), key=lambda i: (-fitness[i], i))


def run_ga(fitness_fn, cfg=None):
    """Evolve hyperparameters; returns ``(best_genome, record)``.

    Fitness values are cached by genome, so elites and duplicate children
    are never re-evaluated. With ``cfg.workers > 1`` a generation's new
    genomes are evaluated on a thread pool; selection order does not depend
    on completion order.
    """
    cfg = cfg or GaConfig()
    rng = np.random.default_rng([cfg.seed, 5])
    population = [sample_genome(cfg.ranges, rng) for _ in range(cfg.population)]
    cache = {}
    record = GaRun(config=cfg)
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for gen in range(1, cfg.generations + 1):
            todo = list(dict.fromkeys(g.key() for g in population if g.key() not in cache))
            by_key = {g.key(): g for g in population}
            try:
                if pool:
                    results = list(pool.map(lambda k: fitness_fn(by_key[k]), todo))
                else:
                    results = [fitness_fn(by_key[k]) for k in todo]
            except Exception as exc:
                raise GaAborted(f"fitness evaluation failed in generation {gen}: {exc}", record) from exc
            for k, f in zip(todo, results):
                cache[k] = float(f)
            record.evaluations += len(todo)
            fitness = [cache[g.key()] for g in population]
            ranking = _rank(fitness)
            top = ranking[0]
            if fitness[top] > record.best_fitness:
                record.best_fitness, record.best_genome = fitness[top], population[top]
            record.generations.append(Generation(gen, list(population), fitness, ranking, record.best_fitness))
            if gen == cfg.generations:
                break
            elites = [population[i] for i in ranking[:cfg.parents]]
            children = []
            for _ in range(cfg.population - cfg.parents):
                if len(elites) > 1:
                    i, j = rng.choice(len(elites), size=2, replace=False)
                    child = crossover(elites[i], elites[j], rng)
                else:
                    child = elites[0]
                children.append(mutate(child, cfg.mutation_rate, rng, cfg.ranges))
            population = elites + children
    finally:
        if pool:
            pool.shutdown()
    return record.best_genome, record


def grid_search(fitness_fn, axes):
    """Exhaustive search over a dict ``gene -> values``; other genes come from
    ``axes['base']`` (a Genome). Returns ``(best_genome, best_fitness)`` with
    ties going to the first grid point in iteration order."""
    base = axes["base"].to_dict()
    names = [n for n in axes if n != "base"]
    best, best_f = None, -math.inf
    for combo in np.array(np.meshgrid(*[axes[n] for n in names], indexing="ij")).reshape(len(names), -1).T:
        genes = dict(base)
        genes.update({n: float(v) for n, v in zip(names, combo)})
        genes["batch_size"] = int(genes["batch_size"])
        g = Genome(**genes)
        f = fitness_fn(g)
        if f > best_f:
            best, best_f = g, f
    return best, best_f


def classifier_fitness(features, labels, val_features, val_labels, base_cfg, backbone, epochs=30,
                       train_seed=0):
    """Validation accuracy of a head trained for ``epochs`` with a genome's
    hyperparameters; the training seed is shared across genomes."""
    from . import classifier

    def fitness(genome):
        cfg = base_cfg.with_genome(genome)
        cfg.epochs = epochs
        cfg.seed = train_seed
        net = classifier.build_classifier(cfg, backbone)
        _, hist = classifier.train_head(net, None, labels, cfg, (), val_labels,
                                        features=features, val_features=val_features)
        return hist.val_acc[-1]

    return fitness
