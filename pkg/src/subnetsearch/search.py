"""Evolutionary subnet search with budget-filtered perplexity fitness."""

from __future__ import annotations

import json
import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Corpus, sample_calibration, sample_eval_set
from .genome import Genome, MutationParams, SearchSpace, crossover, mutate_genome, validate
from .importance import init_genome, random_genome
from .model import ModelConfig, ModelWeights, capture_grams, param_count, perplexity

log = logging.getLogger(__name__)


class NoSatisfyingCandidate(RuntimeError):
    pass


@dataclass(frozen=True)
class SearchConfig:
    population: int = 100
    n_mutation: int = 50
    n_crossover: int = 30
    elites: int = 10
    generations: int = 50
    p_m0: float = 0.6
    p_s0: float = 0.3
    p_m: float = 0.3
    p_s: float = 0.1
    p_d: float = 0.1
    alpha: float = 0.8
    eta: int = 1000
    similarity: str = "relative"
    eval_samples: int = 8
    eval_seed: int = 1
    seq_len: int | None = None
    calib_samples: int = 128
    calib_seed: int = 0
    target: float = 0.8
    tolerance: float = 0.02
    scope: str = "blocks-only"
    seed: int = 0
    init: str = "importance"
    workers: int = 1

    def __post_init__(self):
        if not 1 <= self.elites <= self.population:
            raise ValueError("need 1 <= elites <= population")
        if self.n_mutation < 0 or self.n_crossover < 0 or self.n_mutation + self.n_crossover > self.population:
            raise ValueError("need n_mutation + n_crossover <= population")
        for name in ("p_m0", "p_s0", "p_m", "p_s", "p_d", "alpha"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0.0 < self.target <= 1.0 or not 0.0 <= self.tolerance < 1.0:
            raise ValueError("need 0 < target <= 1 and 0 <= tolerance < 1")
        if self.eta < 1 or self.generations < 0:
            raise ValueError("eta must be >= 1 and generations >= 0")
        if self.init not in ("importance", "random"):
            raise ValueError("init must be 'importance' or 'random'")
        if self.scope not in ("blocks-only", "full"):
            raise ValueError("scope must be 'blocks-only' or 'full'")

    @property
    def initial_params(self) -> MutationParams:
        return MutationParams(0.0, self.p_s0, self.p_m0, self.alpha, self.eta, self.similarity)

    @property
    def following_params(self) -> MutationParams:
        return MutationParams(self.p_d, self.p_s, self.p_m, self.alpha, self.eta, self.similarity)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Budget:
    target: float
    tolerance: float = 0.02
    scope: str = "blocks-only"

    def window(self, config: ModelConfig) -> tuple[float, float]:
        full = param_count(config, None, self.scope)
        return self.target * full * (1 - self.tolerance), self.target * full * (1 + self.tolerance)

    def contains(self, count: int, config: ModelConfig) -> bool:
        lo, hi = self.window(config)
        return lo - 1e-9 <= count <= hi + 1e-9


@dataclass
class Candidate:
    genome: Genome
    fitness: float | None
    param_count: int
    generation: int
    lineage: str

    @property
    def rejected(self) -> bool:
        return self.fitness is None

    def sort_key(self):
        return (self.fitness, self.param_count, self.genome.fingerprint())


def offspring_rng(seed: int, generation: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, generation, index])


class Evaluator:
    """Fitness oracle sharing one frozen evaluation batch across the whole run."""

    def __init__(self, weights: ModelWeights, config: ModelConfig, eval_set: np.ndarray, budget: Budget,
                 workers: int = 1, dtype=np.float32):
        self.weights, self.config, self.eval_set = weights, config, np.asarray(eval_set)
        self.budget, self.workers, self.dtype = budget, max(1, workers), dtype
        self.forward_passes = 0
        self._cache: dict[str, float] = {}
        self._lock = threading.Lock()

    def fitness(self, genome: Genome) -> float:
        key = genome.fingerprint()
        with self._lock:
            if key in self._cache:
                return self._cache[key]
        value = perplexity(self.weights, self.config, self.eval_set, genome, self.dtype)
        with self._lock:
            self.forward_passes += 1
            self._cache[key] = value
        return value

    def evaluate(self, genome: Genome, generation: int = 0, lineage: str = "init") -> Candidate:
        count = param_count(self.config, genome, self.budget.scope)
        if not self.budget.contains(count, self.config):
            return Candidate(genome, None, count, generation, lineage)
        return Candidate(genome, self.fitness(genome), count, generation, lineage)

    def evaluate_many(self, items: list[tuple[Genome, str]], generation: int) -> list[Candidate]:
        if self.workers == 1:
            return [self.evaluate(g, generation, tag) for g, tag in items]
        with ThreadPoolExecutor(self.workers) as pool:
            return list(pool.map(lambda it: self.evaluate(it[0], generation, it[1]), items))


def select_elites(pool: list[Candidate], k: int) -> list[Candidate]:
    """k best satisfying candidates, distinct genomes, deterministic order."""
    ok = sorted((c for c in pool if not c.rejected), key=Candidate.sort_key)
    out, seen = [], set()
    for c in ok:
        fp = c.genome.fingerprint()
        if fp in seen:
            continue
        seen.add(fp)
        out.append(c)
        if len(out) == k:
            break
    return out


def _log_row(generation: int, elites: list[Candidate], offspring: list[Candidate]) -> dict:
    fit = [c.fitness for c in offspring if not c.rejected]
    return {
        "generation": generation,
        "best_fitness": elites[0].fitness,
        "median_fitness": float(np.median(fit)) if fit else None,
        "evaluated": len(offspring),
        "rejected": sum(c.rejected for c in offspring),
        "elite_fitness": [c.fitness for c in elites],
        "elite_fingerprints": [c.genome.fingerprint() for c in elites],
        "elite_param_counts": [c.param_count for c in elites],
    }


def initial_generation(init: Genome, evaluator: Evaluator, space: SearchSpace, sc: SearchConfig):
    config = evaluator.config
    items = []
    for j in range(sc.population):
        rng = offspring_rng(sc.seed, 0, j)
        items.append((mutate_genome(init, sc.initial_params, space, config, rng), "init"))
    offspring = evaluator.evaluate_many(items, 0)
    elites = select_elites(offspring, sc.elites)
    if not elites:
        raise NoSatisfyingCandidate("every initial candidate fell outside the parameter budget")
    return elites, _log_row(0, elites, offspring)


def evolve(elites: list[Candidate], evaluator: Evaluator, space: SearchSpace, sc: SearchConfig,
           generation: int):
    config = evaluator.config
    items = []
    n_heavy = sc.population - sc.n_mutation - sc.n_crossover
    for j in range(sc.population):
        rng = offspring_rng(sc.seed, generation, j)
        if j < sc.n_mutation:
            parent = elites[int(rng.integers(len(elites)))].genome
            items.append((mutate_genome(parent, sc.following_params, space, config, rng), "mutation"))
        elif j < sc.n_mutation + sc.n_crossover:
            if len(elites) >= 2:
                a, b = rng.choice(len(elites), 2, replace=False)
            else:
                a = b = 0
            items.append((crossover(elites[int(a)].genome, elites[int(b)].genome, rng, space), "crossover"))
        else:
            parent = elites[int(rng.integers(len(elites)))].genome
            items.append((mutate_genome(parent, sc.initial_params, space, config, rng), "heavy-mutation"))
    assert len(items) - sc.n_mutation - sc.n_crossover == n_heavy
    offspring = evaluator.evaluate_many(items, generation)
    carried = [Candidate(c.genome, c.fitness, c.param_count, c.generation, "elite") for c in elites]
    new_elites = select_elites(carried + offspring, sc.elites)
    if new_elites[0].fitness > elites[0].fitness:
        raise AssertionError("elitism violated: best fitness increased")
    return new_elites, _log_row(generation, new_elites, offspring)


@dataclass
class SearchLog:
    rows: list = field(default_factory=list)
    init_fitness: float | None = None
    best_genome: Genome | None = None

    def best_curve(self) -> list[float]:
        return [r["best_fitness"] for r in self.rows]

    def to_jsonl(self) -> str:
        lines = [json.dumps({"kind": "init", "init_fitness": self.init_fitness}, sort_keys=True)]
        lines += [json.dumps({"kind": "generation", **r}, sort_keys=True) for r in self.rows]
        if self.best_genome is not None:
            lines.append(json.dumps({"kind": "final", "best_fingerprint": self.best_genome.fingerprint(),
                                     "best_fitness": self.rows[-1]["best_fitness"] if self.rows else None},
                                    sort_keys=True))
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def load(cls, path: str | Path) -> "SearchLog":
        out = cls()
        for line in Path(path).read_text().splitlines():
            rec = json.loads(line)
            kind = rec.pop("kind")
            if kind == "init":
                out.init_fitness = rec["init_fitness"]
            elif kind == "generation":
                out.rows.append(rec)
        return out


@dataclass
class SearchResult:
    best: Candidate
    log: SearchLog
    init: Candidate
    forward_passes: int


def starting_genome(weights, config, corpus: Corpus, sc: SearchConfig, grams=None) -> Genome:
    if sc.init == "random":
        return random_genome(config, sc.target, np.random.default_rng([sc.seed, 2**31 - 1]))
    if grams is None:
        seq_len = sc.seq_len or config.max_seq_len
        calib = sample_calibration(corpus, sc.calib_samples, seq_len, sc.calib_seed)
        grams = capture_grams(weights, config, calib)
    return init_genome(weights, config, grams, sc.target)


def run_search(weights: ModelWeights, config: ModelConfig, corpus: Corpus, sc: SearchConfig = SearchConfig(),
               space: SearchSpace | None = None, grams=None, init: Genome | None = None,
               progress=None) -> SearchResult:
    """Gram capture -> initial genome -> initial generation -> ``generations`` rounds."""
    space = space or SearchSpace.for_target(config, sc.target, sc.tolerance)
    if init is None:
        init = starting_genome(weights, config, corpus, sc, grams)
    problems = validate(init, space, config)
    if problems:
        raise ValueError("initial genome is not valid in the search space: " + "; ".join(problems[:3]))
    seq_len = sc.seq_len or config.max_seq_len
    eval_set = sample_eval_set(corpus, sc.eval_samples, seq_len, sc.eval_seed)
    budget = Budget(sc.target, sc.tolerance, sc.scope)
    evaluator = Evaluator(weights, config, eval_set, budget, sc.workers)

    init_cand = evaluator.evaluate(init, 0, "init")
    if init_cand.rejected:
        # still report its fitness for comparison, outside the budget logic
        init_cand = Candidate(init, perplexity(weights, config, eval_set, init), init_cand.param_count, 0, "init")
    slog = SearchLog(init_fitness=init_cand.fitness)

    elites, row = initial_generation(init, evaluator, space, sc)
    slog.rows.append(row)
    if progress:
        progress(row)
    for gen in range(1, sc.generations + 1):
        elites, row = evolve(elites, evaluator, space, sc, gen)
        slog.rows.append(row)
        log.info("generation %d best %.4f rejected %d", gen, row["best_fitness"], row["rejected"])
        if progress:
            progress(row)
    slog.best_genome = elites[0].genome
    return SearchResult(elites[0], slog, init_cand, evaluator.forward_passes)


def is_non_increasing(curve: list[float]) -> bool:
    return all(b <= a for a, b in zip(curve, curve[1:]))


def contains_finite(values) -> bool:
    return all(v is not None and math.isfinite(v) for v in values)
