"""NSGA-II over genomes, minimizing (validation distance in px, MBOPs)."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import archspace
from .costmodel import cost, param_count
from .engine.training import TrainConfig, evaluate, train

logger = logging.getLogger(__name__)

POPULATION = 20
BUDGET = 200
CROSSOVER_PROB = 0.9
MUTATION_RATE = 0.1
PARETO_COLUMNS = ("trial_id", "mean_distance", "mbops", "generation", "params", "sparsity", "bits")
INF = float("inf")


# ---------------------------------------------------------------------------
# sorting and diversity

def dominates(a, b):
    return all(x <= y for x, y in zip(a, b)) and any(x < y for x, y in zip(a, b))


def fast_nondominated_sort(objectives):
    """Partition point indices into successive non-dominated fronts.

    Points equal on every objective do not dominate each other and share a
    front. Indices inside a front are ascending.
    """
    pts = np.asarray(objectives, dtype=float).reshape(len(objectives), -1)
    n = len(pts)
    if n == 0:
        return []
    le = np.all(pts[:, None, :] <= pts[None, :, :], axis=2)
    lt = np.any(pts[:, None, :] < pts[None, :, :], axis=2)
    dom = le & lt                         # dom[i, j]: i dominates j
    counts = dom.sum(axis=0)
    fronts = []
    current = np.flatnonzero(counts == 0)
    while current.size:
        fronts.append(current.tolist())
        counts = counts - dom[current].sum(axis=0)
        counts[current] = -1
        current = np.flatnonzero(counts == 0)
    return fronts


def crowding_distance(objectives):
    """Crowding distance of each point within one front.

    Boundary points on any objective get infinity; interior points sum the
    neighbor gap on each objective divided by that objective's range.
    """
    pts = np.asarray(objectives, dtype=float).reshape(len(objectives), -1)
    n, m = pts.shape
    dist = np.zeros(n)
    if n <= 2:
        return np.full(n, INF)
    for j in range(m):
        order = np.argsort(pts[:, j], kind="stable")
        col = pts[order, j]
        dist[order[0]] = dist[order[-1]] = INF
        with np.errstate(invalid="ignore"):
            span = col[-1] - col[0]
        if not np.isfinite(span) or span <= 0:
            continue
        gaps = (col[2:] - col[:-2]) / span
        dist[order[1:-1]] += gaps
    return dist


def hypervolume_2d(points, reference):
    """Area dominated by ``points`` and bounded by ``reference`` (minimization)."""
    rx, ry = reference
    pts = sorted((x, y) for x, y in points if x < rx and y < ry)
    area, best_y = 0.0, ry
    for x, y in pts:
        if y < best_y:
            area += (rx - x) * (best_y - y)
            best_y = y
    return area


# ---------------------------------------------------------------------------
# individuals and the archive

@dataclass
class Individual:
    genome: object
    objectives: tuple
    trial_id: int
    generation: int
    seed: int
    info: dict = field(default_factory=dict)
    rank: int | None = None
    crowding: float | None = None

    @property
    def failed(self):
        return not all(math.isfinite(v) for v in self.objectives)


def assign_rank_and_crowding(individuals):
    fronts = fast_nondominated_sort([ind.objectives for ind in individuals])
    for r, front in enumerate(fronts):
        cd = crowding_distance([individuals[i].objectives for i in front])
        for i, d in zip(front, cd):
            individuals[i].rank = r
            individuals[i].crowding = float(d)
    return fronts


def environmental_selection(individuals, k):
    """Best ``k`` by (rank, -crowding, trial_id)."""
    assign_rank_and_crowding(individuals)
    ordered = sorted(individuals, key=lambda ind: (ind.rank, -ind.crowding, ind.trial_id))
    return ordered[:k]


def binary_tournament(population, rng):
    i, j = rng.integers(len(population), size=2)
    a, b = population[i], population[j]
    if (a.rank, -a.crowding, a.trial_id) <= (b.rank, -b.crowding, b.trial_id):
        return a
    return b


class ParetoArchive:
    """Non-dominated set over every finished, finite trial."""

    def __init__(self, reference=None, key=None):
        self.members = []
        self.key = key
        self.reference = reference
        self.history = []

    def update(self, individuals):
        pool = self.members + [ind for ind in individuals if not ind.failed]
        if self.key is not None:
            # a re-served duplicate genome is the same candidate, keep its first trial
            unique = {}
            for ind in sorted(pool, key=lambda ind: ind.trial_id):
                unique.setdefault(self.key(ind.genome), ind)
            pool = list(unique.values())
        if not pool:
            return
        front = fast_nondominated_sort([ind.objectives for ind in pool])[0]
        self.members = sorted((pool[i] for i in front), key=lambda ind: ind.trial_id)

    def record_generation(self, generation):
        if self.reference is None and self.members:
            worst = np.max([ind.objectives for ind in self.members], axis=0)
            self.reference = tuple(float(v) * 1.1 + 1e-12 for v in worst)
        objs = [ind.objectives for ind in self.members]
        entry = {
            "generation": generation,
            "size": len(self.members),
            "best": [float(min(o[j] for o in objs)) if objs else INF for j in range(2)],
            "hypervolume": hypervolume_2d(objs, self.reference) if objs else 0.0,
        }
        self.history.append(entry)
        return entry

    def dominated_fraction(self, points):
        """Share of ``points`` weakly dominated by some archive member."""
        if not len(points):
            return 0.0
        objs = np.asarray([ind.objectives for ind in self.members], dtype=float)
        hits = 0
        for p in points:
            p = np.asarray(p, dtype=float)
            if not np.all(np.isfinite(p)) or (len(objs) and np.any(np.all(objs <= p, axis=1))):
                hits += 1
        return hits / len(points)

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)


# ---------------------------------------------------------------------------
# genome spaces

class ArchitectureSpace:
    """Hooks NSGA-II needs from the architecture search space."""

    def sample(self, rng):
        return archspace.sample_genome(rng)

    def mutate(self, genome, rate, rng):
        return archspace.mutate(genome, rate, rng)

    def crossover(self, a, b, rng):
        return archspace.crossover(a, b, rng)

    def key(self, genome):
        return genome.key()

    def to_json(self, genome):
        return genome.to_dict()

    def from_json(self, data):
        return archspace.Genome.from_dict(data)


class GridSpace:
    """One real gene on a uniform grid; a test bed for the search loop.

    Genomes are grid indices. Mutation nudges the index by a Gaussian step
    (and resamples it outright with probability ``rate``); crossover draws
    two children on the segment between the parents, slightly extended.
    """

    def __init__(self, lo=-2.0, hi=4.0, steps=601):
        self.values = np.linspace(lo, hi, steps)

    def value(self, genome):
        return float(self.values[genome])

    def sample(self, rng):
        return int(rng.integers(len(self.values)))

    def mutate(self, genome, rate, rng):
        if rng.random() < rate:
            return self.sample(rng)
        step = int(round(rng.normal(0.0, 0.05 * len(self.values))))
        return int(np.clip(genome + step, 0, len(self.values) - 1))

    def crossover(self, a, b, rng):
        u = rng.uniform(-0.25, 1.25, size=2)
        kids = np.clip(np.rint(a + u * (b - a)), 0, len(self.values) - 1).astype(int)
        return int(kids[0]), int(kids[1])

    def key(self, genome):
        return str(int(genome))

    def to_json(self, genome):
        return int(genome)

    def from_json(self, data):
        return int(data)


def genome_seed(master_seed, key):
    digest = hashlib.sha256(f"{master_seed}:{key}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


# ---------------------------------------------------------------------------
# evaluation

class PartialTrainingEvaluator:
    """Train a decoded genome briefly and score it on the validation split.

    Returns ``{"mean_distance", "mbops", "params"}``; a diverged run scores
    infinity on both objectives.
    """

    def __init__(self, train_data, val_data, epochs=50, lr=1e-3, batch_size=256,
                 weight_decay=0.0, schedule="constant"):
        self.train_data = train_data
        self.val_data = val_data
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.schedule = schedule

    def __call__(self, genome, seed):
        spec = archspace.decode(genome)
        net = spec.build(seed=seed)
        config = TrainConfig(lr=self.lr, weight_decay=self.weight_decay, schedule=self.schedule,
                             epochs=self.epochs, batch_size=self.batch_size, seed=seed)
        result = train(net, *self.train_data, config)
        distance = INF if result.failed else evaluate(net, *self.val_data).mean_distance
        mbops = cost(spec).mbops
        if not math.isfinite(distance):
            return {"mean_distance": INF, "mbops": INF, "params": param_count(spec).total}
        return {"mean_distance": distance, "mbops": mbops, "params": param_count(spec).total}


def _safe_call(evaluator, genome, seed):
    try:
        out = evaluator(genome, seed)
        objectives = (float(out["mean_distance"]), float(out["mbops"]))
        info = {k: v for k, v in out.items() if k not in ("mean_distance", "mbops")}
    except Exception as exc:  # evaluator failure scores +inf, never aborts the search
        logger.warning("evaluation failed: %s", exc)
        objectives, info = (INF, INF), {"error": f"{type(exc).__name__}: {exc}"}
    if not all(math.isfinite(v) for v in objectives):
        objectives = (INF, INF)
    return objectives, info


def _eval_job(args):
    evaluator, genome, seed = args
    t0 = time.perf_counter()
    objectives, info = _safe_call(evaluator, genome, seed)
    return objectives, info, time.perf_counter() - t0


# ---------------------------------------------------------------------------
# trial log

def _dump_record(record):
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def read_trial_log(path):
    """Parse a JSONL trial log, dropping a torn final line from a crash."""
    records = []
    if not path or not os.path.exists(path):
        return records
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError:
                break
    return records


@dataclass
class SearchConfig:
    population: int = POPULATION
    budget: int = BUDGET
    crossover_prob: float = CROSSOVER_PROB
    mutation_rate: float = MUTATION_RATE
    seed: int = 0
    workers: int = 1
    epochs: int | None = None   # recorded in the log only

    def __post_init__(self):
        if self.population < 2:
            raise ValueError("population must be >= 2")
        if self.budget < 1:
            raise ValueError("budget must be >= 1")


@dataclass
class SearchResult:
    archive: ParetoArchive
    trials: list
    population: list
    generations: int


class _Runner:
    def __init__(self, config, evaluator, space, log_path, timings_path, replay):
        self.config = config
        self.evaluator = evaluator
        self.space = space
        self.log_path = log_path
        self.timings_path = timings_path
        self.replay = replay
        self.cache = {}
        self.trials = []

    def evaluate_generation(self, genomes, generation):
        start = len(self.trials)
        keys = [self.space.key(g) for g in genomes]
        seeds = [genome_seed(self.config.seed, k) for k in keys]
        results = [None] * len(genomes)
        jobs = []
        for i, (g, key, seed) in enumerate(zip(genomes, keys, seeds)):
            tid = start + i
            if tid < len(self.replay):
                rec = self.replay[tid]
                if rec["genome_key"] != key:
                    raise RuntimeError(f"trial log diverges from this run at trial {tid}; "
                                       "was the config or seed changed?")
                results[i] = (tuple(rec["objectives"]), rec.get("info", {}), None, rec["cached"])
            elif key in self.cache:
                objectives, info = self.cache[key]
                results[i] = (objectives, info, 0.0, True)
            elif any(k == key for k, _ in jobs):
                results[i] = "pending"
            else:
                jobs.append((key, (self.evaluator, g, seed)))
        computed = {}
        if jobs:
            if self.config.workers > 1 and len(jobs) > 1:
                with ProcessPoolExecutor(max_workers=self.config.workers) as pool:
                    outs = list(pool.map(_eval_job, [j for _, j in jobs]))
            else:
                outs = [_eval_job(j) for _, j in jobs]
            computed = {key: out for (key, _), out in zip(jobs, outs)}
        seen = set()
        for i, key in enumerate(keys):
            if results[i] is None or results[i] == "pending":
                objectives, info, wall = computed[key]
                cached = key in seen
                results[i] = (objectives, info, 0.0 if cached else wall, cached)
            seen.add(key)

        individuals, lines, timings = [], [], []
        for i, (g, key, seed) in enumerate(zip(genomes, keys, seeds)):
            objectives, info, wall, cached = results[i]
            objectives = tuple(float(v) for v in objectives)
            self.cache.setdefault(key, (objectives, info))
            ind = Individual(g, objectives, start + i, generation, seed, dict(info))
            individuals.append(ind)
            record = {"trial_id": ind.trial_id, "generation": generation,
                      "genome": self.space.to_json(g), "genome_key": key,
                      "objectives": list(objectives), "info": info, "epochs": self.config.epochs,
                      "seed": seed, "cached": cached, "status": "failed" if ind.failed else "ok"}
            if start + i >= len(self.replay):
                lines.append(_dump_record(record))
                timings.append(json.dumps({"trial_id": ind.trial_id, "wall_time_s": wall}))
        self._append(self.log_path, lines)
        self._append(self.timings_path, timings)
        self.trials.extend(individuals)
        return individuals

    @staticmethod
    def _append(path, lines):
        if path and lines:
            with open(path, "a") as fh:
                fh.write("\n".join(lines) + "\n")
                fh.flush()
                os.fsync(fh.fileno())


def _truncate_log(path, n_records):
    """Rewrite the log keeping the first ``n_records`` (drops a torn tail)."""
    if not path or not os.path.exists(path):
        return
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()][:n_records]
    with open(path, "w") as fh:
        fh.write("".join(ln + "\n" for ln in lines))


def write_pareto_csv(path, individuals, generation=None, bits=32, sparsity=0.0, append=False):
    mode = "a" if append and os.path.exists(path) else "w"
    with open(path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(PARETO_COLUMNS)
        for ind in individuals:
            writer.writerow([ind.trial_id, f"{ind.objectives[0]:.6f}", f"{ind.objectives[1]:.6f}",
                             ind.generation if generation is None else generation,
                             ind.info.get("params", ""), sparsity, bits])


def run_global_search(config, evaluator, space=None, log_path=None, pareto_path=None,
                      timings_path=None, resume=True, on_generation=None):
    """Generational NSGA-II until ``config.budget`` trials have been logged.

    Every trial, including duplicates served from the memo cache, counts
    toward the budget. With ``resume`` an existing log is replayed: its
    trials are reused in order instead of being re-evaluated, which restores
    the exact state the run had when it stopped.
    """
    space = space or ArchitectureSpace()
    rng = np.random.default_rng(config.seed)
    replay = read_trial_log(log_path) if resume else []
    if log_path:
        if resume:
            _truncate_log(log_path, len(replay))
        else:
            open(log_path, "w").close()
            if timings_path:
                open(timings_path, "w").close()
            if pareto_path and os.path.exists(pareto_path):
                os.remove(pareto_path)
    runner = _Runner(config, evaluator, space, log_path, timings_path, replay)
    archive = ParetoArchive(key=space.key)

    def finish_generation(gen, pop_inds):
        archive.update(pop_inds)
        entry = archive.record_generation(gen)
        if pareto_path and runner.trials[-1].trial_id >= len(replay):
            write_pareto_csv(pareto_path, archive.members, generation=gen, append=True)
        logger.info("generation %d: archive %d, best %s, hv %.4g",
                    gen, entry["size"], entry["best"], entry["hypervolume"])
        if on_generation is not None:
            on_generation(gen, archive, runner.trials)

    n0 = min(config.population, config.budget)
    population = runner.evaluate_generation([space.sample(rng) for _ in range(n0)], 0)
    finish_generation(0, population)
    assign_rank_and_crowding(population)
    generation = 0
    while len(runner.trials) < config.budget:
        generation += 1
        n_off = min(config.population, config.budget - len(runner.trials))
        children = []
        while len(children) < n_off:
            a = binary_tournament(population, rng)
            b = binary_tournament(population, rng)
            if rng.random() < config.crossover_prob:
                c1, c2 = space.crossover(a.genome, b.genome, rng)
            else:
                c1, c2 = a.genome, b.genome
            children.append(space.mutate(c1, config.mutation_rate, rng))
            if len(children) < n_off:
                children.append(space.mutate(c2, config.mutation_rate, rng))
        offspring = runner.evaluate_generation(children, generation)
        population = environmental_selection(population + offspring, config.population)
        finish_generation(generation, offspring)
    return SearchResult(archive, runner.trials, population, generation + 1)


def random_baseline(evaluator, n, seed, space=None):
    """Objectives of ``n`` independently sampled genomes (the search's null model)."""
    space = space or ArchitectureSpace()
    rng = np.random.default_rng([seed, 0xBA5E])
    out = []
    for _ in range(n):
        g = space.sample(rng)
        objectives, _ = _safe_call(evaluator, g, genome_seed(seed, space.key(g)))
        out.append(objectives)
    return out
