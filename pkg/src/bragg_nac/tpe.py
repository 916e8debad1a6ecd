"""Tree-structured Parzen estimator for training hyperparameters.

Each dimension gets its own pair of densities: ``l`` from the best
``ceil(gamma * n)`` trials and ``g`` from the rest. Candidates are drawn from
``l`` and the one maximizing ``l(x) / g(x)`` is proposed.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_ndtr, logsumexp

logger = logging.getLogger(__name__)

GAMMA = 0.25
N_STARTUP = 10
N_CANDIDATES = 24
BANDWIDTH_FLOOR = 0.01   # fraction of the (log-)range


@dataclass(frozen=True)
class Uniform:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"need lo < hi, got {self.lo}, {self.hi}")

    @property
    def bounds(self):
        return self.lo, self.hi

    def to_internal(self, v):
        return float(v)

    def from_internal(self, u):
        return float(min(max(u, self.lo), self.hi))

    def sample(self, rng):
        return self.from_internal(rng.uniform(*self.bounds))


@dataclass(frozen=True)
class LogUniform(Uniform):
    def __post_init__(self):
        super().__post_init__()
        if self.lo <= 0:
            raise ValueError("log-uniform needs lo > 0")

    @property
    def bounds(self):
        return math.log(self.lo), math.log(self.hi)

    def to_internal(self, v):
        return math.log(v)

    def from_internal(self, u):
        return float(min(max(math.exp(u), self.lo), self.hi))


@dataclass(frozen=True)
class Categorical:
    options: tuple

    def __post_init__(self):
        if not self.options:
            raise ValueError("categorical needs at least one option")

    def sample(self, rng):
        return self.options[int(rng.integers(len(self.options)))]


@dataclass(frozen=True)
class SearchDomain:
    dims: dict

    def sample(self, rng):
        return {name: dim.sample(rng) for name, dim in self.dims.items()}

    def contains(self, params):
        for name, dim in self.dims.items():
            v = params[name]
            if isinstance(dim, Categorical):
                if v not in dim.options:
                    return False
            elif not dim.lo <= v <= dim.hi:
                return False
        return True

    @property
    def names(self):
        return list(self.dims)


def training_domain():
    """Learning rate, weight decay (with an off switch), schedule and batch size."""
    return SearchDomain({
        "lr": LogUniform(1e-4, 1e-2),
        "weight_decay_off": Categorical((True, False)),
        "weight_decay": LogUniform(1e-6, 1e-3),
        "schedule": Categorical(("constant", "cosine", "step")),
        "batch_size": Categorical((128, 256, 512)),
    })


def resolve_training_params(params):
    """Map a ``training_domain`` point to TrainConfig keyword arguments."""
    out = {"lr": params["lr"], "schedule": params["schedule"],
           "batch_size": int(params["batch_size"])}
    out["weight_decay"] = 0.0 if params.get("weight_decay_off", True) else params["weight_decay"]
    return out


@dataclass
class HpoTrial:
    index: int
    params: dict
    objective: float
    seed: int


# ---------------------------------------------------------------------------
# Parzen estimators

def _bandwidth(values, lo, hi):
    n = len(values)
    std = float(np.std(values)) if n > 1 else 0.0
    return max(std * n ** (-1 / 5), BANDWIDTH_FLOOR * (hi - lo))


class _Continuous:
    """Mixture of Gaussians truncated to ``[lo, hi]``.

    One kernel per observation with a shared Scott's-rule bandwidth, plus a
    broad prior kernel (centered on the range, width = range) weighted like a
    single observation so the estimator never loses sight of the whole domain.
    """

    def __init__(self, values, lo, hi):
        obs = np.asarray(values, dtype=float)
        self.lo, self.hi = lo, hi
        prior = 0.5 * (lo + hi)
        # the prior mean counts as a pseudo-observation for the bandwidth too
        width = _bandwidth(np.append(obs, prior), lo, hi)
        self.mu = np.append(obs, prior)
        self.sigma = np.append(np.full(obs.size, width), hi - lo)
        a = (lo - self.mu) / self.sigma
        b = (hi - self.mu) / self.sigma
        # log of each kernel's mass inside the bounds
        la, lb = log_ndtr(a), log_ndtr(b)
        self.log_mass = lb + np.log1p(-np.exp(np.minimum(la - lb, -1e-12)))

    def sample(self, rng, n):
        out = np.empty(n)
        for i in range(n):
            j = rng.integers(len(self.mu))
            while True:
                x = rng.normal(self.mu[j], self.sigma[j])
                if self.lo <= x <= self.hi:
                    out[i] = x
                    break
        return out

    def logpdf(self, x):
        z = (np.asarray(x)[:, None] - self.mu[None, :]) / self.sigma
        comp = (-0.5 * z ** 2 - np.log(self.sigma * math.sqrt(2 * math.pi)) - self.log_mass)
        return logsumexp(comp, axis=1) - math.log(len(self.mu))


class _Discrete:
    """Laplace-smoothed frequencies: ``(count + 1) / (n + K)``."""

    def __init__(self, indices, k):
        counts = np.bincount(np.asarray(indices, dtype=int), minlength=k).astype(float)
        self.p = (counts + 1.0) / (counts.sum() + k)

    def sample(self, rng, n):
        return rng.choice(len(self.p), size=n, p=self.p)

    def logpdf(self, idx):
        return np.log(self.p[np.asarray(idx, dtype=int)])


def split_history(history, gamma=GAMMA):
    """(good, bad): the ``ceil(gamma * n)`` lowest objectives, ties by trial index."""
    ordered = sorted(history, key=lambda t: (t.objective, t.index))
    n_good = math.ceil(gamma * len(ordered))
    return ordered[:n_good], ordered[n_good:]


def suggest(history, domain, rng, n_startup=N_STARTUP, n_candidates=N_CANDIDATES, gamma=GAMMA):
    """Propose the next parameter point.

    The first ``n_startup`` suggestions are uniform draws from ``rng``; the
    stream is identical to plain random search until then.
    """
    if len(history) < n_startup:
        return domain.sample(rng)
    good, bad = split_history(history, gamma)
    if not bad:
        return domain.sample(rng)
    candidates = {}
    score = np.zeros(n_candidates)
    for name, dim in domain.dims.items():
        if isinstance(dim, Categorical):
            index = {opt: i for i, opt in enumerate(dim.options)}
            k = len(dim.options)
            l_est = _Discrete([index[t.params[name]] for t in good], k)
            g_est = _Discrete([index[t.params[name]] for t in bad], k)
            draw = l_est.sample(rng, n_candidates)
            candidates[name] = [dim.options[i] for i in draw]
        else:
            lo, hi = dim.bounds
            l_est = _Continuous([dim.to_internal(t.params[name]) for t in good], lo, hi)
            g_est = _Continuous([dim.to_internal(t.params[name]) for t in bad], lo, hi)
            draw = l_est.sample(rng, n_candidates)
            candidates[name] = [dim.from_internal(u) for u in draw]
        score += l_est.logpdf(draw) - g_est.logpdf(draw)
    best = int(np.argmax(score))
    return {name: candidates[name][best] for name in domain.dims}


# ---------------------------------------------------------------------------
# optimization loop

@dataclass
class HpoResult:
    best: HpoTrial
    trials: list = field(default_factory=list)

    def best_so_far(self):
        out, best = [], math.inf
        for t in self.trials:
            best = min(best, t.objective)
            out.append(best)
        return out


def run_local_hpo(train_and_score, domain, n_trials=100, seed=0, n_startup=N_STARTUP,
                  n_candidates=N_CANDIDATES, gamma=GAMMA, on_trial=None):
    """Sequential suggest / evaluate / record loop.

    ``train_and_score(params, seed)`` returns the validation objective to
    minimize; exceptions and non-finite values are recorded as infinity.
    Every trial is scored with the same ``seed`` so trials differ only in
    their hyperparameters.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    rng = np.random.default_rng(seed)
    trials = []
    for i in range(n_trials):
        params = suggest(trials, domain, rng, n_startup, n_candidates, gamma)
        try:
            value = float(train_and_score(params, seed))
        except Exception as exc:  # a broken configuration is just a bad trial
            logger.warning("hpo trial %d failed: %s", i, exc)
            value = math.inf
        if not math.isfinite(value):
            value = math.inf
        trial = HpoTrial(i, params, value, seed)
        trials.append(trial)
        logger.info("hpo trial %d: %s -> %.5g", i, params, value)
        if on_trial is not None:
            on_trial(trial)
    best = min(trials, key=lambda t: (t.objective, t.index))
    return HpoResult(best, trials)


def random_search(train_and_score, domain, n_trials=100, seed=0):
    return run_local_hpo(train_and_score, domain, n_trials, seed, n_startup=n_trials)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_table_csv(path, result, domain):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trial", *domain.names, "objective", "seed"])
        for t in result.trials:
            writer.writerow([t.index, *(_fmt(t.params[n]) for n in domain.names),
                             _fmt(t.objective), t.seed])


def write_best_json(path, result, extra=None):
    payload = {"trial": result.best.index, "params": result.best.params,
               "objective": result.best.objective, "seed": result.best.seed}
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
