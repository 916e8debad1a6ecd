"""scikit-learn style wrappers around the training engine and the searches.

>>> from bragg_nac.data import generate_dataset
>>> ds = generate_dataset(2000, seed=0)
>>> X, y = ds.subset("train")
>>> reg = PeakRegressor(epochs=5).fit(X, 11 * y)       # y in pixels
>>> reg.predict(X[:3]).shape
(3, 2)
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.model_selection import train_test_split
from sklearn.utils.validation import check_is_fitted

from . import archspace, compress, evolution
from .costmodel import QuantSparsityConfig, cost, network_sparsity, param_count
from .data import PATCH
from .engine.training import TrainConfig, evaluate, train


def _as_patches(X):
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 2 and X.shape[1] == PATCH * PATCH:
        X = X.reshape(-1, 1, PATCH, PATCH)
    elif X.ndim == 3 and X.shape[1:] == (PATCH, PATCH):
        X = X[:, None]
    if X.ndim != 4 or X.shape[1:] != (1, PATCH, PATCH):
        raise ValueError(f"expected patches of shape (n, 1, {PATCH}, {PATCH}), (n, {PATCH}, "
                         f"{PATCH}) or (n, {PATCH * PATCH}); got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("patches contain NaN or infinity")
    return X


def _as_targets(y, n):
    y = np.asarray(y, dtype=np.float32)
    if y.shape != (n, 2):
        raise ValueError(f"expected targets of shape ({n}, 2), got {y.shape}")
    return y


def _resolve_architecture(architecture):
    if isinstance(architecture, archspace.ArchitectureSpec):
        return architecture
    if isinstance(architecture, archspace.Genome):
        return archspace.decode(architecture)
    if architecture == "nac_base":
        return archspace.builtin_nac_base()
    if architecture == "braggnn":
        return archspace.builtin_braggnn()
    raise ValueError(f"unknown architecture {architecture!r}")


class PeakRegressor(RegressorMixin, BaseEstimator):
    """Regress peak centers (row, col in pixels) from 11x11 patches.

    ``architecture`` is ``"nac_base"``, ``"braggnn"``, a Genome or an
    ArchitectureSpec. ``score`` is the usual R^2; ``mean_distance`` gives the
    mean Euclidean error in pixels.
    """

    def __init__(self, architecture="nac_base", lr=3e-3, weight_decay=0.0, schedule="cosine",
                 epochs=100, batch_size=128, random_state=0):
        self.architecture = architecture
        self.lr = lr
        self.weight_decay = weight_decay
        self.schedule = schedule
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state

    def _train_config(self, **overrides):
        params = dict(lr=self.lr, weight_decay=self.weight_decay, schedule=self.schedule,
                      epochs=self.epochs, batch_size=self.batch_size,
                      seed=int(self.random_state or 0))
        params.update(overrides)
        return TrainConfig(**params)

    def fit(self, X, y):
        X = _as_patches(X)
        y = _as_targets(y, len(X))
        self.spec_ = _resolve_architecture(self.architecture)
        self.network_ = self.spec_.build(seed=int(self.random_state or 0))
        result = train(self.network_, X, y / PATCH, self._train_config())
        if result.failed:
            raise RuntimeError("training diverged; lower the learning rate")
        self.history_ = result.history
        self.n_features_in_ = PATCH * PATCH
        return self

    def predict(self, X):
        check_is_fitted(self, "network_")
        return self.network_.predict(_as_patches(X)).astype(np.float64) * PATCH

    def mean_distance(self, X, y):
        check_is_fitted(self, "network_")
        X = _as_patches(X)
        return evaluate(self.network_, X, _as_targets(y, len(X)) / PATCH).mean_distance

    def compress(self, X, y, X_val, y_val, bits=7, n_iterations=8, epochs=30, lr=None):
        """Prune and quantize the fitted network in place; returns the trajectory."""
        check_is_fitted(self, "network_")
        X, X_val = _as_patches(X), _as_patches(X_val)
        config = compress.CompressConfig(
            bits=bits, n_iterations=n_iterations, epochs=epochs,
            lr=lr if lr is not None else max(self.lr / 10, 1e-5), weight_decay=self.weight_decay,
            schedule=self.schedule, batch_size=self.batch_size, seed=int(self.random_state or 0))
        _, traj = compress.iterative_compress(
            self.network_, self.spec_, (X, _as_targets(y, len(X)) / PATCH),
            (X_val, _as_targets(y_val, len(X_val)) / PATCH), config)
        self.trajectory_ = traj
        return traj

    @property
    def mbops_(self):
        check_is_fitted(self, "network_")
        bits = {l.quant_bits for l in self.network_.weighted_layers().values()} - {None}
        config = QuantSparsityConfig(weight_bits=bits.pop() if len(bits) == 1 else 32,
                                     sparsity=network_sparsity(self.network_))
        return cost(self.spec_, config).mbops

    @property
    def n_parameters_(self):
        check_is_fitted(self, "network_")
        return param_count(self.spec_).total


class ArchitectureSearch(BaseEstimator):
    """NSGA-II over the architecture space, minimizing (distance, MBOPs).

    After ``fit``: ``archive_`` holds the final Pareto archive, ``trials_``
    every evaluated candidate and ``pareto_front_`` the archive as
    ``(genome, mean_distance_px, mbops)`` tuples sorted by distance.
    """

    def __init__(self, population=20, budget=200, epochs=50, lr=1e-3, batch_size=128,
                 crossover_prob=0.9, mutation_rate=0.1, validation_fraction=0.125,
                 workers=1, random_state=0, log_path=None):
        self.population = population
        self.budget = budget
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.crossover_prob = crossover_prob
        self.mutation_rate = mutation_rate
        self.validation_fraction = validation_fraction
        self.workers = workers
        self.random_state = random_state
        self.log_path = log_path

    def fit(self, X, y, X_val=None, y_val=None):
        X = _as_patches(X)
        y = _as_targets(y, len(X)) / PATCH
        if X_val is None:
            X, X_val, y, y_val = train_test_split(X, y, test_size=self.validation_fraction,
                                                  random_state=self.random_state)
        else:
            X_val = _as_patches(X_val)
            y_val = _as_targets(y_val, len(X_val)) / PATCH
        evaluator = evolution.PartialTrainingEvaluator((X, y), (X_val, y_val), epochs=self.epochs,
                                                       lr=self.lr, batch_size=self.batch_size)
        config = evolution.SearchConfig(population=self.population, budget=self.budget,
                                        crossover_prob=self.crossover_prob,
                                        mutation_rate=self.mutation_rate,
                                        seed=int(self.random_state or 0), workers=self.workers,
                                        epochs=self.epochs)
        result = evolution.run_global_search(config, evaluator, log_path=self.log_path,
                                             resume=False)
        self.archive_ = result.archive
        self.trials_ = result.trials
        self.pareto_front_ = sorted(((m.genome, *m.objectives) for m in result.archive),
                                    key=lambda t: (t[1], t[2]))
        return self

    def best_genome(self, rule="knee"):
        check_is_fitted(self, "archive_")
        from .pipeline import select_genome
        return select_genome(self.archive_, rule)
