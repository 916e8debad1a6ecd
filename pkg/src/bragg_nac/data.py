"""Synthetic Bragg-peak patches from 2D pseudo-Voigt profiles.

Coordinates: pixel ``(i, j)`` has its center at ``(i, j)``, so an 11x11
patch spans ``[0, 10]`` and its midpoint is ``(5, 5)``. Labels are centers
divided by the patch size, which keeps them inside ``[0, 1]``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

PATCH = 11
MIDPOINT = (PATCH - 1) / 2.0
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)
TRAIN, VAL, TEST = 0, 1, 2
SPLIT_NAMES = {"train": TRAIN, "val": VAL, "test": TEST}
CHUNK = 1024

MAGIC = b"NACD"
VERSION = 1


@dataclass(frozen=True)
class PeakParams:
    row: float
    col: float
    sigma_row: float
    sigma_col: float
    eta: float
    amplitude: float
    background: float = 0.0

    def as_array(self):
        return np.array([self.row, self.col, self.sigma_row, self.sigma_col,
                         self.eta, self.amplitude, self.background])


def pseudo_voigt_2d(params, size=PATCH):
    """Evaluate the profile on a ``size x size`` grid of pixel centers.

    ``params`` is a :class:`PeakParams` or an ``(N, 7)`` array of
    ``(row, col, sigma_row, sigma_col, eta, amplitude, background)``; the
    result is ``(size, size)`` or ``(N, size, size)`` accordingly.
    """
    single = isinstance(params, PeakParams)
    p = np.atleast_2d(params.as_array() if single else np.asarray(params, dtype=np.float64))
    r0, c0, sr, sc, eta, amp, bg = (p[:, i, None, None] for i in range(7))
    grid = np.arange(size, dtype=np.float64)
    dr2 = ((grid[None, :, None] - r0) / sr) ** 2
    dc2 = ((grid[None, None, :] - c0) / sc) ** 2
    gauss = np.exp(-0.5 * (dr2 + dc2))
    lorentz = 1.0 / (1.0 + dr2 + dc2)
    out = bg + amp * (eta * lorentz + (1.0 - eta) * gauss)
    return out[0] if single else out


@dataclass(frozen=True)
class DataConfig:
    noise_level: float = 0.0
    center_box: float = 1.0          # centers uniform in midpoint +/- center_box
    sigma_range: tuple = (0.7, 2.0)
    eta_range: tuple = (0.0, 1.0)
    amplitude_range: tuple = (50.0, 500.0)
    background_range: tuple = (0.0, 10.0)

    def __post_init__(self):
        if self.noise_level < 0:
            raise ValueError("noise_level must be non-negative")
        if not 0 <= self.center_box < MIDPOINT:
            raise ValueError(f"center_box must lie in [0, {MIDPOINT})")
        for name in ("sigma_range", "eta_range", "amplitude_range", "background_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: lower bound {lo} exceeds upper bound {hi}")
        if self.sigma_range[0] <= 0 or self.amplitude_range[0] <= 0:
            raise ValueError("sigma and amplitude ranges must be positive")
        if not (0 <= self.eta_range[0] and self.eta_range[1] <= 1):
            raise ValueError("eta_range must lie within [0, 1]")
        if self.background_range[0] < 0:
            raise ValueError("background_range must be non-negative")


@dataclass
class PeakDataset:
    patches: np.ndarray          # (N, 1, 11, 11) float32 in [0, 1]
    labels: np.ndarray           # (N, 2) float32, center / 11
    split: np.ndarray            # (N,) uint8: 0 train, 1 val, 2 test
    params: np.ndarray | None = field(default=None, repr=False)  # (N, 7) true params

    def __len__(self):
        return len(self.labels)

    def subset(self, name):
        """``(patches, labels)`` for ``"train"``, ``"val"`` or ``"test"``."""
        mask = self.split == SPLIT_NAMES[name]
        return self.patches[mask], self.labels[mask]

    @property
    def train(self):
        return self.subset("train")

    @property
    def val(self):
        return self.subset("val")

    @property
    def test(self):
        return self.subset("test")

    def centers(self, name=None):
        labels = self.labels if name is None else self.subset(name)[1]
        return denormalize(labels)

    # persistence -----------------------------------------------------------
    def to_bytes(self):
        n = len(self)
        records = np.concatenate(
            [self.patches.reshape(n, -1), self.labels.reshape(n, 2)], axis=1
        ).astype("<f4")
        header = MAGIC + struct.pack("<II", VERSION, n)
        return header + self.split.astype(np.uint8).tobytes() + records.tobytes()

    @classmethod
    def from_bytes(cls, raw):
        if raw[:4] != MAGIC:
            raise ValueError("not a NACD dataset file (bad magic)")
        version, n = struct.unpack("<II", raw[4:12])
        if version != VERSION:
            raise ValueError(f"unsupported dataset version {version}")
        split = np.frombuffer(raw, dtype=np.uint8, count=n, offset=12).copy()
        width = PATCH * PATCH + 2
        expected = 12 + n + 4 * n * width
        if len(raw) != expected:
            raise ValueError(f"dataset file has {len(raw)} bytes, expected {expected}")
        rec = np.frombuffer(raw, dtype="<f4", count=n * width, offset=12 + n).reshape(n, width)
        patches = rec[:, :PATCH * PATCH].reshape(n, 1, PATCH, PATCH).astype(np.float32)
        labels = rec[:, PATCH * PATCH:].astype(np.float32)
        return cls(patches, labels, split)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def normalize(centers):
    return np.asarray(centers, dtype=np.float64) / PATCH


def denormalize(labels):
    return np.asarray(labels, dtype=np.float64) * PATCH


def split_sizes(n):
    """(train, val, test) sizes: floor for val/test, remainder to train."""
    n_val = int(np.floor(SPLIT_FRACTIONS[1] * n))
    n_test = int(np.floor(SPLIT_FRACTIONS[2] * n))
    return n - n_val - n_test, n_val, n_test


def assign_splits(n, seed):
    n_train, n_val, _ = split_sizes(n)
    order = np.random.default_rng([seed, 0x5B117]).permutation(n)
    split = np.full(n, TEST, dtype=np.uint8)
    split[order[:n_train]] = TRAIN
    split[order[n_train:n_train + n_val]] = VAL
    return split


def sample_params(config, n, rng):
    lo_c, hi_c = MIDPOINT - config.center_box, MIDPOINT + config.center_box
    return np.column_stack([
        rng.uniform(lo_c, hi_c, n),
        rng.uniform(lo_c, hi_c, n),
        rng.uniform(*config.sigma_range, n),
        rng.uniform(*config.sigma_range, n),
        rng.uniform(*config.eta_range, n),
        rng.uniform(*config.amplitude_range, n),
        rng.uniform(*config.background_range, n),
    ])


def minmax(patches):
    lo = patches.min(axis=(-2, -1), keepdims=True)
    hi = patches.max(axis=(-2, -1), keepdims=True)
    span = np.where(hi > lo, hi - lo, 1.0)
    return (patches - lo) / span


def _generate_chunk(config, seed, chunk, count):
    rng = np.random.default_rng([seed, chunk])
    params = sample_params(config, count, rng)
    clean = pseudo_voigt_2d(params)
    if config.noise_level > 0:
        std = config.noise_level * np.sqrt(np.maximum(clean, 1.0))
        clean = clean + std * rng.standard_normal(clean.shape)
    return minmax(clean), params


def generate_dataset(n, seed=0, config=None, **overrides):
    """Generate ``n`` labelled patches with a deterministic 80/10/10 split.

    Samples are produced in fixed chunks of 1024, each with its own seed
    derived from ``(seed, chunk index)``, so the result does not depend on how
    generation is parallelized.
    """
    if config is None:
        config = DataConfig(**overrides)
    elif overrides:
        raise TypeError("pass either config or keyword overrides, not both")
    if n < 10:
        raise ValueError(f"need at least 10 samples, got {n}")
    patches, params = [], []
    for chunk, start in enumerate(range(0, n, CHUNK)):
        p, q = _generate_chunk(config, seed, chunk, min(CHUNK, n - start))
        patches.append(p)
        params.append(q)
    patches = np.concatenate(patches).astype(np.float32)[:, None]
    params = np.concatenate(params)
    labels = normalize(params[:, :2]).astype(np.float32)
    return PeakDataset(patches, labels, assign_splits(n, seed), params)


# ---------------------------------------------------------------------------
# classical baselines

def center_of_mass(patch):
    """Intensity-weighted mean pixel coordinate ``(row, col)``."""
    p = np.asarray(patch, dtype=np.float64).reshape(PATCH, PATCH) if np.size(patch) == PATCH * PATCH \
        else np.asarray(patch, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("center_of_mass needs a non-negative patch")
    total = p.sum()
    if total <= 0:
        raise ValueError("center_of_mass of an all-zero patch is undefined")
    rows, cols = np.indices(p.shape)
    return np.array([(rows * p).sum() / total, (cols * p).sum() / total])


def center_of_mass_batch(patches):
    p = np.asarray(patches, dtype=np.float64).reshape(len(patches), PATCH, PATCH)
    total = p.sum(axis=(1, 2))
    if np.any(total <= 0):
        raise ValueError("center_of_mass of an all-zero patch is undefined")
    grid = np.arange(PATCH)
    rows = (p.sum(axis=2) @ grid) / total
    cols = (p.sum(axis=1) @ grid) / total
    return np.column_stack([rows, cols])


@dataclass(frozen=True)
class FitResult:
    center: np.ndarray
    rms_residual: float
    converged: bool
    params: PeakParams
    n_evaluations: int


FIT_MAX_EVALS = 2000
FIT_RESIDUAL_THRESHOLD = 0.05


def _profile_design(theta, grid):
    r0, c0, sr, sc, eta = theta
    sr, sc = abs(sr) + 1e-6, abs(sc) + 1e-6
    eta = min(max(eta, 0.0), 1.0)
    dr2 = ((grid[:, None] - r0) / sr) ** 2
    dc2 = ((grid[None, :] - c0) / sc) ** 2
    return eta / (1.0 + dr2 + dc2) + (1.0 - eta) * np.exp(-0.5 * (dr2 + dc2))


def _linear_fit(shape, y):
    """Best ``amplitude * shape + background`` in least squares; returns (A, B, sse)."""
    s = shape.ravel()
    n = s.size
    ss, sy, s1 = s @ s, s @ y, s.sum()
    y1 = y.sum()
    det = n * ss - s1 * s1
    if det <= 1e-12:
        return 0.0, y1 / n, float(((y - y1 / n) ** 2).sum())
    amp = (n * sy - s1 * y1) / det
    bg = (y1 - amp * s1) / n
    r = y - (amp * s + bg)
    return amp, bg, float(r @ r)


def fit_pseudo_voigt(patch, max_evals=FIT_MAX_EVALS, threshold=FIT_RESIDUAL_THRESHOLD):
    """Least-squares pseudo-Voigt fit of one patch.

    Amplitude and background are solved in closed form for every shape, and
    Nelder-Mead searches center, widths and mixing, starting from the
    center of mass and second moments. A fit whose RMS residual exceeds
    ``threshold`` (in units of the patch range) is flagged as not converged.
    """
    p = np.asarray(patch, dtype=np.float64).reshape(PATCH, PATCH)
    span = p.max() - p.min()
    if span <= 0:
        raise ValueError("cannot fit a constant patch")
    y = ((p - p.min()) / span).ravel()
    grid = np.arange(PATCH, dtype=np.float64)

    w = y.reshape(PATCH, PATCH)
    r0, c0 = center_of_mass(w)
    rows, cols = np.indices(w.shape)
    total = w.sum()
    sr = np.sqrt(max(((rows - r0) ** 2 * w).sum() / total, 0.25))
    sc = np.sqrt(max(((cols - c0) ** 2 * w).sum() / total, 0.25))
    x0 = np.array([r0, c0, min(sr, 3.0), min(sc, 3.0), 0.5])

    def sse(theta):
        return _linear_fit(_profile_design(theta, grid), y)[2]

    res = minimize(sse, x0, method="Nelder-Mead",
                   options={"maxfev": max_evals, "xatol": 1e-6, "fatol": 1e-12})
    theta = res.x
    amp, bg, err = _linear_fit(_profile_design(theta, grid), y)
    rms = float(np.sqrt(err / y.size))
    params = PeakParams(float(theta[0]), float(theta[1]), float(abs(theta[2])),
                        float(abs(theta[3])), float(np.clip(theta[4], 0, 1)),
                        float(amp * span), float(bg * span + p.min()))
    return FitResult(np.array(theta[:2]), rms, rms <= threshold, params, int(res.nfev))
