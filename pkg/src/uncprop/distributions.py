"""Probability objects passed between pipeline stages."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from uncprop import rng

LOG_2PI = float(np.log(2.0 * np.pi))
LOGVAR_MIN = -15.0
LOGVAR_MAX = 15.0
PROB_SUM_TOL = 1e-9


def _require_finite(name: str, value) -> None:
    if not np.all(np.isfinite(value)):
        raise ValueError(f"{name} contains non-finite values")


@dataclass(frozen=True)
class SeedSpec:
    """Identifies one counter-based random stream."""

    master_seed: int
    stream_id: int = 0

    def __post_init__(self):
        for name in ("master_seed", "stream_id"):
            v = int(getattr(self, name))
            if not 0 <= v < 2**64:
                raise ValueError(f"{name} must fit in 64 unsigned bits, got {v}")


@dataclass(frozen=True, eq=False)
class DiagGaussianImage:
    """Pixel-wise independent Gaussian over images, variance = exp(log_var)."""

    mean: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64)
        log_var = np.array(self.log_var, dtype=np.float64)
        if mean.shape != log_var.shape:
            raise ValueError(f"shape mismatch: mean {mean.shape} vs log_var {log_var.shape}")
        _require_finite("mean", mean)
        _require_finite("log_var", log_var)
        with np.errstate(over="ignore"):
            var = np.exp(log_var)
        if not (np.all(var > 0) and np.all(np.isfinite(var))):
            raise ValueError("exp(log_var) must be positive and finite")
        mean.flags.writeable = False
        log_var.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "log_var", log_var)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mean.shape

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.log_var)

    @property
    def std(self) -> np.ndarray:
        return np.exp(0.5 * self.log_var)

    def sample(self, seed: SeedSpec) -> np.ndarray:
        return sample_image(self, seed)

    def sample_batch(self, master_seed: int, stream_ids) -> np.ndarray:
        """One sample per stream id, stacked along a new leading axis."""
        streams = np.atleast_1d(np.asarray(stream_ids, dtype=np.uint64))
        eps = rng.standard_normal(master_seed, streams, self.mean.size)
        eps = eps.reshape((streams.size,) + self.shape)
        return self.mean + self.std * eps


@dataclass(frozen=True, eq=False)
class DiscreteImageDist:
    """Finite mixture of point masses over images (used as a brute-force oracle input)."""

    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        atoms = np.array(self.atoms, dtype=np.float64)
        weights = np.array(self.weights, dtype=np.float64)
        if atoms.shape[0] != weights.shape[0] or weights.ndim != 1:
            raise ValueError("need one weight per atom")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > PROB_SUM_TOL:
            raise ValueError("weights must be non-negative and sum to 1")
        _require_finite("atoms", atoms)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", weights)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.atoms.shape[1:]

    def sample_indices(self, master_seed: int, stream_ids) -> np.ndarray:
        streams = np.atleast_1d(np.asarray(stream_ids, dtype=np.uint64))
        u = rng.uniform(master_seed, streams, 1)[:, 0]
        cdf = np.cumsum(self.weights)
        cdf[-1] = 1.0
        return np.searchsorted(cdf, u, side="right")

    def sample(self, seed: SeedSpec) -> np.ndarray:
        return self.sample_batch(seed.master_seed, [seed.stream_id])[0]

    def sample_batch(self, master_seed: int, stream_ids) -> np.ndarray:
        return self.atoms[self.sample_indices(master_seed, stream_ids)]


@dataclass(frozen=True)
class ScalarGaussian:
    mean: float
    log_var: float

    def __post_init__(self):
        _require_finite("mean", self.mean)
        _require_finite("log_var", self.log_var)
        with np.errstate(over="ignore"):
            var = np.exp(self.log_var)
        if not 0.0 < var < np.inf:
            raise ValueError("exp(log_var) must be positive and finite")

    @property
    def var(self) -> float:
        return float(np.exp(self.log_var))


@dataclass(frozen=True, eq=False)
class CategoricalDist:
    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.size < 2:
            raise ValueError("a categorical needs a 1-d vector of at least 2 classes")
        _require_finite("probs", p)
        if np.any(p < 0) or np.any(p > 1) or abs(p.sum() - 1.0) > PROB_SUM_TOL:
            raise ValueError(f"invalid class probabilities {p}")
        p.flags.writeable = False
        object.__setattr__(self, "probs", p)

    @property
    def num_classes(self) -> int:
        return self.probs.size


def sample_image(dist: DiagGaussianImage, seed: SeedSpec) -> np.ndarray:
    """Draw ``mean + std * eps`` using the stream named by ``seed``."""
    return dist.sample_batch(seed.master_seed, [seed.stream_id])[0]


def gaussian_nll(pred: ScalarGaussian, target: float) -> float:
    """Negative log density of ``target`` under ``pred`` (normalizing constant included)."""
    _require_finite("target", target)
    return float(gaussian_nll_array(pred.mean, pred.log_var, target))


def gaussian_nll_array(mean, log_var, target) -> np.ndarray:
    """Elementwise Gaussian NLL, no validation."""
    mean, log_var, target = np.asarray(mean), np.asarray(log_var), np.asarray(target)
    return 0.5 * (LOG_2PI + log_var + (target - mean) ** 2 * np.exp(-log_var))


def image_nll(pred: DiagGaussianImage, target: np.ndarray) -> float:
    """Mean per-pixel Gaussian NLL."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.shape:
        raise ValueError(f"shape mismatch: prediction {pred.shape} vs target {target.shape}")
    _require_finite("target", target)
    return float(np.mean(gaussian_nll_array(pred.mean, pred.log_var, target)))


def clamp_log_var(s):
    return np.clip(s, LOGVAR_MIN, LOGVAR_MAX)
