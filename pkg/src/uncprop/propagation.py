"""Monte Carlo marginalization of an upstream image distribution through a downstream model.

The downstream model ``f`` is any callable taking one image and returning a
:class:`ScalarGaussian` (regression) or a :class:`CategoricalDist`
(classification). Models that can evaluate many images at once may expose
``predict_batch(images)`` returning ``(means, log_vars)`` for regression or a
``(T, C)`` probability array for classification; it is used when present.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from uncprop.distributions import (
    PROB_SUM_TOL,
    CategoricalDist,
    ScalarGaussian,
    SeedSpec,
)

PROB_FLOOR = 1e-12
# Fixed chunking keeps per-chunk batch shapes independent of the thread count.
CHUNK = 64

DownstreamFn = Callable[[np.ndarray], "ScalarGaussian | CategoricalDist"]


@dataclass(frozen=True)
class McConfig:
    num_samples: int = 256
    seed: SeedSpec = SeedSpec(0, 0)
    threads: int = 1

    def __post_init__(self):
        if int(self.num_samples) < 1:
            raise ValueError("num_samples must be positive")
        if int(self.threads) < 1:
            raise ValueError("threads must be positive")


@dataclass(frozen=True)
class RegressionJoint:
    mu_hat: float
    var_prop: float
    mu_delta: float
    var_joint: float

    def __post_init__(self):
        vals = (self.mu_hat, self.var_prop, self.mu_delta, self.var_joint)
        if not all(np.isfinite(v) for v in vals):
            raise FloatingPointError(f"non-finite regression joint {vals}")
        if self.var_prop < 0 or self.mu_delta < 0:
            raise ValueError("variance components must be non-negative")

    @property
    def std_joint(self) -> float:
        return float(np.sqrt(self.var_joint))


@dataclass(frozen=True)
class ClassificationJoint:
    mean_probs: CategoricalDist
    entropy: float
    cond_entropy: float
    mutual_info: float


def entropy(probs: np.ndarray, axis: int = -1) -> np.ndarray:
    """Shannon entropy in nats with 0 log 0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    logp = np.log(np.maximum(p, PROB_FLOOR))
    return -np.sum(np.where(p > 0, p * logp, 0.0), axis=axis)


# -- sample generation / downstream evaluation --------------------------------------------


def draw_samples(upstream, cfg: McConfig) -> np.ndarray:
    """``T`` samples; sample ``t`` comes from stream ``t`` of ``cfg.seed.master_seed``."""
    return upstream.sample_batch(cfg.seed.master_seed, np.arange(cfg.num_samples))


def _eval_chunk(f, xs: np.ndarray, task: str):
    if hasattr(f, "predict_batch"):
        out = f.predict_batch(xs)
        if task == "regression":
            means, log_vars = out
            return np.asarray(means, dtype=np.float64), np.asarray(log_vars, dtype=np.float64)
        return np.asarray(out, dtype=np.float64)
    outs = [f(x) for x in xs]
    if task == "regression":
        if not all(isinstance(o, ScalarGaussian) for o in outs):
            raise TypeError("regression downstream must return ScalarGaussian")
        return (np.array([o.mean for o in outs], dtype=np.float64),
                np.array([o.log_var for o in outs], dtype=np.float64))
    if not all(isinstance(o, CategoricalDist) for o in outs):
        raise TypeError("classification downstream must return CategoricalDist")
    sizes = {o.num_classes for o in outs}
    if len(sizes) != 1:
        raise ValueError(f"inconsistent class counts across samples: {sorted(sizes)}")
    return np.stack([o.probs for o in outs])


def evaluate_downstream(f, xs: np.ndarray, task: str, threads: int = 1):
    """Apply ``f`` to every sample; results are concatenated in index order."""
    chunks = [xs[i:i + CHUNK] for i in range(0, len(xs), CHUNK)]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda c: _eval_chunk(f, c, task), chunks))
    else:
        parts = [_eval_chunk(f, c, task) for c in chunks]
    if task == "regression":
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])
    return np.concatenate(parts)


# -- aggregation -----------------------------------------------------------------------------


def aggregate_regression(y_hat: np.ndarray, delta: np.ndarray) -> RegressionJoint:
    """Combine per-sample ``(y_hat_t, delta_t)`` with ``Delta_t = exp(delta_t)``."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if y_hat.ndim != 1 or y_hat.shape != delta.shape:
        raise ValueError("y_hat and delta must be 1-d arrays of equal length")
    if y_hat.size < 2:
        raise ValueError("regression aggregation needs at least 2 samples")
    if not (np.all(np.isfinite(y_hat)) and np.all(np.isfinite(delta))):
        raise FloatingPointError("non-finite downstream output")
    mu_hat = float(np.mean(y_hat))
    var_prop = float(np.var(y_hat, ddof=1))
    mu_delta = float(np.mean(np.exp(delta)))
    return RegressionJoint(mu_hat, var_prop, mu_delta, var_prop + mu_delta)


def aggregate_classification(probs: np.ndarray) -> ClassificationJoint:
    """Combine a ``(T, C)`` array of per-sample class probabilities."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[1] < 2 or probs.shape[0] < 1:
        raise ValueError("expected a (T, C) probability array with C >= 2")
    if not np.all(np.isfinite(probs)):
        raise FloatingPointError("non-finite downstream output")
    if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > PROB_SUM_TOL):
        raise ValueError("invalid categorical in downstream output")
    mean_probs = probs.mean(axis=0)
    mean_probs = mean_probs / mean_probs.sum()
    h = float(entropy(mean_probs))
    cond = float(np.mean(entropy(probs, axis=1)))
    return ClassificationJoint(CategoricalDist(mean_probs), h, cond, h - cond)


def prediction_delta_covariance(y_hat: np.ndarray, delta: np.ndarray) -> float:
    """Sample covariance of ``y_hat_t`` and ``exp(delta_t)``; diagnostic only."""
    return float(np.cov(np.asarray(y_hat), np.exp(np.asarray(delta)), ddof=1)[0, 1])


# -- public entry points ---------------------------------------------------------------------


def propagate_regression(upstream, f, cfg: McConfig) -> RegressionJoint:
    if cfg.num_samples < 2:
        raise ValueError("regression propagation needs num_samples >= 2")
    xs = draw_samples(upstream, cfg)
    y_hat, delta = evaluate_downstream(f, xs, "regression", cfg.threads)
    return aggregate_regression(y_hat, delta)


def propagate_classification(upstream, f, cfg: McConfig) -> ClassificationJoint:
    xs = draw_samples(upstream, cfg)
    return aggregate_classification(evaluate_downstream(f, xs, "classification", cfg.threads))


def marginal_oracle_discrete(support: Sequence[tuple[np.ndarray, float]], f):
    """Exact mixture statistics for an upstream with finitely many atoms.

    Returns a :class:`RegressionJoint` (``var_prop`` is the exact ``Var[E[y|x]]``)
    or a :class:`ClassificationJoint` depending on what ``f`` returns.
    """
    if not 1 <= len(support) <= 64:
        raise ValueError("support must have between 1 and 64 atoms")
    w = np.array([float(wt) for _, wt in support])
    if np.any(w < 0) or abs(w.sum() - 1.0) > PROB_SUM_TOL:
        raise ValueError("weights must be non-negative and sum to 1")
    outs = [f(np.asarray(x, dtype=np.float64)) for x, _ in support]
    if all(isinstance(o, ScalarGaussian) for o in outs):
        means = np.array([o.mean for o in outs])
        mu = float(w @ means)
        var_mean = float(w @ (means - mu) ** 2)
        e_delta = float(w @ np.array([o.var for o in outs]))
        return RegressionJoint(mu, var_mean, e_delta, var_mean + e_delta)
    if all(isinstance(o, CategoricalDist) for o in outs):
        if len({o.num_classes for o in outs}) != 1:
            raise ValueError("inconsistent class counts across atoms")
        p = np.stack([o.probs for o in outs])
        mix = w @ p
        mix = mix / mix.sum()
        h = float(entropy(mix))
        cond = float(w @ entropy(p, axis=1))
        return ClassificationJoint(CategoricalDist(mix), h, cond, h - cond)
    raise TypeError("downstream must return ScalarGaussian or CategoricalDist")
