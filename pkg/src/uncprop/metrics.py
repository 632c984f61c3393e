"""Image-quality and task metrics, and dataset-level aggregation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from uncprop.distributions import CategoricalDist


@dataclass(frozen=True)
class SsimParams:
    window: int = 7
    k1: float = 0.01
    k2: float = 0.03
    # None -> max - min of the reference image (second argument)
    dynamic_range: float | None = None

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("window must be an odd integer >= 3")
        if not (0 < self.k1 < 0.2 and 0 < self.k2 < 0.2):
            raise ValueError("k1 and k2 must lie in (0, 0.2)")
        if self.dynamic_range is not None and not self.dynamic_range > 0:
            raise ValueError("dynamic_range must be positive")


def gaussian_window(size: int) -> np.ndarray:
    sigma = size / 6.0
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    w = np.outer(g, g)
    return w / w.sum()


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"ssim needs two 2-d images of equal shape, got {a.shape} and {b.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("ssim inputs must be finite")
    return a, b


def _constants(b: np.ndarray, p: SsimParams) -> tuple[float, float]:
    L = p.dynamic_range if p.dynamic_range is not None else float(b.max() - b.min())
    if not L > 0:
        raise ValueError("dynamic range must be positive (reference image is constant)")
    return (p.k1 * L) ** 2, (p.k2 * L) ** 2


def ssim_map(a, b, p: SsimParams = SsimParams()) -> np.ndarray:
    """Local SSIM over every fully contained window position."""
    a, b = _check_pair(a, b)
    if min(a.shape) < p.window:
        raise ValueError("image smaller than the SSIM window")
    c1, c2 = _constants(b, p)
    w = gaussian_window(p.window)

    def filt(img):
        return np.einsum("ijkl,kl->ij", sliding_window_view(img, w.shape), w)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, p: SsimParams = SsimParams()) -> float:
    return float(np.mean(ssim_map(a, b, p)))


def l1_l2(preds, targets) -> tuple[float, float]:
    """Mean absolute error and root-mean-square error."""
    preds = np.atleast_1d(np.asarray(preds, dtype=np.float64))
    targets = np.atleast_1d(np.asarray(targets, dtype=np.float64))
    if preds.shape != targets.shape or preds.size == 0:
        raise ValueError("preds and targets must be non-empty and of equal shape")
    if not (np.all(np.isfinite(preds)) and np.all(np.isfinite(targets))):
        raise ValueError("non-finite values")
    err = preds - targets
    return float(np.mean(np.abs(err))), float(np.sqrt(np.mean(err**2)))


def predicted_class(probs) -> int:
    # np.argmax returns the first maximum, i.e. ties go to the lowest index
    if isinstance(probs, CategoricalDist):
        probs = probs.probs
    return int(np.argmax(np.asarray(probs)))


def accuracy(preds: Sequence, labels: Sequence[int]) -> float:
    if len(preds) == 0:
        raise ValueError("accuracy of an empty set is undefined")
    if len(preds) != len(labels):
        raise ValueError("preds and labels differ in length")
    hits = sum(predicted_class(p) == int(y) for p, y in zip(preds, labels))
    return hits / len(preds)


def aggregate_uncertainty(
    rows: Iterable[Mapping[str, float]],
    variance_keys: Sequence[str] = (),
) -> dict[str, float]:
    """Column means over rows; variance columns become sqrt(mean(variance)).

    Keys listed in ``variance_keys`` are reported under ``"sqrt_" + key``.
    """
    rows = list(rows)
    if not rows:
        raise ValueError("cannot aggregate an empty set of rows")
    out = {}
    for key in rows[0]:
        m = float(np.mean([r[key] for r in rows]))
        if key in variance_keys:
            out["sqrt_" + key] = float(np.sqrt(m))
        else:
            out[key] = m
    return out
