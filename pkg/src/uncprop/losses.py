"""Training losses and their gradients w.r.t. head outputs.

Every function returns ``(loss, *grads)`` where the loss is averaged over the
batch (and over pixels for images).
"""

from __future__ import annotations

import numpy as np

from uncprop.distributions import LOG_2PI
from uncprop.propagation import PROB_FLOOR


def gaussian_nll_grad(mean, log_var, target):
    """Mean Gaussian NLL over all elements with gradients for mean and log_var."""
    mean, log_var, target = (np.asarray(a, dtype=np.float64) for a in (mean, log_var, target))
    inv_var = np.exp(-log_var)
    r = target - mean
    n = mean.size
    loss = 0.5 * np.sum(LOG_2PI + log_var + r * r * inv_var) / n
    d_mean = -r * inv_var / n
    d_log_var = 0.5 * (1.0 - r * r * inv_var) / n
    return float(loss), d_mean, d_log_var


def cross_entropy_grad(logits, labels):
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -np.mean(log_p[np.arange(n), labels])
    d = np.exp(log_p)
    d[np.arange(n), labels] -= 1.0
    return float(loss), d / n


def joint_regression_nll_grad(y_hat, delta, target):
    """NLL of ``N(mu_hat, var_prop + mu_delta)`` built from ``T`` samples per example.

    ``y_hat`` and ``delta`` have shape ``(B, T)``; ``target`` has shape ``(B,)``.
    """
    y_hat = np.asarray(y_hat, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    b, t = y_hat.shape
    if t < 2:
        raise ValueError("the aggregate needs at least 2 samples per example")
    mu = y_hat.mean(axis=1)
    centered = y_hat - mu[:, None]
    var_prop = np.sum(centered**2, axis=1) / (t - 1)
    big_delta = np.exp(delta)
    var = var_prop + big_delta.mean(axis=1)
    r = target - mu
    loss = 0.5 * np.mean(LOG_2PI + np.log(var) + r * r / var)
    d_var = 0.5 * (1.0 / var - r * r / var**2) / b
    d_mu = -(r / var) / b
    d_y_hat = d_mu[:, None] / t + d_var[:, None] * 2.0 * centered / (t - 1)
    d_delta = d_var[:, None] * big_delta / t
    return float(loss), d_y_hat, d_delta


def joint_classification_nll_grad(logits, labels):
    """Cross-entropy of the sample-averaged class probabilities.

    ``logits`` has shape ``(B, T, C)``; ``labels`` has shape ``(B,)``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    b, t, _ = logits.shape
    z = logits - logits.max(axis=2, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=2, keepdims=True)
    p_y = p[np.arange(b), :, labels]  # (B, T)
    p_bar = np.maximum(p_y.mean(axis=1), PROB_FLOOR)
    loss = -np.mean(np.log(p_bar))
    onehot = np.zeros_like(p)
    onehot[np.arange(b), :, labels] = 1.0
    coef = -(p_y / (t * p_bar[:, None])) / b
    d = coef[:, :, None] * (onehot - p)
    return float(loss), d


def per_sample_regression_nll_grad(y_hat, delta, target):
    """Average of per-sample NLLs; the non-aggregate comparison objective."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    target = np.broadcast_to(np.asarray(target, dtype=np.float64)[:, None], y_hat.shape)
    return gaussian_nll_grad(y_hat, delta, target)


def per_sample_classification_nll_grad(logits, labels):
    logits = np.asarray(logits, dtype=np.float64)
    b, t, c = logits.shape
    loss, d = cross_entropy_grad(logits.reshape(b * t, c), np.repeat(np.asarray(labels), t))
    return loss, d.reshape(b, t, c)
