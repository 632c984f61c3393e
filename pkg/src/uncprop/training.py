"""Heteroscedastic training loops for the upstream and downstream networks."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, fields
from typing import Callable

import numpy as np

from uncprop import losses, rng
from uncprop.distributions import LOGVAR_MIN
from uncprop.models import Mlp, MlpSpec

log = logging.getLogger(__name__)

OBJECTIVES = ("aggregate", "per_sample")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 50
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    mc_samples_train: int = 8
    mc_samples_eval: int = 256
    objective: str = "aggregate"
    seed: int = 0

    def __post_init__(self):
        if not (self.lr > 0 and self.batch_size > 0 and self.epochs > 0):
            raise ValueError("lr, batch_size and epochs must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError("invalid Adam hyperparameters")
        if self.mc_samples_train < 2 or self.mc_samples_eval < 2:
            raise ValueError("Monte Carlo sample counts must be at least 2")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return params - self.lr * grad


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return Sgd(cfg.lr)
    return Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)


def _check(loss: float, where: str) -> None:
    if not np.isfinite(loss):
        raise FloatingPointError(f"training diverged: loss is {loss} at {where}")


def _fit(model: Mlp, n: int, cfg: TrainConfig, loss_and_grad: Callable, val_loss: Callable | None):
    """Generic minibatch loop. ``loss_and_grad(idx, epoch, params)`` -> (loss, grad)."""
    if n == 0:
        raise ValueError("empty training set")
    opt = make_optimizer(cfg)
    history = []

    def full_loss(epoch):
        return float(np.mean([loss_and_grad(np.arange(i, min(i + cfg.batch_size, n)), epoch, None)[0]
                              for i in range(0, n, cfg.batch_size)]))

    t0 = time.perf_counter()
    initial = full_loss(0)
    _check(initial, "initialization")
    history.append({"epoch": 0, "train_nll": initial,
                    "val_nll": val_loss() if val_loss else float("nan"), "wall_ms": 0.0})
    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng(rng.derive_seed("shuffle", cfg.seed, epoch)).permutation(n)
        batch_losses = []
        for i in range(0, n, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            loss, grad = loss_and_grad(idx, epoch, model.params)
            _check(loss, f"epoch {epoch}, batch starting at {i}")
            model.params = opt.step(model.params, grad)
            batch_losses.append(loss)
        row = {
            "epoch": epoch,
            "train_nll": float(np.mean(batch_losses)),
            "val_nll": val_loss() if val_loss else float("nan"),
            "wall_ms": (time.perf_counter() - t0) * 1000.0,
        }
        history.append(row)
        log.debug("epoch %d train_nll %.5f val_nll %.5f", epoch, row["train_nll"], row["val_nll"])
    return history


# -- upstream -------------------------------------------------------------------------------------


def image_loss_and_grad(model: Mlp, x: np.ndarray, target: np.ndarray, params=None):
    raw, cache = model.forward_raw(x, params)
    mean, log_var = model.head_outputs(raw, cache.inputs)
    loss, d_mean, d_lv = losses.gaussian_nll_grad(mean, log_var, target.reshape(mean.shape))
    return loss, model.backward_raw(cache, model.head_backward(raw, d_mean, d_lv), params)


def train_upstream(inputs, targets, spec: MlpSpec, cfg: TrainConfig, val=None, model: Mlp | None = None):
    """Fit an image-head network by mean per-pixel Gaussian NLL.

    ``inputs`` is ``(N, in_dim)``, ``targets`` is ``(N, out_dim)`` (or images).
    Returns ``(model, history)``.
    """
    if spec.head != "image":
        raise ValueError("the upstream model needs an image head")
    inputs = np.asarray(inputs, dtype=np.float64).reshape(len(inputs), -1)
    targets = np.asarray(targets, dtype=np.float64).reshape(len(targets), -1)
    if len(inputs) != len(targets):
        raise ValueError("inputs and targets differ in length")
    model = model or Mlp(spec, seed=rng.derive_seed("init", cfg.seed))

    def lg(idx, epoch, params):
        return image_loss_and_grad(model, inputs[idx], targets[idx], params)

    val_fn = None
    if val is not None:
        vx = np.asarray(val[0], dtype=np.float64).reshape(len(val[0]), -1)
        vy = np.asarray(val[1], dtype=np.float64).reshape(len(val[1]), -1)
        val_fn = lambda: image_loss_and_grad(model, vx, vy)[0]  # noqa: E731
    return model, _fit(model, len(inputs), cfg, lg, val_fn)


# -- downstream -----------------------------------------------------------------------------------


def mc_inputs(means: np.ndarray, log_vars: np.ndarray, master_seeds, num_samples: int) -> np.ndarray:
    """``(B, T, P)`` samples; example ``b`` uses streams ``0..T-1`` of ``master_seeds[b]``."""
    eps = rng.standard_normal_many(master_seeds, np.arange(num_samples), means.shape[1])
    return means[:, None, :] + np.exp(0.5 * log_vars)[:, None, :] * eps


def downstream_loss_and_grad(model: Mlp, samples: np.ndarray, labels: np.ndarray,
                             objective: str = "aggregate", params=None):
    """Joint NLL over ``(B, T, P)`` upstream samples and its parameter gradient."""
    b, t, p = samples.shape
    raw, cache = model.forward_raw(samples.reshape(b * t, p), params)
    if model.spec.head == "softmax":
        logits = raw.reshape(b, t, -1)
        fn = (losses.joint_classification_nll_grad if objective == "aggregate"
              else losses.per_sample_classification_nll_grad)
        loss, d_logits = fn(logits, labels)
        d_raw = model.head_backward(raw, d_logits=d_logits.reshape(b * t, -1))
    elif model.spec.head == "scalar":
        mean, log_var = model.head_outputs(raw, cache.inputs)
        fn = (losses.joint_regression_nll_grad if objective == "aggregate"
              else losses.per_sample_regression_nll_grad)
        loss, d_mean, d_lv = fn(mean.reshape(b, t), log_var.reshape(b, t), labels)
        d_raw = model.head_backward(raw, d_mean.reshape(-1), d_lv.reshape(-1))
    else:
        raise ValueError("downstream models need a scalar or softmax head")
    return loss, model.backward_raw(cache, d_raw, params)


def fit_downstream(means, log_vars, labels, spec: MlpSpec, cfg: TrainConfig, val=None,
                   model: Mlp | None = None):
    """Train on Monte Carlo samples of fixed per-example image distributions.

    ``means``/``log_vars`` are ``(N, P)``; ``val`` is an optional
    ``(means, log_vars, labels)`` triple evaluated with ``mc_samples_train`` samples.
    """
    means = np.asarray(means, dtype=np.float64).reshape(len(means), -1)
    log_vars = np.asarray(log_vars, dtype=np.float64).reshape(len(log_vars), -1)
    labels = np.asarray(labels)
    if not (len(means) == len(log_vars) == len(labels)):
        raise ValueError("means, log_vars and labels differ in length")
    if means.shape[1] != spec.in_dim:
        raise ValueError(f"downstream expects {spec.in_dim} inputs, upstream gives {means.shape[1]}")
    model = model or Mlp(spec, seed=rng.derive_seed("init", cfg.seed))
    T = cfg.mc_samples_train

    def lg(idx, epoch, params):
        seeds = [rng.derive_seed("train-mc", cfg.seed, epoch, int(i)) for i in idx]
        xs = mc_inputs(means[idx], log_vars[idx], seeds, T)
        return downstream_loss_and_grad(model, xs, labels[idx], cfg.objective, params)

    val_fn = None
    if val is not None:
        vm, vl, vy = (np.asarray(a) for a in val)
        vm, vl = vm.reshape(len(vm), -1), vl.reshape(len(vl), -1)
        seeds = [rng.derive_seed("val-mc", cfg.seed, i) for i in range(len(vm))]
        vxs = mc_inputs(vm, vl, seeds, T)
        val_fn = lambda: downstream_loss_and_grad(model, vxs, vy, cfg.objective)[0]  # noqa: E731
    return model, _fit(model, len(means), cfg, lg, val_fn)


def train_downstream(upstream: Mlp, upstream_inputs, labels, spec: MlpSpec, cfg: TrainConfig,
                     val=None, zero_variance: bool = False):
    """Train a downstream head on samples from a frozen upstream network's output."""
    means, log_vars = upstream.predict_batch(np.asarray(upstream_inputs))
    if zero_variance:
        log_vars = np.full_like(log_vars, LOGVAR_MIN)
    val_dists = None
    if val is not None:
        vm, vl = upstream.predict_batch(np.asarray(val[0]))
        val_dists = (vm, vl, val[1])
    return fit_downstream(means, log_vars, labels, spec, cfg, val_dists)


def write_history(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_nll", "val_nll", "wall_ms"])
        for row in history:
            w.writerow([row["epoch"], f"{row['train_nll']:.10g}", f"{row['val_nll']:.10g}",
                        f"{row['wall_ms']:.1f}"])
