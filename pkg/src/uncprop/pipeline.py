"""Two-stage pipeline: k-space -> upstream image distribution -> downstream joint prediction."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from uncprop import rng
from uncprop.distributions import DiagGaussianImage, SeedSpec
from uncprop.metrics import SsimParams, l1_l2, predicted_class, ssim
from uncprop.models import Mlp, MlpSpec
from uncprop.propagation import (
    ClassificationJoint,
    McConfig,
    RegressionJoint,
    propagate_classification,
    propagate_regression,
)
from uncprop.synth import Dataset, KSpaceSample, MaskSpec, mask_seed, undersample, zero_filled_recon

TASKS = ("classification", "regression")
ZERO_LOG_VAR = -50.0

REPORT_COLUMNS = [
    "task", "accel", "center_frac", "n", "ssim", "sqrt_mean_var_x",
    "acc", "l1", "l2",
    "mutual_info", "cond_entropy", "entropy",
    "sqrt_var_prop", "sqrt_mu_delta", "sqrt_var_joint",
]
SCATTER_COLUMNS = [
    "task", "example_id", "accel", "center_frac", "mean_var_x", "ssim", "label",
    "prediction", "propagated", "mutual_info", "cond_entropy", "entropy",
    "var_prop", "mu_delta", "var_joint",
]


def upstream_spec(size: int, hidden: Sequence[int], activation: str = "relu") -> MlpSpec:
    """Residual image network fed the zero-filled image followed by the column mask."""
    return MlpSpec(size * size + size, tuple(hidden), "image", size * size, activation,
                   residual=True, image_shape=(size, size))


def downstream_spec(task: str, size: int, hidden: Sequence[int], activation: str = "relu",
                    target_shift: float = 0.0, target_scale: float = 1.0) -> MlpSpec:
    if task == "classification":
        return MlpSpec(size * size, tuple(hidden), "softmax", 2, activation)
    if task == "regression":
        return MlpSpec(size * size, tuple(hidden), "scalar", 1, activation,
                       target_shift=target_shift, target_scale=target_scale)
    raise ValueError(f"unknown task {task!r}")


def upstream_input(recon: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.concatenate([np.asarray(recon, dtype=np.float64).ravel(), mask.astype(np.float64)])


def make_sample(dataset: Dataset, example_id: int, accel: float, center_frac: float) -> KSpaceSample:
    width = dataset.kspace.shape[2]
    spec = MaskSpec(accel, center_frac, width, mask_seed(dataset.seed, example_id, accel))
    return undersample(dataset.kspace[example_id], spec, dataset.noise_std)


def upstream_pairs(dataset: Dataset, ids: Sequence[int], accelerations):
    """Upstream training pairs: every example under every acceleration's mask."""
    xs, ys = [], []
    for i in ids:
        for accel, c in accelerations:
            s = make_sample(dataset, i, accel, c)
            xs.append(upstream_input(zero_filled_recon(s), s.mask))
            ys.append(dataset.images[i].ravel())
    return np.array(xs), np.array(ys)


def reconstruct(sample: KSpaceSample, upstream: Mlp, zero_variance: bool = False) -> DiagGaussianImage:
    recon = zero_filled_recon(sample)
    (mean, log_var), _ = upstream.forward(upstream_input(recon, sample.mask)[None, :])
    shape = recon.shape
    if zero_variance:
        log_var = np.full_like(log_var, ZERO_LOG_VAR)
    return DiagGaussianImage(mean[0].reshape(shape), log_var[0].reshape(shape))


@dataclass(frozen=True)
class ExampleRecord:
    task: str
    example_id: int
    accel: float
    center_frac: float
    mean_var_x: float
    ssim: float | None
    label: float | None
    joint: RegressionJoint | ClassificationJoint

    @property
    def prediction(self) -> float:
        if isinstance(self.joint, RegressionJoint):
            return self.joint.mu_hat
        return float(predicted_class(self.joint.mean_probs))

    @property
    def propagated(self) -> float:
        """Propagated uncertainty: mutual information or std of the predicted means."""
        if isinstance(self.joint, RegressionJoint):
            return float(np.sqrt(self.joint.var_prop))
        return self.joint.mutual_info


def run_example(sample: KSpaceSample, upstream: Mlp, downstream: Mlp, cfg: McConfig, *,
                ground_truth: np.ndarray | None = None, label=None, example_id: int = -1,
                zero_variance: bool = False) -> ExampleRecord:
    dist = reconstruct(sample, upstream, zero_variance)
    if downstream.spec.in_dim != dist.mean.size:
        raise ValueError("downstream checkpoint does not match the upstream image size")
    if downstream.spec.head == "softmax":
        task, joint = "classification", propagate_classification(dist, downstream, cfg)
    else:
        task, joint = "regression", propagate_regression(dist, downstream, cfg)
    score = None
    if ground_truth is not None:
        score = ssim(dist.mean, ground_truth, SsimParams())
    return ExampleRecord(task, example_id, sample.mask_spec.acceleration,
                         sample.mask_spec.center_fraction, float(np.mean(dist.var)),
                         score, None if label is None else float(label), joint)


@dataclass
class SweepRow:
    """Full-precision accumulators for one (task, acceleration) cell."""

    task: str
    accel: float
    center_frac: float
    records: list[ExampleRecord] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.records)

    def _mean(self, fn) -> float:
        return float(np.mean([fn(r) for r in self.records]))

    def values(self) -> dict:
        out = {
            "task": self.task, "accel": self.accel, "center_frac": self.center_frac, "n": self.n,
            "ssim": self._mean(lambda r: r.ssim) if self.records[0].ssim is not None else None,
            "sqrt_mean_var_x": float(np.sqrt(self._mean(lambda r: r.mean_var_x))),
        }
        if self.task == "classification":
            out["acc"] = self._mean(lambda r: r.prediction == r.label)
            out["mutual_info"] = self._mean(lambda r: r.joint.mutual_info)
            out["cond_entropy"] = self._mean(lambda r: r.joint.cond_entropy)
            out["entropy"] = self._mean(lambda r: r.joint.entropy)
        else:
            l1, l2 = l1_l2([r.prediction for r in self.records], [r.label for r in self.records])
            out["l1"], out["l2"] = l1, l2
            for key in ("var_prop", "mu_delta", "var_joint"):
                out["sqrt_" + key] = float(np.sqrt(self._mean(lambda r: getattr(r.joint, key))))
        return out

    def identity_residual(self) -> float:
        """Largest per-example violation of the decomposition identity, from raw values."""
        if self.task == "classification":
            return max(abs(r.joint.entropy - r.joint.mutual_info - r.joint.cond_entropy)
                       for r in self.records)
        return max(abs(r.joint.var_joint - r.joint.var_prop - r.joint.mu_delta)
                   for r in self.records)


@dataclass
class SweepReport:
    rows: list[SweepRow]

    @property
    def records(self) -> list[ExampleRecord]:
        return [r for row in self.rows for r in row.records]

    def row(self, task: str, accel: float) -> SweepRow:
        for r in self.rows:
            if r.task == task and r.accel == accel:
                return r
        raise KeyError((task, accel))

    def write_report_csv(self, path) -> None:
        _write_csv(path, REPORT_COLUMNS, [row.values() for row in self.rows])

    def write_scatter_csv(self, path) -> None:
        out = []
        for rec in self.records:
            d = {
                "task": rec.task, "example_id": rec.example_id, "accel": rec.accel,
                "center_frac": rec.center_frac, "mean_var_x": rec.mean_var_x, "ssim": rec.ssim,
                "label": rec.label, "prediction": rec.prediction, "propagated": rec.propagated,
            }
            j = rec.joint
            if isinstance(j, ClassificationJoint):
                d.update(mutual_info=j.mutual_info, cond_entropy=j.cond_entropy, entropy=j.entropy)
            else:
                d.update(var_prop=j.var_prop, mu_delta=j.mu_delta, var_joint=j.var_joint)
            out.append(d)
        _write_csv(path, SCATTER_COLUMNS, out)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.4g}"


def _write_csv(path, columns, dicts) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for d in dicts:
            w.writerow([_fmt(d.get(c)) for c in columns])


def example_seed(master_seed: int, example_id: int, accel: float) -> int:
    return rng.derive_seed("eval", master_seed, example_id, float(accel))


def run_sweep(dataset: Dataset, ids: Sequence[int], accelerations, upstream: Mlp,
              downstreams: dict[str, Mlp], mc_samples: int = 256, master_seed: int = 0,
              threads: int = 1, zero_variance: bool = False) -> SweepReport:
    """Evaluate every (example, acceleration) pair for every downstream task."""
    if not ids:
        raise ValueError("empty evaluation set")
    if upstream is None or not downstreams:
        raise ValueError("sweep needs an upstream and at least one downstream model")
    labels = {"classification": dataset.side, "regression": dataset.area}
    jobs = [(task, i, accel, c) for task in downstreams for accel, c in accelerations for i in ids]

    def work(job):
        task, i, accel, c = job
        cfg = McConfig(mc_samples, SeedSpec(example_seed(master_seed, i, accel), 0))
        return run_example(make_sample(dataset, i, accel, c), upstream, downstreams[task], cfg,
                           ground_truth=dataset.images[i], label=labels[task][i], example_id=i,
                           zero_variance=zero_variance)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(work, jobs))
    else:
        records = [work(j) for j in jobs]
    rows: dict[tuple, SweepRow] = {}
    for job, rec in zip(jobs, records):
        key = (job[0], job[2], job[3])
        rows.setdefault(key, SweepRow(*key)).records.append(rec)
    return SweepReport(list(rows.values()))
