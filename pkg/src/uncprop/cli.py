"""Command-line front end.

Exit codes: 0 success, 2 configuration error, 3 missing artifact, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import fcntl
import hashlib
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from uncprop import pipeline, synth, training
from uncprop.config import ConfigError, RunConfig, load_config
from uncprop.models import Mlp

log = logging.getLogger("uncprop")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4


class MissingArtifact(FileNotFoundError):
    pass


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Layout:
    """Paths inside a run directory."""

    def __init__(self, out):
        self.root = Path(out)
        self.dataset = self.root / "dataset"
        self.checkpoints = self.root / "checkpoints"
        self.logs = self.root / "logs"
        self.upstream = self.checkpoints / "upstream.ckpt"
        self.config = self.root / "config.yaml"
        self.report = self.root / "sweep_report.csv"
        self.scatter = self.root / "scatter.csv"
        self.manifest = self.root / "run_manifest.json"

    def downstream(self, task: str) -> Path:
        return self.checkpoints / f"downstream_{task}.ckpt"


@contextmanager
def locked(root: Path):
    root.mkdir(parents=True, exist_ok=True)
    fh = open(root / ".lock", "w")
    try:
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError as exc:
            raise ConfigError(f"another uncprop command is running in {root}") from exc
        yield
    finally:
        fh.close()


def _archive_config(cfg: RunConfig, lay: Layout) -> None:
    lay.config.write_text(cfg.dump())


def _require(path: Path, hint: str) -> None:
    if not path.exists():
        raise MissingArtifact(f"{path} not found; {hint}")


def _load_dataset(cfg: RunConfig, lay: Layout) -> synth.Dataset:
    _require(lay.dataset / "manifest.json", "run `uncprop synth` first")
    ds = synth.load_dataset(lay.dataset)
    m = ds.manifest
    want = {"seed": cfg.dataset.seed, "size": cfg.dataset.size, "count": cfg.dataset.count,
            "noise_std": cfg.dataset.noise_std}
    have = {k: m[k] for k in want}
    if have != want:
        raise ConfigError(f"dataset in {lay.dataset} was built with {have}, config says {want}")
    return ds


# -- commands --------------------------------------------------------------------------------------


def cmd_synth(cfg: RunConfig, lay: Layout) -> dict:
    d = cfg.dataset
    manifest = synth.write_dataset(lay.dataset, d.count, d.size, d.noise_std, d.seed)
    log.info("wrote %d phantoms to %s (manifest sha256 %s)", d.count, lay.dataset,
             sha256_file(lay.dataset / "manifest.json"))
    return manifest


def _dataset_meta(cfg: RunConfig, lay: Layout) -> dict:
    return {"dataset": cfg.to_dict()["dataset"],
            "dataset_manifest_sha256": sha256_file(lay.dataset / "manifest.json"),
            "masks": [list(m) for m in cfg.masks]}


def cmd_train_upstream(cfg: RunConfig, lay: Layout) -> str:
    ds = _load_dataset(cfg, lay)
    spec = pipeline.upstream_spec(cfg.dataset.size, cfg.upstream.hidden, cfg.upstream.activation)
    x, y = pipeline.upstream_pairs(ds, ds.split("upstream_train"), cfg.masks)
    val = pipeline.upstream_pairs(ds, ds.split("upstream_val"), cfg.masks)
    model, history = training.train_upstream(x, y, spec, cfg.train_upstream, val=val)
    lay.checkpoints.mkdir(parents=True, exist_ok=True)
    lay.logs.mkdir(parents=True, exist_ok=True)
    training.write_history(lay.logs / "train_upstream.csv", history)
    meta = _dataset_meta(cfg, lay) | {"stage": "upstream",
                                      "train": cfg.to_dict()["train_upstream"]}
    digest = model.save(lay.upstream, meta)
    log.info("upstream: nll %.4f -> %.4f, checkpoint sha256 %s",
             history[0]["train_nll"], history[-1]["train_nll"], digest)
    return digest


def _load_upstream(cfg: RunConfig, lay: Layout) -> tuple[Mlp, str]:
    _require(lay.upstream, "run `uncprop train-upstream` first")
    model, meta = Mlp.load(lay.upstream)
    if meta.get("dataset") != cfg.to_dict()["dataset"]:
        raise ConfigError("upstream checkpoint was trained on a different dataset configuration")
    return model, sha256_file(lay.upstream)


def cmd_train_downstream(cfg: RunConfig, lay: Layout) -> dict[str, str]:
    upstream, up_sha = _load_upstream(cfg, lay)
    ds = _load_dataset(cfg, lay)
    train_ids, val_ids = ds.split("downstream_train"), ds.split("downstream_val")
    x, _ = pipeline.upstream_pairs(ds, train_ids, cfg.masks)
    vx, _ = pipeline.upstream_pairs(ds, val_ids, cfg.masks)
    rep = len(cfg.masks)
    tr_rows = np.repeat(train_ids, rep)
    va_rows = np.repeat(val_ids, rep)
    lay.logs.mkdir(parents=True, exist_ok=True)
    digests = {}
    for task in cfg.tasks:
        if task == "classification":
            labels = ds.side
            spec = pipeline.downstream_spec(task, cfg.dataset.size, cfg.downstream.hidden,
                                            cfg.downstream.activation)
        else:
            labels = ds.area
            a = ds.area[train_ids]
            spec = pipeline.downstream_spec(task, cfg.dataset.size, cfg.downstream.hidden,
                                            cfg.downstream.activation, float(a.mean()),
                                            float(a.std()))
        model, history = training.train_downstream(
            upstream, x, labels[tr_rows], spec, cfg.train_downstream, val=(vx, labels[va_rows]))
        training.write_history(lay.logs / f"train_downstream_{task}.csv", history)
        meta = _dataset_meta(cfg, lay) | {"stage": "downstream", "task": task,
                                          "upstream_sha256": up_sha,
                                          "train": cfg.to_dict()["train_downstream"]}
        digests[task] = model.save(lay.downstream(task), meta)
        log.info("downstream %s: nll %.4f -> %.4f", task, history[0]["train_nll"],
                 history[-1]["train_nll"])
    return digests


def cmd_evaluate(cfg: RunConfig, lay: Layout, threads: int = 1) -> pipeline.SweepReport:
    upstream, up_sha = _load_upstream(cfg, lay)
    downstreams, ckpts = {}, {"upstream": up_sha}
    for task in cfg.tasks:
        path = lay.downstream(task)
        _require(path, "run `uncprop train-downstream` first")
        model, meta = Mlp.load(path)
        if meta.get("upstream_sha256") != up_sha:
            raise ConfigError(f"{path.name} was trained against a different upstream checkpoint")
        if meta.get("dataset") != cfg.to_dict()["dataset"]:
            raise ConfigError(f"{path.name} was trained on a different dataset configuration")
        downstreams[task] = model
        ckpts[f"downstream_{task}"] = sha256_file(path)
    ds = _load_dataset(cfg, lay)
    report = pipeline.run_sweep(ds, ds.split("test"), cfg.masks, upstream, downstreams,
                                cfg.mc_samples, cfg.seed, threads)
    for row in report.rows:
        if not all(np.isfinite(v) for v in row.values().values() if isinstance(v, float)):
            raise FloatingPointError(f"non-finite aggregate in row {row.task} R={row.accel}")
    report.write_report_csv(lay.report)
    report.write_scatter_csv(lay.scatter)
    manifest = {
        "config": cfg.to_dict(),
        "mc_samples": cfg.mc_samples,
        "seeds": {"master": cfg.seed, "dataset": cfg.dataset.seed,
                  "train_upstream": cfg.train_upstream.seed,
                  "train_downstream": cfg.train_downstream.seed},
        "checkpoints_sha256": ckpts,
        "dataset_manifest_sha256": sha256_file(lay.dataset / "manifest.json"),
        "outputs_sha256": {"sweep_report.csv": sha256_file(lay.report),
                           "scatter.csv": sha256_file(lay.scatter)},
        "eval_split_size": len(ds.split("test")),
    }
    lay.manifest.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return report


def cmd_report(cfg: RunConfig, lay: Layout) -> str:
    _require(lay.report, "run `uncprop evaluate` first")
    with open(lay.report, newline="") as fh:
        rows = list(csv.DictReader(fh))
    lines = []
    for task in cfg.tasks:
        task_rows = [r for r in rows if r["task"] == task]
        if not task_rows:
            continue
        cols = [c for c in pipeline.REPORT_COLUMNS[1:] if any(r[c] for r in task_rows)]
        lines += [f"## {task}", "", "| " + " | ".join(cols) + " |",
                  "|" + "---|" * len(cols)]
        lines += ["| " + " | ".join(r[c] for c in cols) + " |" for r in task_rows]
        lines.append("")
    text = "\n".join(lines)
    (lay.root / "report.md").write_text(text)
    return text


# -- entry point -----------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uncprop", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("synth", "train-upstream", "train-downstream", "evaluate", "report"):
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, type=Path)
        s.add_argument("--seed", type=int, help="override the master (evaluation) seed")
        s.add_argument("--mc-samples", type=int, help="Monte Carlo samples at evaluation")
        s.add_argument("--out", type=Path, help="override the output directory")
        s.add_argument("--threads", type=int, help="worker threads (env UNCPROP_THREADS)")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve(args) -> tuple[RunConfig, int]:
    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.mc_samples is not None:
        if args.mc_samples < 2:
            raise ConfigError("--mc-samples must be at least 2")
        changes["mc_samples"] = args.mc_samples
    if args.out is not None:
        changes["out"] = str(args.out)
    cfg = cfg.replace(**changes)
    threads = args.threads
    if threads is None:
        env = os.environ.get("UNCPROP_THREADS")
        try:
            threads = int(env) if env else 1
        except ValueError as exc:
            raise ConfigError(f"UNCPROP_THREADS must be an integer, got {env!r}") from exc
    if threads < 1:
        raise ConfigError("--threads must be positive")
    return cfg, threads


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, threads = resolve(args)
        lay = Layout(cfg.out)
        with locked(lay.root):
            _archive_config(cfg, lay)
            if args.command == "synth":
                cmd_synth(cfg, lay)
            elif args.command == "train-upstream":
                cmd_train_upstream(cfg, lay)
            elif args.command == "train-downstream":
                cmd_train_downstream(cfg, lay)
            elif args.command == "evaluate":
                cmd_evaluate(cfg, lay, threads)
            else:
                print(cmd_report(cfg, lay))
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        log.error("missing artifact: %s", exc)
        return EXIT_MISSING
    except FloatingPointError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    return EXIT_OK


def main() -> None:
    sys.exit(run())
