import json
import shutil
import subprocess
import sys

import pytest
import yaml

from conftest import REPO, copy_run
from uncprop import cli
from uncprop.config import ConfigError, load_config, parse_config

TINY = {
    "seed": 0,
    "dataset": {"seed": 1, "size": 16, "count": 12, "noise_std": 0.02},
    "masks": [[2, 0.16], [4, 0.16]],
    "upstream": {"hidden": [8]},
    "downstream": {"hidden": [4]},
    "train_upstream": {"seed": 2, "epochs": 2, "lr": 0.01},
    "train_downstream": {"seed": 3, "epochs": 2, "mc_samples_train": 4},
    "mc_samples": 16,
}


def write_config(path, doc=None, **overrides):
    doc = dict(TINY if doc is None else doc, **overrides)
    path.write_text(yaml.safe_dump(doc))
    return path


def run(cmd, cfg, out, *extra):
    return cli.run([cmd, "--config", str(cfg), "--out", str(out), *extra])


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    cfg = write_config(root / "cfg.yaml")
    out = root / "run"
    for cmd in ("synth", "train-upstream", "train-downstream", "evaluate"):
        assert run(cmd, cfg, out) == 0
    return cfg, out


class TestConfig:
    def test_bundled_configs_parse(self):
        for p in (REPO / "configs").glob("*.yaml"):
            load_config(p)

    def test_round_trip_through_dump(self):
        cfg = parse_config(TINY)
        assert parse_config(yaml.safe_load(cfg.dump())) == cfg

    @pytest.mark.parametrize("mutate,match", [
        (lambda d: d.pop("seed"), "seed"),
        (lambda d: d["dataset"].pop("seed"), "seed"),
        (lambda d: d["train_upstream"].pop("seed"), "seed"),
        (lambda d: d.update(bogus=1), "unknown"),
        (lambda d: d["dataset"].update(count=0), "count"),
        (lambda d: d.update(tasks=["segmentation"]), "tasks"),
        (lambda d: d.update(mc_samples=1), "mc_samples"),
        (lambda d: d["train_downstream"].update(objective="x"), "objective"),
    ])
    def test_rejections(self, mutate, match):
        doc = json.loads(json.dumps(TINY))
        mutate(doc)
        with pytest.raises(ConfigError, match=match):
            parse_config(doc)

    def test_invalid_mask_row_is_named(self):
        doc = dict(TINY, masks=[[2, 0.16], [64, 0.16]])
        with pytest.raises(ConfigError, match=r"masks\[1\] = \(64, 0.16\)"):
            parse_config(doc)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.yaml")


class TestExitCodes:
    def test_config_error(self, tmp_path):
        cfg = write_config(tmp_path / "c.yaml", dataset=dict(TINY["dataset"], count=0))
        assert run("synth", cfg, tmp_path / "out") == cli.EXIT_CONFIG

    def test_missing_config_file(self, tmp_path):
        assert run("synth", tmp_path / "missing.yaml", tmp_path / "out") == cli.EXIT_CONFIG

    def test_missing_artifacts(self, tmp_path):
        cfg = write_config(tmp_path / "c.yaml")
        out = tmp_path / "out"
        assert run("train-upstream", cfg, out) == cli.EXIT_MISSING
        assert run("synth", cfg, out) == 0
        assert run("train-downstream", cfg, out) == cli.EXIT_MISSING
        assert run("evaluate", cfg, out) == cli.EXIT_MISSING
        assert run("report", cfg, out) == cli.EXIT_MISSING

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numerical_failure(self, tmp_path):
        cfg = write_config(tmp_path / "c.yaml",
                           train_upstream={"seed": 2, "epochs": 30, "lr": 1e8, "optimizer": "sgd"})
        out = tmp_path / "out"
        assert run("synth", cfg, out) == 0
        assert run("train-upstream", cfg, out) == cli.EXIT_NUMERIC

    def test_dataset_mismatch_is_config_error(self, tiny_run, tmp_path):
        cfg, out = tiny_run
        other = write_config(tmp_path / "c.yaml", dataset=dict(TINY["dataset"], noise_std=0.5))
        assert run("evaluate", other, out) == cli.EXIT_CONFIG

    def test_bad_thread_count(self, tiny_run, monkeypatch):
        cfg, out = tiny_run
        assert run("report", cfg, out, "--threads", "0") == cli.EXIT_CONFIG
        monkeypatch.setenv("UNCPROP_THREADS", "many")
        assert run("report", cfg, out) == cli.EXIT_CONFIG


class TestRun:
    def test_synth_is_reproducible(self, tmp_path):
        cfg = write_config(tmp_path / "c.yaml")
        assert run("synth", cfg, tmp_path / "a") == 0
        assert run("synth", cfg, tmp_path / "b") == 0
        a = (tmp_path / "a" / "dataset" / "manifest.json").read_bytes()
        assert a == (tmp_path / "b" / "dataset" / "manifest.json").read_bytes()

    def test_training_is_reproducible(self, tiny_run, tmp_path):
        cfg, out = tiny_run
        shutil.copytree(out / "dataset", tmp_path / "dataset")
        assert run("train-upstream", cfg, tmp_path) == 0
        assert (tmp_path / "checkpoints" / "upstream.ckpt").read_bytes() == \
            (out / "checkpoints" / "upstream.ckpt").read_bytes()

    def test_outputs_and_manifest(self, tiny_run):
        _, out = tiny_run
        for name in ("sweep_report.csv", "scatter.csv", "run_manifest.json", "config.yaml",
                     "logs/train_upstream.csv", "checkpoints/downstream_regression.ckpt"):
            assert (out / name).exists(), name
        m = json.loads((out / "run_manifest.json").read_text())
        assert m["mc_samples"] == 16
        assert m["seeds"] == {"master": 0, "dataset": 1, "train_upstream": 2, "train_downstream": 3}
        assert m["outputs_sha256"]["sweep_report.csv"] == cli.sha256_file(out / "sweep_report.csv")
        assert "threads" not in json.dumps(m)

    def test_mc_samples_override_is_recorded(self, tiny_run, tmp_path):
        cfg, out = tiny_run
        dst = copy_run(out, tmp_path / "r")
        assert run("evaluate", cfg, dst, "--mc-samples", "8", "--seed", "5") == 0
        m = json.loads((dst / "run_manifest.json").read_text())
        assert m["mc_samples"] == 8 and m["seeds"]["master"] == 5

    def test_upstream_change_invalidates_downstream(self, tiny_run, tmp_path):
        cfg, out = tiny_run
        dst = copy_run(out, tmp_path / "r")
        retrain = write_config(tmp_path / "c.yaml", train_upstream=dict(TINY["train_upstream"], seed=99))
        assert run("train-upstream", retrain, dst) == 0
        assert run("evaluate", retrain, dst) == cli.EXIT_CONFIG

    def test_report(self, tiny_run, capsys):
        cfg, out = tiny_run
        assert run("report", cfg, out) == 0
        text = (out / "report.md").read_text()
        assert "## classification" in text and "## regression" in text
        assert "sqrt_var_prop" in text

    def test_module_entry_point(self, tiny_run):
        cfg, out = tiny_run
        proc = subprocess.run([sys.executable, "-m", "uncprop", "report", "--config", str(cfg),
                               "--out", str(out)], capture_output=True, text=True)
        assert proc.returncode == 0 and "| accel |" in proc.stdout
