import shutil
import time
from pathlib import Path

import hypothesis
import numpy as np
import pytest

from uncprop import cli

hypothesis.settings.register_profile("ci", max_examples=50, deadline=None)
hypothesis.settings.load_profile("ci")

REPO = Path(__file__).resolve().parents[1]
BENCHMARK_CONFIG = REPO / "configs" / "benchmark.yaml"

_acceptance_lines = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if item.module.__name__.endswith("test_acceptance") and report.when == "call":
        doc = (item.function.__doc__ or item.name).strip().splitlines()[0]
        _acceptance_lines.append(f"{'PASS' if report.passed else 'FAIL'}  {doc}")


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def benchmark_run(tmp_path_factory):
    """Bundled benchmark run end to end through the CLI: (run dir, wall seconds)."""
    out = tmp_path_factory.mktemp("benchmark")
    t0 = time.perf_counter()
    for cmd in ("synth", "train-upstream", "train-downstream", "evaluate"):
        code = cli.run([cmd, "--config", str(BENCHMARK_CONFIG), "--out", str(out)])
        assert code == 0, f"{cmd} failed with exit code {code}"
    return out, time.perf_counter() - t0


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def copy_run(src: Path, dst: Path) -> Path:
    shutil.copytree(src, dst)
    for name in ("sweep_report.csv", "scatter.csv", "run_manifest.json"):
        (dst / name).unlink(missing_ok=True)
    return dst
