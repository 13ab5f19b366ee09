import csv
from pathlib import Path

import numpy as np
import pytest

from fssd import cli
from fssd.config import RunConfig

ROOT = Path(__file__).resolve().parent.parent
SYNTHETIC_CFG = ROOT / "configs" / "synthetic.cfg"

# one "PASS/FAIL criterion N: ..." line per acceptance criterion, echoed in the summary
ACCEPTANCE = []


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def run_synthetic(out_dir, *extra):
    """Run the full pipeline on the shipped synthetic config into ``out_dir``."""
    code = cli.main(["all", "--config", str(SYNTHETIC_CFG), "--out", str(out_dir), *extra])
    assert code == 0
    return RunConfig.load(SYNTHETIC_CFG, {"out": str(out_dir)})


@pytest.fixture(scope="session")
def synthetic_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("synthetic_run")
    cfg = run_synthetic(out)
    return out, cfg


@pytest.fixture(scope="session")
def synthetic_assets(synthetic_run):
    """Trained model, snapshots, detectors and data portions of the shared run."""
    from fssd.pipeline import Run

    out, cfg = synthetic_run
    run = Run(cfg)
    portions = run.portions(allow_test=True)
    return {
        "model": run.model(),
        "snapshots": run.snapshots(),
        "detectors": {d.name: d for d in run.detectors()},
        "pair": portions.pair(),
        "train": portions.get("train"),
        "cfg": cfg,
        "out": out,
    }


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
