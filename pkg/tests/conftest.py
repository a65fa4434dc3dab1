import sys
import time
from dataclasses import dataclass
from pathlib import Path

import pytest

from bwcp.config import load_config
from bwcp.data import load_dataset
from bwcp.experiment import train

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@dataclass
class ToyRun:
    cfg: object
    model: object
    rows: list
    out: Path
    seconds: float
    data: object


class ToyRuns:
    """Trains shipped toy configs on demand and keeps the results for the session."""

    def __init__(self, root):
        self.root = root
        self.runs = {}
        self.datasets = {}

    def dataset(self, cfg):
        key = (cfg.dataset, cfg.data_dir, cfg.n_train, cfg.n_test, cfg.image_size,
               cfg.in_channels, cfg.num_classes, cfg.data_seed)
        if key not in self.datasets:
            self.datasets[key] = load_dataset(cfg)
        return self.datasets[key]

    def get(self, name, seed=None, tag=""):
        key = (name, seed, tag)
        if key not in self.runs:
            cfg = load_config(CONFIGS / f"{name}.json", None if seed is None else {"seed": seed})
            data = self.dataset(cfg)
            out = self.root / f"{name}_{cfg.seed}{tag}"
            start = time.time()
            model, rows = train(cfg, out, data=data)
            self.runs[key] = ToyRun(cfg, model, rows, out, time.time() - start, data)
        return self.runs[key]


@pytest.fixture(scope="session")
def toy_runs(tmp_path_factory):
    return ToyRuns(tmp_path_factory.mktemp("toy"))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
