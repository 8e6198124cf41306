import time
from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rsqs.data import Dataset, gen_dataset
from rsqs.models import ModelBundle
from rsqs.training import TrainConfig, desk_config, train

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture(scope="session")
def small_ds():
    """20 classes so that val and test splits each hold 5 classes."""
    return gen_dataset(20, 24, 16, 16, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@dataclass
class DeskRun:
    dataset: Dataset
    cfg: TrainConfig
    bundle: ModelBundle
    untrained: ModelBundle
    log: list
    train_seconds: float


@pytest.fixture(scope="session")
def desk():
    """The laptop-scale benchmark model: 20 procedural classes, master seed 0, trained once per session."""
    ds = gen_dataset(20, 100, 16, 16, seed=0)
    cfg = desk_config(seed=0)
    t0 = time.perf_counter()
    res = train(ds, cfg)
    seconds = time.perf_counter() - t0
    untrained = ModelBundle.init(res.bundle.config, seed=cfg.seed)
    return DeskRun(ds, cfg, res.bundle, untrained, res.log, seconds)


VERDICTS = pytest.StashKey[dict]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion; lines are echoed in the terminal summary."""
    lines = request.config.stash.setdefault(VERDICTS, {})

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {detail}"
        lines[number] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(VERDICTS, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
