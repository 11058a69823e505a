import numpy as np
import pytest

from forgetbench.harness.problem import ProblemConfig, build_problem
from forgetbench.train import TrainConfig

SMALL_PROBLEM = ProblemConfig(
    n_subjects=60,
    examples_per_subject=(4, 8),
    n_classes=4,
    feature_dim=6,
    subject_std=1.0,
    forget_fraction=0.05,
    hidden=(8,),
)
SMALL_TRAIN = TrainConfig(epochs=3, batch_size=32)


@pytest.fixture(scope="session")
def small_problem():
    return build_problem(SMALL_PROBLEM)


@pytest.fixture(scope="session")
def small_original(small_problem):
    from forgetbench.train import train

    p = small_problem
    return train(p.ds, p.splits.train, p.arch, SMALL_TRAIN, seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[VERDICTS] = []


@pytest.fixture
def verdict(request):
    """Record one acceptance criterion's PASS/FAIL line, then assert it."""

    def record(criterion: int, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'} criterion {criterion:2d}: {detail}"
        print(line)
        request.config.stash[VERDICTS].append((criterion, line))
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
