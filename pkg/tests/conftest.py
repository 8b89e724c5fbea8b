import numpy as np
import pytest

from pev.data import PartitionSpec, make_blobs, partition_dirichlet, train_test_split
from pev.model import ModelParams

_CRITERIA: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def record(name: str, ok: bool, detail: str = ""):
        _CRITERIA.append(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}".rstrip())
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)


def small_task(seed=0, n=4, per_class=40, classes=3, dim=5, alpha=1.0):
    data = make_blobs(classes, dim, per_class, 1.0, seed)
    train, test = train_test_split(data, 0.2, seed)
    return partition_dirichlet(train, PartitionSpec(n, alpha, seed)), test


def params_from(arch, *arrays):
    return ModelParams(tuple(np.asarray(a, dtype=float) for a in arrays), tuple(arch))
