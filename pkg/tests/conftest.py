import numpy as np
import pytest

from hybridvfl.data import SyntheticSpec, generate_synthetic
from hybridvfl.models import ModelConfig


class Tiny:
    """A 64-sample synthetic set with everything a federated run needs."""

    def __init__(self, n=64, seed=0):
        ds = generate_synthetic(SyntheticSpec(n=n, seed=seed))
        self.ds = ds
        self.ids = ds.ids
        self.image = ds.image_view.copy()
        self.tabular = ds.tabular_view.copy()
        self.labels = ds.labels
        self.cfg = ModelConfig(seed=seed, tabular_width=self.tabular.shape[1])
        order = np.random.default_rng(seed).permutation(self.ids).tolist()
        # five steps of 16: one pass over 64 samples plus a repeat of the first batch
        self.batches = [order[(16 * i) % n:(16 * i) % n + 16] for i in range(5)]


@pytest.fixture
def tiny():
    return Tiny()


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one acceptance line; returns the verdict so the test can assert on it."""

    def record(number: int, passed: bool, detail: str) -> bool:
        _CRITERIA[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(_CRITERIA[number])
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
