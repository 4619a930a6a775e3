"""Shared fixtures and the acceptance-criteria summary section."""

from __future__ import annotations

import numpy as np
import pytest

from second_opinions import LogitModel, PanelDataset, Partition, Sample
from second_opinions.rng import substream

ACCEPTANCE_RESULTS: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def acceptance_log() -> list[str]:
    return ACCEPTANCE_RESULTS


def random_simplex(k: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform (Dirichlet(1)) point on the k-simplex."""
    p = rng.dirichlet(np.ones(k))
    return p / p.sum()


def tiny_panel(seed: int = 0, n: int = 40, k: int = 3, d: int = 2,
               experts: tuple[str, ...] = ("a", "b", "c")) -> PanelDataset:
    """Small dense panel with labels drawn from per-expert logit models."""
    rng = substream(seed, "tiny-panel")
    samples = []
    models = {h: LogitModel(rng.uniform(0, 1, size=(k, d))) for h in experts}
    for i in range(n):
        x = rng.uniform(0, 1, size=d)
        preds = {}
        for h in experts:
            p = models[h].predict(x).probs
            preds[h] = int(rng.choice(k, p=p))
        samples.append(Sample(sample_id=f"s{i:03d}", features=x, predictions=preds))
    return PanelDataset(k=k, d=d, samples=tuple(samples), experts=tuple(experts))


@pytest.fixture
def panel3() -> PanelDataset:
    return tiny_panel()


@pytest.fixture
def partition_abc() -> Partition:
    return Partition.from_groups([["a", "b"], ["c"]])
