import numpy as np
import pytest
import torch

from mmdyn.data import SyntheticSpec, SyntheticTabular, patient_split, synthesize_dataset

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance_log():
    return ACCEPTANCE_LINES


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def separable_two_modality():
    """Two informative tabular modalities, low noise, balanced classes."""
    spec = SyntheticSpec(600, 3, [SyntheticTabular("a", 12, 3), SyntheticTabular("b", 10, 3)],
                         noise=0.3, class_separation=2.0)
    ds, truth = synthesize_dataset(spec, 7)
    return ds, truth, patient_split(ds, {"P2"}, 0.2, 0)


@pytest.fixture(scope="session")
def tiny_dataset():
    spec = SyntheticSpec(120, 2, [SyntheticTabular("a", 6, 2), SyntheticTabular("b", 5, 2)], noise=0.5)
    ds, truth = synthesize_dataset(spec, 3)
    return ds, patient_split(ds, {"P2"}, 0.25, 0)


IMBALANCED_SEEDS = [0, 1, 2, 3, 4]


@pytest.fixture(scope="session")
def imbalanced_ablation():
    """All four variants x 5 seeds on 4-class 85/7/5/3 data with 10% planted features."""
    import time

    from mmdyn.fusion import LossWeights
    from mmdyn.trainer import VARIANTS, TrainConfig, run_ablation

    spec = SyntheticSpec(2000, 4, [SyntheticTabular("protein", 100, 10), SyntheticTabular("rna", 100, 10)],
                         noise=1.0, class_separation=2.0, class_ratios=[85, 7, 5, 3])
    ds, truth = synthesize_dataset(spec, 0)
    split = patient_split(ds, {"P2"}, 0.2, 0)
    cfg = TrainConfig(epochs=100, latent_dims={"protein": 35, "rna": 35}, loss_weights=LossWeights(0.01, 1, 1))
    t0 = time.perf_counter()
    report = run_ablation(cfg, ds, split, VARIANTS, IMBALANCED_SEEDS)
    return ds, truth, split, report, time.perf_counter() - t0
