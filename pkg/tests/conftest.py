import numpy as np
import pytest

from iomtguard.bilstm import TrainConfig, train
from iomtguard.data import FeatureMask, normalize, stratified_split, synth_generate

CRITERIA = []


def record_criterion(number, title, ok, detail=""):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}" + (f" ({detail})" if detail else "")
    CRITERIA.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_corpus():
    """Normalized, well separated binary corpus with a train/test split."""
    d = normalize(synth_generate(600, 4, 4, 2, seed=3, separation=8.0))
    return stratified_split(d, 0.3, 0)


@pytest.fixture(scope="session")
def small_model(small_corpus):
    tr, _ = small_corpus
    mask = FeatureMask(np.array([1, 1, 0, 0, 0, 0, 0, 0], dtype=np.int8))
    model, history = train(tr, mask, TrainConfig(epochs=15, units_per_layer=8, num_layers=1,
                                                 dropout=0.0, learning_rate=0.01, seed=0))
    return model, mask, history
