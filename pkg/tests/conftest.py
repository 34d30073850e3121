import numpy as np
import pytest

from evcsguard.dataset import DatasetConfig, split, synthesize_dataset
from evcsguard.grid import build_grid


@pytest.fixture(scope="session")
def wscc9():
    return build_grid("wscc9")


@pytest.fixture(scope="session")
def small_dataset():
    """40 + 40 scenario windows, attack5 regime."""
    return synthesize_dataset(DatasetConfig(n_normal=40, n_attack=40, seed=3, chunk=40))


@pytest.fixture(scope="session")
def small_split(small_dataset):
    return split(small_dataset, 0.8, np.random.default_rng(0))


@pytest.fixture(scope="session")
def tiny_checkpoint(small_split):
    """Small LSTM detector trained for a few epochs; good enough for plumbing tests."""
    from evcsguard.tuning import fit
    hp = dict(learning_rate=0.01, dropout=0.1, batch=16, units1=8, units2=8, units3=4, epochs=3)
    ck, _ = fit("lstm", hp, small_split[0], seed=0)
    return ck


_ACCEPTANCE = {}


@pytest.fixture(scope="session")
def acceptance_log():
    """criterion number -> (passed, detail); printed after the run."""
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
