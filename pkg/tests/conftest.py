import numpy as np
import pytest

from wavelg.data import load_dataset
from wavelg.learngene import bank_init
from wavelg.vit import ModelConfig


def fd_grad(f, x, idx, h=1e-3):
    """Central difference of scalar ``f`` wrt ``x[idx]`` (x modified in place, then restored)."""
    old = x[idx]
    x[idx] = old + h
    up = f()
    x[idx] = old - h
    down = f()
    x[idx] = old
    return (up - down) / (2 * h)


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_data():
    return load_dataset({"kind": "synthetic", "classes": 4, "samples": 160, "seed": 3})


@pytest.fixture(scope="session")
def tiny_cfg():
    return ModelConfig(depth=1, embed_dim=16, heads=2, classes=4)


@pytest.fixture
def tiny_bank():
    return bank_init(8, (2, 2, 2), seed=5)


# acceptance criteria report: test_acceptance records (number, ok, detail) here
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
