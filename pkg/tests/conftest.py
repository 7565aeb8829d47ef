import numpy as np
import pytest

from depthprune.net import init_net
from depthprune.recovery import train_teacher
from depthprune.task import make_splits


@pytest.fixture
def rng():
    return np.random.default_rng(80)


@pytest.fixture(scope="session")
def splits():
    return make_splits(80)


@pytest.fixture(scope="session")
def small_splits():
    return make_splits(80, n_train=256, n_heldout=128)


@pytest.fixture(scope="session")
def default_teacher(splits):
    """The default toy teacher: 12 layers, d=16, seed 80, 5000 Adam steps."""
    return train_teacher(splits)


@pytest.fixture(scope="session")
def small_teacher(small_splits):
    return train_teacher(small_splits, n_layers=8, d=8, seed=3, steps=300).net


def live_net(n_layers=4, d=6, c=3, seed=0, in_dim=5, out_dim=3, scale=0.3):
    """A random net whose modulation is not zero, so conditioning actually matters."""
    net = init_net(n_layers, d, c, seed, in_dim=in_dim, out_dim=out_dim)
    r = np.random.default_rng(seed + 1000)
    for blk in net.layers:
        if blk.modulation is not None:
            blk.modulation.w_cond.data = r.normal(0, scale, blk.modulation.w_cond.shape)
            blk.modulation.b_cond.data = r.normal(0, scale, blk.modulation.b_cond.shape)
    return net


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per criterion, then assert it."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
