import numpy as np
import pytest

from oodguard.micronet import init_net, train
from oodguard.synthetic import SyntheticTask, generate_task, sample_task


@pytest.fixture(scope="session")
def blob_task():
    """Trained 4-class ring net with train/test/far-OOD/near-OOD archives."""
    far = SyntheticTask.ring(n_classes=4, dim=2, radius=6.0, ood="far", seed=11)
    near = SyntheticTask.ring(n_classes=4, dim=2, radius=6.0, ood="near", seed=11)
    X, y, *_ = sample_task(far, 60, 100)
    net = train(init_net([2, 16, 16, 4], seed=11), X, y, epochs=60, lr=0.05, seed=11)
    train_arch, test_arch, far_arch = generate_task(far, net, 60, 100)
    near_arch = generate_task(near, net, 60, 100)[2]
    return {
        "net": net,
        "X": X,
        "y": y,
        "train": train_arch,
        "test": test_arch,
        "far": far_arch,
        "near": near_arch,
    }


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion."""

    def record(criterion, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
