import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from kinemod.encoder import normalize  # noqa: E402
from kinemod.skeleton import default_topology, toy_topology  # noqa: E402


@pytest.fixture(scope="session")
def ntu():
    return default_topology()


@pytest.fixture(scope="session")
def toy():
    return toy_topology()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def unit_rows(rng, rows, width):
    return normalize(rng.normal(size=(rows, width)))


def random_rotation(rng) -> np.ndarray:
    """Uniform proper rotation via QR with sign fix."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


@pytest.fixture(scope="session")
def tiny_data():
    """Twelve synthetic samples and a small teacher pretrained for two epochs."""
    from kinemod.dataio import SkeletonDataset, SyntheticSpec, generate_synthetic
    from kinemod.engine import TrainConfig, pretrain

    data = SkeletonDataset.from_synthetic(generate_synthetic(SyntheticSpec(samples_per_class=4)))
    cfg = TrainConfig(bank_capacity=8, batch_size=4, stage1_epochs=1, stage2_epochs=1, hidden=8,
                      feature_dim=8, head_hidden=8, cz=4, momentum=0.9, seed=0)
    return data, pretrain(data, default_topology(), cfg).model


# one "PASS|FAIL criterion: detail" line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def record_criterion(name: str, passed: bool, detail: str) -> None:
    line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
