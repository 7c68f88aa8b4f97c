import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(scope="session")
def mnist_idx(tmp_path_factory):
    """The bundled MNIST sample written out as IDX files: (images path, labels path)."""
    from lifsampling.datasets import bundled_mnist_subset, to_idx

    images, labels = bundled_mnist_subset()
    root = tmp_path_factory.mktemp("mnist")
    (root / "images.idx").write_bytes(to_idx(images))
    (root / "labels.idx").write_bytes(to_idx(labels))
    return root / "images.idx", root / "labels.idx"


@pytest.fixture(scope="session")
def mnist_raw(mnist_idx):
    from lifsampling.datasets import read_idx

    return read_idx(mnist_idx[0]), read_idx(mnist_idx[1])


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(config.acceptance_lines, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
