import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from arpoison import io  # noqa: E402


@pytest.fixture(scope="session")
def published():
    return io.load_coefficients()


@pytest.fixture
def toy_cifar(tmp_path):
    """Write a small CIFAR-10 binary; returns (path, pixels, labels)."""

    def make(n=10, seed=0, name="toy.bin"):
        rng = np.random.default_rng(seed)
        pixels = rng.integers(0, 256, (n, 32, 32, 3), dtype=np.uint8)
        labels = rng.integers(0, 10, n)
        path = tmp_path / name
        io.write_cifar10(path, pixels, labels)
        return path, pixels, labels

    return make
