import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(20240915))


def random_geometry(rng, max_kernel=3, allow_groups_of=None):
    """Draw a small random ConvGeometry plus matching channel counts."""
    from oneframe.engine import ConvGeometry

    kernel = tuple(int(rng.integers(1, max_kernel + 1)) for _ in range(3))
    stride = tuple(int(rng.integers(1, 3)) for _ in range(3))
    padding = tuple(int(rng.integers(0, k)) for k in kernel)
    groups = 1
    if allow_groups_of:
        groups = int(rng.choice(allow_groups_of))
    return ConvGeometry(kernel=kernel, stride=stride, padding=padding, groups=groups)
