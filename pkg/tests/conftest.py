import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


def random_bool_grid(rng, height, width, density=0.4):
    return rng.random((height, width)) < density


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
