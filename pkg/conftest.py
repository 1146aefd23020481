import os
import sys

import numpy as np
import pytest

# Subpackages are namespace packages; test modules import them from the root
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from manifold.blockmat import BlockSpec, SymBlockMatrix  # noqa: E402

TEST_SEED = 1337


@pytest.fixture
def rng():
    return np.random.default_rng(TEST_SEED)


@pytest.fixture
def saddle_cost_matrix():
    # Two nodes, one negative edge: optimum X = all-ones at value -2
    return SymBlockMatrix.from_dense(BlockSpec(2, 1), np.array([[0.0, -1.0], [-1.0, 0.0]]))
