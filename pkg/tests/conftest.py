"""Shared meshes and seeded fields; session scoped, treated as read-only."""

import numpy as np
import pytest

from divshape.divfree_decomposition import random_divfree_field
from divshape.domain_geometry import Box
from divshape.mesh_fields import triangulate


@pytest.fixture(scope="session")
def unit_square():
    return triangulate(Box(0.0, 0.0, 1.0, 1.0), h=0.07)


@pytest.fixture(scope="session")
def seeded_field(unit_square):
    return random_divfree_field(unit_square, np.random.default_rng(7))
