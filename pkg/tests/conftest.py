import functools
import math
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from powerdensity.field_grid import Grid
from powerdensity.forward import synthesize
from powerdensity.phantoms import make_phantom


@functools.lru_cache(maxsize=None)
def _bundle(phantom, cells, alpha):
    return synthesize(make_phantom(phantom, Grid.from_cells(cells)), alpha)


@pytest.fixture(scope="session")
def bundle():
    """Cached synthetic bundles: ``bundle(phantom, cells, alpha)``."""
    return _bundle


def observed_order(e_coarse, e_fine, ratio=2.0):
    return math.log(e_coarse / e_fine) / math.log(ratio)


def converges(errs, order, floor=1e-10):
    """Observed order of the last refinement step is at least ``order``, or both errors sit at round-off."""
    if errs[-1] < floor and errs[-2] < floor:
        return True
    return observed_order(errs[-2], errs[-1]) >= order


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)
