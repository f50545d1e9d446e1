import numpy as np
import pytest

from mrtomo import ctmodel, linops


@pytest.fixture(scope="session")
def geom16():
    return ctmodel.Geometry(side=16, n_angles=20)


@pytest.fixture(scope="session")
def K16(geom16):
    return ctmodel.projector_op(geom16)


@pytest.fixture(scope="session")
def K16_dense(K16):
    return linops.densify(K16)


@pytest.fixture(scope="session")
def sino16(geom16):
    phantom = ctmodel.make_phantom("shepp-logan", 16)
    return ctmodel.project(geom16, phantom.flat).ravel()


@pytest.fixture(scope="session")
def geom64():
    return ctmodel.Geometry(side=64, n_angles=100)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240817)
