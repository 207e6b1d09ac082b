"""Shared fixtures: the four study models and their spectral data.

Eigentriples are deterministic, so session scope is safe and saves the
repeated power iterations.
"""

import pytest

from spinesim import preset
from spinesim.spectral import principal_eigentriple, tilt_motion


@pytest.fixture(scope="session")
def sym():
    return preset("MODEL-SYM")


@pytest.fixture(scope="session")
def asym():
    return preset("MODEL-ASYM")


@pytest.fixture(scope="session")
def bm():
    return preset("MODEL-BM")


@pytest.fixture(scope="session")
def heavy():
    return preset("MODEL-HEAVY")


@pytest.fixture(scope="session")
def sym_eig(sym):
    return principal_eigentriple(sym.motion, sym.branching)


@pytest.fixture(scope="session")
def asym_eig(asym):
    return principal_eigentriple(asym.motion, asym.branching)


@pytest.fixture(scope="session")
def bm_eig(bm):
    return principal_eigentriple(bm.motion, bm.branching)


@pytest.fixture(scope="session")
def heavy_eig(heavy):
    return principal_eigentriple(heavy.motion, heavy.branching)


@pytest.fixture(scope="session")
def sym_tilt(sym, sym_eig):
    return tilt_motion(sym.motion, sym.branching, sym_eig)


@pytest.fixture(scope="session")
def asym_tilt(asym, asym_eig):
    return tilt_motion(asym.motion, asym.branching, asym_eig)


@pytest.fixture(scope="session")
def bm_tilt(bm, bm_eig):
    return tilt_motion(bm.motion, bm.branching, bm_eig)
