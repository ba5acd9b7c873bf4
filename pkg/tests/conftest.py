import pytest

from latgas import build_model, macroscopic_flux


@pytest.fixture(scope="session")
def pm1():
    return build_model("pm1")


@pytest.fixture(scope="session")
def two_lane():
    return build_model("two-lane", gamma=0.3)


@pytest.fixture(scope="session")
def pm1_flux(pm1):
    return macroscopic_flux(pm1)


@pytest.fixture(scope="session")
def two_lane_flux(two_lane):
    return macroscopic_flux(two_lane)
