import numpy as np
import pytest

from nvreg.spincore import FieldSetting, NVCenter, SpinPairSystem, nv_axes, scaled_to_coupling

COUPLING_HZ = 42e3


def tilted_pair() -> SpinPairSystem:
    """A on [111], B on [-1-11], B displaced mostly in the surface plane"""
    axes = nv_axes()
    return SpinPairSystem(NVCenter(tuple(axes[0])), NVCenter(tuple(axes[3])), (8.8e-9, 0.0, 4.313e-9))


def field_along_a(magnitude: float) -> FieldSetting:
    return FieldSetting.along(nv_axes()[0], magnitude)


@pytest.fixture(scope='session')
def bias_field() -> FieldSetting:
    return field_along_a(5e-3)


@pytest.fixture(scope='session')
def coupled_pair(bias_field) -> SpinPairSystem:
    """Tilted pair rescaled to a 42 kHz line shift at 5 mT"""
    return scaled_to_coupling(tilted_pair(), bias_field, COUPLING_HZ)


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)
