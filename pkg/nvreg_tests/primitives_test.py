import math
import sys

import numpy as np
import pytest

from nvreg.primitives import (
    EPS_MATRIX,
    EPS_UNIT,
    THREADS_ENV_VAR,
    checked_displacement,
    checked_field,
    checked_positive,
    checked_unit_vector,
    checked_vector,
    float_almost_equal,
    float_seq_almost_equal,
    is_hermitian,
    raise_for_real,
    worker_threads,
)


def test_constants():
    assert 0.0 < EPS_UNIT < EPS_MATRIX < 1.0


def test_float_almost_equal_wrong_rel_error():
    with pytest.raises(ValueError):
        float_almost_equal(0.0, 0.0, err=-1.0)
    with pytest.raises(ValueError):
        float_almost_equal(0.0, 0.0, err=10.0)
    float_almost_equal(0.0, 0.0, err=0.0)

    with pytest.raises(ValueError):
        float_almost_equal(0.0, 0.0, err=math.nan)
    with pytest.raises(ValueError):
        float_almost_equal(0.0, 0.0, err=math.inf)


def test_float_almost_equal_special_floats():
    assert not float_almost_equal(math.nan, 0.0)
    assert not float_almost_equal(1.0, -math.inf)
    assert float_almost_equal(math.nan, math.nan)
    assert float_almost_equal(math.inf, math.inf)
    assert float_almost_equal(-math.inf, -math.inf)


def test_float_almost_equal_good():
    assert float_almost_equal(-0.0, 0.0, 0.0)
    assert not float_almost_equal(-1e-24, 1e-24, err=1e-7)
    assert float_almost_equal(1e-10, 2e-10, err=1e-8)
    assert not float_almost_equal(1e-8 + 1e-10, 1e-8 + 2e-10, err=1e-8)
    assert float_almost_equal(2.87e9, 2.87e9 + 1.0, err=1e-9)
    assert not float_almost_equal(0.0, sys.float_info.max)
    assert float_almost_equal(0.0, sys.float_info.min, err=1e-8)
    assert not float_almost_equal(0.0, sys.float_info.min, err=0.0)


def test_float_seq_almost_equal():
    assert float_seq_almost_equal([], [])
    assert float_seq_almost_equal((1e-9, 2.0), [1e-9, 2.0])
    assert not float_seq_almost_equal([1.0], [1.0, 0.0])
    assert not float_seq_almost_equal([1.0], [2.0])


@pytest.mark.parametrize('value', [True, 'a', None, 1j])
def test_raise_for_real_type(value):
    with pytest.raises(TypeError):
        raise_for_real('x', value)


@pytest.mark.parametrize('value', [math.nan, math.inf, -2.0])
def test_raise_for_real_value(value):
    with pytest.raises(ValueError):
        raise_for_real('x', value, -1.0, 1.0)


def test_checked_positive():
    assert checked_positive('t', np.float64(2.0)) == 2.0
    with pytest.raises(ValueError):
        checked_positive('t', 0.0)


def test_checked_vectors():
    vec = checked_vector('v', [1, 2, 3])
    assert vec.dtype == float
    with pytest.raises(ValueError):
        vec[0] = 5.0
    with pytest.raises(ValueError):
        checked_vector('v', [1, 2])
    with pytest.raises(ValueError):
        checked_vector('v', [1, math.nan, 2])
    with pytest.raises(ValueError):
        checked_unit_vector('n', [1, 1, 1])
    unit = checked_unit_vector('n', [1, 1, 1], normalize=True)
    assert np.linalg.norm(unit) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ValueError):
        checked_unit_vector('n', [0, 0, 0], normalize=True)


def test_checked_field_and_displacement(caplog):
    with pytest.raises(ValueError):
        checked_field('B', [0.0, 0.0, 11.0])
    checked_field('B', [0.0, 0.0, 2.0])
    assert 'Unusually strong' in caplog.text
    with pytest.raises(ValueError):
        checked_displacement('r', [0.0, 0.0, 0.0])
    with pytest.raises(ValueError):
        checked_displacement('r', [0.0, 0.0, 1.0])


def test_is_hermitian():
    m = np.array([[1.0, 2.0 - 1j], [2.0 + 1j, -3.0]])
    assert is_hermitian(m)
    m[0, 1] += 1e-3
    assert not is_hermitian(m)


def test_worker_threads(monkeypatch):
    assert worker_threads(3) == 3
    assert 1 <= worker_threads(0) <= 8
    with pytest.raises(ValueError):
        worker_threads(-1)
    monkeypatch.setenv(THREADS_ENV_VAR, '2')
    assert worker_threads() == 2
    monkeypatch.setenv(THREADS_ENV_VAR, 'many')
    with pytest.raises(ValueError):
        worker_threads()
