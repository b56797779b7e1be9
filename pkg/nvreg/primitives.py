import logging
import math
import os
import sys
from numbers import Real
from typing import Optional, Sequence

import numpy as np

# relative tolerance used for Hermiticity and normalization checks
EPS_MATRIX = 1e-9
# components of unit vectors must be normalized to this precision
EPS_UNIT = 1e-12
MAX_FIELD_T = 10.0
MAX_DISTANCE_M = 1e-3
MIN_DISTANCE_M = 1e-10
THREADS_ENV_VAR = 'NVREG_THREADS'

logger = logging.getLogger(__name__)


class NvregError(Exception):
    pass


def raise_for_real(
    key: str,
    value: Real,
    min_allowed: float = -1e24,
    max_allowed: float = 1e24,
    allow_nans: bool = False,
) -> None:
    if isinstance(value, bool) or not isinstance(value, (Real, np.floating, np.integer)):
        raise TypeError(f'Only real values for {key} are allowed: {value}')
    value = float(value)
    if allow_nans and math.isnan(value):
        return
    if math.isnan(value):
        raise ValueError(f'NaN value {value} for {key}')
    if math.isfinite(min_allowed) and math.isfinite(max_allowed):
        if not math.isfinite(value):
            raise ValueError(f'Value {value} for {key} is not finite')
    if not (min_allowed <= value <= max_allowed):
        raise ValueError(
            f'Value {value} for {key} outside of acceptable range [{min_allowed} {max_allowed}]'
        )


def checked_real(
    key: str,
    value: Real,
    min_allowed: float = -1e24,
    max_allowed: float = 1e24,
    allow_nans: bool = False,
) -> float:
    raise_for_real(key, value, min_allowed, max_allowed, allow_nans)
    return float(value)


def checked_positive(key: str, value: Real, max_allowed: float = 1e24) -> float:
    value = checked_real(key, value, 0.0, max_allowed)
    if value <= 0.0:
        raise ValueError(f'Value for {key} must be strictly positive: {value}')
    return value


def checked_probability(key: str, value: Real) -> float:
    return checked_real(key, value, 0.0, 1.0)


def checked_vector(key: str, value: Sequence[float], size: int = 3) -> np.ndarray:
    """Return a read-only float copy of a finite vector with the given size"""
    try:
        vec = np.array(value, dtype=float).reshape(-1)
    except (TypeError, ValueError) as e:
        raise TypeError(f'Wrong vector passed for {key}: {value}') from e
    if vec.shape != (size,):
        raise ValueError(f'Vector {key} must have {size} components: {value}')
    if not np.all(np.isfinite(vec)):
        raise ValueError(f'Vector {key} has non-finite components: {value}')
    vec.setflags(write=False)
    return vec


def checked_unit_vector(key: str, value: Sequence[float], normalize: bool = False) -> np.ndarray:
    vec = checked_vector(key, value)
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise ValueError(f'Zero vector passed for {key}')
    if normalize:
        vec = vec / norm
        vec.setflags(write=False)
    elif abs(norm - 1.0) > EPS_UNIT:
        raise ValueError(f'Vector {key} is not normalized: |{value}| = {norm}')
    return vec


def checked_field(key: str, value: Sequence[float]) -> np.ndarray:
    vec = checked_vector(key, value)
    if np.linalg.norm(vec) > MAX_FIELD_T:
        raise ValueError(f'Magnetic field {key} exceeds {MAX_FIELD_T} T: {value}')
    if np.linalg.norm(vec) > 1.0:
        logger.warning(f'Unusually strong magnetic field for {key}: {value} T')
    return vec


def checked_displacement(key: str, value: Sequence[float]) -> np.ndarray:
    vec = checked_vector(key, value)
    r = float(np.linalg.norm(vec))
    if r == 0.0:
        raise ValueError(f'Zero displacement passed for {key}')
    if r > MAX_DISTANCE_M:
        raise ValueError(f'Displacement {key} is too large: {r} m')
    if r < MIN_DISTANCE_M:
        logger.warning(f'Unusually small displacement for {key}: {r} m')
    return vec


def float_almost_equal(a: float, b: float, err: float = 1e-8) -> bool:
    """Test approximate equality

    * Floats of with different sign are always not equal.
    * nan, inf, and -inf are all equal to itself.
    * The error is relative if either |a|>err or |b|>err, otherwise the error is absolute.
    """
    if not (math.isfinite(err) and 0.0 <= err <= 1.0):
        raise ValueError(f'Wrong relative error: {err}')

    if not (math.isfinite(a) and math.isfinite(b)):
        if math.isnan(a) and math.isnan(b):
            return True
        return a == b
    if a == b:
        return True
    if min(a, b) < 0.0 <= max(a, b):
        return False
    if err <= sys.float_info.epsilon:
        return a == b

    a, b = abs(a), abs(b)
    if min(a, b) < err:
        return abs(a - b) < err
    return abs(a - b) < max(err * max(a, b), sys.float_info.epsilon)


def float_seq_almost_equal(a: Sequence[float], b: Sequence[float], err: float = 1e-8) -> bool:
    if len(a) != len(b):
        return False
    return all(float_almost_equal(float(a[i]), float(b[i]), err) for i in range(len(a)))


def max_norm(matrix: np.ndarray) -> float:
    return float(np.max(np.abs(matrix))) if matrix.size else 0.0


def is_hermitian(matrix: np.ndarray, rel_err: float = EPS_MATRIX) -> bool:
    scale = max(max_norm(matrix), sys.float_info.min)
    return max_norm(matrix - matrix.conj().T) <= rel_err * scale


def worker_threads(requested: Optional[int] = None) -> int:
    """Number of worker threads: explicit request, else NVREG_THREADS, 0 meaning auto"""
    if requested is None:
        raw = os.environ.get(THREADS_ENV_VAR, '0').strip() or '0'
        try:
            requested = int(raw)
        except ValueError as e:
            raise ValueError(f'{THREADS_ENV_VAR} must be an integer: {raw}') from e
    if requested < 0:
        raise ValueError(f'Number of threads must be non-negative: {requested}')
    if requested == 0:
        return min(8, os.cpu_count() or 1)
    return requested
