"""Relative position of two NV centres from field-dependent DEER frequencies.

The forward model diagonalizes the full pair Hamiltonian for every field setting of a
dataset. The inverse problem is a multi-start Levenberg-Marquardt fit over the displacement
of B combined with a search over the four possible <111> axes of B. Candidate positions are
then matched against the diamond lattice.
"""
import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.optimize

from nvreg.enums import Observable, enum_member_lookup
from nvreg.primitives import (
    NvregError,
    checked_positive,
    checked_real,
    checked_unit_vector,
    checked_vector,
    worker_threads,
)
from nvreg.spincore import (
    CONSTANTS,
    FieldSetting,
    LabelingError,
    NVCenter,
    PhysicalConstants,
    SpinPairSystem,
    deer_frequencies,
    nv_axes,
)

logger = logging.getLogger(__name__)

DIAMOND_LATTICE_CONSTANT = 0.3567e-9
# 0.17 MHz per MV/m
STARK_HZ_PER_V_PER_M = 0.17
DATASET_COLUMNS = ['bx_T', 'by_T', 'bz_T', 'observable', 'value_hz', 'sigma_hz']
MIN_DATASET_ENTRIES = 4
# residual returned for geometries the forward model cannot label
PENALTY_RESIDUAL = 1e6
# candidates closer than this (nm) are the same minimum
SAME_MINIMUM_NM = 0.05
SCREENING_EVALUATIONS = 40
# screened minima per B axis that are refined to convergence
REFINED_PER_AXIS = 3

_NM = 1e-9


class ConvergenceError(NvregError):
    def __init__(self, message: str, best_residual: float = math.inf):
        super().__init__(f'{message} (best chi-square {best_residual:.6g})')
        self.best_residual = best_residual


@dataclass(frozen=True)
class DeerEntry:
    field: FieldSetting
    observable: Observable
    value: float
    sigma: float

    def __post_init__(self):
        object.__setattr__(self, 'observable', enum_member_lookup(Observable, self.observable))
        object.__setattr__(self, 'value', checked_real('value', self.value))
        object.__setattr__(self, 'sigma', checked_positive('sigma', self.sigma))


@dataclass(frozen=True)
class DeerDataset:
    entries: Tuple[DeerEntry, ...]

    def __post_init__(self):
        object.__setattr__(self, 'entries', tuple(self.entries))

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[DeerEntry]:
        return iter(self.entries)

    @property
    def values(self) -> np.ndarray:
        return np.array([e.value for e in self.entries])

    @property
    def sigmas(self) -> np.ndarray:
        return np.array([e.sigma for e in self.entries])

    def head(self, n: int) -> 'DeerDataset':
        return DeerDataset(self.entries[:n])

    def with_values(self, values: Sequence[float]) -> 'DeerDataset':
        if len(values) != len(self.entries):
            raise ValueError(f'Expected {len(self.entries)} values: {len(values)}')
        return DeerDataset(
            tuple(DeerEntry(e.field, e.observable, float(v), e.sigma) for e, v in zip(self.entries, values))
        )

    def to_frame(self) -> pd.DataFrame:
        rows = [
            [e.field.b[0], e.field.b[1], e.field.b[2], e.observable.value, e.value, e.sigma]
            for e in self.entries
        ]
        return pd.DataFrame(rows, columns=DATASET_COLUMNS)

    def write_csv(self, f) -> None:
        self.to_frame().to_csv(f, index=False, float_format='%.17g', lineterminator='\n')

    @classmethod
    def from_frame(cls, df: pd.DataFrame) -> 'DeerDataset':
        if list(df.columns) != DATASET_COLUMNS:
            raise ValueError(f'Dataset columns must be {DATASET_COLUMNS}: {list(df.columns)}')
        entries = []
        for row in df.itertuples(index=False):
            try:
                entries.append(
                    DeerEntry(
                        FieldSetting((float(row.bx_T), float(row.by_T), float(row.bz_T))),
                        str(row.observable).strip(),
                        float(row.value_hz),
                        float(row.sigma_hz),
                    )
                )
            except LookupError as e:
                raise ValueError(f'Unknown observable in dataset: {row.observable}') from e
        return cls(tuple(entries))

    @classmethod
    def read_csv(cls, path) -> 'DeerDataset':
        return cls.from_frame(pd.read_csv(path, comment='#'))

    def to_json(self) -> Dict[str, Any]:
        return {
            'entries': [
                {'b': list(e.field.b), 'observable': e.observable.value, 'value': e.value, 'sigma': e.sigma}
                for e in self.entries
            ]
        }

    @classmethod
    def from_json(cls, data: Dict[str, Any]) -> 'DeerDataset':
        return cls(
            tuple(
                DeerEntry(FieldSetting(tuple(e['b'])), e['observable'], e['value'], e['sigma'])
                for e in data['entries']
            )
        )


def _observable_value(frequencies: Tuple[float, float], observable: Observable) -> float:
    dnu1, dnu2 = frequencies
    if observable == Observable.DNU1:
        return dnu1
    if observable == Observable.DNU2:
        return dnu2
    return dnu1 + dnu2


def _forward(system: SpinPairSystem, dataset: DeerDataset, constants: PhysicalConstants) -> np.ndarray:
    cache = {}
    values = np.empty(len(dataset))
    for i, entry in enumerate(dataset):
        if entry.field.b not in cache:
            cache[entry.field.b] = deer_frequencies(system, entry.field, constants)
        values[i] = _observable_value(cache[entry.field.b], entry.observable)
    return values


def predict_dataset(
    system: SpinPairSystem, dataset: DeerDataset, constants: PhysicalConstants = CONSTANTS
) -> np.ndarray:
    """Forward model for every entry; entries whose levels cannot be labelled are NaN"""
    cache = {}
    values = np.empty(len(dataset))
    for i, entry in enumerate(dataset):
        key = entry.field.b
        if key not in cache:
            try:
                cache[key] = deer_frequencies(system, entry.field, constants)
            except LabelingError as e:
                logger.warning(f'Entry {i}: no prediction at B = {key} T: {e}')
                cache[key] = None
        values[i] = math.nan if cache[key] is None else _observable_value(cache[key], entry.observable)
    return values


def synthesize_dataset(
    system: SpinPairSystem,
    fields: Sequence[FieldSetting],
    observables: Sequence[Observable] = (Observable.DNU1, Observable.DNU2),
    relative_sigma: float = 0.02,
    noise: bool = False,
    rng: Optional[np.random.Generator] = None,
    constants: PhysicalConstants = CONSTANTS,
) -> DeerDataset:
    """Dataset predicted for a known geometry, optionally with Gaussian noise of relative_sigma"""
    relative_sigma = checked_positive('relative_sigma', relative_sigma)
    if noise and rng is None:
        raise ValueError('Noisy datasets require a random generator')
    entries = []
    for f in fields:
        frequencies = deer_frequencies(system, f, constants)
        for observable in observables:
            observable = enum_member_lookup(Observable, observable)
            value = _observable_value(frequencies, observable)
            sigma = max(relative_sigma * abs(value), 1.0)
            if noise:
                value += sigma * rng.standard_normal()
            entries.append(DeerEntry(f, observable, value, sigma))
    return DeerDataset(tuple(entries))


@dataclass(frozen=True, eq=False)
class GeometryCandidate:
    displacement: np.ndarray
    axis_b: np.ndarray
    residual: float

    def distance_to(self, other: 'GeometryCandidate') -> float:
        return float(np.linalg.norm(self.displacement - other.displacement))


@dataclass(frozen=True, eq=False)
class GeometryEstimate:
    """Best-fit displacement from A to B (m) and its covariance (m^2)"""

    displacement: np.ndarray
    covariance: np.ndarray
    axis_a: np.ndarray
    axis_b: np.ndarray
    residual: float
    dof: int
    axis_margin: float = math.inf
    alternatives: Tuple[GeometryCandidate, ...] = ()

    def __post_init__(self):
        cov = np.array(self.covariance, dtype=float)
        if cov.shape != (3, 3):
            raise ValueError(f'Covariance must be 3x3: {cov.shape}')
        cov = 0.5 * (cov + cov.T)
        if np.min(np.linalg.eigvalsh(cov)) < -1e-12 * max(float(np.max(np.abs(cov))), 1e-300):
            raise ValueError('Covariance is not positive semidefinite')
        object.__setattr__(self, 'covariance', cov)
        object.__setattr__(self, 'displacement', checked_vector('displacement', self.displacement))
        object.__setattr__(self, 'axis_a', checked_unit_vector('axis_a', self.axis_a))
        object.__setattr__(self, 'axis_b', checked_unit_vector('axis_b', self.axis_b))

    @property
    def distance(self) -> float:
        return float(np.linalg.norm(self.displacement))

    @property
    def lateral_distance(self) -> float:
        return float(np.hypot(self.displacement[0], self.displacement[1]))

    @property
    def sigma(self) -> np.ndarray:
        """1-sigma uncertainties of the displacement components"""
        return np.sqrt(np.diag(self.covariance))

    @property
    def distance_sigma(self) -> float:
        u = self.displacement / self.distance
        return float(math.sqrt(max(u @ self.covariance @ u, 0.0)))

    def system(self, template: SpinPairSystem) -> SpinPairSystem:
        b = template.center_b
        return SpinPairSystem(
            template.center_a, NVCenter(tuple(self.axis_b), b.d, b.e), tuple(self.displacement)
        )

    def report_lines(self) -> List[str]:
        d_nm = self.displacement / _NM
        s_nm = self.sigma / _NM
        lines = [
            'displacement_nm = ' + ' '.join(f'{v:.4f}' for v in d_nm),
            'sigma_nm = ' + ' '.join(f'{v:.4f}' for v in s_nm),
            f'distance_nm = {self.distance / _NM:.4f} +- {self.distance_sigma / _NM:.4f}',
            f'lateral_distance_nm = {self.lateral_distance / _NM:.4f}',
            'axis_a = ' + ' '.join(f'{v:.6f}' for v in self.axis_a),
            'axis_b = ' + ' '.join(f'{v:.6f}' for v in self.axis_b),
            f'chi_square = {self.residual:.6g}',
            f'dof = {self.dof}',
            f'axis_margin = {self.axis_margin:.6g}',
        ]
        for k, alt in enumerate(self.alternatives):
            lines.append(
                f'alternative_{k} = '
                + ' '.join(f'{v:.4f}' for v in alt.displacement / _NM)
                + f' chi_square {alt.residual:.6g}'
            )
        return lines

    def to_json(self) -> Dict[str, Any]:
        return {
            'displacement': self.displacement.tolist(),
            'covariance': self.covariance.tolist(),
            'axis_a': self.axis_a.tolist(),
            'axis_b': self.axis_b.tolist(),
            'residual': self.residual,
            'dof': self.dof,
            'axis_margin': self.axis_margin,
            'alternatives': [
                {'displacement': a.displacement.tolist(), 'axis_b': a.axis_b.tolist(), 'residual': a.residual}
                for a in self.alternatives
            ],
        }

    @classmethod
    def from_json(cls, data: Dict[str, Any]) -> 'GeometryEstimate':
        return cls(
            np.array(data['displacement']),
            np.array(data['covariance']),
            np.array(data['axis_a']),
            np.array(data['axis_b']),
            data['residual'],
            data['dof'],
            data['axis_margin'],
            tuple(
                GeometryCandidate(np.array(a['displacement']), np.array(a['axis_b']), a['residual'])
                for a in data['alternatives']
            ),
        )


def start_directions() -> np.ndarray:
    """The 26 non-zero points of {-1, 0, 1}^3, normalized"""
    points = np.array([p for p in itertools.product((-1, 0, 1), repeat=3) if any(p)], dtype=float)
    return points / np.linalg.norm(points, axis=1)[:, None]


def start_radius(dataset: DeerDataset, constants: PhysicalConstants = CONSTANTS) -> float:
    """Distance at which the dipolar prefactor equals the mean measured coupling"""
    mean = float(np.mean(np.abs(dataset.values)))
    if mean <= 0.0:
        raise ValueError('Dataset carries no coupling')
    return (constants.dipolar_prefactor(1.0) / mean) ** (1.0 / 3.0)


class _Problem:
    """Weighted residuals of a dataset as a function of the displacement in nm"""

    def __init__(self, dataset: DeerDataset, template: SpinPairSystem, axis_b: np.ndarray, constants):
        b = template.center_b
        self.dataset = dataset
        self.center_a = template.center_a
        self.center_b = NVCenter(tuple(axis_b), b.d, b.e)
        self.axis_b = np.array(axis_b)
        self.constants = constants
        self.values = dataset.values
        self.sigmas = dataset.sigmas

    def system(self, x_nm: np.ndarray) -> SpinPairSystem:
        return SpinPairSystem(self.center_a, self.center_b, tuple(np.asarray(x_nm) * _NM))

    def residuals(self, x_nm: np.ndarray) -> np.ndarray:
        try:
            predicted = _forward(self.system(x_nm), self.dataset, self.constants)
        except (LabelingError, ValueError):
            return np.full(len(self.values), PENALTY_RESIDUAL)
        return (predicted - self.values) / self.sigmas

    def chi_square(self, x_nm: np.ndarray) -> float:
        return float(np.sum(self.residuals(x_nm) ** 2))

    def solve(self, x0_nm: np.ndarray, max_nfev: Optional[int] = None) -> GeometryCandidate:
        result = scipy.optimize.least_squares(
            self.residuals, x0_nm, method='lm', jac='3-point', diff_step=1e-3, max_nfev=max_nfev
        )
        return GeometryCandidate(np.array(result.x), self.axis_b, float(2.0 * result.cost))

    def jacobian(self, x_nm: np.ndarray, rel_step: float = 1e-3) -> np.ndarray:
        """Central-difference Jacobian d residual / d x_nm"""
        x = np.asarray(x_nm, dtype=float)
        jac = np.empty((len(self.values), 3))
        for k in range(3):
            h = rel_step * max(abs(x[k]), 1.0)
            step = np.zeros(3)
            step[k] = h
            jac[:, k] = (self.residuals(x + step) - self.residuals(x - step)) / (2.0 * h)
        return jac


def _covariance(problem: _Problem, x_nm: np.ndarray) -> np.ndarray:
    jac = problem.jacobian(x_nm)
    return np.linalg.pinv(jac.T @ jac) * _NM**2


def geometry_covariance(
    system: SpinPairSystem, dataset: DeerDataset, constants: PhysicalConstants = CONSTANTS
) -> np.ndarray:
    """(J^T J)^-1 of the weighted residuals at a given geometry, in m^2"""
    problem = _Problem(dataset, system, np.array(system.center_b.axis), constants)
    return _covariance(problem, np.array(system.displacement) / _NM)


def _deduplicated(candidates: List[GeometryCandidate]) -> List[GeometryCandidate]:
    kept = []
    for c in sorted(candidates, key=lambda c: c.residual):
        if not math.isfinite(c.residual):
            continue
        same = [
            k for k in kept if np.allclose(k.axis_b, c.axis_b) and k.distance_to(c) < SAME_MINIMUM_NM
        ]
        if not same:
            kept.append(c)
    return kept


def _axis_key(axis: np.ndarray) -> Tuple[float, ...]:
    return tuple(np.round(axis, 12))


def _shortlist(screened: List[GeometryCandidate]) -> List[GeometryCandidate]:
    """Best distinct screened minima, at most REFINED_PER_AXIS for every B axis"""
    counts = {}
    shortlist = []
    for c in _deduplicated(screened):
        key = _axis_key(c.axis_b)
        if counts.get(key, 0) < REFINED_PER_AXIS:
            counts[key] = counts.get(key, 0) + 1
            shortlist.append(c)
    return shortlist


def fit_geometry(
    dataset: DeerDataset,
    template: SpinPairSystem,
    constants: PhysicalConstants = CONSTANTS,
    axes_b: Optional[Sequence[Sequence[float]]] = None,
    chi2_tolerance: float = 1.0,
    threads: Optional[int] = None,
    silent: bool = False,
) -> GeometryEstimate:
    """Least-squares displacement of B and B's NV axis.

    The axis and zero-field parameters of A, and the zero-field parameters of B, are taken from
    `template`; its displacement is ignored. Every start direction is first screened with a
    limited number of evaluations, the distinct screened minima are then refined to convergence.
    """
    if len(dataset) < MIN_DATASET_ENTRIES:
        raise ValueError(
            f'insufficient data: {len(dataset)} entries, at least {MIN_DATASET_ENTRIES} are needed'
        )
    axes = nv_axes() if axes_b is None else np.array([checked_unit_vector('axis_b', a, True) for a in axes_b])
    r0_nm = start_radius(dataset, constants) / _NM
    problems = [_Problem(dataset, template, axis, constants) for axis in axes]
    starts = [(p, r0_nm * d) for p in problems for d in start_directions()]
    if not silent:
        logger.info(f'Fitting {len(dataset)} entries from {len(starts)} starts at r0 = {r0_nm:.3f} nm')

    workers = worker_threads(threads)
    with ThreadPoolExecutor(max_workers=workers) as executor:
        screened = list(executor.map(lambda s: s[0].solve(s[1], SCREENING_EVALUATIONS), starts))
        shortlist = _shortlist(screened)
        refined = list(
            executor.map(
                lambda c: _problem_for(problems, c.axis_b).solve(c.displacement),
                shortlist,
            )
        )
    minima = _deduplicated(refined)
    if not minima or minima[0].residual >= PENALTY_RESIDUAL**2:
        best = minima[0].residual if minima else math.inf
        raise ConvergenceError(f'No start converged for {len(dataset)} entries', best)

    best = minima[0]
    problem = _problem_for(problems, best.axis_b)
    twin = problem.solve(-best.displacement)
    if twin.distance_to(best) >= SAME_MINIMUM_NM:
        minima = _deduplicated(minima + [twin])

    per_axis = {}
    for c in minima:
        key = _axis_key(c.axis_b)
        per_axis[key] = min(per_axis.get(key, math.inf), c.residual)
    others = [v for k, v in per_axis.items() if k != _axis_key(best.axis_b)]
    margin = min(others) - best.residual if others else math.inf
    alternatives = tuple(
        c for c in minima[1:] if c.residual <= best.residual + chi2_tolerance and np.allclose(c.axis_b, best.axis_b)
    )
    cov = _covariance(problem, best.displacement)
    estimate = GeometryEstimate(
        best.displacement * _NM,
        cov,
        np.array(template.center_a.axis),
        best.axis_b,
        best.residual,
        len(dataset) - 3,
        margin,
        tuple(GeometryCandidate(c.displacement * _NM, c.axis_b, c.residual) for c in alternatives),
    )
    if not silent:
        logger.info(
            f'Best fit r = {estimate.distance / _NM:.3f} nm, chi-square {best.residual:.4g}, '
            f'{len(alternatives)} alternative(s), axis margin {margin:.4g}'
        )
    return estimate


def _problem_for(problems: Sequence[_Problem], axis_b: np.ndarray) -> _Problem:
    for p in problems:
        if np.allclose(p.axis_b, axis_b):
            return p
    raise LookupError(f'No problem for axis {axis_b}')


@dataclass(frozen=True)
class LatticeSite:
    indices: Tuple[int, int, int]
    sublattice: int
    origin_basis: int
    position: Tuple[float, float, float]
    mahalanobis: float = 0.0

    def to_json(self) -> Dict[str, Any]:
        return {
            'indices': list(self.indices),
            'sublattice': self.sublattice,
            'origin_basis': self.origin_basis,
            'position': list(self.position),
            'mahalanobis': self.mahalanobis,
        }


def fcc_vectors(a: float = DIAMOND_LATTICE_CONSTANT) -> np.ndarray:
    """Primitive vectors of the fcc lattice as rows"""
    return 0.5 * a * np.array([[0.0, 1.0, 1.0], [1.0, 0.0, 1.0], [1.0, 1.0, 0.0]])


def basis_offset(a: float = DIAMOND_LATTICE_CONSTANT) -> np.ndarray:
    return 0.25 * a * np.ones(3)


def lattice_position(
    indices: Sequence[int], sublattice: int, origin_basis: int = 0, a: float = DIAMOND_LATTICE_CONSTANT
) -> np.ndarray:
    """Site position relative to an origin on sublattice origin_basis.

    Seen from a site of the second sublattice the crystal is inverted.
    """
    if sublattice not in (0, 1) or origin_basis not in (0, 1):
        raise ValueError(f'Basis indices must be 0 or 1: {sublattice}, {origin_basis}')
    p = np.asarray(indices, dtype=float) @ fcc_vectors(a) + sublattice * basis_offset(a)
    return p if origin_basis == 0 else -p


def _raise_for_ellipsoid(covariance: np.ndarray) -> np.ndarray:
    cov = np.array(covariance, dtype=float)
    if cov.shape != (3, 3) or not np.allclose(cov, cov.T, rtol=1e-9, atol=0.0):
        raise ValueError('Ellipsoid covariance must be a symmetric 3x3 matrix')
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as e:
        raise ValueError('Degenerate ellipsoid: covariance is not positive definite') from e
    return cov


def enumerate_sites(
    center: Sequence[float],
    covariance: np.ndarray,
    scale: float = 1.0,
    origin_basis: int = 0,
    a: float = DIAMOND_LATTICE_CONSTANT,
) -> List[LatticeSite]:
    """Diamond-lattice sites with Mahalanobis distance <= scale, nearest first"""
    c = checked_vector('center', center)
    cov = _raise_for_ellipsoid(covariance)
    scale = checked_positive('scale', scale)
    if origin_basis not in (0, 1):
        raise ValueError(f'Origin basis must be 0 or 1: {origin_basis}')
    inv = np.linalg.inv(cov)
    half_widths = scale * np.sqrt(np.diag(cov))
    m_inv = np.linalg.inv(fcc_vectors(a))
    sign = 1.0 if origin_basis == 0 else -1.0
    sites = []
    for sublattice in (0, 1):
        # p = sign * (n @ P + s t)  =>  n = (sign * p - s t) @ P^-1
        n_center = (sign * c - sublattice * basis_offset(a)) @ m_inv
        n_half = np.abs(m_inv).T @ half_widths
        lo = np.floor(n_center - n_half).astype(int) - 1
        hi = np.ceil(n_center + n_half).astype(int) + 1
        grid = np.stack(
            np.meshgrid(*[np.arange(lo[k], hi[k] + 1) for k in range(3)], indexing='ij'), axis=-1
        ).reshape(-1, 3)
        positions = sign * (grid @ fcc_vectors(a) + sublattice * basis_offset(a))
        delta = positions - c
        d2 = np.einsum('ij,jk,ik->i', delta, inv, delta)
        for idx in np.nonzero(d2 <= scale**2)[0]:
            sites.append(
                LatticeSite(
                    tuple(int(v) for v in grid[idx]),
                    sublattice,
                    origin_basis,
                    tuple(float(v) for v in positions[idx]),
                    float(math.sqrt(max(d2[idx], 0.0))),
                )
            )
    sites.sort(key=lambda s: (round(s.mahalanobis, 12), s.position))
    return sites


def brute_force_sites(
    center: Sequence[float],
    covariance: np.ndarray,
    scale: float = 1.0,
    origin_basis: int = 0,
    cells: int = 8,
    a: float = DIAMOND_LATTICE_CONSTANT,
) -> np.ndarray:
    """Positions inside the ellipsoid from a scan of conventional cubic cells around the origin"""
    c = checked_vector('center', center)
    cov = _raise_for_ellipsoid(covariance)
    inv = np.linalg.inv(cov)
    fcc = np.array([[0, 0, 0], [0, 0.5, 0.5], [0.5, 0, 0.5], [0.5, 0.5, 0]])
    base = np.vstack([fcc, fcc + 0.25])
    r = np.arange(-cells, cells + 1)
    corners = np.stack(np.meshgrid(r, r, r, indexing='ij'), axis=-1).reshape(-1, 3)
    positions = a * (corners[:, None, :] + base[None, :, :]).reshape(-1, 3)
    if origin_basis == 1:
        positions = -positions
    delta = positions - c
    d2 = np.einsum('ij,jk,ik->i', delta, inv, delta)
    inside = positions[d2 <= scale**2]
    return inside[np.lexsort(inside.T[::-1])]


def coulomb_field(r: float, eps_r: Optional[float] = None, constants: PhysicalConstants = CONSTANTS) -> float:
    """Field (V/m) of an elementary charge at distance r (m), screened by eps_r"""
    r = checked_positive('r', r)
    eps_r = constants.eps_r_diamond if eps_r is None else checked_positive('eps_r', eps_r)
    return constants.elementary_charge / (4.0 * math.pi * constants.eps0 * eps_r * r**2)


def stark_splitting(e_perp: float) -> float:
    """Transverse zero-field splitting (Hz) induced by a perpendicular electric field (V/m)"""
    return STARK_HZ_PER_V_PER_M * checked_real('e_perp', e_perp, 0.0)


def transverse_component(vector: Sequence[float], axis: Sequence[float]) -> float:
    v = checked_vector('vector', vector)
    n = checked_unit_vector('axis', axis, normalize=True)
    return float(np.linalg.norm(v - np.dot(v, n) * n))


@dataclass(frozen=True)
class StrainReport:
    field: float
    bound: float
    estimate_a: float
    estimate_b: float
    measured_a: float
    measured_b: float

    @property
    def ratio_a(self) -> float:
        return self.measured_a / self.bound

    @property
    def ratio_b(self) -> float:
        return self.measured_b / self.bound

    @property
    def coulomb_explains(self) -> bool:
        return self.measured_a <= self.bound and self.measured_b <= self.bound

    def lines(self) -> List[str]:
        lines = [
            f'coulomb_field_MV_per_m = {self.field / 1e6:.4f}',
            f'stark_bound_MHz = {self.bound / 1e6:.4f}',
            f'stark_estimate_MHz = {self.estimate_a / 1e6:.4f} {self.estimate_b / 1e6:.4f}',
            f'measured_E_MHz = {self.measured_a / 1e6:.4f} {self.measured_b / 1e6:.4f}',
            f'measured_over_bound = {self.ratio_a:.2f} {self.ratio_b:.2f}',
        ]
        if self.coulomb_explains:
            lines.append('measured splittings are within the Coulomb bound')
        else:
            lines.append('measured splittings exceed the Coulomb bound: local strain dominates')
        return lines


def strain_report(
    displacement: Sequence[float],
    axis_a: Sequence[float],
    axis_b: Sequence[float],
    measured_e: Tuple[float, float],
    projections: Optional[Tuple[float, float]] = None,
    constants: PhysicalConstants = CONSTANTS,
) -> StrainReport:
    """Compare measured E splittings with the Stark shift of one centre's charge at the other.

    `projections` are the fractions of the field perpendicular to each NV axis; by default they
    follow from the geometry.
    """
    r = checked_vector('displacement', displacement)
    distance = float(np.linalg.norm(r))
    field_strength = coulomb_field(distance, constants=constants)
    if projections is None:
        projections = (
            transverse_component(r, axis_a) / distance,
            transverse_component(r, axis_b) / distance,
        )
    fa, fb = (checked_real('projection', p, 0.0, 1.0) for p in projections)
    return StrainReport(
        field_strength,
        stark_splitting(field_strength),
        stark_splitting(fa * field_strength),
        stark_splitting(fb * field_strength),
        checked_real('measured_e', measured_e[0], 0.0),
        checked_real('measured_e', measured_e[1], 0.0),
    )
