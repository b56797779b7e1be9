"""Spin-1 operators and the Hamiltonian of a dipolar-coupled pair of NV centres.

All Hamiltonians are stored in frequency units (Hz, energy divided by h). The spin operators
of each centre are expressed in that centre's own frame, so the product basis |m_A, m_B>
labels projections along each centre's NV axis. Basis order is
|-1,-1>, |-1,0>, |-1,+1>, |0,-1>, ..., |+1,+1>.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg

from nvreg.enums import Spin, Observable, enum_member_lookup
from nvreg.primitives import (
    NvregError,
    checked_displacement,
    checked_field,
    checked_positive,
    checked_real,
    checked_unit_vector,
    float_almost_equal,
    float_seq_almost_equal,
    is_hermitian,
    max_norm,
)

logger = logging.getLogger(__name__)

M_VALUES = (-1, 0, 1)
PAIR_LABELS = tuple((ma, mb) for ma in M_VALUES for mb in M_VALUES)
DEFAULT_D = 2.87e9
LABEL_MIN_OVERLAP = 0.5
# eigenvalues closer than this (relative to the matrix max-norm) are treated as degenerate
DEGENERACY_RTOL = 1e-9
# an NV axis closer than this to the x axis builds its transverse frame from the y axis
_FRAME_REF_COS = math.cos(math.radians(25.0))


class LabelingError(NvregError):
    pass


def m_index(m: int) -> int:
    if m not in M_VALUES:
        raise ValueError(f'Spin projection must be one of {M_VALUES}: {m}')
    return m + 1


def label_index(m_a: int, m_b: int) -> int:
    return 3 * m_index(m_a) + m_index(m_b)


def spin_label(spin: Spin, m_self: int, m_partner: int) -> Tuple[int, int]:
    return (m_self, m_partner) if spin == Spin.A else (m_partner, m_self)


@dataclass(frozen=True)
class PhysicalConstants:
    """CODATA values plus the NV ground state g-factor and the permittivity of diamond"""

    mu0: float = 1.25663706212e-6
    mu_b: float = 9.2740100783e-24
    g_e: float = 2.0028
    h: float = 6.62607015e-34
    eps0: float = 8.8541878128e-12
    elementary_charge: float = 1.602176634e-19
    eps_r_diamond: float = 5.7

    @property
    def gamma_e(self) -> float:
        """Gyromagnetic ratio in Hz/T"""
        return self.g_e * self.mu_b / self.h

    def dipolar_prefactor(self, r: float) -> float:
        """mu0 g^2 muB^2 / (4 pi r^3 h) in Hz for a separation r in meters"""
        r = checked_positive('r', r)
        return self.mu0 * (self.g_e * self.mu_b) ** 2 / (4.0 * math.pi * r**3 * self.h)

    def to_json(self) -> Dict[str, Any]:
        return {
            'mu0': self.mu0,
            'mu_b': self.mu_b,
            'g_e': self.g_e,
            'h': self.h,
            'eps0': self.eps0,
            'elementary_charge': self.elementary_charge,
            'eps_r_diamond': self.eps_r_diamond,
        }

    @classmethod
    def from_json(cls, data: Dict[str, Any]) -> 'PhysicalConstants':
        return cls(**data)


CONSTANTS = PhysicalConstants()


def nv_axes() -> np.ndarray:
    """The four <111> unit vectors in a lab frame with z along [001]"""
    return np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float) / math.sqrt(
        3.0
    )


def spin1_operators() -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sx, Sy, Sz for S=1 in the basis order (-1, 0, +1)"""
    s = 1.0 / math.sqrt(2.0)
    sx = np.array([[0, s, 0], [s, 0, s], [0, s, 0]], dtype=complex)
    sy = np.array([[0, 1j * s, 0], [-1j * s, 0, 1j * s], [0, -1j * s, 0]], dtype=complex)
    sz = np.diag([-1.0, 0.0, 1.0]).astype(complex)
    return sx, sy, sz


@dataclass(frozen=True)
class NVCenter:
    axis: Tuple[float, float, float] = (0.0, 0.0, 1.0)
    d: float = DEFAULT_D
    e: float = 0.0

    def __post_init__(self):
        axis = checked_unit_vector('axis', self.axis)
        object.__setattr__(self, 'axis', tuple(float(c) for c in axis))
        object.__setattr__(self, 'd', checked_positive('D', self.d, 1e12))
        object.__setattr__(self, 'e', checked_real('E', self.e, 0.0, self.d))

    @classmethod
    def along(cls, direction: Sequence[float], d: float = DEFAULT_D, e: float = 0.0) -> 'NVCenter':
        axis = checked_unit_vector('axis', direction, normalize=True)
        return cls(tuple(axis), d, e)

    def rotation(self) -> np.ndarray:
        """Columns are the centre's x', y', z' axes in lab coordinates"""
        n = np.array(self.axis)
        ref = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < _FRAME_REF_COS else np.array([0.0, 1.0, 0.0])
        u = ref - np.dot(ref, n) * n
        u /= np.linalg.norm(u)
        v = np.cross(n, u)
        return np.column_stack([u, v, n])

    def lab_spin_operators(self) -> List[np.ndarray]:
        """Lab-frame components of the spin vector, S_lab_i = sum_j R_ij S'_j"""
        rot = self.rotation()
        ops = spin1_operators()
        return [sum(rot[i, j] * ops[j] for j in range(3)) for i in range(3)]

    def to_json(self) -> Dict[str, Any]:
        return {'axis': list(self.axis), 'd': self.d, 'e': self.e}

    @classmethod
    def from_json(cls, data: Dict[str, Any]) -> 'NVCenter':
        return cls(tuple(data['axis']), data['d'], data['e'])


@dataclass(frozen=True)
class FieldSetting:
    b: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, 'b', tuple(float(c) for c in checked_field('B', self.b)))

    @classmethod
    def along(cls, direction: Sequence[float], magnitude: float) -> 'FieldSetting':
        unit = checked_unit_vector('direction', direction, normalize=True)
        magnitude = checked_real('magnitude', magnitude)
        return cls(tuple(magnitude * unit))

    @property
    def magnitude(self) -> float:
        return float(np.linalg.norm(self.b))

    def scaled(self, factor: float) -> 'FieldSetting':
        return FieldSetting(tuple(factor * np.array(self.b)))

    def to_json(self) -> Dict[str, Any]:
        return {'b': list(self.b)}

    @classmethod
    def from_json(cls, data: Dict[str, Any]) -> 'FieldSetting':
        return cls(tuple(data['b']))


@dataclass(frozen=True)
class SpinPairSystem:
    """Two NV centres and the displacement from A to B in meters.

    Lab frame: z is the surface normal, the x-y plane is parallel to the diamond surface.
    """

    center_a: NVCenter
    center_b: NVCenter
    displacement: Tuple[float, float, float]

    def __post_init__(self):
        vec = checked_displacement('displacement', self.displacement)
        object.__setattr__(self, 'displacement', tuple(float(c) for c in vec))

    @property
    def distance(self) -> float:
        return float(np.linalg.norm(self.displacement))

    @property
    def lateral_distance(self) -> float:
        return float(np.hypot(self.displacement[0], self.displacement[1]))

    @property
    def unit_vector(self) -> np.ndarray:
        return np.array(self.displacement) / self.distance

    def center(self, spin: Spin) -> NVCenter:
        return self.center_a if spin == Spin.A else self.center_b

    def swapped(self) -> 'SpinPairSystem':
        return SpinPairSystem(self.center_b, self.center_a, tuple(-np.array(self.displacement)))

    def with_displacement(self, displacement: Sequence[float]) -> 'SpinPairSystem':
        return SpinPairSystem(self.center_a, self.center_b, tuple(displacement))

    def __eq__(self, other: 'SpinPairSystem') -> bool:
        return (
            type(self) == type(other)
            and self.center_a == other.center_a
            and self.center_b == other.center_b
            and float_seq_almost_equal(self.displacement, other.displacement, 1e-12)
        )

    def to_json(self) -> Dict[str, Any]:
        return {
            'center_a': self.center_a.to_json(),
            'center_b': self.center_b.to_json(),
            'displacement': list(self.displacement),
        }

    @classmethod
    def from_json(cls, data: Dict[str, Any]) -> 'SpinPairSystem':
        return cls(
            NVCenter.from_json(data['center_a']),
            NVCenter.from_json(data['center_b']),
            tuple(data['displacement']),
        )


@dataclass(frozen=True, eq=False)
class PairHamiltonian:
    """9x9 Hermitian matrix in Hz plus the single-centre blocks it was assembled from"""

    matrix: np.ndarray
    single_a: Optional[np.ndarray] = None
    single_b: Optional[np.ndarray] = None

    def __post_init__(self):
        matrix = np.array(self.matrix, dtype=complex)
        if matrix.shape != (9, 9):
            raise ValueError(f'Pair Hamiltonian must be 9x9: {matrix.shape}')
        if not is_hermitian(matrix):
            raise ValueError('Pair Hamiltonian is not Hermitian')
        matrix.setflags(write=False)
        object.__setattr__(self, 'matrix', matrix)
        for key in ('single_a', 'single_b'):
            block = getattr(self, key)
            if block is not None:
                block = np.array(block, dtype=complex)
                if block.shape != (3, 3) or not is_hermitian(block):
                    raise ValueError(f'Wrong single-centre block {key}')
                block.setflags(write=False)
                object.__setattr__(self, key, block)


@dataclass(frozen=True, eq=False)
class Eigensystem:
    values: np.ndarray
    vectors: np.ndarray


def single_center_hamiltonian(
    center: NVCenter, field_setting: FieldSetting, constants: PhysicalConstants = CONSTANTS
) -> np.ndarray:
    """D Sz'^2 + E (Sx'^2 - Sy'^2) + gamma B.S in the centre's own frame (Hz)"""
    sx, sy, sz = spin1_operators()
    b_local = center.rotation().T @ np.array(field_setting.b)
    h = center.d * sz @ sz + center.e * (sx @ sx - sy @ sy)
    h = h + constants.gamma_e * (b_local[0] * sx + b_local[1] * sy + b_local[2] * sz)
    return h


def dipolar_hamiltonian(system: SpinPairSystem, constants: PhysicalConstants = CONSTANTS) -> np.ndarray:
    """J [S_A.S_B - 3 (S_A.r)(S_B.r)] with J = mu0 g^2 muB^2 / (4 pi r^3 h)"""
    rhat = system.unit_vector
    coupling = constants.dipolar_prefactor(system.distance)
    tensor = np.eye(3) - 3.0 * np.outer(rhat, rhat)
    ops_a = system.center_a.lab_spin_operators()
    ops_b = system.center_b.lab_spin_operators()
    h = np.zeros((9, 9), dtype=complex)
    for i in range(3):
        for j in range(3):
            if tensor[i, j] != 0.0:
                h += tensor[i, j] * np.kron(ops_a[i], ops_b[j])
    return coupling * h


def _uncoupled(h_a: np.ndarray, h_b: np.ndarray) -> np.ndarray:
    eye = np.eye(3)
    return np.kron(h_a, eye) + np.kron(eye, h_b)


def secular_part(
    h_dip: np.ndarray, h_a: np.ndarray, h_b: np.ndarray, tolerance_hz: Optional[float] = None
) -> np.ndarray:
    """Keep the dipolar elements between degenerate levels of the uncoupled Hamiltonian"""
    values_a, vectors_a = scipy.linalg.eigh(h_a)
    values_b, vectors_b = scipy.linalg.eigh(h_b)
    basis = np.kron(vectors_a, vectors_b)
    energies = np.add.outer(values_a, values_b).reshape(-1)
    if tolerance_hz is None:
        tolerance_hz = DEGENERACY_RTOL * max(max_norm(h_a) + max_norm(h_b), 1.0)
    h_eig = basis.conj().T @ h_dip @ basis
    mask = np.abs(energies[:, None] - energies[None, :]) <= tolerance_hz
    return basis @ (h_eig * mask) @ basis.conj().T


def secular_dipolar_hamiltonian(
    system: SpinPairSystem,
    field_setting: FieldSetting,
    constants: PhysicalConstants = CONSTANTS,
    tolerance_hz: Optional[float] = None,
) -> np.ndarray:
    h_a = single_center_hamiltonian(system.center_a, field_setting, constants)
    h_b = single_center_hamiltonian(system.center_b, field_setting, constants)
    return secular_part(dipolar_hamiltonian(system, constants), h_a, h_b, tolerance_hz)


def pair_hamiltonian(
    system: SpinPairSystem,
    field_setting: FieldSetting,
    constants: PhysicalConstants = CONSTANTS,
    secular: bool = False,
    include_dipolar: bool = True,
) -> PairHamiltonian:
    h_a = single_center_hamiltonian(system.center_a, field_setting, constants)
    h_b = single_center_hamiltonian(system.center_b, field_setting, constants)
    h = _uncoupled(h_a, h_b)
    if include_dipolar:
        h_dip = dipolar_hamiltonian(system, constants)
        if secular:
            h_dip = secular_part(h_dip, h_a, h_b)
        h = h + h_dip
    # symmetrize away rounding noise
    h = 0.5 * (h + h.conj().T)
    return PairHamiltonian(h, h_a, h_b)


def _as_matrix(h: Union[PairHamiltonian, np.ndarray]) -> np.ndarray:
    return h.matrix if isinstance(h, PairHamiltonian) else np.asarray(h, dtype=complex)


def eigensystem(h: Union[PairHamiltonian, np.ndarray]) -> Eigensystem:
    """Ascending eigenvalues (Hz) and orthonormal eigenvectors (columns)"""
    matrix = _as_matrix(h)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError(f'Square matrix expected: {matrix.shape}')
    if not is_hermitian(matrix):
        raise ValueError('Eigensystem requested for a non-Hermitian matrix')
    values, vectors = scipy.linalg.eigh(0.5 * (matrix + matrix.conj().T))
    return Eigensystem(values, vectors)


def _degenerate_clusters(values: np.ndarray, tolerance: float) -> List[List[int]]:
    clusters = [[0]]
    for k in range(1, len(values)):
        if values[k] - values[clusters[-1][-1]] <= tolerance:
            clusters[-1].append(k)
        else:
            clusters.append([k])
    return [c for c in clusters if len(c) > 1]


def _align_degenerate(
    values: np.ndarray, vectors: np.ndarray, reference: np.ndarray, tolerance: float
) -> np.ndarray:
    """Rotate eigenvectors of degenerate clusters onto the best matching reference vectors"""
    vectors = vectors.copy()
    for cluster in _degenerate_clusters(values, tolerance):
        sub = vectors[:, cluster]
        weights = np.sum(np.abs(reference.conj().T @ sub) ** 2, axis=1)
        chosen = np.argsort(-weights, kind='stable')[: len(cluster)]
        u, _, wh = np.linalg.svd(sub.conj().T @ reference[:, chosen])
        vectors[:, cluster] = sub @ (u @ wh)
    return vectors


def _fix_phases(vectors: np.ndarray, reference: np.ndarray) -> np.ndarray:
    overlaps = np.sum(reference.conj() * vectors, axis=0)
    phases = np.where(np.abs(overlaps) > 0.0, overlaps / np.maximum(np.abs(overlaps), 1e-300), 1.0)
    return vectors / phases


def _single_center_basis(h_k: np.ndarray, key: str) -> np.ndarray:
    """Eigenvectors of a single centre as columns ordered by label m = -1, 0, +1"""
    values, vectors = scipy.linalg.eigh(h_k)
    tolerance = DEGENERACY_RTOL * max(max_norm(h_k), 1.0)
    vectors = _align_degenerate(values, vectors, np.eye(3), tolerance)
    weights = np.abs(vectors) ** 2
    dominant = np.argmax(weights, axis=0)
    order = [0, 0, 0]
    if sorted(dominant) == [0, 1, 2] and all(weights[dominant[k], k] > LABEL_MIN_OVERLAP for k in range(3)):
        for k in range(3):
            order[dominant[k]] = k
    else:
        zero = int(np.argmax(weights[1, :]))
        rest = sorted((k for k in range(3) if k != zero), key=lambda k: values[k])
        if values[rest[1]] - values[rest[0]] <= tolerance:
            raise LabelingError(f'Cannot label the +-1 levels of centre {key}: levels are degenerate')
        logger.debug(f'Centre {key}: +-1 levels labelled by energy order')
        order = [rest[0], zero, rest[1]]
    basis = vectors[:, order]
    return _fix_phases(basis, np.eye(3))


@dataclass(frozen=True, eq=False)
class LabeledSpectrum:
    """Eigenlevels indexed by their adiabatic |m_A, m_B> label"""

    energies: np.ndarray
    vectors: np.ndarray

    def energy(self, m_a: int, m_b: int) -> float:
        return float(self.energies[label_index(m_a, m_b)])

    def vector(self, m_a: int, m_b: int) -> np.ndarray:
        return self.vectors[:, label_index(m_a, m_b)]

    def transition(self, spin: Spin, m_from: int, m_to: int, partner_state: int) -> float:
        """Signed frequency E(m_to) - E(m_from) of one spin with the partner fixed"""
        if m_from == m_to:
            raise ValueError(f'Transition levels must differ: {m_from}:{m_to}')
        return self.energy(*spin_label(spin, m_to, partner_state)) - self.energy(
            *spin_label(spin, m_from, partner_state)
        )

    def line_shift(
        self, spin: Spin, m_from: int, m_to: int, partner_from: int, partner_to: int
    ) -> float:
        """Signed change of a transition frequency when the partner moves between two states"""
        return self.transition(spin, m_from, m_to, partner_to) - self.transition(
            spin, m_from, m_to, partner_from
        )

    def deer_frequencies(self, spin: Spin = Spin.A, transition: Tuple[int, int] = (0, -1)) -> Tuple[float, float]:
        dnu1 = self.line_shift(spin, transition[0], transition[1], 0, -1)
        dnu2 = self.line_shift(spin, transition[0], transition[1], 0, 1)
        return abs(dnu1), abs(dnu2)


def labeled_spectrum(h: PairHamiltonian) -> LabeledSpectrum:
    """Label every eigenlevel by its dominant product of single-centre eigenstates.

    Raises LabelingError when a level has no component above 0.5 or two levels claim the
    same label.
    """
    matrix = _as_matrix(h)
    if isinstance(h, PairHamiltonian) and h.single_a is not None and h.single_b is not None:
        reference = np.kron(_single_center_basis(h.single_a, 'A'), _single_center_basis(h.single_b, 'B'))
    else:
        reference = np.eye(9, dtype=complex)
    eig = eigensystem(matrix)
    tolerance = DEGENERACY_RTOL * max(max_norm(matrix), 1.0)
    vectors = _align_degenerate(eig.values, eig.vectors, reference, tolerance)
    weights = np.abs(reference.conj().T @ vectors) ** 2
    dominant = np.argmax(weights, axis=0)
    for k in range(9):
        if weights[dominant[k], k] <= LABEL_MIN_OVERLAP:
            raise LabelingError(
                f'Eigenlevel {k} at {eig.values[k]:.6e} Hz has no dominant product state '
                f'(largest overlap {weights[dominant[k], k]:.3f} with {PAIR_LABELS[dominant[k]]})'
            )
    if len(set(dominant.tolist())) != 9:
        raise LabelingError(f'Eigenlevels claim duplicate labels: {dominant.tolist()}')
    order = np.argsort(dominant)
    energies = eig.values[order]
    vectors = _fix_phases(vectors[:, order], reference)
    energies.setflags(write=False)
    vectors.setflags(write=False)
    return LabeledSpectrum(energies, vectors)


def transition_frequency(h: PairHamiltonian, spin: Spin, m_from: int, m_to: int, partner_state: int) -> float:
    spin = enum_member_lookup(Spin, spin)
    return abs(labeled_spectrum(h).transition(spin, m_from, m_to, partner_state))


def transition_table(h: PairHamiltonian) -> List[Dict[str, Any]]:
    """All labelled single-quantum transitions of both spins for every partner state"""
    spectrum = labeled_spectrum(h)
    rows = []
    for spin in Spin:
        for m_from, m_to in ((0, -1), (0, 1)):
            for partner in M_VALUES:
                rows.append(
                    {
                        'spin': spin.value,
                        'm_from': m_from,
                        'm_to': m_to,
                        'partner': partner,
                        'frequency_hz': abs(spectrum.transition(spin, m_from, m_to, partner)),
                    }
                )
    return rows


def _raise_for_zero_field(system: SpinPairSystem, field_setting: FieldSetting) -> None:
    if field_setting.magnitude == 0.0 and system.center_a.e == 0.0 and system.center_b.e == 0.0:
        raise LabelingError('DEER frequencies are ill-posed at zero field with E = 0')


def deer_frequencies(
    system: SpinPairSystem,
    field_setting: FieldSetting,
    constants: PhysicalConstants = CONSTANTS,
    spin: Spin = Spin.A,
    transition: Tuple[int, int] = (0, -1),
) -> Tuple[float, float]:
    """(dnu1, dnu2): shifts of a spin's transition when the partner flips 0->-1 and 0->+1"""
    _raise_for_zero_field(system, field_setting)
    h = pair_hamiltonian(system, field_setting, constants)
    return labeled_spectrum(h).deer_frequencies(spin, transition)


def deer_observable(spectrum: LabeledSpectrum, observable: Observable) -> float:
    dnu1, dnu2 = spectrum.deer_frequencies()
    if observable == Observable.DNU1:
        return dnu1
    if observable == Observable.DNU2:
        return dnu2
    return dnu1 + dnu2


def flip_shift(
    system: SpinPairSystem,
    field_setting: FieldSetting,
    partner_from: int,
    partner_to: int,
    constants: PhysicalConstants = CONSTANTS,
    spin: Spin = Spin.A,
    transition: Tuple[int, int] = (0, -1),
) -> float:
    """Magnitude of the line shift for an arbitrary partner flip, e.g. -1 -> +1"""
    _raise_for_zero_field(system, field_setting)
    spectrum = labeled_spectrum(pair_hamiltonian(system, field_setting, constants))
    return abs(spectrum.line_shift(spin, transition[0], transition[1], partner_from, partner_to))


def spin_expectation(vector: Sequence[complex], spin: Spin, system: SpinPairSystem) -> np.ndarray:
    """Lab-frame <S> of one spin for a 9-component pair state"""
    spin = enum_member_lookup(Spin, spin)
    psi = np.asarray(vector, dtype=complex).reshape(-1)
    if psi.shape != (9,):
        raise ValueError(f'Pair state must have 9 components: {psi.shape}')
    norm = np.linalg.norm(psi)
    if norm == 0.0:
        raise ValueError('Zero state vector')
    psi = psi / norm
    eye = np.eye(3)
    ops = system.center(spin).lab_spin_operators()
    result = np.zeros(3)
    for i, op in enumerate(ops):
        full = np.kron(op, eye) if spin == Spin.A else np.kron(eye, op)
        result[i] = float(np.real(np.vdot(psi, full @ psi)))
    return result


def scaled_to_coupling(
    system: SpinPairSystem,
    field_setting: FieldSetting,
    target_hz: float,
    constants: PhysicalConstants = CONSTANTS,
    max_iterations: int = 8,
) -> SpinPairSystem:
    """Rescale the displacement along its direction until dnu1 equals the target"""
    target_hz = checked_positive('target_hz', target_hz)
    for _ in range(max_iterations):
        dnu1 = deer_frequencies(system, field_setting, constants)[0]
        if dnu1 == 0.0:
            raise LabelingError('Coupling vanishes for this geometry, cannot rescale')
        if float_almost_equal(dnu1, target_hz, 1e-10):
            break
        factor = (dnu1 / target_hz) ** (1.0 / 3.0)
        system = system.with_displacement(factor * np.array(system.displacement))
    return system
