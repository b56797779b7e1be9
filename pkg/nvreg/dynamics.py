"""Density-matrix dynamics of the two-spin register.

A state is either expressed in the product basis |m_A, m_B> (lab frame, evolution under the
full pair Hamiltonian) or in the labelled eigenbasis of a RotatingFrame (interaction picture
of the microwave drives). In both cases basis index k corresponds to the label PAIR_LABELS[k],
so pulses, populations and dephasing masks are shared by the two representations.
"""
import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

from nvreg.enums import PulseMode, Spin, enum_member_lookup
from nvreg.primitives import (
    EPS_MATRIX,
    checked_positive,
    checked_probability,
    checked_real,
    is_hermitian,
)
from nvreg.spincore import (
    M_VALUES,
    PAIR_LABELS,
    LabeledSpectrum,
    PairHamiltonian,
    eigensystem,
    labeled_spectrum,
    m_index,
    spin1_operators,
)

logger = logging.getLogger(__name__)

DEFAULT_T2STAR_SAMPLES = 201
DEFAULT_REFERENCE_STATES = (0, -1)

_M_A = np.array([la for la, _ in PAIR_LABELS], dtype=float)
_M_B = np.array([lb for _, lb in PAIR_LABELS], dtype=float)
_DM_A = np.abs(_M_A[:, None] - _M_A[None, :])
_DM_B = np.abs(_M_B[:, None] - _M_B[None, :])


def _spin_m(spin: Spin) -> np.ndarray:
    return _M_A if spin == Spin.A else _M_B


@dataclass(frozen=True, eq=False)
class RotatingFrame:
    """Interaction picture defined by the labelled eigenlevels of a pair Hamiltonian.

    The frame energy of a level is F(m_A, m_B) = E(0,0) + f_A(m_A) + f_B(m_B), with f_k(m) the
    transition frequency 0 -> m of spin k averaged over the partner reference states. A drive
    detuning shifts the residual energy of a spin's +-1 levels.
    """

    spectrum: LabeledSpectrum
    reference_states: Tuple[int, ...] = DEFAULT_REFERENCE_STATES
    detuning_a: float = 0.0
    detuning_b: float = 0.0

    def __post_init__(self):
        if not self.reference_states or any(m not in M_VALUES for m in self.reference_states):
            raise ValueError(f'Wrong partner reference states: {self.reference_states}')
        checked_real('detuning_a', self.detuning_a)
        checked_real('detuning_b', self.detuning_b)

    @classmethod
    def from_hamiltonian(
        cls,
        h: PairHamiltonian,
        reference_states: Sequence[int] = DEFAULT_REFERENCE_STATES,
        detuning_a: float = 0.0,
        detuning_b: float = 0.0,
    ) -> 'RotatingFrame':
        return cls(labeled_spectrum(h), tuple(reference_states), detuning_a, detuning_b)

    def detuning(self, spin: Spin) -> float:
        return self.detuning_a if spin == Spin.A else self.detuning_b

    def with_detuning(self, spin: Spin, value: float) -> 'RotatingFrame':
        key = 'detuning_a' if spin == Spin.A else 'detuning_b'
        return dataclasses.replace(self, **{key: value})

    def drive_frequency(self, spin: Spin, m: int) -> float:
        """Frame frequency of the 0 -> m transition of a spin (signed, Hz)"""
        if m == 0:
            return 0.0
        return float(
            np.mean([self.spectrum.transition(spin, 0, m, p) for p in self.reference_states])
        )

    def frame_energies(self) -> np.ndarray:
        e00 = self.spectrum.energy(0, 0)
        return np.array(
            [
                e00 + self.drive_frequency(Spin.A, ma) + self.drive_frequency(Spin.B, mb)
                for ma, mb in PAIR_LABELS
            ]
        )

    def residual_energies(self) -> np.ndarray:
        """Level energies left over in the rotating frame (Hz), detunings included"""
        residual = self.spectrum.energies - self.frame_energies()
        return residual + np.abs(_M_A) * self.detuning_a + np.abs(_M_B) * self.detuning_b

    def to_product_basis(self, rho: np.ndarray) -> np.ndarray:
        v = self.spectrum.vectors
        return v @ rho @ v.conj().T

    def from_product_basis(self, rho: np.ndarray) -> np.ndarray:
        v = self.spectrum.vectors
        return v.conj().T @ rho @ v


@dataclass(frozen=True)
class DecoherenceParams:
    """Pure dephasing times in seconds; None disables a channel"""

    t2_a: Optional[float] = None
    t2_b: Optional[float] = None
    t2star_a: Optional[float] = None
    t2star_b: Optional[float] = None
    homogeneous: bool = True
    inhomogeneous: bool = True
    samples: int = DEFAULT_T2STAR_SAMPLES

    def __post_init__(self):
        for key in ('t2_a', 't2_b', 't2star_a', 't2star_b'):
            value = getattr(self, key)
            if value is not None:
                checked_positive(key, value)
        if not (isinstance(self.samples, int) and self.samples >= 1):
            raise ValueError(f'Number of quasi-static samples must be a positive integer: {self.samples}')

    @classmethod
    def disabled(cls) -> 'DecoherenceParams':
        return cls(homogeneous=False, inhomogeneous=False)

    @property
    def has_dephasing(self) -> bool:
        return self.homogeneous and (self.t2_a is not None or self.t2_b is not None)

    @property
    def has_inhomogeneous(self) -> bool:
        return self.inhomogeneous and (self.t2star_a is not None or self.t2star_b is not None)

    def rate(self, spin: Spin) -> float:
        t2 = self.t2_a if spin == Spin.A else self.t2_b
        return 0.0 if t2 is None else 1.0 / t2

    def detuning_sigma(self, spin: Spin) -> float:
        """Standard deviation (Hz) of the quasi-static detuning giving exp(-(t/T2*)^2) Ramsey decay"""
        t2star = self.t2star_a if spin == Spin.A else self.t2star_b
        return 0.0 if t2star is None else math.sqrt(2.0) / (2.0 * math.pi * t2star)

    def to_json(self) -> Dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, data: Dict) -> 'DecoherenceParams':
        return cls(**data)


@dataclass(frozen=True)
class PulseAction:
    target: Spin
    transition: Tuple[int, int]
    angle: float
    phase: float = 0.0
    mode: PulseMode = PulseMode.IDEAL
    rabi_frequency: Optional[float] = None
    detuning: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, 'target', enum_member_lookup(Spin, self.target))
        object.__setattr__(self, 'mode', enum_member_lookup(PulseMode, self.mode))
        m1, m2 = self.transition
        m_index(m1)
        m_index(m2)
        if m1 == m2:
            raise ValueError(f'Transition levels must be distinct: {self.transition}')
        object.__setattr__(self, 'transition', (int(m1), int(m2)))
        object.__setattr__(self, 'angle', checked_real('angle', self.angle))
        object.__setattr__(self, 'phase', checked_real('phase', self.phase))
        object.__setattr__(self, 'detuning', checked_real('detuning', self.detuning))
        if self.mode == PulseMode.RABI:
            if self.rabi_frequency is None:
                raise ValueError('Rabi-mode pulse requires a Rabi frequency')
            checked_positive('rabi_frequency', self.rabi_frequency)

    @property
    def duration(self) -> float:
        """Length on the sequence clock; ideal pulses are instantaneous"""
        if self.mode == PulseMode.IDEAL:
            return 0.0
        return abs(self.angle) / (2.0 * math.pi * self.rabi_frequency)

    def two_level_unitary(self) -> np.ndarray:
        """2x2 propagator in the basis (|m1>, |m2>)"""
        c, s = math.cos(self.phase), math.sin(self.phase)
        if self.mode == PulseMode.IDEAL:
            half = 0.5 * self.angle
            return np.array(
                [
                    [math.cos(half), -1j * complex(c, -s) * math.sin(half)],
                    [-1j * complex(c, s) * math.sin(half), math.cos(half)],
                ]
            )
        omega = self.rabi_frequency
        h2 = 0.5 * np.array(
            [[self.detuning, omega * complex(c, -s)], [omega * complex(c, s), -self.detuning]]
        )
        return scipy.linalg.expm(-2j * math.pi * self.duration * h2)

    def unitary(self) -> np.ndarray:
        """9x9 unitary acting on the target's transition for every partner state"""
        u3 = np.eye(3, dtype=complex)
        idx = [m_index(m) for m in self.transition]
        u3[np.ix_(idx, idx)] = self.two_level_unitary()
        eye = np.eye(3)
        return np.kron(u3, eye) if self.target == Spin.A else np.kron(eye, u3)

    def to_json(self) -> Dict:
        return {
            'target': self.target.value,
            'transition': list(self.transition),
            'angle': self.angle,
            'phase': self.phase,
            'mode': self.mode.value,
            'rabi_frequency': self.rabi_frequency,
            'detuning': self.detuning,
        }

    @classmethod
    def from_json(cls, data: Dict) -> 'PulseAction':
        return cls(
            data['target'],
            tuple(data['transition']),
            data['angle'],
            data['phase'],
            data['mode'],
            data['rabi_frequency'],
            data['detuning'],
        )


@dataclass(frozen=True, eq=False)
class QuantumState:
    """Density matrix (9x9) or a quasi-static ensemble of them (n x 9 x 9).

    With an ensemble, `noise` holds the per-member detunings (Hz) of spins A and B.
    """

    rho: np.ndarray
    frame: Optional[RotatingFrame] = None
    noise: Optional[np.ndarray] = None

    def __post_init__(self):
        rho = np.array(self.rho, dtype=complex)
        if rho.shape[-2:] != (9, 9) or rho.ndim not in (2, 3):
            raise ValueError(f'Density matrix must be 9x9 or a stack of 9x9: {rho.shape}')
        traces = np.trace(rho, axis1=-2, axis2=-1)
        if np.max(np.abs(traces - 1.0)) > EPS_MATRIX:
            raise ValueError(f'Density matrix trace differs from 1: {traces}')
        if self.noise is not None:
            noise = np.asarray(self.noise, dtype=float)
            if rho.ndim != 3 or noise.shape != (rho.shape[0], 2):
                raise ValueError('Noise samples do not match the ensemble size')
            object.__setattr__(self, 'noise', noise)
        object.__setattr__(self, 'rho', rho)

    @property
    def is_ensemble(self) -> bool:
        return self.rho.ndim == 3

    def density(self) -> np.ndarray:
        """Ensemble-averaged density matrix in the state's own basis"""
        return self.rho.mean(axis=0) if self.is_ensemble else self.rho

    def product_density(self) -> np.ndarray:
        rho = self.density()
        return rho if self.frame is None else self.frame.to_product_basis(rho)

    def replace(self, rho: np.ndarray) -> 'QuantumState':
        return QuantumState(rho, self.frame, self.noise)

    def check(self) -> None:
        rho = self.density()
        if not is_hermitian(rho):
            raise ValueError('Density matrix is not Hermitian')
        min_eig = float(np.min(np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))))
        if min_eig < -EPS_MATRIX:
            raise ValueError(f'Density matrix is not positive semidefinite: {min_eig}')


def pure_state(amplitudes: Sequence[complex], frame: Optional[RotatingFrame] = None) -> QuantumState:
    psi = np.asarray(amplitudes, dtype=complex).reshape(-1)
    if psi.shape != (9,):
        raise ValueError(f'Pair state needs 9 amplitudes: {psi.shape}')
    norm = np.linalg.norm(psi)
    if norm == 0.0:
        raise ValueError('Zero state vector')
    psi = psi / norm
    return QuantumState(np.outer(psi, psi.conj()), frame)


def basis_vector(m_a: int, m_b: int) -> np.ndarray:
    psi = np.zeros(9, dtype=complex)
    psi[3 * m_index(m_a) + m_index(m_b)] = 1.0
    return psi


def initialize_register(
    p0_a: float = 1.0, p0_b: float = 1.0, frame: Optional[RotatingFrame] = None
) -> QuantumState:
    """Product of per-spin states diag((1-p0)/2, p0, (1-p0)/2)"""
    p0_a = checked_probability('p0_a', p0_a)
    p0_b = checked_probability('p0_b', p0_b)
    rho_a = np.diag([(1.0 - p0_a) / 2.0, p0_a, (1.0 - p0_a) / 2.0])
    rho_b = np.diag([(1.0 - p0_b) / 2.0, p0_b, (1.0 - p0_b) / 2.0])
    return QuantumState(np.kron(rho_a, rho_b).astype(complex), frame)


def sample_ensemble(
    state: QuantumState, dec: DecoherenceParams, rng: np.random.Generator
) -> QuantumState:
    """Replicate a state over quasi-static detuning samples drawn for the T2* channel"""
    if not dec.has_inhomogeneous:
        return state
    noise = np.column_stack(
        [
            rng.normal(0.0, dec.detuning_sigma(Spin.A), dec.samples),
            rng.normal(0.0, dec.detuning_sigma(Spin.B), dec.samples),
        ]
    )
    rho = np.broadcast_to(state.density(), (dec.samples, 9, 9)).copy()
    return QuantumState(rho, state.frame, noise)


def _dephasing_mask(dec: Optional[DecoherenceParams], t: float) -> Optional[np.ndarray]:
    if dec is None or not dec.has_dephasing or t == 0.0:
        return None
    return np.exp(-t * (_DM_A * dec.rate(Spin.A) + _DM_B * dec.rate(Spin.B)))


def _lab_propagator(h: np.ndarray, t: float) -> np.ndarray:
    eig = eigensystem(h)
    return (eig.vectors * np.exp(-2j * math.pi * eig.values * t)) @ eig.vectors.conj().T


def evolve_free(
    state: QuantumState,
    h: Optional[PairHamiltonian],
    t: float,
    dec: Optional[DecoherenceParams] = None,
) -> QuantumState:
    """Free evolution for a time t (s) followed by pure dephasing.

    States carrying a RotatingFrame evolve with the frame's residual energies and ignore h.
    """
    t = checked_real('t', t, 0.0)
    if t == 0.0:
        return state
    rho = state.rho
    if state.frame is not None:
        residual = state.frame.residual_energies()
        if state.is_ensemble:
            shifts = residual[None, :]
            if state.noise is not None:
                shifts = shifts + state.noise[:, :1] * _M_A[None, :] + state.noise[:, 1:] * _M_B[None, :]
            phases = np.exp(-2j * math.pi * shifts * t)
            rho = rho * phases[:, :, None] * phases.conj()[:, None, :]
        else:
            phases = np.exp(-2j * math.pi * residual * t)
            rho = rho * np.outer(phases, phases.conj())
    else:
        if h is None:
            raise ValueError('Lab-frame evolution requires a pair Hamiltonian')
        matrix = h.matrix if isinstance(h, PairHamiltonian) else np.asarray(h)
        if state.is_ensemble and state.noise is not None:
            _, _, sz = spin1_operators()
            sz_a = np.kron(sz, np.eye(3))
            sz_b = np.kron(np.eye(3), sz)
            members = []
            for k in range(rho.shape[0]):
                u = _lab_propagator(matrix + state.noise[k, 0] * sz_a + state.noise[k, 1] * sz_b, t)
                members.append(u @ rho[k] @ u.conj().T)
            rho = np.array(members)
        else:
            u = _lab_propagator(matrix, t)
            rho = u @ rho @ u.conj().T
    mask = _dephasing_mask(dec, t)
    if mask is not None:
        rho = rho * mask
    return state.replace(rho)


def apply_pulse(state: QuantumState, action: PulseAction) -> QuantumState:
    u = action.unitary()
    return state.replace(u @ state.rho @ u.conj().T)


def composite_dq_actions(target: Spin, phase: float = 0.0) -> Tuple[PulseAction, ...]:
    """pi(-1:0) pi(0:+1) pi(-1:0): swaps |-1> and |+1> and returns |0>, all with sign -1"""
    target = enum_member_lookup(Spin, target)
    return (
        PulseAction(target, (-1, 0), math.pi, phase),
        PulseAction(target, (0, 1), math.pi, phase),
        PulseAction(target, (-1, 0), math.pi, phase),
    )


def composite_dq_pulse(state: QuantumState, target: Spin, phase: float = 0.0) -> QuantumState:
    for action in composite_dq_actions(target, phase):
        state = apply_pulse(state, action)
    return state


def fidelity(state: QuantumState, target_pure: Sequence[complex]) -> float:
    """<psi|rho|psi>; the target is expressed over the labels of the state's basis"""
    psi = np.asarray(target_pure, dtype=complex).reshape(-1)
    norm = np.linalg.norm(psi)
    if norm == 0.0:
        raise ValueError('Zero target vector')
    psi = psi / norm
    value = float(np.real(np.vdot(psi, state.density() @ psi)))
    return min(max(value, 0.0), 1.0)


def population(state: QuantumState, spin: Spin, m: int) -> float:
    spin = enum_member_lookup(Spin, spin)
    m_index(m)
    diag = np.real(np.diag(state.density()))
    return float(np.sum(diag[_spin_m(spin) == m]))


def purity(state: QuantumState) -> float:
    rho = state.density()
    return float(np.real(np.trace(rho @ rho)))


def partial_trace(state: QuantumState, keep: Spin) -> np.ndarray:
    """Reduced 3x3 density matrix of one spin"""
    keep = enum_member_lookup(Spin, keep)
    rho = state.density().reshape(3, 3, 3, 3)
    if keep == Spin.A:
        return np.einsum('ijkj->ik', rho)
    return np.einsum('ijil->jl', rho)
