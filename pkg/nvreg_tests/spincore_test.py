import itertools

import numpy as np
import pytest

from nvreg.enums import Observable, Spin
from nvreg.spincore import (
    CONSTANTS,
    DEFAULT_D,
    PAIR_LABELS,
    FieldSetting,
    LabelingError,
    NVCenter,
    PairHamiltonian,
    PhysicalConstants,
    SpinPairSystem,
    deer_frequencies,
    deer_observable,
    dipolar_hamiltonian,
    eigensystem,
    flip_shift,
    label_index,
    labeled_spectrum,
    m_index,
    nv_axes,
    pair_hamiltonian,
    scaled_to_coupling,
    single_center_hamiltonian,
    spin1_operators,
    spin_expectation,
    transition_frequency,
    transition_table,
)
from nvreg.primitives import is_hermitian
from nvreg_tests.conftest import COUPLING_HZ, field_along_a, tilted_pair


def axial_pair(distance: float = 10e-9) -> SpinPairSystem:
    return SpinPairSystem(NVCenter(), NVCenter(d=2.88e9), (0.0, 0.0, distance))


def test_labels():
    assert len(PAIR_LABELS) == 9
    assert [label_index(*label) for label in PAIR_LABELS] == list(range(9))
    assert PAIR_LABELS[label_index(-1, 1)] == (-1, 1)
    with pytest.raises(ValueError):
        m_index(2)


def test_constants():
    assert CONSTANTS.gamma_e == pytest.approx(2.803e10, rel=1e-3)
    assert CONSTANTS.dipolar_prefactor(10e-9) == pytest.approx(5.207e4, rel=1e-3)
    assert PhysicalConstants.from_json(CONSTANTS.to_json()) == CONSTANTS


def test_spin1_algebra():
    sx, sy, sz = spin1_operators()
    np.testing.assert_allclose(sx @ sy - sy @ sx, 1j * sz, atol=1e-15)
    np.testing.assert_allclose(sx @ sx + sy @ sy + sz @ sz, 2.0 * np.eye(3), atol=1e-15)


def test_nv_axes_and_rotation():
    axes = nv_axes()
    assert axes.shape == (4, 3)
    np.testing.assert_allclose(np.linalg.norm(axes, axis=1), 1.0, atol=1e-15)
    for a, b in itertools.combinations(axes, 2):
        assert np.dot(a, b) == pytest.approx(-1.0 / 3.0)
    np.testing.assert_array_equal(NVCenter().rotation(), np.eye(3))
    for axis in axes:
        rot = NVCenter(tuple(axis)).rotation()
        np.testing.assert_allclose(rot.T @ rot, np.eye(3), atol=1e-14)
        assert np.linalg.det(rot) == pytest.approx(1.0)
        np.testing.assert_allclose(rot[:, 2], axis, atol=1e-15)


def test_nv_center_validation():
    with pytest.raises(ValueError):
        NVCenter((1.0, 1.0, 0.0))
    with pytest.raises(ValueError):
        NVCenter(d=-1.0)
    with pytest.raises(ValueError):
        NVCenter(e=3e9)
    center = NVCenter.along((1, 1, 1), e=1e6)
    assert NVCenter.from_json(center.to_json()) == center


def test_single_center_zero_field():
    h = single_center_hamiltonian(NVCenter(), FieldSetting())
    np.testing.assert_allclose(np.linalg.eigvalsh(h), [0.0, DEFAULT_D, DEFAULT_D], atol=1e-3)


def test_uncoupled_zero_field_spectrum():
    h = pair_hamiltonian(tilted_pair(), FieldSetting(), include_dipolar=False)
    values = eigensystem(h).values
    np.testing.assert_allclose(values, [0.0] + [DEFAULT_D] * 4 + [2 * DEFAULT_D] * 4, atol=1e-3)


def test_dipolar_scaling_and_trace():
    system = tilted_pair()
    h1 = dipolar_hamiltonian(system)
    h2 = dipolar_hamiltonian(system.with_displacement(2.0 * np.array(system.displacement)))
    np.testing.assert_allclose(8.0 * h2, h1, rtol=1e-14, atol=0.0)
    assert is_hermitian(h1)
    assert abs(np.trace(h1)) <= 1e-9 * np.abs(h1).max()


def test_pair_hamiltonian_hermitian(bias_field):
    h = pair_hamiltonian(tilted_pair(), bias_field)
    assert h.matrix.shape == (9, 9)
    assert is_hermitian(h.matrix)
    with pytest.raises(ValueError):
        h.matrix[0, 0] = 1.0


def test_eigensystem_reconstruction(bias_field):
    h = pair_hamiltonian(tilted_pair(), bias_field)
    eig = eigensystem(h)
    assert np.all(np.diff(eig.values) >= 0.0)
    rebuilt = eig.vectors @ np.diag(eig.values) @ eig.vectors.conj().T
    np.testing.assert_allclose(rebuilt, h.matrix, atol=1e-9 * np.max(np.abs(h.matrix)))
    diag = np.diag([3.0, 1.0, 2.0])
    np.testing.assert_allclose(eigensystem(diag).values, [1.0, 2.0, 3.0], atol=1e-14)


def test_non_hermitian_rejected():
    m = np.eye(9, dtype=complex)
    m[0, 1] = 1.0
    with pytest.raises(ValueError):
        eigensystem(m)
    with pytest.raises(ValueError):
        PairHamiltonian(m)
    with pytest.raises(ValueError):
        PairHamiltonian(np.eye(3))


def test_labeled_spectrum_matches_dense_oracle():
    field = FieldSetting.along(nv_axes()[0], 3e-3)
    h = pair_hamiltonian(tilted_pair(), field)
    spectrum = labeled_spectrum(h)
    np.testing.assert_allclose(np.sort(spectrum.energies), np.linalg.eigvalsh(h.matrix), rtol=1e-12, atol=1e-3)
    # labels follow the Zeeman order of A along its own axis
    assert spectrum.energy(-1, 0) < spectrum.energy(0, 0) + DEFAULT_D < spectrum.energy(1, 0)
    for label in PAIR_LABELS:
        v = spectrum.vector(*label)
        assert np.linalg.norm(v) == pytest.approx(1.0)


def test_decoupled_transitions_do_not_depend_on_partner(bias_field):
    system = tilted_pair().with_displacement((0.0, 0.0, 1e-3))
    h = pair_hamiltonian(system, bias_field)
    freqs = [transition_frequency(h, Spin.A, 0, -1, p) for p in (-1, 0, 1)]
    assert max(freqs) - min(freqs) < 1e-3
    assert deer_frequencies(system, bias_field) == pytest.approx((0.0, 0.0), abs=1e-3)


def test_transition_table(bias_field):
    rows = transition_table(pair_hamiltonian(tilted_pair(), bias_field))
    assert len(rows) == 12
    assert {r['spin'] for r in rows} == {'A', 'B'}
    assert all(r['frequency_hz'] > 1e9 for r in rows)
    a_minus = [r['frequency_hz'] for r in rows if r['spin'] == 'A' and r['m_to'] == -1]
    # A's 0:-1 line sits below D by the Zeeman shift along its axis
    assert np.mean(a_minus) == pytest.approx(DEFAULT_D - CONSTANTS.gamma_e * 5e-3, rel=1e-3)


def test_scaled_to_coupling(coupled_pair, bias_field):
    dnu1, dnu2 = deer_frequencies(coupled_pair, bias_field)
    assert dnu1 == pytest.approx(COUPLING_HZ, rel=1e-8)
    assert dnu2 > 0.0
    np.testing.assert_allclose(coupled_pair.unit_vector, tilted_pair().unit_vector, atol=1e-12)
    assert 5e-9 < coupled_pair.distance < 20e-9


def test_flip_shift_sum_rule(coupled_pair, bias_field):
    spectrum = labeled_spectrum(pair_hamiltonian(coupled_pair, bias_field))
    s1 = spectrum.line_shift(Spin.A, 0, -1, 0, -1)
    s2 = spectrum.line_shift(Spin.A, 0, -1, 0, 1)
    assert s1 * s2 < 0.0
    dnu1, dnu2 = deer_frequencies(coupled_pair, bias_field)
    assert flip_shift(coupled_pair, bias_field, -1, 1) == pytest.approx(dnu1 + dnu2, rel=1e-9)
    assert deer_observable(spectrum, Observable.DNU_SUM) == pytest.approx(dnu1 + dnu2)
    assert deer_observable(spectrum, Observable.DNU2) == pytest.approx(dnu2)


def test_secular_approximation_agrees(coupled_pair, bias_field):
    full = labeled_spectrum(pair_hamiltonian(coupled_pair, bias_field)).deer_frequencies()
    secular = labeled_spectrum(pair_hamiltonian(coupled_pair, bias_field, secular=True)).deer_frequencies()
    np.testing.assert_allclose(secular, full, rtol=1e-3)


def test_axial_configuration_is_symmetric():
    field = FieldSetting((0.0, 0.0, 10e-3))
    dnu1, dnu2 = deer_frequencies(axial_pair(), field)
    assert dnu1 == pytest.approx(dnu2, rel=1e-4)
    # secular coupling J (1 - 3 cos^2 0) = -2 J for a pair stacked along the axes
    assert dnu1 == pytest.approx(2.0 * CONSTANTS.dipolar_prefactor(10e-9), rel=1e-3)


def test_zero_field_is_ill_posed():
    with pytest.raises(LabelingError):
        deer_frequencies(tilted_pair(), FieldSetting())
    with pytest.raises(LabelingError):
        flip_shift(tilted_pair(), FieldSetting(), -1, 1)


def test_sum_rule_along_a_axis():
    """Over some +-25% field window the sum stays put while dnu1 moves"""
    system = tilted_pair()
    magnitudes = np.geomspace(1e-3, 30e-3, 200)
    freqs = np.array([deer_frequencies(system, field_along_a(b)) for b in magnitudes])
    dnu1, total = freqs[:, 0], freqs.sum(axis=1)

    def variation(x):
        return (np.max(x) - np.min(x)) / np.mean(x)

    found = False
    for center in magnitudes:
        window = (magnitudes >= 0.75 * center) & (magnitudes <= 1.25 * center)
        if window.sum() >= 3 and variation(total[window]) < 0.05 and variation(dnu1[window]) > 0.2:
            found = True
    assert found


def test_spin_expectation_aligned_field():
    system = SpinPairSystem(NVCenter(), NVCenter.along((1, 1, 1)), (0.0, 0.0, 1e-6))
    spectrum = labeled_spectrum(pair_hamiltonian(system, FieldSetting((0.0, 0.0, 5e-3))))
    np.testing.assert_allclose(spin_expectation(spectrum.vector(0, 0), Spin.A, system), 0.0, atol=1e-10)
    s = spin_expectation(spectrum.vector(-1, 0), Spin.A, system)
    np.testing.assert_allclose(s, [0.0, 0.0, -1.0], atol=1e-9)


def test_spin_expectation_grows_linearly_with_transverse_field():
    system = SpinPairSystem(NVCenter(), NVCenter.along((1, 1, 1)), (0.0, 0.0, 1e-6))
    b_perp = np.linspace(1e-4, 1e-3, 10)
    sx = np.array(
        [
            spin_expectation(
                labeled_spectrum(pair_hamiltonian(system, FieldSetting((b, 0.0, 0.0)))).vector(0, 0),
                Spin.A,
                system,
            )[0]
            for b in b_perp
        ]
    )
    slope, intercept = np.polyfit(b_perp, sx, 1)
    fitted = slope * b_perp + intercept
    r2 = 1.0 - np.sum((sx - fitted) ** 2) / np.sum((sx - sx.mean()) ** 2)
    assert r2 > 0.999
    # first-order mixing of |+-1> into |0>: <Sx> = -2 gamma B_perp / D
    assert slope == pytest.approx(-2.0 * CONSTANTS.gamma_e / DEFAULT_D, rel=1e-2)


def test_spin_expectation_validation():
    system = tilted_pair()
    with pytest.raises(ValueError):
        spin_expectation(np.zeros(9), Spin.A, system)
    with pytest.raises(ValueError):
        spin_expectation(np.ones(3), Spin.A, system)


def test_system_geometry_and_json():
    system = tilted_pair()
    assert system.distance == pytest.approx(np.hypot(8.8e-9, 4.313e-9))
    assert system.lateral_distance == pytest.approx(8.8e-9)
    swapped = system.swapped()
    assert swapped.center_a == system.center_b
    np.testing.assert_allclose(swapped.displacement, -np.array(system.displacement))
    assert SpinPairSystem.from_json(system.to_json()) == system
    assert FieldSetting.from_json(FieldSetting((0.0, 1e-3, 0.0)).to_json()).b == (0.0, 1e-3, 0.0)
    with pytest.raises(ValueError):
        system.with_displacement((0.0, 0.0, 0.0))


def test_field_setting():
    f = FieldSetting.along((0, 0, 2), 3e-3)
    assert f.b == pytest.approx((0.0, 0.0, 3e-3))
    assert f.magnitude == pytest.approx(3e-3)
    assert f.scaled(2.0).magnitude == pytest.approx(6e-3)
    with pytest.raises(ValueError):
        FieldSetting((0.0, 0.0, 20.0))


def test_scaled_to_coupling_validation(bias_field):
    with pytest.raises(ValueError):
        scaled_to_coupling(tilted_pair(), bias_field, 0.0)
