import math

import numpy as np
import pytest

from nvreg.config import parse_quantity
from nvreg.dynamics import DecoherenceParams, PulseAction, fidelity
from nvreg.enums import PulseMode, Spin
from nvreg.measure import ReadoutModel, estimate_polarization, fit_modulation, ramsey_multiplet
from nvreg.sequences import (
    TEMPLATES,
    InitEvent,
    ProgramError,
    ProgramSyntaxError,
    PulseEvent,
    PulseProgram,
    ReadEvent,
    SignalTrace,
    Sweep,
    WaitEvent,
    bell_target,
    build_named,
    coerce_params,
    conditional_phase_sign,
    entangling_tau,
    fidelity_trace,
    format_angle,
    format_frequency,
    format_time,
    parse_program,
    render_program,
    run_program,
    state_probe,
)
from nvreg.spincore import flip_shift, label_index, labeled_spectrum, pair_hamiltonian
from nvreg_tests.conftest import COUPLING_HZ

RAMSEY_TEXT = """
# Ramsey fringes of spin A
detune A 300kHz
init
pulse A 0:-1 pi/2
wait t; pulse A 0:-1 pi/2 phase=pi/2   # second pulse along y
read A
sweep t 0 10us 256
"""


def test_parse_program():
    program = parse_program(RAMSEY_TEXT, 'ramsey_text')
    assert program.name == 'ramsey_text'
    assert len(program.events) == 5
    assert program.events[0] == InitEvent()
    assert program.events[1] == PulseEvent(PulseAction(Spin.A, (0, -1), math.pi / 2))
    assert program.events[2] == WaitEvent(variable='t')
    assert program.events[3].action.phase == pytest.approx(math.pi / 2)
    assert program.read_spin == Spin.A
    assert (program.sweep.variable, program.sweep.start, program.sweep.points) == ('t', 0.0, 256)
    assert program.sweep.stop == pytest.approx(10e-6)
    assert program.detuning(Spin.A) == pytest.approx(300e3)
    assert program.detuning(Spin.B) == 0.0
    assert PulseProgram.from_json(program.to_json()) == program


def test_parse_rabi_pulse_and_complement_wait():
    program = parse_program(
        'init\npulse B 0:-1 pi rabi=10MHz detuning=200MHz\nwait 5us-T\nread A\nsweep T 0 5us 11'
    )
    action = program.events[1].action
    assert action.mode == PulseMode.RABI
    assert action.rabi_frequency == pytest.approx(10e6)
    assert action.detuning == pytest.approx(200e6)
    wait = program.events[2]
    assert wait.complement
    assert wait.resolve(2e-6) == pytest.approx(3e-6)


def test_parse_swept_pulse_length():
    program = parse_program('init\npulse A 0:-1 t rabi=1MHz\nread A\nsweep t 0 1us 32\n')
    pulse = program.events[1]
    assert pulse.length == 't'
    assert pulse.references() == (('t', 'time'),)
    assert pulse.resolve(0.25e-6).angle == pytest.approx(math.pi / 2)
    assert pulse.resolve(0.25e-6).duration == pytest.approx(0.25e-6)
    assert render_program(program) == 'init\npulse A 0:-1 t rabi=1000kHz\nread A\nsweep t 0us 1us 32\n'
    assert program == build_named('rabi', {'rabi': '1 MHz', 'tau_max': '1 us', 'points': 32})
    with pytest.raises(ProgramError):
        pulse.resolve(None)
    with pytest.raises(ProgramError):
        pulse.resolve(-1e-9)
    with pytest.raises(ProgramError):
        PulseEvent(PulseAction(Spin.A, (0, -1), math.pi), length='t')


def test_parse_detuning_sweep():
    text = 'init\npulse A 0:-1 pi rabi=1000kHz detuning=f\nread A\nsweep f -3000kHz 3000kHz 61\n'
    program = parse_program(text)
    assert program.sweep.kind == 'frequency'
    assert program.sweep.start == pytest.approx(-3e6)
    assert program.events[1].resolve(2e5).detuning == pytest.approx(2e5)
    assert render_program(program) == text
    assert program == build_named('odmr', {'rabi': 1e6, 'span': 3e6, 'points': 61})
    assert parse_program('init; wait t; read A\nsweep t 0 1e-6 4').sweep.kind == 'time'
    with pytest.raises(ProgramError):
        Sweep('t', -1e-6, 1e-6, 3)
    with pytest.raises(ProgramError):
        Sweep('f', 0.0, 1e6, 3, 'field')


@pytest.mark.parametrize(
    'text, line, column',
    [
        ('init\npulse C 0:-1 pi\nread A', 2, 7),
        ('init; bogus', 1, 7),
        ('init\nread A extra', 2, 8),
        ('init\npulse A 0:2 pi\nread A', 2, 9),
        ('init\npulse A 0:-1 2pi/0\nread A', 2, 14),
        ('init\nwait -3us\nread A', 2, 6),
        ('init\npulse A 0:-1 pi detuning=1MHz\nread A', 2, 17),
        ('init\npulse A 0:-1\nread A', 2, 13),
        ('init; wait t; read A\nsweep t 2us 1us 4', 2, 7),
        ('init\npulse A 0:-1 t\nread A\nsweep t 0 1us 4', 2, 14),
        ('init\npulse A 0:-1 t? rabi=1MHz\nread A', 2, 14),
        ('init; wait t; read A\nsweep t 1us 2MHz 4', 2, 13),
        ('init; wait t; read A\nsweep t 0 soon 4', 2, 11),
    ],
)
def test_syntax_errors_carry_position(text, line, column):
    with pytest.raises(ProgramSyntaxError) as e:
        parse_program(text)
    assert (e.value.line, e.value.column) == (line, column)


@pytest.mark.parametrize(
    'text',
    [
        'init; pulse A 0:-1 pi',
        'init; read A; read B',
        'read A; init',
        'init; wait t; read A',
        'init; wait t; read A\nsweep t 0 1us 4\nsweep t 0 2us 4',
        'init',
        'init; pulse A 0:-1 t rabi=1MHz; read A',
        'init; wait f; read A\nsweep f -1MHz 1MHz 5',
        'init; pulse A 0:-1 pi rabi=1MHz detuning=t; read A\nsweep t 0 1us 4',
        'init; pulse A 0:-1 t rabi=1MHz detuning=t; read A\nsweep t 0 1us 4',
    ],
)
def test_program_errors(text):
    with pytest.raises(ProgramError):
        parse_program(text)


def _random_event(rng, variable):
    kind = rng.integers(3)
    if kind == 0:
        angle = rng.choice([math.pi, math.pi / 2, -math.pi / 4, 3 * math.pi / 4, rng.uniform(-7, 7)])
        transition = [(0, -1), (0, 1), (-1, 1), (1, 0)][rng.integers(4)]
        phase = 0.0 if rng.uniform() < 0.5 else rng.uniform(0, 2 * math.pi)
        if rng.uniform() < 0.5:
            spin = Spin.A if rng.uniform() < 0.5 else Spin.B
            return PulseEvent(PulseAction(spin, transition, angle, phase))
        detuning = 0.0 if rng.uniform() < 0.5 else rng.uniform(-1e8, 1e8)
        return PulseEvent(
            PulseAction(Spin.B, transition, angle, phase, PulseMode.RABI, rng.uniform(1e6, 5e7), detuning)
        )
    if kind == 1:
        if variable and rng.uniform() < 0.3:
            return WaitEvent(variable=variable)
        if variable and rng.uniform() < 0.3:
            return WaitEvent(rng.uniform(1e-6, 1e-3), variable, complement=True)
        return WaitEvent(float(rng.choice([1e-6, 2.5e-6, rng.uniform(0, 1e-3)])))
    return InitEvent()


def test_render_parse_roundtrip(rng):
    for _ in range(200):
        sweep = None
        if rng.uniform() < 0.5:
            sweep = Sweep('tau', 0.0, rng.uniform(1e-6, 1e-3), int(rng.integers(1, 500)))
        variable = sweep.variable if sweep else None
        events = [_random_event(rng, variable) for _ in range(rng.integers(0, 8))]
        events.append(ReadEvent(Spin.A if rng.uniform() < 0.5 else Spin.B))
        detunings = ((Spin.B, float(rng.uniform(-1e6, 1e6))),) if rng.uniform() < 0.5 else ()
        program = PulseProgram(tuple(events), sweep, detunings).validate()
        assert parse_program(render_program(program)) == program


def test_formatting():
    assert format_angle(math.pi / 2) == 'pi/2'
    assert format_angle(-math.pi) == '-pi'
    assert format_angle(3 * math.pi / 4) == '3pi/4'
    assert format_frequency(42e3) == '42kHz'
    for value in (10e-6, 2.5e-9, 1.0, 123.456e-6):
        assert parse_quantity(format_time(value), 'time') == value


def test_build_named_templates():
    params = {'tau': 20e-6, 'tau_max': 20e-6, 'rabi': 1e6, 'span': 4e6}
    for name in TEMPLATES:
        program = build_named(name, params)
        assert program.name == name
        assert isinstance(program.events[-1], ReadEvent)
        assert parse_program(render_program(program)) == program
    with pytest.raises(ProgramError):
        build_named('nutation')
    with pytest.raises(ProgramError):
        build_named('deer')
    with pytest.raises(ProgramError):
        build_named('ramsey', {'tau_max': 1e-6, 'partner_state': 2})
    with pytest.raises(ProgramError):
        coerce_params({'color': 'red'})
    assert coerce_params({'tau': '10us', 'points': '64', 'control': 'yes'}) == {
        'tau': pytest.approx(10e-6),
        'points': 64,
        'control': True,
    }


def test_entangling_prefix_states(coupled_pair, bias_field):
    """Intermediate states of the phi sequence at the conditional-phase time"""
    tau = entangling_tau(coupled_pair, bias_field)
    assert tau == pytest.approx(0.5 / COUPLING_HZ, rel=1e-6)
    sign = conditional_phase_sign(coupled_pair, bias_field)
    program = build_named('entangle_phi', {'tau': tau})

    after_b = np.zeros(9, dtype=complex)
    after_b[[4, 3, 1, 0]] = [sign, -1j * sign, 1, -1j]
    after_wait = np.zeros(9, dtype=complex)
    after_wait[[4, 3, 1, 0]] = [sign, 1, 1j * sign, -1j]
    targets = {5: after_b, 6: after_wait, 7: bell_target('phi', sign)}
    for prefix, target in targets.items():
        state = state_probe(program, prefix, coupled_pair, bias_field)
        assert fidelity(state, target) > 1 - 1e-9

    psi = build_named('entangle_psi', {'tau': tau})
    state = state_probe(psi, len(psi.events) - 1, coupled_pair, bias_field)
    assert fidelity(state, bell_target('psi', sign)) > 1 - 1e-9
    assert fidelity(state, bell_target('psi', -sign)) < 1e-9

    with pytest.raises(ValueError):
        state_probe(program, 99, coupled_pair, bias_field)
    with pytest.raises(ValueError):
        bell_target('phi', 0)
    with pytest.raises(ValueError):
        bell_target('ghz')


def test_entangling_tau_sweep(coupled_pair, bias_field):
    tau = entangling_tau(coupled_pair, bias_field)
    program = build_named('entangle_phi', {'tau_max': 4 * tau, 'points': 9})
    trace = run_program(program, coupled_pair, bias_field, threads=1)
    expected = 0.5 + (1 + np.cos(np.pi * trace.abscissa / tau)) / 4
    np.testing.assert_allclose(trace.values, expected, atol=1e-9)
    assert trace.values[2] == pytest.approx(0.5)
    assert trace.values[4] == pytest.approx(1.0)


def test_bell_fidelity_under_dephasing(coupled_pair, bias_field):
    tau = entangling_tau(coupled_pair, bias_field)
    sign = conditional_phase_sign(coupled_pair, bias_field)
    program = build_named('entangle_phi', {'tau': tau})
    target = bell_target('phi', sign)
    fidelities = {}
    for t2 in (200e-6, 1e-3, 2e-3):
        dec = DecoherenceParams(t2_a=t2, t2_b=t2)
        value = fidelity_trace(program, target, coupled_pair, bias_field, dec).values[0]
        closed_form = (1 + math.exp(-2 * tau / t2)) / 2 * (1 + math.exp(-tau / t2)) / 2
        assert value == pytest.approx(closed_form, rel=1e-6)
        fidelities[t2] = value
    assert fidelities[200e-6] >= 0.90
    assert fidelities[2e-3] >= 0.99
    assert fidelities[200e-6] < fidelities[1e-3] < fidelities[2e-3]


def test_deer_modulation(coupled_pair, bias_field):
    program = build_named('deer', {'tau': 200e-6, 'points': 256})
    fit = fit_modulation(run_program(program, coupled_pair, bias_field))
    assert not fit.flat
    assert fit.frequency == pytest.approx(COUPLING_HZ, rel=0.02)
    assert fit.amplitude == pytest.approx(0.5, abs=0.02)

    control = build_named('deer', {'tau': 200e-6, 'points': 256, 'control': True})
    trace = run_program(control, coupled_pair, bias_field)
    assert np.ptp(trace.values) < 0.01
    assert fit_modulation(trace).flat


def test_double_quantum_deer(coupled_pair, bias_field):
    tau = 100e-6
    dq = fit_modulation(run_program(build_named('deer_dq', {'tau': tau}), coupled_pair, bias_field))
    expected_dq = abs(flip_shift(coupled_pair, bias_field, -1, 1))
    assert dq.frequency == pytest.approx(expected_dq, abs=1 / tau)

    ddq = fit_modulation(run_program(build_named('deer_ddq', {'tau': tau}), coupled_pair, bias_field))
    spectrum = labeled_spectrum(pair_hamiltonian(coupled_pair, bias_field))
    expected_ddq = abs(spectrum.line_shift(Spin.A, -1, 1, -1, 1))
    assert ddq.frequency == pytest.approx(expected_ddq, abs=1 / tau)
    assert ddq.frequency > dq.frequency > COUPLING_HZ


def test_rabi_nutation(coupled_pair, bias_field):
    rabi = 1e6
    program = build_named('rabi', {'rabi': rabi, 'tau_max': 4e-6, 'points': 129})
    trace = run_program(program, coupled_pair, bias_field)
    np.testing.assert_allclose(trace.values, np.cos(np.pi * rabi * trace.abscissa) ** 2, atol=1e-9)
    fit = fit_modulation(trace)
    assert fit.frequency == pytest.approx(rabi, rel=1e-3)
    assert fit.amplitude == pytest.approx(0.5, abs=1e-3)


def test_odmr_line(coupled_pair, bias_field):
    rabi = 1e6
    program = build_named('odmr', {'rabi': rabi, 'span': 3e6, 'points': 61})
    trace = run_program(program, coupled_pair, bias_field)
    delta = trace.abscissa
    generalized = np.sqrt(rabi**2 + delta**2)
    expected = 1 - (rabi / generalized) ** 2 * np.sin(np.pi * generalized / (2 * rabi)) ** 2
    np.testing.assert_allclose(trace.values, expected, atol=1e-9)
    assert np.argmin(trace.values) == 30
    assert trace.values[30] == pytest.approx(0.0, abs=1e-9)
    np.testing.assert_allclose(trace.values, trace.values[::-1], atol=1e-9)


def test_rabi_pulses_take_time(coupled_pair, bias_field):
    """Dephasing acts during the second half of a finite pi/2 pulse"""
    dec = DecoherenceParams(t2_a=1e-6)
    coherence = {}
    for pulse in ('pulse A 0:-1 pi/2', 'pulse A 0:-1 pi/2 rabi=1MHz'):
        program = parse_program(f'init; {pulse}; read A')
        state = state_probe(program, 2, coupled_pair, bias_field, dec)
        coherence[pulse] = abs(state.density()[label_index(0, 0), label_index(-1, 0)])
    assert coherence['pulse A 0:-1 pi/2'] == pytest.approx(0.5, rel=1e-9)
    assert coherence['pulse A 0:-1 pi/2 rabi=1MHz'] == pytest.approx(0.5 * math.exp(-0.125), rel=1e-9)


def test_ramsey_multiplet_and_polarization(coupled_pair, bias_field):
    detuning = 300e3
    program = build_named('ramsey', {'tau_max': 400e-6, 'points': 1024, 'detuning': detuning})
    trace = run_program(program, coupled_pair, bias_field, p0_b=0.88)
    lines = ramsey_multiplet(trace)
    assert lines.resolved
    assert estimate_polarization(lines) == pytest.approx(0.88, abs=0.02)

    spectrum = labeled_spectrum(pair_hamiltonian(coupled_pair, bias_field))
    t = {p: spectrum.transition(Spin.A, 0, -1, p) for p in (-1, 0, 1)}
    predicted = sorted(detuning + t[p] - (t[0] + t[-1]) / 2 for p in (-1, 0, 1))
    for line, frequency in zip(lines, predicted):
        assert line.frequency == pytest.approx(frequency, abs=lines.resolution)
    # the partner |0> line sits between the other two
    assert lines[1].frequency == pytest.approx(detuning + (t[0] - t[-1]) / 2, abs=lines.resolution)


@pytest.mark.parametrize('detuning', [-4e5, -3e4, 1.7e5, 9e5])
def test_hahn_echo_trace(coupled_pair, bias_field, detuning):
    program = build_named('hahn', {'tau_max': 50e-6, 'points': 16, 'detuning': detuning})
    trace = run_program(program, coupled_pair, bias_field, silent=True)
    np.testing.assert_allclose(trace.values, 1.0, atol=1e-6)


def test_seeded_runs_are_reproducible(coupled_pair, bias_field):
    program = build_named('ramsey', {'tau_max': 20e-6, 'points': 32, 'detuning': 1e5})
    model = ReadoutModel(photons=1e4)
    serial = run_program(program, coupled_pair, bias_field, readout_model=model, seed=11, threads=1)
    parallel = run_program(program, coupled_pair, bias_field, readout_model=model, seed=11, threads=3)
    np.testing.assert_array_equal(serial.values, parallel.values)
    other = run_program(program, coupled_pair, bias_field, readout_model=model, seed=12, threads=1)
    assert not np.array_equal(serial.values, other.values)
    assert serial.metadata['seed'] == 11

    with pytest.raises(ValueError):
        run_program(program, coupled_pair, bias_field, readout_model=model)
    with pytest.raises(ValueError):
        run_program(program, coupled_pair, bias_field, dec=DecoherenceParams(t2star_a=5e-6))
    with pytest.raises(ValueError):
        run_program(program, coupled_pair, bias_field, frame='sideways')


def test_t2star_ramsey_decays(coupled_pair, bias_field):
    program = build_named('hahn', {'tau_max': 20e-6, 'points': 8})
    dec = DecoherenceParams(t2star_a=2e-6)
    trace = run_program(program, coupled_pair, bias_field, dec=dec, seed=3)
    # quasi-static detunings are refocused by the echo
    np.testing.assert_allclose(trace.values, 1.0, atol=1e-9)

    ramsey = build_named('ramsey', {'tau_max': 20e-6, 'points': 8})
    decayed = run_program(ramsey, coupled_pair, bias_field, dec=dec, seed=3)
    assert decayed.values[-1] == pytest.approx(0.5, abs=0.1)


def test_signal_trace_csv(tmp_path):
    trace = SignalTrace(np.linspace(0, 1e-5, 7), np.random.default_rng(0).uniform(size=7), 'x')
    path = tmp_path / 'trace.csv'
    with open(path, 'w') as f:
        trace.write_csv(f, header_lines=['first line\nsecond line'])
    assert path.read_text().startswith('# first line\n# second line\n')
    assert SignalTrace.read_csv(path, 'x') == trace
    assert SignalTrace.from_json(trace.to_json()) == trace

    with pytest.raises(ValueError):
        SignalTrace([0.0, 0.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        SignalTrace([0.0, 1.0], [1.0])
    path.write_text('time,signal\n0,1\n')
    with pytest.raises(ValueError):
        SignalTrace.read_csv(path)
