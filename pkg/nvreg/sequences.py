"""Pulse programs: a small line-oriented DSL, named experiment templates and the execution engine.

Example program (Ramsey fringes of spin A)::

    init; pulse A 0:-1 pi/2; wait t; pulse A 0:-1 pi/2; read A
    sweep t 0 10us 256

A Rabi-mode pulse may take its length (``pulse A 0:-1 t rabi=1MHz``) or its drive
detuning (``detuning=f`` with ``sweep f -2MHz 2MHz 41``) from the sweep variable.
"""
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from nvreg.config import FRAMES, UNITS, parse_bool, parse_quantity
from nvreg.dynamics import (
    DecoherenceParams,
    PulseAction,
    QuantumState,
    RotatingFrame,
    apply_pulse,
    basis_vector,
    composite_dq_actions,
    evolve_free,
    fidelity,
    initialize_register,
    sample_ensemble,
)
from nvreg.enums import PulseMode, Spin
from nvreg.measure import ReadoutModel, readout
from nvreg.primitives import NvregError, checked_positive, worker_threads
from nvreg.spincore import (
    CONSTANTS,
    M_VALUES,
    FieldSetting,
    LabelingError,
    PairHamiltonian,
    PhysicalConstants,
    SpinPairSystem,
    deer_frequencies,
    labeled_spectrum,
    pair_hamiltonian,
)

logger = logging.getLogger(__name__)

DEFAULT_POINTS = 256
DEFAULT_CONTROL_RABI = 10e6
DEFAULT_CONTROL_DETUNING = 200e6
SWEEP_KINDS = ('time', 'frequency')

_IDENT_RE = re.compile(r'^[A-Za-z_]\w*$')
_TRANSITION_RE = re.compile(r'^([+-]?\d+):([+-]?\d+)$')
_ANGLE_RE = re.compile(r'^([+-]?(?:\d+\.?\d*|\.\d+)?)\*?pi(?:/(\d+))?$')
_COMPLEMENT_RE = re.compile(r'^(.+)-([A-Za-z_]\w*)$')


class ProgramSyntaxError(NvregError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f'line {line}, column {column}: {message}')
        self.message = message
        self.line = line
        self.column = column


class ProgramError(NvregError):
    pass


@dataclass(frozen=True)
class InitEvent:
    def render(self) -> str:
        return 'init'


@dataclass(frozen=True)
class PulseEvent:
    """A pulse whose length or drive detuning may follow the sweep variable.

    A swept length t rotates by 2 pi rabi t, so both swept forms need a Rabi-mode action.
    The swept field of the stored action is held at zero.
    """

    action: PulseAction
    length: Optional[str] = None
    detuning_variable: Optional[str] = None

    def __post_init__(self):
        if self.length is None and self.detuning_variable is None:
            return
        if self.action.mode != PulseMode.RABI:
            raise ProgramError('A swept pulse length or detuning requires a Rabi-mode pulse')
        for variable in (self.length, self.detuning_variable):
            if variable is not None and not _IDENT_RE.match(variable):
                raise ProgramError(f'Wrong sweep variable name: {variable!r}')
        changes = {}
        if self.length is not None:
            changes['angle'] = 0.0
        if self.detuning_variable is not None:
            changes['detuning'] = 0.0
        object.__setattr__(self, 'action', replace(self.action, **changes))

    def references(self) -> Tuple[Tuple[str, str], ...]:
        """(variable, sweep kind) pairs this pulse depends on"""
        refs = []
        if self.length is not None:
            refs.append((self.length, 'time'))
        if self.detuning_variable is not None:
            refs.append((self.detuning_variable, 'frequency'))
        return tuple(refs)

    def resolve(self, sweep_value: Optional[float]) -> PulseAction:
        if not self.references():
            return self.action
        if sweep_value is None:
            names = ', '.join(v for v, _ in self.references())
            raise ProgramError(f'Pulse depends on the unresolved sweep variable {names}')
        changes = {}
        if self.length is not None:
            if sweep_value < 0.0:
                raise ProgramError(f'Negative pulse length {sweep_value} s')
            changes['angle'] = 2.0 * math.pi * self.action.rabi_frequency * sweep_value
        if self.detuning_variable is not None:
            changes['detuning'] = sweep_value
        return replace(self.action, **changes)

    def render(self) -> str:
        a = self.action
        angle = self.length if self.length is not None else format_angle(a.angle)
        text = f'pulse {a.target.value} {format_transition(a.transition)} {angle}'
        if a.phase != 0.0:
            text += f' phase={a.phase!r}'
        if a.mode == PulseMode.RABI:
            text += f' rabi={format_frequency(a.rabi_frequency)}'
            if self.detuning_variable is not None:
                text += f' detuning={self.detuning_variable}'
            elif a.detuning != 0.0:
                text += f' detuning={format_frequency(a.detuning)}'
        return text


@dataclass(frozen=True)
class WaitEvent:
    """Fixed delay, a delay equal to the sweep variable, or its complement duration - variable"""

    duration: float = 0.0
    variable: Optional[str] = None
    complement: bool = False

    def references(self) -> Tuple[Tuple[str, str], ...]:
        return () if self.variable is None else ((self.variable, 'time'),)

    def resolve(self, sweep_value: Optional[float]) -> float:
        if self.variable is None:
            return self.duration
        if sweep_value is None:
            raise ProgramError(f'Wait depends on the unresolved sweep variable {self.variable}')
        return self.duration - sweep_value if self.complement else sweep_value

    def render(self) -> str:
        if self.variable is None:
            return f'wait {format_time(self.duration)}'
        if self.complement:
            return f'wait {format_time(self.duration)}-{self.variable}'
        return f'wait {self.variable}'


@dataclass(frozen=True)
class ReadEvent:
    spin: Spin

    def render(self) -> str:
        return f'read {self.spin.value}'


Event = Union[InitEvent, PulseEvent, WaitEvent, ReadEvent]


@dataclass(frozen=True)
class Sweep:
    """Linear sweep of a delay or pulse length (kind 'time') or of a drive detuning ('frequency')"""

    variable: str
    start: float
    stop: float
    points: int = DEFAULT_POINTS
    kind: str = 'time'

    def __post_init__(self):
        if not _IDENT_RE.match(self.variable):
            raise ProgramError(f'Wrong sweep variable name: {self.variable!r}')
        if self.kind not in SWEEP_KINDS:
            raise ProgramError(f'Unknown sweep kind {self.kind!r}; expected one of {SWEEP_KINDS}')
        if not (isinstance(self.points, int) and self.points >= 1):
            raise ProgramError(f'Number of sweep points must be a positive integer: {self.points}')
        if self.points > 1 and not self.stop > self.start:
            raise ProgramError(f'Sweep must increase: {self.start} .. {self.stop}')
        if self.kind == 'time' and self.start < 0.0:
            raise ProgramError(f'Sweep of a delay cannot start below zero: {self.start}')

    def values(self) -> np.ndarray:
        return np.linspace(self.start, self.stop, self.points)

    def render(self) -> str:
        fmt = format_time if self.kind == 'time' else format_frequency
        return f'sweep {self.variable} {fmt(self.start)} {fmt(self.stop)} {self.points}'


@dataclass(frozen=True)
class PulseProgram:
    events: Tuple[Event, ...]
    sweep: Optional[Sweep] = None
    detunings: Tuple[Tuple[Spin, float], ...] = ()
    name: str = field(default='', compare=False)

    def validate(self) -> 'PulseProgram':
        reads = [i for i, e in enumerate(self.events) if isinstance(e, ReadEvent)]
        if not reads:
            raise ProgramError('Program has no readout')
        if len(reads) > 1:
            raise ProgramError('Program must contain exactly one readout')
        if reads[0] != len(self.events) - 1:
            raise ProgramError('Readout must be the last event')
        for event in self.events:
            if not isinstance(event, (WaitEvent, PulseEvent)):
                continue
            for variable, kind in event.references():
                if self.sweep is None or variable != self.sweep.variable:
                    raise ProgramError(f'{event.render()!r} references an undefined sweep variable: {variable}')
                if kind != self.sweep.kind:
                    raise ProgramError(f'{event.render()!r} needs a {kind} sweep, not {self.sweep.kind}')
        spins = [s for s, _ in self.detunings]
        if len(set(spins)) != len(spins):
            raise ProgramError('Detuning given twice for the same spin')
        return self

    @property
    def read_spin(self) -> Spin:
        return self.events[-1].spin

    def detuning(self, spin: Spin) -> float:
        return dict(self.detunings).get(spin, 0.0)

    def to_json(self) -> Dict[str, Any]:
        return {'name': self.name, 'text': render_program(self)}

    @classmethod
    def from_json(cls, data: Dict[str, Any]) -> 'PulseProgram':
        program = parse_program(data['text'])
        return PulseProgram(program.events, program.sweep, program.detunings, data.get('name', ''))


@dataclass(frozen=True, eq=False)
class SignalTrace:
    abscissa: np.ndarray
    values: np.ndarray
    name: str = ''
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        x = np.array(self.abscissa, dtype=float).reshape(-1)
        y = np.array(self.values, dtype=float).reshape(-1)
        if x.shape != y.shape:
            raise ValueError(f'Abscissa and values differ in length: {x.shape} {y.shape}')
        if len(x) > 1 and not np.all(np.diff(x) > 0.0):
            raise ValueError('Abscissa of a signal trace must be strictly increasing')
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, 'abscissa', x)
        object.__setattr__(self, 'values', y)
        object.__setattr__(self, 'metadata', dict(self.metadata))

    def __len__(self):
        return len(self.abscissa)

    def __eq__(self, other: 'SignalTrace') -> bool:
        return (
            type(self) == type(other)
            and self.name == other.name
            and np.array_equal(self.abscissa, other.abscissa)
            and np.array_equal(self.values, other.values)
        )

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({'abscissa': self.abscissa, 'value': self.values})

    def to_json(self) -> Dict[str, Any]:
        return {
            'name': self.name,
            'abscissa': self.abscissa.tolist(),
            'values': self.values.tolist(),
            'metadata': dict(self.metadata),
        }

    @classmethod
    def from_json(cls, data: Dict[str, Any]) -> 'SignalTrace':
        return cls(data['abscissa'], data['values'], data['name'], data['metadata'])

    def write_csv(self, f, header_lines: Sequence[str] = ()) -> None:
        """CSV `abscissa,value` preceded by '#' comment lines"""
        for line in header_lines:
            for part in str(line).splitlines():
                f.write(f'# {part}\n')
        self.to_frame().to_csv(f, index=False, float_format='%.17g', lineterminator='\n')

    @classmethod
    def read_csv(cls, path, name: str = '') -> 'SignalTrace':
        df = pd.read_csv(path, comment='#')
        if list(df.columns) != ['abscissa', 'value']:
            raise ValueError(f'Unexpected trace columns: {list(df.columns)}')
        return cls(df['abscissa'].to_numpy(), df['value'].to_numpy(), name)


def format_transition(transition: Tuple[int, int]) -> str:
    return ':'.join('+1' if m == 1 else str(m) for m in transition)


def _parse_angle(text: str) -> float:
    match = _ANGLE_RE.match(text)
    if match is None:
        return float(text)
    coefficient, denominator = match.group(1), match.group(2)
    if coefficient in ('', '+'):
        value = 1.0
    elif coefficient == '-':
        value = -1.0
    else:
        value = float(coefficient)
    value *= math.pi
    if denominator is not None:
        if int(denominator) == 0:
            raise ValueError('Angle denominator is zero')
        value /= int(denominator)
    return value


def format_angle(angle: float) -> str:
    for denominator in (1, 2, 4, 8):
        k = round(angle * denominator / math.pi)
        if k == 0:
            continue
        coefficient = {1: '', -1: '-'}.get(k, str(k))
        text = f'{coefficient}pi' + (f'/{denominator}' if denominator > 1 else '')
        if _parse_angle(text) == angle:
            return text
    return repr(float(angle))


def _format_quantity(value: float, kind: str, preferred: Sequence[str], si_unit: str) -> str:
    for unit in preferred:
        text = f'{value / UNITS[kind][unit]:.12g}{unit}'
        try:
            if parse_quantity(text, kind) == value:
                return text
        except ValueError:
            continue
    return f'{float(value)!r}{si_unit}'


def format_time(value: float) -> str:
    return _format_quantity(value, 'time', ('us', 'ns', 'ms', 's'), 's')


def format_frequency(value: float) -> str:
    return _format_quantity(value, 'frequency', ('kHz', 'MHz', 'Hz', 'GHz'), 'Hz')


def render_program(program: PulseProgram) -> str:
    """Canonical DSL text; parse_program(render_program(p)) == p"""
    lines = [f'detune {spin.value} {format_frequency(value)}' for spin, value in program.detunings]
    lines.extend(event.render() for event in program.events)
    if program.sweep is not None:
        lines.append(program.sweep.render())
    return '\n'.join(lines) + '\n'


class _Token:
    __slots__ = ('text', 'line', 'column')

    def __init__(self, text: str, line: int, column: int):
        self.text = text
        self.line = line
        self.column = column

    def error(self, message: str) -> ProgramSyntaxError:
        return ProgramSyntaxError(f'{message}: {self.text!r}', self.line, self.column)


def _statements(text: str) -> List[List[_Token]]:
    statements = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        hash_pos = line.find('#')
        if hash_pos >= 0:
            line = line[:hash_pos]
        start = 0
        for chunk in line.split(';'):
            tokens = [_Token(m.group(0), line_no, start + m.start() + 1) for m in re.finditer(r'\S+', chunk)]
            if tokens:
                statements.append(tokens)
            start += len(chunk) + 1
    return statements


def _spin(token: _Token) -> Spin:
    if token.text not in ('A', 'B'):
        raise token.error('Unknown spin')
    return Spin(token.text)


def _transition(token: _Token) -> Tuple[int, int]:
    match = _TRANSITION_RE.match(token.text)
    if match is None:
        raise token.error('Malformed transition')
    m1, m2 = int(match.group(1)), int(match.group(2))
    if m1 not in M_VALUES or m2 not in M_VALUES or m1 == m2:
        raise token.error('Unknown transition')
    return m1, m2


def _quantity(token: _Token, text: str, kind: str) -> float:
    try:
        return parse_quantity(text, kind)
    except ValueError as e:
        raise token.error(f'Malformed {kind}') from e


def _expect_args(tokens: List[_Token], count: int) -> None:
    if len(tokens) - 1 < count:
        last = tokens[-1]
        raise ProgramSyntaxError(
            f'{tokens[0].text} expects {count} argument(s)', last.line, last.column + len(last.text)
        )
    if len(tokens) - 1 > count:
        raise tokens[count + 1].error('Trailing garbage')


def _parse_pulse(tokens: List[_Token]) -> PulseEvent:
    if len(tokens) < 4:
        _expect_args(tokens, 3)
    spin = _spin(tokens[1])
    transition = _transition(tokens[2])
    length = None
    try:
        angle = _parse_angle(tokens[3].text)
    except ValueError as e:
        if not _IDENT_RE.match(tokens[3].text):
            raise tokens[3].error('Malformed angle') from e
        angle, length = 0.0, tokens[3].text
    options = {}
    for token in tokens[4:]:
        key, sep, value = token.text.partition('=')
        if not sep or key not in ('phase', 'rabi', 'detuning') or key in options:
            raise token.error('Trailing garbage')
        options[key] = (token, value)
    phase = 0.0
    if 'phase' in options:
        token, value = options['phase']
        try:
            phase = _parse_angle(value)
        except ValueError as e:
            raise token.error('Malformed phase') from e
    if 'detuning' in options and 'rabi' not in options:
        raise options['detuning'][0].error('detuning= requires rabi=')
    if length is not None and 'rabi' not in options:
        raise tokens[3].error('Swept pulse length requires rabi=')
    if 'rabi' in options:
        rabi = _quantity(options['rabi'][0], options['rabi'][1], 'frequency')
        detuning, detuning_variable = 0.0, None
        if 'detuning' in options:
            token, value = options['detuning']
            if _IDENT_RE.match(value):
                detuning_variable = value
            else:
                detuning = _quantity(token, value, 'frequency')
        try:
            action = PulseAction(spin, transition, angle, phase, PulseMode.RABI, rabi, detuning)
        except ValueError as e:
            raise options['rabi'][0].error(str(e)) from e
        return PulseEvent(action, length, detuning_variable)
    return PulseEvent(PulseAction(spin, transition, angle, phase))


def _parse_wait(tokens: List[_Token]) -> WaitEvent:
    _expect_args(tokens, 1)
    token = tokens[1]
    try:
        duration = parse_quantity(token.text, 'time')
    except ValueError:
        duration = None
    if duration is not None:
        if duration < 0.0:
            raise token.error('Negative delay')
        return WaitEvent(duration)
    if _IDENT_RE.match(token.text):
        return WaitEvent(variable=token.text)
    match = _COMPLEMENT_RE.match(token.text)
    if match is None:
        raise token.error('Malformed delay')
    return WaitEvent(_quantity(token, match.group(1), 'time'), match.group(2), complement=True)


def _quantity_kinds(text: str) -> List[str]:
    kinds = []
    for kind in SWEEP_KINDS:
        try:
            parse_quantity(text, kind)
        except ValueError:
            continue
        kinds.append(kind)
    return kinds


def _sweep_bounds(start: _Token, stop: _Token) -> Tuple[float, float, str]:
    """Bounds in the first unit kind both accept; bare numbers are times in seconds"""
    start_kinds, stop_kinds = _quantity_kinds(start.text), _quantity_kinds(stop.text)
    if not start_kinds:
        raise start.error('Malformed sweep bound')
    if not stop_kinds:
        raise stop.error('Malformed sweep bound')
    for kind in start_kinds:
        if kind in stop_kinds:
            return parse_quantity(start.text, kind), parse_quantity(stop.text, kind), kind
    raise stop.error('Sweep bounds differ in unit')


def _parse_sweep(tokens: List[_Token]) -> Sweep:
    _expect_args(tokens, 4)
    if not _IDENT_RE.match(tokens[1].text):
        raise tokens[1].error('Malformed sweep variable')
    start, stop, kind = _sweep_bounds(tokens[2], tokens[3])
    if not re.match(r'^\d+$', tokens[4].text):
        raise tokens[4].error('Malformed number of points')
    try:
        return Sweep(tokens[1].text, start, stop, int(tokens[4].text), kind)
    except ProgramError as e:
        raise tokens[1].error(str(e)) from e


def parse_program(text: str, name: str = '') -> PulseProgram:
    """Parse DSL text into a validated PulseProgram"""
    events = []
    sweep = None
    detunings = {}
    for tokens in _statements(text):
        keyword = tokens[0].text
        if keyword == 'init':
            _expect_args(tokens, 0)
            events.append(InitEvent())
        elif keyword == 'pulse':
            events.append(_parse_pulse(tokens))
        elif keyword == 'wait':
            events.append(_parse_wait(tokens))
        elif keyword == 'read':
            _expect_args(tokens, 1)
            events.append(ReadEvent(_spin(tokens[1])))
        elif keyword == 'sweep':
            if sweep is not None:
                raise ProgramError(f'Multiple sweeps (line {tokens[0].line})')
            sweep = _parse_sweep(tokens)
        elif keyword == 'detune':
            _expect_args(tokens, 2)
            spin = _spin(tokens[1])
            if spin in detunings:
                raise tokens[1].error('Detuning given twice')
            detunings[spin] = _quantity(tokens[2], tokens[2].text, 'frequency')
        else:
            raise tokens[0].error('Unknown statement')
    program = PulseProgram(tuple(events), sweep, tuple(detunings.items()), name)
    return program.validate()


def bell_target(name: str, coupling_sign: int = 1) -> np.ndarray:
    """Target states of the entangling sequences in the labelled basis.

    coupling_sign is the sign of the conditional line shift, see conditional_phase_sign.
    """
    if coupling_sign not in (1, -1):
        raise ValueError(f'Coupling sign must be +1 or -1: {coupling_sign}')
    if name == 'phi':
        return (1j * basis_vector(-1, -1) - coupling_sign * basis_vector(0, 0)) / math.sqrt(2.0)
    if name == 'psi':
        return (basis_vector(-1, 0) + coupling_sign * 1j * basis_vector(0, -1)) / math.sqrt(2.0)
    raise ValueError(f'Unknown Bell target: {name}')


def entangling_tau(
    system: SpinPairSystem, field_setting: FieldSetting, constants: PhysicalConstants = CONSTANTS
) -> float:
    """Free-evolution time giving a conditional phase of pi: 1 / (2 dnu1)"""
    return 0.5 / deer_frequencies(system, field_setting, constants)[0]


def conditional_phase_sign(
    system: SpinPairSystem, field_setting: FieldSetting, constants: PhysicalConstants = CONSTANTS
) -> int:
    """Sign of the shift of A's 0:-1 line when B goes from |0> to |-1>"""
    spectrum = labeled_spectrum(pair_hamiltonian(system, field_setting, constants))
    shift = spectrum.line_shift(Spin.A, 0, -1, 0, -1)
    if shift == 0.0:
        raise LabelingError('No conditional phase: the A line does not depend on B')
    return 1 if shift > 0.0 else -1


TEMPLATE_PARAMS: Dict[str, Callable[[str], Any]] = {
    'tau': lambda v: parse_quantity(v, 'time'),
    'tau_max': lambda v: parse_quantity(v, 'time'),
    'points': int,
    'detuning': lambda v: parse_quantity(v, 'frequency'),
    'partner_state': int,
    'control': parse_bool,
    'control_rabi': lambda v: parse_quantity(v, 'frequency'),
    'control_detuning': lambda v: parse_quantity(v, 'frequency'),
    'rabi': lambda v: parse_quantity(v, 'frequency'),
    'span': lambda v: parse_quantity(v, 'frequency'),
}
TEMPLATES = ('rabi', 'odmr', 'ramsey', 'hahn', 'deer', 'deer_dq', 'deer_ddq', 'entangle_phi', 'entangle_psi')


def coerce_params(raw: Mapping[str, Any]) -> Dict[str, Any]:
    """Convert textual template parameters (e.g. from a config file) to SI values"""
    params = {}
    for key, value in raw.items():
        if key not in TEMPLATE_PARAMS:
            raise ProgramError(f'Unknown template parameter: {key}')
        params[key] = TEMPLATE_PARAMS[key](value) if isinstance(value, str) else value
    return params


def _pulse(spin: Spin, transition: Tuple[int, int], angle: float, **kwargs) -> PulseEvent:
    return PulseEvent(PulseAction(spin, transition, angle, **kwargs))


def _require(params: Mapping[str, Any], key: str) -> Any:
    if key not in params:
        raise ProgramError(f'Missing template parameter: {key}')
    return params[key]


def _time_sweep(variable: str, stop: float, params: Mapping[str, Any]) -> Sweep:
    return Sweep(variable, 0.0, checked_positive(variable, stop), int(params.get('points', DEFAULT_POINTS)))


def _rabi_action(params, angle: float) -> PulseAction:
    rabi = checked_positive('rabi', _require(params, 'rabi'))
    return PulseAction(Spin.A, (0, -1), angle, mode=PulseMode.RABI, rabi_frequency=rabi)


def _rabi(params):
    """Nutation: a resonant drive of swept length"""
    events = [InitEvent(), PulseEvent(_rabi_action(params, 0.0), length='t'), ReadEvent(Spin.A)]
    return events, _time_sweep('t', _require(params, 'tau_max'), params), ()


def _odmr(params):
    """Pulsed ODMR: a nominal pi pulse whose drive detuning is swept over +-span"""
    span = checked_positive('span', _require(params, 'span'))
    events = [InitEvent(), PulseEvent(_rabi_action(params, math.pi), detuning_variable='f'), ReadEvent(Spin.A)]
    points = int(params.get('points', DEFAULT_POINTS))
    return events, Sweep('f', -span, span, points, 'frequency'), ()


def _ramsey(params):
    partner = int(params.get('partner_state', 0))
    if partner not in M_VALUES:
        raise ProgramError(f'Wrong partner state: {partner}')
    events = [InitEvent()]
    if partner != 0:
        events.append(_pulse(Spin.B, (0, partner), math.pi))
    events += [
        _pulse(Spin.A, (0, -1), math.pi / 2),
        WaitEvent(variable='t'),
        _pulse(Spin.A, (0, -1), math.pi / 2),
        ReadEvent(Spin.A),
    ]
    detuning = float(params.get('detuning', 0.0))
    detunings = ((Spin.A, detuning),) if detuning else ()
    return events, _time_sweep('t', _require(params, 'tau_max'), params), detunings


def _hahn(params):
    events = [
        InitEvent(),
        _pulse(Spin.A, (0, -1), math.pi / 2),
        WaitEvent(variable='t'),
        _pulse(Spin.A, (0, -1), math.pi),
        WaitEvent(variable='t'),
        _pulse(Spin.A, (0, -1), math.pi / 2),
        ReadEvent(Spin.A),
    ]
    detuning = float(params.get('detuning', 0.0))
    detunings = ((Spin.A, detuning),) if detuning else ()
    return events, _time_sweep('t', _require(params, 'tau_max'), params), detunings


def _b_flip(params) -> List[Event]:
    if params.get('control', False):
        rabi = float(params.get('control_rabi', DEFAULT_CONTROL_RABI))
        detuning = float(params.get('control_detuning', DEFAULT_CONTROL_DETUNING))
        return [_pulse(Spin.B, (0, -1), math.pi, mode=PulseMode.RABI, rabi_frequency=rabi, detuning=detuning)]
    return [_pulse(Spin.B, (0, -1), math.pi)]


def _deer_echo(params, prep: List[Event], flip: List[Event]):
    tau = checked_positive('tau', _require(params, 'tau'))
    events = [InitEvent()] + prep + [
        _pulse(Spin.A, (0, -1), math.pi / 2),
        WaitEvent(tau),
        _pulse(Spin.A, (0, -1), math.pi),
        WaitEvent(variable='T'),
    ]
    events += flip
    events += [
        WaitEvent(tau, 'T', complement=True),
        _pulse(Spin.A, (0, -1), math.pi / 2),
        ReadEvent(Spin.A),
    ]
    return events, _time_sweep('T', tau, params), ()


def _deer(params):
    return _deer_echo(params, [], _b_flip(params))


def _deer_dq(params):
    prep = [_pulse(Spin.B, (0, -1), math.pi)]
    flip = [PulseEvent(a) for a in composite_dq_actions(Spin.B)]
    return _deer_echo(params, prep, flip)


def _deer_ddq(params):
    tau = checked_positive('tau', _require(params, 'tau'))
    events = [
        InitEvent(),
        _pulse(Spin.B, (0, -1), math.pi),
        _pulse(Spin.A, (0, -1), math.pi / 2),
        _pulse(Spin.A, (0, 1), math.pi),
        WaitEvent(tau),
    ]
    events += [PulseEvent(a) for a in composite_dq_actions(Spin.A)]
    events += [WaitEvent(variable='T')]
    events += [PulseEvent(a) for a in composite_dq_actions(Spin.B)]
    events += [
        WaitEvent(tau, 'T', complement=True),
        _pulse(Spin.A, (0, 1), math.pi),
        _pulse(Spin.A, (0, -1), math.pi / 2),
        ReadEvent(Spin.A),
    ]
    return events, _time_sweep('T', tau, params), ()


def _entangle(params, prep: List[Event]):
    if 'tau_max' in params:
        wait = WaitEvent(variable='tau')
        sweep = _time_sweep('tau', params['tau_max'], params)
    else:
        wait = WaitEvent(checked_positive('tau', _require(params, 'tau')))
        sweep = None
    events = [InitEvent()] + prep + [
        _pulse(Spin.A, (0, -1), math.pi / 2),
        wait,
        _pulse(Spin.A, (0, -1), math.pi),
        _pulse(Spin.B, (0, -1), math.pi / 2),
        wait,
        _pulse(Spin.A, (0, -1), math.pi / 2),
        ReadEvent(Spin.A),
    ]
    return events, sweep, ()


def _entangle_phi(params):
    return _entangle(params, [])


def _entangle_psi(params):
    return _entangle(params, [_pulse(Spin.A, (0, -1), math.pi)])


_BUILDERS = {
    'rabi': _rabi,
    'odmr': _odmr,
    'ramsey': _ramsey,
    'hahn': _hahn,
    'deer': _deer,
    'deer_dq': _deer_dq,
    'deer_ddq': _deer_ddq,
    'entangle_phi': _entangle_phi,
    'entangle_psi': _entangle_psi,
}


def build_named(name: str, params: Optional[Mapping[str, Any]] = None) -> PulseProgram:
    """Program for one of the named experiments, see TEMPLATES"""
    if name not in _BUILDERS:
        raise ProgramError(f'Unknown sequence template {name!r}; expected one of {TEMPLATES}')
    params = coerce_params(params or {})
    events, sweep, detunings = _BUILDERS[name](params)
    return PulseProgram(tuple(events), sweep, detunings, name).validate()


@dataclass(frozen=True, eq=False)
class _Engine:
    program: PulseProgram
    h: PairHamiltonian
    frame: Optional[RotatingFrame]
    dec: Optional[DecoherenceParams]
    p0_a: float
    p0_b: float

    def initial_state(self, rng: Optional[np.random.Generator]) -> QuantumState:
        state = initialize_register(self.p0_a, self.p0_b, self.frame)
        if self.dec is not None and self.dec.has_inhomogeneous:
            if rng is None:
                raise ValueError('T2* sampling requires a seed')
            state = sample_ensemble(state, self.dec, rng)
        return state

    def execute(self, stop: int, sweep_value: Optional[float], rng) -> QuantumState:
        """Apply the first stop events.

        A Rabi-mode pulse occupies its duration on the clock: the register evolves freely for
        half of it on either side of the pulse propagator.
        """
        state = self.initial_state(rng)
        clock = 0.0
        for event in self.program.events[:stop]:
            if isinstance(event, InitEvent):
                rho = initialize_register(self.p0_a, self.p0_b).rho
                state = state.replace(np.broadcast_to(rho, state.rho.shape).copy())
            elif isinstance(event, PulseEvent):
                action = event.resolve(sweep_value)
                half = 0.5 * action.duration
                state = evolve_free(state, self.h, half, self.dec)
                state = apply_pulse(state, action)
                state = evolve_free(state, self.h, half, self.dec)
                clock += action.duration
            elif isinstance(event, WaitEvent):
                t = event.resolve(sweep_value)
                if t < 0.0:
                    raise ProgramError(f'Negative delay {t} s at sweep value {sweep_value}')
                state = evolve_free(state, self.h, t, self.dec)
                clock += t
        logger.debug(f'Executed {stop} events of {self.program.name or "program"}, clock {clock:.6g} s')
        return state


def _engine(
    program: PulseProgram,
    system: SpinPairSystem,
    field_setting: FieldSetting,
    dec: Optional[DecoherenceParams],
    constants: PhysicalConstants,
    p0_a: float,
    p0_b: float,
    frame: str,
) -> _Engine:
    program.validate()
    if frame not in FRAMES:
        raise ValueError(f'Unknown frame {frame!r}; expected one of {FRAMES}')
    h = pair_hamiltonian(system, field_setting, constants)
    rotating = None
    if frame == 'rotating':
        try:
            rotating = RotatingFrame.from_hamiltonian(
                h, detuning_a=program.detuning(Spin.A), detuning_b=program.detuning(Spin.B)
            )
        except LabelingError as e:
            raise LabelingError(f'Cannot set up the rotating frame for {program.name or "program"}: {e}') from e
    elif program.detunings:
        logger.warning('Drive detunings are ignored in the lab frame')
    return _Engine(program, h, rotating, dec, p0_a, p0_b)


def _sweep_points(program: PulseProgram) -> np.ndarray:
    return program.sweep.values() if program.sweep is not None else np.zeros(1)


def _sweep_map(fn: Callable[[int], float], n: int, threads: Optional[int]) -> List[float]:
    workers = min(worker_threads(threads), n)
    if workers <= 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(fn, range(n)))


def _point_rngs(seed: Optional[int], n: int) -> List[Optional[np.random.Generator]]:
    if seed is None:
        return [None] * n
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def run_program(
    program: PulseProgram,
    system: SpinPairSystem,
    field_setting: FieldSetting,
    dec: Optional[DecoherenceParams] = None,
    constants: PhysicalConstants = CONSTANTS,
    readout_model: ReadoutModel = ReadoutModel(),
    seed: Optional[int] = None,
    p0_a: float = 1.0,
    p0_b: float = 1.0,
    frame: str = 'rotating',
    threads: Optional[int] = None,
    silent: bool = False,
) -> SignalTrace:
    """Run every sweep point: initialize, apply events in order, read out"""
    engine = _engine(program, system, field_setting, dec, constants, p0_a, p0_b, frame)
    points = _sweep_points(program)
    noisy = readout_model.noisy or (dec is not None and dec.has_inhomogeneous)
    if noisy and seed is None:
        raise ValueError('A seed is required for shot noise or T2* sampling')
    rngs = _point_rngs(seed, len(points))
    stop = len(program.events) - 1

    def point(i: int) -> float:
        try:
            state = engine.execute(stop, float(points[i]), rngs[i])
            return readout(state, program.read_spin, readout_model, rngs[i])
        except NvregError:
            logger.error(f'Sweep point {i} ({points[i]:.6g}) of {program.name or "program"} failed')
            raise

    if not silent:
        logger.info(f'Running {program.name or "program"} over {len(points)} point(s)')
    values = _sweep_map(point, len(points), threads)
    metadata = {'sweep': program.sweep.variable if program.sweep else '', 'frame': frame, 'seed': seed}
    return SignalTrace(points, values, program.name, metadata)


def state_probe(
    program: PulseProgram,
    prefix_length: int,
    system: SpinPairSystem,
    field_setting: FieldSetting,
    dec: Optional[DecoherenceParams] = None,
    constants: PhysicalConstants = CONSTANTS,
    sweep_value: Optional[float] = None,
    p0_a: float = 1.0,
    p0_b: float = 1.0,
    seed: Optional[int] = None,
    frame: str = 'rotating',
) -> QuantumState:
    """State after the first prefix_length events, without readout"""
    if not (isinstance(prefix_length, int) and 0 <= prefix_length <= len(program.events)):
        raise ValueError(f'Prefix length out of range 0..{len(program.events)}: {prefix_length}')
    engine = _engine(program, system, field_setting, dec, constants, p0_a, p0_b, frame)
    rng = None if seed is None else np.random.default_rng(seed)
    return engine.execute(prefix_length, sweep_value, rng)


def fidelity_trace(
    program: PulseProgram,
    target: Sequence[complex],
    system: SpinPairSystem,
    field_setting: FieldSetting,
    dec: Optional[DecoherenceParams] = None,
    constants: PhysicalConstants = CONSTANTS,
    seed: Optional[int] = None,
    p0_a: float = 1.0,
    p0_b: float = 1.0,
    threads: Optional[int] = None,
) -> SignalTrace:
    """Fidelity of the pre-readout state to a target versus the sweep variable"""
    engine = _engine(program, system, field_setting, dec, constants, p0_a, p0_b, 'rotating')
    points = _sweep_points(program)
    rngs = _point_rngs(seed, len(points))
    stop = len(program.events) - 1

    def point(i: int) -> float:
        return fidelity(engine.execute(stop, float(points[i]), rngs[i]), target)

    values = _sweep_map(point, len(points), threads)
    return SignalTrace(points, values, f'{program.name}_fidelity', {'seed': seed})
