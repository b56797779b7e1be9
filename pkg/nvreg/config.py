"""INI run configuration with SI unit suffixes"""
import configparser
import logging
import os
import re
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from nvreg.dynamics import DecoherenceParams
from nvreg.enums import Normalization, enum_member_lookup
from nvreg.measure import ReadoutModel
from nvreg.primitives import EPS_UNIT, NvregError
from nvreg.spincore import DEFAULT_D, FieldSetting, NVCenter, SpinPairSystem

logger = logging.getLogger(__name__)


class ConfigError(NvregError):
    pass


UNITS = {
    'length': {'m': 1.0, 'um': 1e-6, 'nm': 1e-9, 'A': 1e-10},
    'time': {'s': 1.0, 'ms': 1e-3, 'us': 1e-6, 'ns': 1e-9},
    'frequency': {'Hz': 1.0, 'kHz': 1e3, 'MHz': 1e6, 'GHz': 1e9},
    'field': {'T': 1.0, 'mT': 1e-3, 'G': 1e-4},
}
_NUMBER = r'[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?'
_QUANTITY_RE = re.compile(rf'^({_NUMBER})\s*([A-Za-z]*)$')

SECTIONS = ('system', 'field', 'decoherence', 'readout', 'sequence', 'run', 'fit', 'flim', 'fidelity')
FRAMES = ('rotating', 'lab')


def parse_quantity(text: str, kind: str, default_unit: Optional[str] = None) -> float:
    """Parse '10 us', '2.87GHz' etc. into SI; bare numbers use default_unit (SI if None)"""
    units = UNITS[kind]
    match = _QUANTITY_RE.match(text.strip())
    if match is None:
        raise ValueError(f'Cannot parse {kind} quantity: {text!r}')
    value, unit = float(match.group(1)), match.group(2)
    if not unit:
        return value * (units[default_unit] if default_unit else 1.0)
    if unit not in units:
        raise ValueError(f'Unknown {kind} unit {unit!r} in {text!r}; expected one of {sorted(units)}')
    return value * units[unit]


def parse_vector(text: str, kind: Optional[str] = None, size: int = 3) -> np.ndarray:
    """Whitespace separated numbers optionally followed by one unit"""
    parts = text.split()
    factor = 1.0
    if kind is not None and parts and parts[-1] in UNITS[kind]:
        factor = UNITS[kind][parts.pop()]
    if len(parts) != size:
        raise ValueError(f'Expected {size} numbers in {text!r}')
    try:
        return factor * np.array([float(p) for p in parts])
    except ValueError as e:
        raise ValueError(f'Cannot parse vector {text!r}') from e


def parse_quantity_list(text: str, kind: str) -> Tuple[float, ...]:
    """'50 100 200 us' -> SI values sharing the trailing unit"""
    parts = text.replace(',', ' ').split()
    if parts and parts[-1] in UNITS[kind]:
        unit = parts.pop()
        return tuple(parse_quantity(p + unit, kind) for p in parts)
    return tuple(parse_quantity(p, kind) for p in parts)


def parse_bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ('1', 'yes', 'true', 'on'):
        return True
    if value in ('0', 'no', 'false', 'off'):
        return False
    raise ValueError(f'Not a boolean: {text!r}')


def format_vector(vec: Sequence[float], unit: str, factor: float) -> str:
    return ' '.join(repr(float(v) / factor) for v in vec) + f' {unit}'


@dataclass(frozen=True)
class RunConfig:
    system: SpinPairSystem
    field_setting: FieldSetting
    decoherence: DecoherenceParams = DecoherenceParams.disabled()
    readout: ReadoutModel = ReadoutModel()
    p0_a: float = 1.0
    p0_b: float = 1.0
    target_coupling: Optional[float] = None
    sequence_name: Optional[str] = None
    sequence_file: Optional[str] = None
    sequence_params: Tuple[Tuple[str, str], ...] = ()
    seed: Optional[int] = None
    frame: str = 'rotating'
    threads: Optional[int] = None
    fit_confidence: float = 1.0
    fit_basis: int = 0
    fidelity_t2: Tuple[float, ...] = ()
    fidelity_tau: Optional[float] = None
    flim: Tuple[Tuple[str, str], ...] = ()

    def __post_init__(self):
        if self.frame not in FRAMES:
            raise ConfigError(f'Unknown frame {self.frame!r}; expected one of {FRAMES}')
        if self.sequence_file is not None and not os.path.isfile(self.sequence_file):
            raise ConfigError(f'Sequence file does not exist: {self.sequence_file}')
        if self.sequence_file is not None and self.sequence_name is not None:
            raise ConfigError('Give either a sequence name or a sequence file, not both')
        if self.fit_basis not in (0, 1):
            raise ConfigError(f'Lattice basis index must be 0 or 1: {self.fit_basis}')

    @property
    def noisy(self) -> bool:
        return self.readout.noisy or self.decoherence.has_inhomogeneous

    def raise_for_seed(self) -> None:
        if self.noisy and self.seed is None:
            raise ConfigError('A seed is required when shot noise or T2* sampling is enabled')

    def with_seed(self, seed: Optional[int]) -> 'RunConfig':
        if seed is None:
            return self
        kwargs = {f: getattr(self, f) for f in self.__dataclass_fields__}
        kwargs['seed'] = seed
        return RunConfig(**kwargs)

    def to_ini(self) -> str:
        """Canonical configuration echo; parsing it reproduces the run"""
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        a, b = self.system.center_a, self.system.center_b
        cp['system'] = {
            'axis_a': format_vector(a.axis, '', 1.0).strip(),
            'axis_b': format_vector(b.axis, '', 1.0).strip(),
            'd_a': f'{a.d!r} Hz',
            'e_a': f'{a.e!r} Hz',
            'd_b': f'{b.d!r} Hz',
            'e_b': f'{b.e!r} Hz',
            'displacement': format_vector(self.system.displacement, 'm', 1.0),
        }
        if self.target_coupling is not None:
            cp['system']['target_coupling'] = f'{self.target_coupling!r} Hz'
        cp['field'] = {'b': format_vector(self.field_setting.b, 'T', 1.0)}
        dec = self.decoherence
        cp['decoherence'] = {
            'homogeneous': str(dec.homogeneous).lower(),
            'inhomogeneous': str(dec.inhomogeneous).lower(),
            'samples': str(dec.samples),
        }
        for key in ('t2_a', 't2_b', 't2star_a', 't2star_b'):
            if getattr(dec, key) is not None:
                cp['decoherence'][key] = f'{getattr(dec, key)!r} s'
        cp['readout'] = {
            'contrast': repr(self.readout.contrast),
            'normalization': self.readout.normalization.value,
            'p0_a': repr(self.p0_a),
            'p0_b': repr(self.p0_b),
        }
        if self.readout.photons is not None:
            cp['readout']['photons'] = repr(self.readout.photons)
        cp['sequence'] = dict(self.sequence_params)
        if self.sequence_name is not None:
            cp['sequence']['name'] = self.sequence_name
        if self.sequence_file is not None:
            cp['sequence']['file'] = self.sequence_file
        cp['run'] = {'frame': self.frame}
        if self.seed is not None:
            cp['run']['seed'] = str(self.seed)
        if self.threads is not None:
            cp['run']['threads'] = str(self.threads)
        cp['fit'] = {'confidence': repr(self.fit_confidence), 'basis': str(self.fit_basis)}
        cp['fidelity'] = {}
        if self.fidelity_t2:
            cp['fidelity']['t2'] = ' '.join(f'{v!r}' for v in self.fidelity_t2) + ' s'
        if self.fidelity_tau is not None:
            cp['fidelity']['tau'] = f'{self.fidelity_tau!r} s'
        cp['flim'] = dict(self.flim)
        lines = []
        for section in cp.sections():
            lines.append(f'[{section}]')
            lines.extend(f'{k} = {v}' for k, v in cp[section].items())
        return '\n'.join(lines) + '\n'


def _get(cp: configparser.ConfigParser, section: str, key: str) -> Optional[str]:
    if cp.has_section(section) and cp.has_option(section, key):
        return cp.get(section, key)
    return None


def _center(cp: configparser.ConfigParser, suffix: str) -> NVCenter:
    axis_text = _get(cp, 'system', f'axis_{suffix}')
    axis = parse_vector(axis_text) if axis_text else np.array([1.0, 1.0, 1.0])
    d_text = _get(cp, 'system', f'd_{suffix}')
    e_text = _get(cp, 'system', f'e_{suffix}')
    d = parse_quantity(d_text, 'frequency', 'Hz') if d_text else DEFAULT_D
    e = parse_quantity(e_text, 'frequency', 'Hz') if e_text else 0.0
    # unit axes are kept bit-exact so configuration echoes reproduce a run
    if abs(float(np.linalg.norm(axis)) - 1.0) <= EPS_UNIT:
        return NVCenter(tuple(axis), d, e)
    return NVCenter.along(axis, d, e)


def _field(cp: configparser.ConfigParser) -> FieldSetting:
    b_text = _get(cp, 'field', 'b')
    if b_text is not None:
        return FieldSetting(tuple(parse_vector(b_text, 'field')))
    direction = _get(cp, 'field', 'direction')
    magnitude = _get(cp, 'field', 'magnitude')
    if direction is None or magnitude is None:
        raise ConfigError('Section [field] needs either b or direction and magnitude')
    return FieldSetting.along(parse_vector(direction), parse_quantity(magnitude, 'field'))


def _optional_time(cp, section, key) -> Optional[float]:
    text = _get(cp, section, key)
    return None if text is None else parse_quantity(text, 'time')


def config_from_parser(cp: configparser.ConfigParser, base_dir: str = '.') -> RunConfig:
    unknown = [s for s in cp.sections() if s not in SECTIONS]
    if unknown:
        raise ConfigError(f'Unknown configuration sections: {unknown}')
    try:
        displacement_text = _get(cp, 'system', 'displacement')
        if displacement_text is None:
            raise ConfigError('Section [system] needs a displacement')
        system = SpinPairSystem(
            _center(cp, 'a'), _center(cp, 'b'), tuple(parse_vector(displacement_text, 'length'))
        )
        field_setting = _field(cp) if cp.has_section('field') else FieldSetting()

        samples = _get(cp, 'decoherence', 'samples')
        homogeneous = _get(cp, 'decoherence', 'homogeneous')
        inhomogeneous = _get(cp, 'decoherence', 'inhomogeneous')
        decoherence = DecoherenceParams(
            _optional_time(cp, 'decoherence', 't2_a'),
            _optional_time(cp, 'decoherence', 't2_b'),
            _optional_time(cp, 'decoherence', 't2star_a'),
            _optional_time(cp, 'decoherence', 't2star_b'),
            parse_bool(homogeneous) if homogeneous else True,
            parse_bool(inhomogeneous) if inhomogeneous else True,
            int(samples) if samples else DecoherenceParams().samples,
        )

        contrast = _get(cp, 'readout', 'contrast')
        photons = _get(cp, 'readout', 'photons')
        normalization = _get(cp, 'readout', 'normalization')
        readout_model = ReadoutModel(
            float(contrast) if contrast else ReadoutModel().contrast,
            float(photons) if photons else None,
            enum_member_lookup(Normalization, normalization) if normalization else Normalization.SPIN_FLIP,
        )
        p0_a = _get(cp, 'readout', 'p0_a')
        p0_b = _get(cp, 'readout', 'p0_b')
        target = _get(cp, 'system', 'target_coupling')

        sequence_params = {}
        name = file_path = None
        if cp.has_section('sequence'):
            for key, value in cp.items('sequence'):
                if key == 'name':
                    name = value.strip()
                elif key == 'file':
                    file_path = value.strip()
                    if not os.path.isabs(file_path):
                        file_path = os.path.normpath(os.path.join(base_dir, file_path))
                else:
                    sequence_params[key] = value.strip()

        seed = _get(cp, 'run', 'seed')
        threads = _get(cp, 'run', 'threads')
        confidence = _get(cp, 'fit', 'confidence')
        basis = _get(cp, 'fit', 'basis')
        t2_values = _get(cp, 'fidelity', 't2')
        flim = tuple((k, v.strip()) for k, v in cp.items('flim')) if cp.has_section('flim') else ()
        return RunConfig(
            system=system,
            field_setting=field_setting,
            decoherence=decoherence,
            readout=readout_model,
            p0_a=float(p0_a) if p0_a else 1.0,
            p0_b=float(p0_b) if p0_b else 1.0,
            target_coupling=parse_quantity(target, 'frequency', 'Hz') if target else None,
            sequence_name=name,
            sequence_file=file_path,
            sequence_params=tuple(sorted(sequence_params.items())),
            seed=int(seed) if seed else None,
            frame=(_get(cp, 'run', 'frame') or 'rotating').strip(),
            threads=int(threads) if threads else None,
            fit_confidence=float(confidence) if confidence else 1.0,
            fit_basis=int(basis) if basis else 0,
            fidelity_t2=parse_quantity_list(t2_values, 'time') if t2_values else (),
            fidelity_tau=_optional_time(cp, 'fidelity', 'tau'),
            flim=flim,
        )
    except ConfigError:
        raise
    except (ValueError, TypeError, LookupError) as e:
        raise ConfigError(f'Invalid configuration: {e}') from e


def parse_config(text: str, base_dir: str = '.') -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=('#', ';'))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f'Malformed configuration: {e}') from e
    return config_from_parser(cp, base_dir)


def load_config(path: str) -> RunConfig:
    try:
        with open(path, encoding='utf-8') as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f'Cannot read configuration {path}: {e}') from e
    logger.debug(f'Loaded configuration from {path}')
    return parse_config(text, os.path.dirname(os.path.abspath(path)))
