"""Fluorescence readout model and analysis of simulated signal traces"""
import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Sequence, Tuple

import numpy as np
import scipy.optimize
import scipy.signal

from nvreg.dynamics import QuantumState, population
from nvreg.enums import Normalization, Spin, enum_member_lookup
from nvreg.primitives import checked_positive, checked_real

if TYPE_CHECKING:
    from nvreg.sequences import SignalTrace

logger = logging.getLogger(__name__)

DEFAULT_CONTRAST = 0.3
MIN_TRACE_POINTS = 8
DEFAULT_PAD = 8
DEFAULT_MIN_AMPLITUDE = 0.005
# peaks below this fraction of the strongest one are ignored
PEAK_REL_HEIGHT = 1e-3
_UNIFORM_GRID_RTOL = 1e-6


@dataclass(frozen=True)
class ReadoutModel:
    contrast: float = DEFAULT_CONTRAST
    photons: Optional[float] = None
    normalization: Normalization = Normalization.SPIN_FLIP

    def __post_init__(self):
        contrast = checked_real('contrast', self.contrast, 0.0, 1.0)
        if contrast == 0.0:
            raise ValueError('Readout contrast must be strictly positive')
        if self.photons is not None:
            checked_positive('photons', self.photons)
        object.__setattr__(self, 'normalization', enum_member_lookup(Normalization, self.normalization))

    @property
    def noisy(self) -> bool:
        return self.photons is not None

    def level(self, p0: float) -> float:
        """Relative fluorescence for a |0> population p0"""
        return 1.0 - self.contrast * (1.0 - p0)

    def normalized(self, level: float) -> float:
        return (level - (1.0 - self.contrast)) / self.contrast

    def to_json(self):
        return {'contrast': self.contrast, 'photons': self.photons, 'normalization': self.normalization.value}

    @classmethod
    def from_json(cls, data) -> 'ReadoutModel':
        return cls(data['contrast'], data['photons'], data['normalization'])


def readout(
    state: QuantumState,
    spin: Spin,
    model: ReadoutModel = ReadoutModel(),
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Fluorescence signal of one spin; spin-flip normalization maps |0> to 1 and |+-1> to 0"""
    p0 = population(state, spin, 0)
    level = model.level(p0)
    if model.noisy:
        if rng is None:
            raise ValueError('Shot-noise readout requires a random generator')
        level = rng.poisson(model.photons * level) / model.photons
    elif model.normalization == Normalization.SPIN_FLIP:
        return p0
    if model.normalization == Normalization.SPIN_FLIP:
        return model.normalized(level)
    return level


@dataclass(frozen=True, eq=False)
class Spectrum:
    """One-sided magnitude spectrum calibrated so a cosine of amplitude a peaks at a"""

    frequencies: np.ndarray
    magnitudes: np.ndarray
    resolution: float
    n_fft: int = 0
    norm: float = 1.0

    @property
    def bin_width(self) -> float:
        return float(self.frequencies[1] - self.frequencies[0])

    def total_power(self) -> float:
        """Sum of squares of the windowed time signal, recovered from the spectrum"""
        raw = np.abs(self.magnitudes / self.norm) ** 2
        weights = np.full(raw.shape, 2.0)
        weights[0] = 1.0
        if self.n_fft % 2 == 0:
            weights[-1] = 1.0
        return float(np.sum(weights * raw) / self.n_fft)


@dataclass(frozen=True)
class Peak:
    frequency: float
    amplitude: float


@dataclass(frozen=True)
class PeakSet:
    peaks: Tuple[Peak, ...]
    requested: int
    resolution: float

    @property
    def complete(self) -> bool:
        return len(self.peaks) >= self.requested

    @property
    def resolved(self) -> bool:
        """All requested peaks found and separated by at least the Rayleigh resolution"""
        if not self.complete:
            return False
        freqs = sorted(p.frequency for p in self.peaks)
        return all(b - a >= self.resolution for a, b in zip(freqs, freqs[1:]))

    def __len__(self):
        return len(self.peaks)

    def __iter__(self):
        return iter(self.peaks)

    def __getitem__(self, i):
        return self.peaks[i]


def _raise_for_uniform(t: np.ndarray) -> float:
    if len(t) < MIN_TRACE_POINTS:
        raise ValueError(f'At least {MIN_TRACE_POINTS} points are needed for a spectrum: {len(t)}')
    steps = np.diff(t)
    dt = float(np.mean(steps))
    if dt <= 0.0 or np.max(np.abs(steps - dt)) > _UNIFORM_GRID_RTOL * dt:
        raise ValueError('Spectral analysis requires a uniform abscissa grid')
    return dt


def fft_spectrum(trace: 'SignalTrace', window: str = 'hann', pad: int = DEFAULT_PAD) -> Spectrum:
    """Magnitude spectrum of a trace with its mean removed"""
    t = np.asarray(trace.abscissa, dtype=float)
    x = np.asarray(trace.values, dtype=float)
    dt = _raise_for_uniform(t)
    if pad < 1:
        raise ValueError(f'Zero padding factor must be >= 1: {pad}')
    n = len(x)
    w = np.ones(n) if window in ('rect', 'boxcar') else scipy.signal.get_window(window, n, fftbins=False)
    n_fft = pad * n
    norm = 2.0 / float(np.sum(w))
    spec = np.fft.rfft((x - np.mean(x)) * w, n_fft)
    return Spectrum(np.fft.rfftfreq(n_fft, dt), norm * np.abs(spec), 1.0 / (n * dt), n_fft, norm)


def _interpolate_peak(magnitudes: np.ndarray, k: int) -> Tuple[float, float]:
    """Parabola through the log magnitudes around bin k: (offset in bins, peak magnitude)"""
    if k <= 0 or k >= len(magnitudes) - 1:
        return 0.0, float(magnitudes[k])
    tiny = np.finfo(float).tiny
    ym1, y0, yp1 = np.log(np.maximum(magnitudes[k - 1 : k + 2], tiny))
    denom = ym1 - 2.0 * y0 + yp1
    if denom >= 0.0:
        return 0.0, float(magnitudes[k])
    p = 0.5 * (ym1 - yp1) / denom
    return float(p), float(np.exp(y0 - 0.25 * (ym1 - yp1) * p))


def extract_peaks(spectrum: Spectrum, count: int, min_rel_height: float = PEAK_REL_HEIGHT) -> PeakSet:
    """Strongest local maxima refined by log-parabolic interpolation, descending amplitude"""
    if count < 1:
        raise ValueError(f'Number of peaks must be >= 1: {count}')
    mags = spectrum.magnitudes
    top = float(np.max(mags[1:])) if len(mags) > 1 else 0.0
    if top <= 1e-12:
        logger.debug('Spectrum is flat: no peaks')
        return PeakSet((), count, spectrum.resolution)
    indices, _ = scipy.signal.find_peaks(mags, height=min_rel_height * top)
    indices = [k for k in indices if k > 0]
    peaks = []
    df = spectrum.bin_width
    for k in indices:
        offset, amplitude = _interpolate_peak(mags, k)
        peaks.append(Peak(float((k + offset) * df), amplitude))
    peaks.sort(key=lambda p: -p.amplitude)
    result = PeakSet(tuple(peaks[:count]), count, spectrum.resolution)
    if not result.complete:
        logger.warning(f'Requested {count} peaks, found {len(result.peaks)}')
    elif not result.resolved:
        logger.warning(f'Peaks closer than the resolution {spectrum.resolution:.4g} Hz')
    return result


def ramsey_multiplet(trace: 'SignalTrace') -> PeakSet:
    """Three strongest lines ordered by frequency (partner states -1, 0, +1 up to orientation)"""
    found = extract_peaks(fft_spectrum(trace), 3)
    return PeakSet(tuple(sorted(found.peaks, key=lambda p: p.frequency)), 3, found.resolution)


def estimate_polarization(amplitudes: Sequence[float]) -> float:
    """Lower bound on the |0> initialization probability: middle line over the multiplet sum"""
    values = np.asarray([p.amplitude if isinstance(p, Peak) else p for p in amplitudes], dtype=float)
    if values.shape != (3,):
        raise ValueError(f'Three multiplet amplitudes expected: {amplitudes}')
    if np.any(values < 0.0):
        raise ValueError(f'Line amplitudes must be non-negative: {amplitudes}')
    total = float(np.sum(values))
    if total == 0.0:
        raise ValueError('All multiplet amplitudes are zero')
    return float(values[1] / total)


@dataclass(frozen=True)
class ModulationFit:
    frequency: float
    amplitude: float
    phase: float
    offset: float
    residual: float
    flat: bool


def _cosine(t, f, a, phi, c):
    return c + a * np.cos(2.0 * np.pi * f * t + phi)


def fit_modulation(trace: 'SignalTrace', min_amplitude: float = DEFAULT_MIN_AMPLITUDE) -> ModulationFit:
    """Least-squares cosine fit seeded by the FFT peak; flat traces are flagged"""
    t = np.asarray(trace.abscissa, dtype=float)
    y = np.asarray(trace.values, dtype=float)
    span = float(t[-1] - t[0])
    offset = float(np.mean(y))
    peaks = extract_peaks(fft_spectrum(trace), 1)
    if not peaks.complete or peaks[0].amplitude < min_amplitude:
        residual = float(np.sqrt(np.mean((y - offset) ** 2)))
        amplitude = peaks[0].amplitude if peaks.complete else 0.0
        logger.info(f'No significant modulation: amplitude {amplitude:.3g}')
        return ModulationFit(0.0, amplitude, 0.0, offset, residual, True)
    f0 = peaks[0].frequency
    if f0 * span < 1.0:
        logger.warning(f'Less than one modulation period in the window: {f0 * span:.2f}')
    if f0 * span > 0.5 * len(t):
        logger.warning('Fewer than two samples per modulation period')
    # fit in units of the window length
    ts = (t - t[0]) / span
    z = np.sum((y - offset) * np.exp(-2j * np.pi * f0 * (t - t[0])))
    p0 = [f0 * span, peaks[0].amplitude, float(np.angle(z)), offset]
    try:
        popt, _ = scipy.optimize.curve_fit(_cosine, ts, y, p0=p0)
    except RuntimeError as e:
        logger.warning(f'Cosine fit failed, returning FFT estimate: {e}')
        popt = np.array(p0)
    fs, a, phi, c = (float(v) for v in popt)
    if a < 0.0:
        a, phi = -a, phi + np.pi
    if fs < 0.0:
        fs, phi = -fs, -phi
    phi = float(np.angle(np.exp(1j * (phi - 2.0 * np.pi * fs * t[0] / span))))
    frequency = fs / span
    residual = float(np.sqrt(np.mean((y - _cosine(t, frequency, a, phi, c)) ** 2)))
    flat = a < min_amplitude
    return ModulationFit(frequency, a, phi, c, residual, flat)


@dataclass(frozen=True)
class DecayFit:
    decay_time: float
    amplitude: float
    offset: float
    exponent: float
    residual: float


def fit_decay(trace: 'SignalTrace', exponent: float = 1.0) -> DecayFit:
    """Fit c + a exp(-(t/T)^p) with fixed p: p = 1 for echo decays, p = 2 for Gaussian T2*"""
    exponent = checked_positive('exponent', exponent, 10.0)
    t = np.asarray(trace.abscissa, dtype=float)
    y = np.asarray(trace.values, dtype=float)
    if len(t) < 4:
        raise ValueError('At least 4 points are needed for a decay fit')
    span = float(t[-1] - t[0])
    ts = t / span

    def model(x, tau, a, c):
        return c + a * np.exp(-((x / abs(tau)) ** exponent))

    p0 = [1.0 / 3.0, float(y[0] - y[-1]), float(y[-1])]
    popt, _ = scipy.optimize.curve_fit(model, ts, y, p0=p0, maxfev=20000)
    tau, a, c = (float(v) for v in popt)
    residual = float(np.sqrt(np.mean((y - model(ts, tau, a, c)) ** 2)))
    return DecayFit(abs(tau) * span, a, c, exponent, residual)
