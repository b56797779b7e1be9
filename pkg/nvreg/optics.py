"""Optical companion tools: FLIM images of two emitters, displacement from amplitude images,
photon antibunching and ground-state-depletion resolution.

Lengths are in nm and times in ns throughout this module.
"""
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Dict, Optional, Sequence, TextIO, Tuple

import numpy as np
import pandas as pd
import scipy.optimize
import scipy.signal

from nvreg.primitives import NvregError, checked_positive, checked_vector, worker_threads

logger = logging.getLogger(__name__)

DEFAULT_PIXELS = 32
DEFAULT_PITCH_NM = 25.0
DEFAULT_BINS = 64
DEFAULT_BIN_WIDTH_NS = 0.5
DEFAULT_PSF_FWHM_NM = 250.0
DEFAULT_PHOTONS = 1e5
DEFAULT_LIFETIMES_NS = (11.0, 7.0)
FLIM_MAGIC = 'NVREG-FLIM'
FLIM_VERSION = 1

_FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))
_HEADER_KEYS = ('rows', 'cols', 'bins', 'pitch_nm', 'bin_width_ns')


class FlimFormatError(NvregError):
    pass


@dataclass(frozen=True)
class EmitterModel:
    position: Tuple[float, float]
    lifetime: float
    brightness: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, 'position', tuple(float(c) for c in checked_vector('position', self.position, 2)))
        object.__setattr__(self, 'lifetime', checked_positive('lifetime', self.lifetime))
        object.__setattr__(self, 'brightness', checked_positive('brightness', self.brightness))


@dataclass(frozen=True, eq=False)
class FlimImage:
    """Per-pixel decay histograms, counts[row, col, bin]; x runs along columns"""

    counts: np.ndarray
    pitch: float = DEFAULT_PITCH_NM
    bin_width: float = DEFAULT_BIN_WIDTH_NS

    def __post_init__(self):
        counts = np.array(self.counts, dtype=float)
        if counts.ndim != 3 or min(counts.shape) < 1:
            raise ValueError(f'FLIM counts must be a rows x cols x bins array: {counts.shape}')
        if not np.all(np.isfinite(counts)) or np.any(counts < 0.0):
            raise ValueError('FLIM counts must be finite and non-negative')
        counts.setflags(write=False)
        object.__setattr__(self, 'counts', counts)
        object.__setattr__(self, 'pitch', checked_positive('pitch', self.pitch))
        object.__setattr__(self, 'bin_width', checked_positive('bin_width', self.bin_width))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.counts.shape[0], self.counts.shape[1]

    @property
    def bins(self) -> int:
        return self.counts.shape[2]

    def intensity(self) -> np.ndarray:
        return self.counts.sum(axis=2)

    def decay(self) -> np.ndarray:
        """Histogram summed over all pixels"""
        return self.counts.sum(axis=(0, 1))

    def __eq__(self, other: 'FlimImage') -> bool:
        return (
            type(self) == type(other)
            and self.pitch == other.pitch
            and self.bin_width == other.bin_width
            and np.array_equal(self.counts, other.counts)
        )


def pixel_centers(count: int, pitch: float) -> np.ndarray:
    """Pixel centre coordinates with the image centre at 0"""
    return (np.arange(count) - 0.5 * (count - 1)) * pitch


def decay_basis(lifetimes: Sequence[float], bins: int, bin_width: float) -> np.ndarray:
    """bins x k matrix of bin-integrated exponentials, each column normalized over the window"""
    edges = np.arange(bins + 1) * checked_positive('bin_width', bin_width)
    columns = []
    for tau in lifetimes:
        tau = checked_positive('lifetime', tau)
        column = -np.diff(np.exp(-edges / tau))
        columns.append(column / column.sum())
    return np.column_stack(columns)


def symmetric_emitters(
    displacement: Sequence[float],
    lifetimes: Tuple[float, float] = DEFAULT_LIFETIMES_NS,
    brightness: Tuple[float, float] = (1.0, 1.0),
) -> Tuple[EmitterModel, EmitterModel]:
    """Two emitters placed symmetrically around the image centre, the second at +displacement/2"""
    d = checked_vector('displacement', displacement, 2)
    return (
        EmitterModel(tuple(-0.5 * d), lifetimes[0], brightness[0]),
        EmitterModel(tuple(0.5 * d), lifetimes[1], brightness[1]),
    )


def synthesize_flim(
    emitters: Sequence[EmitterModel],
    psf_fwhm: float = DEFAULT_PSF_FWHM_NM,
    photons: float = DEFAULT_PHOTONS,
    seed: Optional[int] = None,
    pixels: int = DEFAULT_PIXELS,
    pitch: float = DEFAULT_PITCH_NM,
    bins: int = DEFAULT_BINS,
    bin_width: float = DEFAULT_BIN_WIDTH_NS,
) -> FlimImage:
    """Gaussian PSF times decay histogram per emitter; Poisson counts when a seed is given.

    `photons` is the expected total count of an emitter with brightness 1 over the image.
    Without a seed the expected (noiseless) counts are returned.
    """
    if not 1 <= len(emitters) <= 2:
        raise ValueError(f'One or two emitters are supported: {len(emitters)}')
    if len(emitters) == 2 and emitters[0].lifetime == emitters[1].lifetime:
        raise ValueError('Emitter lifetimes must differ to be separable')
    sigma = checked_positive('psf_fwhm', psf_fwhm) * _FWHM_TO_SIGMA
    photons = checked_positive('photons', photons)
    if pixels < 2 or bins < 2:
        raise ValueError(f'Image needs at least 2 pixels and 2 bins: {pixels}, {bins}')
    x = pixel_centers(pixels, pitch)
    xx, yy = np.meshgrid(x, x)
    basis = decay_basis([e.lifetime for e in emitters], bins, bin_width)
    expected = np.zeros((pixels, pixels, bins))
    for k, e in enumerate(emitters):
        spot = np.exp(-((xx - e.position[0]) ** 2 + (yy - e.position[1]) ** 2) / (2.0 * sigma**2))
        spot *= photons * e.brightness / spot.sum()
        expected += spot[:, :, None] * basis[None, None, :, k]
    if seed is None:
        return FlimImage(expected, pitch, bin_width)
    counts = np.empty_like(expected)
    for row, stream in enumerate(np.random.SeedSequence(seed).spawn(pixels)):
        counts[row] = np.random.default_rng(stream).poisson(expected[row])
    return FlimImage(counts, pitch, bin_width)


def fit_amplitudes(
    image: FlimImage,
    lifetimes: Tuple[float, float] = DEFAULT_LIFETIMES_NS,
    threads: Optional[int] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Per-pixel non-negative amplitudes (photons) of the two fixed-lifetime decays"""
    basis = decay_basis(lifetimes, image.bins, image.bin_width)
    rows, cols = image.shape

    def fit_row(i: int) -> np.ndarray:
        out = np.zeros((cols, 2))
        for j in range(cols):
            y = image.counts[i, j]
            if y.sum() > 0.0:
                out[j], _ = scipy.optimize.nnls(basis, y)
        return out

    workers = min(worker_threads(threads), rows)
    with ThreadPoolExecutor(max_workers=workers) as executor:
        amplitudes = np.array(list(executor.map(fit_row, range(rows))))
    return amplitudes[:, :, 0], amplitudes[:, :, 1]


@dataclass(frozen=True, eq=False)
class DisplacementEstimate:
    """Shift (x, y) in nm of the second image relative to the first"""

    vector: np.ndarray
    uncertainty: np.ndarray
    flat: bool = False

    @property
    def magnitude(self) -> float:
        return float(np.hypot(*self.vector))

    def to_json(self) -> Dict[str, Any]:
        return {'vector': self.vector.tolist(), 'uncertainty': self.uncertainty.tolist(), 'flat': self.flat}


def _refine(left: float, center: float, right: float) -> Tuple[float, float]:
    """Vertex offset and curvature of a parabola through log values (raw values if any is <= 0)"""
    if min(left, center, right) > 0.0:
        left, center, right = math.log(left), math.log(center), math.log(right)
    denom = left - 2.0 * center + right
    if denom >= 0.0:
        return 0.0, 0.0
    return 0.5 * (left - right) / denom, denom


def correlate_displacement(
    img1: np.ndarray, img2: np.ndarray, pitch: float = DEFAULT_PITCH_NM
) -> DisplacementEstimate:
    """Cross-correlation peak of two amplitude images with log-parabolic sub-pixel refinement"""
    a = np.asarray(img1, dtype=float)
    b = np.asarray(img2, dtype=float)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f'Images must share a 2-D grid: {a.shape} {b.shape}')
    pitch = checked_positive('pitch', pitch)
    corr = scipy.signal.correlate2d(b, a, mode='full')
    top = float(np.max(corr))
    undefined = DisplacementEstimate(np.full(2, math.nan), np.full(2, math.inf), True)
    if not math.isfinite(top) or top <= 0.0 or top - float(np.min(corr)) <= 1e-12 * abs(top):
        logger.warning('Correlation is flat: displacement undefined')
        return undefined
    i, j = np.unravel_index(int(np.argmax(corr)), corr.shape)
    shift = np.array([j - (a.shape[1] - 1), i - (a.shape[0] - 1)], dtype=float)
    curvature = np.zeros(2)
    if 0 < j < corr.shape[1] - 1:
        dx, curvature[0] = _refine(corr[i, j - 1], corr[i, j], corr[i, j + 1])
        shift[0] += dx
    if 0 < i < corr.shape[0] - 1:
        dy, curvature[1] = _refine(corr[i - 1, j], corr[i, j], corr[i + 1, j])
        shift[1] += dy
    n1, n2 = float(a.sum()), float(b.sum())
    # Gaussian peak: log curvature = -1/width^2; the correlation width is sqrt(2) times the spot width
    width = np.where(curvature < 0.0, np.sqrt(-1.0 / np.where(curvature < 0.0, curvature, -1.0)), math.inf)
    spot = width / math.sqrt(2.0)
    uncertainty = pitch * spot * math.sqrt(1.0 / n1 + 1.0 / n2)
    return DisplacementEstimate(pitch * shift, uncertainty, False)


def analyze_flim(
    image: FlimImage,
    lifetimes: Tuple[float, float] = DEFAULT_LIFETIMES_NS,
    threads: Optional[int] = None,
) -> Tuple[np.ndarray, np.ndarray, DisplacementEstimate]:
    """Amplitude images of both lifetimes and the displacement of the second emitter"""
    a1, a2 = fit_amplitudes(image, lifetimes, threads)
    estimate = correlate_displacement(a1, a2, image.pitch)
    logger.info(
        f'FLIM displacement {estimate.magnitude:.2f} nm, amplitude totals {a1.sum():.4g} / {a2.sum():.4g}'
    )
    return a1, a2, estimate


def fit_lifetime(histogram: Sequence[float], bin_width: float = DEFAULT_BIN_WIDTH_NS) -> float:
    """Single-exponential lifetime (ns) of a decay histogram"""
    y = np.asarray(histogram, dtype=float)
    if y.ndim != 1 or len(y) < 3 or y.sum() <= 0.0:
        raise ValueError('Lifetime fit needs a non-empty histogram with at least 3 bins')
    bin_width = checked_positive('bin_width', bin_width)
    bins = len(y)

    def model(_, amplitude, tau):
        return amplitude * decay_basis([abs(tau)], bins, bin_width)[:, 0]

    t = (np.arange(bins) + 0.5) * bin_width
    positive = y > 0.0
    slope = np.polyfit(t[positive], np.log(y[positive]), 1)[0] if positive.sum() >= 2 else -1.0
    tau0 = -1.0 / slope if slope < 0.0 else bins * bin_width
    popt, _ = scipy.optimize.curve_fit(model, t, y, p0=[y.sum(), tau0], maxfev=10000)
    return float(abs(popt[1]))


def g2_zero(n_emitters: int) -> float:
    """Zero-delay autocorrelation of n equal independent single-photon emitters"""
    if isinstance(n_emitters, bool) or not isinstance(n_emitters, int) or n_emitters < 1:
        raise ValueError(f'Number of emitters must be a positive integer: {n_emitters}')
    return 1.0 - 1.0 / n_emitters


def g2_curve(tau: Sequence[float], n_emitters: int, lifetime: float) -> np.ndarray:
    lifetime = checked_positive('lifetime', lifetime)
    depth = 1.0 - g2_zero(n_emitters)
    return 1.0 - depth * np.exp(-np.abs(np.asarray(tau, dtype=float)) / lifetime)


def gsd_resolution(r0: float, pump_ratio: float) -> float:
    """Half width of the ground-state-depletion spot, r0 / sqrt(P0 / Gamma)"""
    return checked_positive('r0', r0) / math.sqrt(checked_positive('pump_ratio', pump_ratio))


def write_flim(image: FlimImage, f: TextIO) -> None:
    rows, cols = image.shape
    f.write(
        f'{FLIM_MAGIC} {FLIM_VERSION} rows={rows} cols={cols} bins={image.bins} '
        f'pitch_nm={image.pitch!r} bin_width_ns={image.bin_width!r}\n'
    )
    for i in range(rows):
        for j in range(cols):
            f.write(' '.join(f'{v:.17g}' for v in image.counts[i, j]) + '\n')


def _parse_header(line: str) -> Dict[str, float]:
    parts = line.split()
    if len(parts) < 2 or parts[0] != FLIM_MAGIC:
        raise FlimFormatError(f'Not a FLIM file, header starts with {line[:20]!r}')
    if parts[1] != str(FLIM_VERSION):
        raise FlimFormatError(f'Unsupported FLIM version: {parts[1]}')
    header = {}
    for part in parts[2:]:
        match = re.match(r'^(\w+)=(\S+)$', part)
        if match is None or match.group(1) not in _HEADER_KEYS:
            raise FlimFormatError(f'Malformed FLIM header entry: {part!r}')
        try:
            header[match.group(1)] = float(match.group(2))
        except ValueError as e:
            raise FlimFormatError(f'Malformed FLIM header value: {part!r}') from e
    missing = [k for k in _HEADER_KEYS if k not in header]
    if missing:
        raise FlimFormatError(f'FLIM header misses {missing}')
    for key in ('rows', 'cols', 'bins'):
        if header[key] < 1 or header[key] != int(header[key]):
            raise FlimFormatError(f'FLIM header {key} must be a positive integer: {header[key]}')
    return header


def read_flim(f: TextIO) -> FlimImage:
    lines = [line for line in f.read().splitlines() if line.strip()]
    if not lines:
        raise FlimFormatError('Empty FLIM file')
    header = _parse_header(lines[0])
    rows, cols, bins = int(header['rows']), int(header['cols']), int(header['bins'])
    if len(lines) - 1 != rows * cols:
        raise FlimFormatError(f'Expected {rows * cols} pixel lines: {len(lines) - 1}')
    counts = np.empty((rows * cols, bins))
    for k, line in enumerate(lines[1:]):
        try:
            values = np.array([float(v) for v in line.split()])
        except ValueError as e:
            raise FlimFormatError(f'Pixel line {k + 2}: non-numeric counts') from e
        if values.shape != (bins,):
            raise FlimFormatError(f'Pixel line {k + 2}: expected {bins} counts, got {len(values)}')
        counts[k] = values
    try:
        return FlimImage(counts.reshape(rows, cols, bins), header['pitch_nm'], header['bin_width_ns'])
    except ValueError as e:
        raise FlimFormatError(str(e)) from e


def write_matrix_csv(matrix: np.ndarray, f) -> None:
    pd.DataFrame(np.asarray(matrix, dtype=float)).to_csv(
        f, header=False, index=False, float_format='%.17g', lineterminator='\n'
    )


def read_matrix_csv(path) -> np.ndarray:
    return pd.read_csv(path, header=None, comment='#').to_numpy(dtype=float)
