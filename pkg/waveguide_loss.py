"""
Waveguide Loss - resonance fitting and attenuation bounds

Fits complex transmission spectra of the long-waveguide cavity modes with a
Lorentzian, then turns each loaded Q into an upper bound on the waveguide
attenuation constant. Also provides the end-to-end loss budget for a given
length of line.
"""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import lmfit
import numpy as np
from scipy.signal import find_peaks

from errors import DomainError, FitError

logger = logging.getLogger(__name__)

SPEED_OF_LIGHT = 299_792_458.0
DB_PER_NEPER = 8.685889638   # 20 / ln(10)
WR90_WIDTH = 22.86e-3


@dataclass(frozen=True)
class WaveguideGeometry:
    width_a: float = WR90_WIDTH
    light_speed: float = SPEED_OF_LIGHT

    def __post_init__(self):
        if not self.width_a > 0:
            raise DomainError(f"Waveguide width must be positive, got {self.width_a}")

    @property
    def cutoff_frequency(self) -> float:
        return cutoff_frequency(self)


WR90 = WaveguideGeometry()


@dataclass(frozen=True)
class ResonanceFit:
    f0: float
    q_loaded: float
    amplitude: complex
    baseline: complex
    residual: float = 0.0
    slope: complex = 0j

    def __post_init__(self):
        if not self.f0 > 0 or not self.q_loaded > 0:
            raise DomainError(f"Resonance needs f0 > 0 and Q > 0, got f0={self.f0}, Q={self.q_loaded}")

    @property
    def linewidth(self) -> float:
        return self.f0 / self.q_loaded


def cutoff_frequency(geom: WaveguideGeometry = WR90) -> float:
    """TE10 cutoff c / 2a."""
    return geom.light_speed / (2 * geom.width_a)


def synthesize_spectrum(fit: ResonanceFit, freqs) -> np.ndarray:
    freqs = np.asarray(freqs, dtype=float)
    lorentz = fit.amplitude / (1 + 2j * fit.q_loaded * (freqs - fit.f0) / fit.f0)
    return fit.baseline + fit.slope * (freqs - fit.f0) / fit.f0 + lorentz


def _initial_guess(freqs: np.ndarray, s21: np.ndarray):
    edge = max(1, len(freqs) // 20)
    baseline = np.mean(np.concatenate([s21[:edge], s21[-edge:]]))
    dev = s21 - baseline
    peak = int(np.argmax(np.abs(dev)))
    height = np.abs(dev[peak])
    noise = np.std(np.concatenate([dev[:edge], dev[-edge:]]))
    if height <= max(1e-12 * np.abs(baseline), 5 * noise) or height == 0:
        raise FitError("No resonance found above the baseline")
    above = np.nonzero(np.abs(dev) ** 2 >= height ** 2 / 2)[0]
    step = freqs[1] - freqs[0]
    fwhm = (above.max() - above.min()) * step
    if fwhm < step:
        raise FitError("Resonance linewidth is narrower than the frequency grid spacing")
    return baseline, dev[peak], freqs[peak], fwhm


def fit_lorentzian(freqs, s21, fit_slope: bool = False) -> ResonanceFit:
    """
    Joint real/imaginary least-squares fit of
    s21 = baseline + amplitude / (1 + 2iQ (f - f0) / f0).

    The fit runs in detuning units of the initial linewidth estimate so all
    parameters are of order one.
    """
    freqs = np.asarray(freqs, dtype=float)
    s21 = np.asarray(s21, dtype=complex)
    if freqs.shape != s21.shape or freqs.ndim != 1:
        raise ValueError("Frequencies and s21 must be 1-D arrays of equal length")
    if len(freqs) < 7:
        raise ValueError(f"Lorentzian fit needs at least 7 points, got {len(freqs)}")
    if np.any(np.diff(freqs) <= 0):
        raise ValueError("Frequencies must be strictly increasing")

    baseline, amp, f_peak, fwhm = _initial_guess(freqs, s21)
    scale = np.max(np.abs(s21))
    x = (freqs - f_peak) / fwhm
    y = s21 / scale

    params = lmfit.Parameters()
    params.add('center', value=0.0)
    params.add('width', value=1.0, min=1e-9)
    params.add('amp_re', value=(amp / scale).real)
    params.add('amp_im', value=(amp / scale).imag)
    params.add('base_re', value=(baseline / scale).real)
    params.add('base_im', value=(baseline / scale).imag)
    params.add('slope_re', value=0.0, vary=fit_slope)
    params.add('slope_im', value=0.0, vary=fit_slope)

    def model(p, xv):
        a = p['amp_re'] + 1j * p['amp_im']
        b = p['base_re'] + 1j * p['base_im']
        k = p['slope_re'] + 1j * p['slope_im']
        return b + k * xv + a / (1 + 2j * (xv - p['center']) / p['width'])

    def residual(p):
        diff = model(p, x) - y
        return np.concatenate([diff.real, diff.imag])

    result = lmfit.minimize(residual, params, method='leastsq', xtol=1e-14, ftol=1e-14, max_nfev=20000)
    if not result.success:
        raise FitError(f"Lorentzian fit did not converge: {result.message}")

    p = result.params
    f0 = f_peak + p['center'].value * fwhm
    linewidth = p['width'].value * fwhm
    if linewidth < freqs[1] - freqs[0]:
        raise FitError(f"Fitted linewidth {linewidth:.3g} Hz is narrower than the grid spacing")
    if f0 <= 0:
        raise FitError(f"Fitted resonance frequency {f0:.6g} Hz is not positive")
    rms = float(np.sqrt(np.mean(np.abs(model(p, x) - y) ** 2)) * scale)
    fit = ResonanceFit(
        f0=f0,
        q_loaded=f0 / linewidth,
        amplitude=complex(p['amp_re'].value, p['amp_im'].value) * scale,
        baseline=complex(p['base_re'].value, p['base_im'].value) * scale,
        residual=rms,
        # slope is per unit of x; rescale to per unit of (f - f0) / f0
        slope=complex(p['slope_re'].value, p['slope_im'].value) * scale * f0 / fwhm,
    )
    logger.debug("Resonance at %.7f GHz: Q = %.4g, rms %.3g", f0 / 1e9, fit.q_loaded, rms)
    return fit


def find_resonances(freqs, s21, threshold: float = 0.5, window: int = 50,
                    min_spacing: Optional[int] = None) -> List[Tuple[int, int]]:
    """
    Peak-finding pre-pass over a wide scan: index windows (lo, hi) around
    every peak whose deviation from the median baseline exceeds
    `threshold` times the largest deviation.
    """
    freqs = np.asarray(freqs, dtype=float)
    s21 = np.asarray(s21, dtype=complex)
    baseline = np.median(s21.real) + 1j * np.median(s21.imag)
    signal = np.abs(s21 - baseline)
    if signal.max() == 0:
        return []
    peaks, _ = find_peaks(signal, height=threshold * signal.max(), distance=min_spacing or window)
    windows = [(max(0, p - window), min(len(freqs), p + window + 1)) for p in peaks]
    logger.info("Found %d resonances in the wide scan", len(windows))
    return windows


def fit_resonances(freqs, s21, threshold: float = 0.5, window: int = 50) -> List[ResonanceFit]:
    freqs = np.asarray(freqs, dtype=float)
    s21 = np.asarray(s21, dtype=complex)
    fits = []
    for lo, hi in find_resonances(freqs, s21, threshold, window):
        try:
            fits.append(fit_lorentzian(freqs[lo:hi], s21[lo:hi]))
        except FitError as e:
            logger.warning("Skipping window %.6f-%.6f GHz: %s", freqs[lo] / 1e9, freqs[hi - 1] / 1e9, e)
    return fits


def attenuation(f0: float, q: float, geom: WaveguideGeometry = WR90) -> Tuple[float, float]:
    """Upper bound on alpha from a loaded Q: (Np/m, dB/km)."""
    cutoff = cutoff_frequency(geom)
    if f0 <= cutoff:
        raise DomainError(f"Frequency {f0 / 1e9:.4f} GHz is at or below cutoff {cutoff / 1e9:.4f} GHz")
    if not q > 0:
        raise DomainError(f"Quality factor must be positive, got {q}")
    alpha = (1 / q) * (2 * np.pi * f0 / geom.light_speed) / np.sqrt(1 - (cutoff / f0) ** 2)
    return float(alpha), float(alpha * DB_PER_NEPER * 1000)


def q_for_attenuation(f0: float, alpha_db_per_km: float, geom: WaveguideGeometry = WR90) -> float:
    """Loaded Q at which the attenuation bound equals alpha_db_per_km."""
    if not alpha_db_per_km > 0:
        raise DomainError(f"Attenuation must be positive, got {alpha_db_per_km}")
    _, alpha_at_unit_q = attenuation(f0, 1.0, geom)
    return alpha_at_unit_q / alpha_db_per_km


def loss_budget(alpha_db_per_km: float, length: float) -> float:
    """Fractional power loss over `length` metres."""
    if length < 0:
        raise ValueError(f"Length must be non-negative, got {length}")
    return float(1 - 10 ** (-alpha_db_per_km / 1000 * length / 10))


def read_spectrum_csv(path) -> Tuple[np.ndarray, np.ndarray]:
    """Columns frequency_Hz, re_s21, im_s21."""
    freqs, values = [], []
    with open(path, newline='') as f:
        reader = csv.DictReader(f)
        missing = {'frequency_Hz', 're_s21', 'im_s21'} - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"Spectrum CSV missing columns: {sorted(missing)}")
        for row in reader:
            freqs.append(float(row['frequency_Hz']))
            values.append(complex(float(row['re_s21']), float(row['im_s21'])))
    return np.array(freqs), np.array(values)


def write_spectrum_csv(path, freqs, s21) -> Path:
    path = Path(path)
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['frequency_Hz', 're_s21', 'im_s21'])
        for fr, s in zip(freqs, s21):
            writer.writerow([f"{fr:.17g}", f"{s.real:.17g}", f"{s.imag:.17g}"])
    return path


def write_attenuation_table(path, fits: Sequence[ResonanceFit], geom: WaveguideGeometry = WR90) -> Path:
    """Columns f0_GHz, Q, alpha_dB_per_km."""
    path = Path(path)
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['f0_GHz', 'Q', 'alpha_dB_per_km'])
        for fit in fits:
            _, db = attenuation(fit.f0, fit.q_loaded, geom)
            writer.writerow([f"{fit.f0 / 1e9:.17g}", f"{fit.q_loaded:.17g}", f"{db:.17g}"])
    return path
