"""
Pulse Synthesis - shaped-photon drive waveforms and drive calibration

Generates:
- The time-symmetric sech photon envelope
- Emission / absorption drive rates for the |f0> <-> |g1> sideband
- Truncated, ramped and uniformly sampled pulse schedules
- Polynomial calibration models mapping drive amplitude to drive rate
  and ac Stark shift, and their numerical inversion

Units are SI throughout: seconds and rad/s. CSV files use ns and MHz
(frequencies as f = omega / 2pi).
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import brentq

from errors import DomainError, ExtrapolationError, FitError

logger = logging.getLogger(__name__)

TRUNCATION_HALFWIDTH = 4.6   # in units of 1/Gamma
DEFAULT_RAMP = 6e-9
DEFAULT_SAMPLE_DT = 0.5e-9
TWO_PI_MHZ = 2 * np.pi * 1e6

EMISSION = 'emission'
ABSORPTION = 'absorption'

CLOSED_FORM = 'closed_form'
EXACT = 'exact'
DRIVE_FORMS = (EXACT, CLOSED_FORM)


def _sech(x):
    """Overflow-free hyperbolic secant."""
    ax = np.abs(x)
    return 2 * np.exp(-ax) / (1 + np.exp(-2 * ax))


@dataclass(frozen=True)
class PhotonShape:
    """sech-shaped photon of angular bandwidth gamma centered at center_time."""
    gamma: float
    center_time: float = 0.0

    def __post_init__(self):
        if not self.gamma > 0:
            raise DomainError(f"Photon bandwidth must be positive, got {self.gamma}")

    def envelope(self, t):
        return target_envelope(self, t)


def target_envelope(shape: PhotonShape, t):
    """phi(t) = sqrt(Gamma/4) sech(Gamma (t - t0) / 2), unit power."""
    t = np.asarray(t, dtype=float)
    return np.sqrt(shape.gamma / 4) * _sech(shape.gamma * (t - shape.center_time) / 2)


def truncated_power_fraction(halfwidth: float = TRUNCATION_HALFWIDTH) -> float:
    """Fraction of photon power inside +-halfwidth/Gamma."""
    return float(np.tanh(halfwidth / 2))


def _check_rates(gamma: float, kappa: float):
    if not gamma > 0:
        raise DomainError(f"Photon bandwidth must be positive, got {gamma}")
    if gamma > kappa * (1 + 1e-12):
        raise DomainError(
            f"Photon bandwidth {gamma:.6g} rad/s exceeds resonator bandwidth {kappa:.6g} rad/s")


def emission_drive(gamma: float, kappa: float, t, form: str = CLOSED_FORM):
    """
    Drive rate for a resonator of bandwidth kappa emitting a photon of
    bandwidth gamma around t = 0, with r = kappa/Gamma - 1:

        closed_form: (Gamma/2) sech(Gamma t/2) (1 + r e^{Gamma t}/2) / sqrt(1 + r (e^{Gamma t} + 1))
        exact:       (Gamma/2) sech(Gamma t/2) (1 + r (1 + e^{Gamma t})/2) / sqrt(1 + r (1 + e^{Gamma t}))

    Both reduce to (Gamma/2) sech(Gamma t/2) for kappa = Gamma. Only the
    exact form inverts the emitter's equations of motion; for kappa > Gamma
    the closed form emits a photon that arrives late and is slightly
    distorted against the sech target.

    Evaluated in two branches so that exp(Gamma t) never overflows; for
    t -> +inf both forms tend to (Gamma/2) sqrt(kappa/Gamma - 1).
    """
    _check_rates(gamma, kappa)
    if form not in DRIVE_FORMS:
        raise ValueError(f"Unknown drive form '{form}'; expected one of {DRIVE_FORMS}")
    r = max(kappa / gamma - 1.0, 0.0)
    x = gamma * np.asarray(t, dtype=float)
    xn = np.minimum(x, 0.0)
    xp = np.maximum(x, 0.0)
    both = form == EXACT

    ex = np.exp(xn)
    early = _sech(xn / 2) * (1 + 0.5 * r * (ex + both)) / np.sqrt(1 + r * (ex + 1))

    em = np.exp(-xp)
    late = 2 * (em + 0.5 * r * (1 + both * em)) / ((1 + em) * np.sqrt((1 + r) * em + r))

    return (gamma / 2) * np.where(x <= 0, early, late)


def absorption_drive(gamma: float, kappa: float, t, form: str = CLOSED_FORM):
    """Time reverse of emission_drive, using the absorber's kappa."""
    return emission_drive(gamma, kappa, -np.asarray(t, dtype=float), form)


@dataclass(frozen=True)
class PulseSchedule:
    """Uniformly sampled drive-rate waveform with a truncation window and ramps."""
    times: np.ndarray
    rates: np.ndarray
    window: Tuple[float, float]
    ramp_duration: float
    role: str
    gamma: float
    kappa: float

    def __post_init__(self):
        times = np.array(self.times, dtype=float)
        rates = np.array(self.rates, dtype=float)
        if times.shape != rates.shape or times.ndim != 1 or times.size < 2:
            raise ValueError("Schedule needs matching 1-D time and rate arrays")
        steps = np.diff(times)
        if np.any(steps <= 0):
            raise ValueError("Schedule time grid must be strictly increasing")
        if np.max(np.abs(steps - steps.mean())) > 1e-6 * steps.mean():
            raise ValueError("Schedule time grid must be uniform")
        if self.role not in (EMISSION, ABSORPTION):
            raise ValueError(f"Unknown schedule role '{self.role}'")
        times.setflags(write=False)
        rates.setflags(write=False)
        object.__setattr__(self, 'times', times)
        object.__setattr__(self, 'rates', rates)

    @property
    def samples(self) -> List[Tuple[float, float]]:
        return list(zip(self.times.tolist(), self.rates.tolist()))

    @property
    def sample_dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def start_time(self) -> float:
        return float(self.times[0])

    @property
    def stop_time(self) -> float:
        return float(self.times[-1])

    @property
    def duration(self) -> float:
        return self.stop_time - self.start_time

    @property
    def center_time(self) -> float:
        return 0.5 * (self.window[0] + self.window[1])

    def rate_at(self, t):
        """Linear interpolation on the grid, zero outside it."""
        return np.interp(t, self.times, self.rates, left=0.0, right=0.0)

    def shifted(self, dt: float) -> 'PulseSchedule':
        return PulseSchedule(self.times + dt, self.rates,
                             (self.window[0] + dt, self.window[1] + dt),
                             self.ramp_duration, self.role, self.gamma, self.kappa)

    def truncated(self, tau: Optional[float]) -> 'PulseSchedule':
        """Zero the drive later than tau after the schedule start."""
        if tau is None:
            return self
        if tau < 0 or tau > self.duration + 1e-15:
            raise ValueError(f"Truncation time {tau:.6g} s outside the schedule (0..{self.duration:.6g} s)")
        rates = np.where(self.times > self.start_time + tau, 0.0, self.rates)
        return PulseSchedule(self.times, rates, self.window, self.ramp_duration,
                             self.role, self.gamma, self.kappa)

    def reversed(self) -> 'PulseSchedule':
        """Mirror about the window center; swaps emission and absorption roles."""
        c2 = self.window[0] + self.window[1]
        role = ABSORPTION if self.role == EMISSION else EMISSION
        return PulseSchedule(c2 - self.times[::-1], self.rates[::-1], self.window,
                             self.ramp_duration, role, self.gamma, self.kappa)


def build_schedule(gamma: float, kappa: float, role: str = EMISSION,
                   sample_dt: float = DEFAULT_SAMPLE_DT, ramp: float = DEFAULT_RAMP,
                   halfwidth: float = TRUNCATION_HALFWIDTH, center_time: float = 0.0,
                   form: str = EXACT) -> PulseSchedule:
    """
    Sample the drive truncated at +-halfwidth/gamma around center_time,
    with linear ramps to zero over `ramp` on both sides.

    The grid step is adjusted (by less than one sample over the whole
    pulse) so that both outer endpoints fall exactly on the grid.
    """
    if not sample_dt > 0:
        raise ValueError(f"Sample spacing must be positive, got {sample_dt}")
    if ramp < 0:
        raise ValueError(f"Ramp duration must be non-negative, got {ramp}")
    _check_rates(gamma, kappa)
    half = halfwidth / gamma
    total = 2 * half + 2 * ramp
    n_steps = max(int(round(total / sample_dt)), 2)
    offsets = np.linspace(-total / 2, total / 2, n_steps + 1)
    times = center_time + offsets

    drive = emission_drive if role == EMISSION else absorption_drive
    inside = np.abs(offsets) <= half
    rates = np.zeros_like(times)
    rates[inside] = drive(gamma, kappa, offsets[inside], form)
    if ramp > 0:
        edge_lo = float(drive(gamma, kappa, -half, form))
        edge_hi = float(drive(gamma, kappa, half, form))
        lo = offsets < -half
        hi = offsets > half
        rates[lo] = edge_lo * (offsets[lo] + half + ramp) / ramp
        rates[hi] = edge_hi * (half + ramp - offsets[hi]) / ramp
        rates[0] = rates[-1] = 0.0

    schedule = PulseSchedule(times, np.clip(rates, 0.0, None),
                             (center_time - half, center_time + half), ramp, role, gamma, kappa)
    logger.debug("Built %s schedule (%s drive): %d samples, %.1f ns",
                 role, form, times.size, schedule.duration * 1e9)
    return schedule


def write_schedule_csv(schedule: PulseSchedule, path) -> Path:
    """Two columns: time_ns, drive_rate_MHz (drive rate / 2pi)."""
    path = Path(path)
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['time_ns', 'drive_rate_MHz'])
        for t, g in zip(schedule.times, schedule.rates):
            writer.writerow([f"{t * 1e9:.17g}", f"{g / TWO_PI_MHZ:.17g}"])
    return path


# ---------------------------------------------------------------------------
# Drive calibration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CalibrationModel:
    """Polynomials (ascending powers) for drive rate and Stark shift vs amplitude."""
    drive_rate_poly: Tuple[float, ...]
    stark_shift_poly: Tuple[float, ...]
    drive_residual: float
    stark_residual: float
    amplitude_range: Tuple[float, float]

    @property
    def fit_residual(self) -> float:
        return self.drive_residual

    def drive_rate(self, amplitude):
        return np.polynomial.polynomial.polyval(amplitude, self.drive_rate_poly)

    def stark_shift(self, amplitude):
        return np.polynomial.polynomial.polyval(amplitude, self.stark_shift_poly)

    def to_dict(self) -> dict:
        return {
            'drive_rate_poly': list(self.drive_rate_poly),
            'stark_shift_poly': list(self.stark_shift_poly),
            'drive_residual': self.drive_residual,
            'stark_residual': self.stark_residual,
            'amplitude_range': list(self.amplitude_range),
        }


def _lstsq(design: np.ndarray, values: np.ndarray) -> Tuple[np.ndarray, float]:
    coeffs, _, rank, _ = np.linalg.lstsq(design, values, rcond=None)
    if rank < design.shape[1]:
        raise FitError(f"Rank-deficient calibration design matrix (rank {rank} < {design.shape[1]})")
    residual = values - design @ coeffs
    return coeffs, float(np.sqrt(np.mean(residual ** 2)))


def fit_calibration(points: Sequence[Tuple[float, float, float]], degree: int = 3,
                    stark_degree: int = 2) -> CalibrationModel:
    """
    Least-squares fit of drive rate (no constant term, so zero amplitude
    gives zero drive) and Stark shift against drive amplitude.
    """
    data = np.asarray(points, dtype=float)
    if data.ndim != 2 or data.shape[1] != 3:
        raise ValueError("Calibration points must be (amplitude, drive_rate, stark_shift) triples")
    amps, rates, shifts = data.T
    if len(amps) < max(degree, stark_degree) + 1:
        raise FitError(f"Need at least {max(degree, stark_degree) + 1} points, got {len(amps)}")
    if len(np.unique(amps)) != len(amps):
        raise FitError("Calibration amplitudes must be distinct")

    drive_design = np.vander(amps, degree + 1, increasing=True)[:, 1:]
    drive_coeffs, drive_res = _lstsq(drive_design, rates)
    stark_design = np.vander(amps, stark_degree + 1, increasing=True)
    stark_coeffs, stark_res = _lstsq(stark_design, shifts)

    model = CalibrationModel(
        drive_rate_poly=tuple([0.0] + drive_coeffs.tolist()),
        stark_shift_poly=tuple(stark_coeffs.tolist()),
        drive_residual=drive_res,
        stark_residual=stark_res,
        amplitude_range=(float(amps.min()), float(amps.max())),
    )
    logger.info("Calibration fit: drive rms %.3g rad/s, Stark rms %.3g rad/s", drive_res, stark_res)
    return model


def _monotone_branch_end(model: CalibrationModel) -> float:
    lo, hi = model.amplitude_range
    grid = np.linspace(lo, hi, 2001)
    values = model.drive_rate(grid)
    steps = np.diff(values)
    sign = np.sign(steps[np.nonzero(steps)[0][0]]) if np.any(steps) else 0
    if sign == 0:
        raise ExtrapolationError("Fitted drive rate is flat; cannot invert")
    turning = np.nonzero(np.sign(steps) == -sign)[0]
    return float(grid[turning[0]]) if turning.size else hi


def amplitude_for_drive(model: CalibrationModel, drive_target: float) -> Tuple[float, float]:
    """
    Amplitude reaching `drive_target` on the monotone branch starting at the
    smallest calibrated amplitude, and its Stark shift. Zero drive means the
    drive is off (A = 0); any other target must lie between the fitted rates
    at the ends of that branch.
    """
    if drive_target == 0:
        return 0.0, float(model.stark_shift(0.0))
    start = model.amplitude_range[0]
    end = _monotone_branch_end(model)
    lo_val, hi_val = sorted((float(model.drive_rate(start)), float(model.drive_rate(end))))
    if not lo_val <= drive_target <= hi_val:
        raise ExtrapolationError(
            f"Drive rate {drive_target:.6g} rad/s outside fitted range [{lo_val:.6g}, {hi_val:.6g}]")
    amplitude = brentq(lambda a: model.drive_rate(a) - drive_target, start, end,
                       xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    return float(amplitude), float(model.stark_shift(amplitude))


def load_calibration_points(path) -> List[Tuple[float, float, float]]:
    """Read (A, g_MHz, delta_MHz) rows and convert rates to rad/s."""
    points = []
    with open(path, newline='') as f:
        reader = csv.DictReader(f)
        missing = {'A', 'g_MHz', 'delta_MHz'} - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"Calibration CSV missing columns: {sorted(missing)}")
        for row in reader:
            points.append((float(row['A']),
                           float(row['g_MHz']) * TWO_PI_MHZ,
                           float(row['delta_MHz']) * TWO_PI_MHZ))
    return points
