"""Tests for resonance fitting and waveguide attenuation bounds."""

import numpy as np
import pytest

from errors import DomainError, FitError
from waveguide_loss import (WR90, ResonanceFit, WaveguideGeometry, attenuation, cutoff_frequency,
                            find_resonances, fit_lorentzian, fit_resonances, loss_budget,
                            q_for_attenuation, read_spectrum_csv, synthesize_spectrum,
                            write_attenuation_table, write_spectrum_csv)

F0 = 8.4056086e9


@pytest.fixture
def resonance():
    return ResonanceFit(f0=F0, q_loaded=1e6, amplitude=0.8 - 0.3j, baseline=0.02 + 0.01j)


def _grid(fit, span=10, points=2001):
    return np.linspace(fit.f0 - span * fit.linewidth, fit.f0 + span * fit.linewidth, points)


def test_wr90_cutoff():
    assert cutoff_frequency() == pytest.approx(6.557e9, rel=1e-4)
    assert WR90.cutoff_frequency == cutoff_frequency(WR90)
    with pytest.raises(DomainError):
        WaveguideGeometry(width_a=0.0)


def test_attenuation_bound_for_measured_mode():
    alpha_np, alpha_db = attenuation(F0, 1e6)
    assert alpha_db == pytest.approx(2.45, abs=0.01)
    assert alpha_np * 8.685889638 * 1000 == pytest.approx(alpha_db)
    assert q_for_attenuation(F0, 1.0) == pytest.approx(2.44e6, rel=0.01)


def test_attenuation_domain():
    with pytest.raises(DomainError):
        attenuation(6.0e9, 1e6)
    with pytest.raises(DomainError):
        attenuation(F0, 0.0)
    with pytest.raises(DomainError):
        q_for_attenuation(F0, -1.0)


def test_loss_budget():
    assert loss_budget(0.8, 4.9) < 1e-3
    assert loss_budget(0.0, 100.0) == 0.0
    assert loss_budget(3.0103, 1000.0) == pytest.approx(0.5, abs=1e-5)
    with pytest.raises(ValueError):
        loss_budget(1.0, -1.0)


def test_fit_recovers_noise_free_resonance(resonance):
    freqs = _grid(resonance)
    fit = fit_lorentzian(freqs, synthesize_spectrum(resonance, freqs))
    assert fit.f0 == pytest.approx(F0, abs=1e-4 * resonance.linewidth)
    assert fit.q_loaded == pytest.approx(1e6, rel=1e-6)
    assert fit.amplitude == pytest.approx(resonance.amplitude, abs=1e-8)
    assert fit.baseline == pytest.approx(resonance.baseline, abs=1e-8)
    assert fit.residual < 1e-8


def test_fit_with_sloped_background(resonance):
    sloped = ResonanceFit(F0, 1e6, resonance.amplitude, resonance.baseline, slope=200 + 100j)
    freqs = _grid(sloped)
    fit = fit_lorentzian(freqs, synthesize_spectrum(sloped, freqs), fit_slope=True)
    assert fit.q_loaded == pytest.approx(1e6, rel=1e-6)
    assert fit.slope == pytest.approx(sloped.slope, rel=1e-4)


def test_fit_tolerates_noise(resonance):
    freqs = _grid(resonance)
    rng = np.random.default_rng(4)
    noisy = synthesize_spectrum(resonance, freqs) + 0.01 * (rng.normal(size=freqs.size)
                                                           + 1j * rng.normal(size=freqs.size))
    fit = fit_lorentzian(freqs, noisy)
    assert fit.q_loaded == pytest.approx(1e6, rel=0.02)
    assert fit.f0 == pytest.approx(F0, abs=0.05 * resonance.linewidth)


def test_fit_rejects_flat_or_short_spectra(resonance):
    freqs = _grid(resonance)
    with pytest.raises(FitError):
        fit_lorentzian(freqs, np.ones(freqs.size, dtype=complex))
    with pytest.raises(ValueError):
        fit_lorentzian(freqs[:5], np.ones(5))
    with pytest.raises(ValueError):
        fit_lorentzian(freqs[::-1], synthesize_spectrum(resonance, freqs))


def test_wide_scan_finds_every_mode():
    first = ResonanceFit(F0, 1e6, 1.0, 0j)
    second = ResonanceFit(F0 + 200 * first.linewidth, 2e6, 0.7j, 0j)
    freqs = np.linspace(F0 - 50 * first.linewidth, F0 + 250 * first.linewidth, 6001)
    s21 = synthesize_spectrum(first, freqs) + synthesize_spectrum(second, freqs)
    assert len(find_resonances(freqs, s21, threshold=0.3, window=300)) == 2
    fits = fit_resonances(freqs, s21, threshold=0.3, window=300)
    assert [f.q_loaded for f in fits] == [pytest.approx(1e6, rel=0.01), pytest.approx(2e6, rel=0.01)]
    assert find_resonances(freqs, np.ones(freqs.size)) == []


def test_spectrum_and_table_csv(tmp_path, resonance):
    freqs = _grid(resonance, points=101)
    s21 = synthesize_spectrum(resonance, freqs)
    path = write_spectrum_csv(tmp_path / 'spectrum.csv', freqs, s21)
    read_freqs, read_s21 = read_spectrum_csv(path)
    assert np.array_equal(read_freqs, freqs)
    assert np.array_equal(read_s21, s21)

    table = write_attenuation_table(tmp_path / 'alpha.csv', [resonance])
    header, row = table.read_text().splitlines()
    assert header == 'f0_GHz,Q,alpha_dB_per_km'
    assert float(row.split(',')[2]) == pytest.approx(2.45, abs=0.01)

    bad = tmp_path / 'bad.csv'
    bad.write_text('f,re\n1,2\n')
    with pytest.raises(ValueError):
        read_spectrum_csv(bad)
