"""Tests for command pipelines, manifests and reference comparison."""

import json

import numpy as np
import pytest

from errors import ConfigError, LinkSimError
from experiment_config import load_config
from experiment_runner import (COMMANDS, REFERENCE_VALUES, ExperimentRunner, TargetCheck,
                               compare_to_references, worker_pool)
from waveguide_loss import write_spectrum_csv


def _summary(out_dir, command):
    return json.loads((out_dir / f'{command}_summary.json').read_text())


def _manifest(out_dir, command):
    return json.loads((out_dir / f'{command}_manifest.json').read_text())


def test_target_check_kinds():
    assert TargetCheck('x', 0.80, 0.795, 0.02).within
    assert not TargetCheck('x', 0.70, 0.795, 0.02).within
    assert TargetCheck('x', 0.05, 0.12, 0.0, 'upper').within
    assert not TargetCheck('x', 0.13, 0.12, 0.0, 'upper').within
    assert TargetCheck('x', 0.995, 0.99, 0.0, 'lower').within
    assert TargetCheck('x', 0.5, 0.6, 0.2).to_dict()['within'] is True


def test_compare_ignores_metrics_without_reference():
    checks = compare_to_references({'p_ge': 0.66, 'min_eigenvalue': -1e-12})
    assert [c.metric for c in checks] == ['p_ge']
    assert checks[0].within
    assert all(kind in ('window', 'upper', 'lower') for _, _, kind in REFERENCE_VALUES.values())


def test_worker_pool_keeps_task_order():
    with worker_pool(1) as mapper:
        assert list(mapper(abs, [-3, 1, -2])) == [3, 1, 2]
    with worker_pool(2) as mapper:
        assert list(mapper(abs, [-3, 1, -2])) == [3, 1, 2]


def test_unknown_command(device_config, tmp_path):
    with pytest.raises(ConfigError) as info:
        ExperimentRunner(device_config, tmp_path).run('teleport')
    assert info.value.fields == ['command']
    assert 'teleport' not in COMMANDS


def test_waveguide_command(device_config, tmp_path):
    manifest = ExperimentRunner(device_config, tmp_path).run('waveguide')
    assert manifest.status == 'ok'
    assert manifest.seed == device_config.master_seed
    assert manifest.config_hash == device_config.config_hash

    summary = _summary(tmp_path, 'waveguide')
    metrics = summary['metrics']
    assert metrics['reference_attenuation_db_per_km'] == pytest.approx(2.45, abs=0.01)
    assert metrics['fitted_q'] == pytest.approx(1e6, rel=0.02)
    assert metrics['fitted_f0_ghz'] == pytest.approx(8.4056086, abs=1e-5)
    assert metrics['loss_budget_at_0p8_db_per_km'] < 1e-3
    assert all(check['within'] for check in summary['targets'])

    written = _manifest(tmp_path, 'waveguide')
    assert written['status'] == 'ok'
    names = {p.rsplit('/', 1)[-1] for p in written['artifacts']}
    assert {'waveguide_spectrum.csv', 'waveguide_attenuation.csv', 'waveguide_summary.json',
            'waveguide_report.txt'} <= names


def test_same_seed_gives_identical_summaries(device_config, tmp_path):
    ExperimentRunner(device_config, tmp_path / 'a', seed=5).run('waveguide')
    ExperimentRunner(device_config, tmp_path / 'b', seed=5).run('waveguide')
    ExperimentRunner(device_config, tmp_path / 'c', seed=6).run('waveguide')
    first = (tmp_path / 'a' / 'waveguide_summary.json').read_bytes()
    assert first == (tmp_path / 'b' / 'waveguide_summary.json').read_bytes()
    assert first != (tmp_path / 'c' / 'waveguide_summary.json').read_bytes()


def test_failed_run_still_writes_manifest(write_profile, tmp_path):
    freqs = np.linspace(8.40e9, 8.41e9, 101)
    flat = write_spectrum_csv(tmp_path / 'flat.csv', freqs, np.ones(freqs.size, dtype=complex))
    config = load_config(write_profile(f'[waveguide]\nspectrum_csv = {flat}\n'))
    with pytest.raises(LinkSimError):
        ExperimentRunner(config, tmp_path / 'out').run('waveguide')
    written = _manifest(tmp_path / 'out', 'waveguide')
    assert written['status'] == 'failed'
    assert written['error'].startswith('LinkSimError')


def test_calibrate_writes_model_and_waveform(device_config, tmp_path):
    amps = np.linspace(0.0, 1.5, 30)
    lines = ['A,g_MHz,delta_MHz'] + [f'{a:.17g},{20 * a - 2 * a ** 3:.17g},{-(0.1 + 2 * a ** 2):.17g}' for a in amps]
    points = tmp_path / 'calibration.csv'
    points.write_text('\n'.join(lines) + '\n')

    result = ExperimentRunner(device_config, tmp_path / 'out').calibrate(points)
    two_pi_mhz = 2 * np.pi * 1e6
    poly = np.array(result['model']['drive_rate_poly']) / two_pi_mhz
    assert poly == pytest.approx([0.0, 20.0, 0.0, -2.0], abs=1e-6)

    waveform = (tmp_path / 'out' / 'calibrate_waveform.csv').read_text().splitlines()
    assert waveform[0] == 'time_ns,drive_rate_MHz,amplitude,stark_shift_MHz'
    for row in waveform[1:]:
        _, rate, amplitude, stark = map(float, row.split(','))
        assert 20 * amplitude - 2 * amplitude ** 3 == pytest.approx(rate, abs=1e-6)
        assert stark == pytest.approx(-(0.1 + 2 * amplitude ** 2), abs=1e-6)
    assert len(result['artifacts']) == 2


@pytest.mark.slow
def test_truncation_coarse_sweep(write_profile, tmp_path):
    config = load_config(write_profile('[simulation]\ntau_step_ns = 60\n'))
    manifest = ExperimentRunner(config, tmp_path).run('truncation')
    assert manifest.status == 'ok'
    metrics = _summary(tmp_path, 'truncation')['metrics']
    assert metrics['min_eigenvalue'] > -1e-8
    assert metrics['max_trace_error'] < 1e-6
    rows = (tmp_path / 'truncation_sweep.csv').read_text().splitlines()
    taus = [float(r.split(',')[0]) for r in rows[1:]]
    assert taus[0] == 0.0
    assert taus[-1] == pytest.approx(2 * 4.6 / (2 * np.pi * 6.25e6) * 1e9 + 12, rel=1e-9)
    # the untruncated pulse pair ends on the same grid as the transfer run
    p_ge = [float(r.split(',')[2]) for r in rows[1:]]
    assert p_ge[-1] == pytest.approx(metrics['p_ge'], abs=1e-6)
    assert metrics['p_ge'] == pytest.approx(0.675, abs=0.03)
    assert metrics['p_gg'] == pytest.approx(0.253, abs=0.03)


@pytest.mark.slow
@pytest.mark.parametrize('command, expected', [
    ('process', {'process_fidelity_mitigated', 'state_fidelity_mitigated', 'process_fidelity_unmitigated',
                 'state_fidelity_unmitigated', 'chi_distance_to_simulation'}),
    ('bell', {'bell_fidelity_mitigated', 'concurrence_mitigated', 'bell_fidelity_unmitigated',
              'concurrence_unmitigated'}),
    ('photons', {'transmission', 'absorption_efficiency', 'emission_overlap'}),
    ('lag_scan', {'best_lag_ns', 'untruncated_best_lag_ns'}),
    ('projected', {'projected_bell_fidelity', 'projected_process_fidelity'}),
])
def test_device_commands_meet_reference_windows(device_config, tmp_path, command, expected):
    ExperimentRunner(device_config, tmp_path, jobs=2).run(command)
    targets = {t['metric']: t for t in _summary(tmp_path, command)['targets']}
    assert expected <= set(targets)
    missed = {name: round(t['value'], 4) for name, t in targets.items() if not t['within']}
    assert not missed
    for name, value in _summary(tmp_path, command)['metrics'].items():
        assert np.isfinite(value), name
        if 'fidelity' in name or 'concurrence' in name or 'efficiency' in name:
            assert -1e-6 <= value <= 1 + 1e-6, name
