"""Tests for the cascaded two-node master equation and the experiments built on it."""

import logging
from dataclasses import replace

import numpy as np
import pytest
from scipy.integrate import trapezoid

from errors import DomainError
from link_dynamics import (EMIT_A_ABSORB_B, EMIT_FROM_A, EMIT_FROM_B, PREPARE_F, LinkModel, NodeModel,
                           SequenceSettings, bell_state_protocol, build_generator, envelope_overlap,
                           initial_state, lag_sweep, photon_power_ratios, photon_records, protocol_duration,
                           qubit_transfer_outputs, ramsey_decay, run_transfer, transmon_populations,
                           truncation_sweep)
from pulse_synthesis import CLOSED_FORM, EMISSION, TWO_PI_MHZ, PhotonShape, build_schedule
from quantum_core import bell_psi_plus, state_fidelity
from tomography import bell_protocol_analysis, process_tomography, reduce_to_qubits, transfer_metrics

US = 1e-6
NS = 1e-9


def test_node_validation():
    with pytest.raises(DomainError):
        NodeModel('A', t1_ge=10 * US, t1_ef=5 * US, t2e_ge=25 * US, t2e_ef=5 * US, kappa=1e7)
    with pytest.raises(DomainError):
        NodeModel('A', t1_ge=-1.0, t1_ef=5 * US, t2e_ge=5 * US, t2e_ef=5 * US, kappa=1e7)
    with pytest.raises(DomainError):
        NodeModel('A', 10 * US, 5 * US, 5 * US, 5 * US, 1e7, thermal_population=1.0)
    for ratio in (0.0, 1.5):
        with pytest.raises(DomainError):
            NodeModel('A', 10 * US, 5 * US, 5 * US, 5 * US, 1e7, ramsey_ratio=ratio)
    with pytest.raises(DomainError):
        SequenceSettings(drive_form='gaussian')
    with pytest.raises(DomainError):
        LinkModel(loss=1.0)
    with pytest.raises(DomainError):
        LinkModel(loss=0.1, propagation_delay=-1 * NS)


def test_schedule_kappa_must_match_node(ideal_nodes, gamma):
    wrong = build_schedule(gamma, 2 * gamma, EMISSION)
    with pytest.raises(DomainError):
        build_generator(*ideal_nodes, LinkModel(0.0), wrong, None)


def test_initial_state_with_reset_residual(gamma):
    node_a = replace(NodeModel.ideal('A', gamma), reset_residual=0.01)
    node_b = replace(NodeModel.ideal('B', gamma), reset_residual=0.02)
    pops = _populations(initial_state((node_a, node_b), 'reset', gate_a=PREPARE_F))
    assert pops['fg'] == pytest.approx(0.99 * 0.98)
    assert pops['fe'] == pytest.approx(0.99 * 0.02)
    assert sum(pops.values()) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        initial_state((node_a, node_b), 'cold')


def _populations(rho):
    return transmon_populations(rho.entries, rho.space)


def test_protocol_duration(gamma):
    total = protocol_duration(gamma, ramp=6 * NS, ef_gate=24 * NS, offset=38 * NS)
    assert total == pytest.approx(308.28 * NS, abs=0.01 * NS)


def test_lossless_ideal_transfer_is_near_perfect(ideal_nodes, lossless_link, gamma, long_pulse_settings):
    trace = run_transfer(ideal_nodes, lossless_link, gamma, settings=long_pulse_settings)
    pops = trace.final_populations()
    assert pops['ge'] > 0.99
    assert pops['fg'] < 1e-3


def test_transfer_efficiency_tracks_channel_loss(ideal_nodes, gamma, long_pulse_settings):
    efficiencies = [run_transfer(ideal_nodes, LinkModel(loss), gamma, settings=long_pulse_settings)
                    .final_populations()['ge'] for loss in (0.0, 0.1, 0.3)]
    assert efficiencies[0] > efficiencies[1] > efficiencies[2]
    assert efficiencies[2] == pytest.approx(0.7, abs=0.01)


def test_device_parameters_keep_states_physical(device_config):
    cfg = device_config
    trace = run_transfer(cfg.nodes, cfg.link, cfg.gamma, cfg.lag, None, 'reset', cfg.settings)
    assert np.max(np.abs(trace.traces - 1)) < 1e-6
    assert trace.min_eigenvalues.min() > -1e-6
    assert 0.4 < trace.final_populations()['ge'] < 0.8
    assert trace.metadata['lab_frame_offset'] == pytest.approx(28 * NS)


def test_truncation_sweep_starts_untransferred(ideal_nodes, lossless_link, gamma):
    sweep = truncation_sweep(ideal_nodes, lossless_link, gamma, [0.0, 100 * NS])
    assert list(sweep) == [0.0, 100 * NS]
    assert sweep[0.0]['ge'] < 1e-3
    assert sweep[0.0]['fg'] == pytest.approx(1.0, abs=1e-3)


def test_lag_sweep_peaks_at_zero_for_matched_nodes(ideal_nodes, lossless_link, gamma):
    sweep = lag_sweep(ideal_nodes, lossless_link, gamma, [-10 * NS, 0.0, 10 * NS])
    assert sweep.best_offset == 0.0
    assert abs(sweep.refined_offset) < 5 * NS
    assert sweep.best_efficiency == pytest.approx(sweep.curve[0.0])
    with pytest.raises(ValueError):
        lag_sweep(ideal_nodes, lossless_link, gamma, [])


def test_lag_sweep_warns_when_best_offset_is_on_the_edge(ideal_nodes, lossless_link, gamma, caplog):
    with caplog.at_level(logging.WARNING, logger='link_dynamics'):
        sweep = lag_sweep(ideal_nodes, lossless_link, gamma, [0.0, 10 * NS, 20 * NS])
    assert sweep.best_offset == 0.0
    assert 'grid edge' in caplog.text


@pytest.fixture
def wide_emitter_nodes(gamma):
    return NodeModel.ideal('A', 8.6 * TWO_PI_MHZ), NodeModel.ideal('B', gamma)


def _centroid(record):
    return trapezoid(record.times * record.power, record.times) / trapezoid(record.power, record.times)


def test_wide_emitter_releases_centered_sech_photon(wide_emitter_nodes, lossless_link, gamma, long_pulse_settings):
    exact = photon_records(EMIT_FROM_A, wide_emitter_nodes, lossless_link, gamma, long_pulse_settings)
    assert envelope_overlap(exact.times, exact.field, PhotonShape(gamma)) > 0.99
    assert abs(_centroid(exact)) < 2 * NS

    closed = replace(long_pulse_settings, drive_form=CLOSED_FORM)
    late = photon_records(EMIT_FROM_A, wide_emitter_nodes, lossless_link, gamma, closed)
    assert _centroid(late) - _centroid(exact) > 8 * NS


def test_wide_emitter_needs_no_extra_lag(wide_emitter_nodes, lossless_link, gamma, long_pulse_settings):
    sweep = lag_sweep(wide_emitter_nodes, lossless_link, gamma, [-4 * NS, 0.0, 4 * NS],
                      settings=long_pulse_settings)
    assert sweep.best_offset == 0.0
    assert sweep.best_efficiency > 0.99

    closed = replace(long_pulse_settings, drive_form=CLOSED_FORM)
    late = lag_sweep(wide_emitter_nodes, lossless_link, gamma, [0.0, 16 * NS], settings=closed)
    assert late.curve[16 * NS] > late.curve[0.0]


@pytest.mark.parametrize('transition', ['ge', 'ef'])
def test_ramsey_decay_follows_scaled_echo_time(device_config, transition):
    node_b = device_config.node_b
    times = np.linspace(0, 15 * US, 16)
    t2 = node_b.ramsey_ratio * (node_b.t2e_ge if transition == 'ge' else node_b.t2e_ef)
    assert np.allclose(ramsey_decay(node_b, transition, times), np.exp(-times / t2), rtol=1e-5)


def test_decay_limited_ef_coherence_warns(caplog):
    node = NodeModel('X', t1_ge=12.2 * US, t1_ef=4.9 * US, t2e_ge=7.6 * US, t2e_ef=7.1 * US, kappa=1e7)
    times = np.linspace(0, 10 * US, 11)
    with caplog.at_level(logging.WARNING, logger='link_dynamics'):
        decay = ramsey_decay(node, 'ef', times)
    assert 'decay-limited' in caplog.text
    achieved = 0.5 * (1 / node.t1_ge + 1 / node.t1_ef)
    assert np.allclose(decay, np.exp(-times * achieved), rtol=1e-5)
    with pytest.raises(ValueError):
        ramsey_decay(node, 'gf', times)


def test_emission_from_b_is_the_power_reference(device_config):
    cfg = device_config
    record = photon_records(EMIT_FROM_B, cfg.nodes, cfg.link, cfg.gamma, cfg.settings)
    assert record.integrated_power == pytest.approx(1.0, abs=1e-4)
    assert envelope_overlap(record.times, record.field, PhotonShape(cfg.gamma)) > 0.95


def test_power_ratios_recover_channel_loss(ideal_nodes, gamma, long_pulse_settings):
    ratios = photon_power_ratios(ideal_nodes, LinkModel(0.2), gamma, long_pulse_settings)
    assert ratios['transmission'] == pytest.approx(0.8, abs=2e-3)
    assert ratios['loss_estimate'] == pytest.approx(0.2, abs=2e-3)
    assert ratios['absorption_efficiency'] > 0.99
    assert ratios['field_transmission'] == pytest.approx(0.8, abs=2e-3)


def test_photon_number_counts_reference_emission_as_one(ideal_nodes, lossless_link, gamma, long_pulse_settings):
    record = photon_records(EMIT_FROM_B, ideal_nodes, lossless_link, gamma, long_pulse_settings)
    assert record.photon_number == pytest.approx(1.0, abs=1e-6)


def test_lagged_absorber_reflects_more(ideal_nodes, lossless_link, gamma, long_pulse_settings):
    on_time = photon_records(EMIT_A_ABSORB_B, ideal_nodes, lossless_link, gamma, long_pulse_settings)
    lagged = photon_records(EMIT_A_ABSORB_B, ideal_nodes, lossless_link, gamma, long_pulse_settings,
                            delay_offset=40 * NS)
    assert on_time.photon_number < 0.01
    assert lagged.photon_number > on_time.photon_number + 0.05


def test_envelope_overlap(gamma):
    shape = PhotonShape(gamma)
    times = np.linspace(-400 * NS, 400 * NS, 1601)
    assert envelope_overlap(times, 3j * shape.envelope(times), shape) == pytest.approx(1.0, abs=1e-9)
    assert envelope_overlap(times, np.zeros_like(times), shape) == 0.0
    late = PhotonShape(gamma, center_time=100 * NS)
    assert envelope_overlap(times, late.envelope(times), shape) < 0.9


def test_ideal_link_transfers_qubit_states(ideal_nodes, lossless_link, gamma, long_pulse_settings):
    outputs = qubit_transfer_outputs(ideal_nodes, lossless_link, gamma, settings=long_pulse_settings)
    assert [label for label, _ in outputs] == ['g', 'e', '+x', '+y', '-x', '-y']
    plus_x = outputs[2][1].entries
    assert abs(plus_x[1, 0].imag) < 1e-9
    chi = process_tomography(outputs)
    f_p, f_s = transfer_metrics(chi, outputs)
    assert f_p > 0.98
    assert f_s > 0.98


def test_ideal_link_distributes_bell_state(ideal_nodes, lossless_link, gamma, long_pulse_settings):
    rho = bell_state_protocol(ideal_nodes, lossless_link, gamma, settings=long_pulse_settings)
    analysis = bell_protocol_analysis(rho)
    assert analysis.fidelity > 0.98
    assert analysis.concurrence > 0.97
    assert state_fidelity(reduce_to_qubits(rho), bell_psi_plus()) == pytest.approx(analysis.fidelity)


@pytest.mark.slow
def test_device_lag_sweep_optimum(device_config):
    cfg = device_config
    offsets = np.arange(-10, 31, 2) * NS
    sweep = lag_sweep(cfg.nodes, cfg.link, cfg.gamma, offsets, 'reset', cfg.settings)
    assert offsets[0] < sweep.best_offset < offsets[-1]
    assert sweep.refined_offset == pytest.approx(10 * NS, abs=4 * NS)
    assert 0.5 < sweep.best_efficiency < 0.8

    wide = np.arange(-10, 11, 2) * NS
    untruncated = lag_sweep(cfg.nodes, cfg.link, cfg.gamma, wide, 'reset', cfg.settings.untruncated())
    assert wide[0] < untruncated.best_offset < wide[-1]
    assert untruncated.refined_offset == pytest.approx(0.0, abs=2 * NS)


@pytest.mark.slow
def test_device_power_ratios(device_config):
    cfg = device_config
    ratios = photon_power_ratios(cfg.nodes, cfg.link, cfg.gamma, cfg.settings, cfg.lag)
    assert ratios['transmission'] == pytest.approx(0.777, abs=0.01)
    assert ratios['absorption_efficiency'] == pytest.approx(0.958, abs=0.015)
    assert ratios['field_transmission'] < ratios['transmission']
    record = photon_records(EMIT_FROM_A, cfg.nodes, cfg.link, cfg.gamma, cfg.settings)
    assert envelope_overlap(record.times, record.field, PhotonShape(cfg.gamma)) > 0.99
