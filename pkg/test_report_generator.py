"""Tests for dataset emission and run reports."""

import csv
import json

import numpy as np
import pytest

from link_dynamics import ExperimentTrace, PhotonRecord
from quantum_core import DensityMatrix, HilbertSpace, mutually_unbiased_states
from report_generator import (TRACE_COLUMNS, TRACE_HEADER, ReportGenerator, emit_dataset, load_process_json,
                              matrix_from_json, matrix_to_json)
from tomography import ProcessMatrix, process_tomography


@pytest.fixture
def trace():
    times = np.array([0.0, 1e-9, 2e-9])
    populations = {label: np.full(3, 1 / 9) for label in TRACE_COLUMNS}
    populations['ge'] = np.array([0.0, 0.3, 0.7])
    space = HilbertSpace.single('Q', 3)
    return ExperimentTrace(times, populations, np.array([0.1 + 0.2j, 0.3 - 0.1j, 0j]),
                           DensityMatrix(space, np.eye(3) / 3), np.ones(3), np.zeros(3))


@pytest.fixture
def summary():
    return {
        'command': 'waveguide',
        'config_hash': 'abc123',
        'seed': 7,
        'metrics': {'reference_attenuation_db_per_km': 2.4457, 'cutoff_ghz': 6.557},
        'targets': [
            {'metric': 'reference_attenuation_db_per_km', 'value': 2.4457, 'target': 2.45,
             'tolerance': 0.01, 'kind': 'window', 'within': True},
            {'metric': 'q_threshold', 'value': 3e6, 'target': 2.44e6,
             'tolerance': 2.44e4, 'kind': 'window', 'within': False},
        ],
    }


def test_matrix_json_is_exact():
    m = np.array([[1 / 3, 0.1 + np.pi * 1j], [0.1 - np.pi * 1j, 2 / 3]])
    obj = json.loads(json.dumps(matrix_to_json(m)))
    assert obj['shape'] == [2, 2]
    assert np.array_equal(matrix_from_json(obj), m)


def test_trace_csv_layout(tmp_path, trace):
    path = emit_dataset(trace, 'csv', tmp_path / 'trace.csv')
    with open(path, newline='') as f:
        rows = list(csv.reader(f))
    assert rows[0] == TRACE_HEADER
    assert rows[0][1:10] == ['P_gg', 'P_ge', 'P_eg', 'P_ee', 'P_gf', 'P_fg', 'P_ef', 'P_fe', 'P_ff']
    assert len(rows) == 4
    assert float(rows[2][0]) == pytest.approx(1.0)
    assert float(rows[3][2]) == 0.7
    assert float(rows[1][-1]) == 0.2


def test_trace_json(tmp_path, trace):
    obj = json.loads(emit_dataset(trace, 'json', tmp_path / 'trace.json').read_text())
    assert obj['populations']['ge'] == [0.0, 0.3, 0.7]
    assert np.array_equal(matrix_from_json(obj['output_field']), trace.output_field)


def test_process_matrix_round_trip(tmp_path):
    chi = np.diag([0.7, 0.1, 0.1, 0.05]).astype(complex)
    chi[0, 3] = chi[3, 0] = 0.02
    process = ProcessMatrix(chi, trace_preserving=False)
    path = emit_dataset(process, 'json', tmp_path / 'chi.json')
    assert json.loads(path.read_text())['basis'] == ['I', 'X', 'Y', 'Z']
    loaded = load_process_json(path)
    assert np.array_equal(loaded.chi, process.chi)
    assert not loaded.trace_preserving

    rows = emit_dataset(process, 'csv', tmp_path / 'chi.csv').read_text().splitlines()
    assert rows[0] == 'row,I,X,Y,Z'
    assert float(rows[1].split(',')[1]) == 0.7


def _leaky_identity_outputs(leak: float):
    outputs = []
    for label, psi in mutually_unbiased_states():
        ket = np.append(psi, 0.0)
        rho = (1 - leak) * np.outer(ket, ket.conj())
        rho[2, 2] += leak
        outputs.append((label, rho))
    return outputs


@pytest.mark.parametrize('leak, preserving', [(0.0, True), (0.03, False)])
def test_estimated_process_matrix_serializes(tmp_path, leak, preserving):
    process = process_tomography(_leaky_identity_outputs(leak))
    path = emit_dataset(process, 'json', tmp_path / 'chi.json')
    obj = json.loads(path.read_text())
    assert obj['trace_preserving'] is preserving
    assert load_process_json(path).trace_preserving is preserving


def test_report_json_accepts_numpy_scalars(tmp_path):
    report = ReportGenerator(tmp_path, 'run')
    path = report.write_json('flags', {'within': np.bool_(True), 'count': np.int64(3),
                                       'value': np.float64(0.5), 'grid': np.arange(2)})
    assert json.loads(path.read_text()) == {'within': True, 'count': 3, 'value': 0.5, 'grid': [0, 1]}


def test_density_and_photon_datasets(tmp_path):
    space = HilbertSpace.single('Q', 3)
    rho = DensityMatrix(space, np.diag([0.5, 0.3, 0.2]))
    obj = json.loads(emit_dataset(rho, 'json', tmp_path / 'rho.json').read_text())
    assert obj['factors'] == [['Q', 3]]
    assert np.array_equal(matrix_from_json(obj['rho']), rho.entries)
    assert len(emit_dataset(rho, 'csv', tmp_path / 'rho.csv').read_text().splitlines()) == 10

    times = np.array([0.0, 1e-9])
    record = PhotonRecord('emit_B', times, np.array([0.1, 0.2j]), np.array([0.01, 0.04]), 0.5)
    header = emit_dataset(record, 'csv', tmp_path / 'photon.csv').read_text().splitlines()[0]
    assert header == 'time_ns,re_aout,im_aout,power'
    assert json.loads(emit_dataset(record, 'json', tmp_path / 'photon.json').read_text())['integrated_power'] == 0.5


def test_emit_rejects_unknown_inputs(tmp_path, trace):
    with pytest.raises(ValueError):
        emit_dataset(trace, 'xml', tmp_path / 'trace.xml')
    with pytest.raises(TypeError):
        emit_dataset({'not': 'an artifact'}, 'json', tmp_path / 'x.json')


def test_report_generator_tracks_artifacts(tmp_path, trace, summary):
    report = ReportGenerator(tmp_path / 'run', 'truncation')
    report.emit(trace, 'trace')
    report.write_table('sweep', ['tau_ns', 'P_ge'], [(0.0, 0.1), (10.0, 0.5)])
    summary_path = report.write_summary(summary)
    names = [p.rsplit('/', 1)[-1] for p in report.artifacts]
    assert names == ['truncation_trace.csv', 'truncation_trace.json', 'truncation_sweep.csv',
                     'truncation_summary.json', 'truncation_report.txt']
    assert json.loads(summary_path.read_text())['seed'] == 7


def test_text_report(summary, tmp_path):
    report = ReportGenerator(tmp_path, 'waveguide')
    text = report.generate_text_report(summary)
    assert 'Config hash: abc123' in text
    assert '✓ reference_attenuation_db_per_km' in text
    assert '✗ q_threshold' in text
    assert '1 of 2 metrics outside tolerance' in text
    html = report.generate_html_report(summary)
    assert 'OUT OF TOLERANCE' in html
    assert report.get_status_info({'targets': []})['label'] == 'NO TARGETS'
