"""
Dataset and Report Generator
Writes plot-ready CSV/JSON datasets and human-readable run reports
"""

import csv
import json
import logging
from pathlib import Path

import numpy as np

from link_dynamics import ExperimentTrace, PhotonRecord
from quantum_core import PAULI_LABELS, DensityMatrix
from tomography import ProcessMatrix

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ('gg', 'ge', 'eg', 'ee', 'gf', 'fg', 'ef', 'fe', 'ff')
TRACE_HEADER = ['time_ns'] + [f'P_{label}' for label in TRACE_COLUMNS] + ['re_aout', 'im_aout']


def fmt(x) -> str:
    return f"{float(x):.17g}"


def matrix_to_json(matrix) -> dict:
    """Row-major complex matrix with real and imaginary parts interleaved."""
    m = np.asarray(matrix, dtype=complex)
    data = np.empty(2 * m.size)
    data[0::2] = m.real.reshape(-1)
    data[1::2] = m.imag.reshape(-1)
    return {'shape': list(m.shape), 'data': data.tolist()}


def matrix_from_json(obj: dict) -> np.ndarray:
    data = np.asarray(obj['data'], dtype=float)
    return (data[0::2] + 1j * data[1::2]).reshape(obj['shape'])


def trace_rows(trace: ExperimentTrace):
    for i, t in enumerate(trace.times):
        field = trace.output_field[i]
        yield ([fmt(t * 1e9)] + [fmt(trace.populations[label][i]) for label in TRACE_COLUMNS]
               + [fmt(field.real), fmt(field.imag)])


def _json_default(value):
    """numpy scalars and arrays as their Python equivalents."""
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def _write_json(obj, path: Path) -> Path:
    with open(path, 'w') as f:
        json.dump(obj, f, indent=2, sort_keys=True, default=_json_default)
        f.write('\n')
    return path


def emit_dataset(artifact, fmt_name: str, path) -> Path:
    """
    Serialize a trace, process matrix, density matrix or photon record.
    Floats are written with 17 significant digits (CSV) or repr (JSON), so
    loading the file back reproduces the numbers exactly.
    """
    path = Path(path)
    if fmt_name not in ('csv', 'json'):
        raise ValueError(f"Unknown dataset format '{fmt_name}'")

    if isinstance(artifact, ExperimentTrace):
        if fmt_name == 'csv':
            with open(path, 'w', newline='') as f:
                writer = csv.writer(f)
                writer.writerow(TRACE_HEADER)
                writer.writerows(trace_rows(artifact))
            return path
        return _write_json({
            'time_ns': (artifact.times * 1e9).tolist(),
            'populations': {label: artifact.populations[label].tolist() for label in TRACE_COLUMNS},
            'output_field': matrix_to_json(artifact.output_field),
        }, path)

    if isinstance(artifact, ProcessMatrix):
        if fmt_name == 'csv':
            # |chi| for bar plots
            with open(path, 'w', newline='') as f:
                writer = csv.writer(f)
                writer.writerow(['row'] + list(PAULI_LABELS))
                for label, row in zip(PAULI_LABELS, np.abs(artifact.chi)):
                    writer.writerow([label] + [fmt(v) for v in row])
            return path
        return _write_json({
            'basis': list(PAULI_LABELS),
            'trace_preserving': bool(artifact.trace_preserving),
            'trace': float(artifact.trace),
            'chi': matrix_to_json(artifact.chi),
        }, path)

    if isinstance(artifact, DensityMatrix):
        if fmt_name == 'csv':
            with open(path, 'w', newline='') as f:
                writer = csv.writer(f)
                writer.writerow(['row', 'col', 're', 'im', 'abs'])
                for (i, j), v in np.ndenumerate(artifact.entries):
                    writer.writerow([i, j, fmt(v.real), fmt(v.imag), fmt(abs(v))])
            return path
        return _write_json({
            'factors': [[label, dim] for label, dim in artifact.space.factors],
            'subnormalized': artifact.subnormalized,
            'rho': matrix_to_json(artifact.entries),
        }, path)

    if isinstance(artifact, PhotonRecord):
        if fmt_name == 'csv':
            with open(path, 'w', newline='') as f:
                writer = csv.writer(f)
                writer.writerow(['time_ns', 're_aout', 'im_aout', 'power'])
                for t, a, p in zip(artifact.times, artifact.field, artifact.power):
                    writer.writerow([fmt(t * 1e9), fmt(a.real), fmt(a.imag), fmt(p)])
            return path
        return _write_json({
            'scenario': artifact.scenario,
            'time_ns': (artifact.times * 1e9).tolist(),
            'field': matrix_to_json(artifact.field),
            'integrated_power': artifact.integrated_power,
            'photon_number': artifact.photon_number,
        }, path)

    raise TypeError(f"Cannot serialize {type(artifact).__name__}")


def load_process_json(path) -> ProcessMatrix:
    with open(path) as f:
        obj = json.load(f)
    return ProcessMatrix(matrix_from_json(obj['chi']), trace_preserving=obj['trace_preserving'])


class ReportGenerator:
    """Writes one run's datasets, summary and reports into `out_dir`."""

    def __init__(self, out_dir, prefix: str, formats=('csv', 'json')):
        self.out_dir = Path(out_dir)
        self.prefix = prefix
        self.formats = tuple(formats)
        self.artifacts = []
        self.out_dir.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.out_dir / f"{self.prefix}_{name}"

    def add_artifact(self, path: Path) -> Path:
        self.artifacts.append(str(path))
        logger.debug("Wrote %s", path)
        return path

    def emit(self, artifact, name: str, formats=None):
        """Write `artifact` once per requested format."""
        for fmt_name in formats or self.formats:
            self.add_artifact(emit_dataset(artifact, fmt_name, self.path(f"{name}.{fmt_name}")))

    def write_table(self, name: str, header, rows):
        path = self.path(f"{name}.csv")
        with open(path, 'w', newline='') as f:
            writer = csv.writer(f)
            writer.writerow(header)
            for row in rows:
                writer.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
        return self.add_artifact(path)

    def write_json(self, name: str, obj) -> Path:
        return self.add_artifact(_write_json(obj, self.path(f"{name}.json")))

    def write_summary(self, summary: dict) -> Path:
        self.write_json('summary', summary)
        text = self.path('report.txt')
        text.write_text(self.generate_text_report(summary))
        self.add_artifact(text)
        return self.path('summary.json')

    def get_status_info(self, summary):
        """Overall status from the target checks"""
        checks = summary.get('targets', [])
        missed = [c for c in checks if not c['within']]
        if not checks:
            return {'color': '#6c757d', 'label': 'NO TARGETS', 'message': 'No reference values for this command'}
        if not missed:
            return {'color': '#28a745', 'label': 'WITHIN TOLERANCE',
                    'message': f"All {len(checks)} metrics within tolerance of their reference values"}
        return {'color': '#dc3545', 'label': 'OUT OF TOLERANCE',
                'message': f"{len(missed)} of {len(checks)} metrics outside tolerance"}

    def generate_text_report(self, summary):
        """Generate plain text report for download"""
        status = self.get_status_info(summary)
        text = f'''QUANTUM LINK SIMULATION REPORT
=====================================

Command: {summary['command']}
Config hash: {summary['config_hash']}
Seed: {summary['seed']}
Status: {status['message']}

METRICS
-------
'''
        for name, value in sorted(summary['metrics'].items()):
            text += f"{name}: {value:.6g}\n" if isinstance(value, (int, float)) else f"{name}: {value}\n"

        if summary.get('targets'):
            text += f'''
REFERENCE COMPARISON ({len(summary['targets'])})
====================

'''
            for check in summary['targets']:
                mark = '✓' if check['within'] else '✗'
                text += (f"{mark} {check['metric']}: {check['value']:.4f} "
                         f"(target {check['target']:.4f} ± {check['tolerance']:.4f})\n")

        text += '''
---
Report generated by qlink-sim
'''
        return text

    def generate_html_report(self, summary):
        """Compact HTML summary served by the web surface"""
        status = self.get_status_info(summary)
        rows = ''.join(
            f"<tr><td>{name}</td><td>{value:.6g}</td></tr>" if isinstance(value, (int, float))
            else f"<tr><td>{name}</td><td>{value}</td></tr>"
            for name, value in sorted(summary['metrics'].items()))
        checks = ''.join(
            f"<tr class=\"{'pass' if c['within'] else 'fail'}\"><td>{c['metric']}</td>"
            f"<td>{c['value']:.4f}</td><td>{c['target']:.4f} ± {c['tolerance']:.4f}</td></tr>"
            for c in summary.get('targets', []))
        return f'''<!DOCTYPE html>
<html lang="en">
<head>
    <meta charset="UTF-8">
    <title>Quantum link run: {summary['command']}</title>
    <style>
        body {{ font-family: -apple-system, 'Segoe UI', Roboto, sans-serif; color: #333; padding: 20px; }}
        .header {{ background: {status['color']}; color: white; padding: 20px; border-radius: 8px; }}
        table {{ border-collapse: collapse; margin-top: 20px; }}
        td, th {{ border: 1px solid #ddd; padding: 6px 12px; }}
        tr.pass td {{ background: #e8f5e9; }}
        tr.fail td {{ background: #fdecea; }}
    </style>
</head>
<body>
    <div class="header">
        <h1>{summary['command']}</h1>
        <p>{status['label']}: {status['message']}</p>
    </div>
    <table><tr><th>Metric</th><th>Value</th></tr>{rows}</table>
    <table><tr><th>Metric</th><th>Value</th><th>Reference</th></tr>{checks}</table>
</body>
</html>
'''
