#!/usr/bin/env python3
"""
Quantum Link Simulator - web surface
Validates profiles, runs experiment commands and serves their datasets
"""

from flask import Flask, request, send_file, jsonify, Response
import os
from werkzeug.utils import secure_filename
import uuid
import shutil
import json

from errors import ConfigError, LinkSimError
from experiment_config import load_config
from experiment_runner import COMMANDS, VERSION, ExperimentRunner
from report_generator import ReportGenerator

app = Flask(__name__)
app.config['UPLOAD_FOLDER'] = 'uploads'
app.config['OUTPUT_FOLDER'] = os.environ.get('QLINK_OUTPUT_DIR', 'outputs')
app.config['MAX_CONTENT_LENGTH'] = 1 * 1024 * 1024  # profiles are small

# Ensure directories exist
os.makedirs(app.config['UPLOAD_FOLDER'], exist_ok=True)
os.makedirs(app.config['OUTPUT_FOLDER'], exist_ok=True)


def _save_profile(run_id):
    """Store an uploaded or posted INI profile; None when the defaults are requested"""
    text = None
    if 'config' in request.files and request.files['config'].filename:
        text = request.files['config'].read().decode('utf-8')
    elif request.is_json:
        text = (request.get_json(silent=True) or {}).get('config')
    elif request.form.get('config'):
        text = request.form['config']
    if not text:
        return None
    session_folder = os.path.join(app.config['UPLOAD_FOLDER'], run_id)
    os.makedirs(session_folder, exist_ok=True)
    path = os.path.join(session_folder, 'profile.ini')
    with open(path, 'w', encoding='utf-8') as f:
        f.write(text)
    return path


def _param(name):
    if request.is_json:
        return (request.get_json(silent=True) or {}).get(name)
    return request.form.get(name)


@app.route('/version')
def version():
    return jsonify({'version': VERSION, 'commands': list(COMMANDS)})


@app.route('/validate', methods=['POST'])
def validate():
    run_id = str(uuid.uuid4())
    try:
        config = load_config(_save_profile(run_id))
        return jsonify({'valid': True, 'config_hash': config.config_hash, 'parameters': config.summary()})
    except ConfigError as e:
        return jsonify({'valid': False, 'error': str(e), 'fields': e.fields}), 400
    except Exception as e:
        return jsonify({'error': str(e)}), 500
    finally:
        shutil.rmtree(os.path.join(app.config['UPLOAD_FOLDER'], run_id), ignore_errors=True)


@app.route('/run', methods=['POST'])
def run():
    run_id = str(uuid.uuid4())
    try:
        command = _param('command')
        if command not in COMMANDS:
            return jsonify({'error': f"Unknown command '{command}'", 'commands': list(COMMANDS)}), 400
        seed = _param('seed')
        config = load_config(_save_profile(run_id))

        output_folder = os.path.join(app.config['OUTPUT_FOLDER'], run_id)
        runner = ExperimentRunner(config, output_folder, None if seed in (None, '') else int(seed))
        manifest = runner.run(command)

        with open(os.path.join(output_folder, f'{command}_summary.json'), encoding='utf-8') as f:
            summary = json.load(f)
        html_report = ReportGenerator(output_folder, command).generate_html_report(summary)
        with open(os.path.join(output_folder, f'{command}_report.html'), 'w', encoding='utf-8') as f:
            f.write(html_report)

        return jsonify({
            'success': True,
            'run_id': run_id,
            'manifest': manifest.to_dict(),
            'summary': summary,
            'artifacts': [os.path.basename(p) for p in manifest.artifacts],
        })

    except ConfigError as e:
        return jsonify({'error': str(e), 'fields': e.fields}), 400
    except ValueError as e:
        return jsonify({'error': str(e)}), 400
    except LinkSimError as e:
        return jsonify({'error': str(e), 'run_id': run_id}), 500
    except Exception as e:
        return jsonify({'error': str(e)}), 500
    finally:
        shutil.rmtree(os.path.join(app.config['UPLOAD_FOLDER'], run_id), ignore_errors=True)


@app.route('/download/<run_id>/<artifact>')
def download_file(run_id, artifact):
    try:
        output_folder = os.path.join(app.config['OUTPUT_FOLDER'], secure_filename(run_id))
        file_path = os.path.join(output_folder, secure_filename(artifact))

        if not os.path.exists(file_path):
            return jsonify({'error': 'File not found'}), 404

        mimetypes = {'.csv': 'text/csv', '.json': 'application/json', '.txt': 'text/plain', '.html': 'text/html'}
        mimetype = mimetypes.get(os.path.splitext(file_path)[1], 'application/octet-stream')
        return send_file(os.path.abspath(file_path), mimetype=mimetype, as_attachment=True,
                         download_name=os.path.basename(file_path))

    except Exception as e:
        return jsonify({'error': str(e)}), 500


@app.route('/report/<run_id>/<command>')
def view_report(run_id, command):
    try:
        output_folder = os.path.join(app.config['OUTPUT_FOLDER'], secure_filename(run_id))
        report_path = os.path.join(output_folder, f'{secure_filename(command)}_report.html')

        if not os.path.exists(report_path):
            return jsonify({'error': 'Report not found'}), 404

        with open(report_path, 'r', encoding='utf-8') as f:
            html_content = f.read()

        return Response(html_content, mimetype='text/html')

    except Exception as e:
        return jsonify({'error': str(e)}), 500


@app.route('/cleanup/<run_id>', methods=['POST'])
def cleanup(run_id):
    try:
        output_folder = os.path.join(app.config['OUTPUT_FOLDER'], secure_filename(run_id))
        if os.path.exists(output_folder):
            shutil.rmtree(output_folder)
        return jsonify({'success': True})
    except Exception as e:
        return jsonify({'error': str(e)}), 500


def run_options(environ=os.environ):
    """Development-server settings; the debugger stays off unless QLINK_DEBUG is set."""
    return {
        'debug': environ.get('QLINK_DEBUG', '').lower() in ('1', 'true', 'yes', 'on'),
        'host': environ.get('QLINK_HOST', '127.0.0.1'),
        'port': int(environ.get('QLINK_PORT', '8080')),
    }


if __name__ == '__main__':
    app.run(**run_options())
