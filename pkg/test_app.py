"""Tests for the web surface."""

import pytest

from app import app, run_options


@pytest.fixture
def client(tmp_path):
    app.config['TESTING'] = True
    app.config['UPLOAD_FOLDER'] = str(tmp_path / 'uploads')
    app.config['OUTPUT_FOLDER'] = str(tmp_path / 'outputs')
    with app.test_client() as client:
        yield client


def test_version(client):
    response = client.get('/version')
    assert response.status_code == 200
    assert 'waveguide' in response.get_json()['commands']


def test_validate_defaults(client):
    response = client.post('/validate', json={})
    assert response.status_code == 200
    body = response.get_json()
    assert body['valid']
    assert len(body['config_hash']) == 64


def test_validate_reports_bad_fields(client):
    response = client.post('/validate', json={'config': '[node_a]\nbogus = 1\n'})
    assert response.status_code == 400
    body = response.get_json()
    assert not body['valid']
    assert body['fields'] == ['node_a.bogus']


def test_run_rejects_unknown_command(client):
    response = client.post('/run', json={'command': 'teleport'})
    assert response.status_code == 400
    assert 'truncation' in response.get_json()['commands']


def test_run_and_download(client):
    response = client.post('/run', json={'command': 'waveguide', 'seed': '4'})
    assert response.status_code == 200
    body = response.get_json()
    assert body['manifest']['status'] == 'ok'
    assert body['summary']['seed'] == 4
    assert 'waveguide_summary.json' in body['artifacts']

    run_id = body['run_id']
    download = client.get(f'/download/{run_id}/waveguide_summary.json')
    assert download.status_code == 200
    assert download.mimetype == 'application/json'
    assert client.get(f'/download/{run_id}/missing.csv').status_code == 404

    report = client.get(f'/report/{run_id}/waveguide')
    assert report.status_code == 200
    assert b'WITHIN TOLERANCE' in report.data

    assert client.post(f'/cleanup/{run_id}').get_json()['success']
    assert client.get(f'/report/{run_id}/waveguide').status_code == 404


def test_dev_server_debugger_is_opt_in():
    assert run_options({}) == {'debug': False, 'host': '127.0.0.1', 'port': 8080}
    assert run_options({'QLINK_DEBUG': 'true', 'QLINK_PORT': '9000'})['debug']
    assert run_options({'QLINK_DEBUG': 'true', 'QLINK_PORT': '9000'})['port'] == 9000
    assert not run_options({'QLINK_DEBUG': '0'})['debug']
