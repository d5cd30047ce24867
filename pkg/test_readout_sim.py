"""Tests for the tri-modal readout model, classification and mitigation."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from errors import DimensionError, DomainError, FitError, MitigationError
from readout_sim import (AssignmentMatrix, TriModalModel, apply_assignment, assignment_matrix, classify,
                         classify_many, drifted, equilateral_error, expected_assignment_matrix,
                         fit_trimodal, joint_matrix, mitigate, equilateral_model, pairwise_distance,
                         sample_shots, write_shots_csv)


@pytest.fixture(scope='module')
def model_a():
    return equilateral_model(0.034)


def _labeled_shots(model, n, seed):
    points = np.vstack([sample_shots(model, level, n, seed + level) for level in range(3)])
    labels = np.repeat(np.arange(3), n)
    return points, labels


def test_equilateral_model_hits_target_error(model_a):
    r = expected_assignment_matrix(model_a)
    assert r.average_error == pytest.approx(0.034, abs=1e-9)
    assert np.allclose(np.diag(r.entries), 0.966, atol=1e-9)
    assert equilateral_error(0.0) == pytest.approx(2 / 3)


def test_sampled_assignment_matches_expected(model_a):
    sampled = assignment_matrix(model_a, 20000, seed=3)
    exact = expected_assignment_matrix(model_a)
    assert np.allclose(sampled.entries, exact.entries, atol=0.01)
    assert sampled.shot_counts == (20000, 20000, 20000)
    assert sampled.labels == ['g', 'e', 'f']


def test_two_mode_error_formula():
    d = pairwise_distance(0.05, sigma=2.0)
    model = TriModalModel.isotropic([[0, 0], [d, 0], [1e6, 1e6]], 2.0)
    r = expected_assignment_matrix(model)
    assert r.entries[0, 1] == pytest.approx(0.05, abs=1e-9)
    with pytest.raises(DomainError):
        pairwise_distance(0.6, 1.0)


def test_sampling_is_deterministic(model_a):
    a = sample_shots(model_a, 'e', 100, seed=11)
    b = sample_shots(model_a, 1, 100, seed=11)
    assert np.array_equal(a, b)
    mixed = sample_shots(model_a, [0.2, 0.3, 0.5], 500, seed=5)
    assert mixed.shape == (500, 2)
    with pytest.raises(ValueError):
        sample_shots(model_a, 'h', 10, seed=0)
    with pytest.raises(ValueError):
        sample_shots(model_a, 'g', 0, seed=0)


def test_classification_ties_go_to_lowest_index():
    model = TriModalModel.isotropic([[-1, 0], [1, 0], [0, 5]], 0.5)
    assert classify(model, [0, 0]) == 0
    assert classify(model, [0.9, 0.1]) == 1
    assert list(classify_many(model, [[0, 6], [-3, 0]])) == [2, 0]


def test_model_validation():
    with pytest.raises(DimensionError):
        TriModalModel.isotropic([[0, 0], [1, 1]], 1.0)
    with pytest.raises(DomainError):
        TriModalModel.isotropic([[0, 0], [0, 0], [1, 1]], 1.0)
    with pytest.raises(DomainError):
        TriModalModel([[0, 0], [1, 0], [0, 1]], np.eye(2), weights=[0.5, 0.5, 0.5])


def test_labeled_fit_recovers_model(model_a):
    points, labels = _labeled_shots(model_a, 5000, seed=1)
    fitted = fit_trimodal(points, labels)
    assert np.allclose(fitted.centers, model_a.centers, atol=0.05)
    assert np.allclose(fitted.covariance, np.eye(2), atol=0.05)
    with pytest.raises(FitError):
        fit_trimodal(points[:5005], labels[:5005])


def test_unlabeled_fit_follows_initial_centers(model_a):
    points, _ = _labeled_shots(model_a, 3000, seed=2)
    fitted = fit_trimodal(points, initial_centers=model_a.centers)
    assert np.allclose(fitted.centers, model_a.centers, atol=0.1)
    history = np.array(fitted.fit_history)
    assert len(history) >= 2
    assert np.all(np.diff(history) >= -1e-6 * np.abs(history[:-1]))


def test_unlabeled_fit_guards():
    line = np.column_stack([np.linspace(0, 1, 200), 2 * np.linspace(0, 1, 200)])
    with pytest.raises(FitError):
        fit_trimodal(line)
    with pytest.raises(FitError):
        fit_trimodal(np.random.default_rng(0).normal(size=(50, 2)))
    with pytest.raises(DimensionError):
        fit_trimodal(np.zeros((200, 3)))


def test_drift_moves_shots_but_not_classifier():
    model_b = equilateral_model(0.029)
    moved = drifted(model_b, 0.10)
    assert np.array_equal(moved.decision_centers, model_b.centers)
    assert not np.allclose(moved.centers, model_b.centers)
    assert expected_assignment_matrix(moved).average_error == pytest.approx(0.10, abs=1e-8)
    with pytest.raises(DomainError):
        drifted(model_b, 0.01)


@given(st.lists(st.floats(min_value=0.0, max_value=1.0), min_size=3, max_size=3).filter(lambda p: sum(p) > 0.1))
@settings(max_examples=50, deadline=None)
def test_mitigation_inverts_assignment(raw):
    p = np.array(raw) / sum(raw)
    r = expected_assignment_matrix(equilateral_model(0.05))
    recovered = mitigate(apply_assignment(p, r), r)
    assert np.allclose(recovered.values, p, atol=1e-10)
    assert not recovered.has_negative or p.min() < 1e-10


def test_mitigation_refuses_singular_matrix():
    singular = AssignmentMatrix(np.array([[0.5, 0.5, 0], [0.5, 0.5, 0], [0, 0, 1]]))
    with pytest.raises(MitigationError) as info:
        mitigate([0.3, 0.3, 0.4], singular)
    assert info.value.condition_number > 1e6
    with pytest.raises(ValueError):
        mitigate([0.3, 0.3, 0.3], AssignmentMatrix(np.eye(3)))
    with pytest.raises(DimensionError):
        mitigate([0.5, 0.5], AssignmentMatrix(np.eye(3)))


def test_mitigation_keeps_negative_entries():
    r = AssignmentMatrix(np.array([[0.9, 0.1, 0.0], [0.1, 0.9, 0.0], [0.0, 0.0, 1.0]]))
    result = mitigate([0.05, 0.55, 0.4], r)
    assert result.has_negative
    assert result.values.sum() == pytest.approx(1.0)


def test_joint_matrix_is_kronecker(model_a):
    r_a = expected_assignment_matrix(model_a)
    r_b = expected_assignment_matrix(equilateral_model(0.029))
    joint = joint_matrix(r_a, r_b)
    assert joint.dim == 9
    assert np.allclose(joint.entries, np.kron(r_a.entries, r_b.entries))
    assert joint.labels[:3] == ['gg', 'ge', 'gf']
    with pytest.raises(DimensionError):
        joint_matrix(joint, r_a)


def test_assignment_matrix_validation():
    with pytest.raises(DomainError):
        AssignmentMatrix(np.array([[0.9, 0.2, 0], [0, 1, 0], [0, 0, 1]]))
    with pytest.raises(DimensionError):
        AssignmentMatrix(np.eye(4))


def test_shots_csv(tmp_path, model_a):
    points = sample_shots(model_a, 'f', 10, seed=0)
    path = write_shots_csv(tmp_path / 'shots.csv', points, [2] * 10, classify_many(model_a, points))
    lines = path.read_text().splitlines()
    assert lines[0] == 'u,v,prepared,assigned'
    assert len(lines) == 11
    assert lines[1].split(',')[2] == 'f'
