"""Accuracy metrics, PCA projection, and prototype-motion correlation."""

import numpy as np
import pytest

from protoreplay.analysis import (AccuracyMatrix, PrototypeHistoryLog,
                                  motion_similarity, pca_fit, pearson,
                                  prototype_trajectories, summarize)


# ---------------------------------------------------------------------------
# accuracy matrix and summary

def matrix_from(rows):
    m = AccuracyMatrix()
    for row in rows:
        m.add_row(row)
    return m


def test_summarize_two_task_fixture():
    stats = summarize(matrix_from([[1.0], [0.5, 1.0]]))
    assert stats["average_accuracy"] == [1.0, 0.75]
    assert stats["final_average"] == 0.75
    assert stats["forgetting"] == [0.5]


def test_summarize_forgetting_uses_best_ever():
    # task 1 peaks at row 2, not row 1
    stats = summarize(matrix_from([[0.6], [0.9, 0.8], [0.5, 0.7, 0.9]]))
    assert stats["forgetting"] == pytest.approx([0.4, 0.1])


def test_summarize_rejects_empty():
    with pytest.raises(ValueError):
        summarize(AccuracyMatrix())


def test_matrix_rejects_bad_rows():
    m = matrix_from([[0.5]])
    with pytest.raises(ValueError):
        m.add_row([0.1])            # wrong length
    with pytest.raises(ValueError):
        m.add_row([0.5, 1.5])       # out of range


def test_matrix_csv_roundtrip_bitwise(tmp_path):
    m = matrix_from([[1 / 3], [2 / 7, 0.25], [0.1, 0.2, 0.3]])
    path = tmp_path / "acc.csv"
    m.to_csv(path)
    loaded = AccuracyMatrix.from_csv(path)
    assert loaded.rows == m.rows


# ---------------------------------------------------------------------------
# PCA

def test_pca_line_geometry():
    t = np.linspace(-2, 2, 9)
    direction = np.array([3.0, 4.0, 0.0, 0.0]) / 5.0
    X = np.outer(t, direction) + np.array([1.0, 1.0, 1.0, 1.0])
    components, mean = pca_fit(X, k=1)
    assert np.allclose(mean, [1.0, 1.0, 1.0, 1.0])
    assert np.allclose(np.abs(components[0] @ direction), 1.0, atol=1e-10)


def test_pca_matches_eigendecomposition_oracle():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((40, 6)) @ np.diag([5, 3, 2, 1, 0.5, 0.1])
    components, mean = pca_fit(X, k=3)
    C = np.cov((X - mean).T, bias=True)
    vals, vecs = np.linalg.eigh(C)
    top = vecs[:, np.argsort(vals)[::-1][:3]].T
    for comp, ref in zip(components, top):
        if np.dot(comp, ref) < 0:
            ref = -ref
        assert np.max(np.abs(comp - ref)) < 1e-8


def test_pca_components_orthonormal():
    rng = np.random.default_rng(1)
    components, _ = pca_fit(rng.standard_normal((20, 5)), k=3)
    assert np.max(np.abs(components @ components.T - np.eye(3))) < 1e-10


def test_pca_rejects_rank_deficiency():
    X = np.outer(np.arange(5.0), np.ones(4))  # rank 1 after centering
    with pytest.raises(ValueError, match="rank"):
        pca_fit(X, k=3)


def test_pca_sign_convention():
    rng = np.random.default_rng(2)
    components, _ = pca_fit(rng.standard_normal((15, 4)), k=2)
    for comp in components:
        assert comp[np.argmax(np.abs(comp))] > 0


# ---------------------------------------------------------------------------
# prototype history log and trajectories

def test_history_log_rejects_duplicates_and_orders_by_task():
    log = PrototypeHistoryLog()
    log.add(2, 0, np.array([1.0, 0.0]))
    log.add(1, 0, np.array([0.0, 0.0]))
    with pytest.raises(ValueError):
        log.add(2, 0, np.array([5.0, 5.0]))
    seq = log.by_class()[0]
    assert [t for t, _ in seq] == [1, 2]


def test_history_log_csv_roundtrip(tmp_path):
    log = PrototypeHistoryLog()
    rng = np.random.default_rng(3)
    for t in (1, 2):
        for c in (0, 1):
            log.add(t, c, rng.uniform(-1, 1, 3))
    path = tmp_path / "hist.csv"
    log.to_csv(path)
    loaded = PrototypeHistoryLog.from_csv(path)
    assert len(loaded.records) == 4
    for (t, c, m), (t2, c2, m2) in zip(log.records, loaded.records):
        assert (t, c) == (t2, c2)
        assert np.array_equal(m, m2)


def test_prototype_trajectories_project_into_basis():
    log = PrototypeHistoryLog()
    log.add(1, 0, np.array([1.0, 0.0, 0.0]))
    log.add(2, 0, np.array([3.0, 0.0, 0.0]))
    components = np.array([[1.0, 0.0, 0.0]])
    mean = np.zeros(3)
    traj = prototype_trajectories(log, components, mean)
    assert [t for t, _ in traj[0]] == [1, 2]
    assert np.allclose([p[0] for _, p in traj[0]], [1.0, 3.0])


# ---------------------------------------------------------------------------
# Pearson correlation and motion similarity

def test_pearson_self_correlation_is_one():
    x = np.random.default_rng(4).uniform(-1, 1, 50)
    assert abs(pearson(x, x) - 1.0) < 1e-12
    assert abs(pearson(x, -x) + 1.0) < 1e-12


def test_pearson_constant_input_is_zero():
    assert pearson(np.ones(5), np.arange(5.0)) == 0.0


def test_pearson_hand_fixture():
    # r for x = [1,2,3,4], y = [2,4,5,9]: cov/sqrt(varx*vary)
    x = np.array([1.0, 2.0, 3.0, 4.0])
    y = np.array([2.0, 4.0, 5.0, 9.0])
    xc, yc = x - x.mean(), y - y.mean()
    expected = (xc @ yc) / np.sqrt((xc @ xc) * (yc @ yc))
    assert abs(pearson(x, y) - expected) < 1e-10


def test_motion_similarity_four_class_fixture():
    # classes move along axis-aligned directions; classes 0/1 move together,
    # classes 2/3 move together, so their motion distances are small exactly
    # where the feature matrix says the classes are similar
    log = PrototypeHistoryLog()
    moves = {0: [1.0, 0.0], 1: [1.1, 0.0], 2: [0.0, 1.0], 3: [0.0, 1.1]}
    for c, m in moves.items():
        log.add(1, c, np.zeros(2))
        log.add(2, c, np.array(m))
    F = np.array([[1.0, 0.9, 0.1, 0.1],
                  [0.9, 1.0, 0.1, 0.1],
                  [0.1, 0.1, 1.0, 0.9],
                  [0.1, 0.1, 0.9, 1.0]])
    out = motion_similarity(log, F)
    assert out["classes"] == [0, 1, 2, 3]
    assert np.allclose(out["motion_vectors"][0], [1.0, 0.0])
    # similar classes have near-zero motion distance -> strong negative r
    assert out["pearson_r"] < -0.9
    dists = out["motion_distance_matrix"]
    assert np.allclose(dists, dists.T) and np.allclose(np.diag(dists), 0.0)
    assert abs(dists[0, 1] - 0.1) < 1e-10


def test_motion_similarity_input_validation():
    log = PrototypeHistoryLog()
    for c in (0, 1):
        log.add(1, c, np.zeros(2))
        log.add(2, c, np.ones(2))
    with pytest.raises(ValueError, match="square"):
        motion_similarity(log, np.zeros((2, 3)))
    with pytest.raises(ValueError, match="symmetric"):
        motion_similarity(log, np.array([[1.0, 0.2], [0.5, 1.0]]))
    with pytest.raises(ValueError, match="classes"):
        motion_similarity(log, np.eye(3))
