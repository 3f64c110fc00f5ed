import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from modalanchor import adcore as ad
from modalanchor.encoder import task_loss
from modalanchor.errors import DimensionError, InputError
from modalanchor.metrics import (
    average_accuracy,
    backward_transfer,
    fisher_histogram,
    forgetting_rate,
    forward_transfer,
    pca_project,
    retrieval_accuracy,
    retrieval_from_embeddings,
    alignment_drift,
)
from modalanchor.regularize import estimate_fisher, make_snapshot

NAN = np.nan


def test_bwt_hand_cases():
    assert backward_transfer([[0.9, NAN], [0.8, 0.85]]) == pytest.approx(-0.1, abs=1e-15)
    assert backward_transfer([[0.5, 0.1], [0.5, 0.7]]) == 0.0
    assert backward_transfer([[0.5, 0.1], [0.6, 0.7]]) > 0


def test_fwt_hand_cases():
    assert forward_transfer([[0.9, 0.10], [0.8, 0.85]], [0.02, 0.03]) == pytest.approx(0.07, abs=1e-15)
    assert forward_transfer([[0.9, 0.03], [0.8, 0.85]], [0.02, 0.03]) == 0.0
    assert forward_transfer([[0.9, 0.01], [0.8, 0.85]], [0.02, 0.03]) < 0
    with pytest.raises(DimensionError):
        forward_transfer([[0.9, 0.1], [0.8, 0.85]], [0.1])


def test_forgetting_hand_cases():
    assert forgetting_rate([[0.9, 0.0], [0.6, 0.8]]) == pytest.approx(0.3, abs=1e-15)
    assert forgetting_rate([[0.5, 0.0], [0.7, 0.8]]) == 0.0


def test_forgetting_total_unchanged_by_a_never_forgotten_task():
    two = [[0.9, 0.0], [0.6, 0.8]]
    # task B stays at its peak, so only A contributes; the mean is over n−1 tasks
    three = [[0.9, 0.0, 0.0], [0.6, 0.8, 0.0], [0.6, 0.8, 0.7]]
    assert forgetting_rate(two) * 1 == pytest.approx(0.3, abs=1e-15)
    assert forgetting_rate(three) * 2 == pytest.approx(0.3, abs=1e-15)


def test_average_accuracy():
    assert average_accuracy(np.ones((3, 3))) == 1.0
    assert average_accuracy([[0.9, 0.1], [0.8, 0.85]]) == pytest.approx(0.825, abs=1e-15)
    assert average_accuracy(np.full((4, 4), 0.37)) == pytest.approx(0.37, abs=1e-15)


def test_shape_errors():
    with pytest.raises(DimensionError):
        backward_transfer(np.ones((2, 3)))
    with pytest.raises(InputError):
        forgetting_rate([[0.5]])


matrices = st.integers(2, 6).flatmap(
    lambda n: st.lists(st.floats(0.0, 1.0), min_size=n * n, max_size=n * n).map(lambda v: np.reshape(v, (n, n)))
)


@settings(max_examples=200, deadline=None)
@given(R=matrices)
def test_metric_ranges_and_determinism(R):
    assert -1.0 <= backward_transfer(R) <= 1.0
    assert forgetting_rate(R) >= 0.0
    assert 0.0 <= average_accuracy(R) <= 1.0
    assert forgetting_rate(R) == forgetting_rate(R.copy())


@settings(max_examples=200, deadline=None)
@given(R=matrices)
def test_forgetting_equals_minus_bwt_without_backward_gains(R):
    # cap each column at its diagonal so the peak is at k = i
    n = len(R)
    R = R.copy()
    for i in range(n):
        R[i + 1 :, i] = np.minimum(R[i + 1 :, i], R[i, i])
    assert forgetting_rate(R) == pytest.approx(-backward_transfer(R), abs=1e-12)


def test_retrieval_perfect_alignment():
    rng = np.random.default_rng(0)
    V = rng.normal(size=(64, 8))
    V /= np.linalg.norm(V, axis=1, keepdims=True)
    res = retrieval_from_embeddings(V, V)
    assert res.accuracy == 1.0 and res.chance == 1 / 32 and res.batches == 2


def test_retrieval_identical_text_tie_break():
    V = np.eye(32)
    T = np.tile([[1.0] + [0.0] * 31], (32, 1))
    assert retrieval_from_embeddings(V, T).accuracy == 1 / 32


def test_retrieval_small_set_single_batch():
    res = retrieval_from_embeddings(np.eye(5), np.eye(5))
    assert res.batches == 1 and res.chance == 1 / 5


def test_retrieval_chance_level():
    rng = np.random.default_rng(1)
    n = 32 * 200
    V = rng.normal(size=(n, 16))
    T = rng.normal(size=(n, 16))
    acc = retrieval_from_embeddings(V, T).accuracy
    p = 1 / 32
    sigma = np.sqrt(p * (1 - p) / n)
    assert abs(acc - p) < 3 * sigma


def test_drift_identity(tiny_model, tiny_batch):
    snap = make_snapshot(tiny_model, *tiny_batch)
    images, captions = tiny_batch
    drift, retention = alignment_drift(snap, tiny_model, images, captions)
    assert drift == pytest.approx(0.0, abs=1e-15)
    assert retention == 1.0


def test_drift_hand_case(tiny_model, tiny_batch):
    # snapshot cosines overridden by hand; drift = mean(old − new)
    snap = make_snapshot(tiny_model, *tiny_batch)
    new = np.diag(snap.old_similarity).copy()
    snap.old_similarity = np.diag(new + np.array([0.1, 0.0, -0.2, 0.3, 0.05]))
    drift, retention = alignment_drift(snap, tiny_model)
    assert drift == pytest.approx((0.1 + 0.0 - 0.2 + 0.3 + 0.05) / 5, abs=1e-12)
    assert retention is None


def test_pca_matches_dense_eigensolver():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(20, 8)) @ np.diag([5, 3, 2, 1, 1, 0.5, 0.3, 0.1])
    res = pca_project(X, 2)
    Xc = X - X.mean(0)
    w, U = np.linalg.eigh(Xc.T @ Xc / len(X))
    order = np.argsort(w)[::-1][:2]
    comps = U[:, order].T
    for j in range(2):
        if comps[j][np.argmax(np.abs(comps[j]))] < 0:
            comps[j] = -comps[j]
    np.testing.assert_allclose(res.coords, Xc @ comps.T, atol=1e-6)
    np.testing.assert_allclose(res.explained, w[order] / w.sum(), atol=1e-6)
    assert abs(res.components[0] @ res.components[1]) < 1e-8


def test_pca_axis_aligned_and_degenerate():
    rng = np.random.default_rng(3)
    # centred, exactly uncorrelated columns with var(x) > var(y)
    q, _ = np.linalg.qr(rng.normal(size=(30, 2)) - 0)
    q -= q.mean(0)
    q, _ = np.linalg.qr(q)
    xy = q * [3.0, 1.0]
    X = np.zeros((30, 6))
    X[:, 2], X[:, 4] = xy[:, 0], xy[:, 1]
    res = pca_project(X, 2)
    centered = xy - xy.mean(0)
    for j in range(2):
        assert np.allclose(np.abs(res.coords[:, j]), np.abs(centered[:, j]), atol=1e-6)
    same = pca_project(np.ones((5, 4)), 2)
    assert np.all(same.coords == 0) and np.all(same.explained == 0)
    line = pca_project(np.outer(np.arange(6.0), [1.0, 2.0, 0.0]), 2)
    assert line.explained[1] == 0 and np.all(line.coords[:, 1] == 0)
    with pytest.raises(DimensionError):
        pca_project(np.ones((1, 3)), 2)


def test_fisher_histogram_is_right_skewed(tiny_model, tiny_batch):
    images, captions = tiny_batch
    for _ in range(50):
        grads = ad.backward(task_loss(tiny_model, images, captions, tiny_model.weights(tiny_model.params.leaves())))
        ad.sgd_step(tiny_model.params, grads, lr=0.1)
    values = estimate_fisher(tiny_model, tiny_batch, 5).flat()
    left, counts = fisher_histogram(values, bins=20)
    assert counts.sum() == values.size and left[0] == values.min()
    assert stats.skew(values) > 1.0
    assert np.argmax(counts) <= 1
    assert np.median(values) < values.mean()


def test_retrieval_accuracy_on_model(tiny_model, tiny_batch):
    acc = retrieval_accuracy(tiny_model, *tiny_batch)
    assert 0.0 <= acc <= 1.0


def test_metrics_are_bit_exact():
    R = np.random.default_rng(4).uniform(size=(4, 4))
    outs = [(backward_transfer(R), forgetting_rate(R), average_accuracy(R)) for _ in range(2)]
    assert outs[0] == outs[1]
