"""Continual-learning metrics over an accuracy matrix, retrieval accuracy and PCA.

``R[k][i]`` is the accuracy on task ``i`` after training task ``k`` (0-based
here).  Transfer and forgetting follow the usual GEM-style definitions:

* BWT = mean over i < n-1 of ``R[n-1][i] - R[i][i]``
* FWT = mean over i > 0 of ``R[i-1][i] - b[i]``
* forgetting = mean over i < n-1 of ``max_{k >= i} R[k][i] - R[n-1][i]``
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .encoder import DualEncoder, embed_text, embed_visual
from .errors import ContractError, DimensionError, InputError

DEFINITIONS = {
    "bwt": "mean_{i<n} (R[n][i] - R[i][i])",
    "fwt": "mean_{i>1} (R[i-1][i] - b[i])",
    "forgetting": "mean_{i<n} (max_{k>=i} R[k][i] - R[n][i])",
    "avg_acc": "mean_i R[n][i]",
}


class RetrievalResult(NamedTuple):
    accuracy: float
    chance: float
    batches: int


def _square(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.ndim != 2 or R.shape[0] != R.shape[1]:
        raise DimensionError(f"accuracy matrix must be square, got shape {R.shape}")
    if R.shape[0] < 2:
        raise InputError("transfer metrics need at least 2 tasks")
    return R


def backward_transfer(R) -> float:
    R = _square(R)
    n = len(R)
    return float(np.mean([R[n - 1, i] - R[i, i] for i in range(n - 1)]))


def forward_transfer(R, b) -> float:
    R = _square(R)
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (len(R),):
        raise DimensionError(f"baseline vector has shape {b.shape}, expected ({len(R)},)")
    return float(np.mean([R[i - 1, i] - b[i] for i in range(1, len(R))]))


def forgetting_rate(R) -> float:
    R = _square(R)
    n = len(R)
    return float(np.mean([R[i:, i].max() - R[n - 1, i] for i in range(n - 1)]))


def average_accuracy(R) -> float:
    R = np.asarray(R, dtype=np.float64)
    return float(R[-1].mean())


# retrieval ---------------------------------------------------------------------


def retrieval_from_embeddings(V: np.ndarray, T: np.ndarray, batch: int = 32) -> RetrievalResult:
    """Image→text top-1 accuracy inside consecutive batches of ``batch`` pairs.

    A trailing partial batch is dropped unless it is the only one.  ``argmax``
    breaks ties toward the lower index.
    """
    V, T = np.asarray(V), np.asarray(T)
    n = len(V)
    if n == 0:
        raise InputError("retrieval accuracy needs at least one pair")
    if n < batch:
        starts, size = [0], n
    else:
        starts, size = list(range(0, n - batch + 1, batch)), batch
    scores = []
    for s in starts:
        S = V[s : s + size] @ T[s : s + size].T
        scores.append(np.mean(np.argmax(S, axis=1) == np.arange(size)))
    return RetrievalResult(float(np.mean(scores)), 1.0 / size, len(starts))


def evaluate_retrieval(model: DualEncoder, images, captions, batch: int = 32) -> RetrievalResult:
    V = embed_visual(model, images).data
    T = embed_text(model, captions).data
    return retrieval_from_embeddings(V, T, batch)


def retrieval_accuracy(model: DualEncoder, images, captions, batch: int = 32) -> float:
    return evaluate_retrieval(model, images, captions, batch).accuracy


def alignment_drift(snapshot, model: DualEncoder, eval_images=None, eval_captions=None, batch: int = 32):
    """Mean drop in true-pair cosine on the snapshot probe, and retrieval retention.

    Retention is ``None`` when no eval split is given or the snapshot model
    scores zero on it.
    """
    if snapshot.embed_dim != model.config.d_e:
        raise ContractError("alignment_drift: embedding dimensions differ")
    old_cos = np.diag(snapshot.old_similarity)
    V = embed_visual(model, snapshot.probe_images).data
    T = embed_text(model, snapshot.probe_captions).data
    new_cos = np.einsum("ij,ij->i", V, T)
    drift = float(np.mean(old_cos - new_cos))
    retention = None
    if eval_images is not None:
        before = retrieval_accuracy(snapshot.model, eval_images, eval_captions, batch)
        if before > 0:
            retention = retrieval_accuracy(model, eval_images, eval_captions, batch) / before
    return drift, retention


# PCA -------------------------------------------------------------------------------


class PCAResult(NamedTuple):
    coords: np.ndarray
    explained: np.ndarray
    components: np.ndarray


def _power_iteration(C: np.ndarray, tol: float, max_iter: int, start: np.ndarray) -> tuple[float, np.ndarray]:
    v = start / np.linalg.norm(start)
    lam = 0.0
    for _ in range(max_iter):
        w = C @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0, v
        w = w / norm
        if np.sign(w @ v) < 0:
            w = -w
        lam = float(w @ C @ w)
        if np.linalg.norm(w - v) < tol:
            return lam, w
        v = w
    return lam, v


def pca_project(X, k: int = 2, tol: float = 1e-10, max_iter: int = 200_000) -> PCAResult:
    """Top-``k`` principal components by power iteration with deflation.

    Each component is signed so its largest-magnitude loading is positive.
    Components past the data rank are zero with zero explained variance.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < k:
        raise DimensionError(f"pca_project: need at least {k} rows, got shape {X.shape}")
    Xc = X - X.mean(axis=0)
    C = Xc.T @ Xc / X.shape[0]
    total = float(np.trace(C))
    d = X.shape[1]
    components = np.zeros((k, d))
    explained = np.zeros(k)
    rng = np.random.default_rng(0)
    scale = max(total, 1e-300)
    for j in range(min(k, d)):
        lam, v = _power_iteration(C, tol, max_iter, rng.normal(size=d))
        if lam <= 1e-12 * scale or total == 0.0:
            break
        pivot = np.argmax(np.abs(v))
        if v[pivot] < 0:
            v = -v
        components[j] = v
        explained[j] = lam / total
        C = C - lam * np.outer(v, v)
    return PCAResult(Xc @ components.T, explained, components)


def fisher_histogram(values: np.ndarray, bins: int = 50) -> tuple[np.ndarray, np.ndarray]:
    counts, edges = np.histogram(np.asarray(values).ravel(), bins=bins)
    return edges[:-1], counts
