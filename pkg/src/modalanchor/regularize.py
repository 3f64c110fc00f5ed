"""Grouped diagonal Fisher, multi-group EWC penalty and cross-modal consistency loss."""

from __future__ import annotations

import copy
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import adcore as ad
from .adcore import ParamStore, Tensor
from .encoder import (
    DualEncoder,
    contrastive_terms,
    embed_text,
    embed_visual,
    similarity_matrix,
    temperature,
)
from .errors import ContractError, InputError, ParameterError

SINGLE_GROUP = "all"


@dataclass
class FisherEstimate:
    values: dict[str, np.ndarray]
    groups: dict[str, str]
    sample_count: int

    def group_names(self) -> list[str]:
        return list(dict.fromkeys(self.groups.values()))

    def group_mean(self, group: str) -> float:
        arrays = [v.ravel() for n, v in self.values.items() if self.groups[n] == group]
        if not arrays:
            return 0.0
        return float(np.concatenate(arrays).mean())

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.values.values()])

    def regrouped(self, group: str = SINGLE_GROUP) -> FisherEstimate:
        """Same values with every parameter in one group (whole-model EWC)."""
        return FisherEstimate(self.values, {n: group for n in self.values}, self.sample_count)


@dataclass
class ConsolidationRecord:
    anchor: dict[str, np.ndarray]
    fisher: FisherEstimate
    lambdas: dict[str, float]
    task_id: str = ""

    def __post_init__(self):
        for g, lam in self.lambdas.items():
            if lam < 0:
                raise ParameterError(f"lambda for group {g!r} must be >= 0, got {lam}")
        for n, f in self.fisher.values.items():
            if n not in self.anchor or self.anchor[n].shape != f.shape:
                raise ContractError(f"anchor and Fisher shapes disagree for {n!r}")


@dataclass
class EncoderSnapshot:
    """Frozen copy of the encoders plus the probe batch they are compared on."""

    model: DualEncoder
    probe_images: np.ndarray
    probe_captions: np.ndarray
    task_id: str = ""
    old_similarity: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if len(self.probe_images) == 0:
            raise InputError("snapshot probe batch is empty")
        if self.old_similarity is None:
            V = embed_visual(self.model, self.probe_images)
            T = embed_text(self.model, self.probe_captions)
            self.old_similarity = similarity_matrix(V, T).data

    @property
    def embed_dim(self) -> int:
        return self.model.config.d_e


def make_snapshot(model: DualEncoder, images, captions, task_id: str = "") -> EncoderSnapshot:
    if model.adapters:
        raise ContractError("snapshot requires merged adapters")
    return EncoderSnapshot(model.copy(), np.array(images, dtype=np.float64), np.array(captions), task_id)


# Fisher ------------------------------------------------------------------------

LossTerms = Callable[[object, dict[str, Tensor], object], Tensor]


def dual_encoder_terms(model: DualEncoder, weights: dict[str, Tensor], batch) -> Tensor:
    images, captions = batch
    V = embed_visual(model, images, weights)
    T = embed_text(model, captions, weights)
    return contrastive_terms(V, T, temperature(weights))


def _batch(data, start: int, stop: int):
    if isinstance(data, tuple):
        return tuple(d[start:stop] for d in data)
    return data[start:stop]


def _length(data) -> int:
    return len(data[0]) if isinstance(data, tuple) else len(data)


def estimate_fisher(
    model,
    data,
    n_samples: int,
    *,
    loss_terms: LossTerms | None = None,
    batch_size: int = 32,
) -> FisherEstimate:
    """Empirical diagonal Fisher: mean over samples of squared per-sample gradients.

    A sample's loss is its own term of the batched task loss, so for the
    contrastive objective the other pairs of its batch act as negatives.
    Samples are taken in order from ``data``; each gets its own backward pass.
    ``data`` is either a tuple of aligned arrays or a sliceable sequence.
    """
    if n_samples < 1:
        raise ParameterError(f"n_samples must be >= 1, got {n_samples}")
    total = _length(data)
    if total == 0:
        raise InputError("estimate_fisher: empty data source")
    loss_terms = loss_terms or dual_encoder_terms
    params: ParamStore = model.params
    n = min(n_samples, total)
    sums = {name: np.zeros_like(v) for name, v in params.values.items()}
    done = 0
    for start in range(0, total, batch_size):
        if done >= n:
            break
        leaves = params.leaves(all_grad=True)
        terms = loss_terms(model, model.weights(leaves), _batch(data, start, start + batch_size))
        for i in range(min(terms.shape[0], n - done)):
            for leaf in leaves.values():
                leaf.grad = None
            ad.backward(terms[i])
            for name, leaf in leaves.items():
                if leaf.grad is not None:
                    sums[name] += leaf.grad * leaf.grad
            done += 1
    values = {name: s / done for name, s in sums.items()}
    return FisherEstimate(values, dict(params.groups), done)


def adaptive_lambdas(fisher: FisherEstimate, lambda_base: float) -> dict[str, float]:
    """Split ``3·lambda_base`` across groups in proportion to their mean Fisher."""
    if not lambda_base > 0:
        raise ParameterError(f"lambda_base must be > 0, got {lambda_base}")
    groups = ad.GROUPS
    means = {g: fisher.group_mean(g) for g in groups}
    total = sum(means.values())
    if total <= 0:
        return {g: float(lambda_base) for g in groups}
    return {g: lambda_base * len(groups) * means[g] / total for g in groups}


# penalties ------------------------------------------------------------------------


def _as_tensors(params) -> Mapping[str, Tensor]:
    if isinstance(params, ParamStore):
        return {n: Tensor(v) for n, v in params.values.items()}
    return {n: ad.as_tensor(v) for n, v in params.items()}


class EWCPenalty:
    """Precomputed form of the summed EWC penalty for a fixed list of records.

    Per parameter, ``Σ_r w_r (θ − θ*_r)²`` with ``w_r = λ_r · F_r`` equals
    ``A (θ − m)² + c`` where ``A = Σ_r w_r``, ``m`` is the ``w``-weighted mean
    anchor and ``c = Σ_r w_r (θ*_r − m)²``.  Building it once per task keeps
    the per-step cost to one pass over the parameters.
    """

    def __init__(self, records: Sequence[ConsolidationRecord]):
        self.records = list(records)
        self.names = list(dict.fromkeys(n for rec in self.records for n in rec.fisher.values))
        self.weight: dict[str, np.ndarray] = {}
        self.center: dict[str, np.ndarray] = {}
        self.const = 0.0
        for n in self.names:
            terms = [
                (rec.lambdas[rec.fisher.groups[n]] * rec.fisher.values[n], rec.anchor[n])
                for rec in self.records
                if n in rec.fisher.values
            ]
            for w, a in terms[1:]:
                if a.shape != terms[0][1].shape:
                    raise ContractError(f"ewc_penalty: anchors for {n!r} disagree in shape")
            if len(terms) == 1:
                weight, center = terms[0]
            else:
                weight = np.sum([w for w, _ in terms], axis=0)
                safe = np.where(weight > 0, weight, 1.0)
                center = np.where(weight > 0, np.sum([w * a for w, a in terms], axis=0) / safe, terms[-1][1])
                self.const += float(np.sum([np.sum(w * (a - center) ** 2) for w, a in terms]))
            self.weight[n] = weight
            self.center[n] = center

    def fixing(self, values: dict[str, np.ndarray]) -> EWCPenalty:
        """Copy with the listed parameters held at ``values`` and folded into the constant.

        Useful when those parameters are frozen for a whole task: the copy
        gives the same penalty while skipping them on every step.
        """
        out = copy.copy(self)
        out.names = [n for n in self.names if n not in values]
        out.weight = {n: self.weight[n] for n in out.names}
        out.center = {n: self.center[n] for n in out.names}
        out.const = self.const
        for n in self.names:
            if n in values:
                d = np.asarray(values[n], dtype=np.float64) - self.center[n]
                out.const += float(np.sum(self.weight[n] * d * d))
        return out

    def __call__(self, params) -> Tensor:
        tensors = _as_tensors(params)
        if not self.records:
            return Tensor(0.0)
        for n in self.names:
            if n not in tensors:
                raise ContractError(f"ewc_penalty: parameter {n!r} missing from params")
            if tensors[n].shape != self.center[n].shape:
                raise ContractError(
                    f"ewc_penalty: shape {tensors[n].shape} of {n!r} does not match anchor {self.center[n].shape}"
                )
        parents = tuple(tensors[n] for n in self.names)
        value = self.const
        slopes = []
        for n, t in zip(self.names, parents):
            d = (t.data - self.center[n]).ravel()
            wd = self.weight[n].ravel() * d
            value += float(np.dot(wd, d))
            slopes.append(wd.reshape(t.shape) if t.requires_grad else None)

        def back(g):
            return [None if s is None else 2.0 * g * s for s in slopes]

        return ad.custom_op(value, parents, back, "ewc_penalty")


def ewc_penalty(params, records: Sequence[ConsolidationRecord]) -> Tensor:
    """``Σ_records Σ_groups λ_g Σ_i F_g⁽ⁱ⁾ (θ_g⁽ⁱ⁾ − θ*_g⁽ⁱ⁾)²``, differentiable in ``params``."""
    return EWCPenalty(records)(params)


def consistency_from_similarity(current: Tensor, old: np.ndarray) -> Tensor:
    """Mean absolute change of the probe similarity matrix."""
    if current.shape != np.shape(old):
        raise ContractError(f"consistency: similarity shapes {current.shape} and {np.shape(old)} differ")
    return ad.mean(ad.abs(current - old))


def probe_consistency(V: Tensor, T: Tensor, offset: int, olds: Sequence[np.ndarray]) -> Tensor:
    """Mean over snapshots of the consistency loss, fused into one node.

    Rows ``offset:`` of ``V`` and ``T`` hold the probe batches of the
    snapshots back to back, in the order of ``olds``.  Equivalent to averaging
    :func:`consistency_from_similarity` over per-snapshot slices.
    """
    if V.shape != T.shape:
        raise ContractError(f"probe_consistency: embedding shapes {V.shape} and {T.shape} differ")
    spans = []
    start = offset
    for old in olds:
        n = old.shape[0]
        spans.append((start, start + n, old))
        start += n
    if start != V.shape[0]:
        raise ContractError(f"probe_consistency: probe rows {start - offset} do not fill {V.shape[0] - offset}")
    k = len(spans)
    value = 0.0
    signs = []
    for lo, hi, old in spans:
        diff = V.data[lo:hi] @ T.data[lo:hi].T - old
        value += float(np.abs(diff).mean()) / k
        signs.append(np.sign(diff) / (diff.size * k))

    def back(g):
        dV = np.zeros_like(V.data)
        dT = np.zeros_like(T.data)
        for (lo, hi, _), s in zip(spans, signs):
            dV[lo:hi] = g * (s @ T.data[lo:hi])
            dT[lo:hi] = g * (s.T @ V.data[lo:hi])
        return dV, dT

    return ad.custom_op(value, (V, T), back, "probe_consistency")


def consistency_loss(model: DualEncoder, snapshot: EncoderSnapshot, weights=None) -> Tensor:
    """``(1/N²) Σ_ij |S_cur[i,j] − S_old[i,j]|`` on the snapshot's probe batch."""
    if model.config.d_e != snapshot.embed_dim:
        raise ContractError(
            f"consistency_loss: embedding dim {model.config.d_e} differs from snapshot's {snapshot.embed_dim}"
        )
    w = model.weights() if weights is None else weights
    V = embed_visual(model, snapshot.probe_images, w)
    T = embed_text(model, snapshot.probe_captions, w)
    return consistency_from_similarity(similarity_matrix(V, T), snapshot.old_similarity)


def combined_loss(
    task_loss: Tensor,
    params,
    records: Sequence[ConsolidationRecord],
    snapshots: Sequence[EncoderSnapshot],
    beta: float,
    *,
    model: DualEncoder | None = None,
    consistency: Sequence[Tensor] | None = None,
    penalty: EWCPenalty | None = None,
) -> Tensor:
    """Task loss + EWC penalty + β · mean consistency loss over snapshots.

    Consistency terms are computed from ``model`` unless passed in directly;
    ``penalty`` may carry a prebuilt :class:`EWCPenalty` for ``records``.
    Empty histories and ``beta == 0`` add nothing, so the result is then the
    task loss itself.
    """
    if beta < 0:
        raise ParameterError(f"beta must be >= 0, got {beta}")
    total = task_loss
    if records:
        penalty = penalty if penalty is not None else EWCPenalty(records)
        total = total + penalty(params)
    if snapshots and beta > 0:
        if consistency is None:
            if model is None:
                raise ContractError("combined_loss: consistency needs the current model")
            weights = params if not isinstance(params, ParamStore) else None
            consistency = [consistency_loss(model, s, weights) for s in snapshots]
        term = consistency[0]
        for c in consistency[1:]:
            term = term + c
        total = total + term * (beta / len(consistency))
    return total
