"""Finite-difference gradient suite over the primitive ops and the training losses.

Ops are looked up on :mod:`adcore` at call time, so a patched op is what gets
checked.
"""

from __future__ import annotations

from collections.abc import Callable

import numpy as np

from . import adcore as ad
from .adapt import AdapterSpec, attach_adapters
from .encoder import DualEncoder, ModelConfig, contrastive_loss, embed_text, embed_visual, task_loss, temperature
from .regularize import (
    ConsolidationRecord,
    FisherEstimate,
    combined_loss,
    consistency_loss,
    ewc_penalty,
    make_snapshot,
    probe_consistency,
)

TOLERANCE = 1e-4
TINY = ModelConfig(d_v=6, vocab=12, max_len=3, d_h=5, d_e=4, temperature=0.5, seed=3)

Case = Callable[[], tuple[Callable[[dict], ad.Tensor], ad.ParamStore]]


def _store(rng: np.random.Generator, lo: float = -1.0, hi: float = 1.0, **shapes) -> ad.ParamStore:
    store = ad.ParamStore()
    for name, shape in shapes.items():
        store.add(name, rng.uniform(lo, hi, size=shape), "visual")
    return store


def _weighted(out: ad.Tensor, rng: np.random.Generator) -> ad.Tensor:
    # random weights so that sign errors cannot cancel in a plain sum
    return ad.sum(ad.mul(out, rng.normal(size=out.shape)))


def _unary(op: str, low: float = -1.0, high: float = 1.0, **kw) -> Case:
    def build():
        rng = np.random.default_rng(11)
        store = _store(rng, low, high, x=(3, 4))
        w = rng.normal(size=(3, 4))
        return (lambda p: ad.sum(ad.mul(getattr(ad, op)(p["x"], **kw), w))), store

    return build


def _binary(op: str, lo: float = -1.0, hi: float = 1.0) -> Case:
    def build():
        rng = np.random.default_rng(12)
        store = _store(rng, x=(3, 4))
        store.add("y", rng.uniform(lo, hi, size=(3, 4)), "visual")
        w = rng.normal(size=(3, 4))
        return (lambda p: ad.sum(ad.mul(getattr(ad, op)(p["x"], p["y"]), w))), store

    return build


def _shaped(fn: Callable[[dict, np.random.Generator], ad.Tensor], **shapes) -> Case:
    def build():
        rng = np.random.default_rng(13)
        store = _store(rng, **shapes)
        return (lambda p: _weighted(fn(p, np.random.default_rng(15)), np.random.default_rng(14))), store

    return build


def _batch(rng: np.random.Generator, n: int = 5):
    return rng.normal(size=(n, TINY.d_v)), rng.integers(0, TINY.vocab, size=(n, TINY.max_len))


def _records(model: DualEncoder) -> list[ConsolidationRecord]:
    rng = np.random.default_rng(21)
    out = []
    for k, lam in enumerate(((0.7, 1.3, 2.0), (0.4, 0.9, 1.1))):
        values = {n: rng.uniform(0.0, 1.0, size=v.shape) for n, v in model.params.values.items()}
        anchor = {n: v + rng.normal(scale=0.2, size=v.shape) for n, v in model.params.values.items()}
        fisher = FisherEstimate(values, dict(model.params.groups), 10)
        out.append(ConsolidationRecord(anchor, fisher, dict(zip(ad.GROUPS, lam)), f"T{k}"))
    return out


def _snapshot(model: DualEncoder, seed: int):
    rng = np.random.default_rng(seed)
    old = model.copy()
    for name, v in old.params.values.items():
        old.params.values[name] = v + rng.normal(scale=0.3, size=v.shape)
    images, captions = _batch(rng, 4)
    return make_snapshot(old, images, captions, "old")


def _model_case(loss: Callable[..., ad.Tensor], adapters: bool = False) -> Case:
    """``loss(model, weights, records, snapshots)`` on the tiny model."""

    def build():
        model = DualEncoder(TINY)
        records = _records(model)
        snaps = [_snapshot(model, 31), _snapshot(model, 32)]
        if adapters:
            attach_adapters(model, AdapterSpec(rank=2, alpha=2.0), seed=4)
            rng = np.random.default_rng(9)
            for pair in model.adapters.values():
                model.params.values[pair.b_name] = rng.normal(scale=0.3, size=model.params[pair.b_name].shape)
            for name in model.params:
                model.params.trainable[name] = True
        return (lambda p: loss(model, model.weights(p), records, snaps)), model.params

    return build


def _contrastive(model, w, records, snaps):
    images, captions = _batch(np.random.default_rng(5))
    return task_loss(model, images, captions, w)


def _ewc(model, w, records, snaps):
    return ewc_penalty(w, records)


def _consistency(model, w, records, snaps):
    return consistency_loss(model, snaps[0], w)


def _probe_consistency(model, w, records, snaps):
    head_images, head_captions = _batch(np.random.default_rng(5), 3)
    images = np.concatenate([head_images] + [s.probe_images for s in snaps])
    captions = np.concatenate([head_captions] + [s.probe_captions for s in snaps])
    V, T = embed_visual(model, images, w), embed_text(model, captions, w)
    return probe_consistency(V, T, 3, [s.old_similarity for s in snaps])


def _combined(model, w, records, snaps):
    images, captions = _batch(np.random.default_rng(5))
    V, T = embed_visual(model, images, w), embed_text(model, captions, w)
    task = contrastive_loss(V, T, temperature(w))
    return combined_loss(task, w, records, snaps, 0.8, model=model)


def _lowrank(p, rng):
    return ad.add_lowrank(p["w"], p["a"], p["b"], 1.5)


CASES: dict[str, Case] = {
    "add": _binary("add"),
    "sub": _binary("sub"),
    "mul": _binary("mul"),
    "div": _binary("div", 0.5, 2.0),
    "relu": _unary("relu", 0.1, 1.0),
    "tanh": _unary("tanh"),
    "exp": _unary("exp"),
    "log": _unary("log", 0.5, 2.0),
    "square": _unary("square"),
    "abs": _unary("abs", 0.1, 1.0),
    "clamp": _unary("clamp", -0.4, 0.4, lo=-0.5, hi=0.5),
    "sum": _shaped(lambda p, r: ad.sum(p["x"], axis=1), x=(3, 4)),
    "mean": _shaped(lambda p, r: ad.mean(p["x"], axis=0), x=(3, 4)),
    "matmul": _shaped(lambda p, r: ad.matmul(p["x"], p["y"]), x=(3, 4), y=(4, 2)),
    "linear": _shaped(lambda p, r: ad.linear(p["x"], p["w"], p["b"]), x=(3, 4), w=(4, 2), b=(2,)),
    "transpose": _shaped(lambda p, r: ad.transpose(p["x"]), x=(3, 4)),
    "diag": _shaped(lambda p, r: ad.diag(p["x"]), x=(4, 4)),
    "take": _shaped(lambda p, r: ad.take(p["x"], np.array([2, 0, 2])), x=(3, 4)),
    "concat": _shaped(lambda p, r: ad.concat([p["x"], p["y"]]), x=(3, 4), y=(2, 4)),
    "embed_mean": _shaped(lambda p, r: ad.embed_mean(p["x"], r.integers(0, 6, size=(4, 3))), x=(6, 4)),
    "add_lowrank": _shaped(_lowrank, w=(4, 3), a=(2, 3), b=(4, 2)),
    "softmax": _shaped(lambda p, r: ad.softmax(p["x"]), x=(3, 4)),
    "log_softmax": _shaped(lambda p, r: ad.log_softmax(p["x"]), x=(3, 4)),
    "l2_normalize": _shaped(lambda p, r: ad.l2_normalize(p["x"]), x=(3, 4)),
    "contrastive_loss": _model_case(_contrastive),
    "contrastive_loss+adapters": _model_case(_contrastive, adapters=True),
    "ewc_penalty": _model_case(_ewc),
    "consistency_loss": _model_case(_consistency),
    "probe_consistency": _model_case(_probe_consistency),
    "combined_loss": _model_case(_combined, adapters=True),
}


def run_gradcheck(names=None, step: float = 1e-6) -> dict[str, float]:
    """Worst relative finite-difference error for each component."""
    out = {}
    for name in names or CASES:
        fn, store = CASES[name]()
        out[name] = ad.check_gradient(fn, store, step=step)
    return out


def failures(errors: dict[str, float], tol: float = TOLERANCE) -> list[str]:
    return [name for name, err in errors.items() if not err < tol]
