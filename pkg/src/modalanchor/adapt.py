"""Low-rank adapters on selected weight matrices and hierarchical freezing."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .encoder import TEXT_FIRST, VISUAL_FIRST, AdapterPair, DualEncoder
from .errors import ContractError, ParameterError

DEFAULT_TARGETS = ("cross.proj_v", "cross.proj_t", "visual.w2", "text.w")
LEVELS = ("none", "lower", "all-but-adapters")


@dataclass(frozen=True)
class AdapterSpec:
    rank: int = 4
    alpha: float = 1.0
    targets: tuple[str, ...] = DEFAULT_TARGETS

    def __post_init__(self):
        if self.rank < 1:
            raise ParameterError(f"adapter rank must be >= 1, got {self.rank}")


def _adapter_names(host: str) -> tuple[str, str]:
    return f"adapter.{host}.A", f"adapter.{host}.B"


def attach_adapters(model: DualEncoder, spec: AdapterSpec, seed: int | None = None) -> DualEncoder:
    """Freeze each target matrix and add a trainable ``B @ A`` update with ``B = 0``."""
    if model.adapters:
        raise ContractError("adapters are already attached; merge them first")
    params = model.params
    for host in spec.targets:
        if host not in params:
            raise ParameterError(f"adapter target {host!r} is not a model parameter")
        shape = params[host].shape
        if len(shape) != 2:
            raise ParameterError(f"adapter target {host!r} is not a matrix (shape {shape})")
        if spec.rank > min(shape):
            raise ParameterError(f"adapter rank {spec.rank} exceeds min dimension of {host!r} {shape}")
    rng = np.random.default_rng(model.config.seed if seed is None else seed)
    model.saved_mask = dict(params.trainable)
    bound = 1.0 / math.sqrt(spec.rank)
    for host in spec.targets:
        rows, cols = params[host].shape
        a_name, b_name = _adapter_names(host)
        group = params.groups[host]
        params.add(a_name, rng.uniform(-bound, bound, size=(spec.rank, cols)), group)
        params.add(b_name, np.zeros((rows, spec.rank)), group)
        params.trainable[host] = False
        model.adapters[host] = AdapterPair(host, a_name, b_name, spec.rank, spec.alpha)
    return model


def adapter_names(model: DualEncoder) -> list[str]:
    return [n for a in model.adapters.values() for n in (a.a_name, a.b_name)]


def freeze_hierarchy(model: DualEncoder, level: str) -> dict[str, bool]:
    """Set the trainable mask for a freezing level and return it.

    ``lower`` freezes the first layer of each encoder stream (and keeps adapter
    hosts frozen); ``all-but-adapters`` leaves only adapter factors trainable.
    """
    if level not in LEVELS:
        raise ParameterError(f"unknown freeze level {level!r}; expected one of {LEVELS}")
    params = model.params
    hosts = set(model.adapters)
    factors = set(adapter_names(model))
    for name in params:
        if level == "none":
            flag = True
        elif level == "lower":
            flag = name not in VISUAL_FIRST + TEXT_FIRST and name not in hosts
        else:
            flag = name in factors
        params.trainable[name] = flag
    return dict(params.trainable)


def merge_adapters(model: DualEncoder) -> DualEncoder:
    """Fold ``(alpha/r)·B@A`` into the host matrices and drop the adapters."""
    if not model.adapters:
        raise ContractError("merge_adapters: no adapters attached")
    params = model.params
    for host, pair in model.adapters.items():
        params.values[host] = params.values[host] + pair.scale * (params[pair.b_name] @ params[pair.a_name])
        params.remove(pair.a_name)
        params.remove(pair.b_name)
    model.adapters = {}
    if model.saved_mask is not None:
        for name, flag in model.saved_mask.items():
            if name in params:
                params.trainable[name] = flag
        model.saved_mask = None
    return model


def trainable_fraction(model: DualEncoder) -> float:
    return model.params.count(trainable_only=True) / model.params.count()

