"""Toy image/text dual encoder trained with a symmetric contrastive loss."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import adcore as ad
from .adcore import ParamStore, Tensor
from .errors import DimensionError, ParameterError

TAU_MIN = 0.01
TAU_MAX = 1.0


@dataclass(frozen=True)
class ModelConfig:
    d_v: int = 64
    vocab: int = 256
    max_len: int = 16
    d_h: int = 64
    d_e: int = 32
    temperature: float = 0.07
    seed: int = 0

    def __post_init__(self):
        for name in ("d_v", "vocab", "max_len", "d_h", "d_e"):
            if getattr(self, name) < 1:
                raise ParameterError(f"ModelConfig.{name} must be >= 1, got {getattr(self, name)}")
        if not self.temperature > 0:
            raise ParameterError(f"ModelConfig.temperature must be > 0, got {self.temperature}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Pair:
    image: np.ndarray
    caption: np.ndarray
    task_id: str = ""

    def __eq__(self, other) -> bool:
        if not isinstance(other, Pair):
            return NotImplemented
        return (
            self.task_id == other.task_id
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.caption, other.caption)
        )


# Parameter names.  The "top" hidden layers are the adapter targets and the
# first layers are what hierarchical freezing holds fixed.
VISUAL_FIRST = ("visual.w1", "visual.b1")
VISUAL_TOP = ("visual.w2", "visual.b2")
TEXT_FIRST = ("text.embed",)
TEXT_TOP = ("text.w", "text.b")
CROSS = ("cross.proj_v", "cross.proj_t", "cross.log_temp")


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: ModelConfig) -> ParamStore:
    """Seeded uniform(±1/√fan_in) initialisation of every layer.

    Embedding rows are read one at a time, so their fan-in is taken as 1.
    """
    rng = np.random.default_rng(config.seed)
    c = config
    p = ParamStore()
    p.add("visual.w1", _uniform(rng, (c.d_v, c.d_h), c.d_v), "visual")
    p.add("visual.b1", _uniform(rng, (c.d_h,), c.d_v), "visual")
    p.add("visual.w2", _uniform(rng, (c.d_h, c.d_h), c.d_h), "visual")
    p.add("visual.b2", _uniform(rng, (c.d_h,), c.d_h), "visual")
    p.add("text.embed", _uniform(rng, (c.vocab, c.d_h), 1), "textual")
    p.add("text.w", _uniform(rng, (c.d_h, c.d_h), c.d_h), "textual")
    p.add("text.b", _uniform(rng, (c.d_h,), c.d_h), "textual")
    p.add("cross.proj_v", _uniform(rng, (c.d_h, c.d_e), c.d_h), "cross_modal")
    p.add("cross.proj_t", _uniform(rng, (c.d_h, c.d_e), c.d_h), "cross_modal")
    p.add("cross.log_temp", np.asarray(math.log(c.temperature)), "cross_modal")
    return p


@dataclass
class AdapterPair:
    """Low-rank update ``scale · B @ A`` on top of a frozen host matrix."""

    host: str
    a_name: str
    b_name: str
    rank: int
    alpha: float

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


@dataclass
class DualEncoder:
    config: ModelConfig
    params: ParamStore = None  # type: ignore[assignment]
    adapters: dict[str, AdapterPair] = field(default_factory=dict)
    # trainable flags saved by attach_adapters, restored on merge
    saved_mask: dict[str, bool] | None = None

    def __post_init__(self):
        if self.params is None:
            self.params = init_params(self.config)

    @classmethod
    def create(cls, config: ModelConfig | None = None, **overrides) -> DualEncoder:
        config = config or ModelConfig(**overrides)
        return cls(config)

    def copy(self) -> DualEncoder:
        return DualEncoder(
            self.config,
            self.params.copy(),
            {k: AdapterPair(**asdict(v)) for k, v in self.adapters.items()},
            None if self.saved_mask is None else dict(self.saved_mask),
        )

    def weights(self, leaves: dict[str, Tensor] | None = None) -> dict[str, Tensor]:
        """Effective weights for a forward pass.

        Without ``leaves`` the weights are constants.  Adapted matrices become
        ``W + (alpha/r)·B@A``.
        """
        if leaves is None:
            leaves = {n: Tensor(v) for n, v in self.params.values.items()}
        out = dict(leaves)
        for host, ad_pair in self.adapters.items():
            out[host] = ad.add_lowrank(leaves[host], leaves[ad_pair.a_name], leaves[ad_pair.b_name], ad_pair.scale)
            del out[ad_pair.a_name], out[ad_pair.b_name]
        return out

    def base_names(self) -> list[str]:
        hidden = {n for a in self.adapters.values() for n in (a.a_name, a.b_name)}
        return [n for n in self.params if n not in hidden]

    def effective_values(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.weights().items()}


def temperature(w: dict[str, Tensor]) -> Tensor:
    return ad.exp(ad.clamp(w["cross.log_temp"], math.log(TAU_MIN), math.log(TAU_MAX)))


def _check_images(model: DualEncoder, images: np.ndarray) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 2 or images.shape[0] == 0 or images.shape[1] != model.config.d_v:
        raise DimensionError(
            f"embed_visual: expected a nonempty (N, {model.config.d_v}) batch, got {images.shape}"
        )
    return images


def _check_captions(model: DualEncoder, captions: np.ndarray) -> np.ndarray:
    captions = np.asarray(captions)
    if captions.ndim != 2 or captions.shape[0] == 0 or captions.shape[1] != model.config.max_len:
        raise DimensionError(
            f"embed_text: expected a nonempty (N, {model.config.max_len}) batch, got {captions.shape}"
        )
    if captions.min() < 0 or captions.max() >= model.config.vocab:
        raise DimensionError(f"embed_text: token ids must lie in [0, {model.config.vocab})")
    return captions


def visual_first(w: dict[str, Tensor], images) -> Tensor:
    return ad.tanh(ad.linear(images, w["visual.w1"], w["visual.b1"]))


def visual_top(w: dict[str, Tensor], h) -> Tensor:
    return ad.tanh(ad.linear(h, w["visual.w2"], w["visual.b2"]))


def text_first(w: dict[str, Tensor], captions: np.ndarray) -> Tensor:
    return ad.embed_mean(w["text.embed"], captions)


def text_top(w: dict[str, Tensor], pooled) -> Tensor:
    return ad.tanh(ad.linear(pooled, w["text.w"], w["text.b"]))


def visual_hidden(w: dict[str, Tensor], images) -> Tensor:
    return visual_top(w, visual_first(w, images))


def text_hidden(w: dict[str, Tensor], captions: np.ndarray) -> Tensor:
    return text_top(w, text_first(w, captions))


def project_visual(w: dict[str, Tensor], h) -> Tensor:
    """Unit-norm embeddings from first-layer image features."""
    return ad.l2_normalize(ad.matmul(visual_top(w, h), w["cross.proj_v"]))


def project_text(w: dict[str, Tensor], pooled) -> Tensor:
    """Unit-norm embeddings from pooled token embeddings."""
    return ad.l2_normalize(ad.matmul(text_top(w, pooled), w["cross.proj_t"]))


def embed_visual(model: DualEncoder, images, weights: dict[str, Tensor] | None = None) -> Tensor:
    """Unit-norm image embeddings, N × d_e."""
    images = _check_images(model, images)
    w = model.weights() if weights is None else weights
    return project_visual(w, visual_first(w, images))


def embed_text(model: DualEncoder, captions, weights: dict[str, Tensor] | None = None) -> Tensor:
    """Unit-norm caption embeddings, N × d_e (mean-pooled, so token order is ignored)."""
    captions = _check_captions(model, captions)
    w = model.weights() if weights is None else weights
    return project_text(w, text_first(w, captions))


def similarity_matrix(V, T) -> Tensor:
    V, T = ad.as_tensor(V), ad.as_tensor(T)
    if V.ndim != 2 or T.ndim != 2 or V.shape[1] != T.shape[1]:
        raise DimensionError(f"similarity_matrix: embedding shapes {V.shape} and {T.shape} differ in d_e")
    return ad.matmul(V, ad.transpose(T))


def contrastive_terms(V, T, tau) -> Tensor:
    """Per-pair loss ``½(CE_row_i + CE_col_i)`` with diagonal targets; length N."""
    V, T = ad.as_tensor(V), ad.as_tensor(T)
    if V.shape[0] != T.shape[0] or V.shape[0] < 1:
        raise DimensionError(f"contrastive_loss: need matching nonempty batches, got {V.shape} and {T.shape}")
    tau = ad.as_tensor(tau)
    if not np.all(tau.data > 0):
        raise ParameterError(f"contrastive_loss: temperature must be > 0, got {tau.data}")
    logits = similarity_matrix(V, T) / tau
    rows = ad.diag(ad.log_softmax(logits))
    cols = ad.diag(ad.log_softmax(ad.transpose(logits)))
    return (rows + cols) * -0.5


def contrastive_loss(V, T, tau) -> Tensor:
    """Symmetric InfoNCE: mean over pairs of the image→text and text→image cross-entropies."""
    return ad.mean(contrastive_terms(V, T, tau))


def encode_pairs(model: DualEncoder, images, captions, weights=None) -> tuple[Tensor, Tensor]:
    w = model.weights() if weights is None else weights
    return embed_visual(model, images, w), embed_text(model, captions, w)


def task_loss(model: DualEncoder, images, captions, weights=None) -> Tensor:
    w = model.weights() if weights is None else weights
    V, T = encode_pairs(model, images, captions, w)
    return contrastive_loss(V, T, temperature(w))
