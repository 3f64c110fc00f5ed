"""Synthetic image/caption task streams, pair-file I/O and the replay buffer.

A stream shares one set of concept centres across tasks.  Each successive
task rotates the image feature space by a fixed angle in a fresh random set
of planes and moves the caption vocabulary band by ``token_shift``; with both
shifts at zero every task is drawn from the same distribution.
"""

from __future__ import annotations

import json
import math
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .encoder import ModelConfig, Pair
from .errors import InputError, ParameterError, ParseError, ValidationError

DEFAULT_TRAIN_SIZES = (2000, 1600, 2400, 3000)
TASK_LABELS = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    n_train: int
    n_eval: int
    n_concepts: int = 8
    rotation: float = 0.0
    token_offset: int = 0
    band_width: int = 64
    noise: float = 0.3
    seed: int = 0
    epsilon: float = 0.5

    def __post_init__(self):
        if self.n_train < 1 or self.n_eval < 1:
            raise ParameterError(f"task {self.task_id}: n_train and n_eval must be >= 1")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ParameterError(f"task {self.task_id}: epsilon must lie in [0, 1], got {self.epsilon}")
        if self.n_concepts >= self.band_width:
            raise ParameterError(
                f"task {self.task_id}: n_concepts={self.n_concepts} leaves no distractors in a band of {self.band_width}"
            )


@dataclass(frozen=True)
class StreamTemplate:
    """Per-stream generation knobs; sizes cycle if the stream is longer."""

    n_train: tuple[int, ...] = DEFAULT_TRAIN_SIZES
    n_eval: int = 512
    n_concepts: int = 8
    rotation: float = math.pi / 3
    token_shift: int = 64
    band_width: int = 64
    noise: float = 0.3
    epsilon: float = 0.5

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n_train"] = list(self.n_train)
        return d


@dataclass
class TaskData:
    task_id: str
    images: np.ndarray
    captions: np.ndarray

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, index) -> TaskData:
        return TaskData(self.task_id, self.images[index], self.captions[index])

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return self.images, self.captions

    def to_pairs(self) -> list[Pair]:
        return [Pair(self.images[i].copy(), self.captions[i].copy(), self.task_id) for i in range(len(self))]

    @classmethod
    def from_pairs(cls, pairs: Sequence[Pair], task_id: str | None = None, d_v: int = 0, max_len: int = 0) -> TaskData:
        if not pairs:
            return cls(task_id or "", np.zeros((0, d_v)), np.zeros((0, max_len), dtype=np.int64))
        return cls(
            task_id if task_id is not None else pairs[0].task_id,
            np.stack([np.asarray(p.image, dtype=np.float64) for p in pairs]),
            np.stack([np.asarray(p.caption, dtype=np.int64) for p in pairs]),
        )


@dataclass
class Task:
    spec: TaskSpec
    train: TaskData
    eval: TaskData


def random_rotation(rng: np.random.Generator, dim: int, angle: float) -> np.ndarray:
    """Orthogonal matrix turning every vector by exactly ``angle`` (even ``dim``).

    Built as ``Q · blockdiag(R(angle), ...) · Qᵀ`` with a random orthonormal ``Q``.
    """
    q, r = np.linalg.qr(rng.normal(size=(dim, dim)))
    q = q * np.sign(np.diag(r))
    block = np.eye(dim)
    c, s = math.cos(angle), math.sin(angle)
    for k in range(0, dim - 1, 2):
        block[k : k + 2, k : k + 2] = [[c, -s], [s, c]]
    return q @ block @ q.T


def _materialize(
    spec: TaskSpec, n: int, centers: np.ndarray, basis: np.ndarray, model: ModelConfig, rng: np.random.Generator
) -> TaskData:
    concepts = rng.integers(0, spec.n_concepts, size=n)
    images = (centers[concepts] + spec.noise * rng.normal(size=(n, centers.shape[1]))) @ basis.T
    distractors = spec.token_offset + spec.n_concepts + rng.integers(
        0, spec.band_width - spec.n_concepts, size=(n, model.max_len)
    )
    captions = distractors % model.vocab
    slot = rng.integers(0, model.max_len, size=n)
    captions[np.arange(n), slot] = (spec.token_offset + concepts) % model.vocab
    return TaskData(spec.task_id, images, captions.astype(np.int64))


def generate_task_stream(
    seed: int,
    n_tasks: int = 4,
    template: StreamTemplate | None = None,
    model: ModelConfig | None = None,
) -> list[Task]:
    """Materialise ``n_tasks`` tasks; the output is a pure function of the arguments."""
    template = template or StreamTemplate()
    model = model or ModelConfig()
    if n_tasks < 2:
        raise ParameterError(f"a stream needs at least 2 tasks, got {n_tasks}")
    if template.band_width > model.vocab:
        raise ParameterError(f"band width {template.band_width} exceeds vocabulary {model.vocab}")
    if template.n_concepts > template.band_width:
        raise ParameterError(
            f"n_concepts={template.n_concepts} exceeds the vocabulary band width {template.band_width}"
        )
    root = np.random.SeedSequence(seed)
    stream_seq, *task_seqs = root.spawn(n_tasks + 1)
    stream_rng = np.random.default_rng(stream_seq)
    centers = stream_rng.normal(size=(template.n_concepts, model.d_v))
    basis = np.eye(model.d_v)
    tasks = []
    for k, seq in enumerate(task_seqs):
        if k > 0:
            basis = random_rotation(stream_rng, model.d_v, template.rotation) @ basis
        task_seed = int(seq.generate_state(1)[0])
        spec = TaskSpec(
            task_id=TASK_LABELS[k % len(TASK_LABELS)] + ("" if k < len(TASK_LABELS) else str(k)),
            n_train=template.n_train[k % len(template.n_train)],
            n_eval=template.n_eval,
            n_concepts=template.n_concepts,
            rotation=template.rotation * k,
            token_offset=(template.token_shift * k) % model.vocab,
            band_width=template.band_width,
            noise=template.noise,
            seed=task_seed,
            epsilon=template.epsilon,
        )
        rng = np.random.default_rng(task_seed)
        train = _materialize(spec, spec.n_train, centers, basis, model, rng)
        evals = _materialize(spec, spec.n_eval, centers, basis, model, rng)
        tasks.append(Task(spec, train, evals))
    return tasks


def write_manifest(path: str | Path, tasks: Sequence[Task], seed: int, template: StreamTemplate | None = None) -> None:
    doc = {
        "seed": seed,
        "template": None if template is None else template.to_dict(),
        "tasks": [asdict(t.spec) for t in tasks],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


# pair files ------------------------------------------------------------------------


def save_pairs(path: str | Path, pairs: Iterable[Pair]) -> None:
    """JSON Lines writer; keys are emitted as task, image, caption."""
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            row = {
                "task": str(p.task_id),
                "image": [float(x) for x in np.asarray(p.image).ravel()],
                "caption": [int(t) for t in np.asarray(p.caption).ravel()],
            }
            fh.write(json.dumps(row) + "\n")


def load_pairs(path: str | Path, config: ModelConfig | None = None, task_id: str | None = None) -> list[Pair]:
    """Read and validate a JSON Lines pair file.

    Captions shorter than ``max_len`` are padded with token 0.  ``task_id``
    overrides the per-line task label when given.
    """
    config = config or ModelConfig()
    pairs: list[Pair] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", lineno) from None
            if not isinstance(row, dict) or not {"task", "image", "caption"} <= row.keys():
                raise ParseError("expected an object with keys task, image, caption", lineno)
            try:
                image = np.asarray(row["image"], dtype=np.float64)
                caption = np.asarray(row["caption"])
            except (TypeError, ValueError):
                raise ParseError("image/caption must be numeric arrays", lineno) from None
            if image.shape != (config.d_v,):
                raise ValidationError(f"image has length {image.size}, expected {config.d_v}", lineno, ["image"])
            if caption.ndim != 1 or caption.size > config.max_len:
                raise ValidationError(f"caption longer than max_len={config.max_len}", lineno, ["caption"])
            if caption.size and not np.issubdtype(caption.dtype, np.integer):
                raise ValidationError("caption tokens must be integers", lineno, ["caption"])
            if caption.size and (caption.min() < 0 or caption.max() >= config.vocab):
                raise ValidationError(f"caption token outside [0, {config.vocab})", lineno, ["caption"])
            padded = np.zeros(config.max_len, dtype=np.int64)
            padded[: caption.size] = caption
            pairs.append(Pair(image, padded, str(row["task"]) if task_id is None else task_id))
    return pairs


# replay buffer -----------------------------------------------------------------------


def greedy_k_center(points: np.ndarray, k: int) -> list[int]:
    """Farthest-point selection starting from the point nearest the centroid.

    Ties go to the lower index, so the result is deterministic.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    k = min(k, n)
    if k <= 0:
        return []
    first = int(np.argmin(((points - points.mean(axis=0)) ** 2).sum(axis=1)))
    chosen = [first]
    dist = ((points - points[first]) ** 2).sum(axis=1)
    for _ in range(k - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, ((points - points[nxt]) ** 2).sum(axis=1))
    return chosen


@dataclass
class ReplayBuffer:
    fraction: float = 0.10
    seed: int = 0
    images: list[np.ndarray] = field(default_factory=list)
    captions: list[np.ndarray] = field(default_factory=list)
    sources: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.sources)

    def count(self, task_id: str) -> int:
        return sum(1 for s in self.sources if s == task_id)


def update_buffer(buffer: ReplayBuffer, task: TaskData) -> ReplayBuffer:
    """Store ``ceil(fraction · n)`` diverse pairs of a finished task."""
    if len(task) == 0:
        raise InputError("update_buffer: task data is empty")
    k = math.ceil(round(buffer.fraction * len(task), 9))
    for i in greedy_k_center(task.images, k):
        buffer.images.append(task.images[i].copy())
        buffer.captions.append(task.captions[i].copy())
        buffer.sources.append(task.task_id)
    return buffer


def mix_batches(
    current: TaskData, buffer: ReplayBuffer | None, ratio: float, rng: np.random.Generator
) -> TaskData:
    """Replace the tail of a batch with ``floor(ratio · B)`` pairs drawn from the buffer."""
    if not 0.0 <= ratio <= 1.0:
        raise ParameterError(f"replay ratio must lie in [0, 1], got {ratio}")
    n_replay = int(math.floor(ratio * len(current)))
    if buffer is None or len(buffer) == 0 or n_replay == 0:
        return current
    idx = rng.choice(len(buffer), size=n_replay, replace=n_replay > len(buffer))
    keep = len(current) - n_replay
    return TaskData(
        current.task_id,
        np.concatenate([current.images[:keep], np.stack([buffer.images[i] for i in idx])]),
        np.concatenate([current.captions[:keep], np.stack([buffer.captions[i] for i in idx])]),
    )


def with_shift(template: StreamTemplate, rotation: float | None = None, token_shift: int | None = None) -> StreamTemplate:
    changes = {}
    if rotation is not None:
        changes["rotation"] = rotation
    if token_shift is not None:
        changes["token_shift"] = token_shift
    return replace(template, **changes)
