"""Sequential training over a task stream under one of five strategies.

Strategies
----------
naive         plain contrastive fine-tuning
ewc_standard  whole-model Fisher, one fixed lambda
replay        10% diversity buffer, mixed into every batch
l2            weight decay toward the previous task's weights
ours          grouped Fisher with adaptive lambdas, consistency loss, adapters
"""

from __future__ import annotations

import io
import json
import logging
import time
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import adcore as ad
from .adapt import AdapterSpec, attach_adapters, freeze_hierarchy, merge_adapters
from .encoder import (
    AdapterPair,
    DualEncoder,
    TEXT_FIRST,
    VISUAL_FIRST,
    ModelConfig,
    contrastive_loss,
    embed_text,
    embed_visual,
    project_text,
    project_visual,
    temperature,
    text_first,
    visual_first,
)
from .errors import InputError, NumericError, ParameterError
from .metrics import retrieval_accuracy
from .regularize import (
    SINGLE_GROUP,
    ConsolidationRecord,
    EncoderSnapshot,
    EWCPenalty,
    FisherEstimate,
    adaptive_lambdas,
    combined_loss,
    probe_consistency,
    estimate_fisher,
    make_snapshot,
)
from .taskgen import ReplayBuffer, Task, TaskData, mix_batches, update_buffer

log = logging.getLogger(__name__)

STRATEGIES = ("naive", "ewc_standard", "replay", "l2", "ours")
MAGIC = b"MODALANCHOR/1\n"


# Tuned on the default stream.  EWC strengths are far below the generic
# default because lambda * F_max must stay under 1/lr for plain SGD to remain
# stable, and the adapter scale alpha/r = 2 is what lets rank-7 updates keep
# pace with full fine-tuning.
TUNED = {
    "ewc_standard": {"lambda_base": 1.0},
    "ours": {"lambda_base": 0.1, "beta": 30.0, "adapters": AdapterSpec(rank=7, alpha=14.0)},
}


@dataclass(frozen=True)
class Strategy:
    name: str
    lambda_base: float = 100.0
    beta: float = 1.0
    replay_ratio: float = 0.3
    weight_decay: float = 1.0
    adapters: AdapterSpec | None = field(default_factory=AdapterSpec)
    adapter_start: int = 2  # 1-based task index at which 'ours' attaches adapters

    def __post_init__(self):
        if self.name not in STRATEGIES:
            raise ParameterError(f"unknown strategy {self.name!r}; expected one of {STRATEGIES}")
        for knob in ("lambda_base", "beta", "weight_decay"):
            if getattr(self, knob) < 0:
                raise ParameterError(f"strategy.{knob} must be >= 0, got {getattr(self, knob)}")
        if not 0.0 <= self.replay_ratio <= 1.0:
            raise ParameterError(f"strategy.replay_ratio must lie in [0, 1], got {self.replay_ratio}")

    @property
    def uses_ewc(self) -> bool:
        return self.name in ("ewc_standard", "ours") and self.lambda_base > 0

    @property
    def uses_consistency(self) -> bool:
        return self.name == "ours" and self.beta > 0

    @property
    def uses_replay(self) -> bool:
        return self.name == "replay" and self.replay_ratio > 0

    @property
    def uses_l2(self) -> bool:
        return self.name == "l2" and self.weight_decay > 0

    def uses_adapters(self, task_number: int) -> bool:
        return self.name == "ours" and self.adapters is not None and task_number >= self.adapter_start

    @classmethod
    def default(cls, name: str) -> Strategy:
        """The tuned configuration for ``name`` on the default synthetic stream."""
        if name not in STRATEGIES:
            raise ParameterError(f"unknown strategy {name!r}; expected one of {STRATEGIES}")
        return cls(name, **TUNED.get(name, {}))

    def zeroed(self) -> Strategy:
        """Same strategy with every regulariser switched off."""
        return replace(self, lambda_base=0.0, beta=0.0, replay_ratio=0.0, weight_decay=0.0, adapters=None)

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.adapters is not None:
            d["adapters"]["targets"] = list(self.adapters.targets)
        return d


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 32
    lr: float = 5e-3
    n_fisher: int = 200
    probe_size: int = 64
    eval_batch: int = 32

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.n_fisher < 1 or self.probe_size < 1:
            raise ParameterError("epochs, batch_size, n_fisher and probe_size must be >= 1")
        if not self.lr > 0:
            raise ParameterError(f"lr must be > 0, got {self.lr}")


@dataclass
class History:
    records: list[ConsolidationRecord] = field(default_factory=list)
    snapshots: list[EncoderSnapshot] = field(default_factory=list)
    buffer: ReplayBuffer = field(default_factory=ReplayBuffer)
    anchor: dict[str, np.ndarray] | None = None


@dataclass
class LossLog:
    total: list[float] = field(default_factory=list)
    task: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.total)


@dataclass
class RunArtifacts:
    strategy: Strategy
    seed: int
    model_config: ModelConfig
    train_config: TrainConfig
    task_ids: list[str]
    epsilons: list[float]
    R: np.ndarray
    baseline: np.ndarray
    loss_logs: list[LossLog] = field(default_factory=list)
    history: History = field(default_factory=History)
    wallclock: list[float] = field(default_factory=list)
    model: DualEncoder | None = None
    completed: int = 0
    config_echo: dict = field(default_factory=dict)

    @property
    def records(self) -> list[ConsolidationRecord]:
        return self.history.records

    @property
    def snapshots(self) -> list[EncoderSnapshot]:
        return self.history.snapshots

    def violations(self) -> list[str]:
        """Tasks whose final accuracy falls below their floor epsilon."""
        if self.completed == 0:
            return []
        final = self.R[self.completed - 1]
        return [t for t, acc, eps in zip(self.task_ids, final, self.epsilons) if acc < eps]


def _seeds(seed: int) -> dict[str, np.random.Generator | int]:
    shuffle, replay, probe, adapters = np.random.SeedSequence(seed).spawn(4)
    return {
        "shuffle": np.random.default_rng(shuffle),
        "replay": np.random.default_rng(replay),
        "probe": np.random.default_rng(probe),
        "adapters": int(adapters.generate_state(1)[0]),
    }


@dataclass
class _Probe:
    """Concatenated snapshot probes, with first-layer features cached while those layers are frozen."""

    images: np.ndarray
    captions: np.ndarray
    visual: ad.Tensor | None = None
    text: ad.Tensor | None = None

    @classmethod
    def build(cls, model: DualEncoder, snapshots) -> _Probe:
        probe = cls(
            np.concatenate([s.probe_images for s in snapshots]),
            np.concatenate([s.probe_captions for s in snapshots]),
        )
        first = VISUAL_FIRST + TEXT_FIRST
        params = model.params
        if not any(params.trainable[n] or n in model.adapters for n in first):
            w = model.weights()
            probe.visual = visual_first(w, probe.images)
            probe.text = text_first(w, probe.captions)
        return probe


def _objective(
    model: DualEncoder,
    batch: TaskData,
    strategy: Strategy,
    history: History,
    weights: dict,
    probe: _Probe | None,
    penalty: EWCPenalty | None = None,
):
    snapshots = history.snapshots if strategy.uses_consistency else []
    if snapshots and probe.visual is not None:
        V = project_visual(weights, ad.concat([visual_first(weights, batch.images), probe.visual]))
        T = project_text(weights, ad.concat([text_first(weights, batch.captions), probe.text]))
    elif snapshots:
        V = embed_visual(model, np.concatenate([batch.images, probe.images]), weights)
        T = embed_text(model, np.concatenate([batch.captions, probe.captions]), weights)
    else:
        V = embed_visual(model, batch.images, weights)
        T = embed_text(model, batch.captions, weights)
    b = len(batch)
    if snapshots:
        task = contrastive_loss(V[:b], T[:b], temperature(weights))
        terms = [probe_consistency(V, T, b, [s.old_similarity for s in snapshots])]
        snapshots = snapshots[:1]  # the fused term already averages over all snapshots
    else:
        task = contrastive_loss(V, T, temperature(weights))
        terms = []
    records = history.records if strategy.uses_ewc else []
    total = combined_loss(task, weights, records, snapshots, strategy.beta, consistency=terms, penalty=penalty)
    return total, task, terms


def train_task(
    model: DualEncoder,
    task: Task,
    strategy: Strategy,
    history: History,
    config: TrainConfig,
    rng: np.random.Generator,
    replay_rng: np.random.Generator | None = None,
) -> tuple[DualEncoder, LossLog]:
    """Run ``config.epochs`` passes of minibatch gradient descent on one task."""
    data = task.train
    n = len(data)
    bsz = config.batch_size
    replay_rng = replay_rng or np.random.default_rng(0)
    probe = None
    if strategy.uses_consistency and history.snapshots:
        probe = _Probe.build(model, history.snapshots)
    penalty = None
    if strategy.uses_ewc and history.records:
        params = model.params
        moving = set(params.names(trainable_only=True)) | set(model.adapters)
        penalty = EWCPenalty(history.records).fixing(
            {n: params[n] for n in model.base_names() if n not in moving}
        )
    anchor = history.anchor if strategy.uses_l2 else None
    decay = strategy.weight_decay if anchor is not None else 0.0
    logbook = LossLog()
    step = 0
    for _epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, bsz):
            batch = data[order[start : start + bsz]]
            if strategy.uses_replay:
                batch = mix_batches(batch, history.buffer, strategy.replay_ratio, replay_rng)
            leaves = model.params.leaves()
            weights = model.weights(leaves)
            total, task_term, terms = _objective(model, batch, strategy, history, weights, probe, penalty)
            if not np.isfinite(total.data):
                raise NumericError(
                    f"non-finite loss on task {task.spec.task_id} at step {step}: "
                    f"total={total.item()}, task={task_term.item()}, "
                    f"consistency={[t.item() for t in terms]}"
                )
            grads = ad.backward(total)
            ad.sgd_step(model.params, grads, config.lr, decay, anchor)
            logbook.total.append(total.item())
            logbook.task.append(task_term.item())
            step += 1
    return model, logbook


def consolidate(
    model: DualEncoder,
    task: Task,
    strategy: Strategy,
    config: TrainConfig,
    probe_rng: np.random.Generator | None = None,
) -> tuple[ConsolidationRecord | None, EncoderSnapshot]:
    """Anchor, Fisher and snapshot after a task; merges adapters first.

    Strategies without EWC get no record (``None``).
    """
    if model.adapters:
        merge_adapters(model)
    data = task.train
    record = None
    if strategy.uses_ewc:
        fisher = estimate_fisher(
            model, data.arrays(), config.n_fisher, batch_size=config.batch_size
        )
        if strategy.name == "ours":
            lambdas = adaptive_lambdas(fisher, strategy.lambda_base)
        else:
            fisher = fisher.regrouped(SINGLE_GROUP)
            lambdas = {SINGLE_GROUP: float(strategy.lambda_base)}
        record = ConsolidationRecord(model.params.snapshot(), fisher, lambdas, task.spec.task_id)
    probe_rng = probe_rng or np.random.default_rng(0)
    idx = np.sort(probe_rng.choice(len(data), size=min(config.probe_size, len(data)), replace=False))
    snapshot = make_snapshot(model, data.images[idx], data.captions[idx], task.spec.task_id)
    return record, snapshot


def evaluate_row(model: DualEncoder, tasks: Sequence[Task], batch: int) -> np.ndarray:
    return np.array([retrieval_accuracy(model, t.eval.images, t.eval.captions, batch) for t in tasks])


def run_sequence(
    tasks: Sequence[Task],
    strategy: Strategy,
    config: TrainConfig | None = None,
    seed: int = 0,
    model_config: ModelConfig | None = None,
) -> RunArtifacts:
    """Train on each task in turn, consolidating and filling one row of R per task.

    On failure the exception carries the partial run as ``exc.artifacts``.
    """
    if len(tasks) < 2:
        raise InputError(f"a stream needs at least 2 tasks, got {len(tasks)}")
    config = config or TrainConfig()
    model_config = replace(model_config or ModelConfig(), seed=seed)
    model = DualEncoder(model_config)
    streams = _seeds(seed)
    n = len(tasks)
    art = RunArtifacts(
        strategy=strategy,
        seed=seed,
        model_config=model_config,
        train_config=config,
        task_ids=[t.spec.task_id for t in tasks],
        epsilons=[t.spec.epsilon for t in tasks],
        R=np.zeros((n, n)),
        baseline=evaluate_row(model, tasks, config.eval_batch),
        model=model,
    )
    art.history.buffer = ReplayBuffer(seed=seed)
    try:
        for k, task in enumerate(tasks):
            started = time.perf_counter()
            if strategy.uses_adapters(k + 1):
                attach_adapters(model, strategy.adapters, seed=streams["adapters"] + k)
                freeze_hierarchy(model, "all-but-adapters")
            _, logbook = train_task(
                model, task, strategy, art.history, config, streams["shuffle"], streams["replay"]
            )
            record, snapshot = consolidate(model, task, strategy, config, streams["probe"])
            if record is not None:
                art.history.records.append(record)
            art.history.snapshots.append(snapshot)
            if strategy.name == "replay":
                update_buffer(art.history.buffer, task.train)
            if strategy.name == "l2":
                art.history.anchor = model.params.snapshot()
            art.wallclock.append(time.perf_counter() - started)
            art.loss_logs.append(logbook)
            art.R[k] = evaluate_row(model, tasks, config.eval_batch)
            art.completed = k + 1
            log.debug("%s seed=%d task %s: R=%s", strategy.name, seed, task.spec.task_id, art.R[k])
    except Exception as exc:
        exc.artifacts = art  # type: ignore[attr-defined]
        raise
    return art


# checkpoints ------------------------------------------------------------------------


def _put(arrays: dict, prefix: str, values: dict[str, np.ndarray]) -> list[str]:
    for name, v in values.items():
        arrays[f"{prefix}/{name}"] = v
    return list(values)


def save_checkpoint(path: str | Path, art: RunArtifacts, config_echo: dict | None = None) -> None:
    """Write ``MODALANCHOR/1`` followed by an npz archive of arrays and JSON metadata."""
    model = art.model
    arrays: dict[str, np.ndarray] = {"R": art.R, "baseline": art.baseline}
    meta = {
        "config": config_echo if config_echo is not None else art.config_echo,
        "strategy": art.strategy.to_dict(),
        "seed": art.seed,
        "model_config": art.model_config.to_dict(),
        "train_config": asdict(art.train_config),
        "task_ids": art.task_ids,
        "epsilons": art.epsilons,
        "completed": art.completed,
        "wallclock": art.wallclock,
        "loss_logs": [{"total": lg.total, "task": lg.task} for lg in art.loss_logs],
        "params": _put(arrays, "params", model.params.values),
        "groups": model.params.groups,
        "trainable": model.params.trainable,
        "adapters": {h: asdict(a) for h, a in model.adapters.items()},
        "saved_mask": model.saved_mask,
        "records": [],
        "snapshots": [],
    }
    for i, rec in enumerate(art.history.records):
        meta["records"].append(
            {
                "task_id": rec.task_id,
                "lambdas": rec.lambdas,
                "groups": rec.fisher.groups,
                "sample_count": rec.fisher.sample_count,
                "anchor": _put(arrays, f"records/{i}/anchor", rec.anchor),
                "fisher": _put(arrays, f"records/{i}/fisher", rec.fisher.values),
            }
        )
    for i, snap in enumerate(art.history.snapshots):
        meta["snapshots"].append(
            {
                "task_id": snap.task_id,
                "groups": snap.model.params.groups,
                "params": _put(arrays, f"snapshots/{i}/params", snap.model.params.values),
            }
        )
        arrays[f"snapshots/{i}/probe_images"] = snap.probe_images
        arrays[f"snapshots/{i}/probe_captions"] = snap.probe_captions
        arrays[f"snapshots/{i}/old_similarity"] = snap.old_similarity
    buf = art.history.buffer
    if len(buf):
        arrays["buffer/images"] = np.stack(buf.images)
        arrays["buffer/captions"] = np.stack(buf.captions)
    meta["buffer"] = {"fraction": buf.fraction, "seed": buf.seed, "sources": buf.sources}
    if art.history.anchor is not None:
        meta["anchor"] = _put(arrays, "anchor", art.history.anchor)
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    payload = io.BytesIO()
    np.savez(payload, **arrays)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(payload.getvalue())


def _store(values: dict[str, np.ndarray], groups: dict[str, str], trainable: dict[str, bool] | None = None):
    store = ad.ParamStore()
    for name, v in values.items():
        store.add(name, v, groups[name], True if trainable is None else trainable[name])
    return store


def load_checkpoint(path: str | Path) -> RunArtifacts:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise InputError(f"{path}: not a MODALANCHOR/1 checkpoint")
    with np.load(io.BytesIO(raw[len(MAGIC) :])) as npz:
        arrays = {k: npz[k] for k in npz.files}
    meta = json.loads(arrays.pop("meta").tobytes().decode("utf-8"))
    mc = ModelConfig(**meta["model_config"])
    sd = dict(meta["strategy"])
    if sd.get("adapters") is not None:
        sd["adapters"] = AdapterSpec(**{**sd["adapters"], "targets": tuple(sd["adapters"]["targets"])})
    strategy = Strategy(**sd)
    model = DualEncoder(
        mc,
        _store({n: arrays[f"params/{n}"] for n in meta["params"]}, meta["groups"], meta["trainable"]),
        {h: AdapterPair(**a) for h, a in meta["adapters"].items()},
        meta["saved_mask"],
    )
    history = History()
    for i, r in enumerate(meta["records"]):
        fisher = FisherEstimate({n: arrays[f"records/{i}/fisher/{n}"] for n in r["fisher"]}, r["groups"], r["sample_count"])
        anchor = {n: arrays[f"records/{i}/anchor/{n}"] for n in r["anchor"]}
        history.records.append(ConsolidationRecord(anchor, fisher, r["lambdas"], r["task_id"]))
    for i, s in enumerate(meta["snapshots"]):
        snap_model = DualEncoder(mc, _store({n: arrays[f"snapshots/{i}/params/{n}"] for n in s["params"]}, s["groups"]))
        history.snapshots.append(
            EncoderSnapshot(
                snap_model,
                arrays[f"snapshots/{i}/probe_images"],
                arrays[f"snapshots/{i}/probe_captions"],
                s["task_id"],
                arrays[f"snapshots/{i}/old_similarity"],
            )
        )
    b = meta["buffer"]
    history.buffer = ReplayBuffer(fraction=b["fraction"], seed=b["seed"], sources=list(b["sources"]))
    if b["sources"]:
        history.buffer.images = list(arrays["buffer/images"])
        history.buffer.captions = list(arrays["buffer/captions"])
    if "anchor" in meta:
        history.anchor = {n: arrays[f"anchor/{n}"] for n in meta["anchor"]}
    return RunArtifacts(
        strategy=strategy,
        seed=meta["seed"],
        model_config=mc,
        train_config=TrainConfig(**meta["train_config"]),
        task_ids=meta["task_ids"],
        epsilons=meta["epsilons"],
        R=arrays["R"],
        baseline=arrays["baseline"],
        loss_logs=[LossLog(lg["total"], lg["task"]) for lg in meta["loss_logs"]],
        history=history,
        wallclock=meta["wallclock"],
        model=model,
        completed=meta["completed"],
        config_echo=meta["config"],
    )

