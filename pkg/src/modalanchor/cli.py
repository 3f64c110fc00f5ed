"""Command-line runner: ``run`` a strategy × seed matrix, ``report`` on it, ``gradcheck``.

Configuration is a flat ``key = value`` file with dotted sections::

    strategies = naive, ours
    seeds = 0, 1
    trainer.lr = 0.005
    stream.rotation = 1.0472
    strategy.ours.beta = 30

Exit codes: 0 ok, 2 config error, 3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import metrics as M
from .adapt import AdapterSpec
from .checks import TOLERANCE, failures, run_gradcheck
from .encoder import ModelConfig, embed_text, embed_visual, init_params
from .errors import InputError, ModalAnchorError, NumericError, ValidationError
from .taskgen import StreamTemplate, Task, TaskData, TaskSpec, generate_task_stream, load_pairs, write_manifest
from .trainer import STRATEGIES, RunArtifacts, Strategy, TrainConfig, load_checkpoint, run_sequence, save_checkpoint

log = logging.getLogger("modalanchor")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

METRIC_COLUMNS = ("strategy", "seed", "bwt", "fwt", "forgetting", "avg_acc", "drift_cos", "retention", "wallclock_ratio")
SUMMARY_METRICS = ("forgetting", "bwt", "fwt", "avg_acc")
PLOT_FILES = ("loss_curves.csv", "fisher_hist.csv", "pca.csv", "cosmatrix.csv")
CHECKPOINT = "checkpoint.ma"
TIMING_MODES = ("separate", "inline")


def fmt(x) -> str:
    """Fixed six-decimal, locale-independent; ``None`` becomes an empty field."""
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return f"{float(x):.6f}"


# configuration --------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    stream: StreamTemplate = field(default_factory=StreamTemplate)
    n_tasks: int = 4
    data_train: tuple[str, ...] = ()
    data_eval: tuple[str, ...] = ()
    strategies: tuple[str, ...] = ("naive", "ewc_standard", "replay", "ours")
    seeds: tuple[int, ...] = (0,)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    strategy_params: dict[str, Strategy] = field(default_factory=dict)
    out: str = "runs"
    timing: str = "separate"

    def strategy(self, name: str) -> Strategy:
        return self.strategy_params.get(name) or Strategy.default(name)

    def resolved(self) -> dict:
        """Canonical plain-data form; its hash tags every artifact."""
        return {
            "model": self.model.to_dict(),
            "stream": self.stream.to_dict(),
            "n_tasks": self.n_tasks,
            "data_train": list(self.data_train),
            "data_eval": list(self.data_eval),
            "strategies": list(self.strategies),
            "seeds": list(self.seeds),
            "trainer": asdict(self.trainer),
            "strategy_params": {n: self.strategy(n).to_dict() for n in self.strategies},
            "timing": self.timing,
        }

    def digest(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def parse_pairs(text: str, source: str = "<config>") -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; later keys win."""
    out: dict[str, str] = {}
    problems = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            problems.append(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
            continue
        out[key.strip()] = value.strip()
    if problems:
        raise ValidationError("; ".join(problems), fields=[p.split(":")[1] for p in problems])
    return out


def _coerce(value: str, like):
    if isinstance(like, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        items = [v.strip() for v in value.split(",") if v.strip()]
        kind = type(like[0]) if like else str
        return tuple(kind(v) for v in items)
    return value


def _set_field(obj, name: str, value: str, key: str, problems: list[str]):
    known = {f.name: f for f in fields(obj)}
    if name not in known:
        problems.append(f"{key}: unknown key")
        return obj
    try:
        return replace(obj, **{name: _coerce(value, getattr(obj, name))})
    except (ValueError, ModalAnchorError) as exc:
        problems.append(f"{key}: {exc}")
        return obj


def build_config(pairs: dict[str, str], env: dict[str, str] | None = None) -> ExperimentConfig:
    """Validate every key; all problems are reported together."""
    env = os.environ if env is None else env
    cfg = ExperimentConfig()
    problems: list[str] = []
    bad: list[str] = []
    strategy_keys: dict[str, dict[str, str]] = {}
    for key, value in pairs.items():
        before = len(problems)
        section, _, rest = key.partition(".")
        if key == "strategies":
            cfg.strategies = tuple(v.strip() for v in value.split(",") if v.strip())
        elif key in ("seeds", "seed"):
            try:
                cfg.seeds = tuple(int(v) for v in value.split(",") if v.strip())
            except ValueError:
                problems.append(f"{key}: expected integers, got {value!r}")
        elif key == "out":
            cfg.out = value
        elif key == "timing":
            cfg.timing = value
        elif key == "stream.n_tasks":
            try:
                cfg.n_tasks = int(value)
            except ValueError:
                problems.append(f"{key}: expected an integer, got {value!r}")
        elif key in ("data.train", "data.eval"):
            paths = tuple(v.strip() for v in value.split(",") if v.strip())
            if key == "data.train":
                cfg.data_train = paths
            else:
                cfg.data_eval = paths
        elif section == "model" and rest != "seed":
            cfg.model = _set_field(cfg.model, rest, value, key, problems)
        elif section == "stream":
            cfg.stream = _set_field(cfg.stream, rest, value, key, problems)
        elif section == "trainer":
            cfg.trainer = _set_field(cfg.trainer, rest, value, key, problems)
        elif section == "strategy" and "." in rest:
            name, _, knob = rest.partition(".")
            strategy_keys.setdefault(name, {})[knob] = value
        else:
            problems.append(f"{key}: unknown key")
        if len(problems) > before:
            bad.append(key)
    if "MODALANCHOR_SEED" in env:
        try:
            cfg.seeds = (int(env["MODALANCHOR_SEED"]),)
        except ValueError:
            problems.append(f"MODALANCHOR_SEED: expected an integer, got {env['MODALANCHOR_SEED']!r}")
            bad.append("MODALANCHOR_SEED")
    if not cfg.strategies:
        problems.append("strategies: at least one strategy is required")
        bad.append("strategies")
    for name in cfg.strategies:
        if name not in STRATEGIES:
            problems.append(f"strategies: unknown strategy {name!r}; expected one of {', '.join(STRATEGIES)}")
            bad.append("strategies")
    if not cfg.seeds:
        problems.append("seeds: at least one seed is required")
        bad.append("seeds")
    if cfg.timing not in TIMING_MODES:
        problems.append(f"timing: expected one of {TIMING_MODES}, got {cfg.timing!r}")
        bad.append("timing")
    if len(cfg.data_train) != len(cfg.data_eval):
        problems.append("data.train/data.eval: need one eval file per train file")
        bad.append("data.eval")
    if cfg.data_train and len(cfg.data_train) < 2:
        problems.append("data.train: a stream needs at least 2 tasks")
        bad.append("data.train")
    if not cfg.data_train and cfg.n_tasks < 2:
        problems.append("stream.n_tasks: a stream needs at least 2 tasks")
        bad.append("stream.n_tasks")
    for name, knobs in strategy_keys.items():
        if name not in STRATEGIES:
            problems.append(f"strategy.{name}: unknown strategy")
            bad.append(f"strategy.{name}")
            continue
        strat = Strategy.default(name)
        for knob, value in knobs.items():
            key = f"strategy.{name}.{knob}"
            before = len(problems)
            if knob.startswith("adapters."):
                spec = strat.adapters or AdapterSpec()
                spec = _set_field(spec, knob.partition(".")[2], value, key, problems)
                if len(problems) == before:
                    strat = replace(strat, adapters=spec)
            elif knob == "adapters" and value.lower() in ("none", "off"):
                strat = replace(strat, adapters=None)
            else:
                strat = _set_field(strat, knob, value, key, problems)
            if len(problems) > before:
                bad.append(key)
        cfg.strategy_params[name] = strat
    if not problems:
        _check_adapters(cfg, problems, bad)
    if problems:
        raise ValidationError("invalid configuration:\n  " + "\n  ".join(problems), fields=bad)
    return cfg


def _check_adapters(cfg: ExperimentConfig, problems: list[str], bad: list[str]) -> None:
    """Adapter targets and ranks must fit the configured model."""
    shapes = {n: v.shape for n, v in init_params(cfg.model).values.items()}
    for name in cfg.strategies:
        spec = cfg.strategy(name).adapters
        if name != "ours" or spec is None:
            continue
        for host in spec.targets:
            shape = shapes.get(host)
            if shape is None or len(shape) != 2:
                key, why = "targets", f"{host!r} is not a weight matrix"
            elif spec.rank > min(shape):
                key, why = "rank", f"{spec.rank} exceeds min dimension of {host!r} {shape}"
            else:
                continue
            problems.append(f"strategy.{name}.adapters.{key}: {why}")
            if f"strategy.{name}.adapters.{key}" not in bad:
                bad.append(f"strategy.{name}.adapters.{key}")


def load_config(path: str | Path | None, overrides: list[str] = ()) -> ExperimentConfig:
    pairs = {}
    if path is not None:
        pairs.update(parse_pairs(Path(path).read_text(encoding="utf-8"), str(path)))
    pairs.update(parse_pairs("\n".join(overrides), "--set"))
    return build_config(pairs)


# streams and runs -----------------------------------------------------------------


def build_stream(cfg: ExperimentConfig, seed: int) -> list[Task]:
    if not cfg.data_train:
        return generate_task_stream(seed, cfg.n_tasks, cfg.stream, cfg.model)
    tasks = []
    for k, (train_path, eval_path) in enumerate(zip(cfg.data_train, cfg.data_eval)):
        label = chr(ord("A") + k)
        train = TaskData.from_pairs(load_pairs(train_path, cfg.model, label), label, cfg.model.d_v, cfg.model.max_len)
        evals = TaskData.from_pairs(load_pairs(eval_path, cfg.model, label), label, cfg.model.d_v, cfg.model.max_len)
        if not len(train) or not len(evals):
            raise InputError(f"task {label}: empty pair file")
        spec = TaskSpec(label, len(train), len(evals), cfg.stream.n_concepts, seed=seed, epsilon=cfg.stream.epsilon)
        tasks.append(Task(spec, train, evals))
    return tasks


def _write_csv(path: Path, header, rows, digest: str) -> None:
    buf = io.StringIO()
    buf.write(f"# config {digest}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([v if isinstance(v, str) else fmt(v) for v in row])
    path.write_text(buf.getvalue(), encoding="utf-8")


def read_csv(path: Path) -> tuple[str | None, list[dict[str, str]]]:
    lines = path.read_text(encoding="utf-8").splitlines()
    digest = None
    if lines and lines[0].startswith("# config "):
        digest = lines.pop(0)[len("# config ") :].strip()
    return digest, list(csv.DictReader(lines))


def run_metrics(art: RunArtifacts, tasks: list[Task] | None = None) -> dict:
    R = art.R
    drift, retention = None, None
    if art.snapshots and art.model is not None:
        first = tasks[0].eval if tasks else None
        drift, retention = M.alignment_drift(
            art.snapshots[0],
            art.model,
            None if first is None else first.images,
            None if first is None else first.captions,
            art.train_config.eval_batch,
        )
    return {
        "strategy": art.strategy.name,
        "seed": art.seed,
        "bwt": M.backward_transfer(R),
        "fwt": M.forward_transfer(R, art.baseline),
        "forgetting": M.forgetting_rate(R),
        "avg_acc": M.average_accuracy(R),
        "drift_cos": drift,
        "retention": retention,
    }


def write_plot_data(run_dir: Path, art: RunArtifacts, digest: str) -> None:
    rows = [(i, b, loss) for i, lg in enumerate(art.loss_logs) for b, loss in enumerate(lg.total)]
    _write_csv(run_dir / "loss_curves.csv", ("task", "batch", "loss"), [(art.task_ids[i], b, v) for i, b, v in rows], digest)
    hist_rows = []
    if art.records:
        left, counts = M.fisher_histogram(art.records[-1].fisher.flat())
        hist_rows = list(zip(left, (int(c) for c in counts)))
    _write_csv(run_dir / "fisher_hist.csv", ("bin_left", "count"), hist_rows, digest)
    pca_rows = []
    cos_rows = []
    if art.snapshots and art.model is not None:
        embeds = [embed_visual(art.model, s.probe_images).data for s in art.snapshots]
        labels = [s.task_id for s in art.snapshots for _ in range(len(s.probe_images))]
        all_embeds = np.concatenate(embeds)
        if len(all_embeds) >= 2:
            coords = M.pca_project(all_embeds, 2).coords
            pca_rows = [(t, c[0], c[1]) for t, c in zip(labels, coords)]
        first = art.snapshots[0]
        S = embed_visual(art.model, first.probe_images).data @ embed_text(art.model, first.probe_captions).data.T
        cos_rows = [(i, j, S[i, j]) for i in range(S.shape[0]) for j in range(S.shape[1])]
    _write_csv(run_dir / "pca.csv", ("task", "pc1", "pc2"), pca_rows, digest)
    _write_csv(run_dir / "cosmatrix.csv", ("i", "j", "value"), cos_rows, digest)


def _run_one(cfg: ExperimentConfig, name: str, seed: int, out: str) -> dict:
    """One run of the matrix; returns metric row plus bookkeeping."""
    digest = cfg.digest()
    run_dir = Path(out) / f"{name}_seed{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    tasks = build_stream(cfg, seed)
    if not cfg.data_train:
        write_manifest(run_dir / "stream.json", tasks, seed, cfg.stream)
    echo = {"hash": digest, "resolved": cfg.resolved()}
    try:
        art = run_sequence(tasks, cfg.strategy(name), cfg.trainer, seed, cfg.model)
    except Exception as exc:
        partial = getattr(exc, "artifacts", None)
        if partial is not None and partial.completed:
            save_checkpoint(run_dir / CHECKPOINT, partial, echo)
        raise
    art.config_echo = echo
    save_checkpoint(run_dir / CHECKPOINT, art, echo)
    write_plot_data(run_dir, art, digest)
    row = run_metrics(art, tasks)
    row["wallclock"] = float(sum(art.wallclock))
    row["violations"] = art.violations()
    # per-run copy; the ratio needs the naive run and lands in the matrix files
    _write_csv(run_dir / "metrics.csv", METRIC_COLUMNS, [[row.get(c) for c in METRIC_COLUMNS]], digest)
    return row


def _metric_rows(rows: list[dict], timing: str) -> list[list]:
    naive = {r["seed"]: r["wallclock"] for r in rows if r["strategy"] == "naive"}
    out = []
    for r in rows:
        ratio = None
        if timing == "inline" and r["seed"] in naive and naive[r["seed"]] > 0:
            ratio = r["wallclock"] / naive[r["seed"]]
        out.append([r[c] if c != "wallclock_ratio" else ratio for c in METRIC_COLUMNS])
    return out


def cmd_run(cfg: ExperimentConfig, out: str | None = None, jobs: int = 1) -> int:
    out_dir = Path(out or cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    digest = cfg.digest()
    (out_dir / "config.resolved.json").write_text(
        json.dumps({"hash": digest, "resolved": cfg.resolved()}, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    matrix = [(name, seed) for seed in cfg.seeds for name in cfg.strategies]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_one, cfg, n, s, str(out_dir)) for n, s in matrix]
            rows = [f.result() for f in futures]
    else:
        rows = [_run_one(cfg, n, s, str(out_dir)) for n, s in matrix]
    for r in rows:
        log.info("%s seed=%d forgetting=%.4f avg_acc=%.4f", r["strategy"], r["seed"], r["forgetting"], r["avg_acc"])
    _write_csv(out_dir / "metrics.csv", METRIC_COLUMNS, _metric_rows(rows, cfg.timing), digest)
    naive = {r["seed"]: r["wallclock"] for r in rows if r["strategy"] == "naive"}
    _write_csv(
        out_dir / "timing.csv",
        ("strategy", "seed", "wallclock_s", "wallclock_ratio"),
        [
            [r["strategy"], r["seed"], r["wallclock"], r["wallclock"] / naive[r["seed"]] if naive.get(r["seed"]) else None]
            for r in rows
        ],
        digest,
    )
    (out_dir / "summary.md").write_text(summary_table(rows), encoding="utf-8")
    return EXIT_OK


# report ---------------------------------------------------------------------------


def _stats(values: list[float]) -> tuple[float, float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.min()), float(arr.max())


def summary_table(rows: list[dict]) -> str:
    """Markdown table: one row per strategy, mean ± half-range per metric."""
    names = list(dict.fromkeys(r["strategy"] for r in rows))
    lines = [
        "| strategy | runs | " + " | ".join(SUMMARY_METRICS) + " |",
        "|---|---|" + "---|" * len(SUMMARY_METRICS),
    ]
    for name in names:
        mine = [r for r in rows if r["strategy"] == name]
        cells = []
        for metric in SUMMARY_METRICS:
            mean, lo, hi = _stats([float(r[metric]) for r in mine])
            cells.append(f"{fmt(mean)} ± {fmt((hi - lo) / 2)}")
        lines.append(f"| {name} | {len(mine)} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def _run_dirs(root: Path) -> list[Path]:
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / CHECKPOINT).is_file())


def cmd_report(in_dir: str | Path, out: str | None = None) -> str:
    root = Path(in_dir)
    if not root.is_dir():
        raise InputError(f"{root}: not a directory")
    runs = _run_dirs(root)
    if not runs:
        raise InputError(f"{root}: no completed runs")
    rows, model_configs, violations, hashes, budgets = [], {}, [], set(), set()
    for run_dir in runs:
        art = load_checkpoint(run_dir / CHECKPOINT)
        if art.completed < len(art.task_ids):
            violations.append(f"{run_dir.name}: incomplete run ({art.completed}/{len(art.task_ids)} tasks)")
            continue
        # the model seed follows the run seed, so it is not part of the comparison
        model_configs[run_dir.name] = {k: v for k, v in art.model_config.to_dict().items() if k != "seed"}
        hashes.add(art.config_echo.get("hash", ""))
        tc = art.train_config
        budgets.add(f"epochs={tc.epochs} batch_size={tc.batch_size} lr={tc.lr:g} n_fisher={tc.n_fisher} probe_size={tc.probe_size}")
        digest = art.config_echo.get("hash", "")
        if any(not (run_dir / f).is_file() for f in PLOT_FILES):
            write_plot_data(run_dir, art, digest)
        row = run_metrics(art)
        row["wallclock"] = float(sum(art.wallclock))
        rows.append(row)
        for task_id in art.violations():
            violations.append(f"{art.strategy.name} seed={art.seed}: task {task_id} below epsilon")
    reference = next(iter(model_configs.values()), None)
    clash = [name for name, mc in model_configs.items() if mc != reference]
    if clash:
        raise ValidationError(
            "report: runs disagree on the model configuration: " + ", ".join(clash), fields=["model"]
        )
    csv_rows = []
    for run_dir in runs:
        if (run_dir / "metrics.csv").is_file():
            csv_rows += read_csv(run_dir / "metrics.csv")[1]
    lines = [
        f"# Report for {root}",
        "",
        f"config hashes: {', '.join(sorted(hashes))}",
        f"training budget: {'; '.join(sorted(budgets))}",
        "",
        summary_table(rows),
    ]
    if csv_rows:
        lines += ["## Per-run metrics", "", "| " + " | ".join(METRIC_COLUMNS) + " |", "|" + "---|" * len(METRIC_COLUMNS)]
        lines += ["| " + " | ".join(r.get(c, "") for c in METRIC_COLUMNS) + " |" for r in csv_rows]
        lines.append("")
    ratios = _ratios(rows)
    if ratios:
        lines += ["## Wall-clock ratio vs naive", ""]
        lines += [f"- {name}: {fmt(mean)} (min {fmt(lo)}, max {fmt(hi)})" for name, (mean, lo, hi) in ratios.items()]
        lines.append("")
    lines += ["## Metric definitions", ""]
    lines += [f"- {name}: {text}" for name, text in M.DEFINITIONS.items()]
    lines.append("")
    lines += ["## Constraint violations (P(T_i) < epsilon after the final task)", ""]
    lines += [f"- {v}" for v in violations] or ["- none"]
    text = "\n".join(lines) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
    return text


def _ratios(rows: list[dict]) -> dict[str, tuple[float, float, float]]:
    naive = {r["seed"]: r["wallclock"] for r in rows if r["strategy"] == "naive"}
    out = {}
    for name in dict.fromkeys(r["strategy"] for r in rows):
        vals = [r["wallclock"] / naive[r["seed"]] for r in rows if r["strategy"] == name and naive.get(r["seed"])]
        if vals:
            out[name] = _stats(vals)
    return out


# entry point ----------------------------------------------------------------------


def cmd_gradcheck(stream=None) -> int:
    stream = stream or sys.stdout
    errors = run_gradcheck()
    for name, err in errors.items():
        stream.write(f"{name:28s} {err:.3e}\n")
    bad = failures(errors)
    if bad:
        stream.write(f"FAIL (tolerance {TOLERANCE:g}): {', '.join(bad)}\n")
        return EXIT_NUMERIC
    stream.write(f"PASS (tolerance {TOLERANCE:g})\n")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="modalanchor", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="train the strategy x seed matrix")
    run.add_argument("--config", help="key = value configuration file")
    run.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    run.add_argument("--out", help="output directory (default: config 'out')")
    run.add_argument("--jobs", type=int, default=1, help="parallel runs")
    report = sub.add_parser("report", help="merge runs in a directory")
    report.add_argument("--in", dest="in_dir", required=True)
    report.add_argument("--out")
    sub.add_parser("gradcheck", help="finite-difference gradient suite")
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck()
        if args.command == "report":
            text = cmd_report(args.in_dir, args.out)
            if not args.out:
                sys.stdout.write(text)
            return EXIT_OK
        if args.jobs < 1:
            raise ValidationError("--jobs must be >= 1", fields=["jobs"])
        cfg = load_config(args.config, args.set)
        return cmd_run(cfg, args.out, args.jobs)
    except ValidationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ModalAnchorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
