"""Command-line entry point: train, ablate, sweep, analyze.

Every command writes a ``manifest.json`` holding the fully defaulted config,
the seeds, and SHA-256 checksums of the artifacts it produced. Passing a
manifest back through ``--config`` replays the run.

Exit codes: 0 success, 2 configuration or usage error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import __version__
from .data import build_longtail_counts, generate_dataset, load_dataset, save_dataset, split_categories
from .errors import ConfigError
from .experiments import ENSEMBLE_ROW, ROW_LABELS, SWEEP_AXES, row_config, sweep_config
from .metrics import dump_json, hardest_negative_scores, kl_report, per_class_accuracy, per_class_csv
from .model import MultiExpert
from .train import TrainConfig, evaluate, train

logger = logging.getLogger("nestlab")

EXIT_OK, EXIT_USAGE, EXIT_IO = 0, 2, 3


class UsageError(Exception):
    """Bad flags or config; carries the offending key when there is one."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ------------------------------------------------------------------ config IO


def load_config(path: str | None) -> tuple[TrainConfig, dict]:
    """Read a config file, or a manifest whose ``config`` is replayed.

    Returns the config and the raw manifest (empty for plain configs).
    """
    if path is None:
        return TrainConfig(), {}
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}", "config") from None
    except OSError as err:
        raise UsageError(f"cannot read config {path}: {err}", "config") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as err:
        raise UsageError(f"config {path} is not valid JSON: {err}", "config") from None
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object", "config")
    manifest = {}
    if "manifest_version" in raw:
        manifest = raw
        raw = raw["config"]
    try:
        return TrainConfig.from_dict(raw), manifest
    except ConfigError as err:
        raise UsageError(f"bad config: {err}", err.key) from None
    except (TypeError, ValueError) as err:
        raise UsageError(f"bad config: {err}") from None


def parse_seeds(text: str | None) -> list[int] | None:
    if text is None:
        return None
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated integers, got {text!r}", "seeds") from None
    if not seeds:
        raise UsageError("--seeds is empty", "seeds")
    return seeds


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, config_path, config: TrainConfig, seeds, extra=None) -> None:
    artifacts = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {
        "manifest_version": 1,
        "version": __version__,
        "command": command,
        "config_path": None if config_path is None else str(config_path),
        "config": config.to_dict(),
        "seeds": list(seeds),
        "out": str(out),
        "checksums": {str(p.relative_to(out)): _sha256(p) for p in artifacts},
    }
    if extra:
        manifest.update(extra)
    dump_json(manifest, out / "manifest.json")


def _write_text(path: Path, text: str) -> None:
    path.write_text(text)


def history_csv(history: list[dict]) -> str:
    cols: list[str] = []
    for rec in history:
        cols.extend(k for k in rec if k not in cols)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    writer.writeheader()
    for rec in history:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in rec.items()})
    return buf.getvalue()


def _data_for(config: TrainConfig):
    prior = build_longtail_counts(config.dataset)
    train_set, test_set = generate_dataset(config.dataset, prior)
    return prior, train_set, test_set


def write_run(out: Path, config: TrainConfig, checkpoint: bool = True) -> dict:
    """Train one config into ``out``; returns the result payload."""
    out.mkdir(parents=True, exist_ok=True)
    prior, train_set, test_set = _data_for(config)
    result = train(config, (prior, train_set, test_set))
    payload = result.to_dict()
    dump_json(payload, out / "result.json")
    _write_text(out / "history.csv", history_csv(result.history))
    if checkpoint:
        result.model.save(out / "checkpoint.json")
        save_dataset(out / "dataset.json", config.dataset, prior, train_set, test_set)
    return payload


# ------------------------------------------------------------------ commands


def cmd_train(args) -> int:
    config, manifest = load_config(args.config)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    out = Path(args.out)
    write_run(out, config)
    write_manifest(out, "train", args.config, config, [config.seed])
    logger.info("wrote %s", out)
    return EXIT_OK


def _grid_job(job) -> tuple:
    key, out, config, checkpoint = job
    payload = write_run(Path(out), config, checkpoint)
    final = payload["final"]
    return key, final["single_accuracy"], final["ensemble_accuracy"]


def _run_jobs(jobs: list, n_workers: int) -> dict:
    if n_workers <= 1 or len(jobs) <= 1:
        results = [_grid_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_grid_job, jobs))
    return {key: (single, ens) for key, single, ens in results}


def _seeds_for(args, config: TrainConfig, manifest: dict) -> list[int]:
    seeds = parse_seeds(args.seeds)
    if seeds is None and args.seed is not None:
        seeds = [args.seed]
    if seeds is None and manifest.get("seeds"):
        seeds = [int(s) for s in manifest["seeds"]]
    return seeds or [config.seed]


def _csv_text(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def cmd_ablate(args) -> int:
    config, manifest = load_config(args.config)
    seeds = _seeds_for(args, config, manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trained = [r for r in ROW_LABELS if r != ENSEMBLE_ROW]
    jobs = [
        ((seed, label), str(out / f"seed{seed}" / label), row_config(config, label).with_seed(seed), False)
        for seed in seeds
        for label in trained
    ]
    results = _run_jobs(jobs, args.jobs)
    rows = []
    for seed in seeds:
        for label in ROW_LABELS:
            if label == ENSEMBLE_ROW:
                # same trained model as the full row; only evaluation differs
                single, ens = results[(seed, "full")]
                rows.append([label, seed, ens, ens])
            else:
                single, ens = results[(seed, label)]
                rows.append([label, seed, single, ens])
    _write_text(out / "ablation.csv", _csv_text(["row", "seed", "single_acc", "ensemble_acc"], rows))
    write_manifest(out, "ablate", args.config, config, seeds)
    return EXIT_OK


def _parse_values(axis: str, text: str | None) -> list:
    if not text:
        raise UsageError("--values is required for sweep", "values")
    cast = int if axis in ("copies", "experts") else float
    try:
        return [cast(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"bad --values for axis {axis}: {text!r}", "values") from None


def cmd_sweep(args) -> int:
    if args.axis not in SWEEP_AXES:
        raise UsageError(f"unknown sweep axis {args.axis!r}; choose from {', '.join(SWEEP_AXES)}", "axis")
    config, manifest = load_config(args.config)
    values = _parse_values(args.axis, args.values)
    seeds = _seeds_for(args, config, manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    for value in values:
        try:
            cfg = sweep_config(config, args.axis, value)
        except ConfigError as err:
            raise UsageError(f"bad {args.axis} value {value}: {err}", err.key) from None
        for seed in seeds:
            jobs.append(((value, seed), str(out / f"{args.axis}={value}" / f"seed{seed}"), cfg.with_seed(seed), False))
    results = _run_jobs(jobs, args.jobs)
    rows = [[value, seed, *results[(value, seed)]] for value in values for seed in seeds]
    _write_text(out / "sweep.csv", _csv_text([args.axis, "seed", "single_acc", "ensemble_acc"], rows))
    write_manifest(out, "sweep", args.config, config, seeds, {"axis": args.axis, "values": values})
    return EXIT_OK


def cmd_analyze(args) -> int:
    run = Path(args.run)
    ckpt = run / "checkpoint.json"
    if not ckpt.is_file():
        raise UsageError(f"missing checkpoint: {ckpt}", "checkpoint")
    data_path = run / "dataset.json"
    if not data_path.is_file():
        raise UsageError(f"missing dataset: {data_path}", "dataset")
    config, _ = load_config(str(run / "manifest.json")) if (run / "manifest.json").is_file() else (TrainConfig(), {})
    try:
        model = MultiExpert.load(ckpt)
        _, prior, _, test_set = load_dataset(data_path)
    except (KeyError, TypeError, ValueError) as err:
        raise UsageError(f"unreadable run artifacts in {run}: {err}", "checkpoint") from None
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)

    if model.num_experts < 2:
        logger.warning("checkpoint has a single expert; skipping inter-expert KL")
    policy = config.augmentation
    if policy.copies < 2:
        policy = replace(policy, copies=2)
    report = kl_report(model, test_set, prior, policy)
    dump_json(report.to_dict(), out / "kl_report.json")

    splits = split_categories(prior, config.many_threshold, config.few_threshold)
    ev = evaluate(model, test_set, prior, splits)
    acc = per_class_accuracy(ev.ensemble_predictions, test_set.labels, prior.num_classes)
    _write_text(out / "per_class.csv", per_class_csv(prior, acc, report))

    hard = {}
    threshold = 0.4
    for name, expert in [("expert0", 0), ("ensemble", None)]:
        scores, hist = hardest_negative_scores(model, test_set, expert)
        hard[name] = {
            "histogram": hist.to_dict(),
            "mean": float(scores.mean()),
            "fraction_above": float((scores > threshold).mean()),
        }
    hard["threshold"] = threshold
    dump_json(hard, out / "hardest_negative.json")
    return EXIT_OK


# ------------------------------------------------------------------ entry


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nestlab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(p, grid: bool):
        p.add_argument("--config", help="JSON config or a manifest to replay (default: built-in defaults)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override the config seed")
        if grid:
            p.add_argument("--seeds", help="comma-separated seed list, e.g. 1,2,3")
            p.add_argument("--jobs", type=int, default=1, help="parallel worker processes (default 1)")

    common(sub.add_parser("train", help="train one configuration"), grid=False)
    common(sub.add_parser("ablate", help="run the ablation grid"), grid=True)
    sw = sub.add_parser("sweep", help="retrain along one hyperparameter axis")
    common(sw, grid=True)
    sw.add_argument("--axis", required=True, help="|".join(SWEEP_AXES))
    sw.add_argument("--values", required=True, help="comma-separated axis values")
    an = sub.add_parser("analyze", help="diagnostics for a trained run directory")
    an.add_argument("--run", required=True, help="directory written by `train`")
    an.add_argument("--out", help="output directory (default: the run directory)")
    return parser


COMMANDS = {"train": cmd_train, "ablate": cmd_ablate, "sweep": cmd_sweep, "analyze": cmd_analyze}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(f"nestlab: usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if getattr(args, "jobs", 1) is not None and getattr(args, "jobs", 1) < 1:
        print("nestlab: usage error: --jobs must be >= 1 (key: jobs)", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except UsageError as err:
        suffix = f" (key: {err.key})" if err.key else ""
        print(f"nestlab: {err}{suffix}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as err:
        suffix = f" (key: {err.key})" if err.key else ""
        print(f"nestlab: bad config: {err}{suffix}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as err:
        print(f"nestlab: I/O error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
