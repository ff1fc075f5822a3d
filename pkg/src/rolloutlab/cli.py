"""Experiment runner: configure, train, sweep lenience, analyze traces.

Subcommands:

- ``train``: run one experiment from a JSON config; writes the metrics CSV,
  the final policy checkpoint, and optionally a cache snapshot and a response
  trace (JSONL).
- ``sweep``: run one experiment per lenience value with a shared seed (and a
  single shared vanilla baseline), then write a combined summary CSV keyed by
  lenience.
- ``analyze``: read a response trace and emit per-epoch-pair overlap CSVs.

Config files are JSON with an explicit ``schema_version``; unknown or missing
fields are reported by name. Every command is deterministic given the config
and seed, and re-running overwrites outputs identically.

Exit codes: 0 success, 1 runtime failure (partial metrics are flushed on
divergence), 2 config/schema errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

from .metrics import epoch_overlap, write_metrics_csv
from .policy import DivergenceError, save_policy
from .speculative import ConfigError, Lenience
from .trainer import (
    ROLLOUT_MODES,
    ExperimentResult,
    TrainConfig,
    run_experiment,
)

__all__ = ["main", "load_config", "ExperimentSettings"]

CONFIG_SCHEMA_VERSION = 1

_REQUIRED_FIELDS = {
    "schema_version": int,
    "seed": int,
    "epochs": int,
    "steps_per_epoch": int,
    "prompts_per_batch": int,
    "group_size": int,
    "max_len": int,
}

_OPTIONAL_FIELDS = {
    "digits": int,
    "context_window": int,
    "lenience": str,
    "resume_mode": str,
    "rollout_mode": str,
    "learning_rate": float,
    "kl_coef": float,
    "clip_eps_low": float,
    "clip_eps_high": float,
    "init_eos_bias": float,
    "out_dir": str,
    "metrics_filename": str,
    "policy_filename": str,
    "cache_filename": str,
    "trace_filename": str,
    "lenience_sweep": list,
}


class SchemaError(ValueError):
    """Config file violates the schema; message names the offending field."""


class ExperimentSettings:
    """A TrainConfig plus output options parsed from a config file."""

    def __init__(
        self,
        train: TrainConfig,
        out_dir: Path,
        metrics_filename: str,
        policy_filename: str,
        cache_filename: str | None,
        trace_filename: str | None,
        lenience_sweep: list[str],
    ) -> None:
        self.train = train
        self.out_dir = out_dir
        self.metrics_filename = metrics_filename
        self.policy_filename = policy_filename
        self.cache_filename = cache_filename
        self.trace_filename = trace_filename
        self.lenience_sweep = lenience_sweep


def load_config(path: str | Path) -> ExperimentSettings:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise SchemaError("config must be a JSON object")
    unknown = sorted(set(raw) - set(_REQUIRED_FIELDS) - set(_OPTIONAL_FIELDS))
    if unknown:
        raise SchemaError(f"unknown config field(s): {', '.join(unknown)}")
    for field, kind in _REQUIRED_FIELDS.items():
        if field not in raw:
            raise SchemaError(f"missing required config field: {field}")
        if not isinstance(raw[field], kind) or isinstance(raw[field], bool):
            raise SchemaError(f"config field {field} must be {kind.__name__}")
    for field, kind in _OPTIONAL_FIELDS.items():
        if field in raw and kind is float and isinstance(raw[field], int):
            raw[field] = float(raw[field])
        if field in raw and (not isinstance(raw[field], kind) or isinstance(raw[field], bool)):
            raise SchemaError(f"config field {field} must be {kind.__name__}")
    if raw["schema_version"] != CONFIG_SCHEMA_VERSION:
        raise SchemaError(
            f"unsupported schema_version {raw['schema_version']} "
            f"(expected {CONFIG_SCHEMA_VERSION})"
        )
    try:
        lenience = Lenience.parse(raw.get("lenience", "e^0.5"))
    except ValueError as exc:
        raise SchemaError(f"config field lenience: {exc}") from exc
    train = TrainConfig(
        epochs=raw["epochs"],
        steps_per_epoch=raw["steps_per_epoch"],
        prompts_per_batch=raw["prompts_per_batch"],
        group_size=raw["group_size"],
        max_len=raw["max_len"],
        seed=raw["seed"],
        digits=raw.get("digits", 1),
        context_window=raw.get("context_window", 3),
        lenience=lenience,
        resume_mode=raw.get("resume_mode", "direct"),
        rollout_mode=raw.get("rollout_mode", "vanilla"),
        learning_rate=raw.get("learning_rate", 0.5),
        kl_coef=raw.get("kl_coef", 1e-4),
        clip_eps_low=raw.get("clip_eps_low", 0.2),
        clip_eps_high=raw.get("clip_eps_high", 0.2),
        init_eos_bias=raw.get("init_eos_bias", 2.4),
    )
    try:
        train.validate()
    except ConfigError as exc:
        raise SchemaError(str(exc)) from exc
    sweep = raw.get("lenience_sweep", [])
    if not all(isinstance(token, str) for token in sweep):
        raise SchemaError("config field lenience_sweep must be a list of strings")
    return ExperimentSettings(
        train=train,
        out_dir=Path(raw.get("out_dir", "runs")),
        metrics_filename=raw.get("metrics_filename", "metrics.csv"),
        policy_filename=raw.get("policy_filename", "policy.npz"),
        cache_filename=raw.get("cache_filename"),
        trace_filename=raw.get("trace_filename"),
        lenience_sweep=list(sweep),
    )


def _apply_overrides(settings: ExperimentSettings, args: argparse.Namespace) -> None:
    if args.out is not None:
        settings.out_dir = Path(args.out)
    changes = {}
    if getattr(args, "seed_override", None) is not None:
        changes["seed"] = args.seed_override
    if getattr(args, "rollout_mode", None) is not None:
        if args.rollout_mode not in ROLLOUT_MODES:
            raise SchemaError(f"unknown rollout mode {args.rollout_mode!r}")
        changes["rollout_mode"] = args.rollout_mode
    if getattr(args, "lenience", None) is not None:
        try:
            changes["lenience"] = Lenience.parse(args.lenience)
        except ValueError as exc:
            raise SchemaError(str(exc)) from exc
    if changes:
        settings.train = replace(settings.train, **changes)
        settings.train.validate()


def _result_rows(result: ExperimentResult) -> list[dict[str, object]]:
    rows: list[dict[str, object]] = []
    by_epoch: dict[int, list] = {}
    for record in result.step_records:
        by_epoch.setdefault(record.epoch, []).append(record)
    for summary in result.epoch_metrics:
        for record in by_epoch.get(summary.epoch, []):
            rows.append(record.as_row())
        rows.append(summary.as_row())
    return rows


def _write_outputs(settings: ExperimentSettings, result: ExperimentResult) -> Path:
    settings.out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = settings.out_dir / settings.metrics_filename
    write_metrics_csv(metrics_path, _result_rows(result))
    save_policy(result.policy, settings.out_dir / settings.policy_filename)
    if settings.cache_filename:
        result.cache.persist(settings.out_dir / settings.cache_filename)
    if settings.trace_filename:
        with open(settings.out_dir / settings.trace_filename, "w", encoding="utf-8") as fh:
            for row in result.trace:
                fh.write(
                    json.dumps(
                        {
                            "epoch": row.epoch,
                            "prompt_id": row.prompt_id,
                            "slot": row.slot,
                            "tokens": list(row.tokens),
                        },
                        separators=(",", ":"),
                    )
                    + "\n"
                )
    return metrics_path


def cmd_train(args: argparse.Namespace) -> int:
    settings = load_config(args.config)
    _apply_overrides(settings, args)
    try:
        result = run_experiment(settings.train)
    except DivergenceError as exc:
        partial: ExperimentResult | None = getattr(exc, "partial", None)
        if partial is not None:
            _write_outputs(settings, partial)
        print(f"error: update diverged: {exc}", file=sys.stderr)
        return 1
    metrics_path = _write_outputs(settings, result)
    for summary in result.epoch_metrics:
        print(
            f"epoch {summary.epoch}: reward {summary.mean_reward:.3f} "
            f"tokens_generated {summary.tokens_generated} "
            f"reused {summary.tokens_reused} "
            f"speedup {summary.speedup_vs_baseline:.2f} "
            f"full_reuse {summary.full_reuse_ratio:.2f} "
            f"rouge1 {summary.rouge1_overlap:.3f}"
        )
    print(f"metrics written to {metrics_path}")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    settings = load_config(args.config)
    _apply_overrides(settings, args)
    tokens = (
        [t.strip() for t in args.lenience_list.split(",") if t.strip()]
        if args.lenience_list
        else settings.lenience_sweep
    )
    if not tokens:
        raise SchemaError("sweep needs a lenience list (config lenience_sweep or --lenience-list)")
    try:
        lenience_values = [Lenience.parse(token) for token in tokens]
    except ValueError as exc:
        raise SchemaError(str(exc)) from exc

    settings.out_dir.mkdir(parents=True, exist_ok=True)
    # one shared vanilla baseline: seeds are coupled across the sweep
    baseline = run_experiment(replace(settings.train, rollout_mode="vanilla"))
    summary_rows = []
    for token, lenience in zip(tokens, lenience_values):
        config = replace(settings.train, lenience=lenience, rollout_mode="speculative")
        config.validate()
        result = run_experiment(config, baseline_step_tokens=baseline.step_tokens)
        run_dir = settings.out_dir / f"lenience_{token.replace('^', '')}"
        run_settings = ExperimentSettings(
            train=config,
            out_dir=run_dir,
            metrics_filename=settings.metrics_filename,
            policy_filename=settings.policy_filename,
            cache_filename=settings.cache_filename,
            trace_filename=settings.trace_filename,
            lenience_sweep=[],
        )
        _write_outputs(run_settings, result)
        total_generated = sum(m.tokens_generated for m in result.epoch_metrics)
        baseline_total = sum(m.tokens_generated for m in baseline.epoch_metrics)
        summary_rows.append(
            {
                "lenience": token,
                "tokens_generated": total_generated,
                "speedup": (
                    baseline_total / total_generated if total_generated else float("inf")
                ),
                "final_reward": result.epoch_metrics[-1].mean_reward,
                "mean_full_reuse_ratio": sum(
                    m.full_reuse_ratio for m in result.epoch_metrics
                )
                / len(result.epoch_metrics),
            }
        )
        print(
            f"lenience {token}: tokens {total_generated} "
            f"speedup {summary_rows[-1]['speedup']:.2f} "
            f"final_reward {summary_rows[-1]['final_reward']:.3f}"
        )
    sweep_path = settings.out_dir / "sweep.csv"
    with open(sweep_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["lenience", "tokens_generated", "speedup", "final_reward", "mean_full_reuse_ratio"]
        )
        for row in summary_rows:
            writer.writerow(
                [
                    row["lenience"],
                    row["tokens_generated"],
                    repr(float(row["speedup"])) if row["speedup"] != float("inf") else "inf",
                    repr(float(row["final_reward"])),
                    repr(float(row["mean_full_reuse_ratio"])),
                ]
            )
    print(f"sweep summary written to {sweep_path}")
    return 0


def _read_trace(path: str | Path) -> dict[int, dict[int, dict[int, tuple[int, ...]]]]:
    """Trace JSONL -> {epoch: {prompt_id: {slot: tokens}}}."""
    epochs: dict[int, dict[int, dict[int, tuple[int, ...]]]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                epoch = int(row["epoch"])
                prompt_id = row["prompt_id"]
                slot = int(row["slot"])
                tokens = tuple(int(t) for t in row["tokens"])
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"trace line {lineno}: {exc}") from exc
            epochs.setdefault(epoch, {}).setdefault(prompt_id, {})[slot] = tokens
    return epochs


def cmd_analyze(args: argparse.Namespace) -> int:
    epochs = _read_trace(args.trace)
    if not epochs:
        print("error: trace is empty", file=sys.stderr)
        return 1
    ordered = sorted(epochs)
    expected = list(range(ordered[0], ordered[-1] + 1))
    if ordered != expected:
        gaps = sorted(set(expected) - set(ordered))
        print(f"error: trace is missing epoch(s): {gaps}", file=sys.stderr)
        return 1
    out_dir = Path(args.out) if args.out else Path(".")
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / "overlap.csv"
    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "prompt_id", "rouge1"])
        for prev_epoch, curr_epoch in zip(ordered, ordered[1:]):
            prev = {
                pid: [slots[s] for s in sorted(slots)]
                for pid, slots in epochs[prev_epoch].items()
            }
            curr = {
                pid: [slots[s] for s in sorted(slots)]
                for pid, slots in epochs[curr_epoch].items()
            }
            report = epoch_overlap(prev, curr, epoch=curr_epoch)
            for prompt_id, value in zip(report.prompt_ids, report.per_prompt):
                writer.writerow([curr_epoch, prompt_id, repr(float(value))])
            writer.writerow([curr_epoch, "mean", repr(float(report.mean_rouge1))])
            print(f"epoch {prev_epoch} -> {curr_epoch}: mean rouge1 {report.mean_rouge1:.4f}")
    print(f"overlap written to {out_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rolloutlab", description="rollout-reuse experiment runner"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run one training experiment")
    train.add_argument("--config", required=True, help="JSON experiment config")
    train.add_argument("--out", default=None, help="output directory override")
    train.add_argument("--seed-override", type=int, default=None, dest="seed_override")
    train.add_argument("--rollout-mode", default=None, dest="rollout_mode")
    train.add_argument("--lenience", default=None, help="lenience token, e.g. 1, e^0.5, inf")
    train.set_defaults(func=cmd_train)

    sweep = sub.add_parser("sweep", help="train once per lenience value with coupled seeds")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--out", default=None)
    sweep.add_argument("--seed-override", type=int, default=None, dest="seed_override")
    sweep.add_argument(
        "--lenience",
        default=None,
        dest="lenience_list",
        help="comma-separated lenience tokens (e.g. 0,1,e^0.5,inf); overrides the config sweep list",
    )
    sweep.set_defaults(func=cmd_sweep, rollout_mode=None, lenience=None)

    analyze = sub.add_parser("analyze", help="cross-epoch overlap from a response trace")
    analyze.add_argument("trace", help="trace JSONL written by train")
    analyze.add_argument("--out", default=None)
    analyze.set_defaults(func=cmd_analyze)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (SchemaError, ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
