"""Command-line entry point.

Subcommands:

- gen: generate the per-robot worlds and write the datasets to disk
- run: execute the full comparison experiment (optionally with --check)
- eval: re-score models saved by a previous run against its holdout sets
- report: re-render a saved report.json as a markdown table

Every ExperimentConfig field is exposed as a flag; --config loads a key/value
file first and flags override it. Exit codes: 0 on success, 2 when --check
finds an acceptance problem or eval --verify finds a mismatch, 3 on any
configuration error (bad flag, bad file, unknown key).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import codec
from .baselines import pooled_style
from .config import ExperimentConfig, read_config, write_config
from .errors import ConfigurationError, ParlError
from .harness import (
    StageFailure,
    check_acceptance,
    generate_worlds,
    resolve_output_dir,
    run_experiment,
)
from .policy import evaluate
from .styles import fit_style, styles_for_agents

_FLAG_HELP = {
    "robots": "number of robot agents",
    "samples_per_task": "scenarios per robot per task",
    "fan_out": "augmented variants requested per input sample",
    "tau": "plausibility threshold for accepting augmented layouts",
    "beta": "fine-tune mixing weight toward the shared model",
    "ridge_lambda": "ridge regularization strength",
    "fail_threshold": "torque error above this counts as a failure",
    "holdout_fraction": "fraction of each task's samples held out",
    "world_seed": "seed for world generation and styles",
    "augment_seed": "seed for the augmentation pipeline",
    "protocol_seed": "seed reserved for protocol-level randomness",
    "run_color_jitter": "include the color-jitter baseline arm",
    "run_random_crop": "include the random-resized-crop baseline arm",
    "include_self_labels": "source robot also votes when crowd-labeling",
    "per_robot_shared": "train one shared model per robot instead of pooling",
    "output_dir": "artifact directory (relative paths resolve under PARL_OUTPUT_ROOT)",
}


class _Parser(argparse.ArgumentParser):
    """argparse parser whose usage errors exit with the config-error code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(3, f"{self.prog}: error: {message}\n")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="PATH", help="config file; flags override its values")
    for field in dataclasses.fields(ExperimentConfig):
        flag = "--" + field.name.replace("_", "-")
        help_text = _FLAG_HELP[field.name]
        if field.type == "bool":
            parser.add_argument(
                flag, dest=field.name, default=None,
                action=argparse.BooleanOptionalAction, help=help_text,
            )
        elif field.type == "int":
            parser.add_argument(flag, dest=field.name, default=None, type=int, help=help_text)
        elif field.type == "float":
            parser.add_argument(flag, dest=field.name, default=None, type=float, help=help_text)
        else:
            parser.add_argument(flag, dest=field.name, default=None, help=help_text)


def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    base = read_config(args.config) if args.config else ExperimentConfig()
    overrides = {
        field.name: getattr(args, field.name)
        for field in dataclasses.fields(ExperimentConfig)
        if getattr(args, field.name) is not None
    }
    return dataclasses.replace(base, **overrides)


def _run_dir(args: argparse.Namespace) -> Path:
    if args.dir is not None:
        return Path(args.dir)
    return resolve_output_dir(ExperimentConfig())


def cmd_gen(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    out = resolve_output_dir(config)
    out.mkdir(parents=True, exist_ok=True)
    (out / "models").mkdir(exist_ok=True)
    train, holdout = generate_worlds(config)
    styles = styles_for_agents(range(config.robots), seed=config.world_seed)
    codec.write_models(
        out / "models" / "styles.dm1", [styles[i] for i in range(config.robots)]
    )
    write_config(out / "config.txt", config)
    for robot in range(config.robots):
        key = f"robot-{robot}"
        codec.write_dataset(out / f"{key}_train.ds1", train[robot])
        codec.write_dataset(out / f"{key}_holdout.ds1", holdout[robot])
        print(f"{key}: {len(train[robot])} train / {len(holdout[robot])} holdout")
    print(f"worlds written to {out}")
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    report = run_experiment(config)
    out = resolve_output_dir(config)
    for arm in sorted(report.arms):
        err, rate = report.overall(arm)
        print(f"{arm:14s} error={err:.4f} failure_rate={rate:.4f}")
    print(f"artifacts written to {out}")
    if args.check:
        problems = check_acceptance(report)
        for problem in problems:
            print(f"CHECK FAIL: {problem}")
        if problems:
            return 2
        print("CHECK PASS")
    return 0


def _rescore(run_dir: Path):
    """Recompute every saved model's evaluation from persisted artifacts."""
    config = read_config(run_dir / "config.txt")
    train, holdout, fitted = {}, {}, {}
    for robot in range(config.robots):
        key = f"robot-{robot}"
        train[robot] = codec.read_dataset(run_dir / f"{key}_train.ds1")
        holdout[robot] = codec.read_dataset(run_dir / f"{key}_holdout.ds1")
        fitted[robot] = fit_style(train[robot])
    arms: dict[str, dict] = {}
    per_robot_files = {
        "local": "local_{key}.dm1",
        "local+jitter": "jitter_{key}.dm1",
        "local+crop": "crop_{key}.dm1",
        "parl": "parl_tuned_{key}.dm1",
    }
    for arm, pattern in per_robot_files.items():
        for robot in range(config.robots):
            key = f"robot-{robot}"
            path = run_dir / "models" / pattern.format(key=key)
            if not path.exists():
                continue
            (model,) = codec.read_models(path)
            arms.setdefault(arm, {})[key] = evaluate(
                model, holdout[robot], fitted[robot], config.fail_threshold
            )
    central_path = run_dir / "models" / "centralized.dm1"
    if central_path.exists():
        (central,) = codec.read_models(central_path)
        style = pooled_style([s for r in range(config.robots) for s in train[r]])
        for robot in range(config.robots):
            arms.setdefault("centralized", {})[f"robot-{robot}"] = evaluate(
                central, holdout[robot], style, config.fail_threshold
            )
    return config, arms


def cmd_eval(args: argparse.Namespace) -> int:
    run_dir = _run_dir(args)
    if not (run_dir / "config.txt").exists():
        raise ConfigurationError(f"no config.txt under {run_dir}")
    _, arms = _rescore(run_dir)
    for arm in sorted(arms):
        for key in sorted(arms[arm]):
            rep = arms[arm][key]
            print(
                f"{arm:14s} {key}: error={rep.overall_error:.6f} "
                f"failure_rate={rep.overall_failure_rate:.6f}"
            )
    if args.verify:
        saved = json.loads((run_dir / "report.json").read_text(encoding="utf-8"))
        mismatches = []
        for arm in sorted(arms):
            for key in sorted(arms[arm]):
                want = saved["arms"].get(arm, {}).get(key)
                if want is None:
                    mismatches.append(f"{arm}/{key}: missing from report.json")
                    continue
                got = arms[arm][key]
                if (
                    abs(got.overall_error - want["overall_error"]) > 1e-9
                    or abs(got.overall_failure_rate - want["overall_failure_rate"]) > 1e-9
                ):
                    mismatches.append(
                        f"{arm}/{key}: recomputed {got.overall_error:.6f} "
                        f"vs saved {want['overall_error']:.6f}"
                    )
        for mismatch in mismatches:
            print(f"VERIFY FAIL: {mismatch}")
        if mismatches:
            return 2
        print("VERIFY PASS: recomputed scores match report.json")
    return 0


def _markdown_from_json(doc: dict) -> str:
    arms = doc["arms"]
    robots = sorted({r for robot_map in arms.values() for r in robot_map})
    lines = ["# Comparison report", "", "## Mean absolute torque error", ""]
    lines.append("| arm | " + " | ".join(robots) + " | overall |")
    lines.append("|---" * (len(robots) + 2) + "|")
    for arm in sorted(arms):
        cells = [
            f"{arms[arm][r]['overall_error']:.4f}" if r in arms[arm] else "-"
            for r in robots
        ]
        overall = doc["overall"][arm]["error"]
        lines.append(f"| {arm} | " + " | ".join(cells) + f" | {overall:.4f} |")
    lines += ["", "## Failure rate (error > threshold)", ""]
    lines.append("| arm | " + " | ".join(robots) + " | overall |")
    lines.append("|---" * (len(robots) + 2) + "|")
    for arm in sorted(arms):
        cells = [
            f"{arms[arm][r]['overall_failure_rate']:.4f}" if r in arms[arm] else "-"
            for r in robots
        ]
        overall = doc["overall"][arm]["failure_rate"]
        lines.append(f"| {arm} | " + " | ".join(cells) + f" | {overall:.4f} |")
    lines += ["", "## Augmenter axes", ""]
    lines.append("| augmenter | number | semantic | instance | reality |")
    lines.append("|---|---|---|---|---|")
    for name in sorted(doc["qualitative"]):
        row = doc["qualitative"][name]
        lines.append(
            f"| {name} | {row['number']} | {row['semantic']} | "
            f"{row['instance']} | {row['reality']} |"
        )
    return "\n".join(lines) + "\n"


def cmd_report(args: argparse.Namespace) -> int:
    run_dir = _run_dir(args)
    path = run_dir / "report.json"
    if not path.exists():
        raise ConfigurationError(f"no report.json under {run_dir}")
    text = _markdown_from_json(json.loads(path.read_text(encoding="utf-8")))
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"markdown written to {args.out}")
    else:
        print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="parl", description="Peer-assisted robotic learning testbed")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="generate worlds and write datasets")
    _add_config_flags(p_gen)
    p_gen.set_defaults(func=cmd_gen)

    p_run = sub.add_parser("run", help="run the full comparison experiment")
    _add_config_flags(p_run)
    p_run.add_argument(
        "--check", action="store_true",
        help="evaluate acceptance checks; exit 2 if any fail",
    )
    p_run.set_defaults(func=cmd_run)

    p_eval = sub.add_parser("eval", help="re-score saved models from a run directory")
    p_eval.add_argument("dir", nargs="?", default=None, help="run directory (default: output dir)")
    p_eval.add_argument(
        "--verify", action="store_true",
        help="compare recomputed scores against report.json; exit 2 on mismatch",
    )
    p_eval.set_defaults(func=cmd_eval)

    p_report = sub.add_parser("report", help="render a saved report.json as markdown")
    p_report.add_argument("dir", nargs="?", default=None, help="run directory (default: output dir)")
    p_report.add_argument("--out", metavar="PATH", help="write markdown here instead of stdout")
    p_report.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 3
    except StageFailure as exc:
        failure = {"error": "stage-failure", "stage": exc.stage, "node": exc.node,
                   "cause": str(exc.cause)}
        print(json.dumps(failure), file=sys.stderr)
        return 1
    except ParlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
