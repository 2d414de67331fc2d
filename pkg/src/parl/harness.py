"""End-to-end experiment runner: three approaches on shared splits.

One run generates style-disjoint worlds for every robot, splits them per
task into train/holdout, and trains five arms on identical splits:

- local: each robot alone on its own training split
- local+jitter / local+crop: local training data plus appearance-level
  augmentation (the comparison baselines)
- centralized: one model over all robots' raw data with pooled,
  non-adapted perception
- parl: the full round (upload, augment, crowdsource, train, fine-tune)

Every arm is evaluated on the same per-robot holdout sets; the report
stores split hashes so that can be audited. All artifacts (datasets,
models, predictors, candidates, reports) are persisted in deterministic
byte-exact formats, so identical configs reproduce identical files.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import codec
from .augment import diagnostics_json
from .baselines import (
    baseline_color_jitter,
    baseline_random_resized_crop,
    pooled_style,
    qualitative_table,
)
from .config import OUTPUT_ROOT_ENV, ExperimentConfig, render_config
from .errors import ParlError
from .policy import EvaluationReport, evaluate, featurize, train
from .protocol import CloudNode, NodeId, RobotNode, RoundConfig, SimNetwork, run_round
from .styles import fit_style, styles_for_agents
from .world import AgentProfile, DrivingSample, Provenance, ScenarioGenerator, TaskType, WorldConfig

ARM_LOCAL = "local"
ARM_JITTER = "local+jitter"
ARM_CROP = "local+crop"
ARM_CENTRALIZED = "centralized"
ARM_PARL = "parl"


class StageFailure(ParlError):
    """A module error wrapped with the stage and node where it happened."""

    def __init__(self, stage: str, node: str, cause: Exception) -> None:
        super().__init__(f"stage {stage} failed at {node}: {cause}")
        self.stage = stage
        self.node = node
        self.cause = cause


def agent_profiles(config: ExperimentConfig) -> dict[int, AgentProfile]:
    """Deterministic per-robot regimes; deliberately heterogeneous.

    Each robot gets its own avoidance margin and a strong turn-side prior
    that alternates across robots, so the robots are genuine data islands
    with complementary coverage: each sees mostly one turn direction
    locally, while the fleet as a whole covers both.
    """
    profiles = {}
    for i in range(config.robots):
        t = i / max(config.robots - 1, 1)
        profiles[i] = AgentProfile(
            style_id=i,
            curvature_range=(0.08, 0.18),
            avoid_gap=0.16 + 0.02 * t,
            turn_right_bias=0.1 if i % 2 == 0 else 0.9,
        )
    return profiles


def generate_worlds(
    config: ExperimentConfig,
) -> tuple[dict[int, list[DrivingSample]], dict[int, list[DrivingSample]]]:
    """Per-robot train/holdout splits, stratified per task."""
    styles = styles_for_agents(range(config.robots), seed=config.world_seed)
    generator = ScenarioGenerator(WorldConfig(), styles, agent_profiles(config))
    n = config.samples_per_task
    n_holdout = max(1, int(round(n * config.holdout_fraction)))
    if n_holdout >= n:
        n_holdout = n - 1
    train: dict[int, list[DrivingSample]] = {}
    holdout: dict[int, list[DrivingSample]] = {}
    for robot in range(config.robots):
        train[robot], holdout[robot] = [], []
        for t_idx, task in enumerate(TaskType):
            seeds = [
                config.world_seed * 1_000_003 + (robot * 3 + t_idx) * n + k
                for k in range(n)
            ]
            samples = generator.generate_dataset(robot, [task] * n, seeds)
            train[robot].extend(samples[: n - n_holdout])
            holdout[robot].extend(samples[n - n_holdout :])
    return train, holdout


def _split_hash(samples: Sequence[DrivingSample]) -> str:
    return hashlib.sha256(codec.encode_samples(samples)).hexdigest()


def _robot_key(index: int) -> str:
    return f"robot-{index}"


@dataclass(frozen=True)
class ComparisonReport:
    """All arms' per-robot evaluations plus augmentation diagnostics."""

    config: ExperimentConfig
    arms: dict[str, dict[str, EvaluationReport]]
    split_hashes: dict[str, dict[str, str]]
    augmentation: dict
    qualitative: dict
    protocol: dict

    def overall(self, arm: str) -> tuple[float, float]:
        """Aggregate (error, failure rate) over all robots' holdout samples."""
        reports = self.arms[arm].values()
        n = sum(sum(r.per_task_count.values()) for r in reports)
        err = sum(r.overall_error * sum(r.per_task_count.values()) for r in reports)
        fail = sum(r.overall_failure_rate * sum(r.per_task_count.values()) for r in reports)
        return err / n, fail / n

    def to_json_dict(self) -> dict:
        arms = {
            arm: {robot: rep.to_json_dict() for robot, rep in sorted(robots.items())}
            for arm, robots in sorted(self.arms.items())
        }
        overall = {}
        for arm in sorted(self.arms):
            err, fail = self.overall(arm)
            overall[arm] = {"error": round(err, 9), "failure_rate": round(fail, 9)}
        return {
            "config": {
                line.split(" = ")[0]: line.split(" = ", 1)[1]
                for line in render_config(self.config).splitlines()
                if " = " in line
            },
            "arms": arms,
            "overall": overall,
            "split_hashes": dict(sorted(self.split_hashes.items())),
            "augmentation": self.augmentation,
            "qualitative": self.qualitative,
            "protocol": self.protocol,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        lines = ["arm,robot,overall_error,overall_failure_rate"]
        for arm in sorted(self.arms):
            for robot in sorted(self.arms[arm]):
                rep = self.arms[arm][robot]
                lines.append(
                    f"{arm},{robot},{rep.overall_error:.6f},{rep.overall_failure_rate:.6f}"
                )
        return "\n".join(lines) + "\n"

    def to_markdown(self) -> str:
        robots = sorted({r for arm in self.arms.values() for r in arm})
        lines = ["# Comparison report", "", "## Mean absolute torque error", ""]
        lines.append("| arm | " + " | ".join(robots) + " | overall |")
        lines.append("|---" * (len(robots) + 2) + "|")
        for arm in sorted(self.arms):
            cells = [
                f"{self.arms[arm][r].overall_error:.4f}" if r in self.arms[arm] else "-"
                for r in robots
            ]
            lines.append(f"| {arm} | " + " | ".join(cells) + f" | {self.overall(arm)[0]:.4f} |")
        lines += ["", "## Failure rate (error > threshold)", ""]
        lines.append("| arm | " + " | ".join(robots) + " | overall |")
        lines.append("|---" * (len(robots) + 2) + "|")
        for arm in sorted(self.arms):
            cells = [
                f"{self.arms[arm][r].overall_failure_rate:.4f}" if r in self.arms[arm] else "-"
                for r in robots
            ]
            lines.append(f"| {arm} | " + " | ".join(cells) + f" | {self.overall(arm)[1]:.4f} |")
        lines += ["", "## Augmenter axes", ""]
        lines.append("| augmenter | number | semantic | instance | reality |")
        lines.append("|---|---|---|---|---|")
        for name in sorted(self.qualitative):
            row = self.qualitative[name]
            lines.append(
                f"| {name} | {row['number']} | {row['semantic']} | "
                f"{row['instance']} | {row['reality']} |"
            )
        return "\n".join(lines) + "\n"


def resolve_output_dir(config: ExperimentConfig, output_root: Optional[str] = None) -> Path:
    root = output_root or os.environ.get(OUTPUT_ROOT_ENV) or "."
    path = Path(config.output_dir)
    return path if path.is_absolute() else Path(root) / path


def _train_local_arm(
    samples: Sequence[DrivingSample],
    holdout: Sequence[DrivingSample],
    config: ExperimentConfig,
    extra: Sequence[DrivingSample] = (),
):
    style = fit_style(samples)
    rows = []
    provs = []
    for sample in samples:
        rows.append((featurize(sample, style), sample.label))
        provs.append(sample.provenance)
    for sample in extra:
        # Appearance augmentation can corrupt a sample beyond recognition
        # (e.g. jitter erasing the road); such rows are dropped, mirroring
        # a data-cleaning pass, rather than failing the arm.
        try:
            rows.append((featurize(sample, style), sample.label))
        except ParlError:
            continue
        provs.append(sample.provenance)
    model = train(rows, ridge_lambda=config.ridge_lambda, provenances=provs)
    report = evaluate(model, holdout, style, config.fail_threshold)
    return model, report, style


def run_experiment(
    config: ExperimentConfig, output_root: Optional[str] = None
) -> ComparisonReport:
    """Execute all arms and persist every artifact under the output dir."""
    out = resolve_output_dir(config, output_root)
    out.mkdir(parents=True, exist_ok=True)
    (out / "models").mkdir(exist_ok=True)
    (out / "uploads").mkdir(exist_ok=True)

    def _stage(stage: str, node: str, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ParlError as exc:
            raise StageFailure(stage, node, exc) from exc

    train_sets, holdout_sets = _stage("generate", "harness", generate_worlds, config)
    codec.write_models(
        out / "models" / "styles.dm1",
        [
            styles_for_agents(range(config.robots), seed=config.world_seed)[i]
            for i in range(config.robots)
        ],
    )
    split_hashes: dict[str, dict[str, str]] = {}
    for robot in range(config.robots):
        key = _robot_key(robot)
        codec.write_dataset(out / f"{key}_train.ds1", train_sets[robot])
        codec.write_dataset(out / f"{key}_holdout.ds1", holdout_sets[robot])
        # The persisted datasets are the canonical experiment input: reload
        # them so every downstream number is recomputable bit-for-bit from
        # the artifacts (the dataset encoding quantizes floats to f32).
        train_sets[robot] = codec.read_dataset(out / f"{key}_train.ds1")
        holdout_sets[robot] = codec.read_dataset(out / f"{key}_holdout.ds1")
        split_hashes[key] = {
            "train": _split_hash(train_sets[robot]),
            "holdout": _split_hash(holdout_sets[robot]),
        }

    arms: dict[str, dict[str, EvaluationReport]] = {
        ARM_LOCAL: {},
        ARM_CENTRALIZED: {},
        ARM_PARL: {},
    }
    jitter_sources: list[DrivingSample] = []
    jitter_outputs: list[DrivingSample] = []
    crop_sources: list[DrivingSample] = []
    crop_outputs: list[DrivingSample] = []

    # Local arm, plus the appearance-augmentation baselines.
    local_styles = {}
    for robot in range(config.robots):
        key = _robot_key(robot)
        model, report, style = _stage(
            "local-train", key, _train_local_arm, train_sets[robot], holdout_sets[robot], config
        )
        local_styles[robot] = style
        arms[ARM_LOCAL][key] = report
        codec.write_models(out / "models" / f"local_{key}.dm1", [model])
        if config.run_color_jitter:
            extra = []
            for i, sample in enumerate(train_sets[robot]):
                for k in range(config.fan_out):
                    seed = config.augment_seed * 1_000_003 + robot * 10_007 + i * 31 + k
                    extra.append(baseline_color_jitter(sample, seed))
                    jitter_sources.append(sample)
                    jitter_outputs.append(extra[-1])
            model_j, report_j, _ = _stage(
                "jitter-train", key, _train_local_arm,
                train_sets[robot], holdout_sets[robot], config, extra,
            )
            arms.setdefault(ARM_JITTER, {})[key] = report_j
            codec.write_models(out / "models" / f"jitter_{key}.dm1", [model_j])
        if config.run_random_crop:
            extra = []
            for i, sample in enumerate(train_sets[robot]):
                for k in range(config.fan_out):
                    seed = config.augment_seed * 9_176 + robot * 10_007 + i * 31 + k
                    extra.append(baseline_random_resized_crop(sample, seed))
                    crop_sources.append(sample)
                    crop_outputs.append(extra[-1])
            model_c, report_c, _ = _stage(
                "crop-train", key, _train_local_arm,
                train_sets[robot], holdout_sets[robot], config, extra,
            )
            arms.setdefault(ARM_CROP, {})[key] = report_c
            codec.write_models(out / "models" / f"crop_{key}.dm1", [model_c])

    # Centralized arm: pooled data, pooled (non-adapted) perception.
    pooled_samples = [s for robot in range(config.robots) for s in train_sets[robot]]
    central_style = _stage("centralized-style", "harness", pooled_style, pooled_samples)
    rows = [(featurize(s, central_style), s.label) for s in pooled_samples]
    central_model = _stage(
        "centralized-train", "harness", train, rows,
        ridge_lambda=config.ridge_lambda,
        provenances=[s.provenance for s in pooled_samples],
    )
    codec.write_models(out / "models" / "centralized.dm1", [central_model])
    for robot in range(config.robots):
        key = _robot_key(robot)
        arms[ARM_CENTRALIZED][key] = _stage(
            "centralized-eval", key, evaluate,
            central_model, holdout_sets[robot], central_style, config.fail_threshold,
        )

    # The PARL round itself.
    cloud_id = NodeId.cloud()
    robots = [
        RobotNode(
            NodeId.robot(i),
            cloud_id,
            train_sets[i],
            holdout_sets[i],
            beta=config.beta,
            ridge_lambda=config.ridge_lambda,
            fail_threshold=config.fail_threshold,
        )
        for i in range(config.robots)
    ]
    cloud = CloudNode(
        cloud_id,
        RoundConfig(
            fan_out=config.fan_out,
            tau=config.tau,
            beta=config.beta,
            ridge_lambda=config.ridge_lambda,
            fail_threshold=config.fail_threshold,
            augment_seed=config.augment_seed,
            include_self_labels=config.include_self_labels,
            per_robot_shared=config.per_robot_shared,
        ),
    )
    network = SimNetwork()
    result = _stage("parl-round", "cloud-0", run_round, robots, cloud, network)
    for node, payload in sorted(result.upload_bytes.items()):
        (out / "uploads" / f"{node}.bin").write_bytes(payload)
    for node in result.participants:
        key = str(node)
        if node in result.acks:
            arms[ARM_PARL][key] = result.acks[node]
        codec.write_models(out / "models" / f"parl_shared_{key}.dm1", [result.shared[node]])
        if node in result.tuned:
            codec.write_models(out / "models" / f"parl_tuned_{key}.dm1", [result.tuned[node]])
    if cloud.where is not None:
        codec.write_models(
            out / "models" / "predictors.dm1", [cloud.where, cloud.what, cloud.scorer]
        )
    candidates = [c for _, c in cloud.candidates]
    codec.write_models(out / "candidates.dm1", candidates)

    # Qualitative axes for the three augmenters, scored by the round's judge.
    dat_sources, dat_outputs = [], []
    for node, candidate in cloud.candidates:
        source = train_sets[node.index][candidate.source_sample_id]
        dat_sources.append(source)
        dat_outputs.append(
            replace(
                source,
                semantic=candidate.semantic,
                instances=candidate.instances,
                provenance=Provenance.AUGMENTED,
            )
        )
    qual_arms = {"semantic-insertion": (dat_sources, dat_outputs)}
    if config.run_color_jitter:
        qual_arms["color-jitter"] = (jitter_sources, jitter_outputs)
    if config.run_random_crop:
        qual_arms["random-resized-crop"] = (crop_sources, crop_outputs)
    qualitative = qualitative_table(qual_arms, cloud.scorer)
    if cloud.scorer is not None:
        pooled_layouts = [(s.semantic, s.instances) for s in pooled_samples]
        (out / "scorer_diagnostics.json").write_text(
            diagnostics_json(cloud.scorer, pooled_layouts) + "\n", encoding="utf-8"
        )

    n_inputs = sum(len(train_sets[r]) for r in range(config.robots))
    augmentation = {
        "acceptance_rate": round(
            sum(s.accepted for s in result.stats.values())
            / max(sum(s.attempts for s in result.stats.values()), 1),
            6,
        ),
        "attempts": sum(s.attempts for s in result.stats.values()),
        "accepted": sum(s.accepted for s in result.stats.values()),
        "insertion_failures": sum(s.insertion_failures for s in result.stats.values()),
        "fan_out_requested": config.fan_out,
        "fan_out_achieved": round(len(candidates) / max(n_inputs, 1), 6),
        "pool_size": result.pool_size,
        "per_robot": {
            str(node): {
                "attempts": stats.attempts,
                "accepted": stats.accepted,
                "rejected_low_score": stats.rejected_low_score,
                "insertion_failures": stats.insertion_failures,
            }
            for node, stats in sorted(result.stats.items())
        },
    }
    protocol_info = {
        "participants": [str(p) for p in result.participants],
        "stages": {str(k): v.name for k, v in sorted(result.stages.items())},
        "shared_received": {str(k): v for k, v in sorted(result.shared_received.items())},
        "violations": list(result.violations),
        "network_log": list(result.network_log),
    }

    report = ComparisonReport(
        config=config,
        arms=arms,
        split_hashes=split_hashes,
        augmentation=augmentation,
        qualitative=qualitative,
        protocol=protocol_info,
    )
    (out / "config.txt").write_text(render_config(config), encoding="utf-8")
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / "report.md").write_text(report.to_markdown(), encoding="utf-8")
    return report


def check_acceptance(report: ComparisonReport) -> list[str]:
    """Directional checks the CLI enforces under --check; empty means pass."""
    problems = []
    for key in sorted(report.arms[ARM_LOCAL]):
        if key not in report.arms[ARM_PARL]:
            problems.append(f"{key}: no PARL evaluation")
            continue
        local_rate = report.arms[ARM_LOCAL][key].overall_failure_rate
        parl_rate = report.arms[ARM_PARL][key].overall_failure_rate
        if parl_rate >= local_rate:
            problems.append(
                f"{key}: PARL failure rate {parl_rate:.4f} not below local {local_rate:.4f}"
            )
        elif local_rate > 0 and (local_rate - parl_rate) / local_rate < 0.30:
            problems.append(
                f"{key}: failure-rate reduction "
                f"{(local_rate - parl_rate) / local_rate:.2%} below 30%"
            )
    parl_err, _ = report.overall(ARM_PARL)
    central_err, _ = report.overall(ARM_CENTRALIZED)
    if parl_err > central_err:
        problems.append(
            f"PARL overall error {parl_err:.4f} above centralized {central_err:.4f}"
        )
    return problems
