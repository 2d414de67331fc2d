"""Imitation-learning policies over segmented scenarios.

The learner is closed-form ridge regression on a fixed featurization:
per-class occupancy fractions over a 4x4 spatial pooling of the segmented
class grid, plus two geometry features (lane-center offset and nearest
obstacle offset). Closed form keeps training deterministic and exactly
permutation-invariant, which the protocol layer relies on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import DegenerateInputError, EvaluationError, TrainingError
from .styles import N_CLASSES, StyleModel, style_affinity
from .world import (
    ClassId,
    DrivingSample,
    InstanceMap,
    Provenance,
    Scenario,
    SemanticMap,
    THING_CLASSES,
    segment,
)

POOL_ROWS = 4
POOL_COLS = 4
N_OCCUPANCY = N_CLASSES * POOL_ROWS * POOL_COLS  # 128
N_GEOMETRY = 2
N_FEATURES = N_OCCUPANCY + N_GEOMETRY  # 130; weights add a bias term
OBSTACLE_SENTINEL = 0.0
_OBSTACLE_SCALE = 4.0  # cells per unit of the obstacle feature
_LANE_BAND_ROWS = 8  # bottom rows used for the lane-offset estimate

DEFAULT_FAIL_THRESHOLD = 0.05


@dataclass(frozen=True, eq=False)
class FeatureVector:
    """Fixed-length input to the policy: 128 occupancy + 2 geometry values."""

    values: np.ndarray  # (N_FEATURES,) float64

    def __post_init__(self) -> None:
        vec = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        if vec.shape != (N_FEATURES,):
            raise DegenerateInputError(f"feature vector must have {N_FEATURES} entries")
        if not np.isfinite(vec).all():
            raise DegenerateInputError("feature vector holds non-finite values")
        occ = vec[:N_OCCUPANCY]
        if occ.min() < 0.0 or occ.max() > 1.0:
            raise DegenerateInputError("occupancy fractions outside [0, 1]")
        vec.setflags(write=False)
        object.__setattr__(self, "values", vec)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FeatureVector):
            return NotImplemented
        return np.array_equal(self.values, other.values)


def _pool_occupancy(classes: np.ndarray) -> np.ndarray:
    """Per-class cell fractions in each pool cell; fractions sum to 1."""
    h, w = classes.shape
    row_edges = np.linspace(0, h, POOL_ROWS + 1).astype(int)
    col_edges = np.linspace(0, w, POOL_COLS + 1).astype(int)
    out = np.empty((N_CLASSES, POOL_ROWS, POOL_COLS), dtype=np.float64)
    for i in range(POOL_ROWS):
        for j in range(POOL_COLS):
            block = classes[row_edges[i] : row_edges[i + 1], col_edges[j] : col_edges[j + 1]]
            counts = np.bincount(block.ravel(), minlength=N_CLASSES)
            out[:, i, j] = counts / block.size
    return out.reshape(-1)


def _lane_offset(classes: np.ndarray) -> float:
    """Signed road-center offset in the near band, in half-widths of the grid."""
    h, w = classes.shape
    band = classes[h - _LANE_BAND_ROWS :]
    road = np.isin(band, (ClassId.ROAD, ClassId.LANE_MARKING))
    if not road.any():
        raise DegenerateInputError("no road cells in the near band")
    cols = np.nonzero(road)[1]
    center = float(cols.mean())
    return (center - (w - 1) / 2.0) / (w / 2.0)


def _obstacle_offset(classes: np.ndarray) -> float:
    """Signed column offset of the nearest corridor-blocking car, in cells/4.

    A run of car cells counts as in-corridor when most of the cells directly
    below it are road or marking: a corridor car replaced road interior, so
    the row beneath it stays road, while roadside scatter sits on sidewalk
    or scenery. The same-row road span cannot be used here; a corridor car
    that reaches the road edge swallows the span on its side entirely.
    Returns OBSTACLE_SENTINEL when the corridor is clear.
    """
    h, w = classes.shape
    cars = classes == ClassId.CAR
    road_like = np.isin(classes, (ClassId.ROAD, ClassId.LANE_MARKING))
    in_road = np.zeros_like(cars)
    for row in range(h - 1):
        cols = np.flatnonzero(cars[row])
        if cols.size == 0:
            continue
        runs = np.split(cols, np.flatnonzero(np.diff(cols) > 1) + 1)
        for run in runs:
            below_road = int(road_like[row + 1, run].sum())
            if below_road * 2 > run.size:
                in_road[row, run] = True
    ys, xs = np.nonzero(in_road)
    if ys.size == 0:
        return OBSTACLE_SENTINEL
    nearest_row = ys.max()
    sel = ys == nearest_row
    centroid = float(xs[sel].mean())
    return (centroid - (w - 1) / 2.0) / _OBSTACLE_SCALE


def features_from_maps(semantic: SemanticMap) -> FeatureVector:
    """Featurize a known class grid directly (no segmentation step)."""
    classes = semantic.classes
    vec = np.empty(N_FEATURES, dtype=np.float64)
    vec[:N_OCCUPANCY] = _pool_occupancy(classes)
    vec[N_OCCUPANCY] = _lane_offset(classes)
    vec[N_OCCUPANCY + 1] = _obstacle_offset(classes)
    return FeatureVector(values=vec)


def featurize(sample: DrivingSample, style: StyleModel) -> FeatureVector:
    """Segment the sample's scenario under the given style, then featurize."""
    semantic, _ = segment(sample.scenario, style)
    return features_from_maps(semantic)


@dataclass(frozen=True, eq=False)
class PolicyModel:
    """Linear torque policy: weights = [bias, occupancy..., geometry...]."""

    weights: np.ndarray  # (N_FEATURES + 1,) float64
    ridge_lambda: float
    n_train: int
    provenance_mix: tuple[tuple[str, int], ...] = ()

    def __post_init__(self) -> None:
        w = np.ascontiguousarray(np.asarray(self.weights, dtype=np.float64))
        if w.shape != (N_FEATURES + 1,):
            raise TrainingError(f"weights must have {N_FEATURES + 1} entries")
        if not np.isfinite(w).all():
            raise TrainingError("non-finite weights")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "provenance_mix", tuple(self.provenance_mix))

    def predict(self, features: FeatureVector) -> float:
        raw = self.weights[0] + float(self.weights[1:] @ features.values)
        return float(min(1.0, max(0.0, raw)))

    def predict_many(self, features: Sequence[FeatureVector]) -> np.ndarray:
        mat = np.stack([f.values for f in features]) if features else np.zeros((0, N_FEATURES))
        raw = self.weights[0] + mat @ self.weights[1:]
        return np.clip(raw, 0.0, 1.0)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PolicyModel):
            return NotImplemented
        return (
            np.array_equal(self.weights, other.weights)
            and self.ridge_lambda == other.ridge_lambda
            and self.n_train == other.n_train
            and self.provenance_mix == other.provenance_mix
        )


def _design_matrix(dataset: Sequence[tuple[FeatureVector, float]]) -> tuple[np.ndarray, np.ndarray]:
    xs = np.stack([np.concatenate(([1.0], f.values)) for f, _ in dataset])
    ys = np.array([float(y) for _, y in dataset], dtype=np.float64)
    return xs, ys


def _canonical_rows(
    xs: np.ndarray, ys: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unique rows in byte order plus multiplicities.

    Sorting makes the accumulation independent of input order; collapsing
    duplicates into integer counts makes it independent of duplication too,
    because count/n and (c*count)/(c*n) are the same rational and IEEE
    division rounds equal rationals to identical floats.
    """
    keys = [row.tobytes() + y.tobytes() for row, y in zip(xs, ys)]
    order = sorted(range(len(keys)), key=keys.__getitem__)
    kept: list[int] = []
    counts: list[int] = []
    previous = None
    for idx in order:
        if keys[idx] == previous:
            counts[-1] += 1
        else:
            kept.append(idx)
            counts.append(1)
            previous = keys[idx]
    return xs[kept], ys[kept], np.asarray(counts, dtype=np.float64)


def _solve_ridge(
    xs: np.ndarray,
    ys: np.ndarray,
    counts: np.ndarray,
    ridge_lambda: float,
    proximal: Optional[tuple[float, np.ndarray]] = None,
) -> np.ndarray:
    """Normal equations, normalized by n; the bias column is not penalized.

    Rows are unique with multiplicities in counts, weighted count/n, so the
    gram is the sample mean regardless of duplication. With
    proximal=(beta, w0), solves the convex blend
    (1-beta) * ridge objective + beta * s * ||w - w0||^2, where s is the
    mean feature energy (trace of the gram over dimensions). The scale makes
    beta unitless: 0.5 weighs the local data and the prior evenly per unit
    of feature energy, instead of letting feature scaling decide.
    """
    d = xs.shape[1]
    row_weights = counts / counts.sum()
    gram = (xs * row_weights[:, None]).T @ xs
    rhs = (row_weights * ys) @ xs
    penalty = np.eye(d)
    penalty[0, 0] = 0.0
    lhs = gram + ridge_lambda * penalty
    if proximal is not None:
        beta, w0 = proximal
        scale = float(np.trace(gram)) / d
        if scale <= 0.0:
            scale = 1.0
        lhs = (1.0 - beta) * lhs + beta * scale * np.eye(d)
        rhs = (1.0 - beta) * rhs + beta * scale * w0
    try:
        return np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError:
        # Rank-deficient unregularized systems fall back to the pseudoinverse.
        return np.linalg.lstsq(lhs, rhs, rcond=None)[0]


def _provenance_mix(
    provenances: Optional[Sequence[Provenance]],
) -> tuple[tuple[str, int], ...]:
    if not provenances:
        return ()
    counts: dict[str, int] = {}
    for p in provenances:
        counts[p.value] = counts.get(p.value, 0) + 1
    return tuple(sorted(counts.items()))


def train(
    dataset: Sequence[tuple[FeatureVector, float]],
    ridge_lambda: float = 3e-3,
    provenances: Optional[Sequence[Provenance]] = None,
) -> PolicyModel:
    """Closed-form ridge fit of torque from features.

    Exactly permutation-invariant: rows are accumulated in a canonical sorted
    order, so reordering (or duplicating) the dataset cannot change the
    solution even at the bit level.
    """
    if not dataset:
        raise TrainingError("cannot train on an empty dataset")
    if ridge_lambda < 0.0:
        raise TrainingError("ridge_lambda must be nonnegative")
    xs, ys = _design_matrix(dataset)
    xs, ys, counts = _canonical_rows(xs, ys)
    weights = _solve_ridge(xs, ys, counts, ridge_lambda)
    return PolicyModel(
        weights=weights,
        ridge_lambda=float(ridge_lambda),
        n_train=len(dataset),
        provenance_mix=_provenance_mix(provenances),
    )


def fine_tune(
    shared: PolicyModel,
    local_dataset: Sequence[tuple[FeatureVector, float]],
    mix: float,
    provenances: Optional[Sequence[Provenance]] = None,
) -> PolicyModel:
    """Re-solve locally with a proximity pull of weight mix toward shared.

    mix=0 is plain local training; mix=1 returns the shared weights
    unchanged. Both endpoints are exact shortcut branches, and intermediate
    values interpolate the normal equations continuously.
    """
    if not 0.0 <= mix <= 1.0:
        raise TrainingError(f"mix must lie in [0, 1], got {mix}")
    if mix == 1.0:
        return PolicyModel(
            weights=shared.weights.copy(),
            ridge_lambda=shared.ridge_lambda,
            n_train=shared.n_train,
            provenance_mix=shared.provenance_mix,
        )
    if mix == 0.0:
        return train(local_dataset, shared.ridge_lambda, provenances)
    if not local_dataset:
        raise TrainingError("cannot fine-tune on an empty dataset")
    xs, ys = _design_matrix(local_dataset)
    xs, ys, counts = _canonical_rows(xs, ys)
    weights = _solve_ridge(
        xs, ys, counts, shared.ridge_lambda, proximal=(mix, shared.weights)
    )
    return PolicyModel(
        weights=weights,
        ridge_lambda=shared.ridge_lambda,
        n_train=len(local_dataset),
        provenance_mix=_provenance_mix(provenances),
    )


def crowdsource_labels(
    candidates: Sequence[tuple[Scenario, SemanticMap, InstanceMap]],
    local_models: Sequence[tuple[PolicyModel, StyleModel]],
    weighted: bool = True,
    candidate_styles: Optional[Mapping[int, StyleModel]] = None,
) -> list[float]:
    """Label scenarios with an ensemble of local policies.

    Each label is a weighted mean of member predictions. With weighting on,
    a member's weight is its style's affinity to the candidate's style
    (uniform when the candidate's style is unknown or weighting is off), so
    labels are always convex combinations of member outputs.
    """
    if not local_models:
        raise TrainingError("crowdsourcing requires at least one local model")
    labels = []
    for scenario, semantic, _ in candidates:
        feats = features_from_maps(semantic)
        preds = np.array([m.predict(feats) for m, _ in local_models])
        weights = np.ones(len(local_models))
        if weighted and candidate_styles and scenario.style in candidate_styles:
            cand_style = candidate_styles[scenario.style]
            weights = np.array(
                [style_affinity(cand_style, s) for _, s in local_models]
            )
            if weights.sum() <= 0.0:
                weights = np.ones(len(local_models))
        weights = weights / weights.sum()
        labels.append(float(np.dot(weights, preds)))
    return labels


@dataclass(frozen=True)
class EvaluationReport:
    """Per-task and overall torque errors plus failure rates at a threshold."""

    per_task_error: Mapping[str, float]
    per_task_failure_rate: Mapping[str, float]
    per_task_count: Mapping[str, int]
    overall_error: float
    overall_failure_rate: float
    fail_threshold: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "per_task_error", dict(self.per_task_error))
        object.__setattr__(self, "per_task_failure_rate", dict(self.per_task_failure_rate))
        object.__setattr__(self, "per_task_count", dict(self.per_task_count))
        for rate in self.per_task_failure_rate.values():
            if not 0.0 <= rate <= 1.0:
                raise EvaluationError("failure rate outside [0, 1]")

    def to_json_dict(self) -> dict:
        return {
            "per_task_error": dict(sorted(self.per_task_error.items())),
            "per_task_failure_rate": dict(sorted(self.per_task_failure_rate.items())),
            "per_task_count": dict(sorted(self.per_task_count.items())),
            "overall_error": self.overall_error,
            "overall_failure_rate": self.overall_failure_rate,
            "fail_threshold": self.fail_threshold,
        }

    def csv_row(self) -> str:
        cells = [f"{self.overall_error:.6f}", f"{self.overall_failure_rate:.6f}"]
        for task in sorted(self.per_task_error):
            cells.append(f"{self.per_task_error[task]:.6f}")
            cells.append(f"{self.per_task_failure_rate[task]:.6f}")
        return ",".join(cells)


def evaluate(
    model: PolicyModel,
    testset: Sequence[DrivingSample],
    style: StyleModel,
    fail_threshold: float = DEFAULT_FAIL_THRESHOLD,
) -> EvaluationReport:
    """Mean absolute torque error per task, with failure = error > threshold."""
    if not testset:
        raise EvaluationError("cannot evaluate on an empty testset")
    per_task_abs: dict[str, list[float]] = {}
    for sample in testset:
        if sample.label is None:
            raise EvaluationError("testset contains an unlabeled sample")
        pred = model.predict(featurize(sample, style))
        per_task_abs.setdefault(sample.task.value, []).append(abs(pred - sample.label))
    per_task_error = {}
    per_task_rate = {}
    per_task_count = {}
    total_err = 0.0
    total_fail = 0
    total_n = 0
    for task, errs in per_task_abs.items():
        per_task_error[task] = float(np.mean(errs))
        fails = sum(1 for e in errs if e > fail_threshold)
        per_task_rate[task] = fails / len(errs)
        per_task_count[task] = len(errs)
        total_err += sum(errs)
        total_fail += fails
        total_n += len(errs)
    return EvaluationReport(
        per_task_error=per_task_error,
        per_task_failure_rate=per_task_rate,
        per_task_count=per_task_count,
        overall_error=total_err / total_n,
        overall_failure_rate=total_fail / total_n,
        fail_threshold=fail_threshold,
    )
