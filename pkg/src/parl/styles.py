"""Per-agent appearance models.

Each agent owns a StyleModel mapping semantic classes to pixel statistics.
Rendering any semantic map under an agent's style produces a scenario in that
agent's visual domain, so one layout can be re-rendered across agents.
StyleModels are immutable and safe to share across threads.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from .errors import FittingError

if TYPE_CHECKING:
    from .augment import AugmentationCandidate
    from .world import DrivingSample, Scenario

N_CLASSES = 8

# Per-channel Chebyshev separation floor between class means. Classification
# is exact as long as noise amplitude stays below half this floor.
DEFAULT_SEPARATION_FLOOR = 0.05

# Base palette. Infrastructure classes (road, marking, sky, sidewalk) use
# colors far from everything else; thing/scenery classes share a luma band
# around 0.43 but carry strong, distinct chroma.
_BASE_PALETTE = np.array(
    [
        [0.30, 0.30, 0.32],  # road
        [0.95, 0.95, 0.85],  # lane marking
        [0.90, 0.20, 0.20],  # car
        [0.85, 0.40, 0.08],  # pedestrian
        [0.62, 0.42, 0.26],  # building
        [0.12, 0.78, 0.40],  # vegetation
        [0.45, 0.70, 0.98],  # sky
        [0.65, 0.65, 0.68],  # sidewalk
    ],
    dtype=np.float64,
)
# Classes whose appearance genuinely differs between agents' domains. Their
# chroma is remapped per agent; infrastructure only gets small jitter.
_VOLATILE_CLASSES = (2, 3, 4, 5)
_STABLE_JITTER = 0.02
_DEFAULT_SPREAD = 0.02
# Validation margin for a candidate palette: keep fitted means (which wander
# by at most the texture spread) comfortably above the separation floor.
_PALETTE_MARGIN = 0.10


def _pairwise_min_separation(means: np.ndarray) -> float:
    """Smallest pairwise Chebyshev distance between class means."""
    n = means.shape[0]
    best = np.inf
    for i in range(n):
        for j in range(i + 1, n):
            best = min(best, float(np.max(np.abs(means[i] - means[j]))))
    return best


@dataclass(frozen=True, eq=False)
class StyleModel:
    """Class-to-appearance statistics for one agent's visual domain.

    class_means holds one 3-channel mean per class; rows of NaN mark classes
    the style cannot render. class_spreads bounds the per-channel amplitude
    of texture noise. Immutable after construction.
    """

    style: int
    class_means: np.ndarray  # (N_CLASSES, 3) float64, NaN row = class absent
    class_spreads: np.ndarray  # (N_CLASSES,) float64
    texture_seed: int
    separation_floor: float = DEFAULT_SEPARATION_FLOOR

    def __post_init__(self) -> None:
        means = np.asarray(self.class_means, dtype=np.float64)
        spreads = np.asarray(self.class_spreads, dtype=np.float64)
        if means.shape != (N_CLASSES, 3):
            raise FittingError(f"class_means must be ({N_CLASSES}, 3), got {means.shape}")
        if spreads.shape != (N_CLASSES,):
            raise FittingError(f"class_spreads must be ({N_CLASSES},), got {spreads.shape}")
        present = ~np.isnan(means).any(axis=1)
        if present.any():
            sep = _pairwise_min_separation(means[present])
            if sep < self.separation_floor - 1e-12:
                raise FittingError(
                    f"class means separated by {sep:.4f}, "
                    f"below the {self.separation_floor} floor"
                )
        if np.any(spreads[present] >= self.separation_floor / 2):
            raise FittingError("class_spreads must stay below separation_floor / 2")
        means.setflags(write=False)
        spreads.setflags(write=False)
        object.__setattr__(self, "class_means", means)
        object.__setattr__(self, "class_spreads", spreads)

    def has_class(self, class_id: int) -> bool:
        return not bool(np.isnan(self.class_means[class_id]).any())

    def present_classes(self) -> np.ndarray:
        return np.flatnonzero(~np.isnan(self.class_means).any(axis=1))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, StyleModel):
            return NotImplemented
        return (
            self.style == other.style
            and self.texture_seed == other.texture_seed
            and self.separation_floor == other.separation_floor
            and np.array_equal(self.class_means, other.class_means, equal_nan=True)
            and np.array_equal(self.class_spreads, other.class_spreads)
        )


def _signed_permutations() -> list[np.ndarray]:
    """All 48 signed 3x3 permutation matrices, in a fixed order."""
    mats = []
    for perm in ((0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)):
        for bits in range(8):
            m = np.zeros((3, 3))
            for row, col in enumerate(perm):
                m[row, col] = -1.0 if bits & (1 << row) else 1.0
            mats.append(m)
    return mats


_CHROMA_MAPS = _signed_permutations()


def built_in_style(style_id: int, seed: int = 0) -> StyleModel:
    """Deterministic agent palette with a per-agent visual domain.

    Infrastructure classes get a small seeded jitter; volatile classes keep
    their luma but have their chroma remapped by a seeded signed channel
    permutation, so agents' domains disagree most about exactly the classes
    that matter for driving. Within one agent the remap is an isometry, so
    class separation (and with it exact segmentation) is preserved.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, style_id, 0x57FE]))
    jitter = rng.uniform(-_STABLE_JITTER, _STABLE_JITTER, size=(N_CLASSES, 3))
    means = np.clip(_BASE_PALETTE + jitter, 0.0, 1.0)
    floor = DEFAULT_SEPARATION_FLOOR + _PALETTE_MARGIN
    for idx in rng.permutation(len(_CHROMA_MAPS)):
        candidate = means.copy()
        for c in _VOLATILE_CLASSES:
            luma = float(means[c].mean())
            chroma = means[c] - luma
            candidate[c] = np.clip(luma + _CHROMA_MAPS[idx] @ chroma, 0.0, 1.0)
        if _pairwise_min_separation(candidate) >= floor:
            means = candidate
            break
    spreads = np.full(N_CLASSES, _DEFAULT_SPREAD)
    texture_seed = int(rng.integers(0, 2**63))
    return StyleModel(
        style=style_id,
        class_means=means,
        class_spreads=spreads,
        texture_seed=texture_seed,
    )


def fit_style(
    samples: Sequence["DrivingSample"],
    separation_floor: float = DEFAULT_SEPARATION_FLOOR,
) -> StyleModel:
    """Fit class appearance statistics from an agent's labeled samples.

    Means are the per-class averages of scenario pixels under that class's
    cells; spreads are per-class standard deviations clamped below the
    separation bound. Every palette class must appear somewhere in the
    sample union, and the fitted means must respect the separation floor.
    """
    if not samples:
        raise FittingError("fit_style needs at least one sample")
    sums = np.zeros((N_CLASSES, 3))
    sq_sums = np.zeros((N_CLASSES, 3))
    counts = np.zeros(N_CLASSES, dtype=np.int64)
    style_ids = set()
    for sample in samples:
        pixels = sample.scenario.pixels.astype(np.float64)
        classes = sample.semantic.classes
        style_ids.add(sample.scenario.style)
        for c in range(N_CLASSES):
            mask = classes == c
            n = int(mask.sum())
            if n == 0:
                continue
            vals = pixels[mask]
            sums[c] += vals.sum(axis=0)
            sq_sums[c] += (vals**2).sum(axis=0)
            counts[c] += n
    missing = [c for c in range(N_CLASSES) if counts[c] == 0]
    if missing:
        raise FittingError(f"no pixel coverage for classes {missing}")
    means = sums / counts[:, None]
    variances = np.maximum(sq_sums / counts[:, None] - means**2, 0.0)
    spreads = np.sqrt(variances.max(axis=1))
    spread_cap = separation_floor / 2 * (1 - 1e-9)
    spreads = np.minimum(spreads, spread_cap)
    sep = _pairwise_min_separation(means)
    if sep < separation_floor:
        raise FittingError(
            f"fitted class means separated by only {sep:.4f}; "
            f"styles need {separation_floor} per-channel separation"
        )
    if len(style_ids) != 1:
        raise FittingError(f"samples span styles {sorted(style_ids)}, expected one")
    texture_seed = zlib.crc32(means.tobytes()) ^ (next(iter(style_ids)) << 32)
    return StyleModel(
        style=next(iter(style_ids)),
        class_means=means,
        class_spreads=spreads,
        texture_seed=texture_seed,
        separation_floor=separation_floor,
    )


def cross_render(
    candidate: "AugmentationCandidate", style: StyleModel, seed: int
) -> "Scenario":
    """Render an augmented layout under another agent's style."""
    from .world import render

    return render(candidate.semantic, candidate.instances, style, seed)


def style_affinity(a: StyleModel, b: StyleModel, bandwidth: float = 0.25) -> float:
    """Similarity in (0, 1], from mean distance between shared class means."""
    shared = [c for c in range(N_CLASSES) if a.has_class(c) and b.has_class(c)]
    if not shared:
        return 1.0
    d = float(np.mean(np.abs(a.class_means[shared] - b.class_means[shared])))
    return float(np.exp(-d / bandwidth))


def style_to_json(style: StyleModel) -> str:
    """JSON documentation export of a style's class means."""
    payload = {
        "style": style.style,
        "texture_seed": style.texture_seed,
        "separation_floor": style.separation_floor,
        "class_means": [
            None if not style.has_class(c) else [float(v) for v in style.class_means[c]]
            for c in range(N_CLASSES)
        ],
        "class_spreads": [float(v) for v in style.class_spreads],
    }
    return json.dumps(payload, indent=2, sort_keys=True)


def styles_for_agents(style_ids: Iterable[int], seed: int = 0) -> dict[int, StyleModel]:
    """Build one deterministic built-in style per agent id."""
    out = {}
    for sid in style_ids:
        if sid in out:
            raise FittingError(f"duplicate style id {sid}")
        out[sid] = built_in_style(sid, seed)
    return out
