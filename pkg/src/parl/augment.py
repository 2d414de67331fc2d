"""Semantic-dimension data augmentation with plausibility filtering.

Pipeline: fit a placement distribution (where) and a shape template library
(what) from an agent's real layouts, insert new instances into copies of a
layout, then filter candidates through a multi-scale plausibility scorer
calibrated on real layouts against internally generated corruptions. Only
candidates scoring at or above the threshold survive.

Everything here is statistics over discrete grids: placement is a smoothed
histogram over (context, position, scale) bins, shapes are masks harvested
from real instances, and the scorer aggregates class-adjacency, placement,
size, and shape-regularity evidence at three pooling scales.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from .errors import DegenerateInputError, FittingError
from .styles import N_CLASSES
from .world import (
    BACKGROUND_ID,
    ClassId,
    DrivingSample,
    InstanceMap,
    InstanceRecord,
    SemanticMap,
    THING_CLASSES,
)

Layout = tuple[SemanticMap, InstanceMap]

N_CTX_BINS = 4
POS_BINS = 8  # position histogram is POS_BINS x POS_BINS
N_SCALE_BINS = 3
POOL_FACTORS = (1, 2, 4)
SCORE_CAP = 1.0 - 1e-6

_CONN4 = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def scale_bin_of(width: int, height: int) -> int:
    """Scale bin by the larger bbox dimension: <=2, <=5, larger."""
    m = max(width, height)
    if m <= 2:
        return 0
    if m <= 5:
        return 1
    return 2


def _depth_map(classes: np.ndarray) -> np.ndarray:
    """Signed distance to the road span per cell.

    Positive depths count cells inside the span (1 at the edge), negative
    depths count cells outside it. Rows without road are deeply off-road.
    """
    h, w = classes.shape
    depth = np.full((h, w), -w, dtype=np.int32)
    road_like = np.isin(classes, (ClassId.ROAD, ClassId.LANE_MARKING))
    cols = np.arange(w)
    for row in range(h):
        rc = np.flatnonzero(road_like[row])
        if rc.size == 0:
            continue
        lo, hi = rc.min(), rc.max()
        inside = np.minimum(cols - lo, hi - cols) + 1
        outside = -np.where(cols < lo, lo - cols, cols - hi)
        depth[row] = np.where((cols >= lo) & (cols <= hi), inside, outside)
    return depth


def _ctx_bin_from_depth(depth: np.ndarray) -> np.ndarray:
    """Context bins: 0 deep road, 1 road edge, 2 roadside strip, 3 far off."""
    out = np.empty(depth.shape, dtype=np.int8)
    out[depth >= 3] = 0
    out[(depth >= 1) & (depth <= 2)] = 1
    out[(depth <= -1) & (depth >= -3)] = 2
    out[depth <= -4] = 3
    return out


def _pos_bins(rows: np.ndarray, cols: np.ndarray, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    py = np.minimum(rows * POS_BINS // h, POS_BINS - 1)
    px = np.minimum(cols * POS_BINS // w, POS_BINS - 1)
    return py, px


def _record_mask(instances: InstanceMap, record: InstanceRecord) -> np.ndarray:
    return instances.instance_grid == record.instance_id


def _centroid(mask: np.ndarray) -> tuple[int, int]:
    ys, xs = np.nonzero(mask)
    return int(round(ys.mean())), int(round(xs.mean()))


def _mask_ctx_bin(depth: np.ndarray, mask: np.ndarray) -> int:
    """Context bin of a blob by its closest approach to the road.

    The maximum depth over the mask keeps wide roadside blobs in the
    roadside bin even when their far cells reach deep into the scenery.
    """
    return int(_ctx_bin_from_depth(np.array([[depth[mask].max()]]))[0, 0])


FILL_BIN_EDGES = (0.55, 0.7, 0.85)
N_FILL_BINS = len(FILL_BIN_EDGES) + 1


def _fill_bin(fill: float) -> int:
    return int(np.searchsorted(FILL_BIN_EDGES, fill, side="right"))


def _contact_flags(instances: InstanceMap) -> dict[int, bool]:
    """Whether each record touches another record of the same class.

    Generated worlds and the insertion sampler both keep a one-cell gap
    between same-class instances, so contact only ever comes from corrupted
    layouts.
    """
    grid = instances.instance_grid
    h, w = grid.shape
    by_class: dict[int, set[int]] = {}
    for rec in instances.records:
        by_class.setdefault(int(rec.class_id), set()).add(rec.instance_id)
    flags: dict[int, bool] = {}
    for rec in instances.records:
        mask = grid == rec.instance_id
        peers = by_class[int(rec.class_id)] - {rec.instance_id}
        if not peers or not mask.any():
            flags[rec.instance_id] = False
            continue
        touched = False
        ys, xs = np.nonzero(mask)
        for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            ny, nx = ys + dy, xs + dx
            ok = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
            neighbor_ids = grid[ny[ok], nx[ok]]
            if np.isin(neighbor_ids, list(peers)).any():
                touched = True
                break
        flags[rec.instance_id] = touched
    return flags


# ---------------------------------------------------------------------------
# Where prediction
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class WherePredictor:
    """Per-class placement histogram over (context, position, scale) bins.

    counts holds raw observations; probs adds additive smoothing over
    observed bins and their position-adjacent neighbors, normalized to sum
    to 1 per fitted class.
    """

    alpha: float
    counts: np.ndarray  # (N_CLASSES, N_CTX_BINS, POS_BINS*POS_BINS, N_SCALE_BINS)
    probs: np.ndarray  # same shape, normalized per fitted class
    fitted: np.ndarray  # (N_CLASSES,) bool

    def __post_init__(self) -> None:
        shape = (N_CLASSES, N_CTX_BINS, POS_BINS * POS_BINS, N_SCALE_BINS)
        for name in ("counts", "probs"):
            arr = np.ascontiguousarray(np.asarray(getattr(self, name), dtype=np.float64))
            if arr.shape != shape:
                raise FittingError(f"{name} must have shape {shape}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        fitted = np.ascontiguousarray(np.asarray(self.fitted, dtype=bool))
        fitted.setflags(write=False)
        object.__setattr__(self, "fitted", fitted)
        for c in range(N_CLASSES):
            if fitted[c]:
                total = self.probs[c].sum()
                if abs(total - 1.0) > 1e-9:
                    raise FittingError(f"class {c} probabilities sum to {total}")

    def class_counts(self) -> np.ndarray:
        return self.counts.sum(axis=(1, 2, 3))

    def sample_bin(self, class_id: int, rng: np.random.Generator) -> tuple[int, int, int, int]:
        """Draw (ctx, pos_y, pos_x, scale) for a class; class must be fitted."""
        if not self.fitted[class_id]:
            raise FittingError(f"where-predictor not fitted for class {class_id}")
        flat = self.probs[class_id].ravel()
        idx = int(np.searchsorted(np.cumsum(flat), rng.random(), side="right"))
        idx = min(idx, flat.size - 1)
        ctx, pos, scale = np.unravel_index(idx, self.probs[class_id].shape)
        return int(ctx), int(pos) // POS_BINS, int(pos) % POS_BINS, int(scale)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, WherePredictor):
            return NotImplemented
        return (
            self.alpha == other.alpha
            and np.array_equal(self.counts, other.counts)
            and np.array_equal(self.probs, other.probs)
            and np.array_equal(self.fitted, other.fitted)
        )

    def _state_arrays(self) -> dict[str, np.ndarray]:
        return {
            "alpha": np.array([self.alpha]),
            "counts": self.counts,
            "probs": self.probs,
            "fitted": self.fitted.astype(np.uint8),
        }

    @classmethod
    def _from_state(cls, arrays: dict[str, np.ndarray]) -> "WherePredictor":
        return cls(
            alpha=float(arrays["alpha"][0]),
            counts=arrays["counts"],
            probs=arrays["probs"],
            fitted=arrays["fitted"].astype(bool),
        )


def _smooth_and_normalize(counts: np.ndarray, alpha: float) -> np.ndarray:
    """Smooth observed bins and their position neighbors, then normalize."""
    grid = counts.reshape(N_CLASSES, N_CTX_BINS, POS_BINS, POS_BINS, N_SCALE_BINS)
    observed = grid > 0
    support = observed.copy()
    for axis in (2, 3):  # 4-neighborhood in the position plane only
        for shift in (-1, 1):
            support |= np.roll(observed, shift, axis=axis) & _roll_valid(
                grid.shape, axis, shift
            )
    smoothed = grid + alpha * support
    flat = smoothed.reshape(N_CLASSES, -1)
    totals = flat.sum(axis=1, keepdims=True)
    out = np.where(totals > 0, flat / np.where(totals == 0, 1.0, totals), 0.0)
    return out.reshape(counts.shape)


def _roll_valid(shape: tuple, axis: int, shift: int) -> np.ndarray:
    """Mask killing wrap-around entries introduced by np.roll."""
    valid = np.ones(shape, dtype=bool)
    index = [slice(None)] * len(shape)
    index[axis] = 0 if shift == 1 else -1
    valid[tuple(index)] = False
    return valid


def fit_where(layouts: Sequence[Layout], alpha: float = 0.5) -> WherePredictor:
    """Fit placement histograms from the instances observed in real layouts."""
    if not layouts:
        raise FittingError("fit_where needs at least one layout")
    counts = np.zeros((N_CLASSES, N_CTX_BINS, POS_BINS * POS_BINS, N_SCALE_BINS))
    n_instances = 0
    for semantic, instances in layouts:
        depth = _depth_map(semantic.classes)
        ctx_map = _ctx_bin_from_depth(depth)
        h, w = semantic.classes.shape
        for rec in instances.records:
            mask = _record_mask(instances, rec)
            if not mask.any():
                continue
            r, c = _centroid(mask)
            py, px = _pos_bins(np.array([r]), np.array([c]), h, w)
            sbin = scale_bin_of(rec.bbox[2], rec.bbox[3])
            counts[rec.class_id, ctx_map[r, c], py[0] * POS_BINS + px[0], sbin] += 1
            n_instances += 1
    if n_instances == 0:
        raise FittingError("no instances found in the provided layouts")
    probs = _smooth_and_normalize(counts, alpha)
    fitted = counts.sum(axis=(1, 2, 3)) > 0
    return WherePredictor(alpha=alpha, counts=counts, probs=probs, fitted=fitted)


# ---------------------------------------------------------------------------
# What prediction
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class WhatPredictor:
    """Shape template library: per class and scale bin, harvested masks."""

    templates: tuple[tuple[int, int, np.ndarray], ...]  # (class, scale_bin, mask)

    def __post_init__(self) -> None:
        frozen = []
        for cls, sbin, mask in self.templates:
            m = np.ascontiguousarray(np.asarray(mask, dtype=bool))
            if not m.any():
                raise FittingError("empty template mask")
            _, n = ndimage.label(m, structure=_CONN4)
            if n != 1:
                raise FittingError("template mask must be a single component")
            m.setflags(write=False)
            frozen.append((int(cls), int(sbin), m))
        object.__setattr__(self, "templates", tuple(frozen))

    def classes(self) -> tuple[int, ...]:
        return tuple(sorted({cls for cls, _, _ in self.templates}))

    def pick(
        self, class_id: int, scale_bin: int, rng: np.random.Generator
    ) -> Optional[np.ndarray]:
        """A template for the class, preferring the requested scale bin."""
        for sbin in sorted(range(N_SCALE_BINS), key=lambda s: abs(s - scale_bin)):
            pool = [m for cls, sb, m in self.templates if cls == class_id and sb == sbin]
            if pool:
                return pool[int(rng.integers(len(pool)))]
        return None

    def max_dims(self, class_id: int) -> tuple[int, int]:
        """Largest observed (height, width) for a class; (0, 0) if unseen."""
        hs = [m.shape[0] for cls, _, m in self.templates if cls == class_id]
        ws = [m.shape[1] for cls, _, m in self.templates if cls == class_id]
        return (max(hs), max(ws)) if hs else (0, 0)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, WhatPredictor):
            return NotImplemented
        if len(self.templates) != len(other.templates):
            return False
        return all(
            a[0] == b[0] and a[1] == b[1] and np.array_equal(a[2], b[2])
            for a, b in zip(self.templates, other.templates)
        )

    def _state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {
            "meta": np.array(
                [[cls, sbin] for cls, sbin, _ in self.templates], dtype=np.int64
            ).reshape(len(self.templates), 2),
        }
        for i, (_, _, mask) in enumerate(self.templates):
            out[f"mask{i}"] = mask.astype(np.uint8)
        return out

    @classmethod
    def _from_state(cls, arrays: dict[str, np.ndarray]) -> "WhatPredictor":
        meta = arrays["meta"].reshape(-1, 2)
        templates = [
            (int(meta[i, 0]), int(meta[i, 1]), arrays[f"mask{i}"].astype(bool))
            for i in range(meta.shape[0])
        ]
        return cls(templates=tuple(templates))


def fit_what(layouts: Sequence[Layout]) -> WhatPredictor:
    """Harvest connected instance masks from real layouts as templates."""
    if not layouts:
        raise FittingError("fit_what needs at least one layout")
    templates = []
    seen: set[int] = set()
    for _, instances in layouts:
        for rec in instances.records:
            mask = _record_mask(instances, rec)
            if not mask.any():
                continue
            seen.add(int(rec.class_id))
            ys, xs = np.nonzero(mask)
            crop = mask[ys.min() : ys.max() + 1, xs.min() : xs.max() + 1]
            _, n = ndimage.label(crop, structure=_CONN4)
            if n != 1:
                continue  # fragmented masks make unusable templates
            sbin = scale_bin_of(crop.shape[1], crop.shape[0])
            templates.append((int(rec.class_id), sbin, crop.copy()))
    if not templates:
        raise FittingError("no instances found in the provided layouts")
    have = {cls for cls, _, _ in templates}
    missing = seen - have
    if missing:
        raise FittingError(f"no usable templates for classes {sorted(missing)}")
    return WhatPredictor(templates=tuple(templates))


# ---------------------------------------------------------------------------
# Candidates and insertion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentationCandidate:
    """A layout with newly inserted instances, awaiting or carrying a score."""

    semantic: SemanticMap
    instances: InstanceMap
    inserted: tuple[InstanceRecord, ...]
    source_sample_id: int
    score: Optional[float] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "inserted", tuple(self.inserted))
        known = set(self.instances.records)
        for rec in self.inserted:
            if rec not in known:
                raise DegenerateInputError("inserted record missing from instance map")
        if self.score is not None and not (0.0 <= self.score <= 1.0):
            raise DegenerateInputError(f"score {self.score} outside [0, 1]")


def _resize_mask(mask: np.ndarray, sy: float, sx: float) -> np.ndarray:
    """Nearest-neighbor upscale; factors >= 1 preserve 4-connectivity."""
    h, w = mask.shape
    nh, nw = max(1, int(round(h * sy))), max(1, int(round(w * sx)))
    rows = np.minimum((np.arange(nh) / sy).astype(int), h - 1)
    cols = np.minimum((np.arange(nw) / sx).astype(int), w - 1)
    return mask[np.ix_(rows, cols)]


def sample_insertion(
    where: WherePredictor,
    what: WhatPredictor,
    base: Layout,
    class_id: ClassId,
    seed: int,
    max_attempts: int = 8,
) -> Optional[AugmentationCandidate]:
    """Insert one instance of class_id into a copy of the base layout.

    Draws a (context, position, scale) bin, picks a matching anchor cell and
    template, applies a mild scale jitter, and writes the mask where it fits
    without touching existing instances (one-cell gap to same-class cells so
    components stay separable). Returns None if no attempt fits.
    """
    semantic, instances = base
    classes = semantic.classes
    h, w = classes.shape
    depth = _depth_map(classes)
    ctx_map = _ctx_bin_from_depth(depth)
    occupied = instances.instance_grid != BACKGROUND_ID
    rng = np.random.default_rng(
        np.random.SeedSequence([int(seed) & (2**63 - 1), int(class_id), 0xA06])
    )
    for _ in range(max_attempts):
        ctx, py, px, sbin = where.sample_bin(int(class_id), rng)
        template = what.pick(int(class_id), sbin, rng)
        if template is None:
            return None
        # Scale jitter capped by the largest real instance of the class, so
        # inserted sizes never leave the observed size distribution.
        max_h, max_w = what.max_dims(int(class_id))
        cap_y = min(1.4, max_h / template.shape[0])
        cap_x = min(1.4, max_w / template.shape[1])
        sy = float(rng.uniform(1.0, cap_y)) if cap_y > 1.0 else 1.0
        sx = float(rng.uniform(1.0, cap_x)) if cap_x > 1.0 else 1.0
        mask = _resize_mask(template, sy, sx)
        y_lo, y_hi = py * h // POS_BINS, (py + 1) * h // POS_BINS
        x_lo, x_hi = px * w // POS_BINS, (px + 1) * w // POS_BINS
        window_ok = (ctx_map[y_lo:y_hi, x_lo:x_hi] == ctx) & ~occupied[y_lo:y_hi, x_lo:x_hi]
        anchors = np.argwhere(window_ok)
        if anchors.size == 0:
            continue
        r, c = anchors[int(rng.integers(anchors.shape[0]))]
        r, c = int(r) + y_lo, int(c) + x_lo
        mh, mw = mask.shape
        top, left = r - (mh - 1) // 2, c - (mw - 1) // 2
        if top < 0 or left < 0 or top + mh > h or left + mw > w:
            continue
        ys, xs = np.nonzero(mask)
        ys, xs = ys + top, xs + left
        if occupied[ys, xs].any():
            continue
        ry_lo, ry_hi = max(top - 1, 0), min(top + mh + 1, h)
        rx_lo, rx_hi = max(left - 1, 0), min(left + mw + 1, w)
        if (classes[ry_lo:ry_hi, rx_lo:rx_hi] == class_id).any():
            continue  # keep a separation gap to same-class cells
        new_classes = classes.copy()
        new_classes[ys, xs] = class_id
        new_grid = instances.instance_grid.copy()
        new_id = instances.next_free_id()
        new_grid[ys, xs] = new_id
        record = InstanceRecord(
            instance_id=new_id,
            class_id=class_id,
            bbox=(int(xs.min()), int(ys.min()), mw, mh),
            affine=(float(left), float(top), sx, sy),
        )
        return AugmentationCandidate(
            semantic=SemanticMap(classes=new_classes),
            instances=InstanceMap(
                instance_grid=new_grid, records=instances.records + (record,)
            ),
            inserted=(record,),
            source_sample_id=0,
        )
    return None


# ---------------------------------------------------------------------------
# Plausibility scoring
# ---------------------------------------------------------------------------


def _mode_pool(classes: np.ndarray, factor: int) -> np.ndarray:
    """Majority class per factor x factor block, ties to the lowest id."""
    if factor == 1:
        return classes
    h, w = classes.shape
    ph, pw = -h % factor, -w % factor
    padded = np.pad(classes, ((0, ph), (0, pw)), mode="edge")
    hh, ww = padded.shape[0] // factor, padded.shape[1] // factor
    blocks = padded.reshape(hh, factor, ww, factor)
    votes = np.stack(
        [(blocks == c).sum(axis=(1, 3)) for c in range(N_CLASSES)], axis=0
    )
    return votes.argmax(axis=0).astype(np.uint8)


def _any_pool(mask: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return mask
    h, w = mask.shape
    ph, pw = -h % factor, -w % factor
    padded = np.pad(mask, ((0, ph), (0, pw)), mode="constant")
    hh, ww = padded.shape[0] // factor, padded.shape[1] // factor
    return padded.reshape(hh, factor, ww, factor).any(axis=(1, 3))


def _adjacency_counts(classes: np.ndarray) -> np.ndarray:
    counts = np.zeros((N_CLASSES, N_CLASSES))
    pairs = [
        (classes[:, :-1].ravel(), classes[:, 1:].ravel()),
        (classes[:-1, :].ravel(), classes[1:, :].ravel()),
    ]
    for a, b in pairs:
        np.add.at(counts, (a, b), 1)
        np.add.at(counts, (b, a), 1)
    return counts


@dataclass(frozen=True, eq=False)
class _ScaleStats:
    """Evidence tables at one pooling scale."""

    adjacency: np.ndarray  # (N_CLASSES, N_CLASSES) pair counts
    ctx_freq: np.ndarray  # (N_CLASSES, N_CTX_BINS) instance context counts
    size_freq: np.ndarray  # (N_CLASSES, N_SCALE_BINS) instance size counts
    fill_freq: np.ndarray  # (N_CLASSES, N_FILL_BINS) bbox fill-ratio counts

    def __post_init__(self) -> None:
        for name in ("adjacency", "ctx_freq", "size_freq", "fill_freq"):
            arr = np.ascontiguousarray(np.asarray(getattr(self, name), dtype=np.float64))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, _ScaleStats):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, n), getattr(other, n))
            for n in ("adjacency", "ctx_freq", "size_freq", "fill_freq")
        )


def _fit_scale_stats(layouts: Sequence[Layout], factor: int) -> _ScaleStats:
    adjacency = np.zeros((N_CLASSES, N_CLASSES))
    ctx_freq = np.zeros((N_CLASSES, N_CTX_BINS))
    size_freq = np.zeros((N_CLASSES, N_SCALE_BINS))
    fill_freq = np.zeros((N_CLASSES, N_FILL_BINS))
    for semantic, instances in layouts:
        pooled = _mode_pool(semantic.classes, factor)
        adjacency += _adjacency_counts(pooled)
        depth = _depth_map(pooled)
        for rec in instances.records:
            mask = _any_pool(_record_mask(instances, rec), factor)
            if not mask.any():
                continue
            ys, xs = np.nonzero(mask)
            bw, bh = int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1)
            ctx_freq[rec.class_id, _mask_ctx_bin(depth, mask)] += 1
            size_freq[rec.class_id, scale_bin_of(bw, bh)] += 1
            fill_freq[rec.class_id, _fill_bin(mask.sum() / (bw * bh))] += 1
    return _ScaleStats(
        adjacency=adjacency, ctx_freq=ctx_freq, size_freq=size_freq, fill_freq=fill_freq
    )


EVIDENCE_FLOOR = 0.8


def _evidence(table: np.ndarray, row: int, col: int) -> float:
    """0 for never-observed evidence, else a value in [floor, 1].

    The floor separates "rare but real" from "never seen": any observed bin
    beats every unobserved bin by a fixed gap, which is what the corruption
    calibration leans on.
    """
    peak = table[row].max()
    if peak <= 0 or table[row, col] <= 0:
        return 0.0
    return EVIDENCE_FLOOR + (1.0 - EVIDENCE_FLOOR) * float(table[row, col] / peak)


def _ring_affinity(stats: _ScaleStats, pooled: np.ndarray, mask: np.ndarray, cls: int) -> float:
    """Mean adjacency evidence between mask cells and outside neighbors."""
    peak = stats.adjacency[cls].max()
    if peak <= 0:
        return 0.0
    h, w = pooled.shape
    total, count = 0.0, 0
    ys, xs = np.nonzero(mask)
    for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        ny, nx = ys + dy, xs + dx
        ok = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
        ny, nx = ny[ok], nx[ok]
        outside = ~mask[ny, nx]
        neighbor_counts = stats.adjacency[cls][pooled[ny[outside], nx[outside]]]
        seen = neighbor_counts > 0
        vals = np.where(
            seen, EVIDENCE_FLOOR + (1.0 - EVIDENCE_FLOOR) * neighbor_counts / peak, 0.0
        )
        total += float(vals.sum())
        count += int(outside.sum())
    return total / count if count else 1.0


def _bbox_of(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1)


def _global_adjacency_score(stats: _ScaleStats, pooled: np.ndarray) -> float:
    peaks = stats.adjacency.max(axis=1)
    safe = np.where(peaks > 0, peaks, 1.0)
    norm = np.where(
        stats.adjacency > 0,
        EVIDENCE_FLOOR + (1.0 - EVIDENCE_FLOOR) * stats.adjacency / safe[:, None],
        0.0,
    )
    a = pooled[:, :-1].ravel()
    b = pooled[:, 1:].ravel()
    c = pooled[:-1, :].ravel()
    d = pooled[1:, :].ravel()
    vals = np.concatenate([norm[a, b], norm[c, d]])
    return float(vals.mean()) if vals.size else 0.0


@dataclass(frozen=True, eq=False)
class PlausibilityScorer:
    """Three-scale layout judge with threshold acceptance.

    Four evidence components per instance: placement context (box), boundary
    adjacency (instance), size frequency (affine), and fill-ratio bin with
    connectivity (shape). Observed evidence maps to [EVIDENCE_FLOOR, 1]
    while never-observed evidence scores 0, and two hard gates multiply the
    per-instance score down: same-class contact (instances in real layouts
    always keep a gap) and a never-observed context or size bin. The layout
    score at a scale is the weakest instance's weighted component sum; the
    raw score is the mean over scales, then an affine calibration maps it to
    [0, 1) so real layouts clear the threshold with margin.
    """

    scale_stats: tuple[_ScaleStats, ...]
    threshold: float
    weights: np.ndarray  # (4,) box, instance, affine, shape
    calibration: np.ndarray  # (2,) slope, intercept

    def __post_init__(self) -> None:
        if len(self.scale_stats) != len(POOL_FACTORS):
            raise FittingError(f"expected {len(POOL_FACTORS)} scale stats")
        if not 0.0 < self.threshold < 1.0:
            raise FittingError(f"threshold {self.threshold} outside (0, 1)")
        w = np.ascontiguousarray(np.asarray(self.weights, dtype=np.float64))
        if w.shape != (4,) or (w < 0).any() or abs(w.sum() - 1.0) > 1e-9:
            raise FittingError("weights must be 4 nonnegative values summing to 1")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        calib = np.ascontiguousarray(np.asarray(self.calibration, dtype=np.float64))
        if calib.shape != (2,):
            raise FittingError("calibration must be (slope, intercept)")
        calib.setflags(write=False)
        object.__setattr__(self, "calibration", calib)
        object.__setattr__(self, "scale_stats", tuple(self.scale_stats))

    # -- scoring --

    def _instance_score(
        self, stats: _ScaleStats, pooled: np.ndarray, depth: np.ndarray, mask: np.ndarray,
        cls: int, contact: bool,
    ) -> float:
        box = _evidence(stats.ctx_freq, cls, _mask_ctx_bin(depth, mask))
        ring = _ring_affinity(stats, pooled, mask, cls)
        bbox = _bbox_of(mask)
        aff = _evidence(stats.size_freq, cls, scale_bin_of(bbox[2], bbox[3]))
        fill = mask.sum() / (bbox[2] * bbox[3])
        _, n_comp = ndimage.label(mask, structure=_CONN4)
        shape = _evidence(stats.fill_freq, cls, _fill_bin(fill)) * (
            1.0 if n_comp == 1 else 0.2
        )
        value = float(self.weights @ np.array([box, ring, aff, shape]))
        # Hard gates: configurations real layouts never produce.
        if contact:
            value *= 0.1
        if box == 0.0 or aff == 0.0:
            value *= 0.3
        return value

    def _scale_score(
        self, stats: _ScaleStats, layout: Layout, factor: int,
        contacts: dict[int, bool],
    ) -> float:
        semantic, instances = layout
        pooled = _mode_pool(semantic.classes, factor)
        depth = _depth_map(pooled)
        scores = []
        for rec in instances.records:
            mask = _any_pool(_record_mask(instances, rec), factor)
            if not mask.any():
                continue
            scores.append(
                self._instance_score(
                    stats, pooled, depth, mask, int(rec.class_id),
                    contacts.get(rec.instance_id, False),
                )
            )
        if not scores:
            return _global_adjacency_score(stats, pooled)
        return min(scores)

    def raw_score(self, layout: Layout) -> float:
        contacts = _contact_flags(layout[1])
        vals = [
            self._scale_score(stats, layout, factor, contacts)
            for stats, factor in zip(self.scale_stats, POOL_FACTORS)
        ]
        return float(np.mean(vals))

    def score_layout(self, layout: Layout) -> float:
        slope, intercept = self.calibration
        mapped = slope * self.raw_score(layout) + intercept
        return float(min(max(mapped, 0.0), SCORE_CAP))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PlausibilityScorer):
            return NotImplemented
        return (
            self.scale_stats == other.scale_stats
            and self.threshold == other.threshold
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.calibration, other.calibration)
        )

    def _state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {
            "threshold": np.array([self.threshold]),
            "weights": self.weights,
            "calibration": self.calibration,
        }
        for i, stats in enumerate(self.scale_stats):
            out[f"adj{i}"] = stats.adjacency
            out[f"ctx{i}"] = stats.ctx_freq
            out[f"size{i}"] = stats.size_freq
            out[f"fill{i}"] = stats.fill_freq
        return out

    @classmethod
    def _from_state(cls, arrays: dict[str, np.ndarray]) -> "PlausibilityScorer":
        stats = tuple(
            _ScaleStats(
                adjacency=arrays[f"adj{i}"],
                ctx_freq=arrays[f"ctx{i}"],
                size_freq=arrays[f"size{i}"],
                fill_freq=arrays[f"fill{i}"],
            )
            for i in range(len(POOL_FACTORS))
        )
        return cls(
            scale_stats=stats,
            threshold=float(arrays["threshold"][0]),
            weights=arrays["weights"],
            calibration=arrays["calibration"],
        )


def score(scorer: PlausibilityScorer, candidate: AugmentationCandidate) -> AugmentationCandidate:
    """Score a candidate and return a copy carrying the score."""
    value = scorer.score_layout((candidate.semantic, candidate.instances))
    return replace(candidate, score=value)


def diagnostics_json(scorer: PlausibilityScorer, layouts: Sequence[Layout]) -> str:
    """Per-component score distributions over a set of layouts, as JSON."""
    import json

    names = ("box", "instance", "affine", "shape")
    per_scale: list[dict] = []
    for stats, factor in zip(scorer.scale_stats, POOL_FACTORS):
        values: dict[str, list[float]] = {n: [] for n in names}
        for semantic, instances in layouts:
            pooled = _mode_pool(semantic.classes, factor)
            depth = _depth_map(pooled)
            for rec in instances.records:
                mask = _any_pool(_record_mask(instances, rec), factor)
                if not mask.any():
                    continue
                cls = int(rec.class_id)
                bbox = _bbox_of(mask)
                fill = mask.sum() / (bbox[2] * bbox[3])
                _, n_comp = ndimage.label(mask, structure=_CONN4)
                values["box"].append(_evidence(stats.ctx_freq, cls, _mask_ctx_bin(depth, mask)))
                values["instance"].append(_ring_affinity(stats, pooled, mask, cls))
                values["affine"].append(
                    _evidence(stats.size_freq, cls, scale_bin_of(bbox[2], bbox[3]))
                )
                values["shape"].append(
                    _evidence(stats.fill_freq, cls, _fill_bin(fill))
                    * (1.0 if n_comp == 1 else 0.2)
                )
        per_scale.append(
            {
                "pool_factor": factor,
                "components": {
                    n: {
                        "mean": float(np.mean(v)) if v else None,
                        "min": float(np.min(v)) if v else None,
                        "max": float(np.max(v)) if v else None,
                        "count": len(v),
                    }
                    for n, v in values.items()
                },
            }
        )
    payload = {
        "threshold": scorer.threshold,
        "weights": [float(w) for w in scorer.weights],
        "calibration": {"slope": float(scorer.calibration[0]), "intercept": float(scorer.calibration[1])},
        "scales": per_scale,
    }
    return json.dumps(payload, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# Corruption oracles (negatives for calibration and testing)
# ---------------------------------------------------------------------------


def _erase_record(classes: np.ndarray, grid: np.ndarray, mask: np.ndarray) -> None:
    """Remove a blob, backfilling with the commonest neighboring stuff class."""
    dilated = ndimage.binary_dilation(mask, structure=_CONN4)
    ring = dilated & ~mask
    ring_classes = classes[ring]
    stuff = ring_classes[~np.isin(ring_classes, THING_CLASSES)]
    fill = int(np.bincount(stuff, minlength=N_CLASSES).argmax()) if stuff.size else int(ClassId.ROAD)
    classes[mask] = fill
    grid[mask] = BACKGROUND_ID


def corrupt_relocate(layout: Layout, seed: int) -> Optional[Layout]:
    """Move one instance deep into the building/vegetation region."""
    semantic, instances = layout
    if not instances.records:
        return None
    rng = np.random.default_rng(np.random.SeedSequence([seed & (2**63 - 1), 0xBAD1]))
    rec = instances.records[int(rng.integers(len(instances.records)))]
    mask = _record_mask(instances, rec)
    if not mask.any():
        return None
    classes = semantic.classes.copy()
    grid = instances.instance_grid.copy()
    _erase_record(classes, grid, mask)
    depth = _depth_map(classes)
    # Depth <= -12 keeps the blob far off-road even after 2x pooling.
    scenery = np.isin(classes, (ClassId.BUILDING, ClassId.VEGETATION))
    far = np.argwhere((depth <= -12) & scenery & (grid == BACKGROUND_ID))
    if far.size == 0:
        return None
    ys0, xs0 = np.nonzero(mask)
    mh, mw = ys0.max() - ys0.min() + 1, xs0.max() - xs0.min() + 1
    crop = mask[ys0.min() : ys0.max() + 1, xs0.min() : xs0.max() + 1]
    h, w = classes.shape
    order = rng.permutation(far.shape[0])
    for idx in order[:64]:
        r, c = far[idx]
        top, left = int(r) - (mh - 1) // 2, int(c) - (mw - 1) // 2
        if top < 0 or left < 0 or top + mh > h or left + mw > w:
            continue
        ys, xs = np.nonzero(crop)
        ys, xs = ys + top, xs + left
        if (grid[ys, xs] != BACKGROUND_ID).any():
            continue
        if not (scenery[ys, xs] & (depth[ys, xs] <= -12)).all():
            continue
        classes[ys, xs] = rec.class_id
        grid[ys, xs] = rec.instance_id
        new_rec = InstanceRecord(
            instance_id=rec.instance_id,
            class_id=rec.class_id,
            bbox=(int(xs.min()), int(ys.min()), int(mw), int(mh)),
            affine=(float(left), float(top), 1.0, 1.0),
        )
        records = tuple(
            new_rec if r.instance_id == rec.instance_id else r for r in instances.records
        )
        return SemanticMap(classes=classes), InstanceMap(instance_grid=grid, records=records)
    return None


def corrupt_overlap(layout: Layout, seed: int) -> Optional[Layout]:
    """Duplicate one instance shifted by a cell: >50% footprint overlap.

    Only instances of 4+ cells qualify so a one-cell shift really does
    overlap most of the footprint.
    """
    semantic, instances = layout
    del seed  # selection is size-ordered, no randomness needed
    if not instances.records:
        return None
    sizes = {
        rec.instance_id: int(_record_mask(instances, rec).sum()) for rec in instances.records
    }
    order = sorted(
        range(len(instances.records)),
        key=lambda i: (-sizes[instances.records[i].instance_id], i),
    )
    h, w = semantic.classes.shape
    for idx in order:
        rec = instances.records[int(idx)]
        if sizes[rec.instance_id] < 4:
            continue
        mask = _record_mask(instances, rec)
        if not mask.any():
            continue
        for dy, dx in ((0, 1), (1, 0), (0, -1), (-1, 0)):
            shifted = np.zeros_like(mask)
            ys, xs = np.nonzero(mask)
            ny, nx = ys + dy, xs + dx
            if ny.min() < 0 or nx.min() < 0 or ny.max() >= h or nx.max() >= w:
                continue
            other_cells = instances.instance_grid[ny, nx]
            if ((other_cells != BACKGROUND_ID) & (other_cells != rec.instance_id)).any():
                continue
            shifted[ny, nx] = True
            classes = semantic.classes.copy()
            grid = instances.instance_grid.copy()
            new_id = instances.next_free_id()
            classes[shifted] = rec.class_id
            grid[shifted] = new_id
            new_rec = InstanceRecord(
                instance_id=new_id,
                class_id=rec.class_id,
                bbox=(int(nx.min()), int(ny.min()), int(nx.max() - nx.min() + 1), int(ny.max() - ny.min() + 1)),
                affine=(float(nx.min()), float(ny.min()), 1.0, 1.0),
            )
            return (
                SemanticMap(classes=classes),
                InstanceMap(instance_grid=grid, records=instances.records + (new_rec,)),
            )
    return None


def corrupt_giant(layout: Layout, seed: int) -> Optional[Layout]:
    """Blow one instance up threefold: a size never seen in real layouts."""
    semantic, instances = layout
    if not instances.records:
        return None
    rng = np.random.default_rng(np.random.SeedSequence([seed & (2**63 - 1), 0xBAD3]))
    order = rng.permutation(len(instances.records))
    h, w = semantic.classes.shape
    for idx in order:
        rec = instances.records[int(idx)]
        mask = _record_mask(instances, rec)
        if not mask.any():
            continue
        ys0, xs0 = np.nonzero(mask)
        crop = mask[ys0.min() : ys0.max() + 1, xs0.min() : xs0.max() + 1]
        giant = _resize_mask(crop, 3.0, 3.0)
        mh, mw = giant.shape
        if mh > h or mw > w:
            continue
        classes = semantic.classes.copy()
        grid = instances.instance_grid.copy()
        _erase_record(classes, grid, mask)
        top = min(int(ys0.min()), h - mh)
        left = min(int(xs0.min()), w - mw)
        ys, xs = np.nonzero(giant)
        ys, xs = ys + top, xs + left
        if (grid[ys, xs] != BACKGROUND_ID).any():
            continue
        classes[ys, xs] = rec.class_id
        grid[ys, xs] = rec.instance_id
        new_rec = InstanceRecord(
            instance_id=rec.instance_id,
            class_id=rec.class_id,
            bbox=(int(xs.min()), int(ys.min()), int(mw), int(mh)),
            affine=(float(left), float(top), 3.0, 3.0),
        )
        records = tuple(new_rec if r.instance_id == rec.instance_id else r for r in instances.records)
        return SemanticMap(classes=classes), InstanceMap(instance_grid=grid, records=records)
    return None


def make_corruptions(layouts: Sequence[Layout], seed: int, per_kind: int = 4) -> list[Layout]:
    """A deterministic batch of implausible layouts derived from real ones."""
    kinds = (corrupt_relocate, corrupt_overlap, corrupt_giant)
    out: list[Layout] = []
    for k, corrupt in enumerate(kinds):
        made = 0
        for i, layout in enumerate(layouts):
            if made >= per_kind:
                break
            bad = corrupt(layout, seed + 1000 * k + i)
            if bad is not None:
                out.append(bad)
                made += 1
    return out


# ---------------------------------------------------------------------------
# Scorer fitting and the augmentation loop
# ---------------------------------------------------------------------------

_CALIBRATION_MARGIN = 0.1
_GAP_REQUIREMENT = 0.2


def fit_scorer(
    real_layouts: Sequence[Layout],
    threshold: float = 0.5,
    weights: Sequence[float] = (0.25, 0.25, 0.25, 0.25),
    margin: float = _CALIBRATION_MARGIN,
    seed: int = 0xD15C,
) -> PlausibilityScorer:
    """Fit evidence tables on real layouts and calibrate the score map.

    Calibration anchors an affine map so that the weakest real layout still
    clears the threshold while internally generated corruptions land below
    it, then verifies on a held-out real split: >=95% above threshold, every
    corruption below the real median, and a mean separation of at least 0.2.
    """
    if len(real_layouts) < 10:
        raise FittingError(f"fit_scorer needs >=10 layouts, got {len(real_layouts)}")
    if not 0.0 < threshold < 1.0:
        raise FittingError("threshold must lie strictly inside (0, 1)")
    n_fit = max(int(len(real_layouts) * 0.7), len(real_layouts) - 20)
    n_fit = min(n_fit, len(real_layouts) - 1)
    fit_split = list(real_layouts[:n_fit])
    holdout = list(real_layouts[n_fit:])
    stats = tuple(_fit_scale_stats(fit_split, f) for f in POOL_FACTORS)
    probe = PlausibilityScorer(
        scale_stats=stats,
        threshold=threshold,
        weights=np.asarray(weights, dtype=np.float64),
        calibration=np.array([1.0, 0.0]),
    )
    raw_fit = np.array([probe.raw_score(layout) for layout in fit_split])
    raw_hold = np.array([probe.raw_score(layout) for layout in holdout])
    corruptions = make_corruptions(fit_split, seed)
    if not corruptions:
        raise FittingError("could not generate calibration corruptions")
    raw_bad = np.array([probe.raw_score(layout) for layout in corruptions])
    r_min, r_med = float(raw_fit.min()), float(np.median(raw_fit))
    c_hi = float(raw_bad.max())
    x_mid = (r_min + c_hi) / 2.0 if r_min > c_hi else (r_med + c_hi) / 2.0
    if r_med - x_mid <= 1e-9:
        raise FittingError("real and corrupted layouts are not separable")
    base_slope = margin / (r_med - x_mid)
    for factor in (1.0, 2.0, 4.0, 8.0, 16.0, 32.0):
        slope = base_slope * factor
        intercept = threshold - slope * x_mid
        scorer = PlausibilityScorer(
            scale_stats=stats,
            threshold=threshold,
            weights=np.asarray(weights, dtype=np.float64),
            calibration=np.array([slope, intercept]),
        )

        def mapped(raws: np.ndarray) -> np.ndarray:
            return np.clip(slope * raws + intercept, 0.0, SCORE_CAP)

        hold_scores = mapped(raw_hold)
        real_scores = mapped(np.concatenate([raw_fit, raw_hold]))
        bad_scores = mapped(raw_bad)
        if (hold_scores >= threshold).mean() < 0.95:
            continue
        if (bad_scores >= threshold).any():
            continue
        if (bad_scores >= np.median(real_scores)).any():
            continue
        if real_scores.mean() - bad_scores.mean() < _GAP_REQUIREMENT + 0.05:
            continue
        return scorer
    raise FittingError("scorer calibration failed to separate real from corrupted")


@dataclass
class AugmentStats:
    """Counters accumulated across augment_semantic calls."""

    attempts: int = 0
    accepted: int = 0
    rejected_low_score: int = 0
    insertion_failures: int = 0

    def acceptance_rate(self) -> float:
        return self.accepted / self.attempts if self.attempts else 0.0


def augment_semantic(
    sample: Union[DrivingSample, Layout],
    fan_out: int,
    where: WherePredictor,
    what: WhatPredictor,
    scorer: PlausibilityScorer,
    seed: int,
    threshold: Optional[float] = None,
    budget_factor: int = 16,
    source_sample_id: int = 0,
    stats_out: Optional[AugmentStats] = None,
) -> list[AugmentationCandidate]:
    """Produce up to fan_out accepted augmented layouts from one source.

    The source may be a DrivingSample or a bare (semantic, instances) layout.

    Repeatedly inserts a thing instance into the sample's layout and keeps
    candidates whose plausibility score reaches the acceptance threshold
    (the scorer's own threshold unless overridden). Stops when fan_out
    candidates are accepted or the attempt budget (budget_factor * fan_out)
    is exhausted; returning fewer than fan_out is a valid outcome.
    """
    if fan_out < 1:
        raise DegenerateInputError("fan_out must be >= 1")
    tau = scorer.threshold if threshold is None else float(threshold)
    if hasattr(sample, "semantic"):
        base: Layout = (sample.semantic, sample.instances)
    else:
        base = (sample[0], sample[1])
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**63 - 1), 0xA76]))
    classes = [
        int(c)
        for c in THING_CLASSES
        if where.fitted[int(c)] and any(cls == int(c) for cls, _, _ in what.templates)
    ]
    if not classes:
        raise FittingError("predictors cover no thing classes")
    counts = where.class_counts()[classes]
    class_probs = counts / counts.sum()
    accepted: list[AugmentationCandidate] = []
    for _ in range(budget_factor * fan_out):
        if len(accepted) >= fan_out:
            break
        if stats_out is not None:
            stats_out.attempts += 1
        pick = int(np.searchsorted(np.cumsum(class_probs), rng.random(), side="right"))
        class_id = ClassId(classes[min(pick, len(classes) - 1)])
        attempt_seed = int(rng.integers(0, 2**63))
        candidate = sample_insertion(where, what, base, class_id, attempt_seed)
        if candidate is None:
            if stats_out is not None:
                stats_out.insertion_failures += 1
            continue
        candidate = replace(candidate, source_sample_id=source_sample_id)
        scored = score(scorer, candidate)
        if scored.score is not None and scored.score >= tau:
            accepted.append(scored)
            if stats_out is not None:
                stats_out.accepted += 1
        else:
            if stats_out is not None:
                stats_out.rejected_low_score += 1
    return accepted
