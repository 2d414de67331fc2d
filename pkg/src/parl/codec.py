"""Byte-exact serialization for datasets, models, and derived artifacts.

Two container formats, both little-endian throughout:

PARLDS1 -- driving samples. Floats are stored as 32-bit, so labels and
placement transforms quantize on the way to disk; everything else round-trips
exactly.

PARLDM1 -- models and structured artifacts (styles, policies, predictors,
scorers, layouts, candidates, reports, float vectors). Floats are stored as
64-bit, so these round-trip bit for bit.

Both containers share the same envelope: a 7-byte magic, a u16 format
version, a u32 item count, then each item as a u32 byte length followed by
its payload. Decoders reject bad magic, unknown versions, unknown item
kinds, truncated payloads, and trailing bytes with DecodeError; a payload
that parses but violates a model invariant is also a DecodeError, never a
half-built object.
"""

from __future__ import annotations

import json
import struct
from typing import Optional, Sequence, Union

import numpy as np

from .augment import AugmentationCandidate, PlausibilityScorer, WhatPredictor, WherePredictor
from .errors import ConfigurationError, DecodeError, ParlError
from .policy import EvaluationReport, PolicyModel
from .styles import StyleModel
from .world import (
    ClassId,
    DrivingSample,
    InstanceMap,
    InstanceRecord,
    N_CLASSES,
    Provenance,
    Scenario,
    SemanticMap,
    TaskType,
)

DATASET_MAGIC = b"PARLDS1"
MODEL_MAGIC = b"PARLDM1"
FORMAT_VERSION = 1

_TASK_CODES = {task: i for i, task in enumerate(TaskType)}
_TASK_FROM_CODE = {i: task for task, i in _TASK_CODES.items()}
_PROVENANCE_CODES = {prov: i for i, prov in enumerate(Provenance)}
_PROVENANCE_FROM_CODE = {i: prov for prov, i in _PROVENANCE_CODES.items()}

# Model record kinds.
KIND_STYLE = 0
KIND_POLICY = 1
KIND_WHERE = 2
KIND_WHAT = 3
KIND_SCORER = 4
KIND_LAYOUT = 5
KIND_CANDIDATE = 6
KIND_REPORT = 7
KIND_VECTOR = 8

# Array dtype codes for the named-array encoding used by predictor records.
_DTYPES = {0: "<f8", 1: "<i8", 2: "u1"}
_DTYPE_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}

Layout = tuple[SemanticMap, InstanceMap]
ModelItem = Union[
    StyleModel,
    PolicyModel,
    WherePredictor,
    WhatPredictor,
    PlausibilityScorer,
    tuple,
    AugmentationCandidate,
    EvaluationReport,
    np.ndarray,
]


class _Writer:
    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def raw(self, data: bytes) -> None:
        self._parts.append(bytes(data))

    def u8(self, value: int) -> None:
        self._parts.append(struct.pack("<B", value))

    def u16(self, value: int) -> None:
        self._parts.append(struct.pack("<H", value))

    def u32(self, value: int) -> None:
        self._parts.append(struct.pack("<I", value))

    def u64(self, value: int) -> None:
        self._parts.append(struct.pack("<Q", value))

    def f32(self, value: float) -> None:
        self._parts.append(struct.pack("<f", value))

    def f64(self, value: float) -> None:
        self._parts.append(struct.pack("<d", value))

    def short_str(self, text: str) -> None:
        data = text.encode("utf-8")
        if len(data) > 255:
            raise ConfigurationError(f"string too long to encode: {text!r}")
        self.u8(len(data))
        self.raw(data)

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class _Reader:
    """Sequential reader that turns every overrun into a DecodeError."""

    def __init__(self, data: bytes, what: str = "stream") -> None:
        self._data = data
        self._pos = 0
        self._what = what

    def take(self, n: int) -> bytes:
        if n < 0 or self._pos + n > len(self._data):
            raise DecodeError(
                f"truncated {self._what}: wanted {n} bytes at offset {self._pos}, "
                f"have {len(self._data) - self._pos}"
            )
        out = self._data[self._pos : self._pos + n]
        self._pos += n
        return out

    def _scalar(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]

    def u8(self) -> int:
        return self._scalar("<B")

    def u16(self) -> int:
        return self._scalar("<H")

    def u32(self) -> int:
        return self._scalar("<I")

    def u64(self) -> int:
        return self._scalar("<Q")

    def f32(self) -> float:
        return self._scalar("<f")

    def f64(self) -> float:
        return self._scalar("<d")

    def short_str(self) -> str:
        n = self.u8()
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError(f"invalid utf-8 in {self._what}") from exc

    def array(self, dtype: str, count: int) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(itemsize * count), dtype=dtype).copy()

    def expect_magic(self, magic: bytes) -> None:
        got = self.take(len(magic))
        if got != magic:
            raise DecodeError(f"bad magic {got!r}, expected {magic!r}")

    def expect_version(self) -> None:
        version = self.u16()
        if version != FORMAT_VERSION:
            raise DecodeError(f"unsupported format version {version}")

    def done(self) -> None:
        if self._pos != len(self._data):
            raise DecodeError(
                f"trailing bytes in {self._what}: {len(self._data) - self._pos} unread"
            )


def _checked_u16(value: int, what: str) -> int:
    if not 0 <= value < 2**16:
        raise ConfigurationError(f"{what} {value} does not fit in u16")
    return value


# ---------------------------------------------------------------------------
# Datasets (PARLDS1)
# ---------------------------------------------------------------------------


def _encode_sample(sample: DrivingSample) -> bytes:
    w = _Writer()
    h, wdt = sample.semantic.classes.shape
    if sample.scenario.pixels.shape[:2] != (h, wdt) or sample.instances.instance_grid.shape != (h, wdt):
        raise ConfigurationError("sample grids disagree on shape")
    w.u16(h)
    w.u16(wdt)
    w.u16(_checked_u16(sample.scenario.style, "style id"))
    w.u8(_TASK_CODES[sample.task])
    w.u8(_PROVENANCE_CODES[sample.provenance])
    w.u8(0 if sample.label is None else 1)
    w.f32(0.0 if sample.label is None else sample.label)
    w.raw(sample.semantic.classes.tobytes())
    w.raw(sample.instances.instance_grid.astype("<i4").tobytes())
    w.u16(len(sample.instances.records))
    for rec in sample.instances.records:
        w.u32(rec.instance_id)
        w.u8(int(rec.class_id))
        for v in rec.bbox:
            w.u16(_checked_u16(v, "bbox field"))
        for v in rec.affine:
            w.f32(v)
    w.raw(sample.scenario.pixels.astype("<f4").tobytes())
    return w.getvalue()


def _decode_sample(data: bytes) -> DrivingSample:
    r = _Reader(data, "sample")
    h = r.u16()
    wdt = r.u16()
    style = r.u16()
    task_code = r.u8()
    prov_code = r.u8()
    if task_code not in _TASK_FROM_CODE:
        raise DecodeError(f"unknown task code {task_code}")
    if prov_code not in _PROVENANCE_FROM_CODE:
        raise DecodeError(f"unknown provenance code {prov_code}")
    has_label = r.u8()
    if has_label not in (0, 1):
        raise DecodeError(f"label flag must be 0 or 1, got {has_label}")
    label_bits = r.f32()
    label: Optional[float] = float(label_bits) if has_label else None
    classes = r.array("u1", h * wdt).reshape(h, wdt)
    grid = r.array("<i4", h * wdt).reshape(h, wdt)
    n_records = r.u16()
    records = []
    for _ in range(n_records):
        instance_id = r.u32()
        class_id = r.u8()
        bbox = tuple(r.u16() for _ in range(4))
        affine = tuple(float(r.f32()) for _ in range(4))
        try:
            cls = ClassId(class_id)
        except ValueError as exc:
            raise DecodeError(f"unknown class id {class_id}") from exc
        records.append(
            InstanceRecord(instance_id=instance_id, class_id=cls, bbox=bbox, affine=affine)
        )
    pixels = r.array("<f4", h * wdt * 3).reshape(h, wdt, 3)
    r.done()
    try:
        return DrivingSample(
            scenario=Scenario(pixels=pixels, style=style),
            semantic=SemanticMap(classes=classes),
            instances=InstanceMap(instance_grid=grid, records=tuple(records)),
            label=label,
            task=_TASK_FROM_CODE[task_code],
            provenance=_PROVENANCE_FROM_CODE[prov_code],
        )
    except ParlError as exc:
        raise DecodeError(f"sample payload violates invariants: {exc}") from exc


def encode_samples(samples: Sequence[DrivingSample]) -> bytes:
    w = _Writer()
    w.raw(DATASET_MAGIC)
    w.u16(FORMAT_VERSION)
    w.u32(len(samples))
    for sample in samples:
        payload = _encode_sample(sample)
        w.u32(len(payload))
        w.raw(payload)
    return w.getvalue()


def decode_samples(data: bytes) -> list[DrivingSample]:
    r = _Reader(data, "dataset")
    r.expect_magic(DATASET_MAGIC)
    r.expect_version()
    count = r.u32()
    samples = [_decode_sample(r.take(r.u32())) for _ in range(count)]
    r.done()
    return samples


def write_dataset(path, samples: Sequence[DrivingSample]) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_samples(samples))


def read_dataset(path) -> list[DrivingSample]:
    with open(path, "rb") as fh:
        return decode_samples(fh.read())


def samples_to_json(samples: Sequence[DrivingSample]) -> str:
    """Human-inspectable mirror of the dataset container."""
    items = []
    for s in samples:
        items.append(
            {
                "height": s.semantic.height,
                "width": s.semantic.width,
                "style": s.scenario.style,
                "task": s.task.value,
                "provenance": s.provenance.value,
                "label": s.label,
                "semantic": s.semantic.classes.tolist(),
                "instance_grid": s.instances.instance_grid.tolist(),
                "records": [
                    {
                        "instance_id": rec.instance_id,
                        "class_id": int(rec.class_id),
                        "bbox": list(rec.bbox),
                        "affine": list(rec.affine),
                    }
                    for rec in s.instances.records
                ],
                "pixels": np.round(s.scenario.pixels.astype(np.float64), 6).tolist(),
            }
        )
    return json.dumps({"version": FORMAT_VERSION, "samples": items}, sort_keys=True)


# ---------------------------------------------------------------------------
# Models and artifacts (PARLDM1)
# ---------------------------------------------------------------------------


def _encode_array_map(arrays: dict[str, np.ndarray], w: _Writer) -> None:
    w.u32(len(arrays))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype not in _DTYPE_CODES:
            arr = np.ascontiguousarray(arr, dtype=np.float64)
        w.short_str(name)
        w.u8(_DTYPE_CODES[arr.dtype])
        w.u8(arr.ndim)
        for dim in arr.shape:
            w.u32(dim)
        w.raw(arr.tobytes())


def _decode_array_map(r: _Reader) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.short_str()
        code = r.u8()
        if code not in _DTYPES:
            raise DecodeError(f"unknown array dtype code {code}")
        ndim = r.u8()
        shape = tuple(r.u32() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        out[name] = r.array(_DTYPES[code], count).reshape(shape)
    return out


def _encode_layout_body(semantic: SemanticMap, instances: InstanceMap, w: _Writer) -> None:
    h, wdt = semantic.classes.shape
    if instances.instance_grid.shape != (h, wdt):
        raise ConfigurationError("layout grids disagree on shape")
    w.u16(h)
    w.u16(wdt)
    w.raw(semantic.classes.tobytes())
    w.raw(instances.instance_grid.astype("<i4").tobytes())
    w.u16(len(instances.records))
    for rec in instances.records:
        w.u32(rec.instance_id)
        w.u8(int(rec.class_id))
        for v in rec.bbox:
            w.u16(_checked_u16(v, "bbox field"))
        for v in rec.affine:
            w.f64(v)


def _decode_layout_body(r: _Reader) -> Layout:
    h = r.u16()
    wdt = r.u16()
    classes = r.array("u1", h * wdt).reshape(h, wdt)
    grid = r.array("<i4", h * wdt).reshape(h, wdt)
    records = []
    for _ in range(r.u16()):
        instance_id = r.u32()
        class_code = r.u8()
        bbox = tuple(r.u16() for _ in range(4))
        affine = tuple(r.f64() for _ in range(4))
        try:
            cls = ClassId(class_code)
        except ValueError as exc:
            raise DecodeError(f"unknown class id {class_code}") from exc
        records.append(
            InstanceRecord(instance_id=instance_id, class_id=cls, bbox=bbox, affine=affine)
        )
    try:
        return SemanticMap(classes=classes), InstanceMap(
            instance_grid=grid, records=tuple(records)
        )
    except ParlError as exc:
        raise DecodeError(f"layout payload violates invariants: {exc}") from exc


def _encode_item(item: ModelItem) -> bytes:
    w = _Writer()
    if isinstance(item, StyleModel):
        w.u8(KIND_STYLE)
        w.u16(_checked_u16(item.style, "style id"))
        w.u64(item.texture_seed)
        w.f64(item.separation_floor)
        for c in range(N_CLASSES):
            for v in item.class_means[c]:
                w.f64(v)
            w.f64(item.class_spreads[c])
    elif isinstance(item, PolicyModel):
        w.u8(KIND_POLICY)
        w.u32(item.weights.size)
        w.raw(item.weights.astype("<f8").tobytes())
        w.f64(item.ridge_lambda)
        w.u32(item.n_train)
        w.u16(len(item.provenance_mix))
        for name, count in item.provenance_mix:
            w.short_str(name)
            w.u32(count)
    elif isinstance(item, WherePredictor):
        w.u8(KIND_WHERE)
        _encode_array_map(item._state_arrays(), w)
    elif isinstance(item, WhatPredictor):
        w.u8(KIND_WHAT)
        _encode_array_map(item._state_arrays(), w)
    elif isinstance(item, PlausibilityScorer):
        w.u8(KIND_SCORER)
        _encode_array_map(item._state_arrays(), w)
    elif isinstance(item, AugmentationCandidate):
        w.u8(KIND_CANDIDATE)
        _encode_layout_body(item.semantic, item.instances, w)
        w.u16(len(item.inserted))
        for rec in item.inserted:
            w.u32(rec.instance_id)
        w.u32(item.source_sample_id)
        w.u8(0 if item.score is None else 1)
        w.f64(0.0 if item.score is None else item.score)
    elif isinstance(item, EvaluationReport):
        w.u8(KIND_REPORT)
        tasks = sorted(item.per_task_error)
        w.u16(len(tasks))
        for task in tasks:
            w.short_str(task)
            w.f64(item.per_task_error[task])
            w.f64(item.per_task_failure_rate[task])
            w.u32(item.per_task_count[task])
        w.f64(item.overall_error)
        w.f64(item.overall_failure_rate)
        w.f64(item.fail_threshold)
    elif isinstance(item, np.ndarray):
        vec = np.ascontiguousarray(item, dtype=np.float64)
        if vec.ndim != 1:
            raise ConfigurationError("only 1-D float vectors encode as vector records")
        w.u8(KIND_VECTOR)
        w.u32(vec.size)
        w.raw(vec.astype("<f8").tobytes())
    elif isinstance(item, tuple) and len(item) == 2 and isinstance(item[0], SemanticMap):
        w.u8(KIND_LAYOUT)
        _encode_layout_body(item[0], item[1], w)
    else:
        raise ConfigurationError(f"cannot encode {type(item).__name__} as a model record")
    return w.getvalue()


def _decode_item(data: bytes) -> ModelItem:
    r = _Reader(data, "model record")
    kind = r.u8()
    try:
        if kind == KIND_STYLE:
            style = r.u16()
            texture_seed = r.u64()
            floor = r.f64()
            means = np.empty((N_CLASSES, 3))
            spreads = np.empty(N_CLASSES)
            for c in range(N_CLASSES):
                means[c] = [r.f64() for _ in range(3)]
                spreads[c] = r.f64()
            r.done()
            return StyleModel(
                style=style,
                class_means=means,
                class_spreads=spreads,
                texture_seed=texture_seed,
                separation_floor=floor,
            )
        if kind == KIND_POLICY:
            weights = r.array("<f8", r.u32())
            ridge_lambda = r.f64()
            n_train = r.u32()
            mix = tuple((r.short_str(), r.u32()) for _ in range(r.u16()))
            r.done()
            return PolicyModel(
                weights=weights, ridge_lambda=ridge_lambda, n_train=n_train, provenance_mix=mix
            )
        if kind in (KIND_WHERE, KIND_WHAT, KIND_SCORER):
            arrays = _decode_array_map(r)
            r.done()
            target = {
                KIND_WHERE: WherePredictor,
                KIND_WHAT: WhatPredictor,
                KIND_SCORER: PlausibilityScorer,
            }[kind]
            try:
                return target._from_state(arrays)
            except (KeyError, ValueError, IndexError) as exc:
                raise DecodeError(f"model record state is malformed: {exc}") from exc
        if kind == KIND_LAYOUT:
            layout = _decode_layout_body(r)
            r.done()
            return layout
        if kind == KIND_CANDIDATE:
            semantic, instances = _decode_layout_body(r)
            inserted_ids = [r.u32() for _ in range(r.u16())]
            source = r.u32()
            has_score = r.u8()
            score_bits = r.f64()
            r.done()
            by_id = {rec.instance_id: rec for rec in instances.records}
            try:
                inserted = tuple(by_id[i] for i in inserted_ids)
            except KeyError as exc:
                raise DecodeError(f"inserted id {exc} missing from records") from exc
            return AugmentationCandidate(
                semantic=semantic,
                instances=instances,
                inserted=inserted,
                source_sample_id=source,
                score=score_bits if has_score else None,
            )
        if kind == KIND_REPORT:
            errs: dict[str, float] = {}
            rates: dict[str, float] = {}
            counts: dict[str, int] = {}
            for _ in range(r.u16()):
                task = r.short_str()
                errs[task] = r.f64()
                rates[task] = r.f64()
                counts[task] = r.u32()
            overall_error = r.f64()
            overall_rate = r.f64()
            threshold = r.f64()
            r.done()
            return EvaluationReport(
                per_task_error=errs,
                per_task_failure_rate=rates,
                per_task_count=counts,
                overall_error=overall_error,
                overall_failure_rate=overall_rate,
                fail_threshold=threshold,
            )
        if kind == KIND_VECTOR:
            vec = r.array("<f8", r.u32())
            r.done()
            return vec
    except DecodeError:
        raise
    except ParlError as exc:
        raise DecodeError(f"model payload violates invariants: {exc}") from exc
    raise DecodeError(f"unknown model record kind {kind}")


def encode_models(items: Sequence[ModelItem]) -> bytes:
    w = _Writer()
    w.raw(MODEL_MAGIC)
    w.u16(FORMAT_VERSION)
    w.u32(len(items))
    for item in items:
        payload = _encode_item(item)
        w.u32(len(payload))
        w.raw(payload)
    return w.getvalue()


def decode_models(data: bytes) -> list[ModelItem]:
    r = _Reader(data, "model container")
    r.expect_magic(MODEL_MAGIC)
    r.expect_version()
    count = r.u32()
    items = [_decode_item(r.take(r.u32())) for _ in range(count)]
    r.done()
    return items


def write_models(path, items: Sequence[ModelItem]) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_models(items))


def read_models(path) -> list[ModelItem]:
    with open(path, "rb") as fh:
        return decode_models(fh.read())
