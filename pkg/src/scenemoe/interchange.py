"""Interval interchange files shared by prediction, ground truth and scoring.

One UTF-8 file per split: the first line is a header manifest, every
following line is one interval record. Predictions and ground truth share
the record schema; ground truth simply omits `confidence`. Records may
carry an optional `atr_r` field for externally judged attribution scores,
which this package never produces itself.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DataError
from .fsio import atomic_write_text

FORMAT_VERSION = 1

PREDICTIONS = "predictions"
GROUND_TRUTH = "ground_truth"


@dataclass
class InterchangeHeader:
    kind: str
    segment_seconds: float
    background_class: str
    class_names: list[str]
    videos: dict[str, int]  # video_id -> segment count
    version: int = FORMAT_VERSION


@dataclass
class IntervalRecord:
    video_id: str
    start_s: float
    end_s: float
    class_name: str
    cause_text: str
    class_claim: str
    confidence: float | None = None
    atr_r: float | None = None


@dataclass
class InterchangeFile:
    header: InterchangeHeader
    records: list[IntervalRecord] = field(default_factory=list)


def write_interchange(path: Path, doc: InterchangeFile) -> None:
    head = {
        "kind": doc.header.kind,
        "version": doc.header.version,
        "segment_seconds": doc.header.segment_seconds,
        "background_class": doc.header.background_class,
        "class_names": doc.header.class_names,
        "videos": doc.header.videos,
    }
    lines = [json.dumps(head, sort_keys=True)]
    for r in doc.records:
        rec = {
            "video_id": r.video_id,
            "start_s": r.start_s,
            "end_s": r.end_s,
            "class": r.class_name,
            "cause_text": r.cause_text,
            "class_claim": r.class_claim,
        }
        if doc.header.kind == PREDICTIONS:
            rec["confidence"] = r.confidence
        if r.atr_r is not None:
            rec["atr_r"] = r.atr_r
        lines.append(json.dumps(rec, sort_keys=True))
    atomic_write_text(Path(path), "\n".join(lines) + "\n")


def _require(cond: bool, where: str, message: str) -> None:
    if not cond:
        raise DataError(f"{where}: {message}")


def read_interchange(path: Path) -> InterchangeFile:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().split("\n") if ln.strip()]
    _require(bool(lines), str(path), "file is empty (missing header line)")
    try:
        head = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DataError(f"{path} header: invalid JSON ({exc})") from exc
    for key in ("kind", "version", "segment_seconds", "background_class", "class_names", "videos"):
        _require(key in head, f"{path} header", f"missing field {key!r}")
    _require(
        head["kind"] in (PREDICTIONS, GROUND_TRUTH),
        f"{path} header",
        f"unknown kind {head['kind']!r}",
    )
    _require(
        head["version"] == FORMAT_VERSION,
        f"{path} header",
        f"unsupported version {head['version']!r}",
    )
    header = InterchangeHeader(
        kind=head["kind"],
        segment_seconds=float(head["segment_seconds"]),
        background_class=head["background_class"],
        class_names=list(head["class_names"]),
        videos={k: int(v) for k, v in head["videos"].items()},
    )
    _require(header.segment_seconds > 0, f"{path} header", "segment_seconds must be > 0")
    _require(
        header.background_class in header.class_names,
        f"{path} header",
        "background_class not in class_names",
    )
    records = []
    for i, line in enumerate(lines[1:], start=1):
        where = f"{path} record {i}"
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{where}: invalid JSON ({exc})") from exc
        for key in ("video_id", "start_s", "end_s", "class", "cause_text", "class_claim"):
            _require(key in raw, where, f"missing field {key!r}")
        start, end = float(raw["start_s"]), float(raw["end_s"])
        _require(start < end, where, f"field start_s/end_s: empty interval [{start}, {end})")
        _require(raw["video_id"] in header.videos, where, f"field video_id: unknown {raw['video_id']!r}")
        _require(
            raw["class"] in header.class_names,
            where,
            f"field class: unknown {raw['class']!r}",
        )
        _require(
            raw["class"] != header.background_class,
            where,
            "field class: background intervals are implicit and must not be listed",
        )
        conf = None
        if header.kind == PREDICTIONS:
            _require("confidence" in raw, where, "missing field 'confidence'")
            conf = float(raw["confidence"])
            _require(0.0 <= conf <= 1.0, where, f"field confidence: {conf} outside [0, 1]")
        records.append(
            IntervalRecord(
                video_id=raw["video_id"],
                start_s=start,
                end_s=end,
                class_name=raw["class"],
                cause_text=raw["cause_text"],
                class_claim=raw["class_claim"],
                confidence=conf,
                atr_r=float(raw["atr_r"]) if "atr_r" in raw else None,
            )
        )
    return InterchangeFile(header=header, records=records)


def rasterize_segments(doc: InterchangeFile) -> dict[str, list[str]]:
    """Per-video segment-level class labels implied by the interval records.

    A segment takes the class of the interval covering its midpoint;
    uncovered segments are background. When prediction intervals overlap,
    the higher-confidence record wins (earlier record on ties).
    """
    ss = doc.header.segment_seconds
    out: dict[str, list[str]] = {
        vid: [doc.header.background_class] * n for vid, n in doc.header.videos.items()
    }
    winner: dict[str, list[float]] = {
        vid: [-1.0] * n for vid, n in doc.header.videos.items()
    }
    for r in doc.records:
        labels = out[r.video_id]
        conf = 1.0 if r.confidence is None else r.confidence
        for idx in range(len(labels)):
            mid = (idx + 0.5) * ss
            if r.start_s <= mid < r.end_s and conf > winner[r.video_id][idx]:
                labels[idx] = r.class_name
                winner[r.video_id][idx] = conf
    return out
