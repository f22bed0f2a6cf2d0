"""Synthetic omni-scene video datasets with controllable confounding.

Every video is a sequence of labeled segments. Each of the four scene
channels (facial, action, object, background) carries per-frame feature
vectors drawn around class prototypes. Three generative knobs matter:

- `contradiction_rate` rho: probability that the facial channel displays a
  *different* class's prototype than the true label (the channel that is
  easy to read but unreliable),
- `confounder_strength` kappa: a per-video latent offset added strongly to
  the facial channel and weakly (kappa/4) to the other three,
- `noise_sigma`: per-frame gaussian noise on top of every channel.

Non-background segments carry a cause channel (whose prototype gets a
signal boost) and a templated cause sentence; the template family is also
used when rendering predicted attributions, so predictions and ground
truth live in the same text space.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import json

import numpy as np

from .errors import ConfigError, DataError, StateError
from .fsio import atomic_write_text, dump_json, sha256_file
from .interchange import (
    GROUND_TRUTH,
    InterchangeFile,
    InterchangeHeader,
    IntervalRecord,
    write_interchange,
)

CHANNELS = ("facial", "action", "object", "background")

EXPLICIT_CLASSES = ("neutral", "positive", "negative")
IMPLICIT_CLASSES = (
    "normal",
    "fighting",
    "robbery",
    "theft",
    "vandalism",
    "traffic_accident",
    "fire",
    "flooding",
    "explosion",
    "assault",
    "shoplifting",
    "trespassing",
)

# generator-internal constants (not exposed as config)
BACKGROUND_RATE = 0.5
MAX_RUN_LENGTH = 3
CAUSE_BOOST = 1.6
# prototype magnitude relative to the unit confounder latent: small enough
# that a strength-1 confounder meaningfully corrupts the weak channels
PROTO_SCALE = 0.35
_PROTO_STREAM = 101
_VIDEO_STREAM = 202

CLASS_PHRASES = {
    "positive": "a warm joyful moment",
    "negative": "a distressing moment",
    "fighting": "a violent physical fight",
    "robbery": "an armed robbery",
    "theft": "someone stealing property",
    "vandalism": "deliberate property damage",
    "traffic_accident": "a traffic collision",
    "fire": "an uncontrolled fire",
    "flooding": "rising flood water",
    "explosion": "a sudden explosion",
    "assault": "a physical assault",
    "shoplifting": "concealed shoplifting",
    "trespassing": "unauthorized trespassing",
}

CHANNEL_PHRASES = {
    "facial": "facial expressions",
    "action": "body movements",
    "object": "object interactions",
    "background": "surrounding scenery",
}

NUM_CAUSE_VARIANTS = 3


def render_cause_text(class_name: str, channel: str, variant: int = 0) -> str:
    """Templated cause sentence for a (class, channel) pair."""
    cp = CLASS_PHRASES[class_name]
    ch = CHANNEL_PHRASES[channel]
    variants = (
        f"the {ch} show {cp}",
        f"{cp} is evident from the {ch}",
        f"based on the {ch} this looks like {cp}",
    )
    return variants[variant]


@dataclass
class GeneratorConfig:
    mode: str = "explicit"
    num_videos: int = 64
    segments_per_video: int = 6
    frames_per_segment: int = 4
    channel_widths: tuple[int, int, int, int] = (32, 48, 24, 64)
    confounder_strength: float = 0.0
    contradiction_rate: float = 0.0
    noise_sigma: float = 0.5
    seed: int = 0
    segment_seconds: float = 1.0
    test_fraction: float = 0.2

    def validate(self) -> None:
        if self.mode not in ("explicit", "implicit"):
            raise ConfigError(f"mode must be explicit or implicit, got {self.mode!r}")
        if self.num_videos < 1:
            raise ConfigError(f"num_videos must be >= 1, got {self.num_videos}")
        if self.segments_per_video < 2:
            raise ConfigError(f"segments_per_video must be >= 2, got {self.segments_per_video}")
        if self.frames_per_segment < 1:
            raise ConfigError(f"frames_per_segment must be >= 1, got {self.frames_per_segment}")
        if len(self.channel_widths) != 4 or any(w < 2 for w in self.channel_widths):
            raise ConfigError(f"channel_widths must be four counts >= 2, got {self.channel_widths}")
        if self.confounder_strength < 0:
            raise ConfigError(f"confounder_strength must be >= 0, got {self.confounder_strength}")
        if not 0.0 <= self.contradiction_rate <= 1.0:
            raise ConfigError(f"contradiction_rate must be in [0, 1], got {self.contradiction_rate}")
        if self.noise_sigma <= 0:
            raise ConfigError(f"noise_sigma must be > 0, got {self.noise_sigma}")
        if self.segment_seconds <= 0:
            raise ConfigError(f"segment_seconds must be > 0, got {self.segment_seconds}")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ConfigError(f"test_fraction must be in [0, 1), got {self.test_fraction}")

    @property
    def class_names(self) -> tuple[str, ...]:
        return EXPLICIT_CLASSES if self.mode == "explicit" else IMPLICIT_CLASSES

    @property
    def background_class(self) -> str:
        return self.class_names[0]


@dataclass
class SceneFeatureBundle:
    """Per-frame feature matrices for one segment, one per scene channel."""

    x_f: np.ndarray
    x_a: np.ndarray
    x_o: np.ndarray
    x_b: np.ndarray

    def by_channel(self) -> dict[str, np.ndarray]:
        return {"facial": self.x_f, "action": self.x_a, "object": self.x_o, "background": self.x_b}


@dataclass
class SegmentRecord:
    segment_index: int
    class_name: str
    cause_channel: str | None
    cause_text: str
    bundle: SceneFeatureBundle


@dataclass
class GtInterval:
    start_segment: int
    end_segment: int  # half-open
    class_name: str
    cause_channel: str
    cause_text: str


@dataclass
class VideoSample:
    video_id: str
    segments: list[SegmentRecord]
    intervals: list[GtInterval] = field(default_factory=list)


@dataclass
class Dataset:
    mode: str
    class_names: tuple[str, ...]
    channel_widths: tuple[int, int, int, int]
    segment_seconds: float
    samples: list[VideoSample]
    content_hash: str = ""
    config_echo: dict | None = None

    @property
    def background_class(self) -> str:
        return self.class_names[0]

    def class_index(self, name: str) -> int:
        return self.class_names.index(name)

    def all_segments(self) -> list[tuple[VideoSample, SegmentRecord]]:
        return [(v, s) for v in self.samples for s in v.segments]


def class_prototypes(config: GeneratorConfig) -> dict[str, np.ndarray]:
    """Per-class, per-channel prototype vectors (pure function of config)."""
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, _PROTO_STREAM)))
    protos: dict[str, np.ndarray] = {}
    for name in config.class_names:
        for channel, width in zip(CHANNELS, config.channel_widths):
            protos[f"{name}/{channel}"] = PROTO_SCALE * rng.normal(size=width)
    return protos


def video_confounder(config: GeneratorConfig, video_index: int) -> np.ndarray:
    """The per-video latent offset vector (width = widest channel)."""
    rng = _video_rng(config, video_index)
    return rng.normal(size=max(config.channel_widths))


def _video_rng(config: GeneratorConfig, video_index: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence((config.seed, _VIDEO_STREAM, video_index))
    )


def _merged_runs(class_ids: list[int]) -> list[tuple[int, int, int]]:
    """(start, end, class_id) for maximal runs of equal class."""
    runs = []
    start = 0
    for i in range(1, len(class_ids) + 1):
        if i == len(class_ids) or class_ids[i] != class_ids[start]:
            runs.append((start, i, class_ids[start]))
            start = i
    return runs


def _generate_video(config: GeneratorConfig, protos: dict[str, np.ndarray], video_index: int) -> VideoSample:
    rng = _video_rng(config, video_index)
    names = config.class_names
    n_classes = len(names)
    t_total = config.segments_per_video
    widths = dict(zip(CHANNELS, config.channel_widths))
    kappa = config.confounder_strength

    c_base = rng.normal(size=max(config.channel_widths))

    class_ids: list[int] = []
    while len(class_ids) < t_total:
        if rng.random() < BACKGROUND_RATE:
            cid = 0
        else:
            cid = int(rng.integers(1, n_classes))
        run = int(rng.integers(1, MAX_RUN_LENGTH + 1))
        class_ids.extend([cid] * run)
    class_ids = class_ids[:t_total]

    # one cause per maximal non-background run so interval ground truth is
    # single-valued; every member segment inherits it
    cause_by_segment: dict[int, tuple[str, str]] = {}
    intervals: list[GtInterval] = []
    for start, end, cid in _merged_runs(class_ids):
        if cid == 0:
            continue
        channel = CHANNELS[int(rng.integers(0, len(CHANNELS)))]
        variant = int(rng.integers(0, NUM_CAUSE_VARIANTS))
        text = render_cause_text(names[cid], channel, variant)
        for seg in range(start, end):
            cause_by_segment[seg] = (channel, text)
        intervals.append(GtInterval(start, end, names[cid], channel, text))

    segments: list[SegmentRecord] = []
    for seg in range(t_total):
        cid = class_ids[seg]
        if rng.random() < config.contradiction_rate:
            other = int(rng.integers(0, n_classes - 1))
            display_cid = other if other < cid else other + 1
        else:
            display_cid = cid
        cause_channel, cause_text = cause_by_segment.get(seg, (None, ""))
        mats = {}
        for channel in CHANNELS:
            width = widths[channel]
            proto_cid = display_cid if channel == "facial" else cid
            mean = protos[f"{names[proto_cid]}/{channel}"].copy()
            if cause_channel == channel:
                mean = mean * CAUSE_BOOST
            k_ch = kappa if channel == "facial" else kappa / 4.0
            mean = mean + k_ch * c_base[:width]
            mats[channel] = mean + config.noise_sigma * rng.normal(
                size=(config.frames_per_segment, width)
            )
        segments.append(
            SegmentRecord(
                segment_index=seg,
                class_name=names[cid],
                cause_channel=cause_channel,
                cause_text=cause_text,
                bundle=SceneFeatureBundle(
                    x_f=mats["facial"], x_a=mats["action"], x_o=mats["object"], x_b=mats["background"]
                ),
            )
        )
    return VideoSample(video_id=f"v{video_index:05d}", segments=segments, intervals=intervals)


def _segment_json(video_id: str, seg: SegmentRecord) -> str:
    rec = {
        "video_id": video_id,
        "segment_index": seg.segment_index,
        "class": seg.class_name,
        "cause_channel": seg.cause_channel,
        "cause_text": seg.cause_text,
        "x_f": seg.bundle.x_f.tolist(),
        "x_a": seg.bundle.x_a.tolist(),
        "x_o": seg.bundle.x_o.tolist(),
        "x_b": seg.bundle.x_b.tolist(),
    }
    return json.dumps(rec, separators=(",", ":"))


def _gt_file(config: GeneratorConfig, videos: list[VideoSample]) -> InterchangeFile:
    ss = config.segment_seconds
    header = InterchangeHeader(
        kind=GROUND_TRUTH,
        segment_seconds=ss,
        background_class=config.background_class,
        class_names=list(config.class_names),
        videos={v.video_id: len(v.segments) for v in videos},
    )
    records = [
        IntervalRecord(
            video_id=v.video_id,
            start_s=iv.start_segment * ss,
            end_s=iv.end_segment * ss,
            class_name=iv.class_name,
            cause_text=iv.cause_text,
            class_claim=iv.class_name,
        )
        for v in videos
        for iv in v.intervals
    ]
    return InterchangeFile(header=header, records=records)


def generate_dataset(config: GeneratorConfig, out_dir: Path) -> Path:
    """Write manifest, train/test segment records and ground-truth files."""
    config.validate()
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out_dir}: {exc}") from exc

    protos = class_prototypes(config)
    n_test = int(round(config.num_videos * config.test_fraction))
    n_train = config.num_videos - n_test
    videos = [_generate_video(config, protos, i) for i in range(config.num_videos)]
    splits = {"train": videos[:n_train], "test": videos[n_train:]}

    manifest = {
        "format_version": 1,
        "kind": "dataset_manifest",
        "mode": config.mode,
        "class_names": list(config.class_names),
        "channel_widths": {ch: w for ch, w in zip(CHANNELS, config.channel_widths)},
        "segment_seconds": config.segment_seconds,
        "config": asdict(config),
        "splits": {
            name: {
                "file": f"{name}.jsonl",
                "ground_truth": f"{name}_gt.jsonl",
                "videos": len(vids),
                "segments": sum(len(v.segments) for v in vids),
            }
            for name, vids in splits.items()
        },
    }
    for name, vids in splits.items():
        lines = [_segment_json(v.video_id, s) for v in vids for s in v.segments]
        atomic_write_text(out_dir / f"{name}.jsonl", "".join(ln + "\n" for ln in lines))
        write_interchange(out_dir / f"{name}_gt.jsonl", _gt_file(config, vids))
    atomic_write_text(out_dir / "manifest.json", dump_json(manifest))
    return out_dir


def _parse_matrix(raw, where: str, fieldname: str, width: int, frames: int) -> np.ndarray:
    arr = np.asarray(raw, dtype=np.float64)
    if arr.ndim != 2 or arr.shape != (frames, width):
        raise DataError(
            f"{where}: field {fieldname!r} has shape {arr.shape}, expected ({frames}, {width})"
        )
    if not np.isfinite(arr).all():
        raise DataError(f"{where}: field {fieldname!r} contains non-finite values")
    return arr


def load_dataset(dataset_dir: Path, split: str = "train") -> Dataset:
    """Load one split, validating every record against the manifest."""
    dataset_dir = Path(dataset_dir)
    manifest_path = dataset_dir / "manifest.json"
    if not manifest_path.exists():
        raise StateError(f"no manifest.json in {dataset_dir}; generate a dataset first")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if split not in manifest["splits"]:
        raise DataError(f"unknown split {split!r}; manifest has {sorted(manifest['splits'])}")
    class_names = tuple(manifest["class_names"])
    widths = tuple(manifest["channel_widths"][ch] for ch in CHANNELS)
    frames = manifest["config"]["frames_per_segment"]
    split_path = dataset_dir / manifest["splits"][split]["file"]

    by_video: dict[str, list[SegmentRecord]] = {}
    order: list[str] = []
    with open(split_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{split_path} record {lineno}"
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{where}: invalid JSON ({exc})") from exc
            for key in ("video_id", "segment_index", "class", "cause_channel", "cause_text", "x_f", "x_a", "x_o", "x_b"):
                if key not in raw:
                    raise DataError(f"{where}: missing field {key!r}")
            if raw["class"] not in class_names:
                raise DataError(f"{where}: field 'class' unknown: {raw['class']!r}")
            is_background = raw["class"] == class_names[0]
            if is_background:
                if raw["cause_channel"] is not None or raw["cause_text"]:
                    raise DataError(f"{where}: background segment carries a cause")
            else:
                if raw["cause_channel"] not in CHANNELS:
                    raise DataError(f"{where}: field 'cause_channel' invalid: {raw['cause_channel']!r}")
                if not raw["cause_text"]:
                    raise DataError(f"{where}: field 'cause_text' empty on a sentiment segment")
            mats = [
                _parse_matrix(raw[fieldname], where, fieldname, width, frames)
                for fieldname, width in zip(("x_f", "x_a", "x_o", "x_b"), widths)
            ]
            vid = raw["video_id"]
            if vid not in by_video:
                by_video[vid] = []
                order.append(vid)
            if raw["segment_index"] != len(by_video[vid]):
                raise DataError(
                    f"{where}: field 'segment_index' = {raw['segment_index']}, expected {len(by_video[vid])}"
                )
            by_video[vid].append(
                SegmentRecord(
                    segment_index=int(raw["segment_index"]),
                    class_name=raw["class"],
                    cause_channel=raw["cause_channel"],
                    cause_text=raw["cause_text"],
                    bundle=SceneFeatureBundle(*mats),
                )
            )

    samples = []
    for vid in order:
        segments = by_video[vid]
        samples.append(
            VideoSample(video_id=vid, segments=segments, intervals=derive_intervals(segments, class_names[0]))
        )
    return Dataset(
        mode=manifest["mode"],
        class_names=class_names,
        channel_widths=widths,
        segment_seconds=float(manifest["segment_seconds"]),
        samples=samples,
        content_hash=sha256_file(split_path),
        config_echo=manifest["config"],
    )


def derive_intervals(segments: list[SegmentRecord], background: str) -> list[GtInterval]:
    """Contiguous same-class non-background runs, in order."""
    ids = [s.class_name for s in segments]
    out = []
    start = 0
    for i in range(1, len(ids) + 1):
        if i == len(ids) or ids[i] != ids[start]:
            if ids[start] != background:
                first = segments[start]
                out.append(
                    GtInterval(
                        start_segment=start,
                        end_segment=i,
                        class_name=ids[start],
                        cause_channel=first.cause_channel or "",
                        cause_text=first.cause_text,
                    )
                )
            start = i
    return out


@dataclass
class DatasetReport:
    violations: list[str]
    class_histogram: dict[str, int]
    interval_count: int
    interval_mean_length: float
    widths_ok: bool


def validate_dataset(dataset: Dataset) -> DatasetReport:
    """Re-check every invariant; report-only (never raises on bad content)."""
    violations: list[str] = []
    histogram: dict[str, int] = {}
    interval_lengths: list[int] = []
    widths_ok = True
    for video in dataset.samples:
        for seg in video.segments:
            histogram[seg.class_name] = histogram.get(seg.class_name, 0) + 1
            for ch, mat in seg.bundle.by_channel().items():
                want = dataset.channel_widths[CHANNELS.index(ch)]
                if mat.shape[1] != want:
                    widths_ok = False
                    violations.append(
                        f"{video.video_id} seg {seg.segment_index}: channel {ch} width {mat.shape[1]} != {want}"
                    )
                if not np.isfinite(mat).all():
                    violations.append(
                        f"{video.video_id} seg {seg.segment_index}: channel {ch} has non-finite values"
                    )
            is_bg = seg.class_name == dataset.background_class
            has_cause = seg.cause_channel is not None and bool(seg.cause_text)
            if is_bg and has_cause:
                violations.append(f"{video.video_id} seg {seg.segment_index}: background segment has a cause")
            if not is_bg and not has_cause:
                violations.append(f"{video.video_id} seg {seg.segment_index}: sentiment segment lacks a cause")
        expected = derive_intervals(video.segments, dataset.background_class)
        got = video.intervals
        if [(g.start_segment, g.end_segment, g.class_name) for g in got] != [
            (e.start_segment, e.end_segment, e.class_name) for e in expected
        ]:
            violations.append(f"{video.video_id}: intervals do not tile the non-background segments")
        prev_end = -1
        for iv in got:
            if iv.start_segment >= iv.end_segment:
                violations.append(f"{video.video_id}: empty interval {iv}")
            if iv.start_segment < prev_end:
                violations.append(f"{video.video_id}: overlapping or unsorted intervals at {iv.start_segment}")
            prev_end = max(prev_end, iv.end_segment)
            interval_lengths.append(iv.end_segment - iv.start_segment)
    return DatasetReport(
        violations=violations,
        class_histogram=dict(sorted(histogram.items())),
        interval_count=len(interval_lengths),
        interval_mean_length=float(np.mean(interval_lengths)) if interval_lengths else 0.0,
        widths_ok=widths_ok,
    )
