"""Evaluation suite over the interval interchange format.

Identification is scored at segment granularity (accuracy over all
segments; F2 and the false-negative rate over the sentiment-vs-background
binarization, where a false negative is a sentiment-bearing segment
predicted background). Localization is mAP over temporal IoU thresholds
0.1/0.2/0.3 with greedy one-to-one matching and all-point precision
envelope integration; `ap_bruteforce` re-derives the same definition
without the envelope/cumsum shortcuts and is used only as a test oracle.
Attribution is scored by pairing each predicted interval with its
maximum-overlap ground-truth interval: ROUGE-L F1 for relevance,
term-frequency cosine for consistency, and claim accuracy.

`map_avg` is the arithmetic mean of the three implemented thresholds.
Metrics that are undefined on an input (no positive segments, no paired
texts) are reported as None and rendered as "na", never as 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .interchange import GROUND_TRUTH, InterchangeFile, PREDICTIONS, rasterize_segments

IOU_THRESHOLDS = (0.1, 0.2, 0.3)
BRUTEFORCE_MAX_PREDICTIONS = 8


def accuracy(pred_classes: list, true_classes: list) -> float:
    if len(pred_classes) != len(true_classes):
        raise DataError(f"accuracy: {len(pred_classes)} predictions vs {len(true_classes)} labels")
    if not true_classes:
        raise DataError("accuracy of empty sequences")
    hits = sum(p == t for p, t in zip(pred_classes, true_classes))
    return hits / len(true_classes)


def _binary_counts(pred_positive: list, true_positive: list) -> tuple[int, int, int]:
    if len(pred_positive) != len(true_positive):
        raise DataError(f"binarized lengths differ: {len(pred_positive)} vs {len(true_positive)}")
    tp = sum(p and t for p, t in zip(pred_positive, true_positive))
    fp = sum(p and not t for p, t in zip(pred_positive, true_positive))
    fn = sum(t and not p for p, t in zip(pred_positive, true_positive))
    return tp, fp, fn


def f2_score(pred_positive: list, true_positive: list) -> float:
    """F-beta with beta=2: recall weighted double, 5PR/(4P+R)."""
    tp, fp, fn = _binary_counts(pred_positive, true_positive)
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 5.0 * precision * recall / (4.0 * precision + recall)


def fnr(pred_positive: list, true_positive: list) -> float | None:
    """Missed sentiment segments over true sentiment segments; None if no positives."""
    tp, _, fn = _binary_counts(pred_positive, true_positive)
    positives = tp + fn
    if positives == 0:
        return None
    return fn / positives


def interval_iou(a: tuple[float, float], b: tuple[float, float]) -> float:
    (a0, a1), (b0, b1) = a, b
    if a0 >= a1 or b0 >= b1:
        raise DataError(f"interval_iou of empty interval: {a} vs {b}")
    inter = min(a1, b1) - max(a0, b0)
    if inter <= 0:
        return 0.0
    union = max(a1, b1) - min(a0, b0)
    return inter / union


@dataclass(frozen=True)
class PredInterval:
    video_id: str
    start_s: float
    end_s: float
    class_name: str
    confidence: float


@dataclass(frozen=True)
class TrueInterval:
    video_id: str
    start_s: float
    end_s: float
    class_name: str


def _rank_key(p: PredInterval):
    return (-p.confidence, p.video_id, p.start_s, p.end_s)


def _greedy_match_flags(preds: list[PredInterval], gts: list[TrueInterval], threshold: float) -> list[bool]:
    """True/false-positive flags for already-ranked same-class predictions.

    Each prediction claims the unmatched same-video ground truth with the
    highest IoU at or above the threshold (earliest on ties).
    """
    taken = [False] * len(gts)
    flags = []
    for p in preds:
        best, best_iou = -1, 0.0
        for j, g in enumerate(gts):
            if taken[j] or g.video_id != p.video_id:
                continue
            iou = interval_iou((p.start_s, p.end_s), (g.start_s, g.end_s))
            if iou >= threshold and iou > best_iou:
                best, best_iou = j, iou
        if best >= 0:
            taken[best] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def _ap_from_flags(flags: list[bool], n_gt: int) -> float:
    """All-point interpolation: sum of recall steps times the precision envelope."""
    if n_gt == 0:
        return 0.0
    tp = 0
    points = []  # (recall, precision) after each rank
    for k, flag in enumerate(flags, start=1):
        tp += int(flag)
        points.append((tp / n_gt, tp / k))
    envelope = [0.0] * len(points)
    best = 0.0
    for i in range(len(points) - 1, -1, -1):
        best = max(best, points[i][1])
        envelope[i] = best
    ap = 0.0
    prev_recall = 0.0
    for (recall, _), env in zip(points, envelope):
        ap += (recall - prev_recall) * env
        prev_recall = recall
    return ap


@dataclass
class MapResult:
    per_threshold: dict[float, float]
    per_class: dict[str, dict[float, float]]

    @property
    def avg(self) -> float:
        vals = list(self.per_threshold.values())
        return sum(vals) / len(vals) if vals else 0.0


def map_at_iou(
    predictions: list[PredInterval],
    ground_truth: list[TrueInterval],
    thresholds: tuple[float, ...] = IOU_THRESHOLDS,
) -> MapResult:
    """Mean AP over classes with ground truth, per IoU threshold."""
    classes = sorted({g.class_name for g in ground_truth})
    per_class: dict[str, dict[float, float]] = {c: {} for c in classes}
    per_threshold: dict[float, float] = {}
    for thr in thresholds:
        aps = []
        for cls in classes:
            preds = sorted((p for p in predictions if p.class_name == cls), key=_rank_key)
            gts = [g for g in ground_truth if g.class_name == cls]
            ap = _ap_from_flags(_greedy_match_flags(preds, gts, thr), len(gts))
            per_class[cls][thr] = ap
            aps.append(ap)
        total = 0.0
        for ap in aps:
            total += ap
        per_threshold[thr] = total / len(aps) if aps else 0.0
    return MapResult(per_threshold=per_threshold, per_class=per_class)


def ap_bruteforce(
    predictions: list[PredInterval],
    ground_truth: list[TrueInterval],
    threshold: float,
) -> float:
    """Test oracle: same ranked-matching definition, no shortcuts.

    Re-runs the greedy matching from scratch for every ranked prefix and
    takes the precision envelope by explicit suffix scans. Refuses large
    instances; this exists to check `map_at_iou`, not to score datasets.
    """
    if len(predictions) > BRUTEFORCE_MAX_PREDICTIONS:
        raise ConfigError(
            f"brute-force oracle refuses {len(predictions)} predictions "
            f"(limit {BRUTEFORCE_MAX_PREDICTIONS})"
        )
    classes = sorted({g.class_name for g in ground_truth})
    aps = []
    for cls in classes:
        preds = sorted((p for p in predictions if p.class_name == cls), key=_rank_key)
        gts = [g for g in ground_truth if g.class_name == cls]
        n_gt = len(gts)
        points = []
        for k in range(1, len(preds) + 1):
            flags_k = _greedy_match_flags(preds[:k], gts, threshold)
            tp = sum(flags_k)
            points.append((tp / n_gt, tp / k))
        ap = 0.0
        prev_recall = 0.0
        for i, (recall, _) in enumerate(points):
            best = 0.0
            for j in range(i, len(points)):
                best = max(best, points[j][1])
            ap += (recall - prev_recall) * best
            prev_recall = recall
        aps.append(ap)
    total = 0.0
    for ap in aps:
        total += ap
    return total / len(aps) if aps else 0.0


def _tokens(text: str) -> list[str]:
    return text.lower().split()


def _lcs_length(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for i in range(1, len(a) + 1):
        cur = [0] * (len(b) + 1)
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    return prev[len(b)]


def sem_r(pred_text: str, true_text: str) -> float | None:
    """ROUGE-L F1 over whitespace-lowercased tokens; None without a reference."""
    ref = _tokens(true_text)
    if not ref:
        return None
    hyp = _tokens(pred_text)
    if not hyp:
        return 0.0
    lcs = _lcs_length(hyp, ref)
    if lcs == 0:
        return 0.0
    precision = lcs / len(hyp)
    recall = lcs / len(ref)
    return 2.0 * precision * recall / (precision + recall)


def sem_c(pred_text: str, true_text: str) -> float:
    """Cosine similarity of term-frequency bags over the union vocabulary."""
    a, b = _tokens(pred_text), _tokens(true_text)
    vocab = sorted(set(a) | set(b))
    if not vocab:
        return 0.0
    va = np.array([a.count(w) for w in vocab], dtype=np.float64)
    vb = np.array([b.count(w) for w in vocab], dtype=np.float64)
    denom_sq = float(va @ va) * float(vb @ vb)
    if denom_sq == 0.0:
        return 0.0
    return float(va @ vb) / float(np.sqrt(denom_sq))


def _max_overlap_gt(pred: PredInterval, gts: list[TrueInterval]) -> TrueInterval | None:
    best, best_overlap = None, 0.0
    for g in gts:
        if g.video_id != pred.video_id:
            continue
        overlap = min(pred.end_s, g.end_s) - max(pred.start_s, g.start_s)
        if overlap > best_overlap:
            best, best_overlap = g, overlap
    return best


def sen_a(
    claims: list[tuple[PredInterval, str]],
    ground_truth: list[TrueInterval],
) -> float | None:
    """Fraction of located intervals whose class claim matches the
    maximum-overlap ground-truth class; no overlap counts as wrong."""
    if not claims:
        return None
    hits = 0
    for pred, claim in claims:
        g = _max_overlap_gt(pred, ground_truth)
        if g is not None and claim == g.class_name:
            hits += 1
    return hits / len(claims)


@dataclass
class MetricsReport:
    videos: int
    segments: int
    positive_segments: int
    acc: float
    f2: float
    fnr: float | None
    map_by_threshold: dict[float, float]
    map_avg: float
    per_class_ap: dict[str, dict[float, float]]
    sem_r: float | None
    sem_c: float | None
    sen_a: float | None
    atr_r: float | None
    binary_counts: dict[str, int] = field(default_factory=dict)


def evaluate(predictions: InterchangeFile, ground_truth: InterchangeFile) -> MetricsReport:
    """Score a predictions file against a ground-truth file."""
    if predictions.header.kind != PREDICTIONS:
        raise DataError(f"first argument has kind {predictions.header.kind!r}, want predictions")
    if ground_truth.header.kind != GROUND_TRUTH:
        raise DataError(f"second argument has kind {ground_truth.header.kind!r}, want ground truth")
    if predictions.header.videos != ground_truth.header.videos:
        raise DataError("prediction and ground-truth files disagree on the video map")
    if predictions.header.segment_seconds != ground_truth.header.segment_seconds:
        raise DataError("prediction and ground-truth files disagree on segment_seconds")
    bg = ground_truth.header.background_class

    pred_segments = rasterize_segments(predictions)
    true_segments = rasterize_segments(ground_truth)
    video_ids = sorted(ground_truth.header.videos)
    pred_flat = [c for vid in video_ids for c in pred_segments[vid]]
    true_flat = [c for vid in video_ids for c in true_segments[vid]]

    pred_bin = [c != bg for c in pred_flat]
    true_bin = [c != bg for c in true_flat]
    tp, fp, fn = _binary_counts(pred_bin, true_bin)

    pred_intervals = [
        PredInterval(r.video_id, r.start_s, r.end_s, r.class_name, r.confidence or 0.0)
        for r in predictions.records
    ]
    true_intervals = [
        TrueInterval(r.video_id, r.start_s, r.end_s, r.class_name) for r in ground_truth.records
    ]
    map_result = map_at_iou(pred_intervals, true_intervals)

    sem_r_scores, sem_c_scores = [], []
    claims = []
    for rec, pred in zip(predictions.records, pred_intervals):
        claims.append((pred, rec.class_claim))
        g_best = _max_overlap_gt(pred, true_intervals)
        if g_best is None:
            continue
        g_rec = next(
            r
            for r in ground_truth.records
            if (r.video_id, r.start_s, r.end_s, r.class_name)
            == (g_best.video_id, g_best.start_s, g_best.end_s, g_best.class_name)
        )
        r_score = sem_r(rec.cause_text, g_rec.cause_text)
        if r_score is not None:
            sem_r_scores.append(r_score)
        sem_c_scores.append(sem_c(rec.cause_text, g_rec.cause_text))

    atr_values = [r.atr_r for r in predictions.records if r.atr_r is not None]

    return MetricsReport(
        videos=len(video_ids),
        segments=len(true_flat),
        positive_segments=tp + fn,
        acc=accuracy(pred_flat, true_flat),
        f2=f2_score(pred_bin, true_bin),
        fnr=fnr(pred_bin, true_bin),
        map_by_threshold=map_result.per_threshold,
        map_avg=map_result.avg,
        per_class_ap=map_result.per_class,
        sem_r=float(np.mean(sem_r_scores)) if sem_r_scores else None,
        sem_c=float(np.mean(sem_c_scores)) if sem_c_scores else None,
        sen_a=sen_a(claims, true_intervals),
        atr_r=float(np.mean(atr_values)) if atr_values else None,
        binary_counts={"tp": tp, "fp": fp, "fn": fn},
    )


def _fmt(value: float | None) -> str:
    return "na" if value is None else f"{value:.6f}"


def render_report_text(report: MetricsReport) -> str:
    lines = [
        "scene sentiment evaluation",
        "==========================",
        f"videos             {report.videos}",
        f"segments           {report.segments}",
        f"positive_segments  {report.positive_segments}",
        "",
        "metric    value",
        f"acc       {_fmt(report.acc)}",
        f"f2        {_fmt(report.f2)}",
        f"fnr       {_fmt(report.fnr)}",
    ]
    for thr in sorted(report.map_by_threshold):
        lines.append(f"map@{thr:.1f}   {_fmt(report.map_by_threshold[thr])}")
    lines += [
        f"map_avg   {_fmt(report.map_avg)}",
        f"sem_r     {_fmt(report.sem_r)}",
        f"sem_c     {_fmt(report.sem_c)}",
        f"sen_a     {_fmt(report.sen_a)}",
        f"atr_r     {_fmt(report.atr_r)}",
        "",
        "per-class average precision",
    ]
    thresholds = sorted(report.map_by_threshold)
    header = "class".ljust(20) + "".join(f"map@{t:.1f}".rjust(10) for t in thresholds)
    lines.append(header)
    for cls in sorted(report.per_class_ap):
        row = cls.ljust(20) + "".join(
            f"{report.per_class_ap[cls][t]:.6f}".rjust(10) for t in thresholds
        )
        lines.append(row)
    return "\n".join(lines) + "\n"


def render_metrics_tsv(report: MetricsReport) -> str:
    rows = [("metric", "value")]
    rows.append(("acc", _fmt(report.acc)))
    rows.append(("f2", _fmt(report.f2)))
    rows.append(("fnr", _fmt(report.fnr)))
    for thr in sorted(report.map_by_threshold):
        rows.append((f"map@{thr:.1f}", _fmt(report.map_by_threshold[thr])))
    rows.append(("map_avg", _fmt(report.map_avg)))
    rows.append(("sem_r", _fmt(report.sem_r)))
    rows.append(("sem_c", _fmt(report.sem_c)))
    rows.append(("sen_a", _fmt(report.sen_a)))
    rows.append(("atr_r", _fmt(report.atr_r)))
    return "\n".join("\t".join(r) for r in rows) + "\n"
