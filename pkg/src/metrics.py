"""
Evaluation protocol for event extraction and localization.

Extraction: Single, Pair and Quadruple F1 over temporally matched events.
Localization: AP at temporal-IoU thresholds per event type, frame-level
false-negative rate and recall-weighted F2.

Rates are fractions in [0, 1]; they are scaled by 100 only in format_table().
None marks a metric that is undefined for the given input.
"""
import concurrent.futures
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from synthdata import AbnormalEvent, Dataset, EventQuadruple, FPS
from vocabulary import normalize_label

logger = logging.getLogger(__name__)

PREDICTION_FORMAT = "mvae-predictions"
PREDICTION_VERSION = 1
DEFAULT_THRESHOLDS = (0.1, 0.2, 0.3)

ELEMENTS = ("subject", "event_type", "object", "scene")
PAIRS: Dict[str, Tuple[str, str]] = {
    "sub-type": ("subject", "event_type"),
    "obj-type": ("object", "event_type"),
    "sub-sce": ("subject", "scene"),
    "obj-sce": ("object", "scene"),
}


class PredictionFormatError(ValueError):
    """Malformed prediction file."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class PredictedEvent(BaseModel):
    start_s: float = Field(ge=0)
    end_s: float
    quadruple: EventQuadruple
    confidence: float = Field(default=1.0, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _ordered(self):
        if not self.start_s < self.end_s:
            raise ValueError(f"predicted start {self.start_s} must precede end {self.end_s}")
        return self


class VideoPrediction(BaseModel):
    """Model output for one video; frame_labels default to the union of predicted spans."""
    video_id: str
    events: List[PredictedEvent] = Field(default_factory=list)
    frame_labels: Optional[List[int]] = None
    frame_scores: Optional[List[float]] = None

    @field_validator("frame_labels")
    @classmethod
    def _binary(cls, labels):
        if labels is not None and any(v not in (0, 1) for v in labels):
            raise ValueError("frame labels must be 0 or 1")
        return labels

    def frames(self, n_frames: int, fps: int = FPS) -> np.ndarray:
        if self.frame_labels is not None:
            if len(self.frame_labels) != n_frames:
                raise PredictionFormatError(
                    f"{self.video_id}: {len(self.frame_labels)} frame labels for a {n_frames}-frame video"
                )
            return np.asarray(self.frame_labels, dtype=np.int64)
        labels = np.zeros(n_frames, dtype=np.int64)
        for event in self.events:
            start = int(np.ceil(event.start_s * fps - 1e-9))
            end = int(np.ceil(event.end_s * fps - 1e-9))
            labels[max(start, 0):min(end, n_frames)] = 1
        return labels


def tiou(a_start: float, a_end: float, b_start: float, b_end: float) -> float:
    """Temporal intersection over union of two spans."""
    inter = max(0.0, min(a_end, b_end) - max(a_start, b_start))
    union = max(a_end, b_end) - min(a_start, b_start)
    return inter / union if union > 0 else 0.0


@dataclass
class MatchResult:
    pairs: List[Tuple[int, int, float]]  # (pred index, gold index, tIoU)
    unmatched_preds: List[int]
    unmatched_golds: List[int]


def match_events(preds: Sequence[PredictedEvent], golds: Sequence[AbnormalEvent]) -> MatchResult:
    """
    Greedy one-to-one matching by descending tIoU; ties go to higher
    confidence, then earlier predicted start. Zero-overlap pairs never match.
    """
    candidates = []
    for p, pred in enumerate(preds):
        for g, gold in enumerate(golds):
            overlap = tiou(pred.start_s, pred.end_s, gold.start_s, gold.end_s)
            if overlap > 0:
                candidates.append((-overlap, -pred.confidence, pred.start_s, p, g))
    candidates.sort()
    used_p, used_g, pairs = set(), set(), []
    for neg_overlap, _, _, p, g in candidates:
        if p in used_p or g in used_g:
            continue
        used_p.add(p)
        used_g.add(g)
        pairs.append((p, g, -neg_overlap))
    return MatchResult(
        pairs=pairs,
        unmatched_preds=[p for p in range(len(preds)) if p not in used_p],
        unmatched_golds=[g for g in range(len(golds)) if g not in used_g],
    )


@dataclass
class VideoMatch:
    """Matched and leftover events of one video, as normalised quadruples."""
    pairs: List[Tuple[Tuple[str, ...], Tuple[str, ...]]]
    leftover_preds: List[Tuple[str, ...]]
    leftover_golds: List[Tuple[str, ...]]


def _normalized(quadruple: EventQuadruple) -> Tuple[str, ...]:
    return tuple(normalize_label(v) for v in quadruple.elements())


def video_match(preds: Sequence[PredictedEvent], golds: Sequence[AbnormalEvent]) -> VideoMatch:
    result = match_events(preds, golds)
    return VideoMatch(
        pairs=[(_normalized(preds[p].quadruple), _normalized(golds[g].quadruple)) for p, g, _ in result.pairs],
        leftover_preds=[_normalized(preds[p].quadruple) for p in result.unmatched_preds],
        leftover_golds=[_normalized(golds[g].quadruple) for g in result.unmatched_golds],
    )


def _macro_f1(
    matches: Iterable[VideoMatch], key, classes: Optional[set] = None
) -> Optional[float]:
    """Macro-F1 of key(quadruple) values; classes default to gold ∪ predicted values."""
    tp: Dict[Tuple, int] = {}
    fp: Dict[Tuple, int] = {}
    fn: Dict[Tuple, int] = {}
    seen_gold, seen_pred = set(), set()
    for match in matches:
        for pred, gold in match.pairs:
            p, g = key(pred), key(gold)
            seen_pred.add(p)
            seen_gold.add(g)
            if p == g:
                tp[p] = tp.get(p, 0) + 1
            else:
                fp[p] = fp.get(p, 0) + 1
                fn[g] = fn.get(g, 0) + 1
        for pred in match.leftover_preds:
            p = key(pred)
            seen_pred.add(p)
            fp[p] = fp.get(p, 0) + 1
        for gold in match.leftover_golds:
            g = key(gold)
            seen_gold.add(g)
            fn[g] = fn.get(g, 0) + 1
    if classes is None:
        classes = seen_gold | seen_pred
    if not classes:
        return None
    scores = []
    for c in classes:
        denominator = 2 * tp.get(c, 0) + fp.get(c, 0) + fn.get(c, 0)
        scores.append(2 * tp.get(c, 0) / denominator if denominator else 0.0)
    return float(np.mean(scores))


def f1_single(matches: Sequence[VideoMatch], element: str) -> Optional[float]:
    if element not in ELEMENTS:
        raise ValueError(f"unknown element {element!r}, expected one of {ELEMENTS}")
    i = ELEMENTS.index(element)
    return _macro_f1(matches, lambda q: q[i])


def f1_pair(matches: Sequence[VideoMatch], pair: str) -> Optional[float]:
    """A pair is correct only when both elements match; classes are the gold pair values."""
    if pair not in PAIRS:
        raise ValueError(f"unknown pair {pair!r}, expected one of {list(PAIRS)}")
    a, b = (ELEMENTS.index(e) for e in PAIRS[pair])

    def key(q):
        return (q[a], q[b])

    gold_classes = set()
    for match in matches:
        gold_classes.update(key(gold) for _, gold in match.pairs)
        gold_classes.update(key(gold) for gold in match.leftover_golds)
    return _macro_f1(matches, key, classes=gold_classes)


def f1_quadruple(matches: Sequence[VideoMatch]) -> Optional[float]:
    """Micro-F1 over events: a matched pair is a hit iff all four elements agree."""
    hits = sum(1 for match in matches for pred, gold in match.pairs if pred == gold)
    predicted = sum(len(match.pairs) + len(match.leftover_preds) for match in matches)
    gold = sum(len(match.pairs) + len(match.leftover_golds) for match in matches)
    if predicted + gold == 0:
        return None
    return 2 * hits / (predicted + gold)


def ap_from_hits(hits: np.ndarray, total: int) -> float:
    """
    All-points interpolated AP of a ranked hit/miss sequence against `total` golds.

    Recall rises by 1/total at every hit, so the area under the precision
    envelope is the envelope summed over hit ranks, divided by total.
    """
    hits = np.asarray(hits, dtype=np.float64)
    if total <= 0:
        raise ValueError("average precision needs at least one gold event")
    if not hits.size:
        return 0.0
    precision = np.cumsum(hits) / np.arange(1, hits.size + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return float(envelope[hits > 0].sum() / total)


def _type_ap(
    ranked: List[Tuple[str, PredictedEvent]], golds: Dict[str, List[AbnormalEvent]], threshold: float
) -> float:
    total = sum(len(v) for v in golds.values())
    consumed = {video_id: [False] * len(events) for video_id, events in golds.items()}
    hits = np.zeros(len(ranked))
    for rank, (video_id, pred) in enumerate(ranked):
        best, best_iou = None, threshold
        for g, gold in enumerate(golds.get(video_id, [])):
            if consumed[video_id][g]:
                continue
            overlap = tiou(pred.start_s, pred.end_s, gold.start_s, gold.end_s)
            if overlap >= best_iou and (best is None or overlap > best_iou):
                best, best_iou = g, overlap
        if best is not None:
            consumed[video_id][best] = True
            hits[rank] = 1.0
    return ap_from_hits(hits, total)


def map_at_tiou(
    predictions: Dict[str, Sequence[PredictedEvent]],
    golds: Dict[str, Sequence[AbnormalEvent]],
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
) -> Tuple[Dict[float, Optional[float]], Optional[float], Dict[str, Dict[float, float]]]:
    """
    Class-averaged AP per threshold, their mean, and the per-type table.

    Predictions of one type are ranked dataset-wide by confidence, then
    earlier start, then video id; each gold is consumed once.
    """
    gold_by_type: Dict[str, Dict[str, List[AbnormalEvent]]] = {}
    for video_id, events in golds.items():
        for event in events:
            t = normalize_label(event.quadruple.event_type)
            gold_by_type.setdefault(t, {}).setdefault(video_id, []).append(event)
    if not gold_by_type:
        return {t: None for t in thresholds}, None, {}

    pred_by_type: Dict[str, List[Tuple[str, PredictedEvent]]] = {}
    for video_id, events in predictions.items():
        for event in events:
            pred_by_type.setdefault(normalize_label(event.quadruple.event_type), []).append((video_id, event))
    for ranked in pred_by_type.values():
        ranked.sort(key=lambda item: (-item[1].confidence, item[1].start_s, item[0]))

    per_type: Dict[str, Dict[float, float]] = {}
    for event_type in sorted(gold_by_type):
        ranked = pred_by_type.get(event_type, [])
        per_type[event_type] = {t: _type_ap(ranked, gold_by_type[event_type], t) for t in thresholds}
    per_threshold = {t: float(np.mean([per_type[c][t] for c in per_type])) for t in thresholds}
    return per_threshold, float(np.mean(list(per_threshold.values()))), per_type


@dataclass
class FrameCounts:
    positives: int
    predicted_positives: int
    true_positives: int

    @property
    def false_negatives(self) -> int:
        return self.positives - self.true_positives


def frame_counts(frame_preds: np.ndarray, frame_golds: np.ndarray) -> FrameCounts:
    preds = np.asarray(frame_preds, dtype=np.int64).reshape(-1)
    golds = np.asarray(frame_golds, dtype=np.int64).reshape(-1)
    if preds.shape != golds.shape:
        raise ValueError(f"frame predictions ({preds.size}) and gold labels ({golds.size}) differ in length")
    return FrameCounts(
        positives=int(golds.sum()),
        predicted_positives=int(preds.sum()),
        true_positives=int((preds * golds).sum()),
    )


def fnr(frame_preds: np.ndarray, frame_golds: np.ndarray) -> Optional[float]:
    """False-negative frames / positive frames; None without positive frames."""
    counts = frame_counts(frame_preds, frame_golds)
    if counts.positives == 0:
        return None
    return counts.false_negatives / counts.positives


def f2(frame_preds: np.ndarray, frame_golds: np.ndarray) -> Optional[float]:
    """5PR / (4P + R) over abnormal frames; None when nothing is positive on either side."""
    counts = frame_counts(frame_preds, frame_golds)
    if counts.positives == 0 and counts.predicted_positives == 0:
        return None
    precision = counts.true_positives / counts.predicted_positives if counts.predicted_positives else 0.0
    recall = counts.true_positives / counts.positives if counts.positives else 0.0
    if precision == 0.0 and recall == 0.0:
        return 0.0
    return 5 * precision * recall / (4 * precision + recall)


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

class ReportCounts(BaseModel):
    videos: int = 0
    gold_events: int = 0
    predicted_events: int = 0
    matched_events: int = 0
    quadruple_hits: int = 0
    positive_frames: int = 0
    predicted_positive_frames: int = 0
    true_positive_frames: int = 0
    false_negative_frames: int = 0


class EvalReport(BaseModel):
    single: Dict[str, Optional[float]]
    pair: Dict[str, Optional[float]]
    quadruple: Optional[float]
    extraction_average: Optional[float]
    ap: Dict[str, Optional[float]]
    map_mean: Optional[float]
    ap_by_type: Dict[str, Dict[str, float]] = Field(default_factory=dict)
    fnr: Optional[float]
    f2: Optional[float]
    counts: ReportCounts


def _mean_defined(values: Iterable[Optional[float]]) -> Optional[float]:
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else None


def evaluate(
    predictions: Sequence[VideoPrediction],
    dataset: Dataset,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    workers: int = 4,
) -> EvalReport:
    """Score predictions against a gold dataset; missing videos count as empty predictions."""
    by_id = {}
    for prediction in predictions:
        if prediction.video_id in by_id:
            raise PredictionFormatError(f"duplicate prediction for video {prediction.video_id}")
        by_id[prediction.video_id] = prediction
    gold_ids = {video.video_id for video in dataset}
    unknown = sorted(set(by_id) - gold_ids)
    if unknown:
        raise PredictionFormatError(f"predictions for unknown videos: {unknown[:5]}")

    videos = list(dataset)
    per_video = [by_id.get(v.video_id, VideoPrediction(video_id=v.video_id)) for v in videos]

    def score_video(index: int):
        video, prediction = videos[index], per_video[index]
        return (
            video_match(prediction.events, video.events),
            prediction.frames(video.n_frames, video.fps),
        )

    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as executor:
        scored = list(executor.map(score_video, range(len(videos))))
    matches = [match for match, _ in scored]
    frame_preds = np.concatenate([frames for _, frames in scored]) if scored else np.zeros(0, dtype=np.int64)
    frame_golds = np.concatenate([v.frame_labels for v in videos]) if videos else np.zeros(0, dtype=np.int64)

    single = {element: f1_single(matches, element) for element in ELEMENTS}
    pair = {name: f1_pair(matches, name) for name in PAIRS}
    quadruple = f1_quadruple(matches)
    per_threshold, map_mean, per_type = map_at_tiou(
        {p.video_id: p.events for p in per_video},
        {v.video_id: v.events for v in videos},
        thresholds,
    )
    frames = frame_counts(frame_preds, frame_golds)
    missing = len(videos) - sum(1 for v in videos if v.video_id in by_id)
    if missing:
        logger.warning(f"{missing} of {len(videos)} videos have no prediction; scored as empty")
    counts = ReportCounts(
        videos=len(videos),
        gold_events=sum(len(v.events) for v in videos),
        predicted_events=sum(len(p.events) for p in per_video),
        matched_events=sum(len(m.pairs) for m in matches),
        quadruple_hits=sum(1 for m in matches for pred, gold in m.pairs if pred == gold),
        positive_frames=frames.positives,
        predicted_positive_frames=frames.predicted_positives,
        true_positive_frames=frames.true_positives,
        false_negative_frames=frames.false_negatives,
    )
    return EvalReport(
        single=single,
        pair=pair,
        quadruple=quadruple,
        extraction_average=_mean_defined(list(single.values()) + list(pair.values()) + [quadruple]),
        ap={f"{t:.1f}": v for t, v in per_threshold.items()},
        map_mean=map_mean,
        ap_by_type={c: {f"{t:.1f}": v for t, v in row.items()} for c, row in per_type.items()},
        fnr=fnr(frame_preds, frame_golds),
        f2=f2(frame_preds, frame_golds),
        counts=counts,
    )


def _cell(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{100 * value:.2f}"


def report_columns(report: EvalReport) -> List[Tuple[str, Optional[float]]]:
    columns = [(f"S:{k}", v) for k, v in report.single.items()]
    columns += [(f"P:{k}", v) for k, v in report.pair.items()]
    columns += [("Quad", report.quadruple), ("ExtAvg", report.extraction_average)]
    columns += [(f"AP@{k}", v) for k, v in report.ap.items()]
    columns += [("mAP", report.map_mean), ("FNRs", report.fnr), ("F2", report.f2)]
    return columns


def format_table(report: EvalReport) -> str:
    """Human-readable table, values ×100."""
    lines = ["metric                value"]
    for name, value in report_columns(report):
        lines.append(f"{name:<20}  {_cell(value):>6}")
    lines.append("")
    c = report.counts
    lines.append(
        f"videos={c.videos} gold_events={c.gold_events} predicted_events={c.predicted_events} "
        f"matched={c.matched_events} quadruple_hits={c.quadruple_hits}"
    )
    lines.append(
        f"positive_frames={c.positive_frames} predicted_positive_frames={c.predicted_positive_frames} "
        f"true_positive_frames={c.true_positive_frames} false_negative_frames={c.false_negative_frames}"
    )
    return "\n".join(lines) + "\n"


def format_comparison(reports: Dict[str, EvalReport], baseline: str = "full") -> str:
    """One row per variant with its change against the baseline, values ×100."""
    if baseline not in reports:
        raise KeyError(f"baseline {baseline!r} not among {sorted(reports)}")
    picks = [("ExtAvg", "extraction_average"), ("Quad", "quadruple"), ("mAP", "map_mean"), ("FNRs", "fnr"), ("F2", "f2")]
    header = f"{'variant':<10}" + "".join(f"{name:>16}" for name, _ in picks)
    lines = [header]
    base = reports[baseline]
    for variant, report in reports.items():
        cells = []
        for _, attribute in picks:
            value, reference = getattr(report, attribute), getattr(base, attribute)
            if value is None:
                cells.append(f"{'n/a':>16}")
            elif variant == baseline or reference is None:
                cells.append(f"{100 * value:>16.2f}")
            else:
                cells.append(f"{100 * value:>8.2f}({100 * (value - reference):+6.2f})")
        lines.append(f"{variant:<10}" + "".join(cells))
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, stem: Path) -> Tuple[Path, Path]:
    """Write `<stem>.json` and `<stem>.txt`."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    json_path, text_path = stem.with_suffix(".json"), stem.with_suffix(".txt")
    json_path.write_text(json.dumps(report.model_dump(mode="json"), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    text_path.write_text(format_table(report), encoding="utf-8")
    return json_path, text_path


def read_report(path: Path) -> EvalReport:
    try:
        return EvalReport.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except ValidationError as e:
        raise PredictionFormatError(f"invalid report {path}: {e.errors()[0]['msg']}") from e


# ---------------------------------------------------------------------------
# Prediction files
# ---------------------------------------------------------------------------

def write_predictions(predictions: Sequence[VideoPrediction], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format": PREDICTION_FORMAT, "version": PREDICTION_VERSION, "videos": len(predictions)}
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(p.model_dump(mode="json", exclude_none=True), sort_keys=True) for p in predictions]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_predictions(path: Path) -> List[VideoPrediction]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise PredictionFormatError("missing header", line=1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise PredictionFormatError(f"header is not JSON: {e.msg}", line=1) from e
    if not isinstance(header, dict) or header.get("format") != PREDICTION_FORMAT:
        raise PredictionFormatError(f"expected a {PREDICTION_FORMAT} header", line=1)
    if header.get("version") != PREDICTION_VERSION:
        raise PredictionFormatError(f"unsupported version {header.get('version')}", line=1)
    predictions = []
    for number, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            predictions.append(VideoPrediction.model_validate_json(line))
        except ValidationError as e:
            error = e.errors()[0]
            where = ".".join(str(part) for part in error["loc"])
            raise PredictionFormatError(f"{where}: {error['msg']}", line=number) from e
    if header.get("videos") is not None and header["videos"] != len(predictions):
        raise PredictionFormatError(f"header announces {header['videos']} videos, found {len(predictions)}", line=1)
    return predictions


def predictions_from_gold(dataset: Dataset) -> List[VideoPrediction]:
    """Perfect predictions: every gold event with confidence 1."""
    return [
        VideoPrediction(
            video_id=video.video_id,
            events=[
                PredictedEvent(start_s=e.start_s, end_s=e.end_s, quadruple=e.quadruple, confidence=1.0)
                for e in video.events
            ],
            frame_labels=video.frame_labels.tolist(),
        )
        for video in dataset
    ]
