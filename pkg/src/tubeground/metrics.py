"""Spatio-temporal grounding metrics: box IoU, tIoU, vIoU and their aggregates."""
from __future__ import annotations

import json
from typing import Iterable, List, Optional, Sequence, Tuple

from .core import (
    BoundingBox,
    ContractError,
    GroundingPrediction,
    GroundTruth,
    MetricsReport,
    Tubelet,
    VideoRecord,
)

DEFAULT_THRESHOLDS = (0.3, 0.5)


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = iw * ih if iw > 0 and ih > 0 else 0.0
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def temporal_iou(pred: Sequence[int], gt: Sequence[int]):
    """Return ``(tIoU, intersection_frames, union_frames)`` for two half-open intervals."""
    ps, pe = int(pred[0]), int(pred[1])
    gs, ge = int(gt[0]), int(gt[1])
    if not (ps < pe and gs < ge):
        raise ContractError(f"empty interval in temporal_iou: {pred} vs {gt}")
    inter = range(max(ps, gs), max(min(pe, ge), max(ps, gs)))
    union = set(range(ps, pe)) | set(range(gs, ge))
    s_i = frozenset(inter)
    s_u = frozenset(union)
    return len(s_i) / len(s_u), s_i, s_u


def video_iou(pred: GroundingPrediction, tubelet: Tubelet, gt: GroundTruth) -> float:
    if pred.tubelet_id != tubelet.tubelet_id:
        raise ContractError(
            f"prediction references tubelet {pred.tubelet_id}, got tubelet {tubelet.tubelet_id}"
        )
    _, s_i, s_u = temporal_iou((pred.t_s, pred.t_e), (gt.t_s, gt.t_e))
    total = 0.0
    for t in sorted(s_i):
        # box_at raises when the tubelet misses an intersection frame
        total += box_iou(tubelet.box_at(t), gt.target_boxes[t])
    return total / len(s_u)


def aggregate_metrics(
    samples: Iterable[Tuple[Optional[GroundingPrediction], Optional[Tubelet], GroundTruth]],
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
) -> MetricsReport:
    """Average vIoU/tIoU over ``(pred, tubelet, gt)`` triples.

    A triple with ``pred=None`` (no tubelet available) scores zero on both metrics.
    """
    per_sample: List[Tuple[float, float]] = []
    for pred, tube, gt in samples:
        if pred is None:
            per_sample.append((0.0, 0.0))
            continue
        tiou, _, _ = temporal_iou((pred.t_s, pred.t_e), (gt.t_s, gt.t_e))
        per_sample.append((video_iou(pred, tube, gt), tiou))
    if not per_sample:
        raise ContractError("aggregate_metrics needs at least one sample")
    return report_from_scores(per_sample, thresholds)


def report_from_scores(per_sample, thresholds=DEFAULT_THRESHOLDS) -> MetricsReport:
    n = len(per_sample)
    vious = [v for v, _ in per_sample]
    tious = [t for _, t in per_sample]
    at = {float(r): sum(1 for v in vious if v > r) / n for r in thresholds}
    return MetricsReport(
        m_vIoU=sum(vious) / n,
        m_tIoU=sum(tious) / n,
        vIoU_at=at,
        n_samples=n,
        per_sample=list(per_sample),
    )


def oracle_prediction(video: VideoRecord, tubelet: Tubelet, gt: GroundTruth) -> Optional[GroundingPrediction]:
    """GT temporal bounds clipped to the tubelet's span, or None if they do not meet."""
    s = max(gt.t_s, tubelet.start)
    e = min(gt.t_e, tubelet.end)
    if s >= e:
        return None
    return GroundingPrediction(video.video_id, tubelet.tubelet_id, s, e)


def upper_bound_selection(video: VideoRecord, gt: GroundTruth):
    """Best achievable ``(prediction, tubelet, vIoU)`` when temporal bounds come from GT.

    Ties go to the earlier tubelet; returns ``(None, None, 0.0)`` when no
    tubelet overlaps the ground-truth interval.
    """
    best = (None, None, 0.0)
    for tube in video.tubelets:
        pred = oracle_prediction(video, tube, gt)
        if pred is None:
            continue
        v = video_iou(pred, tube, gt)
        if best[0] is None or v > best[2]:
            best = (pred, tube, v)
    return best


def upper_bound_analysis(videos, thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> MetricsReport:
    """Metrics of the oracle that knows GT timing and picks the best tubelet."""
    triples = []
    for video, gt in videos:
        if not video.tubelets:
            raise ContractError(f"video {video.video_id} has no tubelets")
        pred, tube, _ = upper_bound_selection(video, gt)
        triples.append((pred, tube, gt))
    return aggregate_metrics(triples, thresholds)


# -- newline-delimited JSON records ------------------------------------------

def record_to_json(video_id, tubelet_id, t_s, t_e, boxes) -> str:
    """``boxes`` is an iterable of ``(frame, BoundingBox)``."""
    rows = [[int(f), b.x1, b.y1, b.x2, b.y2] for f, b in boxes]
    return json.dumps(
        {"video_id": video_id, "tubelet_id": tubelet_id, "t_s": int(t_s), "t_e": int(t_e), "boxes": rows}
    )


def gt_to_json(gt: GroundTruth) -> str:
    return record_to_json(gt.video_id, None, gt.t_s, gt.t_e, sorted(gt.target_boxes.items()))


def prediction_to_json(pred: GroundingPrediction, tubelet: Optional[Tubelet] = None) -> str:
    boxes = []
    if tubelet is not None:
        boxes = [(t, tubelet.box_at(t)) for t in range(pred.t_s, pred.t_e)]
    return record_to_json(pred.video_id, pred.tubelet_id, pred.t_s, pred.t_e, boxes)


def gt_from_json(line: str) -> GroundTruth:
    obj = json.loads(line)
    boxes = {int(r[0]): BoundingBox(*map(float, r[1:5])) for r in obj["boxes"]}
    return GroundTruth(obj["video_id"], int(obj["t_s"]), int(obj["t_e"]), boxes)


def prediction_from_json(line: str) -> GroundingPrediction:
    obj = json.loads(line)
    return GroundingPrediction(obj["video_id"], int(obj["tubelet_id"]), int(obj["t_s"]), int(obj["t_e"]))
