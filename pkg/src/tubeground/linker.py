"""Greedy IoU tubelet linking and fixed-count frame sampling."""
from __future__ import annotations

import logging
from dataclasses import dataclass, fields
from typing import Dict, List, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .core import BoundingBox, ContractError, DetectionBox, Tubelet, VideoRecord
from .metrics import box_iou

logger = logging.getLogger(__name__)


@dataclass
class LinkerConfig:
    new_track_threshold: float = 0.21
    low_track_threshold: float = 0.1
    high_track_threshold: float = 0.34
    matching_iou_threshold: float = 0.21
    buffer_frames: int = 60
    detection_stride: int = 5

    def __post_init__(self):
        if not 0.0 <= self.low_track_threshold <= self.high_track_threshold <= 1.0:
            raise ContractError("need 0 <= low_track_threshold <= high_track_threshold <= 1")
        if not 0.0 < self.matching_iou_threshold <= 1.0:
            raise ContractError("matching_iou_threshold must lie in (0, 1]")
        if self.buffer_frames < 0:
            raise ContractError("buffer_frames must be >= 0")
        if self.detection_stride < 1:
            raise ContractError("detection_stride must be >= 1")

    @classmethod
    def from_mapping(cls, mapping: Dict[str, object]) -> "LinkerConfig":
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, value in mapping.items():
            if key == "appearance_threshold":
                logger.warning("appearance_threshold=%s ignored: linking is purely geometric", value)
                continue
            if key not in known:
                raise ContractError(f"unknown linker option {key!r}")
            kwargs[key] = int(value) if known[key] in (int, "int") else float(value)
        return cls(**kwargs)


class _Track:
    __slots__ = ("track_id", "detections", "last_frame")

    def __init__(self, track_id, det):
        self.track_id = track_id
        self.detections = [det]
        self.last_frame = det.frame_index

    @property
    def last_box(self) -> BoundingBox:
        return self.detections[-1].box

    def add(self, det):
        self.detections.append(det)
        self.last_frame = det.frame_index


def _greedy_match(dets, det_indices, tracks, threshold):
    """Match highest IoU first; ties break on detection index, then track id."""
    pairs = []
    for di in det_indices:
        for tr in tracks:
            iou = box_iou(dets[di].box, tr.last_box)
            if iou >= threshold:
                pairs.append((-iou, di, tr.track_id, tr))
    pairs.sort(key=lambda p: p[:3])
    used_d, used_t, matches = set(), set(), []
    for _, di, tid, tr in pairs:
        if di in used_d or tid in used_t:
            continue
        used_d.add(di)
        used_t.add(tid)
        matches.append((di, tr))
    return matches


def _densify(track_id: int, detections: Sequence[DetectionBox]) -> Tubelet:
    """Fill every frame between detections: boxes/features linear, confidence carried forward."""
    frames = [d.frame_index for d in detections]
    start, end = frames[0], frames[-1] + 1
    n = end - start
    dim = detections[0].feature.shape[0]
    boxes = np.empty((n, 4))
    confs = np.empty(n)
    feats = np.empty((n, dim))
    for a, b in zip(detections, detections[1:] + [None]):
        i0 = a.frame_index - start
        if b is None:
            boxes[i0] = a.box.as_tuple()
            confs[i0] = a.confidence
            feats[i0] = a.feature
            break
        span = b.frame_index - a.frame_index
        ba, bb = np.array(a.box.as_tuple()), np.array(b.box.as_tuple())
        for j in range(span):
            w = j / span
            boxes[i0 + j] = (1 - w) * ba + w * bb
            feats[i0 + j] = (1 - w) * a.feature + w * b.feature
            confs[i0 + j] = a.confidence
    return Tubelet(track_id, start, end, boxes, confs, feats)


def link(detections: Sequence[DetectionBox], config: LinkerConfig = None) -> List[Tubelet]:
    """Associate per-frame detections into tubelets.

    Each frame runs two greedy passes over the active tracks: first with the
    high-confidence detections, then with the low-confidence ones against the
    tracks still unmatched. Leftover high-confidence detections that also clear
    ``new_track_threshold`` open new tracks. A track is closed once it has gone
    more than ``buffer_frames`` frames without a match.
    """
    config = config or LinkerConfig()
    if not detections:
        return []
    dims = {d.feature.shape for d in detections}
    if len(dims) > 1:
        raise ContractError(f"inconsistent detection feature dimensions {sorted(dims)}")

    by_frame: Dict[int, List[DetectionBox]] = {}
    for det in detections:
        by_frame.setdefault(det.frame_index, []).append(det)

    active: List[_Track] = []
    finished: List[_Track] = []
    next_id = 0
    for frame in sorted(by_frame):
        still = []
        for tr in active:
            (finished if frame - tr.last_frame > config.buffer_frames else still).append(tr)
        active = still

        dets = by_frame[frame]
        high = [i for i, d in enumerate(dets) if d.confidence >= config.high_track_threshold]
        low = [
            i for i, d in enumerate(dets)
            if config.low_track_threshold <= d.confidence < config.high_track_threshold
        ]
        matches = _greedy_match(dets, high, active, config.matching_iou_threshold)
        matched_tracks = {tr.track_id for _, tr in matches}
        remaining = [tr for tr in active if tr.track_id not in matched_tracks]
        matches += _greedy_match(dets, low, remaining, config.matching_iou_threshold)
        for di, tr in matches:
            tr.add(dets[di])

        matched_dets = {di for di, _ in matches}
        for di in high:
            if di in matched_dets or dets[di].confidence < config.new_track_threshold:
                continue
            active.append(_Track(next_id, dets[di]))
            next_id += 1

    finished.extend(active)
    finished.sort(key=lambda tr: tr.track_id)
    return [_densify(tr.track_id, tr.detections) for tr in finished]


def sample_frames(span: Sequence[int], count: int) -> List[int]:
    """``count`` equally spaced indices ``floor(s + i * (e - s) / count)``."""
    s, e = int(span[0]), int(span[1])
    if count < 1 or s >= e:
        raise ContractError(f"cannot sample {count} frames from [{s}, {e})")
    return [s + (i * (e - s)) // count for i in range(count)]


def tubelet_feature_tensor(video: VideoRecord, count: int = 32):
    """Sample ``count`` frames of the video into a ``(count, K, D)`` tensor plus validity mask."""
    if not video.tubelets:
        raise ContractError(f"video {video.video_id} has no tubelets")
    frames = sample_frames((0, video.length), count)
    dim = video.tubelets[0].feature_dim
    out = np.zeros((count, len(video.tubelets), dim))
    mask = np.zeros((count, len(video.tubelets)), dtype=bool)
    for k, tube in enumerate(video.tubelets):
        for i, f in enumerate(frames):
            if tube.covers(f):
                out[i, k] = tube.feature_at(f)
                mask[i, k] = True
    return out, mask


def keep_top_tubelets(tubelets: List[Tubelet], limit: int = 10) -> List[Tubelet]:
    """Keep the ``limit`` tubelets with the highest mean confidence, in original order."""
    if limit is None or len(tubelets) <= limit:
        return list(tubelets)
    order = sorted(range(len(tubelets)), key=lambda i: (-tubelets[i].mean_confidence, i))
    keep = sorted(order[:limit])
    return [tubelets[i] for i in keep]


class TubeletLinker(BaseEstimator, TransformerMixin):
    """Estimator wrapper around :func:`link`.

    ``transform`` takes a list of per-video detection lists and returns a list
    of tubelet lists. Linking holds no learned state, so ``fit`` only validates.
    """

    def __init__(
        self,
        new_track_threshold=0.21,
        low_track_threshold=0.1,
        high_track_threshold=0.34,
        matching_iou_threshold=0.21,
        buffer_frames=60,
        detection_stride=5,
        max_tubelets=None,
    ):
        self.new_track_threshold = new_track_threshold
        self.low_track_threshold = low_track_threshold
        self.high_track_threshold = high_track_threshold
        self.matching_iou_threshold = matching_iou_threshold
        self.buffer_frames = buffer_frames
        self.detection_stride = detection_stride
        self.max_tubelets = max_tubelets

    def _config(self) -> LinkerConfig:
        params = self.get_params()
        params.pop("max_tubelets")
        return LinkerConfig(**params)

    def fit(self, X=None, y=None):
        self.config_ = self._config()
        return self

    def transform(self, X):
        config = getattr(self, "config_", None) or self._config()
        out = []
        for detections in X:
            tubes = link(detections, config)
            if self.max_tubelets is not None:
                tubes = keep_top_tubelets(tubes, self.max_tubelets)
            out.append(tubes)
        return out
