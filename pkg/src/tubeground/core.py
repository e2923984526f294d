"""Domain types shared by every stage of the grounding pipeline.

Frame intervals are half-open ``[start, end)`` throughout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

POS_TAGS = ("NOUN", "ADJ", "VERB", "OTHER")


class ContractError(ValueError):
    """An input violates a documented precondition."""


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ContractError(f"non-finite box coordinates {coords}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ContractError(f"inverted box {coords}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @classmethod
    def from_array(cls, arr) -> "BoundingBox":
        x1, y1, x2, y2 = (float(v) for v in arr)
        return cls(x1, y1, x2, y2)


@dataclass
class DetectionBox:
    frame_index: int
    box: BoundingBox
    confidence: float
    feature: np.ndarray

    def __post_init__(self):
        if self.frame_index < 0:
            raise ContractError("frame_index must be >= 0")
        if not 0.0 <= self.confidence <= 1.0:
            raise ContractError(f"confidence {self.confidence} outside [0, 1]")
        self.feature = np.asarray(self.feature, dtype=np.float64)


@dataclass
class Tubelet:
    """A tracked subject covering frames ``[start, end)``.

    Per-frame data is stored densely: row ``t - start`` of ``boxes``,
    ``confidences`` and ``features`` belongs to frame ``t``.
    """

    tubelet_id: int
    start: int
    end: int
    boxes: np.ndarray
    confidences: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.confidences = np.asarray(self.confidences, dtype=np.float64).reshape(-1)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features.reshape(len(self.boxes), -1)
        if not self.start < self.end:
            raise ContractError(f"tubelet {self.tubelet_id}: empty interval [{self.start}, {self.end})")
        n = self.end - self.start
        if not (len(self.boxes) == len(self.confidences) == len(self.features) == n):
            raise ContractError(f"tubelet {self.tubelet_id}: per-frame arrays do not cover [{self.start}, {self.end})")

    def __len__(self):
        return self.end - self.start

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def covers(self, frame: int) -> bool:
        return self.start <= frame < self.end

    def box_at(self, frame: int) -> BoundingBox:
        if not self.covers(frame):
            raise ContractError(f"tubelet {self.tubelet_id} has no box on frame {frame}")
        return BoundingBox.from_array(self.boxes[frame - self.start])

    def feature_at(self, frame: int) -> np.ndarray:
        if not self.covers(frame):
            raise ContractError(f"tubelet {self.tubelet_id} has no feature on frame {frame}")
        return self.features[frame - self.start]

    @property
    def mean_confidence(self) -> float:
        return float(self.confidences.mean())


@dataclass
class VideoRecord:
    video_id: str
    length: int
    tubelets: List[Tubelet]
    clip_features: np.ndarray
    frame_rate: float = 25.0
    width: Optional[float] = None
    height: Optional[float] = None

    def __post_init__(self):
        self.clip_features = np.asarray(self.clip_features, dtype=np.float64)
        if self.clip_features.ndim != 2:
            raise ContractError("clip_features must be a C x D matrix")
        for tube in self.tubelets:
            if tube.start < 0 or tube.end > self.length:
                raise ContractError(
                    f"video {self.video_id}: tubelet {tube.tubelet_id} "
                    f"[{tube.start}, {tube.end}) outside [0, {self.length})"
                )
        ids = [t.tubelet_id for t in self.tubelets]
        if len(set(ids)) != len(ids):
            raise ContractError(f"video {self.video_id}: duplicate tubelet ids")

    @property
    def num_tubelets(self) -> int:
        return len(self.tubelets)

    def tubelet(self, tubelet_id: int) -> Tubelet:
        for tube in self.tubelets:
            if tube.tubelet_id == tubelet_id:
                return tube
        raise KeyError(f"video {self.video_id} has no tubelet {tubelet_id}")


@dataclass
class QueryEmbedding:
    raw_text: str
    tokens: List[str]
    embeddings: np.ndarray
    pos_tags: List[str]
    max_words: int = 25

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        n = len(self.tokens)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != n or len(self.pos_tags) != n:
            raise ContractError("tokens, embedding rows and POS tags must have equal length")
        if n > self.max_words:
            raise ContractError(f"query has {n} words, limit is {self.max_words}")
        bad = set(self.pos_tags) - set(POS_TAGS)
        if bad:
            raise ContractError(f"unknown POS tags {sorted(bad)}")

    def __len__(self):
        return len(self.tokens)


@dataclass
class GroundTruth:
    video_id: str
    t_s: int
    t_e: int
    target_boxes: Dict[int, BoundingBox]

    def __post_init__(self):
        if not self.t_s < self.t_e:
            raise ContractError(f"ground truth for {self.video_id}: empty interval")
        missing = [t for t in range(self.t_s, self.t_e) if t not in self.target_boxes]
        if missing:
            raise ContractError(f"ground truth for {self.video_id}: no box on frames {missing[:5]}...")


@dataclass(frozen=True)
class GroundingPrediction:
    video_id: str
    tubelet_id: int
    t_s: int
    t_e: int

    def __post_init__(self):
        if not self.t_s < self.t_e:
            raise ContractError(f"prediction for {self.video_id}: empty interval")


@dataclass
class MetricsReport:
    m_vIoU: float
    m_tIoU: float
    vIoU_at: Dict[float, float]
    n_samples: int
    per_sample: List[Tuple[float, float]] = field(default_factory=list, repr=False)

    def as_dict(self) -> dict:
        return {
            "m_vIoU": self.m_vIoU,
            "m_tIoU": self.m_tIoU,
            "vIoU_at": {str(k): v for k, v in sorted(self.vIoU_at.items())},
            "n_samples": self.n_samples,
        }


@dataclass
class GroundingSample:
    """One training or evaluation item: a video paired with a query."""

    video: VideoRecord
    query: QueryEmbedding
    gt: Optional[GroundTruth] = None
    query_id: str = ""
    decomposition: Optional[object] = None

    @property
    def video_id(self) -> str:
        return self.video.video_id


def interval_frames(interval: Sequence[int]) -> range:
    s, e = interval
    return range(int(s), int(e))
