"""STVF tensor files, dataset manifests and dataset loading.

STVF layout (all little-endian)::

    b"STVF" | version:u32 | rank:u32 | dims:u32 * rank | payload:f32 * prod(dims)

Detections are stored as an ``N x (6 + D_o)`` matrix whose rows are
``frame, x1, y1, x2, y2, confidence, feature...``.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import BoundingBox, ContractError, DetectionBox, GroundingSample, GroundTruth, QueryEmbedding, VideoRecord

MAGIC = b"STVF"
VERSION = 1
DETECTION_COLUMNS = 6


class FeatureFileError(Exception):
    code = 1


class BadMagicError(FeatureFileError):
    code = 10


class VersionMismatchError(FeatureFileError):
    code = 11


class TruncatedPayloadError(FeatureFileError):
    code = 12


def write_features(tensor, path, metadata: Optional[dict] = None) -> None:
    """Write ``tensor`` as STVF; ``metadata`` goes to a ``<path>.json`` sidecar."""
    arr = np.ascontiguousarray(np.asarray(tensor, dtype="<f4"))
    header = MAGIC + struct.pack("<II", VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes(order="C"))
    if metadata is not None:
        with open(str(path) + ".json", "w") as fh:
            json.dump(metadata, fh, sort_keys=True)


def read_features(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a feature file")
    if len(data) < 12:
        raise TruncatedPayloadError(f"{path}: truncated header")
    version, rank = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {VERSION}")
    offset = 12 + 4 * rank
    if len(data) < offset:
        raise TruncatedPayloadError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", data, 12)
    count = int(np.prod(dims)) if rank else 1
    if len(data) - offset < 4 * count:
        raise TruncatedPayloadError(
            f"{path}: payload holds {(len(data) - offset) // 4} values, header declares {count}"
        )
    return np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(dims).copy()


def read_metadata(path) -> Optional[dict]:
    side = str(path) + ".json"
    if not os.path.exists(side):
        return None
    with open(side) as fh:
        return json.load(fh)


def detections_to_matrix(detections: Sequence[DetectionBox]) -> np.ndarray:
    if not detections:
        return np.zeros((0, DETECTION_COLUMNS))
    rows = [
        np.concatenate([[d.frame_index, *d.box.as_tuple(), d.confidence], d.feature])
        for d in detections
    ]
    return np.stack(rows)


def matrix_to_detections(mat: np.ndarray) -> List[DetectionBox]:
    mat = np.asarray(mat, dtype=np.float64)
    out = []
    for row in mat:
        # confidences were stored as f32; clip rounding noise at the [0, 1] ends
        conf = float(min(max(row[5], 0.0), 1.0))
        out.append(DetectionBox(int(round(row[0])), BoundingBox.from_array(row[1:5]), conf, row[6:]))
    return out


# -- manifests ---------------------------------------------------------------

SPLITS = ("train", "val", "test")


@dataclass
class ManifestRecord:
    video_id: str
    query_id: str
    length: int
    paths: Dict[str, str]
    text: str
    tokens: List[str]
    pos_tags: Optional[List[str]] = None
    frame_rate: float = 25.0
    width: Optional[float] = None
    height: Optional[float] = None
    gt: Optional[GroundTruth] = None

    def to_json(self) -> str:
        obj = {
            "video_id": self.video_id,
            "query_id": self.query_id,
            "length": self.length,
            "frame_rate": self.frame_rate,
            "width": self.width,
            "height": self.height,
            "paths": self.paths,
            "text": self.text,
            "tokens": self.tokens,
            "pos_tags": self.pos_tags,
        }
        if self.gt is not None:
            obj["gt"] = {
                "t_s": self.gt.t_s,
                "t_e": self.gt.t_e,
                "boxes": [[f, *b.as_tuple()] for f, b in sorted(self.gt.target_boxes.items())],
            }
        return json.dumps(obj, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "ManifestRecord":
        obj = json.loads(line)
        gt = None
        if obj.get("gt"):
            g = obj["gt"]
            boxes = {int(r[0]): BoundingBox(*map(float, r[1:5])) for r in g["boxes"]}
            gt = GroundTruth(obj["video_id"], int(g["t_s"]), int(g["t_e"]), boxes)
        return cls(
            video_id=obj["video_id"],
            query_id=obj.get("query_id", obj["video_id"]),
            length=int(obj["length"]),
            paths=obj["paths"],
            text=obj.get("text", " ".join(obj["tokens"])),
            tokens=list(obj["tokens"]),
            pos_tags=obj.get("pos_tags"),
            frame_rate=float(obj.get("frame_rate", 25.0)),
            width=obj.get("width"),
            height=obj.get("height"),
            gt=gt,
        )


@dataclass
class DatasetManifest:
    name: str
    split: str
    embedding_dims: Tuple[int, int, int]
    records: List[ManifestRecord] = field(default_factory=list)
    root: Optional[Path] = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ContractError(f"unknown split {self.split!r}")
        self.embedding_dims = tuple(int(d) for d in self.embedding_dims)
        if self.split in ("val", "test"):
            missing = [r.video_id for r in self.records if r.gt is None]
            if missing:
                raise ContractError(f"{self.split} records without ground truth: {missing[:3]}")

    def save(self, path) -> None:
        header = {"name": self.name, "split": self.split, "embedding_dims": list(self.embedding_dims)}
        with open(path, "w") as fh:
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for rec in self.records:
                fh.write(rec.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        with open(path) as fh:
            lines = [ln for ln in fh.read().splitlines() if ln.strip()]
        if not lines:
            raise ContractError(f"{path}: empty manifest")
        header = json.loads(lines[0])
        records = [ManifestRecord.from_json(ln) for ln in lines[1:]]
        return cls(header["name"], header["split"], header["embedding_dims"], records, root=path.parent)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() or self.root is None else self.root / p


def load_samples(manifest: DatasetManifest, linker_config=None, max_tubelets: Optional[int] = None,
                 tagger=None) -> List[GroundingSample]:
    """Read every record's feature files, link detections and tag the query.

    Raises :class:`ContractError` when a file's feature width disagrees with
    the manifest header.
    """
    from .crg import default_tagger
    from .linker import keep_top_tubelets, link

    tagger = tagger or default_tagger()
    d_o, d_c, d_w = manifest.embedding_dims
    samples = []
    for rec in manifest.records:
        det_mat = read_features(manifest.resolve(rec.paths["detections"]))
        clips = read_features(manifest.resolve(rec.paths["clips"])).astype(np.float64)
        words = read_features(manifest.resolve(rec.paths["words"])).astype(np.float64)
        if det_mat.shape[0] and det_mat.shape[1] - DETECTION_COLUMNS != d_o:
            raise ContractError(f"{rec.video_id}: detection features have dim {det_mat.shape[1] - DETECTION_COLUMNS}, manifest says {d_o}")
        if clips.shape[1] != d_c:
            raise ContractError(f"{rec.video_id}: clip features have dim {clips.shape[1]}, manifest says {d_c}")
        if words.shape[1] != d_w:
            raise ContractError(f"{rec.video_id}: word embeddings have dim {words.shape[1]}, manifest says {d_w}")
        tubes = link(matrix_to_detections(det_mat), linker_config)
        tubes = keep_top_tubelets(tubes, max_tubelets)
        video = VideoRecord(rec.video_id, rec.length, tubes, clips, rec.frame_rate, rec.width, rec.height)
        tags = rec.pos_tags or tagger.tag(rec.tokens)
        query = QueryEmbedding(rec.text, rec.tokens, words, tags)
        samples.append(GroundingSample(video, query, rec.gt, rec.query_id))
    return samples
