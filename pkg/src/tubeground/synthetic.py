"""Synthetic grounding datasets with a planted, recoverable referral signal.

Every dataset shares one "world": a random word-embedding table, a
projection from word space into tubelet-feature space and a projection of
words into a 16-dimensional activity subspace of clip features. Videos
then place one target subject whose features carry the projected referral
words, distractor subjects carrying other vocabulary, and an activity
signature on the clips inside the ground-truth interval.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .core import BoundingBox, ContractError, DetectionBox, GroundingSample, GroundTruth, QueryEmbedding, VideoRecord
from .crg import default_tagger
from .feature_io import DatasetManifest, ManifestRecord, detections_to_matrix, write_features
from .linker import LinkerConfig, link

DEFAULT_NOUNS = ("man", "woman", "boy", "girl", "child", "lady", "soldier", "waiter", "dog", "horse")
DEFAULT_ADJECTIVES = ("bearded", "bald", "tall", "short", "old", "young", "red", "black", "white", "blond")
DEFAULT_VERBS = ("walk", "run", "turn", "jump", "wave", "push", "pull", "kick",
                 "stand", "point", "hug", "grab", "throw", "dance", "climb", "catch")
FUNCTION_WORDS = ("the", "to", "towards", "who", ".", "?")
ACTIVITY_DIM = 16


def third_person(verb: str) -> str:
    if re.search(r"(s|sh|ch|x|z)$", verb):
        return verb + "es"
    return verb + "s"

_SPLIT_CODES = {"train": 0, "val": 1, "test": 2}


@dataclass
class SyntheticSpec:
    n_videos: int = 50
    k_range: Tuple[int, int] = (2, 6)
    length: int = 128
    noise_sigma: float = 0.5
    referral_signal_strength: float = 1.0
    nouns: Sequence[str] = DEFAULT_NOUNS
    adjectives: Sequence[str] = DEFAULT_ADJECTIVES
    verbs: Sequence[str] = DEFAULT_VERBS
    seed: int = 0
    split: str = "train"
    d_object: int = 64
    d_clip: int = 64
    d_word: int = 64
    clip_len: int = 16
    detection_stride: int = 5
    activity_strength: float = 1.0
    clip_noise_sigma: Optional[float] = None
    box_jitter: float = 0.0
    action_strength: float = 0.0
    context_weight: float = 1.0
    interrogative_fraction: float = 0.0
    width: float = 640.0
    height: float = 360.0
    name: str = "synthetic"

    def __post_init__(self):
        self.k_range = tuple(int(k) for k in self.k_range)
        if self.k_range[0] < 1 or self.k_range[0] > self.k_range[1]:
            raise ContractError(f"invalid tubelet range {self.k_range}")
        if self.noise_sigma < 0 or self.action_strength < 0 or self.context_weight < 0 \
                or self.box_jitter < 0 or (self.clip_noise_sigma is not None and self.clip_noise_sigma < 0):
            raise ContractError("noise, action and context settings must be >= 0")
        if not 0 < self.referral_signal_strength <= 1:
            raise ContractError("referral_signal_strength must lie in (0, 1]")
        if self.length % self.clip_len or self.length // self.clip_len < 3:
            raise ContractError("length must be a multiple of clip_len spanning at least 3 clips")
        if self.split not in _SPLIT_CODES:
            raise ContractError(f"unknown split {self.split!r}")
        if len(self.nouns) * len(self.adjectives) < self.k_range[1]:
            raise ContractError("vocabulary too small for distinct subjects")

    @classmethod
    def from_json(cls, path) -> "SyntheticSpec":
        with open(path) as fh:
            obj = json.load(fh)
        obj.pop("splits", None)
        return cls(**obj)


@dataclass
class SyntheticRecord:
    sample: GroundingSample
    detections: List[DetectionBox]
    target_tubelet_id: int


class _World:
    def __init__(self, spec: SyntheticSpec):
        rng = np.random.default_rng([spec.seed, 7919])
        words = list(FUNCTION_WORDS) + list(spec.nouns) + list(spec.adjectives)
        words += list(spec.verbs) + [third_person(v) for v in spec.verbs]
        self.vocab = sorted(set(w.lower() for w in words))
        self.table = {w: rng.standard_normal(spec.d_word) for w in self.vocab}
        self.object_proj = rng.standard_normal((spec.d_object, spec.d_word)) / np.sqrt(spec.d_word)
        sub = min(ACTIVITY_DIM, spec.d_clip)
        basis, _ = np.linalg.qr(rng.standard_normal((spec.d_clip, sub)))
        self.activity_proj = basis @ (rng.standard_normal((sub, spec.d_word)) / np.sqrt(spec.d_word))
        self.d_object = spec.d_object
        self.d_clip = spec.d_clip

    def embed(self, tokens):
        return np.stack([self.table[t.lower()] for t in tokens])

    def contextual(self, tokens, groups, weight: float) -> np.ndarray:
        """Token embeddings plus ``weight`` times the mean embedding of the token's phrase.

        ``groups[i]`` lists the positions token ``i`` is contextualized
        with. This stands in for a contextual text encoder: an attribute
        word carries information about the noun it modifies, and a verb
        about its subject.
        """
        base = self.embed(tokens)
        if weight == 0:
            return base
        out = base.copy()
        for i, group in enumerate(groups):
            if group:
                out[i] += weight * base[list(group)].mean(0)
        return out

    def subject_signal(self, words) -> np.ndarray:
        """Projection of the summed word embeddings into tubelet space, rescaled to norm sqrt(D_o)."""
        v = self.object_proj @ self.embed(words).sum(0)
        return v / np.linalg.norm(v) * np.sqrt(self.d_object)

    def referral_direction(self, adjective, noun) -> np.ndarray:
        return self.subject_signal([adjective, noun])

    def activity_signal(self, words) -> np.ndarray:
        v = self.activity_proj @ self.embed(words).sum(0)
        return v / np.linalg.norm(v) * np.sqrt(self.d_clip)


def _detector_frames(start: int, end: int, stride: int) -> List[int]:
    return list(range(start, end + 1, stride))


class _Trajectory:
    """Smooth box path confined to a vertical lane so subjects never overlap."""

    def __init__(self, rng, lane_x0, lane_w, height):
        self.bw = lane_w * 0.6
        self.bh = height * rng.uniform(0.3, 0.6)
        self.x_amp = (lane_w - self.bw) / 2 * 0.9
        self.y_amp = (height - self.bh) / 2 * 0.9
        self.cx0 = lane_x0 + lane_w / 2
        self.cy0 = height / 2
        self.phase = rng.uniform(0, 2 * np.pi, size=2)
        self.freq = rng.uniform(0.01, 0.05, size=2)

    def center(self, frame):
        return (self.cx0 + self.x_amp * np.sin(self.freq[0] * frame + self.phase[0]),
                self.cy0 + self.y_amp * np.sin(self.freq[1] * frame + self.phase[1]))

    def box(self, frame, rng=None, jitter=0.0) -> BoundingBox:
        cx, cy = self.center(frame)
        bw, bh = self.bw, self.bh
        if rng is not None and jitter:
            dx, dy, sw, sh = rng.normal(0.0, jitter, size=4)
            cx, cy = cx + dx * bw, cy + dy * bh
            bw, bh = bw * np.exp(sw), bh * np.exp(sh)
        return BoundingBox(cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2)


def _query_tokens(rng, referral, verb, background, interrogative):
    """Templated query tokens and, per token, the phrase it is contextualized with."""
    adj, noun = referral
    b_adj, b_noun = background
    verb_s = third_person(verb)
    prep = "towards" if rng.random() < 0.5 else "to"
    if interrogative:
        tokens = ["who", verb_s, prep, "the", b_adj, b_noun, "?"]
        subject, verb_at, obj = [0], 1, [3, 4, 5]
    else:
        tokens = ["the", adj, noun, verb_s, prep, "the", b_adj, b_noun, "."]
        subject, verb_at, obj = [0, 1, 2], 3, [5, 6, 7]
    groups = [[] for _ in tokens]
    for i in subject:
        groups[i] = subject
    groups[verb_at] = subject + [verb_at]
    for i in obj:
        groups[i] = obj
    return tokens, groups


def generate_synthetic(spec: SyntheticSpec):
    """Return ``(manifest, records)`` for ``spec``.

    The target's features are ``strength * W emb(adj, noun) + noise``;
    distractors carry other adjective/noun pairs. With ``action_strength``
    above zero every subject also carries its own verb, which is what lets
    interrogative ("who ...") queries be resolved at all.

    Tubelets are produced by running the linker over the generated
    detections, so in-memory records and records re-read from disk agree.
    """
    world = _World(spec)
    rng = np.random.default_rng([spec.seed, _SPLIT_CODES[spec.split], 104729])
    tagger = default_tagger()
    n_clips = spec.length // spec.clip_len
    stride = spec.detection_stride
    lanes = spec.k_range[1]
    lane_w = spec.width / lanes
    linker = LinkerConfig(detection_stride=stride)
    pairs = [(a, n) for a in spec.adjectives for n in spec.nouns]
    records = []
    for vi in range(spec.n_videos):
        video_id = f"{spec.name}-{spec.split}-{vi:05d}"
        k = int(rng.integers(spec.k_range[0], spec.k_range[1] + 1))
        chosen = rng.choice(len(pairs), size=k, replace=False)
        subjects = [pairs[i] for i in chosen]
        # distinct actions per video whenever the vocabulary allows it
        if k <= len(spec.verbs):
            verbs = [spec.verbs[i] for i in rng.choice(len(spec.verbs), size=k, replace=False)]
        else:
            verbs = [spec.verbs[i] for i in rng.integers(0, len(spec.verbs), size=k)]
        lane_of = rng.permutation(lanes)[:k]

        # activity occupies whole clips and never the final clip
        a = int(rng.integers(0, n_clips - 2))
        b = int(rng.integers(a + 1, min(n_clips - 1, a + max(2, n_clips // 2)) + 1))
        t_s, t_e = a * spec.clip_len, b * spec.clip_len
        last_det = (spec.length - 1) // stride * stride

        detections: List[DetectionBox] = []
        target_path = None
        for s_i in range(k):
            if s_i == 0:
                start = int(rng.integers(0, t_s // stride + 1)) * stride
                lo = -(-(t_e - 1) // stride) * stride
                end = int(rng.integers(lo // stride, last_det // stride + 1)) * stride
            else:
                start = int(rng.integers(0, last_det // stride - 1)) * stride
                end = int(rng.integers(start // stride + 1, last_det // stride + 1)) * stride
            frames = _detector_frames(start, end, stride)
            path = _Trajectory(rng, lane_of[s_i] * lane_w, lane_w, spec.height)
            boxes = [path.box(f, rng, spec.box_jitter) for f in frames]
            signal = spec.referral_signal_strength * world.referral_direction(*subjects[s_i])
            if spec.action_strength:
                signal = signal + spec.action_strength * world.subject_signal([third_person(verbs[s_i])])
            for f, box in zip(frames, boxes):
                feat = signal + spec.noise_sigma * rng.standard_normal(spec.d_object)
                conf = float(rng.uniform(0.4, 0.95))
                detections.append(DetectionBox(f, box, conf, feat))
            if s_i == 0:
                target_path, target_start, target_lane = path, start, lane_of[0]
        detections.sort(key=lambda d: (d.frame_index, d.box.x1))

        tubes = link(detections, linker)
        lane_center = (target_lane + 0.5) * lane_w
        target = min((t for t in tubes if t.start == target_start),
                     key=lambda t: abs((t.boxes[0, 0] + t.boxes[0, 2]) / 2 - lane_center))

        background = subjects[1] if k > 1 else subjects[0]
        interrogative = rng.random() < spec.interrogative_fraction
        tokens, groups = _query_tokens(rng, subjects[0], verbs[0], background, interrogative)
        tags = tagger.tag(tokens)
        words = world.contextual(tokens, groups, spec.context_weight)
        query = QueryEmbedding(" ".join(tokens), tokens, words, tags)

        clip_sigma = spec.noise_sigma if spec.clip_noise_sigma is None else spec.clip_noise_sigma
        clips = clip_sigma * rng.standard_normal((n_clips, spec.d_clip))
        sig = spec.activity_strength * world.activity_signal([*subjects[0], third_person(verbs[0])])
        clips[a:b] += sig

        # ground truth follows the true path; detections carry jitter
        gt = GroundTruth(video_id, t_s, t_e, {t: target_path.box(t) for t in range(t_s, t_e)})
        video = VideoRecord(video_id, spec.length, tubes, clips, 25.0, spec.width, spec.height)
        sample = GroundingSample(video, query, gt, query_id=video_id)
        records.append(SyntheticRecord(sample, detections, target.tubelet_id))

    manifest = DatasetManifest(
        spec.name, spec.split, (spec.d_object, spec.d_clip, spec.d_word),
        [_manifest_record(r, spec) for r in records],
    )
    return manifest, records


def _manifest_record(rec: SyntheticRecord, spec: SyntheticSpec) -> ManifestRecord:
    s = rec.sample
    vid = s.video_id
    return ManifestRecord(
        video_id=vid,
        query_id=s.query_id,
        length=s.video.length,
        paths={
            "detections": f"features/{vid}.det.stvf",
            "clips": f"features/{vid}.clip.stvf",
            "words": f"features/{vid}.words.stvf",
        },
        text=s.query.raw_text,
        tokens=list(s.query.tokens),
        pos_tags=list(s.query.pos_tags),
        frame_rate=s.video.frame_rate,
        width=spec.width,
        height=spec.height,
        gt=s.gt,
    )


def write_dataset(out_dir, manifest: DatasetManifest, records: Sequence[SyntheticRecord]) -> Path:
    """Materialize feature files and ``<split>.jsonl``; return the manifest path."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    for rec, mrec in zip(records, manifest.records):
        write_features(detections_to_matrix(rec.detections), out / mrec.paths["detections"])
        write_features(rec.sample.video.clip_features, out / mrec.paths["clips"])
        write_features(rec.sample.query.embeddings, out / mrec.paths["words"])
    path = out / f"{manifest.split}.jsonl"
    manifest.save(path)
    return path
