"""Word-to-tubelet spatial grounding with a contrastive objective."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import torch

from .core import ContractError, GroundingSample
from .linker import keep_top_tubelets, tubelet_feature_tensor
from .nn import DTYPE, ParamModule, as_tensor, mlp, softmax, temporal_self_attention

logger = logging.getLogger(__name__)


def _mlp_shapes(prefix, d_in, hidden, d_out):
    return {
        f"{prefix}1_w": (d_in, hidden), f"{prefix}1_b": (hidden,),
        f"{prefix}2_w": (hidden, d_out), f"{prefix}2_b": (d_out,),
    }


class SpatialModel(ParamModule):
    """Temporal self-attention over tubelet frames plus the query/key/value MLPs.

    ``word_value`` selects how words are projected for the compatibility
    score: ``"shared"`` reuses the tubelet value MLP (needs equal word and
    tubelet feature widths), ``"separate"`` adds a dedicated word MLP and
    ``"auto"`` shares whenever the widths allow it.
    """

    def __init__(self, d_object: int, d_word: int, d: int = 256, hidden: int = 256, seed: int = 0,
                 word_value: str = "auto"):
        if word_value == "auto":
            word_value = "shared" if d_object == d_word else "separate"
            if word_value == "separate":
                logger.warning("word width %d != tubelet width %d; using a separate word value MLP",
                               d_word, d_object)
        if word_value == "shared" and d_object != d_word:
            raise ContractError("shared value projection needs equal word and tubelet widths")
        if word_value not in ("shared", "separate"):
            raise ContractError(f"unknown word_value mode {word_value!r}")
        shapes = {"tsa_q": (d_object, d_object), "tsa_k": (d_object, d_object), "tsa_out": (d_object, d_object)}
        shapes.update(_mlp_shapes("q", d_word, hidden, d))
        shapes.update(_mlp_shapes("k", d_object, hidden, d))
        shapes.update(_mlp_shapes("v", d_object, hidden, d))
        if word_value == "separate":
            shapes.update(_mlp_shapes("w", d_word, hidden, d))
        super().__init__(shapes, seed)
        self.d = d
        self.word_value = word_value
        self.config = {"d_object": d_object, "d_word": d_word, "d": d, "hidden": hidden, "word_value": word_value}

    def _mlp(self, prefix, x):
        p = self.p
        return mlp(x, [(p[f"{prefix}1_w"], p[f"{prefix}1_b"]), (p[f"{prefix}2_w"], p[f"{prefix}2_b"])])

    def project_query(self, words):
        return self._mlp("q", words)

    def project_key(self, tubes):
        return self._mlp("k", tubes)

    def project_value(self, tubes):
        return self._mlp("v", tubes)

    def project_word_value(self, words):
        return self._mlp("v" if self.word_value == "shared" else "w", words)


def enhance_tubelets(model: SpatialModel, features, mask):
    """Temporal self-attention per tubelet, then a masked mean over frames.

    ``features`` is ``(..., T, K, D)`` and ``mask`` ``(..., T, K)``. Returns
    ``(pooled (..., K, D), valid (..., K))``; a tubelet with no valid frame
    pools to zeros and is marked invalid.
    """
    x = as_tensor(features).transpose(-3, -2)
    m = torch.as_tensor(np.asarray(mask), dtype=torch.bool).transpose(-2, -1)
    p = model.p
    enhanced = temporal_self_attention(x, m, p["tsa_q"], p["tsa_k"], p["tsa_out"])
    counts = m.sum(-1, keepdim=True).to(DTYPE)
    pooled = enhanced.sum(-2) / torch.clamp(counts, min=1.0)
    valid = m.any(-1)
    if not bool(valid.all()):
        logger.debug("%d tubelets have no valid sampled frame", int((~valid).sum()))
    return pooled, valid


@dataclass
class AttentionMap:
    weights: np.ndarray        # K x N, each column sums to 1 over tubelets
    compat_scores: np.ndarray  # N


def _attention_terms(model, pooled, words, tube_mask=None):
    """Softmax weights over tubelets for every word, plus per-pair compat terms.

    ``pooled`` is ``(K, D)`` and ``words`` ``(N, D_w)``; returns weights
    ``(N, K)`` and the word-value/tubelet-value dot products ``(N, K)``.
    """
    q = model.project_query(words)
    k = model.project_key(pooled)
    v = model.project_value(pooled)
    wv = model.project_word_value(words)
    sim = (q @ k.T) / math.sqrt(model.d)
    mask = None if tube_mask is None else tube_mask.unsqueeze(0)
    weights = softmax(sim, -1, mask)
    return weights, wv @ v.T


def attention_map(model: SpatialModel, pooled, words, tube_mask=None) -> AttentionMap:
    with torch.no_grad():
        weights, pair = _attention_terms(model, as_tensor(pooled), as_tensor(words),
                                         None if tube_mask is None else torch.as_tensor(tube_mask))
        compat = (weights * pair).sum(-1)
    return AttentionMap(weights.T.numpy().copy(), compat.numpy().copy())


def select_tubelet(amap: AttentionMap) -> int:
    """Index of the tubelet with the highest mean attention over words (first on ties)."""
    return int(np.argmax(amap.weights.mean(axis=1)))


# -- batching ----------------------------------------------------------------

@dataclass
class SpatialItem:
    """Featurized sample: sampled tubelet features and the word set used for grounding."""

    features: np.ndarray   # T x K x D
    mask: np.ndarray       # T x K
    words: np.ndarray      # N x D_w
    tubelet_ids: List[int]


def featurize_spatial(sample: GroundingSample, frames: int = 32, max_tubelets: Optional[int] = 10,
                      word_positions: Optional[Sequence[int]] = None) -> SpatialItem:
    video = sample.video
    tubes = keep_top_tubelets(video.tubelets, max_tubelets)
    if not tubes:
        raise ContractError(f"video {video.video_id} has no tubelets")
    view = type(video)(video.video_id, video.length, tubes, video.clip_features, video.frame_rate)
    feats, mask = tubelet_feature_tensor(view, frames)
    words = sample.query.embeddings
    if word_positions is not None:
        words = words[list(word_positions)]
    return SpatialItem(feats, mask, words, [t.tubelet_id for t in tubes])


def crg_word_positions(sample: GroundingSample) -> Optional[List[int]]:
    dq = sample.decomposition
    if dq is None or dq.is_empty:
        logger.warning("query %r has an empty decomposition; using all words", sample.query.raw_text)
        return None
    return dq.word_positions()


def collate(items: Sequence[SpatialItem]):
    b = len(items)
    t = items[0].features.shape[0]
    k = max(it.features.shape[1] for it in items)
    n = max(it.words.shape[0] for it in items)
    d_o = items[0].features.shape[2]
    d_w = items[0].words.shape[1]
    feats = np.zeros((b, t, k, d_o))
    fmask = np.zeros((b, t, k), dtype=bool)
    words = np.zeros((b, n, d_w))
    wmask = np.zeros((b, n), dtype=bool)
    for i, it in enumerate(items):
        kk, nn_ = it.features.shape[1], it.words.shape[0]
        feats[i, :, :kk] = it.features
        fmask[i, :, :kk] = it.mask
        words[i, :nn_] = it.words
        wmask[i, :nn_] = True
    return feats, fmask, words, wmask


def batch_compat(model: SpatialModel, feats, fmask, words, wmask):
    """Compatibility of every query with every video in the batch.

    Returns ``compat (B, B, N)`` where ``compat[i, j, m]`` scores word ``m`` of
    query ``i`` against the attention-aggregated tubelets of video ``j``,
    together with the attention ``(B, B, N, K)``, per-pair terms and masks.
    """
    pooled, tube_valid = enhance_tubelets(model, feats, fmask)
    words = as_tensor(words)
    q = model.project_query(words)
    kk = model.project_key(pooled)
    v = model.project_value(pooled)
    wv = model.project_word_value(words)
    sim = torch.einsum("imd,jkd->ijmk", q, kk) / math.sqrt(model.d)
    attn = softmax(sim, -1, tube_valid[None, :, None, :])
    pair = torch.einsum("imd,jkd->ijmk", wv, v)
    compat = (attn * pair).sum(-1)
    return compat, attn, pair, tube_valid, torch.as_tensor(wmask, dtype=torch.bool)


def infonce_from_compat(compat, word_mask, denominator: str = "exclusive"):
    """Cross-video InfoNCE given ``compat (B, B, N)`` with positives on the diagonal.

    Per query ``i`` the loss is ``-sum_m [pos_im - logsumexp_j neg_ijm]`` where
    the sum over ``j`` skips ``i`` (``exclusive``) or includes it
    (``inclusive``); the result is averaged over the batch.
    """
    b = compat.shape[0]
    if b < 2:
        raise ContractError("spatial loss needs a batch of at least 2 items for negatives")
    eye = torch.eye(b, dtype=torch.bool)
    pos = compat[eye]                                # (B, N)
    if denominator == "exclusive":
        scores = compat.masked_fill(eye[:, :, None], float("-inf"))
    elif denominator == "inclusive":
        scores = compat
    else:
        raise ContractError(f"unknown denominator {denominator!r}")
    lse = torch.logsumexp(scores, dim=1)             # (B, N)
    per_word = -(pos - lse) * word_mask.to(compat.dtype)
    return per_word.sum(-1).mean()


def within_video_loss(attn, pair, tube_valid, word_mask):
    """Contrast the max-attention tubelet of each video against its other tubelets."""
    b = attn.shape[0]
    losses = []
    for i in range(b):
        valid = tube_valid[i]
        if int(valid.sum()) < 2:
            continue
        a = attn[i, i]                                    # (N, K)
        wm = word_mask[i].to(a.dtype)
        score = (a * wm[:, None]).sum(0) / wm.sum()
        score = score.masked_fill(~valid, float("-inf"))
        k_star = int(torch.argmax(score.detach()))
        p = pair[i, i]                                    # (N, K)
        neg_mask = valid.clone()
        neg_mask[k_star] = False
        negs = p.masked_fill(~neg_mask[None, :], float("-inf"))
        per_word = -(p[:, k_star] - torch.logsumexp(negs, dim=-1)) * wm
        losses.append(per_word.sum())
    if not losses:
        raise ContractError("within-video negatives need a video with at least 2 tubelets")
    return torch.stack(losses).mean()


def spatial_loss(model: SpatialModel, items: Sequence[SpatialItem], denominator: str = "exclusive",
                 negatives: str = "batch"):
    """Contrastive spatial loss over a batch of featurized items (differentiable)."""
    if len(items) < 2 and negatives == "batch":
        raise ContractError("spatial loss needs a batch of at least 2 items for negatives")
    feats, fmask, words, wmask = collate(items)
    compat, attn, pair, tube_valid, word_mask = batch_compat(model, feats, fmask, words, wmask)
    if negatives == "batch":
        return infonce_from_compat(compat, word_mask, denominator)
    if negatives == "within_video":
        return within_video_loss(attn, pair, tube_valid, word_mask)
    raise ContractError(f"unknown negatives mode {negatives!r}")


def spatial_loss_crg(model: SpatialModel, samples: Sequence[GroundingSample], frames: int = 32,
                     max_tubelets: Optional[int] = 10, **kwargs):
    """Spatial loss over the referral-focused word set of each sample."""
    items = [featurize_spatial(s, frames, max_tubelets, crg_word_positions(s)) for s in samples]
    return spatial_loss(model, items, **kwargs)


def item_attention(model: SpatialModel, item: SpatialItem) -> AttentionMap:
    with torch.no_grad():
        pooled, valid = enhance_tubelets(model, item.features[None], item.mask[None])
    return attention_map(model, pooled[0], item.words, valid[0])
