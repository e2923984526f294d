"""Query-conditioned clip highlighting and masked-query reconstruction."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .core import ContractError, GroundingSample
from .nn import DTYPE, ParamModule, as_tensor, decoder_block, decoder_param_shapes, linear, scaled_dot_attention

logger = logging.getLogger(__name__)

MASK_TOKEN = "<mask>"
UNK_TOKEN = "<unk>"
MASKABLE_TAGS = frozenset(["NOUN", "ADJ", "VERB"])


class Vocabulary:
    """Token <-> id table. Id 0 is the mask token, id 1 the unknown token."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.tokens: List[str] = [MASK_TOKEN, UNK_TOKEN]
        self.index: Dict[str, int] = {MASK_TOKEN: 0, UNK_TOKEN: 1}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        token = token.lower()
        if token not in self.index:
            self.index[token] = len(self.tokens)
            self.tokens.append(token)
        return self.index[token]

    def __len__(self):
        return len(self.tokens)

    def id(self, token: str) -> int:
        if token == MASK_TOKEN:
            return 0
        return self.index.get(token.lower(), 1)

    @classmethod
    def from_samples(cls, samples: Sequence[GroundingSample]) -> "Vocabulary":
        return cls(tok for s in samples for tok in s.query.tokens)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path) as fh:
            lines = fh.read().split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if not lines or lines[0] != MASK_TOKEN:
            raise ContractError(f"{path}: line 0 must be the mask token {MASK_TOKEN!r}")
        vocab = cls()
        vocab.tokens = list(lines)
        vocab.index = {t: i for i, t in enumerate(lines)}
        return vocab


@dataclass
class MaskedQuery:
    tokens: List[str]              # masked positions hold MASK_TOKEN
    masked_positions: List[int]
    original_tokens: List[str]

    @property
    def trainable(self) -> bool:
        return bool(self.masked_positions)


def mask_query(tokens: Sequence[str], tags: Sequence[str]) -> MaskedQuery:
    """Replace every NOUN/ADJ/VERB token with the mask token."""
    positions = [i for i, t in enumerate(tags) if t in MASKABLE_TAGS]
    if not positions:
        logger.warning("query %r has no maskable words; skipped for reconstruction", " ".join(tokens))
    masked = [MASK_TOKEN if i in set(positions) else tok for i, tok in enumerate(tokens)]
    return MaskedQuery(masked, positions, list(tokens))


class TemporalModel(ParamModule):
    """Cross-attention highlighter plus a causal decoder over the vocabulary."""

    def __init__(self, d_clip: int, d_word: int, vocab: Vocabulary, d: int = 256, seed: int = 0,
                 max_len: int = 64, n_layers: int = 1):
        shapes = {
            "hl_q_w": (d_word, d), "hl_q_b": (d,),
            "hl_k_w": (d_clip, d), "hl_k_b": (d,),
            "hl_v_w": (d_clip, d), "hl_v_b": (d,),
            "mask_emb": (d_word,),
        }
        dec = decoder_param_shapes(d_word, d, len(vocab), max_len)
        for layer in range(1, n_layers):
            for key in ("sa_q", "sa_k", "sa_v", "sa_o", "ca_q", "ca_k", "ca_v", "ca_o",
                        "ff1_w", "ff1_b", "ff2_w", "ff2_b"):
                dec[f"l{layer}_{key}"] = dec[key]
        shapes.update({f"dec_{k}": v for k, v in dec.items()})
        super().__init__(shapes, seed)
        self.vocab = vocab
        self.d = d
        self.max_len = max_len
        self.n_layers = n_layers
        self.config = {"d_clip": d_clip, "d_word": d_word, "d": d, "max_len": max_len, "n_layers": n_layers}

    def decoder_params(self, layer: int = 0) -> Dict[str, torch.Tensor]:
        dec = {k[4:]: v for k, v in self.p.items() if k.startswith("dec_")}
        if layer == 0:
            return dec
        prefix = f"l{layer}_"
        out = dict(dec)
        out.update({k[len(prefix):]: v for k, v in dec.items() if k.startswith(prefix)})
        return out


def highlight(model: TemporalModel, clips, words, clip_mask=None, word_mask=None):
    """Words attend over clips. Returns ``(highlighted (..., N, d), salience (..., C))``.

    Salience is the mean, over valid words, of each word's attention weight on a clip.
    """
    p = model.p
    clips = as_tensor(clips)
    words = as_tensor(words)
    q = linear(words, p["hl_q_w"], p["hl_q_b"])
    k = linear(clips, p["hl_k_w"], p["hl_k_b"])
    v = linear(clips, p["hl_v_w"], p["hl_v_b"])
    mask = None if clip_mask is None else torch.as_tensor(clip_mask, dtype=torch.bool).unsqueeze(-2)
    out, weights, _ = scaled_dot_attention(q, k, v, mask=mask)
    if word_mask is None:
        salience = weights.mean(-2)
    else:
        wm = torch.as_tensor(word_mask, dtype=DTYPE).unsqueeze(-1)
        salience = (weights * wm).sum(-2) / wm.sum(-2).clamp(min=1.0)
    return out, salience


def decode(model: TemporalModel, inputs, memory, memory_mask=None, input_mask=None):
    """Log-probabilities ``(..., N, |V|)`` for a batch of masked input sequences."""
    if model.n_layers == 1:
        return decoder_block(inputs, memory, model.decoder_params(), memory_mask, input_mask)
    # stacked layers: reuse decoder_block's layer body by threading hidden states
    return _decode_stacked(model, inputs, memory, memory_mask, input_mask)


def _decode_stacked(model, inputs, memory, memory_mask, input_mask):
    from .nn import causal_mask, mlp

    base = model.decoder_params()
    n = inputs.shape[-2]
    h = linear(inputs, base["in_w"], base["in_b"])
    bos = base["bos"].expand(*h.shape[:-2], 1, h.shape[-1])
    h = torch.cat([bos, h[..., :-1, :]], dim=-2) + base["pos"][:n]
    self_mask = causal_mask(n)
    if input_mask is not None:
        shifted = torch.cat([torch.ones(*input_mask.shape[:-1], 1, dtype=torch.bool),
                             input_mask[..., :-1].to(torch.bool)], dim=-1)
        self_mask = self_mask & shifted.unsqueeze(-2)
    cmask = None if memory_mask is None else memory_mask.to(torch.bool).unsqueeze(-2)
    for layer in range(model.n_layers):
        p = model.decoder_params(layer)
        sa, _, _ = scaled_dot_attention(h @ p["sa_q"], h @ p["sa_k"], h @ p["sa_v"], mask=self_mask)
        h = h + sa @ p["sa_o"]
        ca, _, _ = scaled_dot_attention(h @ p["ca_q"], memory @ p["ca_k"], memory @ p["ca_v"], mask=cmask)
        h = h + ca @ p["ca_o"]
        h = h + mlp(h, [(p["ff1_w"], p["ff1_b"]), (p["ff2_w"], p["ff2_b"])])
    return torch.log_softmax(linear(h, base["out_w"], base["out_b"]), dim=-1)


# -- featurization and batching ---------------------------------------------

@dataclass
class TemporalItem:
    clips: np.ndarray          # C x D_c
    words: np.ndarray          # N x D_w
    target_ids: np.ndarray     # N
    scored: np.ndarray         # N bool, positions contributing to the loss
    masked: np.ndarray         # N bool, positions replaced by the mask embedding


def featurize_temporal(sample: GroundingSample, vocab: Vocabulary, positions: Optional[Sequence[int]] = None,
                       max_len: int = 64, score_positions: str = "masked") -> Optional[TemporalItem]:
    """Build the reconstruction item for a sample, or None when nothing is maskable."""
    q = sample.query
    idx = list(range(len(q.tokens))) if positions is None else list(positions)
    idx = idx[:max_len]
    tokens = [q.tokens[i] for i in idx]
    tags = [q.pos_tags[i] for i in idx]
    mq = mask_query(tokens, tags)
    if not mq.trainable:
        return None
    masked = np.zeros(len(idx), dtype=bool)
    masked[mq.masked_positions] = True
    if score_positions == "masked":
        scored = masked.copy()
    elif score_positions == "all":
        scored = np.ones(len(idx), dtype=bool)
    else:
        raise ContractError(f"unknown score_positions {score_positions!r}")
    return TemporalItem(
        clips=sample.video.clip_features,
        words=q.embeddings[idx],
        target_ids=np.array([vocab.id(t) for t in tokens]),
        scored=scored,
        masked=masked,
    )


def _collate(items: Sequence[TemporalItem]):
    b = len(items)
    c = max(it.clips.shape[0] for it in items)
    n = max(it.words.shape[0] for it in items)
    d_c = items[0].clips.shape[1]
    d_w = items[0].words.shape[1]
    clips = np.zeros((b, c, d_c))
    cmask = np.zeros((b, c), dtype=bool)
    words = np.zeros((b, n, d_w))
    wmask = np.zeros((b, n), dtype=bool)
    targets = np.zeros((b, n), dtype=np.int64)
    scored = np.zeros((b, n), dtype=bool)
    masked = np.zeros((b, n), dtype=bool)
    for i, it in enumerate(items):
        cc, nn_ = it.clips.shape[0], it.words.shape[0]
        clips[i, :cc] = it.clips
        cmask[i, :cc] = True
        words[i, :nn_] = it.words
        wmask[i, :nn_] = True
        targets[i, :nn_] = it.target_ids
        scored[i, :nn_] = it.scored
        masked[i, :nn_] = it.masked
    return clips, cmask, words, wmask, targets, scored, masked


def masked_inputs(model: TemporalModel, words, masked):
    words = as_tensor(words)
    m = torch.as_tensor(masked, dtype=torch.bool).unsqueeze(-1)
    return torch.where(m, model.p["mask_emb"].expand_as(words), words)


def reconstruction_nll(log_probs, targets, scored):
    """Sum of ``-log p(target)`` over scored positions, averaged over the batch."""
    t = torch.as_tensor(targets, dtype=torch.long)
    picked = log_probs.gather(-1, t.unsqueeze(-1)).squeeze(-1)
    s = torch.as_tensor(scored, dtype=log_probs.dtype)
    per_item = -(picked * s).sum(-1)
    return per_item.mean()


def reconstruction_loss(model: TemporalModel, items: Sequence[TemporalItem]):
    """Highlight clips with the original query, then reconstruct its masked words."""
    items = [it for it in items if it is not None]
    if not items:
        raise ContractError("no reconstructable items in batch")
    clips, cmask, words, wmask, targets, scored, masked = _collate(items)
    cm = torch.as_tensor(cmask)
    wm = torch.as_tensor(wmask)
    f_hl, _ = highlight(model, clips, words, cm, wm)
    log_probs = decode(model, masked_inputs(model, words, masked), f_hl, memory_mask=wm, input_mask=wm)
    return reconstruction_nll(log_probs, targets, scored & wmask)


def reconstruction_loss_crg(model: TemporalModel, samples: Sequence[GroundingSample], max_len: int = 64,
                            score_positions: str = "masked"):
    """Reconstruction loss over the referral-focused ``<Q_og : Q_ol>`` word sequence."""
    items = []
    for s in samples:
        dq = s.decomposition
        positions = None
        if dq is None or dq.is_empty:
            logger.warning("query %r has an empty decomposition; using the original query", s.query.raw_text)
        else:
            positions = dq.word_positions()
        items.append(featurize_temporal(s, model.vocab, positions, max_len, score_positions))
    return reconstruction_loss(model, items)


def item_salience(model: TemporalModel, item: TemporalItem) -> np.ndarray:
    with torch.no_grad():
        _, sal = highlight(model, item.clips, item.words)
    return sal.numpy().copy()


# -- boundary prediction -----------------------------------------------------

def clip_frame_bounds(num_clips: int, length: int, clip_len: Optional[int] = 16) -> List[Tuple[int, int]]:
    """Frame interval covered by each clip.

    With ``clip_len`` set, clip ``c`` spans ``[c*clip_len, (c+1)*clip_len)``
    clamped to the video and the last clip absorbs any remainder; otherwise
    the video is split proportionally.
    """
    if clip_len:
        bounds = [(min(c * clip_len, length), min((c + 1) * clip_len, length)) for c in range(num_clips)]
        if bounds:
            bounds[-1] = (bounds[-1][0], length)
        bounds = [(s, e) if s < e else (max(length - 1, 0), length) for s, e in bounds]
        return bounds
    return [((c * length) // num_clips, ((c + 1) * length) // num_clips) for c in range(num_clips)]


def best_salient_run(salience: Sequence[float], tau: float = 0.5) -> Tuple[int, int]:
    """Clip run ``[a, b)`` with every clip at or above ``tau * max`` and the largest total.

    The earliest run wins ties.
    """
    sal = np.asarray(salience, dtype=np.float64)
    if sal.size == 0:
        raise ContractError("empty salience")
    if not 0.0 < tau <= 1.0:
        raise ContractError("tau must lie in (0, 1]")
    thr = tau * sal.max()
    best, best_total = None, -math.inf
    c = 0
    while c < sal.size:
        if sal[c] < thr:
            c += 1
            continue
        start = c
        while c < sal.size and sal[c] >= thr:
            c += 1
        total = float(sal[start:c].sum())
        if total > best_total:
            best, best_total = (start, c), total
    return best


def predict_bounds(salience, length: int, clip_len: Optional[int] = 16, tau: float = 0.5) -> Tuple[int, int]:
    a, b = best_salient_run(salience, tau)
    spans = clip_frame_bounds(len(salience), length, clip_len)
    return spans[a][0], spans[b - 1][1]
