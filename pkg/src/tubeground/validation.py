"""Input checks shared by the estimators and the command line."""
from __future__ import annotations

from typing import Sequence

from .core import ContractError, GroundingSample


def check_samples(X, require_gt: bool = False, min_samples: int = 1) -> list:
    """Return ``X`` as a list after checking it holds grounding samples.

    Raises :class:`ContractError` on wrong types, too few samples, missing
    ground truth (when required) or inconsistent feature widths.
    """
    if X is None:
        raise ContractError("expected a sequence of GroundingSample, got None")
    samples = list(X)
    if len(samples) < min_samples:
        raise ContractError(f"expected at least {min_samples} samples, got {len(samples)}")
    widths = set()
    for s in samples:
        if not isinstance(s, GroundingSample):
            raise ContractError(f"expected GroundingSample, got {type(s).__name__}")
        if require_gt and s.gt is None:
            raise ContractError(f"sample {s.video_id} has no ground truth")
        tube_dim = s.video.tubelets[0].feature_dim if s.video.tubelets else None
        widths.add((tube_dim, s.video.clip_features.shape[1], s.query.embeddings.shape[1]))
    dims = {w[1:] for w in widths}
    tube_dims = {w[0] for w in widths if w[0] is not None}
    if len(dims) > 1 or len(tube_dims) > 1:
        raise ContractError(f"inconsistent feature widths across samples: {sorted(widths, key=str)}")
    return samples


def feature_dims(samples: Sequence[GroundingSample]):
    """``(D_o, D_c, D_w)`` of an already checked sample list."""
    d_o = next(s.video.tubelets[0].feature_dim for s in samples if s.video.tubelets)
    s0 = samples[0]
    return d_o, s0.video.clip_features.shape[1], s0.query.embeddings.shape[1]


def check_probability(name: str, value: float, allow_zero: bool = False) -> float:
    value = float(value)
    lo_ok = value >= 0 if allow_zero else value > 0
    if not (lo_ok and value <= 1):
        raise ContractError(f"{name} must lie in {'[0' if allow_zero else '(0'}, 1], got {value}")
    return value


def check_positive_int(name: str, value) -> int:
    if int(value) != value or value < 1:
        raise ContractError(f"{name} must be a positive integer, got {value!r}")
    return int(value)
