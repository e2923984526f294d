"""Small differentiable building blocks on top of torch autograd (float64).

Everything here is functional: parameters are passed in explicitly so the
same code paths can be checked against scalar-loop references and finite
differences.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

DTYPE = torch.float64


class NumericalError(FloatingPointError):
    """A non-finite value appeared in a gradient, parameter or loss."""


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x), dtype=DTYPE)


def linear(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """``x @ weight + bias`` with ``weight`` shaped ``(in, out)``."""
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear: input dim {x.shape[-1]} does not match weight {tuple(weight.shape)}")
    y = x @ weight
    return y if bias is None else y + bias


def mlp(x: torch.Tensor, layers: Sequence[Tuple[torch.Tensor, torch.Tensor]], activation=torch.nn.functional.gelu):
    """Affine layers with ``activation`` between them (none after the last)."""
    for i, (w, b) in enumerate(layers):
        x = linear(x, w, b)
        if i < len(layers) - 1:
            x = activation(x)
    return x


def softmax(scores: torch.Tensor, axis: int = -1, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Max-subtracted softmax. Masked-out entries get weight 0; a fully masked
    row comes back all zeros rather than NaN."""
    if mask is None:
        shifted = scores - scores.amax(dim=axis, keepdim=True).detach()
        e = torch.exp(shifted)
        return e / e.sum(dim=axis, keepdim=True)
    mask = mask.to(torch.bool).expand_as(scores)
    filled = scores.masked_fill(~mask, float("-inf"))
    top = filled.amax(dim=axis, keepdim=True).detach()
    top = torch.where(torch.isfinite(top), top, torch.zeros_like(top))
    e = torch.exp(filled - top) * mask
    denom = e.sum(dim=axis, keepdim=True)
    return e / torch.where(denom > 0, denom, torch.ones_like(denom))


def scaled_dot_attention(queries, keys, values, scale: Optional[float] = None, mask=None):
    """Return ``(outputs, weights, empty_rows)``.

    ``mask`` broadcasts against the ``(..., n_queries, n_keys)`` score matrix.
    Rows with no admissible key produce zero output and are flagged in
    ``empty_rows``.
    """
    if queries.shape[-1] != keys.shape[-1]:
        raise ValueError("query and key dims differ")
    if scale is None:
        scale = 1.0 / math.sqrt(queries.shape[-1])
    scores = (queries @ keys.transpose(-1, -2)) * scale
    if mask is not None:
        mask = torch.as_tensor(mask, dtype=torch.bool)
        if mask.dim() > scores.dim():
            raise ValueError("mask has more dims than the score matrix")
    weights = softmax(scores, -1, mask)
    if mask is None:
        empty = torch.zeros(scores.shape[:-1], dtype=torch.bool)
    else:
        empty = ~mask.expand_as(scores).any(dim=-1)
    return weights @ values, weights, empty


def temporal_self_attention(x, mask, w_q, w_k, w_out):
    """Self-attention along the frame axis with a residual update.

    ``x`` is ``(..., T, D)`` and ``mask`` ``(..., T)``. Each valid frame
    attends over the valid frames of its own sequence; the block adds
    ``(context - x) @ w_out`` to ``x``, so a frame that already agrees with
    its context passes through unchanged. Invalid frames come out as zeros.
    """
    mask = torch.as_tensor(mask, dtype=torch.bool)
    q = x @ w_q
    k = x @ w_k
    pair = mask.unsqueeze(-1) & mask.unsqueeze(-2)
    context, _, _ = scaled_dot_attention(q, k, x, mask=pair)
    out = x + (context - x) @ w_out
    return out * mask.unsqueeze(-1).to(x.dtype)


def causal_mask(n: int, strict: bool = False) -> torch.Tensor:
    """``mask[i, j]`` is True where position ``i`` may attend to ``j``."""
    return torch.tril(torch.ones(n, n, dtype=torch.bool), diagonal=-1 if strict else 0)


def decoder_block(inputs, memory, params: Dict[str, torch.Tensor], memory_mask=None, input_mask=None):
    """One shift-right causal decoder block producing vocabulary log-probabilities.

    ``inputs`` is ``(..., N, D_in)``; ``memory`` is ``(..., M, d)``. Position
    ``m`` sees a learned start vector plus inputs ``0 .. m-1`` (never its own
    input) and the whole memory, so its distribution is conditioned on the
    strict prefix.
    """
    n = inputs.shape[-2]
    h = linear(inputs, params["in_w"], params["in_b"])
    bos = params["bos"].expand(*h.shape[:-2], 1, h.shape[-1])
    h = torch.cat([bos, h[..., :-1, :]], dim=-2) + params["pos"][:n]
    self_mask = causal_mask(n)
    if input_mask is not None:
        # shifted validity: position m reads input m-1; the start slot is always valid
        shifted = torch.cat(
            [torch.ones(*input_mask.shape[:-1], 1, dtype=torch.bool), input_mask[..., :-1].to(torch.bool)], dim=-1
        )
        self_mask = self_mask & shifted.unsqueeze(-2)
    sa, _, _ = scaled_dot_attention(h @ params["sa_q"], h @ params["sa_k"], h @ params["sa_v"], mask=self_mask)
    h = h + sa @ params["sa_o"]
    cmask = None if memory_mask is None else memory_mask.to(torch.bool).unsqueeze(-2)
    ca, _, _ = scaled_dot_attention(h @ params["ca_q"], memory @ params["ca_k"], memory @ params["ca_v"], mask=cmask)
    h = h + ca @ params["ca_o"]
    h = h + mlp(h, [(params["ff1_w"], params["ff1_b"]), (params["ff2_w"], params["ff2_b"])])
    logits = linear(h, params["out_w"], params["out_b"])
    return torch.log_softmax(logits, dim=-1)


def decoder_param_shapes(d_in: int, d: int, vocab_size: int, max_len: int, d_ff: Optional[int] = None):
    d_ff = d_ff or 2 * d
    return {
        "in_w": (d_in, d), "in_b": (d,), "bos": (d,), "pos": (max_len, d),
        "sa_q": (d, d), "sa_k": (d, d), "sa_v": (d, d), "sa_o": (d, d),
        "ca_q": (d, d), "ca_k": (d, d), "ca_v": (d, d), "ca_o": (d, d),
        "ff1_w": (d, d_ff), "ff1_b": (d_ff,), "ff2_w": (d_ff, d), "ff2_b": (d,),
        "out_w": (d, vocab_size), "out_b": (vocab_size,),
    }


def init_parameter(shape, generator: torch.Generator) -> torch.Tensor:
    """Uniform fan-in init; vectors (biases, start tokens) start at zero except
    positional tables, which get the same fan-in scale as matrices."""
    if len(shape) == 1:
        return torch.zeros(shape, dtype=DTYPE)
    bound = 1.0 / math.sqrt(shape[0]) if shape[0] > 0 else 0.0
    return (torch.rand(shape, generator=generator, dtype=DTYPE) * 2 - 1) * bound


class ParamModule(nn.Module):
    """``nn.Module`` whose parameters are declared from a name -> shape table."""

    def __init__(self, shapes: Dict[str, Tuple[int, ...]], seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(int(seed))
        self.p = nn.ParameterDict({k: nn.Parameter(init_parameter(s, gen)) for k, s in shapes.items()})

    def named_tensors(self) -> Dict[str, torch.Tensor]:
        return {k: v for k, v in self.p.items()}


# -- optimizer -----------------------------------------------------------------

@dataclass
class OptimizerState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: Dict[str, torch.Tensor] = field(default_factory=dict)
    second_moment: Dict[str, torch.Tensor] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "epsilon": self.epsilon,
            "step": self.step,
            "first_moment": {k: v.tolist() for k, v in self.first_moment.items()},
            "second_moment": {k: v.tolist() for k, v in self.second_moment.items()},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "OptimizerState":
        return cls(
            learning_rate=obj["learning_rate"],
            beta1=obj["beta1"],
            beta2=obj["beta2"],
            epsilon=obj["epsilon"],
            step=obj["step"],
            first_moment={k: torch.tensor(v, dtype=DTYPE) for k, v in obj["first_moment"].items()},
            second_moment={k: torch.tensor(v, dtype=DTYPE) for k, v in obj["second_moment"].items()},
        )


@torch.no_grad()
def adam_step(params: Dict[str, torch.Tensor], state: OptimizerState) -> None:
    """Bias-corrected Adam update applied in place to every parameter with a gradient."""
    for name, p in params.items():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NumericalError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = torch.zeros_like(p)
            v = torch.zeros_like(p)
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        p -= state.learning_rate * m_hat / (torch.sqrt(v_hat) + state.epsilon)
        if not torch.isfinite(p).all():
            raise NumericalError(f"parameter {name!r} became non-finite")


def zero_grad(params: Dict[str, torch.Tensor]) -> None:
    for p in params.values():
        p.grad = None


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(directory, params: Dict[str, torch.Tensor], state: Optional[OptimizerState] = None,
                    extra: Optional[dict] = None) -> None:
    """One STVF file per parameter plus ``optimizer.json`` / ``model.json`` sidecars."""
    from .feature_io import write_features

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, tensor in params.items():
        write_features(tensor.detach().numpy(), directory / f"{name}.stvf")
    if state is not None:
        with open(directory / "optimizer.json", "w") as fh:
            json.dump(state.to_json(), fh)
    with open(directory / "model.json", "w") as fh:
        json.dump({"parameters": sorted(params), **(extra or {})}, fh, sort_keys=True, indent=1)


def load_checkpoint(directory):
    """Return ``(params, optimizer_state_or_None, extra)``."""
    from .feature_io import read_features

    directory = Path(directory)
    with open(directory / "model.json") as fh:
        meta = json.load(fh)
    params = {
        name: torch.as_tensor(read_features(directory / f"{name}.stvf").astype(np.float64))
        for name in meta.pop("parameters")
    }
    state = None
    if (directory / "optimizer.json").exists():
        with open(directory / "optimizer.json") as fh:
            state = OptimizerState.from_json(json.load(fh))
    return params, state, meta
