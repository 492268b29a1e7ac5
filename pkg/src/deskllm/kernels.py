"""Tensor kernels used by the decoder: RMSNorm, SwiGLU, RoPE and masked attention."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .config import ModelConfig

# Additive penalty for disallowed attention entries; -inf would NaN an all-masked fp32 row.
MASK_VALUE = -1e9


def rmsnorm(x: torch.Tensor, gain: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    if eps <= 0:
        raise ValueError("eps must be positive")
    return gain * x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + eps)


def swiglu_ffn(x: torch.Tensor, w_gate: torch.Tensor, w_up: torch.Tensor,
               w_down: torch.Tensor) -> torch.Tensor:
    """``w_down @ (swish(w_gate @ x) * (w_up @ x))`` with weights stored as (out, in)."""
    return F.linear(F.silu(F.linear(x, w_gate)) * F.linear(x, w_up), w_down)


@dataclass(frozen=True)
class RopeTable:
    inv_freq: np.ndarray  # float64, shape (head_dim // 2,)
    base_used: float

    def __post_init__(self) -> None:
        if np.any(self.inv_freq <= 0) or np.any(np.diff(self.inv_freq) >= 0):
            raise ValueError("inv_freq must be positive and strictly decreasing")

    @property
    def head_dim(self) -> int:
        return 2 * len(self.inv_freq)

    def angles(self, positions: torch.Tensor | np.ndarray) -> np.ndarray:
        pos = np.asarray(positions, dtype=np.float64)
        return np.outer(pos, self.inv_freq)


def _inv_freq(base: float, head_dim: int) -> np.ndarray:
    exps = np.arange(0, head_dim, 2, dtype=np.float64) / head_dim
    return base ** (-exps)


def build_rope_table(cfg: ModelConfig, base_override: float | None = None) -> RopeTable:
    base = float(cfg.rope_base if base_override is None else base_override)
    if cfg.head_dim % 2:
        raise ValueError("head_dim must be even")
    return RopeTable(_inv_freq(base, cfg.head_dim), base)


def apply_rope(x: torch.Tensor, start_pos: int | torch.Tensor, table: RopeTable) -> torch.Tensor:
    """Rotate pairs ``(2i, 2i+1)`` of ``x[..., t, h, :]`` by ``(start_pos + t) * inv_freq[i]``.

    ``start_pos`` may also be a 1-D tensor of absolute positions, one per row.
    Angles are computed in float64 and cast to ``x.dtype`` at the end.
    """
    n = x.shape[-3]
    if isinstance(start_pos, torch.Tensor):
        positions = start_pos.detach().cpu().numpy()
    else:
        if start_pos < 0:
            raise ValueError("start_pos must be >= 0")
        positions = np.arange(start_pos, start_pos + n)
    ang = table.angles(positions)
    cos = torch.from_numpy(np.cos(ang)).to(x.dtype)[:, None, :]
    sin = torch.from_numpy(np.sin(ang)).to(x.dtype)[:, None, :]
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = torch.stack((even * cos - odd * sin, even * sin + odd * cos), dim=-1)
    return out.flatten(-2)


def causal_mask(n_q: int, n_k: int | None = None, offset: int = 0,
                window: int | None = None) -> torch.Tensor:
    """Boolean allow-mask of shape (n_q, n_k); query i sits at absolute position ``offset + i``."""
    n_k = n_q + offset if n_k is None else n_k
    q = torch.arange(offset, offset + n_q)[:, None]
    k = torch.arange(n_k)[None, :]
    allowed = k <= q
    if window is not None:
        allowed &= k > q - window
    return allowed


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
              mask: torch.Tensor | None = None,
              logit_scale: float | torch.Tensor = 1.0,
              return_weights: bool = False):
    """Softmax attention over the last two axes: q (..., Tq, D), k/v (..., Tk, D).

    ``mask`` is a boolean allow-mask broadcastable to (..., Tq, Tk).
    ``logit_scale`` multiplies the queries; a tensor of shape (Tq,) gives each
    query row its own multiplier. Rows with nothing allowed produce zeros.
    """
    d = q.shape[-1]
    if isinstance(logit_scale, torch.Tensor):
        q = q * logit_scale.to(q.dtype)[:, None]
    elif logit_scale != 1.0:
        q = q * logit_scale
    scores = (q @ k.transpose(-1, -2)) / math.sqrt(d)
    if mask is not None:
        scores = scores.masked_fill(~mask, MASK_VALUE)
    weights = torch.softmax(scores, dim=-1)
    if mask is not None:
        weights = weights * mask.any(dim=-1, keepdim=True).to(weights.dtype)
    out = weights @ v
    if return_weights:
        return out, weights
    return out
