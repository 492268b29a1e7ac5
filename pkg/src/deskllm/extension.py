"""Training-free context extension: NTK base adjustment, dynamic NTK, LogN scaling, window masks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .config import ExtensionConfig, ModelConfig
from .kernels import RopeTable, build_rope_table, causal_mask

WINDOW_GRANULARITY = 64


def ntk_adjusted_base(base: float, s: float, head_dim: int) -> float:
    """RoPE base enlarged so the lowest frequency stretches by ``s``: ``base * s**(d/(d-2))``."""
    if head_dim <= 2:
        raise ValueError("NTK adjustment needs head_dim > 2")
    if s < 1:
        raise ValueError("scale must be >= 1")
    if s == 1:
        return float(base)
    return float(base * s ** (head_dim / (head_dim - 2)))


def dynamic_scale(m: int, train_context: int, chunk: int) -> float:
    """``max(1, ceil_to_chunk(m) / train_context)``: a step function of the current length."""
    if m < 1 or train_context < 1 or chunk < 1:
        raise ValueError("dynamic_scale needs m, train_context, chunk >= 1")
    padded = -(-m // chunk) * chunk
    return max(1.0, padded / train_context)


def logn_scale(m: int, n: int) -> float:
    """Attention logit multiplier ``max(1, ln m / ln n)``."""
    if n <= 1:
        raise ValueError("training length must be >= 2 for LogN scaling")
    if m < 1:
        raise ValueError("context length must be >= 1")
    if m <= n:
        return 1.0
    return math.log(m) / math.log(n)


def window_schedule(n_layers: int, w_min: int, w_max: int) -> tuple[int, ...]:
    """Geometric window sizes from ``w_min`` (layer 0) to ``w_max`` (top layer).

    Sizes are rounded to multiples of 64 once ``w_min`` is at least 64.
    """
    if n_layers < 1:
        raise ValueError("n_layers must be >= 1")
    if not 1 <= w_min <= w_max:
        raise ValueError("need 1 <= w_min <= w_max")
    if n_layers == 1:
        return (w_max,)
    grain = WINDOW_GRANULARITY if w_min >= WINDOW_GRANULARITY else 1
    ratio = w_max / w_min
    out = []
    for i in range(n_layers):
        w = w_min * ratio ** (i / (n_layers - 1))
        w = int(round(w / grain)) * grain
        out.append(min(max(w, w_min), w_max))
    for i in range(1, n_layers):
        out[i] = max(out[i], out[i - 1])
    return tuple(out)


def default_window_range(train_context: int) -> tuple[int, int]:
    return max(1, train_context // 2), 4 * train_context


def window_mask(seq_len: int, layer_index: int, schedule: tuple[int, ...] | None,
                offset: int = 0) -> torch.Tensor:
    """Boolean allow-mask for one layer; ``None`` schedule means plain causal."""
    if schedule is None:
        return causal_mask(seq_len, offset=offset)
    if not 0 <= layer_index < len(schedule):
        raise ValueError(f"layer_index {layer_index} outside schedule of {len(schedule)} layers")
    return causal_mask(seq_len, offset=offset, window=schedule[layer_index])


def resolve_windows(cfg: ModelConfig, ext: ExtensionConfig) -> tuple[int, ...] | None:
    if ext.windows is not None:
        if len(ext.windows) != cfg.n_layers:
            raise ValueError(f"window schedule has {len(ext.windows)} entries for {cfg.n_layers} layers")
        return ext.windows
    if ext.window_range is not None:
        return window_schedule(cfg.n_layers, *ext.window_range)
    if ext.auto_windows:
        n = ext.train_context or cfg.train_context
        return window_schedule(cfg.n_layers, *default_window_range(n))
    return None


def ntk_scale_for(cfg: ModelConfig, ext: ExtensionConfig, m: int) -> float:
    if ext.ntk_mode == "static":
        return ext.ntk_scale
    if ext.ntk_mode == "dynamic":
        n = ext.train_context or cfg.train_context
        return dynamic_scale(m, n, ext.ntk_chunk or n)
    return 1.0


@dataclass(frozen=True)
class InferencePlan:
    rope: RopeTable
    logit_scale: float
    windows: tuple[int, ...] | None
    logn: bool
    train_context: int
    n_layers: int

    def masks(self, n_q: int, offset: int = 0) -> list[torch.Tensor]:
        if self.windows is None:
            shared = causal_mask(n_q, offset=offset)
            return [shared] * self.n_layers
        return [window_mask(n_q, i, self.windows, offset) for i in range(len(self.windows))]

    def logit_scales(self, n_q: int, offset: int = 0) -> torch.Tensor | None:
        """Per-query LogN multipliers, query at position p using context length p + 1."""
        if not self.logn:
            return None
        n = self.train_context
        scales = [logn_scale(p + 1, n) for p in range(offset, offset + n_q)]
        if all(s == 1.0 for s in scales):
            return None
        return torch.from_numpy(np.array(scales, dtype=np.float64))


def configure_inference(cfg: ModelConfig, ext: ExtensionConfig | None, m: int) -> InferencePlan:
    """Everything the decoder needs to run at current context length ``m``."""
    ext = ext or ExtensionConfig()
    n = ext.train_context or cfg.train_context
    s = ntk_scale_for(cfg, ext, m)
    if s == 1.0:
        rope = build_rope_table(cfg)
    else:
        rope = build_rope_table(cfg, ntk_adjusted_base(cfg.rope_base, s, cfg.head_dim))
    lam = logn_scale(m, n) if ext.logn else 1.0
    return InferencePlan(rope=rope, logit_scale=lam, windows=resolve_windows(cfg, ext),
                         logn=ext.logn, train_context=n, n_layers=cfg.n_layers)
