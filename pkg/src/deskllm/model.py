"""Pre-norm decoder with untied embeddings, QKV-only biases, SwiGLU and rotary positions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ExtensionConfig, ModelConfig
from .extension import InferencePlan, configure_inference
from .kernels import apply_rope, attention, rmsnorm, swiglu_ffn

MAX_POSITIONS = 1 << 16

DTYPES = {"fp32": torch.float32, "fp64": torch.float64}


@dataclass
class KVCache:
    """Post-RoPE keys and values per layer, shaped (batch, positions, heads, head_dim).

    ``ids`` keeps the consumed tokens so the prefix can be re-encoded when the
    rotary base changes (dynamic NTK crossing a chunk boundary).
    """

    keys: list[torch.Tensor | None] = field(default_factory=list)
    values: list[torch.Tensor | None] = field(default_factory=list)
    ids: torch.Tensor | None = None
    base_used: float | None = None
    reencodes: int = 0

    @property
    def current_len(self) -> int:
        return 0 if self.ids is None else self.ids.shape[-1]

    def reset(self) -> None:
        self.keys = []
        self.values = []
        self.ids = None
        self.base_used = None


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        h = cfg.hidden
        self.n_heads = cfg.n_heads
        self.head_dim = cfg.head_dim
        self.eps = cfg.norm_eps
        self.attn_norm = nn.Parameter(torch.ones(h))
        self.wq = nn.Linear(h, h, bias=True)
        self.wk = nn.Linear(h, h, bias=True)
        self.wv = nn.Linear(h, h, bias=True)
        self.wo = nn.Linear(h, h, bias=False)
        self.ffn_norm = nn.Parameter(torch.ones(h))
        self.w_gate = nn.Linear(h, cfg.ffn_hidden, bias=False)
        self.w_up = nn.Linear(h, cfg.ffn_hidden, bias=False)
        self.w_down = nn.Linear(cfg.ffn_hidden, h, bias=False)

    def forward(self, x, plan: InferencePlan, mask, logit_scale, offset: int,
                cache: KVCache | None, layer_index: int, dropout: float):
        b, t, _ = x.shape
        hx = rmsnorm(x, self.attn_norm, self.eps)
        q = self.wq(hx).view(b, t, self.n_heads, self.head_dim)
        k = self.wk(hx).view(b, t, self.n_heads, self.head_dim)
        v = self.wv(hx).view(b, t, self.n_heads, self.head_dim)
        q = apply_rope(q, offset, plan.rope)
        k = apply_rope(k, offset, plan.rope)
        if cache is not None:
            if offset:
                k = torch.cat([cache.keys[layer_index], k], dim=1)
                v = torch.cat([cache.values[layer_index], v], dim=1)
            if len(cache.keys) <= layer_index:
                cache.keys.append(k)
                cache.values.append(v)
            else:
                cache.keys[layer_index] = k
                cache.values[layer_index] = v
        a = attention(q.transpose(1, 2), k.transpose(1, 2), v.transpose(1, 2), mask, logit_scale)
        a = self.wo(a.transpose(1, 2).reshape(b, t, -1))
        x = x + F.dropout(a, dropout, self.training)
        f = swiglu_ffn(rmsnorm(x, self.ffn_norm, self.eps),
                       self.w_gate.weight, self.w_up.weight, self.w_down.weight)
        return x + F.dropout(f, dropout, self.training)


class Transformer(nn.Module):
    """Decoder-only language model.

    Parameters are laid out as ``input_embedding`` (vocab x hidden),
    ``output_projection`` (hidden x vocab, absent when embeddings are tied),
    per-layer gains/projections and ``final_norm``.
    """

    def __init__(self, cfg: ModelConfig, dropout: float = 0.0):
        super().__init__()
        self.cfg = cfg
        self.dropout = dropout
        self.input_embedding = nn.Parameter(torch.empty(cfg.vocab_size, cfg.hidden))
        self.layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.n_layers))
        self.final_norm = nn.Parameter(torch.ones(cfg.hidden))
        if cfg.tie_embeddings:
            self.output_projection = None
        else:
            self.output_projection = nn.Parameter(torch.empty(cfg.hidden, cfg.vocab_size))
        self.to(DTYPES[cfg.precision])

    def init_weights(self, generator: torch.Generator | None = None, std: float = 0.02) -> Transformer:
        resid_std = std / math.sqrt(2 * self.cfg.n_layers)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("norm"):
                    p.fill_(1.0)
                elif name.endswith("bias"):
                    p.zero_()
                elif name.endswith(("wo.weight", "w_down.weight")):
                    p.normal_(0.0, resid_std, generator=generator)
                else:
                    p.normal_(0.0, std, generator=generator)
        return self

    @property
    def dtype(self) -> torch.dtype:
        return self.input_embedding.dtype

    def output_matrix(self) -> torch.Tensor:
        if self.output_projection is None:
            return self.input_embedding.t()
        return self.output_projection

    def forward(self, ids: torch.Tensor, ext: ExtensionConfig | None = None,
                cache: KVCache | None = None) -> torch.Tensor:
        """Logits for every position of ``ids`` (shape (T,) or (B, T)).

        With a cache, ``ids`` continue the cached prefix. If the rotary base
        required at the new length differs from the one the cached keys were
        rotated with, the whole prefix is re-encoded first.
        """
        squeeze = ids.dim() == 1
        if squeeze:
            ids = ids[None]
        ids = ids.long()
        if ids.numel() and (int(ids.max()) >= self.cfg.vocab_size or int(ids.min()) < 0):
            raise ValueError(f"token id outside [0, {self.cfg.vocab_size})")
        past = cache.current_len if cache is not None else 0
        m = past + ids.shape[1]
        if m > MAX_POSITIONS:
            raise ValueError(f"context length {m} exceeds engine limit {MAX_POSITIONS}")
        plan = configure_inference(self.cfg, ext, m)
        n_new = ids.shape[1]
        if cache is not None and past and cache.base_used != plan.rope.base_used:
            ids = torch.cat([cache.ids, ids], dim=1)
            cache.reset()
            cache.reencodes += 1
            past = 0
        logits = self._run(ids, plan, past, cache)[:, ids.shape[1] - n_new:]
        return logits[0] if squeeze else logits

    def _run(self, ids, plan: InferencePlan, offset: int, cache: KVCache | None):
        t = ids.shape[1]
        x = F.embedding(ids, self.input_embedding)
        masks = plan.masks(t, offset)
        scales = plan.logit_scales(t, offset)
        if scales is None:
            scales = 1.0
        for i, layer in enumerate(self.layers):
            x = layer(x, plan, masks[i], scales, offset, cache, i, self.dropout)
        if cache is not None:
            cache.ids = ids if cache.ids is None else torch.cat([cache.ids, ids], dim=1)
            cache.base_used = plan.rope.base_used
        x = rmsnorm(x, self.final_norm, self.cfg.norm_eps)
        return x @ self.output_matrix()


def build_model(cfg: ModelConfig, seed: int = 0, dropout: float = 0.0) -> Transformer:
    g = torch.Generator().manual_seed(seed)
    return Transformer(cfg, dropout=dropout).init_weights(g)


def bias_parameter_names(model: Transformer) -> list[str]:
    return [n for n, _ in model.named_parameters() if n.endswith("bias")]
