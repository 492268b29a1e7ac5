"""Autoregressive pretraining and loss-masked fine-tuning."""

from __future__ import annotations

import csv
import logging
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import torch
import torch.nn.functional as F

from .config import TrainConfig
from .model import Transformer

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "loss", "lr", "grad_norm")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Batch:
    inputs: torch.Tensor     # (B, T) int64
    targets: torch.Tensor    # (B, T) int64, inputs shifted left by one
    loss_mask: torch.Tensor  # (B, T) {0, 1}

    def __post_init__(self) -> None:
        if not (self.inputs.shape == self.targets.shape == self.loss_mask.shape):
            raise ValueError("inputs, targets and loss_mask must share a shape")


def pack_documents(docs: Iterable[Sequence[int]], context: int, eod_id: int,
                   seed: int | None = 0) -> Iterator[list[int]]:
    """Shuffle, join with an end-of-document token between docs, cut into ``context``-token rows.

    The trailing partial row is dropped. ``seed=None`` keeps the given order.
    """
    if context < 2:
        raise ValueError("context must be >= 2")
    order = [list(d) for d in docs]
    if seed is not None:
        random.Random(seed).shuffle(order)
    buf: list[int] = []
    for i, doc in enumerate(order):
        if i:
            buf.append(eod_id)
        buf.extend(doc)
        while len(buf) >= context:
            yield buf[:context]
            buf = buf[context:]


def rows_to_batch(rows: Sequence[Sequence[int]]) -> Batch:
    t = torch.tensor(rows, dtype=torch.long)
    return Batch(t[:, :-1], t[:, 1:], torch.ones_like(t[:, 1:]))


def pretrain_batches(docs: Sequence[Sequence[int]], tc: TrainConfig, eod_id: int,
                     seed: int = 0) -> Iterator[Batch]:
    """Endless stream of packed batches; epoch ``e`` reshuffles with ``seed + e``."""
    epoch = 0
    while True:
        rows: list[list[int]] = []
        produced = False
        for row in pack_documents(docs, tc.context + 1, eod_id, seed + epoch):
            rows.append(row)
            if len(rows) == tc.batch_size:
                produced = True
                yield rows_to_batch(rows)
                rows = []
        if not produced:
            raise ValueError("corpus too small for one batch at this context and batch size")
        epoch += 1


def sft_batch(streams: Sequence, context: int, pad_id: int) -> Batch:
    """Right-pad (or truncate) masked streams into one batch; padding is never trained on."""
    inputs, targets, masks = [], [], []
    for s in streams:
        ids = list(s.ids)[:context + 1]
        mask = list(s.mask)[:context + 1]
        pad = context + 1 - len(ids)
        ids += [pad_id] * pad
        mask += [0] * pad
        inputs.append(ids[:-1])
        targets.append(ids[1:])
        masks.append(mask[1:])
    return Batch(torch.tensor(inputs), torch.tensor(targets), torch.tensor(masks))


def lr_at(step: int, tc: TrainConfig) -> float:
    """Linear warmup to ``peak_lr``, then cosine decay to ``min_lr_fraction * peak_lr``."""
    if not 0 <= step <= tc.total_steps:
        raise ValueError(f"step {step} outside [0, {tc.total_steps}]")
    peak = tc.peak_lr
    floor = tc.min_lr_fraction * peak
    if step < tc.warmup_steps:
        return peak * step / tc.warmup_steps
    if step == tc.total_steps and step > 0:
        return floor
    if step == tc.warmup_steps:
        return peak
    progress = (step - tc.warmup_steps) / (tc.total_steps - tc.warmup_steps)
    return floor + (peak - floor) * (1 + math.cos(math.pi * progress)) / 2


def masked_cross_entropy(logits: torch.Tensor, targets: torch.Tensor,
                         mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean next-token NLL over positions where ``mask`` is 1; also returns per-token NLL."""
    nll = torch.logsumexp(logits, dim=-1) - logits.gather(-1, targets[..., None]).squeeze(-1)
    m = mask.to(nll.dtype)
    denom = m.sum()
    if denom.item() == 0:
        raise ValueError("loss mask selects no tokens")
    return (nll * m).sum() / denom, nll


def build_optimizer(model: Transformer, tc: TrainConfig) -> torch.optim.AdamW:
    """AdamW with decoupled decay on weight matrices only; gains and biases are exempt."""
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        (no_decay if p.dim() < 2 else decay).append(p)
    groups = [
        {"params": decay, "weight_decay": tc.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]
    return torch.optim.AdamW(groups, lr=tc.peak_lr, betas=(tc.beta1, tc.beta2), eps=tc.eps)


def train_step(model: Transformer, batch: Batch, optimizer: torch.optim.Optimizer,
               tc: TrainConfig, step: int) -> dict[str, float]:
    lr = lr_at(step, tc)
    for group in optimizer.param_groups:
        group["lr"] = lr
    model.train()
    logits = model(batch.inputs)
    loss, _ = masked_cross_entropy(logits, batch.targets, batch.loss_mask)
    if not torch.isfinite(loss):
        raise TrainingDiverged(
            f"non-finite loss {loss.item()} at step {step} (lr={lr:.3e}, "
            f"max |logit|={logits.detach().abs().max().item():.3e})")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    grad_norm = torch.nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip)
    optimizer.step()
    return {"step": step, "loss": loss.item(), "lr": lr, "grad_norm": float(grad_norm)}


def train(model: Transformer, batches: Iterator[Batch], tc: TrainConfig,
          metrics_path: str | Path | None = None,
          checkpoint_fn: Callable[[int], None] | None = None,
          stop_fn: Callable[[dict], bool] | None = None,
          log_every: int = 50) -> list[dict[str, float]]:
    """Run ``tc.total_steps`` steps (or until ``stop_fn`` says so), logging CSV metrics."""
    optimizer = build_optimizer(model, tc)
    model.dropout = tc.dropout
    history = []
    fh = open(metrics_path, "w", newline="") if metrics_path else None
    try:
        writer = csv.writer(fh) if fh else None
        if writer:
            writer.writerow(METRIC_FIELDS)
        for step in range(tc.total_steps):
            metrics = train_step(model, next(batches), optimizer, tc, step)
            history.append(metrics)
            if writer:
                writer.writerow([metrics[k] for k in METRIC_FIELDS])
                fh.flush()
            if log_every and step % log_every == 0:
                log.info("step %d loss %.4f lr %.2e gnorm %.3f", step, metrics["loss"],
                         metrics["lr"], metrics["grad_norm"])
            if checkpoint_fn and tc.checkpoint_every and (step + 1) % tc.checkpoint_every == 0:
                checkpoint_fn(step + 1)
            if stop_fn and stop_fn(metrics):
                break
    finally:
        if fh:
            fh.close()
    model.eval()
    return history
