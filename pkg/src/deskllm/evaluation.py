"""Perplexity harness, context-length sweeps and sampling."""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import torch

from .config import ExtensionConfig
from .model import KVCache, Transformer
from .training import masked_cross_entropy

log = logging.getLogger(__name__)


@dataclass
class PerplexityResult:
    perplexity: float
    mean_nll: float
    tokens: int
    used: int
    skipped: int


def _sequence_nll(model: Transformer, ext: ExtensionConfig | None, seq: Sequence[int],
                  eval_len: int) -> tuple[float, int]:
    x = torch.as_tensor(list(seq[:eval_len]), dtype=torch.long)
    with torch.no_grad():
        logits = model(x, ext)
        ones = torch.ones(eval_len - 1, dtype=logits.dtype)
        loss, _ = masked_cross_entropy(logits[:-1], x[1:], ones)
    return loss.item() * (eval_len - 1), eval_len - 1


def score(model: Transformer, ext: ExtensionConfig | None, corpus: Iterable[Sequence[int]],
          eval_len: int, workers: int = 1) -> PerplexityResult:
    """Full-sequence scoring of the first ``eval_len`` tokens of each long-enough sequence."""
    if eval_len < 2:
        raise ValueError("eval_len must be >= 2")
    usable, skipped = [], 0
    for seq in corpus:
        if len(seq) >= eval_len:
            usable.append(seq)
        else:
            skipped += 1
    if not usable:
        raise ValueError(f"no corpus sequence has {eval_len} tokens ({skipped} too short)")
    model.eval()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda s: _sequence_nll(model, ext, s, eval_len), usable))
    else:
        parts = [_sequence_nll(model, ext, s, eval_len) for s in usable]
    total = math.fsum(p[0] for p in parts)
    count = sum(p[1] for p in parts)
    mean = total / count
    if skipped:
        log.info("perplexity@%d: skipped %d short sequences", eval_len, skipped)
    return PerplexityResult(math.exp(mean), mean, count, len(usable), skipped)


def perplexity(model: Transformer, ext: ExtensionConfig | None, corpus: Iterable[Sequence[int]],
               eval_len: int, workers: int = 1) -> float:
    return score(model, ext, corpus, eval_len, workers).perplexity


def chunk_tokens(tokens: Sequence[int], length: int) -> list[list[int]]:
    """Split a token stream into consecutive ``length``-token sequences (tail dropped)."""
    return [list(tokens[i:i + length]) for i in range(0, len(tokens) - length + 1, length)]


@dataclass
class PplReport:
    rows: list[tuple[int, str, float]] = field(default_factory=list)
    corpus_id: str = ""
    model_id: str = ""

    def add(self, length: int, label: str, ppl: float) -> None:
        prior = [r[0] for r in self.rows if r[1] == label]
        if prior and length <= prior[-1]:
            raise ValueError(f"lengths must increase within {label!r}")
        if not ppl > 0:
            raise ValueError("perplexity must be positive")
        self.rows.append((length, label, ppl))

    @property
    def labels(self) -> list[str]:
        return list(dict.fromkeys(r[1] for r in self.rows))

    @property
    def lengths(self) -> list[int]:
        return sorted({r[0] for r in self.rows})

    def get(self, label: str, length: int) -> float:
        for n, lab, p in self.rows:
            if lab == label and n == length:
                return p
        raise KeyError((label, length))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["corpus", "model", "technique", "length", "perplexity"])
        for n, lab, p in self.rows:
            w.writerow([self.corpus_id, self.model_id, lab, n, f"{p:.6g}"])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> PplReport:
        rep = cls()
        for rec in csv.DictReader(io.StringIO(text)):
            rep.corpus_id, rep.model_id = rec["corpus"], rec["model"]
            rep.add(int(rec["length"]), rec["technique"], float(rec["perplexity"]))
        return rep

    def to_table(self) -> str:
        """Techniques as rows, lengths as columns."""
        lengths = self.lengths
        width = max([len(lab) for lab in self.labels] + [9])
        lines = [f"{'technique':<{width}} " + " ".join(f"{n:>10}" for n in lengths)]
        for lab in self.labels:
            cells = []
            for n in lengths:
                try:
                    cells.append(f"{self.get(lab, n):>10.2f}")
                except KeyError:
                    cells.append(f"{'-':>10}")
            lines.append(f"{lab:<{width}} " + " ".join(cells))
        return "\n".join(lines)


def length_sweep(model: Transformer, techniques: dict[str, ExtensionConfig | None] | Sequence,
                 lengths: Sequence[int], corpus: Sequence[Sequence[int]],
                 corpus_id: str = "", model_id: str = "", workers: int = 1) -> PplReport:
    if list(lengths) != sorted(lengths):
        raise ValueError("lengths must be sorted ascending")
    items = techniques.items() if isinstance(techniques, dict) else techniques
    report = PplReport(corpus_id=corpus_id, model_id=model_id)
    for label, ext in items:
        for n in lengths:
            ppl = perplexity(model, ext, corpus, n, workers)
            log.info("%s @%d: %.3f", label, n, ppl)
            report.add(n, label, ppl)
    return report


@dataclass(frozen=True)
class SamplingPolicy:
    kind: str = "greedy"
    p: float = 0.9
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("greedy", "top_p"):
            raise ValueError(f"unknown policy {self.kind!r}")
        if not 0 < self.p <= 1:
            raise ValueError("top-p must lie in (0, 1]")


def greedy_pick(logits: torch.Tensor) -> int:
    """Argmax with ties resolved toward the lowest token id."""
    best = logits.max()
    return int(torch.nonzero(logits == best)[0, 0])


def nucleus(probs: torch.Tensor, p: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Smallest highest-probability prefix whose mass reaches ``p``; returns (ids, renormalized probs)."""
    sorted_p, idx = torch.sort(probs, descending=True, stable=True)
    if p >= 1:
        return idx, sorted_p
    cum = torch.cumsum(sorted_p, 0)
    reach = torch.nonzero(cum >= p * (1 - 1e-12))
    keep = int(reach[0, 0]) + 1 if reach.numel() else probs.numel()
    kept = sorted_p[:keep]
    return idx[:keep], kept / kept.sum()


def generate(model: Transformer, ext: ExtensionConfig | None, prompt: Sequence[int],
             policy: SamplingPolicy = SamplingPolicy(), max_new: int = 64,
             stop_ids: Iterable[int] = ()) -> list[int]:
    """Decode up to ``max_new`` tokens after ``prompt``; a stop id is emitted and ends generation."""
    if max_new < 1:
        raise ValueError("max_new must be >= 1")
    if not prompt:
        raise ValueError("prompt must contain at least one token")
    stops = set(stop_ids)
    gen = torch.Generator().manual_seed(policy.seed)
    cache = KVCache()
    model.eval()
    out: list[int] = []
    with torch.no_grad():
        logits = model(torch.tensor(list(prompt)), ext, cache)[-1]
        for _ in range(max_new):
            if policy.kind == "greedy":
                nxt = greedy_pick(logits)
            else:
                probs = torch.softmax(logits.double(), -1)
                ids, q = nucleus(probs, policy.p)
                nxt = int(ids[torch.multinomial(q, 1, generator=gen)])
            out.append(nxt)
            if nxt in stops:
                break
            logits = model(torch.tensor([nxt]), ext, cache)[-1]
    return out
