"""Byte-level BPE tokenizer with single-digit pre-tokenization.

The vocabulary is a ranked table of byte sequences (a token's id *is* its
rank) plus a registry of special tokens whose ids follow the ranks. Rank
files use one ``<base64 bytes> <rank>`` pair per line.
"""

from __future__ import annotations

import base64
import heapq
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import regex

# Word / whitespace / punctuation chunking with leading-space attachment.
# Numbers are never grouped: every \p{N} character is its own chunk.
PRETOKENIZE_PATTERN = (
    r"""'(?i:[sdmt]|ll|ve|re)"""
    r"""|[^\r\n\p{L}\p{N}]?+\p{L}+"""
    r"""|\p{N}"""
    r"""| ?[^\s\p{L}\p{N}]++[\r\n]*"""
    r"""|\s*[\r\n]"""
    r"""|\s+(?!\S)"""
    r"""|\s+"""
)
_CHUNK_RE = regex.compile(PRETOKENIZE_PATTERN)

ENDOFTEXT = "<|endoftext|>"
IM_START = "<|im_start|>"
IM_END = "<|im_end|>"
DEFAULT_SPECIALS = (ENDOFTEXT, IM_START, IM_END)


class VocabularyError(ValueError):
    """Base class for rank-file and vocabulary problems."""


class RankFileParseError(VocabularyError):
    def __init__(self, lineno: int, line: str, reason: str):
        super().__init__(f"line {lineno}: {reason}: {line!r}")
        self.lineno = lineno


class VocabularyIntegrityError(VocabularyError):
    pass


def _as_bytes(text: str | bytes) -> bytes:
    if isinstance(text, str):
        return text.encode("utf-8", errors="surrogateescape")
    return bytes(text)


@dataclass(frozen=True, eq=False)
class Vocabulary:
    merges: dict[bytes, int]
    specials: dict[str, int]
    _decoder: dict[int, bytes] = field(init=False, repr=False)
    _special_re: regex.Pattern | None = field(init=False, repr=False)
    _cache: dict[bytes, tuple[int, ...]] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        n = len(self.merges)
        ranks = sorted(self.merges.values())
        if ranks != list(range(n)):
            seen: set[int] = set()
            for r in ranks:
                if r in seen:
                    raise VocabularyIntegrityError(f"duplicate rank {r}")
                seen.add(r)
            raise VocabularyIntegrityError("ranks are not dense in [0, base_vocab_size)")
        for b in range(256):
            if bytes([b]) not in self.merges:
                raise VocabularyIntegrityError(f"missing single-byte token 0x{b:02x}")
        ids = sorted(self.specials.values())
        if ids != list(range(n, n + len(ids))):
            raise VocabularyIntegrityError("special-token ids must follow the merge ranks densely")
        decoder = {r: tok for tok, r in self.merges.items()}
        for text, i in self.specials.items():
            decoder[i] = text.encode("utf-8")
        object.__setattr__(self, "_decoder", decoder)
        if self.specials:
            alts = sorted(self.specials, key=len, reverse=True)
            pat = regex.compile("|".join(regex.escape(s) for s in alts))
        else:
            pat = None
        object.__setattr__(self, "_special_re", pat)
        object.__setattr__(self, "_cache", {})

    @property
    def base_vocab_size(self) -> int:
        return len(self.merges)

    @property
    def size(self) -> int:
        return len(self.merges) + len(self.specials)

    def special_id(self, text: str) -> int:
        try:
            return self.specials[text]
        except KeyError:
            raise KeyError(f"special token {text!r} is not registered") from None

    def token_bytes(self, token_id: int) -> bytes:
        try:
            return self._decoder[token_id]
        except KeyError:
            raise ValueError(f"unknown token id {token_id}") from None

    def with_specials(self, special_tokens: Sequence[str]) -> Vocabulary:
        n = self.base_vocab_size
        return Vocabulary(dict(self.merges), {s: n + i for i, s in enumerate(special_tokens)})

    def same_tables(self, other: Vocabulary) -> bool:
        return self.merges == other.merges and self.specials == other.specials


@dataclass(frozen=True)
class TokenStream:
    ids: tuple[int, ...]
    byte_len: int

    def __len__(self) -> int:
        return len(self.ids)


def byte_vocabulary(special_tokens: Sequence[str] = DEFAULT_SPECIALS) -> Vocabulary:
    merges = {bytes([b]): b for b in range(256)}
    return Vocabulary(merges, {s: 256 + i for i, s in enumerate(special_tokens)})


def load_vocabulary(rank_file: str | Path | Iterable[str],
                    special_tokens: Sequence[str] = DEFAULT_SPECIALS) -> Vocabulary:
    """Read a rank file and append ``special_tokens`` after the highest rank."""
    if isinstance(rank_file, (str, Path)):
        with open(rank_file, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    else:
        lines = list(rank_file)
    merges: dict[bytes, int] = {}
    seen_ranks: set[int] = set()
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise RankFileParseError(lineno, raw, "expected '<base64> <rank>'")
        try:
            tok = base64.b64decode(parts[0], validate=True)
        except ValueError:
            raise RankFileParseError(lineno, raw, "invalid base64") from None
        if not parts[1].isdigit():
            raise RankFileParseError(lineno, raw, "rank is not a decimal integer")
        rank = int(parts[1])
        if rank in seen_ranks:
            raise VocabularyIntegrityError(f"duplicate rank {rank} (line {lineno})")
        if tok in merges:
            raise VocabularyIntegrityError(f"duplicate token bytes (line {lineno})")
        seen_ranks.add(rank)
        merges[tok] = rank
    n = len(merges)
    return Vocabulary(merges, {s: n + i for i, s in enumerate(special_tokens)})


def save_vocabulary(v: Vocabulary, path: str | Path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for tok, rank in sorted(v.merges.items(), key=lambda kv: kv[1]):
            fh.write(f"{base64.b64encode(tok).decode('ascii')} {rank}\n")


def pretokenize(text: str | bytes) -> list[bytes]:
    """Split into chunks that BPE merges never cross.

    Invalid UTF-8 is carried through via surrogate escapes, so the chunks of
    any byte string concatenate back to it exactly.
    """
    if isinstance(text, (bytes, bytearray)):
        text = bytes(text).decode("utf-8", errors="surrogateescape")
    return [m.encode("utf-8", errors="surrogateescape") for m in _CHUNK_RE.findall(text)]


def _bpe(v: Vocabulary, chunk: bytes) -> tuple[int, ...]:
    cached = v._cache.get(chunk)
    if cached is not None:
        return cached
    merges = v.merges
    if chunk in merges:
        out: tuple[int, ...] = (merges[chunk],)
    else:
        parts = [chunk[i:i + 1] for i in range(len(chunk))]
        while len(parts) > 1:
            best_rank = None
            best_i = -1
            for i in range(len(parts) - 1):
                r = merges.get(parts[i] + parts[i + 1])
                if r is not None and (best_rank is None or r < best_rank):
                    best_rank, best_i = r, i
            if best_rank is None:
                break
            parts[best_i:best_i + 2] = [parts[best_i] + parts[best_i + 1]]
        out = tuple(merges[p] for p in parts)
    v._cache[chunk] = out
    return out


def _encode_ordinary(v: Vocabulary, text: str | bytes, out: list[int]) -> None:
    for chunk in pretokenize(text):
        out.extend(_bpe(v, chunk))


def encode(v: Vocabulary, text: str | bytes, allow_specials: bool = False) -> TokenStream:
    """Encode text (or raw bytes) with lowest-rank-first merging per chunk."""
    data = _as_bytes(text)
    ids: list[int] = []
    if allow_specials and v._special_re is not None:
        s = data.decode("utf-8", errors="surrogateescape")
        pos = 0
        for m in v._special_re.finditer(s):
            _encode_ordinary(v, s[pos:m.start()], ids)
            ids.append(v.specials[m.group()])
            pos = m.end()
        _encode_ordinary(v, s[pos:], ids)
    else:
        _encode_ordinary(v, data, ids)
    return TokenStream(tuple(ids), len(data))


def decode(v: Vocabulary, ids: Iterable[int]) -> bytes:
    return b"".join(v.token_bytes(int(i)) for i in ids)


def train_vocabulary(corpus: Iterable[str | bytes], target_size: int,
                     special_tokens: Sequence[str] = DEFAULT_SPECIALS) -> Vocabulary:
    """Greedy most-frequent-pair BPE training.

    Ties between equally frequent pairs go to the lexicographically smallest
    ``(left, right)`` byte pair. Stops early once no pair occurs twice.
    """
    if target_size < 256:
        raise ValueError(f"target_size must be >= 256, got {target_size}")
    chunk_counts: Counter[bytes] = Counter()
    for doc in corpus:
        chunk_counts.update(pretokenize(doc))

    words: list[list[bytes]] = []
    freqs: list[int] = []
    for chunk, n in sorted(chunk_counts.items()):
        words.append([chunk[i:i + 1] for i in range(len(chunk))])
        freqs.append(n)

    pair_counts: defaultdict[tuple[bytes, bytes], int] = defaultdict(int)
    where: defaultdict[tuple[bytes, bytes], set[int]] = defaultdict(set)
    for wi, w in enumerate(words):
        for a, b in zip(w, w[1:]):
            pair_counts[(a, b)] += freqs[wi]
            where[(a, b)].add(wi)
    heap = [(-n, pair) for pair, n in pair_counts.items()]
    heapq.heapify(heap)

    merges = {bytes([b]): b for b in range(256)}
    while len(merges) < target_size and heap:
        neg, pair = heapq.heappop(heap)
        current = pair_counts.get(pair, 0)
        if -neg != current:
            if current > 0:
                heapq.heappush(heap, (-current, pair))
            continue
        if current < 2:
            break
        new_tok = pair[0] + pair[1]
        if new_tok in merges:
            # Same bytes reachable by a different split; nothing new to learn.
            pair_counts.pop(pair, None)
            continue
        merges[new_tok] = len(merges)
        touched: set[tuple[bytes, bytes]] = set()
        for wi in list(where.pop(pair, ())):
            w = words[wi]
            f = freqs[wi]
            for a, b in zip(w, w[1:]):
                pair_counts[(a, b)] -= f
                touched.add((a, b))
            merged: list[bytes] = []
            i = 0
            while i < len(w):
                if i + 1 < len(w) and w[i] == pair[0] and w[i + 1] == pair[1]:
                    merged.append(new_tok)
                    i += 2
                else:
                    merged.append(w[i])
                    i += 1
            words[wi] = merged
            for a, b in zip(merged, merged[1:]):
                pair_counts[(a, b)] += f
                where[(a, b)].add(wi)
                touched.add((a, b))
        for p in touched:
            n = pair_counts.get(p, 0)
            if n <= 0:
                pair_counts.pop(p, None)
            else:
                heapq.heappush(heap, (-n, p))
        pair_counts.pop(pair, None)

    n = len(merges)
    return Vocabulary(merges, {s: n + i for i, s in enumerate(special_tokens)})


def compression_rate(v: Vocabulary, corpus: Iterable[str | bytes], baseline: Vocabulary) -> float:
    """Tokens under ``baseline`` divided by tokens under ``v``; > 1 means ``v`` is tighter."""
    ours = theirs = 0
    docs = 0
    for doc in corpus:
        docs += 1
        ours += len(encode(v, doc).ids)
        theirs += len(encode(baseline, doc).ids)
    if docs == 0:
        raise ValueError("compression_rate needs a nonempty corpus")
    if ours == 0:
        raise ValueError("corpus encodes to zero tokens")
    return theirs / ours
