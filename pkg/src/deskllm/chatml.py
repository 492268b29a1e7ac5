"""ChatML conversations: rendering to masked token streams and parsing back.

Each turn is laid out as ``<|im_start|>{role}\\n{content}<|im_end|>\\n``.
Only assistant content and the assistant's ``<|im_end|>`` carry loss.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .tokenizer import IM_END, IM_START, Vocabulary, decode, encode

ROLES = ("system", "user", "assistant")


class ConversationError(ValueError):
    pass


class ChatParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (token offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Turn:
    role: str
    content: str


@dataclass(frozen=True)
class Conversation:
    turns: tuple[Turn, ...] = ()

    def __post_init__(self) -> None:
        turns = tuple(t if isinstance(t, Turn) else Turn(*t) for t in self.turns)
        object.__setattr__(self, "turns", turns)
        for i, t in enumerate(turns):
            if t.role not in ROLES:
                raise ConversationError(f"turn {i}: unknown role {t.role!r}")

    @classmethod
    def from_messages(cls, messages: Iterable[dict]) -> Conversation:
        return cls(tuple(Turn(m["role"], m["content"]) for m in messages))

    def to_messages(self) -> list[dict]:
        return [{"role": t.role, "content": t.content} for t in self.turns]


@dataclass(frozen=True)
class MaskedStream:
    ids: tuple[int, ...]
    mask: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.ids) != len(self.mask):
            raise ValueError("ids and mask lengths differ")

    def __len__(self) -> int:
        return len(self.ids)


def _check_content(conv: Conversation, v: Vocabulary) -> None:
    for i, t in enumerate(conv.turns):
        for special in v.specials:
            if special in t.content:
                raise ConversationError(f"turn {i} ({t.role}) contains special token text {special!r}")


def render(conv: Conversation, v: Vocabulary) -> MaskedStream:
    _check_content(conv, v)
    start, end = v.special_id(IM_START), v.special_id(IM_END)
    newline = encode(v, "\n").ids
    ids: list[int] = []
    mask: list[int] = []
    for t in conv.turns:
        head = (start, *encode(v, t.role).ids, *newline)
        body = (*encode(v, t.content).ids, end)
        trained = 1 if t.role == "assistant" else 0
        ids += head
        mask += [0] * len(head)
        ids += body
        mask += [trained] * len(body)
        ids += newline
        mask += [0] * len(newline)
    return MaskedStream(tuple(ids), tuple(mask))


def generation_prompt(conv: Conversation, v: Vocabulary) -> list[int]:
    """Rendered conversation followed by the assistant prelude ``<|im_start|>assistant\\n``."""
    if conv.turns and conv.turns[-1].role == "assistant":
        raise ConversationError("conversation already ends with an assistant turn")
    prelude = [v.special_id(IM_START), *encode(v, "assistant").ids, *encode(v, "\n").ids]
    return list(render(conv, v).ids) + prelude


def parse(ids: Sequence[int], v: Vocabulary) -> Conversation:
    start, end = v.special_id(IM_START), v.special_id(IM_END)
    newline = list(encode(v, "\n").ids)
    ids = list(ids)
    turns: list[Turn] = []
    i = 0
    n = len(ids)
    while i < n:
        if ids[i] != start:
            if i > 0 and ids[i - 1] == end and ids[i:i + len(newline)] == newline:
                i += len(newline)
                continue
            found = decode(v, ids[i:i + 1])
            raise ChatParseError(f"expected {IM_START} or the turn separator, found {found!r}", i)
        opened = i
        try:
            close = ids.index(end, i + 1)
        except ValueError:
            head = decode(v, ids[i + 1:]).partition(b"\n")[0].decode("utf-8", errors="replace")
            raise ChatParseError(f"{head or 'unnamed'} turn has no closing {IM_END}", opened) from None
        inner = ids[i + 1:close]
        if start in inner:
            raise ChatParseError(f"nested {IM_START} before the turn was closed", opened)
        text = decode(v, inner)
        role_b, sep, content_b = text.partition(b"\n")
        if not sep:
            raise ChatParseError("turn header lacks the newline after the role", opened)
        role = role_b.decode("utf-8", errors="replace")
        if role not in ROLES:
            raise ChatParseError(f"unknown role {role!r}", opened)
        turns.append(Turn(role, content_b.decode("utf-8", errors="surrogateescape")))
        i = close + 1
    return Conversation(tuple(turns))


def load_conversations(path: str | Path) -> list[Conversation]:
    """JSON lines, each an array of ``{"role", "content"}`` objects."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(Conversation.from_messages(json.loads(line)))
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise ConversationError(f"{path}:{lineno}: {exc}") from exc
    return out
