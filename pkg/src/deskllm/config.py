"""Configuration records shared by the model, trainer, evaluator and CLI."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

PRECISIONS = ("fp32", "fp64")
NTK_MODES = ("off", "static", "dynamic")


def default_ffn_hidden(hidden: int) -> int:
    """8/3 of ``hidden`` rounded up to a multiple of 8."""
    return int(math.ceil(8 * hidden / 3 / 8) * 8)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    hidden: int
    n_heads: int
    n_layers: int
    train_context: int
    ffn_hidden: int = 0
    rope_base: float = 10000.0
    tie_embeddings: bool = False
    precision: str = "fp32"
    norm_eps: float = 1e-6

    def __post_init__(self) -> None:
        if self.ffn_hidden == 0:
            object.__setattr__(self, "ffn_hidden", default_ffn_hidden(self.hidden))
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be positive")
        if self.n_heads < 1 or self.hidden % self.n_heads:
            raise ValueError(f"hidden={self.hidden} is not divisible by n_heads={self.n_heads}")
        if self.head_dim % 2:
            raise ValueError(f"head_dim={self.head_dim} must be even for rotary pairs")
        if self.ffn_hidden <= 0:
            raise ValueError("ffn_hidden must be positive")
        if self.train_context < 1:
            raise ValueError("train_context must be >= 1")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.rope_base <= 0:
            raise ValueError("rope_base must be positive")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {PRECISIONS}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.n_heads


@dataclass(frozen=True)
class ExtensionConfig:
    """Which training-free long-context techniques are active.

    ``ntk_chunk`` and ``train_context`` default to the model's training
    length when left as ``None``. ``windows`` is an explicit per-layer list;
    ``window_range`` asks for a generated schedule between two sizes and
    ``auto_windows`` for one with the default sizes.
    """

    ntk_mode: str = "off"
    ntk_scale: float = 1.0
    ntk_chunk: int | None = None
    logn: bool = False
    windows: tuple[int, ...] | None = None
    window_range: tuple[int, int] | None = None
    auto_windows: bool = False
    train_context: int | None = None

    def __post_init__(self) -> None:
        if self.ntk_mode not in NTK_MODES:
            raise ValueError(f"ntk_mode must be one of {NTK_MODES}, got {self.ntk_mode!r}")
        if self.ntk_scale < 1:
            raise ValueError("static NTK scale must be >= 1")
        if self.ntk_chunk is not None and self.ntk_chunk < 1:
            raise ValueError("ntk_chunk must be >= 1")
        if self.windows is not None:
            object.__setattr__(self, "windows", tuple(int(w) for w in self.windows))
            if any(w < 1 for w in self.windows):
                raise ValueError("window sizes must be >= 1")
            if any(b < a for a, b in zip(self.windows, self.windows[1:])):
                raise ValueError("window sizes must be non-decreasing from layer 0 upward")
        if self.window_range is not None:
            lo, hi = (int(x) for x in self.window_range)
            object.__setattr__(self, "window_range", (lo, hi))
            if lo < 1 or hi < lo:
                raise ValueError("window_range needs 1 <= w_min <= w_max")

    @property
    def is_off(self) -> bool:
        return (self.ntk_mode == "off" and not self.logn and not self.has_windows)

    @property
    def has_windows(self) -> bool:
        return self.windows is not None or self.window_range is not None or self.auto_windows

    @classmethod
    def parse(cls, ntk: str = "off", logn: bool = False, windows: str | None = None) -> ExtensionConfig:
        """Build from CLI-style strings: ``off|static:S|dynamic:CHUNK`` and ``w0,w1,..|auto[:MIN:MAX]``."""
        kw: dict[str, Any] = {"logn": logn}
        head, _, arg = ntk.partition(":")
        if head == "off":
            kw["ntk_mode"] = "off"
        elif head == "static":
            kw.update(ntk_mode="static", ntk_scale=float(arg))
        elif head == "dynamic":
            kw.update(ntk_mode="dynamic", ntk_chunk=int(arg) if arg else None)
        else:
            raise ValueError(f"bad --ntk value {ntk!r}")
        if windows:
            if windows.startswith("auto"):
                parts = windows.split(":")
                if len(parts) == 3:
                    kw["window_range"] = (int(parts[1]), int(parts[2]))
                elif len(parts) == 1:
                    kw["auto_windows"] = True
                else:
                    raise ValueError(f"bad --windows value {windows!r}")
            else:
                kw["windows"] = tuple(int(w) for w in windows.split(","))
        return cls(**kw)

    @classmethod
    def from_label(cls, label: str, ntk_chunk: int | None = None,
                   window_range: tuple[int, int] | None = None) -> ExtensionConfig:
        """Technique-set labels as used by the perplexity sweep: ``off``, ``ntk+logn+window`` ..."""
        parts = {p.strip() for p in label.split("+") if p.strip()}
        if parts == {"off"} or not parts:
            return cls()
        unknown = parts - {"ntk", "dynamic_ntk", "static_ntk", "logn", "window", "window_attn"}
        if unknown:
            raise ValueError(f"unknown technique(s) {sorted(unknown)} in {label!r}")
        kw: dict[str, Any] = {"logn": "logn" in parts}
        if parts & {"ntk", "dynamic_ntk"}:
            kw.update(ntk_mode="dynamic", ntk_chunk=ntk_chunk)
        if parts & {"window", "window_attn"}:
            if window_range is None:
                kw["auto_windows"] = True
            else:
                kw["window_range"] = window_range
        return cls(**kw)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ExtensionConfig:
        d = dict(d)
        if d.get("windows") is not None:
            d["windows"] = tuple(d["windows"])
        if d.get("window_range") is not None:
            d["window_range"] = tuple(d["window_range"])
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float = 3.0e-4
    warmup_steps: int = 100
    total_steps: int = 1000
    min_lr_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    batch_size: int = 16
    context: int = 256
    dropout: float = 0.0
    checkpoint_every: int = 0

    def __post_init__(self) -> None:
        if not 0 < self.min_lr_fraction <= 1:
            raise ValueError("min_lr_fraction must be in (0, 1]")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("need 0 <= warmup_steps <= total_steps")
        if self.context < 2:
            raise ValueError("context must be >= 2")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class EngineConfig:
    model: ModelConfig
    extension: ExtensionConfig = field(default_factory=ExtensionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    vocab: str | None = None
    checkpoint: str | None = None
    corpus: str | None = None
    seed: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "model": asdict(self.model),
            "extension": self.extension.to_dict(),
            "train": asdict(self.train),
            "paths": {"vocab": self.vocab, "checkpoint": self.checkpoint, "corpus": self.corpus},
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> EngineConfig:
        _check_keys("", d, ("model", "extension", "train", "paths", "seed"))
        for section, sub in (("model", ModelConfig), ("extension", ExtensionConfig), ("train", TrainConfig)):
            _check_keys(section + ".", d.get(section, {}), config_field_names(sub))
        paths = d.get("paths", {})
        _check_keys("paths.", paths, ("vocab", "checkpoint", "corpus"))
        if "model" not in d:
            raise ValueError("config has no 'model' section")
        return cls(
            model=ModelConfig(**d["model"]),
            extension=ExtensionConfig.from_dict(d.get("extension", {})),
            train=TrainConfig(**d.get("train", {})),
            vocab=paths.get("vocab"),
            checkpoint=paths.get("checkpoint"),
            corpus=paths.get("corpus"),
            seed=int(d.get("seed", 0)),
        )

    @classmethod
    def load(cls, path: str | Path) -> EngineConfig:
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


def apply_overrides(d: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    """Apply ``section.key=value`` strings to a config dict; values parse as JSON when they can."""
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ValueError(f"override {item!r} is not of the form key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = d
        path = key.split(".")
        for p in path[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ValueError(f"override {item!r} descends into a non-section")
        node[path[-1]] = value
    return d


def _check_keys(prefix: str, d: dict[str, Any], known) -> None:
    unknown = sorted(set(d) - set(known))
    if unknown:
        raise ValueError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")


def config_field_names(cls: type) -> list[str]:
    return [f.name for f in fields(cls)]
