"""Binary checkpoint format.

Layout (little-endian)::

    b"QWMC" | u32 version | u32 tensor_count
    per tensor: u32 name_len | name (UTF-8) | u8 dtype (0=fp32, 1=fp64) | u8 rank
                | u64 dims[rank] | raw row-major data

The model configuration travels next to the weights as ``<path>.json``.
"""

from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig
from .model import Transformer

MAGIC = b"QWMC"
VERSION = 1
_DTYPE_CODES = {torch.float32: 0, torch.float64: 1}
_NP_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


def config_path(path: str | Path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".json")


def write_tensors(tensors: "OrderedDict[str, torch.Tensor]", fh) -> None:
    fh.write(MAGIC)
    fh.write(struct.pack("<II", VERSION, len(tensors)))
    for name, t in tensors.items():
        if t.dtype not in _DTYPE_CODES:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {t.dtype}")
        raw = name.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<BB", _DTYPE_CODES[t.dtype], t.dim()))
        fh.write(struct.pack(f"<{t.dim()}Q", *t.shape))
        arr = t.detach().cpu().contiguous().numpy()
        fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C"))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(
                f"file ends at byte {len(self.data)} while reading {what} (needed {n} bytes at {self.pos})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_tensors(data: bytes) -> "OrderedDict[str, torch.Tensor]":
    r = _Reader(data)
    if len(data) < 4:
        raise TruncatedCheckpointError("file shorter than the magic number")
    if r.take(4, "magic") != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this build reads {VERSION}")
    out: OrderedDict[str, torch.Tensor] = OrderedDict()
    for i in range(count):
        (n,) = r.unpack("<I", f"name length of tensor {i}")
        name = r.take(n, f"name of tensor {i}").decode("utf-8")
        code, rank = r.unpack("<BB", f"dtype/rank of {name!r}")
        if code not in _NP_DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name!r}")
        dims = r.unpack(f"<{rank}Q", f"dims of {name!r}") if rank else ()
        dt = _NP_DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(r.take(nbytes, f"data of {name!r}"), dtype=dt).reshape(dims)
        out[name] = torch.from_numpy(arr.astype(dt.newbyteorder("="), copy=True))
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after {count} tensors")
    return out


def save_checkpoint(model: Transformer, cfg: ModelConfig, path: str | Path) -> None:
    buf = io.BytesIO()
    write_tensors(OrderedDict(model.state_dict()), buf)
    Path(path).write_bytes(buf.getvalue())
    with open(config_path(path), "w", encoding="utf-8") as fh:
        json.dump(asdict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_config(path: str | Path) -> ModelConfig:
    cp = config_path(path)
    if not cp.exists():
        raise CheckpointError(f"missing model config {cp}")
    with open(cp, encoding="utf-8") as fh:
        return ModelConfig(**json.load(fh))


def load_checkpoint(path: str | Path) -> tuple[Transformer, ModelConfig]:
    cfg = load_config(path)
    tensors = read_tensors(Path(path).read_bytes())
    model = Transformer(cfg)
    missing, unexpected = model.load_state_dict(tensors, strict=False)
    if missing or unexpected:
        raise CheckpointError(f"tensor names do not match the config: missing={missing} unexpected={unexpected}")
    model.eval()
    return model, cfg
