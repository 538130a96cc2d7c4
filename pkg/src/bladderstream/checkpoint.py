"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"BSCK"  uint32 format_version  uint32 header_len  header (UTF-8 JSON, sorted keys)
    uint32 n_tensors
    per tensor: uint16 name_len, name, uint8 ndim, uint32 dims[ndim], float32 data (row-major)

The header carries the model config, ratio pairs, normalisation statistics,
training summary and seed, so inference needs nothing else.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ValidationError
from .features import DEFAULT_RATIO_EPS, DEFAULT_RATIO_PAIRS, NormStats, validate_pairs
from .model import TENSOR_NAMES, ModelConfig, ModelWeights

MAGIC = b"BSCK"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    weights: ModelWeights
    norm: NormStats
    variant: str = "segment"
    pairs: tuple = DEFAULT_RATIO_PAIRS
    ratio_eps: float = DEFAULT_RATIO_EPS
    seed: int = 0
    train_summary: dict = field(default_factory=dict)

    def header(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "model_config": self.config.to_dict(),
            "variant": self.variant,
            "ratio_pairs": [list(p) for p in self.pairs],
            "ratio_eps": self.ratio_eps,
            "norm": self.norm.to_dict(),
            "seed": self.seed,
            "train": self.train_summary,
        }


def to_bytes(ckpt: Checkpoint) -> bytes:
    ckpt.weights.check(ckpt.config)
    header = json.dumps(ckpt.header(), sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(header)), header]
    tensors = ckpt.weights.tensors()
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def from_bytes(data: bytes) -> Checkpoint:
    try:
        return _parse(memoryview(data))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None


def _parse(buf: memoryview) -> Checkpoint:
    if bytes(buf[:4]) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12
    header = json.loads(bytes(buf[off:off + hlen]).decode())
    off += hlen
    try:
        config = ModelConfig.from_dict(header["model_config"])
        pairs = validate_pairs(header["ratio_pairs"])
    except ValidationError as exc:
        raise CheckpointError(f"invalid header: {exc}") from None
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = bytes(buf[off:off + nlen]).decode()
        off += nlen
        if name not in TENSOR_NAMES or name in tensors:
            raise CheckpointError(f"unexpected tensor {name!r}")
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        nbytes = 4 * size
        if off + nbytes > len(buf):
            raise CheckpointError(f"truncated data for tensor {name!r}")
        arr = np.frombuffer(buf[off:off + nbytes], dtype="<f4").reshape(shape)
        tensors[name] = arr.astype(np.float64)
        off += nbytes
    if off != len(buf):
        raise CheckpointError(f"{len(buf) - off} trailing bytes")
    try:
        weights = ModelWeights.from_tensors(tensors)
        weights.check(config)
    except (TypeError, ValidationError) as exc:
        raise CheckpointError(f"weights incompatible with config: {exc}") from None
    norm = NormStats.from_dict(header["norm"])
    if norm.mean.shape != (config.d_in,) or norm.std.shape != (config.d_in,):
        raise CheckpointError("normalisation statistics do not match d_in")
    return Checkpoint(config=config, weights=weights, norm=norm, variant=header["variant"],
                      pairs=pairs, ratio_eps=float(header["ratio_eps"]), seed=int(header["seed"]),
                      train_summary=header["train"])


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
