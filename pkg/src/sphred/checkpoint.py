"""Versioned checkpoint container: canonical JSON header + raw tensor bytes.

Layout: 8-byte magic, little-endian u64 header length, the UTF-8 JSON
header (sorted keys, no whitespace), then each tensor's float64 bytes in
the header's directory order.  The canonical encoding makes save -> load ->
save byte-identical.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .corpus import Vocab
from .model import ModelConfig, ParamSet, param_shapes

MAGIC = b"SPHREDC1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """The file is not a readable checkpoint or disagrees with its config."""


@dataclass
class Checkpoint:
    config: ModelConfig
    vocab: Vocab
    params: ParamSet
    seed: int
    provenance: dict

    def validate(self) -> None:
        expected = param_shapes(self.config)
        have = {k: tuple(a.shape) for k, a in self.params.items()}
        missing = sorted(set(expected) - set(have))
        extra = sorted(set(have) - set(expected))
        if missing or extra:
            raise CheckpointError(
                f"tensor directory mismatch: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if have[name] != tuple(shape):
                raise CheckpointError(
                    f"tensor {name}: shape {have[name]} but config requires {tuple(shape)}")
        if len(self.vocab) != self.config.vocab_size:
            raise CheckpointError(
                f"vocab has {len(self.vocab)} tokens, config says {self.config.vocab_size}")


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    ckpt.validate()
    names = sorted(ckpt.params.arrays)
    header = {
        "format_version": FORMAT_VERSION,
        "config": ckpt.config.to_dict(),
        "vocab": ckpt.vocab.tokens,
        "seed": int(ckpt.seed),
        "provenance": ckpt.provenance,
        "tensors": [{"name": n, "shape": list(ckpt.params[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(ckpt.params[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a checkpoint")
        (hlen,) = struct.unpack("<Q", f.read(8))
        try:
            header = json.loads(f.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"{path}: unreadable header: {e}") from e
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: format version {header.get('format_version')} unsupported")
        config = ModelConfig.from_dict(header["config"])
        arrays = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(count * 8)
            if len(raw) != count * 8:
                raise CheckpointError(f"{path}: truncated payload at {entry['name']}")
            arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        if f.read(1):
            raise CheckpointError(f"{path}: trailing bytes after payload")
    ckpt = Checkpoint(
        config=config,
        vocab=Vocab(header["vocab"]),
        params=ParamSet(arrays),
        seed=int(header["seed"]),
        provenance=header.get("provenance", {}),
    )
    ckpt.validate()
    return ckpt
