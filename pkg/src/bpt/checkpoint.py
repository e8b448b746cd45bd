"""Versioned binary checkpoints: JSON header + named float32 tensors.

Layout: 8-byte magic, u32 schema version, u32 header length, UTF-8 JSON header
(config echo, vocabulary, vocab hash, tensor manifest), then raw little-endian
float32 tensor data in manifest order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .corpus import Vocab
from .model import BreakpointModel, ModelConfig

MAGIC = b"BPTCKPT\x00"
SCHEMA_VERSION = 1


class CheckpointError(Exception):
    pass


def vocab_hash(vocab: Vocab) -> str:
    return hashlib.sha256("\n".join(vocab.tokens).encode("utf-8")).hexdigest()


def save_checkpoint(model: BreakpointModel, path: str | Path, extra: dict | None = None) -> None:
    path = Path(path)
    state = model.state_dict()
    manifest = [{"name": k, "shape": list(v.shape)} for k, v in state.items()]
    header = {
        "config": asdict(model.cfg),
        "vocab": list(model.vocab.tokens),
        "vocab_hash": vocab_hash(model.vocab),
        "tensors": manifest,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", SCHEMA_VERSION, len(blob)))
        fh.write(blob)
        for k, _ in ((m["name"], m) for m in manifest):
            fh.write(state[k].detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes())


def load_checkpoint(path: str | Path) -> BreakpointModel:
    path = Path(path)
    with path.open("rb") as fh:
        if fh.read(8) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != SCHEMA_VERSION:
            raise CheckpointError(f"{path}: unsupported schema version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        vocab = Vocab(tokens=tuple(header["vocab"]))
        if vocab_hash(vocab) != header["vocab_hash"]:
            raise CheckpointError(f"{path}: vocabulary hash mismatch")
        model = BreakpointModel(ModelConfig(**header["config"]), vocab)
        state = {}
        for entry in header["tensors"]:
            n = int(np.prod(entry["shape"])) if entry["shape"] else 1
            data = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(entry["shape"])
            state[entry["name"]] = torch.from_numpy(data.copy())
        model.load_state_dict(state)
    model.eval()
    return model


def checkpoint_extra(path: str | Path) -> dict:
    path = Path(path)
    with path.open("rb") as fh:
        if fh.read(8) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        _, hlen = struct.unpack("<II", fh.read(8))
        return json.loads(fh.read(hlen).decode("utf-8")).get("extra", {})


def file_hash(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
