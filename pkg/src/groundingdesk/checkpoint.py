"""Checkpoints: a flat little-endian float64 blob plus a line-oriented text manifest.

Manifest layout::

    groundingdesk-checkpoint 1
    config {"d_model": 16, ...}
    vocab ["[PAD]", "[UNK]", ".", ...]
    param <name> <d0,d1,...> <offset>
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .model.config import ModelConfig
from .model.detector import GroundingDetector
from .text import Vocabulary

MAGIC = "groundingdesk-checkpoint"
FORMAT_VERSION = 1
BLOB = "model.bin"
MANIFEST = "model.manifest"
DTYPE = np.dtype("<f8")


@dataclass
class ParamEntry:
    name: str
    shape: tuple[int, ...]
    offset: int  # in elements

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


@dataclass
class CheckpointManifest:
    config: ModelConfig
    vocab: list[str]
    params: list[ParamEntry]

    @property
    def n_parameters(self) -> int:
        return sum(p.size for p in self.params)


def save_checkpoint(directory: str | Path, model: GroundingDetector, vocab: Vocabulary) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"{MAGIC} {FORMAT_VERSION}",
             "config " + json.dumps(model.config.to_dict(), sort_keys=True),
             "vocab " + json.dumps(vocab.tokens, ensure_ascii=False)]
    offset = 0
    chunks = []
    for name, p in model.named_parameters():
        shape = ",".join(str(d) for d in p.shape)
        lines.append(f"param {name} {shape} {offset}")
        chunks.append(np.ascontiguousarray(p.data, dtype=DTYPE).reshape(-1))
        offset += p.size
    blob = np.concatenate(chunks) if chunks else np.zeros(0, DTYPE)
    (directory / BLOB).write_bytes(blob.tobytes())
    (directory / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(directory: str | Path) -> CheckpointManifest:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise DataError(f"no checkpoint manifest at {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != f"{MAGIC} {FORMAT_VERSION}":
        raise DataError(f"{path}: unsupported checkpoint header {lines[:1]}")
    config = vocab = None
    params = []
    for lineno, line in enumerate(lines[1:], start=2):
        kind, _, rest = line.partition(" ")
        try:
            if kind == "config":
                config = ModelConfig.from_dict(json.loads(rest))
            elif kind == "vocab":
                vocab = json.loads(rest)
            elif kind == "param":
                name, shape, offset = rest.split(" ")
                dims = tuple(int(d) for d in shape.split(",")) if shape else ()
                params.append(ParamEntry(name, dims, int(offset)))
            elif line.strip():
                raise ValueError(f"unknown record {kind!r}")
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
    if config is None or vocab is None:
        raise DataError(f"{path}: missing config or vocab record")
    return CheckpointManifest(config, vocab, params)


def load_checkpoint(directory: str | Path) -> tuple[GroundingDetector, Vocabulary]:
    directory = Path(directory)
    manifest = read_manifest(directory)
    blob_path = directory / BLOB
    if not blob_path.exists():
        raise DataError(f"missing checkpoint blob {blob_path}")
    blob = np.frombuffer(blob_path.read_bytes(), dtype=DTYPE)
    if blob.size != manifest.n_parameters:
        raise DataError(f"checkpoint blob holds {blob.size} values, manifest expects {manifest.n_parameters}")
    model = GroundingDetector(manifest.config)
    state = {p.name: blob[p.offset:p.offset + p.size].reshape(p.shape).copy() for p in manifest.params}
    try:
        model.load_state_dict(state)
    except ConfigError as exc:
        raise ConfigError(f"checkpoint incompatible with model config: {exc}") from exc
    return model, Vocabulary(manifest.vocab)
