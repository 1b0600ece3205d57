"""Unified annotation files: JSONL, one GroundingSample per line."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Iterable

from ..errors import DataError, ParseError
from .samples import GroundingSample

log = logging.getLogger(__name__)


def write_unified(path: str | Path, samples: Iterable[GroundingSample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_dict(), sort_keys=True, ensure_ascii=False) + "\n")


def load_unified(path: str | Path, clamp: bool = True) -> list[GroundingSample]:
    """Read and validate every record.

    Any malformed record aborts the load with its line number and byte offset.
    Boxes poking outside the image are clamped (with a warning) unless
    ``clamp`` is false.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"annotation file {path} does not exist")
    samples = []
    clamped = 0
    offset = 0
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.decode("utf-8").strip()
            if text:
                try:
                    record = json.loads(text)
                    if not isinstance(record, dict):
                        raise DataError("record is not a JSON object")
                    sample = GroundingSample.from_dict(record)
                    clamped += sample.validate(clamp=clamp)
                except (ValueError, DataError) as exc:
                    raise ParseError(f"{path.name}: {exc}", line=lineno, offset=offset) from exc
                samples.append(sample)
            offset += len(raw)
    if clamped:
        log.warning("%s: clamped %d boxes to image bounds", path.name, clamped)
    return samples
