"""Detection and ground-truth records plus the predictions.jsonl format."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from ..errors import DataError, ParseError

Key = tuple  # (image_id, label)


@dataclass(frozen=True)
class Detection:
    image_id: int | str
    box: tuple[float, float, float, float]  # absolute xyxy
    score: float
    label: int  # category id, phrase id or expression id depending on the protocol
    phrase_id: int | None = None

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x2 > x1 and y2 > y1):
            raise DataError(f"degenerate detection box {self.box}")
        if not math.isfinite(self.score):
            raise DataError(f"non-finite detection score {self.score}")

    def to_dict(self) -> dict:
        out = {"image_id": self.image_id, "box": [float(v) for v in self.box], "score": float(self.score),
               "label_id": self.label}
        if self.phrase_id is not None:
            out["phrase_id"] = self.phrase_id
        return out

    @classmethod
    def from_dict(cls, rec: dict) -> "Detection":
        return cls(rec["image_id"], tuple(float(v) for v in rec["box"]), float(rec["score"]),
                   rec["label_id"], rec.get("phrase_id"))


@dataclass(frozen=True)
class GroundTruthBox:
    image_id: int | str
    box: tuple[float, float, float, float]
    label: int


def group_by_key(items: Iterable) -> dict[Key, list]:
    out: dict[Key, list] = {}
    for it in items:
        out.setdefault((it.image_id, it.label), []).append(it)
    return out


def rank(dets: Sequence[Detection]) -> list[Detection]:
    """Score-descending; equal scores keep their input order."""
    return sorted(dets, key=lambda d: -d.score)


def write_predictions(path: str | Path, dets: Iterable[Detection]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in dets:
            fh.write(json.dumps(d.to_dict(), sort_keys=True) + "\n")


def read_predictions(path: str | Path) -> list[Detection]:
    out = []
    offset = 0
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.decode("utf-8").strip()
            if line:
                try:
                    out.append(Detection.from_dict(json.loads(line)))
                except (ValueError, KeyError, TypeError) as exc:
                    raise ParseError(f"bad prediction record: {exc}", line=lineno, offset=offset) from exc
            offset += len(raw)
    return out
