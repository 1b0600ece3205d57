"""Unified annotation records shared by OVD, phrase-grounding and REC data."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any

from ..errors import AnnotationError, DataError

log = logging.getLogger(__name__)

TASKS = ("OVD", "PG", "REC")
SCHEMA_VERSION = 1


@dataclass
class Instance:
    box: tuple[float, float, float, float]  # absolute xyxy pixels
    category_id: int | None = None
    phrase_id: int | None = None

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"box": list(self.box)}
        if self.category_id is not None:
            out["category_id"] = self.category_id
        if self.phrase_id is not None:
            out["phrase_id"] = self.phrase_id
        return out


@dataclass
class Phrase:
    """A character span ``caption[start:end]`` that instances can refer to."""

    id: int
    start: int
    end: int

    def to_dict(self) -> dict[str, int]:
        return {"id": self.id, "start": self.start, "end": self.end}


@dataclass
class GroundingSample:
    image_id: int | str
    width: int
    height: int
    task: str
    caption: str | None = None
    categories: list[str] | None = None
    phrases: list[Phrase] = field(default_factory=list)
    instances: list[Instance] = field(default_factory=list)
    split: str = "train"
    image: str | None = None

    def phrase_text(self, phrase_id: int) -> str:
        for p in self.phrases:
            if p.id == phrase_id:
                return self.caption[p.start:p.end]
        raise AnnotationError(f"sample {self.image_id}: no phrase with id {phrase_id}")

    def validate(self, clamp: bool = True) -> int:
        """Check the record invariants; returns how many boxes were clamped."""
        if self.task not in TASKS:
            raise AnnotationError(f"sample {self.image_id}: unknown task {self.task!r}")
        if self.width <= 0 or self.height <= 0:
            raise AnnotationError(f"sample {self.image_id}: non-positive image size")
        if self.task == "OVD":
            if not self.categories:
                raise AnnotationError(f"sample {self.image_id}: OVD sample needs a category list")
        elif self.caption is None:
            raise AnnotationError(f"sample {self.image_id}: {self.task} sample needs a caption")
        phrase_ids = {p.id for p in self.phrases}
        for p in self.phrases:
            if not (0 <= p.start < p.end <= len(self.caption or "")):
                raise AnnotationError(f"sample {self.image_id}: phrase {p.id} span out of caption")
        clamped = 0
        for k, inst in enumerate(self.instances):
            x1, y1, x2, y2 = inst.box
            if not (x2 > x1 and y2 > y1):
                raise AnnotationError(f"sample {self.image_id}: instance {k} has degenerate box {inst.box}")
            if self.task == "OVD":
                if inst.category_id is None or not 0 <= inst.category_id < len(self.categories):
                    raise AnnotationError(f"sample {self.image_id}: instance {k} needs a valid category_id")
            elif inst.phrase_id not in phrase_ids:
                raise AnnotationError(f"sample {self.image_id}: instance {k} refers to unknown phrase {inst.phrase_id}")
            fixed = (max(0.0, x1), max(0.0, y1), min(float(self.width), x2), min(float(self.height), y2))
            if fixed != tuple(inst.box):
                if not clamp:
                    raise AnnotationError(f"sample {self.image_id}: instance {k} outside image bounds")
                if not (fixed[2] > fixed[0] and fixed[3] > fixed[1]):
                    raise AnnotationError(f"sample {self.image_id}: instance {k} lies outside the image")
                log.warning("sample %s: clamped box %s to %s", self.image_id, inst.box, fixed)
                inst.box = fixed
                clamped += 1
        return clamped

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "schema_version": SCHEMA_VERSION,
            "image_id": self.image_id,
            "width": self.width,
            "height": self.height,
            "task": self.task,
            "split": self.split,
            "instances": [i.to_dict() for i in self.instances],
        }
        if self.caption is not None:
            out["caption"] = self.caption
        if self.categories is not None:
            out["categories"] = list(self.categories)
        if self.phrases:
            out["phrases"] = [p.to_dict() for p in self.phrases]
        if self.image is not None:
            out["image"] = self.image
        return out

    @classmethod
    def from_dict(cls, record: dict[str, Any]) -> "GroundingSample":
        version = record.get("schema_version")
        if version != SCHEMA_VERSION:
            raise DataError(f"unsupported schema_version {version!r}")
        try:
            instances = [
                Instance(tuple(float(v) for v in i["box"]), i.get("category_id"), i.get("phrase_id"))
                for i in record.get("instances", [])
            ]
            for inst in instances:
                if len(inst.box) != 4:
                    raise DataError(f"box must have 4 coordinates, got {inst.box}")
            return cls(
                image_id=record["image_id"],
                width=int(record["width"]),
                height=int(record["height"]),
                task=record["task"],
                caption=record.get("caption"),
                categories=record.get("categories"),
                phrases=[Phrase(int(p["id"]), int(p["start"]), int(p["end"])) for p in record.get("phrases", [])],
                instances=instances,
                split=record.get("split", "train"),
                image=record.get("image"),
            )
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed sample record: {exc!r}") from exc
