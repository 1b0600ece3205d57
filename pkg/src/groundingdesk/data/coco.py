"""COCO detection JSON -> unified OVD samples."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import DanglingReferenceError, DataError
from .samples import GroundingSample, Instance

log = logging.getLogger(__name__)


@dataclass
class ConversionResult:
    samples: list[GroundingSample]
    categories: list[str]
    category_map: dict[int, int]  # source category id -> dense index
    dropped_crowd: int = 0
    clamped: int = 0
    notes: list[str] = field(default_factory=list)


def convert_coco_style(coco: dict | str | Path, split: str = "train") -> ConversionResult:
    """Convert COCO-format detection annotations.

    Boxes go from xywh to xyxy, category ids are remapped to ``0..K-1`` in
    ascending source-id order, and ``iscrowd`` annotations are dropped (and
    counted).  Images without annotations are kept as negatives.
    """
    if not isinstance(coco, dict):
        with open(coco, encoding="utf-8") as fh:
            coco = json.load(fh)
    try:
        cats = sorted(coco["categories"], key=lambda c: c["id"])
        images = coco["images"]
        anns = coco.get("annotations", [])
    except (KeyError, TypeError) as exc:
        raise DataError(f"not a COCO detection file: missing {exc}") from exc
    cat_map = {c["id"]: k for k, c in enumerate(cats)}
    names = [c["name"] for c in cats]
    by_image: dict = {}
    for img in images:
        by_image[img["id"]] = GroundingSample(
            image_id=img["id"], width=int(img["width"]), height=int(img["height"]), task="OVD",
            categories=list(names), split=split, image=img.get("file_name"),
        )
    dropped = 0
    for ann in anns:
        if ann["image_id"] not in by_image:
            raise DanglingReferenceError(f"annotation {ann.get('id')} refers to unknown image {ann['image_id']}")
        if ann["category_id"] not in cat_map:
            raise DanglingReferenceError(f"annotation {ann.get('id')} refers to unknown category {ann['category_id']}")
        if ann.get("iscrowd", 0):
            dropped += 1
            continue
        x, y, w, h = (float(v) for v in ann["bbox"])
        by_image[ann["image_id"]].instances.append(Instance((x, y, x + w, y + h), category_id=cat_map[ann["category_id"]]))
    clamped = sum(s.validate(clamp=True) for s in by_image.values())
    if dropped:
        log.info("dropped %d crowd annotations", dropped)
    return ConversionResult(list(by_image.values()), names, cat_map, dropped, clamped)
