"""Per-dataset manifest: one JSON document naming files and category metadata."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..errors import ConfigError, DataError, MetadataError
from .samples import TASKS

BUCKETS = ("r", "c", "f")
BUCKET_NAMES = {"r": "rare", "c": "common", "f": "frequent"}


@dataclass
class DatasetManifest:
    name: str
    task: str
    path: str  # unified JSONL, relative to the manifest's directory
    categories: list[str] = field(default_factory=list)
    frequency_buckets: dict[str, str] = field(default_factory=dict)  # category name -> r/c/f
    base: list[str] = field(default_factory=list)
    novel: list[str] = field(default_factory=list)
    absence: list[str] = field(default_factory=list)  # described-object entries phrased as absence
    chunk_size: int | None = None
    image_root: str = "."
    root: Path | None = field(default=None, repr=False, compare=False)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() or self.root is None else self.root / p

    @property
    def annotation_file(self) -> Path:
        return self.resolve(self.path)

    @property
    def image_dir(self) -> Path:
        return self.resolve(self.image_root)

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"manifest {self.name}: unknown task {self.task!r}")
        if self.chunk_size is not None and self.chunk_size <= 0:
            raise ConfigError(f"manifest {self.name}: chunk_size must be positive")
        if not self.annotation_file.exists():
            raise DataError(f"manifest {self.name}: annotation file {self.annotation_file} does not exist")
        if not self.image_dir.is_dir():
            raise DataError(f"manifest {self.name}: image root {self.image_dir} is not a directory")
        known = set(self.categories)
        if len(known) != len(self.categories):
            raise MetadataError(f"manifest {self.name}: duplicate category names")
        for cat, bucket in self.frequency_buckets.items():
            if cat not in known:
                raise MetadataError(f"manifest {self.name}: bucket for unknown category {cat!r}")
            if bucket not in BUCKETS:
                raise MetadataError(f"manifest {self.name}: bucket {bucket!r} for {cat!r} not in {BUCKETS}")
        stray = (set(self.base) | set(self.novel) | set(self.absence)) - known
        if stray:
            raise MetadataError(f"manifest {self.name}: partitions name unknown categories {sorted(stray)}")
        if set(self.base) & set(self.novel):
            raise MetadataError(f"manifest {self.name}: base and novel overlap")

    def bucket_ids(self) -> dict[int, str]:
        """Category index -> "rare" / "common" / "frequent"."""
        return {self.categories.index(c): BUCKET_NAMES[b] for c, b in self.frequency_buckets.items()}

    def split_ids(self) -> tuple[list[int], list[int]]:
        return [self.categories.index(c) for c in self.base], [self.categories.index(c) for c in self.novel]

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("root")
        return out

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, check: bool = True) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise DataError(f"manifest {path} does not exist")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
            manifest = cls(**data, root=path.parent)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"malformed manifest {path}: {exc}") from exc
        if check:
            manifest.validate()
        return manifest
