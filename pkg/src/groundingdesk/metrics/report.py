"""Evaluation report: flat metrics plus named partitions, as JSON or a text table."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path


def _clean(v):
    if isinstance(v, float) and math.isnan(v):
        return None
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    return v


@dataclass
class EvalReport:
    name: str
    metrics: dict[str, float] = field(default_factory=dict)
    partitions: dict[str, dict] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "metrics": _clean(self.metrics), "partitions": _clean(self.partitions),
                "counts": dict(self.counts)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        lines = [f"== {self.name} =="]
        width = max([len(k) for k in self.metrics] + [8])
        for k, v in self.metrics.items():
            lines.append(f"{k:<{width}}  {_fmt(v)}")
        for part, table in self.partitions.items():
            lines.append(f"-- {part} --")
            for k, v in table.items():
                if isinstance(v, dict):
                    lines.append(f"{str(k):<{width}}  " + "  ".join(f"{a}={_fmt(b)}" for a, b in v.items()))
                else:
                    lines.append(f"{str(k):<{width}}  {_fmt(v)}")
        for k, v in self.counts.items():
            lines.append(f"{k}: {v}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path, stem: str = "report") -> None:
        out = Path(out_dir)
        (out / f"{stem}.json").write_text(self.to_json(), encoding="utf-8")
        (out / f"{stem}.txt").write_text(self.to_text(), encoding="utf-8")


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "n/a"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)
