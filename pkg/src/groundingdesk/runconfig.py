"""Everything a training or evaluation run needs, as one JSON-serializable record."""

from __future__ import annotations

import json
import subprocess
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import __version__
from .errors import ConfigError
from .losses import LossWeights
from .metrics.ap import DEFAULT_LENGTH_BUCKETS
from .metrics.grounding import DEFAULT_THRESHOLDS
from .model.config import ModelConfig


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-4
    eps: float = 1e-8
    steps: int = 1000

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.lr <= 0 or self.steps < 0:
            raise ConfigError("optimizer needs lr > 0 and steps >= 0")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError(f"betas must be two values in [0, 1), got {self.betas}")


@dataclass
class MetricConfig:
    phrase_score: str = "max"  # or "mean": reduction of token probabilities to a phrase score
    flickr_protocol: str = "any"  # or "merged"
    recall_ks: tuple[int, ...] = (1, 5, 10)
    d3_buckets: tuple = DEFAULT_LENGTH_BUCKETS
    gref_thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    score_floor: float = 0.0
    max_dets: int = 100

    def __post_init__(self):
        self.recall_ks = tuple(int(k) for k in self.recall_ks)
        self.d3_buckets = tuple((str(n), lo, float(hi)) for n, lo, hi in self.d3_buckets)
        self.gref_thresholds = tuple(float(t) for t in self.gref_thresholds)
        if self.phrase_score not in ("max", "mean"):
            raise ConfigError(f"phrase_score must be 'max' or 'mean', got {self.phrase_score!r}")
        if self.flickr_protocol not in ("any", "merged"):
            raise ConfigError(f"flickr_protocol must be 'any' or 'merged', got {self.flickr_protocol!r}")
        if not 0.0 <= self.score_floor <= 1.0:
            raise ConfigError("score_floor must lie in [0, 1]")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    train_manifest: str | None = None
    eval_manifest: str | None = None
    out_dir: str = "runs/default"
    seed: int = 0
    max_text_len: int = 64
    log_every: int = 50

    def __post_init__(self):
        self.model.seed = self.seed

    def with_seed(self, seed: int) -> "RunConfig":
        data = self.to_dict()
        data["seed"] = seed
        return RunConfig.from_dict(data)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict, base_dir: str | Path | None = None) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        data = dict(data)
        try:
            parts = {
                "model": ModelConfig.from_dict(data.pop("model", {})),
                "loss": LossWeights(**data.pop("loss", {})),
                "optimizer": OptimizerConfig(**data.pop("optimizer", {})),
                "metrics": MetricConfig(**data.pop("metrics", {})),
            }
        except TypeError as exc:
            raise ConfigError(f"bad run config: {exc}") from exc
        if base_dir is not None:
            for key in ("train_manifest", "eval_manifest"):
                if data.get(key) and not Path(data[key]).is_absolute():
                    data[key] = str(Path(base_dir) / data[key])
        return cls(**parts, **data)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except ValueError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(data, base_dir=path.parent)


def version_string() -> str:
    """``v<version>`` plus the source checkout's abbreviated commit, when there is one."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--abbrev=10"], cwd=here,
                             capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return f"v{__version__}"
    sha = out.stdout.strip()
    return f"v{__version__}-g{sha}" if out.returncode == 0 and sha else f"v{__version__}"
