from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from ..errors import ConfigError

SIMILARITY_MODES = ("scaled_dot", "cosine")


@dataclass
class ModelConfig:
    """Network hyper-parameters; defaults are the desk-scale setting.

    The full-size network is ``num_query=900`` with 6 enhancer and 6 decoder
    layers and a wider ``d_model``.
    """

    d_model: int = 16
    n_heads: int = 2
    n_enhancer_layers: int = 2
    n_decoder_layers: int = 2
    num_query: int = 20
    n_feature_levels: int = 2
    deformable_points_per_head: int = 4
    ffn_dim: int = 32
    bias_prior: float = 0.01
    seed: int = 0
    vocab_size: int = 64
    patch_size: int = 4
    selection_similarity: str = "scaled_dot"
    text_positional: bool = True
    mask_cross_phrase: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.d_model <= 0 or self.n_heads <= 0 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} must be a positive multiple of n_heads {self.n_heads}")
        if self.d_model % 4:
            raise ConfigError("d_model must be divisible by 4 (anchor sine embedding)")
        if self.num_query < 1:
            raise ConfigError("num_query must be >= 1")
        if not 0.0 < self.bias_prior < 1.0:
            raise ConfigError(f"bias_prior must lie in (0, 1), got {self.bias_prior}")
        if self.n_feature_levels < 1 or self.n_enhancer_layers < 0 or self.n_decoder_layers < 1:
            raise ConfigError("need >= 1 feature level, >= 0 enhancer layers and >= 1 decoder layer")
        if self.selection_similarity not in SIMILARITY_MODES:
            raise ConfigError(f"selection_similarity must be one of {SIMILARITY_MODES}")
        if self.vocab_size < 3:
            raise ConfigError("vocab_size must cover the special tokens")

    @property
    def min_image_size(self) -> int:
        """Smallest H and W the image encoder accepts; 2**(levels+1) at the default patch size."""
        return self.patch_size * 2 ** (self.n_feature_levels - 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)
