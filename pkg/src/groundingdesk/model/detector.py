"""Grounding detector: toy backbones, cross-modal fusion, query selection, decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..errors import ConfigError, DataError, ShapeError
from ..text import TokenizedCaption
from .config import ModelConfig
from .graph import Block, run_blocks
from .layers import (
    FFN,
    MLP,
    BiAttention,
    DeformableAttention,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    param,
    sequence_position_embedding,
    sine_embedding,
)

MASK_NEG = -1e9


@dataclass
class ImageFeatures:
    tokens: Tensor  # [n_img_tokens, d]
    spatial_shapes: list[tuple[int, int]]
    level_index: np.ndarray  # [n_img_tokens]
    reference_points: np.ndarray  # [n_img_tokens, 2], normalized (x, y) centres
    pos: Tensor  # [n_img_tokens, d]

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]

    def level_map(self, level: int) -> Tensor:
        """Feature map of one level as [d, H, W]."""
        start = sum(h * w for h, w in self.spatial_shapes[:level])
        H, W = self.spatial_shapes[level]
        return self.tokens[start:start + H * W].reshape(H, W, -1).transpose(2, 0, 1)


@dataclass
class QueryState:
    content: Tensor  # [num_query, d]
    anchors: Tensor  # [num_query, 4] normalized cxcywh


@dataclass
class SetPrediction:
    boxes: Tensor  # [num_query, 4] normalized cxcywh
    logits: Tensor  # [num_query, n_tokens]


@dataclass
class Prediction:
    decoder: list[SetPrediction]
    encoder: SetPrediction
    selected: np.ndarray

    @property
    def final(self) -> SetPrediction:
        return self.decoder[-1]

    @property
    def supervision_sets(self) -> list[SetPrediction]:
        """Every decoder layer, then the encoder output."""
        return [*self.decoder, self.encoder]


def _single(fn):
    return lambda *args: (fn(*args),)


def bias_init(prior: float) -> float:
    """Logit bias whose sigmoid equals ``prior``."""
    return -math.log((1.0 - prior) / prior)


def contrastive_embedding(visual: Tensor, text: Tensor, bias: Tensor | float) -> Tensor:
    """Token logits: scaled dot product of visual and text features plus a bias."""
    if visual.shape[-1] != text.shape[-1]:
        raise ShapeError(f"feature dims differ: visual {visual.shape} vs text {text.shape}")
    res = visual @ text.transpose(1, 0)
    res = res * (1.0 / math.sqrt(visual.shape[-1]))
    return res + bias


def top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` highest scores; equal scores keep the lower index first."""
    if k > scores.size:
        raise ConfigError(f"num_query {k} exceeds {scores.size} image tokens")
    return np.argsort(-scores, kind="stable")[:k]


def selection_scores(memory: np.ndarray, text: np.ndarray, mode: str, bias: float = 0.0) -> np.ndarray:
    if mode == "cosine":
        m = memory / np.maximum(np.linalg.norm(memory, axis=1, keepdims=True), 1e-12)
        t = text / np.maximum(np.linalg.norm(text, axis=1, keepdims=True), 1e-12)
        sim = m @ t.T
    elif mode == "scaled_dot":
        sim = memory @ text.T / math.sqrt(memory.shape[1]) + bias
    else:
        raise ConfigError(f"unknown similarity mode {mode!r}")
    return sim.max(axis=1)


class ContrastiveHead(Module):
    def __init__(self, prior: float):
        self.bias = param(np.array([bias_init(prior)]))

    def __call__(self, visual: Tensor, text: Tensor) -> Tensor:
        return contrastive_embedding(visual, text, self.bias)


class ImageEncoder(Module):
    """Patchify stem plus stride-2 merges, one projected feature map per level."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d, p = cfg.d_model, cfg.patch_size
        self.patch_size = p
        self.n_levels = cfg.n_feature_levels
        self.stem = Linear(3 * p * p, d, rng)
        self.merges = [Linear(4 * d, d, rng) for _ in range(cfg.n_feature_levels - 1)]
        self.proj = [Linear(d, d, rng) for _ in range(cfg.n_feature_levels)]
        self.level_embed = param(rng.normal(0.0, 0.1, (cfg.n_feature_levels, d)))

    def __call__(self, pixels: np.ndarray) -> ImageFeatures:
        pixels = np.asarray(pixels, dtype=np.float64)
        if pixels.ndim != 3 or pixels.shape[0] != 3:
            raise ShapeError(f"expected pixels [3, H, W], got {pixels.shape}")
        _, H, W = pixels.shape
        p = self.patch_size
        need = p * 2 ** (self.n_levels - 1)
        if H < need or W < need:
            raise ShapeError(f"image {H}x{W} smaller than {need}x{need} needed for {self.n_levels} levels")
        h, w = H // p, W // p
        patches = pixels[:, :h * p, :w * p].reshape(3, h, p, w, p).transpose(1, 3, 0, 2, 4).reshape(h * w, -1)
        x = ad.gelu(self.stem(Tensor(patches)))
        levels, shapes = [x], [(h, w)]
        for merge in self.merges:
            h2, w2 = h // 2, w // 2
            grid = x.reshape(h, w, -1)[:h2 * 2, :w2 * 2]
            grid = grid.reshape(h2, 2, w2, 2, -1).transpose(0, 2, 1, 3, 4).reshape(h2 * w2, -1)
            x = ad.gelu(merge(grid))
            h, w = h2, w2
            levels.append(x)
            shapes.append((h, w))
        tokens = ad.concat([proj(lv) for proj, lv in zip(self.proj, levels)], axis=0)
        level_index = np.concatenate([np.full(hh * ww, i) for i, (hh, ww) in enumerate(shapes)])
        refs = []
        for hh, ww in shapes:
            ys, xs = np.meshgrid((np.arange(hh) + 0.5) / hh, (np.arange(ww) + 0.5) / ww, indexing="ij")
            refs.append(np.stack([xs.reshape(-1), ys.reshape(-1)], axis=1))
        ref = np.concatenate(refs, axis=0)
        d = tokens.shape[1]
        pos = sine_embedding(ref, d // 2) + self.level_embed[level_index]
        return ImageFeatures(tokens, shapes, level_index, ref, pos)


class TextEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.d_model
        self.embedding = param(rng.normal(0.0, 1.0, (cfg.vocab_size, d)))
        self.norm_attn = LayerNorm(d)
        self.attn = MultiHeadAttention(d, cfg.n_heads, rng)
        self.norm_ffn = LayerNorm(d)
        self.ffn = FFN(d, cfg.ffn_dim, rng)
        self.positional = cfg.text_positional
        self.mask_cross_phrase = cfg.mask_cross_phrase

    def __call__(self, caption: TokenizedCaption) -> Tensor:
        ids = np.asarray(caption.token_ids, dtype=np.int64)
        vocab = self.embedding.shape[0]
        if ids.size == 0:
            raise DataError("caption has no tokens")
        if ids.min() < 0 or ids.max() >= vocab:
            raise DataError(f"token id out of vocabulary range [0, {vocab})")
        x = self.embedding[ids]
        if self.positional:
            x = x + sequence_position_embedding(len(ids), x.shape[1])
        mask = phrase_attention_mask(caption) if self.mask_cross_phrase else None
        y = self.norm_attn(x)
        x = x + self.attn(y, y, y, mask)
        return x + self.ffn(self.norm_ffn(x))


def phrase_attention_mask(caption: TokenizedCaption) -> np.ndarray:
    """Additive mask letting a token attend only within its own phrase."""
    n = len(caption)
    group = np.arange(n) + n  # tokens outside any phrase form singleton groups
    for g in caption.phrase_groups:
        group[list(g.token_indices)] = g.phrase_id
    return np.where(group[:, None] == group[None, :], 0.0, MASK_NEG)


class EnhancerLayer(Module):
    """Bi-directional fusion, then text self-attention + FFN, then deformable image self-attention + FFN."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.d_model
        self.norm_bi_img = LayerNorm(d)
        self.norm_bi_txt = LayerNorm(d)
        self.bi_attn = BiAttention(d, cfg.n_heads, rng)
        self.norm_txt_attn = LayerNorm(d)
        self.txt_attn = MultiHeadAttention(d, cfg.n_heads, rng)
        self.norm_txt_ffn = LayerNorm(d)
        self.txt_ffn = FFN(d, cfg.ffn_dim, rng)
        self.norm_img_attn = LayerNorm(d)
        self.img_attn = DeformableAttention(d, cfg.n_heads, cfg.n_feature_levels, cfg.deformable_points_per_head, rng)
        self.norm_img_ffn = LayerNorm(d)
        self.img_ffn = FFN(d, cfg.ffn_dim, rng)

    def output_projections(self) -> list[Linear]:
        return [self.bi_attn.img_out, self.bi_attn.txt_out, self.txt_attn.output,
                self.txt_ffn.output, self.img_attn.output, self.img_ffn.output]

    # sublayers, in execution order
    def fuse(self, img: ImageFeatures, txt: Tensor) -> tuple[ImageFeatures, Tensor]:
        d_img, d_txt = self.bi_attn(self.norm_bi_img(img.tokens), self.norm_bi_txt(txt))
        return replace(img, tokens=img.tokens + d_img), txt + d_txt

    def text_block(self, txt: Tensor, txt_mask: np.ndarray | None = None) -> Tensor:
        y = self.norm_txt_attn(txt)
        txt = txt + self.txt_attn(y, y, y, txt_mask)
        return txt + self.txt_ffn(self.norm_txt_ffn(txt))

    def image_attention(self, img: ImageFeatures) -> ImageFeatures:
        y = self.norm_img_attn(img.tokens)
        return replace(img, tokens=img.tokens + self.img_attn(y + img.pos, img.reference_points, y, img.spatial_shapes))

    def image_ffn(self, img: ImageFeatures) -> ImageFeatures:
        return replace(img, tokens=img.tokens + self.img_ffn(self.norm_img_ffn(img.tokens)))

    def __call__(self, img: ImageFeatures, txt: Tensor, txt_mask: np.ndarray | None = None
                 ) -> tuple[ImageFeatures, Tensor]:
        img, txt = self.fuse(img, txt)
        txt = self.text_block(txt, txt_mask)
        return self.image_ffn(self.image_attention(img)), txt


class DecoderLayer(Module):
    """Query self-attention, deformable image cross-attention, text cross-attention, FFN; then box refinement."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.d_model
        self.norm_self = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, cfg.n_heads, rng)
        self.norm_img = LayerNorm(d)
        self.img_cross = DeformableAttention(d, cfg.n_heads, cfg.n_feature_levels, cfg.deformable_points_per_head, rng)
        self.norm_txt = LayerNorm(d)
        self.txt_cross = MultiHeadAttention(d, cfg.n_heads, rng)
        self.norm_ffn = LayerNorm(d)
        self.ffn = FFN(d, cfg.ffn_dim, rng)
        self.box_delta = MLP(d, d, 4, rng)

    def output_projections(self) -> list[Linear]:
        return [self.self_attn.output, self.img_cross.output, self.txt_cross.output, self.ffn.output]

    def self_block(self, c: Tensor, query_pos: Tensor) -> Tensor:
        y = self.norm_self(c)
        return c + self.self_attn(y + query_pos, y + query_pos, y)

    def image_block(self, c: Tensor, query_pos: Tensor, anchors: Tensor, memory: ImageFeatures) -> Tensor:
        y = self.norm_img(c)
        return c + self.img_cross(y + query_pos, anchors, memory.tokens, memory.spatial_shapes)

    def text_block(self, c: Tensor, query_pos: Tensor, txt: Tensor) -> Tensor:
        y = self.norm_txt(c)
        return c + self.txt_cross(y + query_pos, txt, txt)

    def ffn_block(self, c: Tensor) -> Tensor:
        return c + self.ffn(self.norm_ffn(c))

    def refine(self, c: Tensor, anchors: Tensor) -> Tensor:
        return ad.sigmoid(ad.inverse_sigmoid(anchors) + self.box_delta(c))

    def __call__(self, state: QueryState, query_pos: Tensor, memory: ImageFeatures, txt: Tensor) -> QueryState:
        c = self.self_block(state.content, query_pos)
        c = self.image_block(c, query_pos, state.anchors, memory)
        c = self.text_block(c, query_pos, txt)
        c = self.ffn_block(c)
        return QueryState(c, self.refine(c, state.anchors))


class GroundingDetector(Module):
    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        d = config.d_model
        self.image_encoder = ImageEncoder(config, rng)
        self.text_encoder = TextEncoder(config, rng)
        self.enhancer = [EnhancerLayer(config, rng) for _ in range(config.n_enhancer_layers)]
        self.enc_output = Linear(d, d, rng)
        self.enc_norm = LayerNorm(d)
        self.enc_box_head = MLP(d, d, 4, rng)
        self.query_content = param(np.zeros((config.num_query, d)))
        self.ref_point_head = MLP(2 * d, d, d, rng)
        self.decoder = [DecoderLayer(config, rng) for _ in range(config.n_decoder_layers)]
        self.decoder_norm = LayerNorm(d)
        self.heads = [ContrastiveHead(config.bias_prior) for _ in range(config.n_decoder_layers + 1)]

    # -- stages -------------------------------------------------------------------------
    def encode_image(self, pixels: np.ndarray) -> ImageFeatures:
        return self.image_encoder(pixels)

    def encode_text(self, caption: TokenizedCaption) -> Tensor:
        return self.text_encoder(caption)

    def text_mask(self, caption: TokenizedCaption) -> np.ndarray | None:
        return phrase_attention_mask(caption) if self.config.mask_cross_phrase else None

    def enhance(self, img: ImageFeatures, txt: Tensor, txt_mask=None) -> tuple[ImageFeatures, Tensor]:
        for layer in self.enhancer:
            img, txt = layer(img, txt, txt_mask)
        return img, txt

    def select_queries(self, img: ImageFeatures, txt: Tensor) -> tuple[QueryState, SetPrediction, np.ndarray]:
        """Pick the image tokens most similar to the text as decoder queries."""
        nq = self.config.num_query
        if nq > img.n_tokens:
            raise ConfigError(f"num_query {nq} exceeds {img.n_tokens} image tokens")
        memory = self.enc_norm(self.enc_output(img.tokens))
        head = self.heads[-1]
        scores = selection_scores(memory.data, txt.data, self.config.selection_similarity, float(head.bias.data[0]))
        idx = top_k_indices(scores, nq)
        picked = memory[idx]
        level = img.level_index[idx]
        wh = 0.05 * 2.0 ** level
        proposals = np.concatenate([img.reference_points[idx], np.stack([wh, wh], axis=1)], axis=1)
        anchors = ad.sigmoid(self.enc_box_head(picked) + ad.inverse_sigmoid(Tensor(proposals)))
        enc_pred = SetPrediction(anchors, head(picked, txt))
        state = QueryState(self.query_content, anchors)
        return state, enc_pred, idx

    def query_pos(self, anchors: Tensor) -> Tensor:
        return self.ref_point_head(sine_embedding(anchors, self.config.d_model // 2))

    def decode(self, state: QueryState, img: ImageFeatures, txt: Tensor) -> list[SetPrediction]:
        out = []
        for layer, head in zip(self.decoder, self.heads):
            state = layer(state, self.query_pos(state.anchors), img, txt)
            out.append(self.predict(state.content, state.anchors, txt, head))
        return out

    def predict(self, content: Tensor, anchors: Tensor, txt: Tensor, head: ContrastiveHead) -> SetPrediction:
        return SetPrediction(anchors, head(self.decoder_norm(content), txt))

    def blocks(self) -> list[Block]:
        """The forward pass as a chain of blocks over named intermediate values.

        Inputs are ``pixels``, ``caption`` and ``mask``; the chain ends with
        ``set.0`` .. ``set.{n-1}`` (decoder layers) and ``set.enc``.
        """
        out = [
            Block("image", (self.image_encoder,), ("pixels",), ("img",), lambda px: (self.encode_image(px),)),
            Block("text", (self.text_encoder,), ("caption",), ("txt",), lambda cap: (self.encode_text(cap),)),
        ]
        for i, layer in enumerate(self.enhancer):
            out += [
                Block(f"enhancer.{i}.fuse", (layer.norm_bi_img, layer.norm_bi_txt, layer.bi_attn),
                      ("img", "txt"), ("img", "txt"), layer.fuse),
                Block(f"enhancer.{i}.text", (layer.norm_txt_attn, layer.txt_attn, layer.norm_txt_ffn, layer.txt_ffn),
                      ("txt", "mask"), ("txt",), _single(layer.text_block)),
                Block(f"enhancer.{i}.image_attn", (layer.norm_img_attn, layer.img_attn),
                      ("img",), ("img",), _single(layer.image_attention)),
                Block(f"enhancer.{i}.image_ffn", (layer.norm_img_ffn, layer.img_ffn),
                      ("img",), ("img",), _single(layer.image_ffn)),
            ]

        def select(img, txt):
            state, enc_pred, idx = self.select_queries(img, txt)
            return state.content, state.anchors, enc_pred, idx

        out.append(Block("select", (self.enc_output, self.enc_norm, self.enc_box_head, self.heads[-1], self.query_content),
                         ("img", "txt"), ("content", "anchors", "set.enc", "selected"), select))
        for i, (layer, head) in enumerate(zip(self.decoder, self.heads)):
            out += [
                Block(f"decoder.{i}.query_pos", (self.ref_point_head,), ("anchors",), ("qpos",), _single(self.query_pos)),
                Block(f"decoder.{i}.self", (layer.norm_self, layer.self_attn), ("content", "qpos"), ("content",),
                      _single(layer.self_block)),
                Block(f"decoder.{i}.image", (layer.norm_img, layer.img_cross), ("content", "qpos", "anchors", "img"),
                      ("content",), _single(layer.image_block)),
                Block(f"decoder.{i}.text", (layer.norm_txt, layer.txt_cross), ("content", "qpos", "txt"),
                      ("content",), _single(layer.text_block)),
                Block(f"decoder.{i}.ffn", (layer.norm_ffn, layer.ffn), ("content",), ("content",), _single(layer.ffn_block)),
                Block(f"decoder.{i}.refine", (layer.box_delta,), ("content", "anchors"), ("anchors",), _single(layer.refine)),
                Block(f"decoder.{i}.head", (self.decoder_norm, head), ("content", "anchors", "txt"), (f"set.{i}",),
                      _single(lambda c, a, t, head=head: self.predict(c, a, t, head))),
            ]
        return out

    def inputs(self, pixels: np.ndarray, caption: TokenizedCaption) -> dict:
        return {"pixels": pixels, "caption": caption, "mask": self.text_mask(caption)}

    def prediction_from(self, values: dict) -> Prediction:
        sets = [values[f"set.{i}"] for i in range(len(self.decoder))]
        return Prediction(sets, values["set.enc"], values["selected"])

    def forward(self, pixels: np.ndarray, caption: TokenizedCaption) -> Prediction:
        return self.prediction_from(run_blocks(self.blocks(), self.inputs(pixels, caption)))

    __call__ = forward

    # -- utilities ---------------------------------------------------------------------------
    def output_projections(self) -> list[Linear]:
        out = []
        for layer in [*self.enhancer, *self.decoder]:
            out.extend(layer.output_projections())
        return out

    def zero_output_projections(self) -> None:
        for lin in self.output_projections():
            lin.zero_()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise ConfigError(f"checkpoint mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise ConfigError(f"checkpoint shape mismatch for {name}: {state[name].shape} vs {p.shape}")
            p.data[...] = state[name]
