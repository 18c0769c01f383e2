"""The plain single-scale detection pipeline.

Patch-embedding stem with a merged self-attention encoder, dense two-stage
proposals, mixed query selection, and a decoder whose layers refine boxes
iteratively. Cross-attention is global over the single feature map and is
steered by a pluggable bias variant.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .attention import (
    AttentionConfig,
    MultiheadAttention,
    box_mask_bias,
    cross_attention,
    roi_sampling_attention,
    self_attention,
)
from .boxrpb import RpbMlp, center_rpb, decomposed_boxrpb, naive_boxrpb
from .errors import ConfigError
from .geometry import _clip_axis, apply_deltas, corner_offsets
from .numerics import Module, Tensor

BIAS_VARIANTS = ("none", "naive", "decomposed", "center", "boxmask", "roisample")
PRIOR_PROB = 0.01


@dataclass
class PipelineConfig:
    image_size: int = 64
    patch_size: int = 8
    channels: int = 1
    d: int = 32
    heads: int = 4
    enc_depth: int = 2
    dec_depth: int = 2
    num_queries: int = 16
    num_classes: int = 3
    ffn_dim: int = 64
    bias: str = "decomposed"
    reparam: bool = True
    lft: bool = True
    mqs: bool = True
    hybrid: bool = True
    hybrid_k: int = 3
    aux_queries: int = 32
    rpb_hidden: int = 64
    normalize_offsets: bool = True
    key_pos: str = "sine"
    roi_samples: int = 3
    pos_temperature: float = 20.0

    def __post_init__(self):
        self.validate()

    @property
    def grid(self) -> tuple[int, int]:
        n = self.image_size // self.patch_size
        return n, n

    def validate(self) -> None:
        if self.patch_size < 1 or self.image_size % self.patch_size:
            raise ConfigError(f"patch size {self.patch_size} must divide image size {self.image_size}")
        if self.num_queries < 1 or self.dec_depth < 1:
            raise ConfigError("need at least one query and one decoder layer")
        if self.d % 8:
            raise ConfigError(f"model width {self.d} must be divisible by 8 (sin/cos per box coordinate)")
        if self.d % self.heads:
            raise ConfigError(f"heads {self.heads} must divide model width {self.d}")
        if self.bias not in BIAS_VARIANTS:
            raise ConfigError(f"unknown bias variant {self.bias!r}; choose from {BIAS_VARIANTS}")
        if self.key_pos not in ("sine", "none"):
            raise ConfigError(f"key_pos must be 'sine' or 'none', got {self.key_pos!r}")
        H, W = self.grid
        if self.num_queries > H * W:
            raise ConfigError(f"{self.num_queries} queries exceed {H * W} feature positions")
        if self.hybrid and self.aux_queries > H * W:
            raise ConfigError(f"{self.aux_queries} auxiliary queries exceed {H * W} feature positions")

    @classmethod
    def toy(cls, **overrides) -> "PipelineConfig":
        return cls(**overrides)

    @classmethod
    def full_scale(cls, **overrides) -> "PipelineConfig":
        """Reference sizes from the original setting; far too slow for this engine."""
        base = dict(image_size=800, patch_size=16, d=256, heads=8, enc_depth=0, dec_depth=6,
                    num_queries=300, aux_queries=1500, rpb_hidden=256, ffn_dim=2048, num_classes=80)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown pipeline config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "PipelineConfig":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# fixed sine embeddings


def sine_embed(coords: np.ndarray, dims_per_coord: int, temperature: float) -> np.ndarray:
    """Embed normalized coordinates with sin/cos pairs: (..., n) -> (..., n * dims_per_coord)."""
    nfreq = dims_per_coord // 2
    freqs = temperature ** (np.arange(nfreq) / nfreq)
    ang = 2 * math.pi * coords[..., None] / freqs
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    return emb.reshape(coords.shape[:-1] + (coords.shape[-1] * dims_per_coord,))


def grid_position_embedding(H: int, W: int, d: int, temperature: float = 20.0) -> np.ndarray:
    ys, xs = np.meshgrid((np.arange(H) + 0.5) / H, (np.arange(W) + 0.5) / W, indexing="ij")
    coords = np.stack([xs.reshape(-1), ys.reshape(-1)], axis=-1)
    return sine_embed(coords, d // 2, temperature)


def box_position_embedding(boxes: np.ndarray, grid: tuple[int, int], d: int,
                           temperature: float = 20.0) -> np.ndarray:
    H, W = grid
    norm = np.asarray(boxes, dtype=np.float64) / np.array([W, H, W, H], dtype=np.float64)
    return sine_embed(norm, d // 4, temperature)


def topk_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Top-k along the last axis, highest first; ties go to the lower index."""
    if k > scores.shape[-1]:
        raise ConfigError(f"cannot select {k} of {scores.shape[-1]} positions")
    order = np.argsort(-scores, axis=-1, kind="stable")
    return order[..., :k]


def cell_anchors(H: int, W: int) -> np.ndarray:
    ys, xs = np.meshgrid(np.arange(H) + 0.5, np.arange(W) + 0.5, indexing="ij")
    return np.stack([xs.reshape(-1), ys.reshape(-1), np.ones(H * W), np.ones(H * W)], axis=-1)


# ---------------------------------------------------------------------------
# containers


@dataclass
class Proposals:
    logits: Tensor        # (B, N, C) dense class logits
    boxes: Tensor         # (B, N, 4) dense boxes
    anchors: np.ndarray   # (N, 4) unit cell boxes
    scores: np.ndarray    # (B, N) max class probability


@dataclass
class QuerySet:
    content: Tensor       # (B, K, d)
    pos: np.ndarray       # (B, K, d)
    boxes: np.ndarray     # (B, K, 4), detached

    def __post_init__(self):
        if not (self.content.shape[:2] == self.pos.shape[:2] == self.boxes.shape[:2]):
            raise ConfigError("query content, position and box counts differ")


@dataclass
class LayerOutput:
    logits: Tensor        # (B, K, C)
    boxes: Tensor         # (B, K, 4) boxes the loss sees
    refs: np.ndarray      # (B, K, 4) reference each delta was applied to
    weights: np.ndarray | None = None


@dataclass
class DecoderTrace:
    layers: list[LayerOutput] = field(default_factory=list)
    proposal_logits: Tensor | None = None
    proposal_boxes: Tensor | None = None
    proposal_refs: np.ndarray | None = None
    query_boxes: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.layers)


@dataclass
class ModelOutput:
    main: DecoderTrace
    aux: DecoderTrace | None
    memory: Tensor


# ---------------------------------------------------------------------------
# modules


class EncoderBlock(Module):
    def __init__(self, cfg: PipelineConfig, rng):
        self.attn = MultiheadAttention(AttentionConfig(cfg.d, cfg.heads), rng)
        self.ln1 = nx.LayerNorm(cfg.d)
        self.ffn = nx.FeedForward(cfg.d, cfg.ffn_dim, cfg.d, rng)
        self.ln2 = nx.LayerNorm(cfg.d)

    def __call__(self, x: Tensor, pos) -> Tensor:
        x = self.ln1(self_attention(x, pos, self.attn))
        return self.ln2(x + self.ffn(x))


class DecoderLayer(Module):
    def __init__(self, cfg: PipelineConfig, rng):
        acfg = AttentionConfig(cfg.d, cfg.heads)
        self.self_attn = MultiheadAttention(acfg, rng)
        self.ln1 = nx.LayerNorm(cfg.d)
        self.cross_attn = MultiheadAttention(acfg, rng)
        self.ln2 = nx.LayerNorm(cfg.d)
        self.ffn = nx.FeedForward(cfg.d, cfg.ffn_dim, cfg.d, rng)
        self.ln3 = nx.LayerNorm(cfg.d)
        self.cls_head = nx.Linear(cfg.d, cfg.num_classes, rng)
        self.cls_head.bias.data[:] = -math.log((1 - PRIOR_PROB) / PRIOR_PROB)
        self.box_head = nx.FeedForward(cfg.d, cfg.d, 4, rng, zero_last=True)
        self.rpb = {}
        if cfg.bias == "naive":
            self.rpb["xy"] = RpbMlp(4, cfg.rpb_hidden, cfg.heads, rng)
        elif cfg.bias == "decomposed":
            self.rpb["x"] = RpbMlp(2, cfg.rpb_hidden, cfg.heads, rng)
            self.rpb["y"] = RpbMlp(2, cfg.rpb_hidden, cfg.heads, rng)
        elif cfg.bias == "center":
            self.rpb["c"] = RpbMlp(2, cfg.rpb_hidden, cfg.heads, rng)


class PlainDETR(Module):
    def __init__(self, cfg: PipelineConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d, C = cfg.d, cfg.num_classes
        H, W = cfg.grid
        self.patch_embed = nx.Linear(cfg.patch_size * cfg.patch_size * cfg.channels, d, rng)
        self.encoder = [EncoderBlock(cfg, rng) for _ in range(cfg.enc_depth)]
        self.prop_norm = nx.LayerNorm(d)
        self.prop_cls = nx.Linear(d, C, rng)
        self.prop_cls.bias.data[:] = -math.log((1 - PRIOR_PROB) / PRIOR_PROB)
        self.prop_box = nx.FeedForward(d, d, 4, rng, zero_last=True)
        self.content_embed = nx.param(rng.normal(0.0, 1.0, size=(cfg.num_queries, d)))
        self.aux_content_embed = nx.param(rng.normal(0.0, 1.0, size=(cfg.aux_queries, d)))
        self.prop_content = nx.Linear(d, d, rng)
        self.prop_content_norm = nx.LayerNorm(d)
        self.layers = [DecoderLayer(cfg, rng) for _ in range(cfg.dec_depth)]
        self.enc_pos = grid_position_embedding(H, W, d, cfg.pos_temperature)
        self.anchors = cell_anchors(H, W)

    # -- stem ---------------------------------------------------------------
    def patchify(self, images: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        imgs = np.asarray(images, dtype=np.float64)
        if imgs.ndim == 3:
            imgs = imgs[..., None]
        B, S1, S2, Cc = imgs.shape
        p = cfg.patch_size
        if S1 % p or S2 % p:
            raise ConfigError(f"image {S1}x{S2} not divisible by patch size {p}")
        x = imgs.reshape(B, S1 // p, p, S2 // p, p, Cc).transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(B, (S1 // p) * (S2 // p), p * p * Cc)

    def encode(self, images: np.ndarray) -> Tensor:
        patches = self.patchify(images)
        pos = self.enc_pos
        if patches.shape[1] != pos.shape[0]:
            raise ConfigError(f"image yields {patches.shape[1]} tokens, config expects {pos.shape[0]}")
        x = nx.broadcast_add(self.patch_embed(Tensor(patches)), pos)
        for block in self.encoder:
            x = block(x, pos)
        return x

    def stop_gradient(self, value: np.ndarray) -> np.ndarray:
        """Every box detach in the forward pass goes through here.

        Subclasses may record and replay these values, which makes a
        finite-difference probe see the same stop-gradients as autodiff.
        """
        return value

    # -- proposals and queries ---------------------------------------------
    def refine(self, base, delta: Tensor) -> Tensor:
        """Apply a predicted delta to reference boxes (grid units)."""
        grid = self.cfg.grid
        if self.cfg.reparam:
            return apply_deltas(base, delta, grid)
        H, W = grid
        scale = np.array([W, H, W, H], dtype=np.float64)
        norm = nx.clamp(nx.broadcast_mul(nx.as_tensor(base), 1.0 / scale), 1e-5, 1 - 1e-5)
        logit = nx.log(norm) - nx.log(1.0 - norm)
        out = nx.broadcast_mul(nx.sigmoid(delta + logit), scale)
        cx, w = _clip_axis(out[..., 0], out[..., 2], float(W), 1e-4)
        cy, h = _clip_axis(out[..., 1], out[..., 3], float(H), 1e-4)
        return nx.stack([cx, cy, w, h], axis=-1)

    def generate_proposals(self, memory: Tensor) -> Proposals:
        feats = self.prop_norm(memory)
        logits = self.prop_cls(feats)
        B, N, _ = memory.shape
        anchors = np.broadcast_to(self.anchors, (B, N, 4))
        boxes = self.refine(anchors, self.prop_box(feats))
        scores = nx.np_sigmoid(logits.data).max(axis=-1)
        return Proposals(logits, boxes, self.anchors, scores)

    def mixed_query_init(self, memory: Tensor, proposals: Proposals, k: int, content_embed: Tensor) -> QuerySet:
        cfg = self.cfg
        idx = topk_indices(proposals.scores, k)
        B, N, d = memory.shape
        rows = np.arange(B)[:, None]
        boxes = self.stop_gradient(proposals.boxes.data[rows, idx])
        pos = box_position_embedding(boxes, cfg.grid, d, cfg.pos_temperature)
        if cfg.mqs:
            content = nx.broadcast_to(content_embed, (B, k, d))
        else:
            flat = (idx + np.arange(B)[:, None] * N).reshape(-1)
            picked = memory.reshape(B * N, d)[flat].reshape(B, k, d)
            content = self.prop_content_norm(self.prop_content(picked))
        return QuerySet(content=content, pos=pos, boxes=boxes)

    # -- decoder -------------------------------------------------------------
    def layer_bias(self, layer: DecoderLayer, refs: np.ndarray):
        cfg = self.cfg
        H, W = cfg.grid
        if cfg.bias in ("none", "roisample"):
            return None
        if cfg.bias == "boxmask":
            return box_mask_bias(refs, H, W, cfg.heads)
        if cfg.bias == "center":
            return center_rpb(refs, H, W, layer.rpb["c"], cfg.normalize_offsets)
        offsets = corner_offsets(refs, H, W, cfg.normalize_offsets)
        if cfg.bias == "naive":
            return naive_boxrpb(offsets, layer.rpb["xy"])
        return decomposed_boxrpb(offsets, layer.rpb["x"], layer.rpb["y"])

    def decoder_layer(self, index: int, x: Tensor, pos: np.ndarray, refs: np.ndarray, memory: Tensor,
                      keep_weights: bool = False):
        """One layer: self-attn, biased cross-attn, FFN, then class and delta heads."""
        cfg = self.cfg
        layer = self.layers[index]
        H, W = cfg.grid
        key_pos = self.enc_pos if cfg.key_pos == "sine" else None
        x = layer.ln1(self_attention(x, pos, layer.self_attn))
        if cfg.bias == "roisample":
            res = roi_sampling_attention(x, memory, refs, layer.cross_attn, H, W, cfg.roi_samples,
                                         query_pos=pos, key_pos=key_pos, keep_weights=keep_weights)
        else:
            res = cross_attention(x, memory, layer.cross_attn, self.layer_bias(layer, refs),
                                  query_pos=pos, key_pos=key_pos, keep_weights=keep_weights)
        x = layer.ln2(res.out)
        x = layer.ln3(x + layer.ffn(x))
        return x, layer.cls_head(x), layer.box_head(x), res.weights

    def run_decoder(self, queries: QuerySet, memory: Tensor, keep_weights: bool = False) -> DecoderTrace:
        """Iterative refinement over all layers.

        Each layer's input boxes are detached. With look-forward-twice the box
        a layer's loss sees is rebuilt on the previous layer's undetached
        output, so that loss also reaches the previous delta head.
        """
        cfg = self.cfg
        trace = DecoderTrace(query_boxes=queries.boxes)
        x = queries.content
        refs = queries.boxes
        prev: Tensor | None = None
        for i in range(cfg.dec_depth):
            pos = queries.pos if i == 0 else box_position_embedding(refs, cfg.grid, cfg.d, cfg.pos_temperature)
            x, logits, delta, weights = self.decoder_layer(i, x, pos, refs, memory, keep_weights)
            new_boxes = self.refine(refs, delta)
            loss_boxes = self.refine(prev, delta) if (cfg.lft and prev is not None) else new_boxes
            trace.layers.append(LayerOutput(logits, loss_boxes, refs, weights))
            prev = new_boxes
            refs = self.stop_gradient(new_boxes.data.copy())
        return trace

    def forward(self, images: np.ndarray, with_aux: bool | None = None, keep_weights: bool = False) -> ModelOutput:
        cfg = self.cfg
        memory = self.encode(images)
        props = self.generate_proposals(memory)
        main = self.run_decoder(self.mixed_query_init(memory, props, cfg.num_queries, self.content_embed),
                                memory, keep_weights)
        main.proposal_logits = props.logits
        main.proposal_boxes = props.boxes
        main.proposal_refs = np.broadcast_to(props.anchors, props.boxes.shape)
        aux = None
        if with_aux is None:
            with_aux = cfg.hybrid
        if with_aux:
            aux = self.run_decoder(self.mixed_query_init(memory, props, cfg.aux_queries, self.aux_content_embed),
                                   memory)
        return ModelOutput(main, aux, memory)

    __call__ = forward
