"""Multi-head attention with additive bias, plus local-attention baselines."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .boxrpb import BiasTerm
from .errors import DimensionError
from .geometry import cxcywh_to_xyxy, pixel_centers
from .numerics import Module, Tensor

MASK_VALUE = -1e9


@dataclass(frozen=True)
class AttentionConfig:
    d: int
    heads: int

    def __post_init__(self):
        if self.d % self.heads:
            raise DimensionError(f"heads ({self.heads}) must divide model width ({self.d})")

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.head_dim)


@dataclass
class AttentionOutput:
    out: Tensor
    weights: np.ndarray | None = None  # (..., M, K, H*W) post-softmax


class MultiheadAttention(Module):
    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.d
        self.q = nx.Linear(d, d, rng)
        self.k = nx.Linear(d, d, rng)
        self.v = nx.Linear(d, d, rng)
        self.o = nx.Linear(d, d, rng)

    def split(self, t: Tensor) -> Tensor:
        # (B, L, d) -> (B, M, L, dh)
        B, L, _ = t.shape
        return t.reshape(B, L, self.cfg.heads, self.cfg.head_dim).transpose(0, 2, 1, 3)

    def merge(self, t: Tensor) -> Tensor:
        B, M, L, dh = t.shape
        return t.transpose(0, 2, 1, 3).reshape(B, L, M * dh)


def _batched(*ts):
    return [None if t is None else nx.as_tensor(t) for t in ts]


def _add_pos(x: Tensor, pos) -> Tensor:
    if pos is None:
        return x
    pos = nx.as_tensor(pos)
    return x + pos if pos.shape == x.shape else nx.broadcast_add(x, pos)


def cross_attention(x, memory, attn: MultiheadAttention, bias=None, query_pos=None,
                    key_pos=None, keep_weights: bool = False) -> AttentionOutput:
    """Softmax(QK^T * scale + B) V, output projection, plus the residual ``x``.

    ``x`` is (B, K, d) or (K, d); ``memory`` is (B, N, d) or (N, d). ``bias``
    is a ``BiasTerm`` or a (..., K, H, W, M) tensor with H*W == N.
    """
    x, memory = _batched(x, memory)
    squeeze = x.ndim == 2
    if squeeze:
        x, memory = x.reshape((1,) + x.shape), memory.reshape((1,) + memory.shape)
        if query_pos is not None:
            query_pos = nx.as_tensor(query_pos).reshape((1,) + x.shape[1:])
    cfg = attn.cfg
    if x.shape[-1] != cfg.d or memory.shape[-1] != cfg.d:
        raise DimensionError(f"cross_attention: widths {x.shape[-1]}, {memory.shape[-1]} != d={cfg.d}")
    B, K, _ = x.shape
    N = memory.shape[1]

    q = attn.split(attn.q(_add_pos(x, query_pos)))
    k = attn.split(attn.k(_add_pos(memory, key_pos)))
    v = attn.split(attn.v(memory))
    scores = nx.matmul(q, nx.swap_last(k)) * cfg.scale
    if bias is not None:
        bt = bias if isinstance(bias, BiasTerm) else BiasTerm(full=nx.as_tensor(bias))
        H, W = bt.grid_shape()
        if H * W != N:
            raise DimensionError(f"bias grid {H}x{W} does not match {N} memory positions")
        b = bt.for_attention()
        if squeeze and b.ndim == 3:
            b = b.reshape((1,) + b.shape)
        if b.shape != scores.shape:
            raise DimensionError(f"bias shape {b.shape} != score shape {scores.shape}")
        scores = scores + b
    w = nx.softmax_last(scores)
    out = attn.o(attn.merge(nx.matmul(w, v))) + x
    weights = w.data.copy() if keep_weights else None
    if squeeze:
        out = out.reshape(out.shape[1:])
        weights = None if weights is None else weights[0]
    return AttentionOutput(out, weights)


def self_attention(x, pos, attn: MultiheadAttention, keep_weights: bool = False) -> Tensor:
    """Self-attention with ``pos`` added to queries and keys (not values), plus residual."""
    x = nx.as_tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape((1,) + x.shape)
        pos = None if pos is None else nx.as_tensor(pos).reshape(x.shape)
    if pos is not None and nx.as_tensor(pos).shape[-2:] != x.shape[-2:]:
        raise DimensionError(f"self_attention: pos {nx.as_tensor(pos).shape} vs x {x.shape}")
    qk = _add_pos(x, pos)
    q = attn.split(attn.q(qk))
    k = attn.split(attn.k(qk))
    v = attn.split(attn.v(x))
    w = nx.softmax_last(nx.matmul(q, nx.swap_last(k)) * attn.cfg.scale)
    out = attn.o(attn.merge(nx.matmul(w, v))) + x
    return out.reshape(out.shape[1:]) if squeeze else out


# ---------------------------------------------------------------------------
# local baselines


def _inside_mask(boxes: np.ndarray, H: int, W: int) -> np.ndarray:
    """(..., K, H, W) bool: cell centers within the box; never empty."""
    xy = cxcywh_to_xyxy(boxes)
    px, py = pixel_centers(W), pixel_centers(H)
    in_x = (px >= xy[..., 0:1]) & (px <= xy[..., 2:3])
    in_y = (py >= xy[..., 1:2]) & (py <= xy[..., 3:4])
    mask = in_y[..., :, None] & in_x[..., None, :]
    empty = ~mask.any(axis=(-1, -2))
    if np.any(empty):
        cx = np.clip(np.floor(boxes[..., 0]), 0, W - 1).astype(int)
        cy = np.clip(np.floor(boxes[..., 1]), 0, H - 1).astype(int)
        for idx in zip(*np.nonzero(empty)):
            mask[idx + (cy[idx], cx[idx])] = True
    return mask


def box_mask_bias(boxes, H: int, W: int, heads: int = 1) -> BiasTerm:
    """0 inside the box, MASK_VALUE outside, shaped (..., K, H, W, M)."""
    b = boxes.data if isinstance(boxes, Tensor) else np.asarray(
        [bx.as_array() for bx in boxes] if isinstance(boxes, (list, tuple)) else boxes, dtype=np.float64)
    mask = _inside_mask(b.reshape(b.shape[:-1] + (4,)), H, W)
    vals = np.where(mask, 0.0, MASK_VALUE)[..., None]
    return BiasTerm(full=Tensor(np.repeat(vals, heads, axis=-1)))


def roi_sample_indices(boxes: np.ndarray, H: int, W: int, n: int) -> np.ndarray:
    """Flat grid indices (..., K, n*n) of an n x n interior lattice per box.

    Lattice points sit at fractions (i + 1) / (n + 1) of each box side; each
    point maps to the grid cell containing it, clamped to the grid.
    """
    if n < 1:
        raise ValueError("need at least one sample per axis")
    xy = cxcywh_to_xyxy(boxes)
    frac = (np.arange(n) + 1.0) / (n + 1.0)
    px = xy[..., 0:1] + frac * (xy[..., 2:3] - xy[..., 0:1])
    py = xy[..., 1:2] + frac * (xy[..., 3:4] - xy[..., 1:2])
    col = np.clip(np.floor(px), 0, W - 1).astype(int)
    row = np.clip(np.floor(py), 0, H - 1).astype(int)
    flat = row[..., :, None] * W + col[..., None, :]
    return flat.reshape(flat.shape[:-2] + (n * n,))


def roi_sampling_attention(x, memory, boxes, attn: MultiheadAttention, H: int, W: int, n: int = 3,
                           query_pos=None, key_pos=None, keep_weights: bool = False) -> AttentionOutput:
    """Attention restricted to the quantized RoI lattice of each query's box.

    Repeated cells are attended once per sample. Returned weights are folded
    back onto the full grid.
    """
    x, memory = _batched(x, memory)
    squeeze = x.ndim == 2
    boxes = np.asarray(boxes.data if isinstance(boxes, Tensor) else boxes, dtype=np.float64)
    if squeeze:
        x, memory, boxes = x.reshape((1,) + x.shape), memory.reshape((1,) + memory.shape), boxes[None]
        if query_pos is not None:
            query_pos = nx.as_tensor(query_pos).reshape(x.shape)
    cfg = attn.cfg
    B, K, d = x.shape
    N = memory.shape[1]
    if N != H * W:
        raise DimensionError(f"memory has {N} positions, grid is {H}x{W}")
    idx = roi_sample_indices(boxes, H, W, n)  # (B, K, S)
    S = idx.shape[-1]
    flat = (idx + (np.arange(B) * N)[:, None, None]).reshape(-1)

    M, dh = cfg.heads, cfg.head_dim
    q = attn.q(_add_pos(x, query_pos)).reshape(B, K, M, 1, dh)
    keys = attn.k(_add_pos(memory, key_pos)).reshape(B * N, d)[flat]
    vals = attn.v(memory).reshape(B * N, d)[flat]
    keys = keys.reshape(B, K, S, M, dh).transpose(0, 1, 3, 2, 4)
    vals = vals.reshape(B, K, S, M, dh).transpose(0, 1, 3, 2, 4)
    w = nx.softmax_last(nx.matmul(q, nx.swap_last(keys)) * cfg.scale)  # (B, K, M, 1, S)
    out = attn.o(nx.matmul(w, vals).reshape(B, K, d)) + x

    weights = None
    if keep_weights:
        wd = w.data[:, :, :, 0, :]  # (B, K, M, S)
        full = np.zeros((B, K, M, N))
        bi, ki, mi, si = np.indices(wd.shape)
        np.add.at(full, (bi, ki, mi, idx[bi, ki, si]), wd)
        weights = full.transpose(0, 2, 1, 3)
    if squeeze:
        out = out.reshape(out.shape[1:])
        weights = None if weights is None else weights[0]
    return AttentionOutput(out, weights)


# ---------------------------------------------------------------------------
# attention-map dumps


def write_pgm(path: Path, img: np.ndarray) -> None:
    """8-bit binary PGM, max-normalized."""
    img = np.asarray(img, dtype=np.float64)
    peak = img.max() if img.size else 0.0
    scaled = np.zeros_like(img) if peak <= 0 else img / peak
    data = np.clip(np.rint(scaled * 255), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def dump_attention_maps(weights: np.ndarray, layer: int, H: int, W: int, out_dir: Path) -> list[str]:
    """Write one PGM and one CSV per (head, query) from (M, K, H*W) weights."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = []
    M, K, _ = weights.shape
    for h in range(M):
        for q in range(K):
            grid = weights[h, q].reshape(H, W)
            stem = f"attn_l{layer}_h{h}_q{q}"
            write_pgm(out_dir / f"{stem}.pgm", grid)
            with open(out_dir / f"{stem}.csv", "w", newline="") as fh:
                csv.writer(fh).writerows([[repr(float(v)) for v in row] for row in grid])
            names.append(stem)
    return names
