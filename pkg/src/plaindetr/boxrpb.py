"""Box-to-pixel relative position bias networks.

Three variants produce a per-query, per-position, per-head additive bias:

* naive: one MLP on the 4-vector (dx1, dy1, dx2, dy2) at every grid cell;
* decomposed: an x-axis MLP on (dx1, dx2) and a y-axis MLP on (dy1, dy2),
  recombined by broadcast addition;
* center: one MLP on the pixel-minus-center pair (ablation variant).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import DimensionError
from .geometry import OffsetGrid, center_offsets
from .numerics import Module, Tensor


class RpbMlp(Module):
    """Linear -> ReLU -> Linear meta-network emitting one bias per head."""

    def __init__(self, n_in: int, hidden: int, heads: int, rng: np.random.Generator | None = None,
                 zero: bool = False):
        if hidden < 1:
            raise ValueError("hidden width must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in, self.hidden, self.heads = n_in, hidden, heads
        self.fc1 = nx.Linear(n_in, hidden, rng, zero=zero)
        self.fc2 = nx.Linear(hidden, heads, rng, zero=zero)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise DimensionError(f"RpbMlp expects input width {self.n_in}, got {x.shape[-1]}")
        return self.fc2(nx.relu(self.fc1(x)))


@dataclass
class BiasTerm:
    """Either a full (..., K, H, W, M) bias or its axial factors.

    ``bx`` is (..., K, W, M) and ``by`` is (..., K, H, M).
    """

    full: Tensor | None = None
    bx: Tensor | None = None
    by: Tensor | None = None

    @property
    def is_axial(self) -> bool:
        return self.full is None

    def materialize(self) -> Tensor:
        if self.full is not None:
            return self.full
        by = self.by.reshape(self.by.shape[:-1] + (1,) + self.by.shape[-1:])
        bx = self.bx.reshape(self.bx.shape[:-2] + (1,) + self.bx.shape[-2:])
        return nx.broadcast_add(by, bx)

    def grid_shape(self) -> tuple[int, int]:
        if self.full is not None:
            return self.full.shape[-3], self.full.shape[-2]
        return self.by.shape[-2], self.bx.shape[-2]

    def for_attention(self) -> Tensor:
        """Reshape to (..., M, K, H*W) to line up with attention scores."""
        b = self.materialize()
        lead = b.shape[:-4]
        K, H, W, M = b.shape[-4:]
        b = b.reshape(lead + (K, H * W, M))
        n = len(lead)
        axes = tuple(range(n)) + (n + 2, n, n + 1)
        return b.transpose(axes)


def _expand_axis(t: Tensor, H: int, W: int, along_x: bool) -> Tensor:
    # (..., K, W) -> (..., K, H, W, 1) or (..., K, H) -> (..., K, H, W, 1)
    lead = t.shape[:-1]
    if along_x:
        t = t.reshape(lead + (1, W, 1))
    else:
        t = t.reshape(lead + (H, 1, 1))
    return nx.broadcast_to(t, lead + (H, W, 1))


def naive_boxrpb(offsets: OffsetGrid, mlp: RpbMlp) -> BiasTerm:
    if mlp.n_in != 4:
        raise DimensionError(f"naive BoxRPB needs a 4-input MLP, got {mlp.n_in}")
    K, H, W = offsets.shape
    feats = nx.concat([
        _expand_axis(offsets.dx1, H, W, True),
        _expand_axis(offsets.dy1, H, W, False),
        _expand_axis(offsets.dx2, H, W, True),
        _expand_axis(offsets.dy2, H, W, False),
    ], axis=-1)
    return BiasTerm(full=mlp(feats))


def decomposed_boxrpb(offsets: OffsetGrid, mlp_x: RpbMlp, mlp_y: RpbMlp) -> BiasTerm:
    if mlp_x.n_in != 2 or mlp_y.n_in != 2:
        raise DimensionError("decomposed BoxRPB needs 2-input MLPs per axis")
    fx = nx.stack([offsets.dx1, offsets.dx2], axis=-1)
    fy = nx.stack([offsets.dy1, offsets.dy2], axis=-1)
    return BiasTerm(bx=mlp_x(fx), by=mlp_y(fy))


def center_rpb(boxes, H: int, W: int, mlp: RpbMlp, normalize: bool = True) -> BiasTerm:
    if mlp.n_in != 2:
        raise DimensionError(f"center RPB needs a 2-input MLP, got {mlp.n_in}")
    ox, oy = center_offsets(boxes, H, W, normalize)
    feats = nx.concat([_expand_axis(ox, H, W, True), _expand_axis(oy, H, W, False)], axis=-1)
    return BiasTerm(full=mlp(feats))
