"""Boxes, IoU/GIoU, box re-parameterization and box-to-pixel offset grids.

Boxes are stored center-size ``(cx, cy, w, h)`` in feature-grid units. Array
forms use a trailing axis of length 4.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import DomainError
from .numerics import Tensor

MIN_SIZE = 1e-4
# half the float64 exponent range, so products of two sizes (areas) stay finite
_EXP_LIMIT = 0.5 * math.log(np.finfo(np.float64).max)


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise DomainError(f"box sizes must be positive, got w={self.w}, h={self.h}")

    @classmethod
    def from_corners(cls, x1, y1, x2, y2) -> "Box":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    @property
    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


@dataclass(frozen=True)
class BoxDeltas:
    tx: float
    ty: float
    tw: float
    th: float

    def as_array(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tw, self.th], dtype=np.float64)


@dataclass
class OffsetGrid:
    """Per-query pixel-minus-corner offsets along each axis.

    ``dx1``/``dx2`` have shape (..., K, W) and ``dy1``/``dy2`` (..., K, H).
    """

    dx1: Tensor
    dx2: Tensor
    dy1: Tensor
    dy2: Tensor
    normalized: bool = True

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.dx1.shape[-2], self.dy1.shape[-1], self.dx1.shape[-1]


def _arr(box) -> np.ndarray:
    return box.as_array() if isinstance(box, Box) else np.asarray(box, dtype=np.float64)


def cxcywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    cx, cy, w, h = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def xyxy_to_cxcywh(b: np.ndarray) -> np.ndarray:
    x1, y1, x2, y2 = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], axis=-1)


# ---------------------------------------------------------------------------
# overlap measures


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix between (N, 4) and (M, 4) center-size arrays."""
    iou, _, _ = _pairwise_terms(a, b)
    return iou


def pairwise_giou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    iou, union, enclose = _pairwise_terms(a, b)
    return iou - (enclose - union) / enclose


def _pairwise_terms(a, b):
    a = cxcywh_to_xyxy(np.asarray(a, dtype=np.float64).reshape(-1, 4))[:, None, :]
    b = cxcywh_to_xyxy(np.asarray(b, dtype=np.float64).reshape(-1, 4))[None, :, :]
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    ew = np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0])
    eh = np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1])
    return inter / union, union, ew * eh


def iou(a: Box, b: Box) -> float:
    return float(pairwise_iou(_arr(a), _arr(b))[0, 0])


def giou(a, b):
    """GIoU of two boxes.

    ``Box`` inputs give a float. ``Tensor`` inputs of shape (..., 4) give an
    elementwise, differentiable result.
    """
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        return elementwise_giou(nx.as_tensor(a), nx.as_tensor(b))
    return float(pairwise_giou(_arr(a), _arr(b))[0, 0])


def _corners(t: Tensor):
    cx, cy, w, h = (t[..., i] for i in range(4))
    hw, hh = w * 0.5, h * 0.5
    return cx - hw, cy - hh, cx + hw, cy + hh


def elementwise_giou(a: Tensor, b: Tensor) -> Tensor:
    ax1, ay1, ax2, ay2 = _corners(a)
    bx1, by1, bx2, by2 = _corners(b)
    iw = nx.relu(nx.minimum(ax2, bx2) - nx.maximum(ax1, bx1))
    ih = nx.relu(nx.minimum(ay2, by2) - nx.maximum(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    enclose = (nx.maximum(ax2, bx2) - nx.minimum(ax1, bx1)) * (nx.maximum(ay2, by2) - nx.minimum(ay1, by1))
    return inter / union - (enclose - union) / enclose


# ---------------------------------------------------------------------------
# re-parameterization


def reparam_deltas(g, p):
    """Regression target of ``g`` relative to reference box ``p``.

    Accepts ``Box`` pairs (returns ``BoxDeltas``) or (..., 4) arrays.
    """
    ga, pa = _arr(g), _arr(p)
    if np.any(ga[..., 2:] <= 0) or np.any(pa[..., 2:] <= 0):
        raise DomainError("reparam_deltas needs strictly positive widths and heights")
    t = np.stack([
        (ga[..., 0] - pa[..., 0]) / pa[..., 2],
        (ga[..., 1] - pa[..., 1]) / pa[..., 3],
        np.log(ga[..., 2] / pa[..., 2]),
        np.log(ga[..., 3] / pa[..., 3]),
    ], axis=-1)
    if isinstance(g, Box):
        return BoxDeltas(*t.tolist())
    return t


def apply_deltas(p, t, grid: tuple[int, int] | None = None, eps: float = MIN_SIZE):
    """Inverse of ``reparam_deltas``; differentiable in both arguments.

    With ``grid=(H, W)`` the result is clipped to the grid and keeps a
    minimum extent of ``eps``.
    """
    as_box = isinstance(p, Box)
    pt = nx.as_tensor(_arr(p) if as_box else p)
    tt = nx.as_tensor(t.as_array() if isinstance(t, BoxDeltas) else t)
    for k, label in ((2, "tw"), (3, "th")):
        big = tt.data[..., k] > _EXP_LIMIT
        if np.any(big):
            raise DomainError(f"apply_deltas: exp overflow for {label}={float(tt.data[..., k][big].max())}")
    pcx, pcy, pw, ph = (pt[..., i] for i in range(4))
    cx = pcx + tt[..., 0] * pw
    cy = pcy + tt[..., 1] * ph
    w = pw * nx.exp(tt[..., 2])
    h = ph * nx.exp(tt[..., 3])
    if not (np.all(np.isfinite(w.data)) and np.all(np.isfinite(h.data))):
        raise DomainError("apply_deltas: box size overflow (tw/th too large)")
    if grid is not None:
        cx, w = _clip_axis(cx, w, float(grid[1]), eps)
        cy, h = _clip_axis(cy, h, float(grid[0]), eps)
    out = nx.stack([cx, cy, w, h], axis=-1)
    if as_box:
        return Box(*out.data.tolist())
    return out


def _clip_axis(c: Tensor, s: Tensor, extent: float, eps: float):
    lo = nx.clamp(c - s * 0.5, 0.0, extent - eps)
    hi = nx.clamp(c + s * 0.5, eps, extent)
    hi = nx.maximum(hi, lo + eps)
    return (lo + hi) * 0.5, hi - lo


def clip_boxes(b: np.ndarray, grid: tuple[int, int], eps: float = MIN_SIZE) -> np.ndarray:
    xy = cxcywh_to_xyxy(b)
    H, W = grid
    x1 = np.clip(xy[..., 0], 0, W - eps)
    y1 = np.clip(xy[..., 1], 0, H - eps)
    x2 = np.maximum(np.clip(xy[..., 2], eps, W), x1 + eps)
    y2 = np.maximum(np.clip(xy[..., 3], eps, H), y1 + eps)
    return xyxy_to_cxcywh(np.stack([x1, y1, x2, y2], axis=-1))


# ---------------------------------------------------------------------------
# offsets feeding the position-bias networks


def pixel_centers(n: int) -> np.ndarray:
    return np.arange(n, dtype=np.float64) + 0.5


def _axis_offsets(edge: Tensor, n: int, normalize: bool) -> Tensor:
    # pixel minus edge, shape (..., K, n)
    out = nx.broadcast_add(pixel_centers(n), nx.neg(edge).reshape(edge.shape + (1,)))
    return out * (1.0 / n) if normalize else out


def corner_offsets(boxes, H: int, W: int, normalize: bool = True) -> OffsetGrid:
    """Offsets between every grid position and the top-left/bottom-right corners.

    ``boxes`` has shape (..., K, 4); the result is differentiable in it.
    """
    b = _boxes_tensor(boxes)
    if b.shape[-2] == 0:
        lead = b.shape[:-1]
        empty = lambda n: Tensor(np.zeros(lead + (n,)))  # noqa: E731
        return OffsetGrid(empty(W), empty(W), empty(H), empty(H), normalize)
    x1, y1, x2, y2 = _corners(b)
    return OffsetGrid(
        dx1=_axis_offsets(x1, W, normalize),
        dx2=_axis_offsets(x2, W, normalize),
        dy1=_axis_offsets(y1, H, normalize),
        dy2=_axis_offsets(y2, H, normalize),
        normalized=normalize,
    )


def center_offsets(boxes, H: int, W: int, normalize: bool = True) -> tuple[Tensor, Tensor]:
    """Pixel-minus-center offsets: (..., K, W) along x and (..., K, H) along y."""
    b = _boxes_tensor(boxes)
    return _axis_offsets(b[..., 0], W, normalize), _axis_offsets(b[..., 1], H, normalize)


def _boxes_tensor(boxes) -> Tensor:
    if isinstance(boxes, (list, tuple)) and all(isinstance(b, Box) for b in boxes):
        return Tensor(np.array([b.as_array() for b in boxes]).reshape(-1, 4))
    return nx.as_tensor(boxes)
