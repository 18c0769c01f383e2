"""Set matching: assignment solver, matching costs, focal and box losses,
and the hybrid one-to-one / one-to-many training objective."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ContractError, DomainError
from .geometry import elementwise_giou, pairwise_giou, reparam_deltas
from .numerics import Tensor


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]
    unmatched: list[int]
    total_cost: float

    @property
    def rows(self) -> np.ndarray:
        return np.array([p[0] for p in self.pairs], dtype=int)

    @property
    def cols(self) -> np.ndarray:
        return np.array([p[1] for p in self.pairs], dtype=int)


@dataclass
class LossWeights:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0


@dataclass
class LossBreakdown:
    components: dict[str, Tensor] = field(default_factory=dict)
    weights: dict[str, float] = field(default_factory=dict)
    total: Tensor | None = None

    def values(self) -> dict[str, float]:
        return {k: v.item() for k, v in self.components.items()}

    def recompose(self) -> float:
        return sum(self.weights[k] * v.item() for k, v in self.components.items())


# ---------------------------------------------------------------------------
# assignment


def hungarian(cost) -> MatchResult:
    """Minimum-cost partial injection of size min(n, m).

    Shortest augmenting paths with row/column potentials; argmin ties resolve
    to the lowest column index, so the result is deterministic.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ContractError(f"cost matrix must be 2-d, got shape {c.shape}")
    if np.isnan(c).any():
        raise DomainError("cost matrix contains NaN")
    if not np.isfinite(c).all():
        raise DomainError("cost matrix contains non-finite entries")
    n, m = c.shape
    if n == 0 or m == 0:
        return MatchResult([], list(range(n)), 0.0)
    transposed = n > m
    if transposed:
        c = c.T
        n, m = m, n

    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=int)  # owner[j]: 1-based row holding column j
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            cur = c[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1

    pairs = [(int(owner[j]) - 1, j - 1) for j in range(1, m + 1) if owner[j]]
    if transposed:
        pairs = [(b, a) for a, b in pairs]
        rows_total = m
    else:
        rows_total = n
    pairs.sort()
    total = float(sum(np.asarray(cost, dtype=np.float64)[i, j] for i, j in pairs))
    matched = {i for i, _ in pairs}
    return MatchResult(pairs, [i for i in range(rows_total) if i not in matched], total)


# ---------------------------------------------------------------------------
# costs and losses


def _normalize(boxes: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    H, W = grid
    return np.asarray(boxes, dtype=np.float64) / np.array([W, H, W, H], dtype=np.float64)


def class_cost(logits: np.ndarray, gt_classes: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> np.ndarray:
    """Focal-style positive-minus-negative cost, (K, G)."""
    p = nx.np_sigmoid(np.asarray(logits, dtype=np.float64))[:, np.asarray(gt_classes, dtype=int)]
    p = np.clip(p, 1e-12, 1 - 1e-12)
    neg = (1 - alpha) * p ** gamma * -np.log(1 - p)
    pos = alpha * (1 - p) ** gamma * -np.log(p)
    return pos - neg


def match_cost_matrix(logits, boxes, gt_classes, gt_boxes, grid: tuple[int, int],
                      weights: LossWeights | tuple = LossWeights(), alpha: float = 0.25,
                      gamma: float = 2.0) -> np.ndarray:
    """(K, G) matching cost; boxes are center-size in grid units."""
    w = weights if isinstance(weights, LossWeights) else LossWeights(*weights)
    logits = np.asarray(logits, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    K, G = boxes.shape[0], gt_boxes.shape[0]
    if G == 0:
        return np.zeros((K, 0))
    l1 = np.abs(_normalize(boxes, grid)[:, None, :] - _normalize(gt_boxes, grid)[None, :, :]).sum(-1)
    return (w.cls * class_cost(logits, gt_classes, alpha, gamma)
            + w.l1 * l1
            + w.giou * (1.0 - pairwise_giou(boxes, gt_boxes)))


def one_hot_targets(targets, num_classes: int, shape: tuple) -> np.ndarray:
    """Class indices (``-1`` for background) to a one-hot array of ``shape + (C,)``."""
    t = np.asarray(targets, dtype=int).reshape(shape)
    if np.any(t < -1) or np.any(t >= num_classes):
        raise ContractError(f"target class index outside [-1, {num_classes})")
    out = np.zeros(shape + (num_classes,))
    pos = t >= 0
    out[pos, t[pos]] = 1.0
    return out


def focal_loss(logits: Tensor, targets, alpha: float | None = 0.25, gamma: float = 2.0,
               num_boxes: float = 1.0) -> Tensor:
    """Sigmoid focal loss summed over all entries and divided by ``num_boxes``.

    ``targets`` is either an integer class index per row (``-1`` = background)
    or a one-hot array matching ``logits``. ``alpha=None`` disables the class
    weighting.
    """
    logits = nx.as_tensor(logits)
    t = np.asarray(targets)
    if t.shape != logits.shape:
        t = one_hot_targets(t, logits.shape[-1], logits.shape[:-1])
    t = t.astype(np.float64)
    if np.any((t != 0) & (t != 1)):
        raise ContractError("focal targets must be 0/1")
    # s = x for negatives, -x for positives: log(1 - p_t) = logsig(s), log(p_t) = logsig(-s)
    sign = 1.0 - 2.0 * t
    s = logits * Tensor(sign)
    loss = -nx.exp(nx.log_sigmoid(s) * gamma) * nx.log_sigmoid(-s) if gamma else -nx.log_sigmoid(-s)
    if alpha is not None:
        loss = loss * Tensor(alpha * t + (1 - alpha) * (1 - t))
    return loss.sum() * (1.0 / num_boxes)


def reparam_deltas_t(boxes: Tensor, refs: np.ndarray) -> Tensor:
    """Differentiable ``reparam_deltas(boxes, refs)`` with constant references."""
    refs = np.asarray(refs, dtype=np.float64)
    tx = (boxes[..., 0] - refs[..., 0]) * (1.0 / refs[..., 2])
    ty = (boxes[..., 1] - refs[..., 1]) * (1.0 / refs[..., 3])
    tw = nx.log(boxes[..., 2] * (1.0 / refs[..., 2]))
    th = nx.log(boxes[..., 3] * (1.0 / refs[..., 3]))
    return nx.stack([tx, ty, tw, th], axis=-1)


def box_losses(pred: Tensor, gt: np.ndarray, refs: np.ndarray | None, grid: tuple[int, int],
               reparam: bool, num_boxes: float) -> tuple[Tensor, Tensor]:
    """L1 and (1 - GIoU) summed over matched pairs and divided by ``num_boxes``.

    With ``reparam`` the L1 term is taken between the deltas of ``pred`` and
    of ``gt`` relative to ``refs``; otherwise on grid-normalized coordinates.
    """
    if reparam:
        diff = reparam_deltas_t(pred, refs) - Tensor(reparam_deltas(gt, refs))
    else:
        H, W = grid
        scale = np.broadcast_to(1.0 / np.array([W, H, W, H], dtype=np.float64), pred.shape)
        diff = pred * Tensor(scale) - Tensor(_normalize(gt, grid))
    l1 = nx.tabs(diff).sum() * (1.0 / num_boxes)
    g = (1.0 - elementwise_giou(pred, Tensor(gt))).sum() * (1.0 / num_boxes)
    return l1, g


@dataclass
class Target:
    classes: np.ndarray   # (G,)
    boxes: np.ndarray     # (G, 4) grid units

    def replicate(self, k: int) -> "Target":
        return Target(np.tile(self.classes, k), np.tile(self.boxes, (k, 1)))


def match_batch(logits: np.ndarray, boxes: np.ndarray, targets: list[Target], grid, weights: LossWeights,
                alpha: float, gamma: float) -> list[MatchResult]:
    out = []
    for b, tgt in enumerate(targets):
        cost = match_cost_matrix(logits[b], boxes[b], tgt.classes, tgt.boxes, grid, weights, alpha, gamma)
        if cost.shape[1] == 0:
            out.append(MatchResult([], list(range(cost.shape[0])), 0.0))
        else:
            out.append(hungarian(cost))
    return out


def stage_loss(logits: Tensor, boxes: Tensor, refs: np.ndarray | None, targets: list[Target],
               grid, reparam: bool, weights: LossWeights, alpha: float = 0.25, gamma: float = 2.0,
               matches: list[MatchResult] | None = None):
    """Focal, L1 and GIoU terms for one prediction stage over a batch.

    Matching runs on detached values; all matched pairs of the batch are
    gathered into single ops.
    """
    if matches is None:
        matches = match_batch(logits.data, boxes.data, targets, grid, weights, alpha, gamma)
    num_boxes = float(max(sum(len(t.classes) for t in targets), 1))
    B, Q, C = logits.shape
    cls_idx = -np.ones((B, Q), dtype=int)
    bi, qi, gts = [], [], []
    for b, (m, tgt) in enumerate(zip(matches, targets)):
        for q, g in m.pairs:
            cls_idx[b, q] = tgt.classes[g]
            bi.append(b)
            qi.append(q)
            gts.append(tgt.boxes[g])
    focal = focal_loss(logits, cls_idx, alpha, gamma, num_boxes)
    if bi:
        bi, qi = np.array(bi), np.array(qi)
        pred = boxes[bi, qi]
        r = None if refs is None else np.asarray(refs)[bi, qi]
        l1, g = box_losses(pred, np.array(gts), r, grid, reparam, num_boxes)
    else:
        l1, g = Tensor(0.0), Tensor(0.0)
    return {"focal": focal, "l1": l1, "giou": g}, matches


def hybrid_loss(output, targets: list[Target], grid, reparam: bool = True, hybrid_k: int = 3,
                weights: LossWeights = LossWeights(), aux_weight: float = 1.0, alpha: float = 0.25,
                gamma: float = 2.0) -> LossBreakdown:
    """Total training loss over every decoder layer (and the proposal stage).

    The one-to-one branch matches each ground truth once. The one-to-many
    branch matches ``hybrid_k`` replicas of every ground truth against the
    auxiliary query group and is weighted by ``aux_weight``.
    """
    term_w = {"focal": weights.cls, "l1": weights.l1, "giou": weights.giou}
    out = LossBreakdown()

    def add(prefix, comps, scale=1.0):
        for k, v in comps.items():
            out.components[f"{prefix}.{k}"] = v
            out.weights[f"{prefix}.{k}"] = term_w[k] * scale

    main = output.main
    if main.proposal_logits is not None:
        comps, _ = stage_loss(main.proposal_logits, main.proposal_boxes, main.proposal_refs, targets, grid,
                              reparam, weights, alpha, gamma)
        add("o2o.enc", comps)
    for i, layer in enumerate(main.layers):
        comps, _ = stage_loss(layer.logits, layer.boxes, layer.refs, targets, grid, reparam, weights, alpha, gamma)
        add(f"o2o.dec{i}", comps)
    if output.aux is not None:
        rep = [t.replicate(hybrid_k) for t in targets]
        for i, layer in enumerate(output.aux.layers):
            comps, _ = stage_loss(layer.logits, layer.boxes, layer.refs, rep, grid, reparam, weights, alpha, gamma)
            add(f"o2m.dec{i}", comps, aux_weight)

    total = None
    for k, v in out.components.items():
        term = v * out.weights[k]
        total = term if total is None else total + term
    out.total = total
    return out
