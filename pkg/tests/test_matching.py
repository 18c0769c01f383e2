import math

import numpy as np
import pytest

from plaindetr import numerics as nx
from plaindetr.decoder import DecoderTrace, LayerOutput, ModelOutput
from plaindetr.errors import ContractError, DomainError
from plaindetr.matching import (
    LossWeights,
    Target,
    focal_loss,
    hungarian,
    hybrid_loss,
    match_batch,
    match_cost_matrix,
    stage_loss,
)
from plaindetr.numerics import Tensor

from _oracles import _iou_xyxy, brute_force_assignment


def xyxy(b):
    cx, cy, w, h = b
    return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def hand_giou(a, b):
    a, b = xyxy(a), xyxy(b)
    inter_union = _iou_xyxy(a, b)
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - iw * ih
    enc = (max(a[2], b[2]) - min(a[0], b[0])) * (max(a[3], b[3]) - min(a[1], b[1]))
    return inter_union - (enc - union) / enc


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


# -- focal --------------------------------------------------------------------


def test_focal_gamma_zero_is_bce():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 3)) * 2
    t = (rng.uniform(size=(5, 3)) < 0.3).astype(float)
    bce = 0.0
    for xi, ti in zip(x.ravel(), t.ravel()):
        p = sig(xi)
        bce -= ti * math.log(p) + (1 - ti) * math.log(1 - p)
    assert abs(focal_loss(Tensor(x), t, alpha=None, gamma=0.0).item() - bce) <= 1e-12


def test_focal_single_positive_hand_value():
    val = focal_loss(Tensor([[math.log(9.0)]]), [0]).item()
    assert abs(val - 0.25 * 0.1 ** 2 * -math.log(0.9)) <= 1e-15
    assert val == pytest.approx(2.634e-4, abs=5e-8)


def test_focal_confident_positive_vanishes():
    assert focal_loss(Tensor([[30.0]]), [0]).item() < 1e-20


def test_focal_normalizes_by_count():
    x = Tensor(np.array([[0.3, -1.0], [2.0, 0.1]]))
    assert focal_loss(x, [1, -1], num_boxes=4.0).item() == pytest.approx(focal_loss(x, [1, -1]).item() / 4)


def test_focal_rejects_bad_target():
    with pytest.raises(ContractError):
        focal_loss(Tensor(np.zeros((2, 3))), [0, 3])


# -- costs --------------------------------------------------------------------


def test_cost_matrix_no_gt():
    cost = match_cost_matrix(np.zeros((3, 2)), np.ones((3, 4)), np.zeros(0, int), np.zeros((0, 4)), (8, 8))
    assert cost.shape == (3, 0)
    assert hungarian(cost).pairs == []


def test_cost_matrix_hand_case():
    grid = (4, 8)  # H, W
    logits = np.array([[1.0, -0.5], [-2.0, 0.7]])
    boxes = np.array([[2.0, 1.0, 2.0, 1.0], [5.0, 3.0, 1.0, 2.0]])
    gcls = np.array([1, 0])
    gbox = np.array([[2.5, 1.5, 2.0, 1.0], [5.0, 2.5, 2.0, 2.0]])
    cost = match_cost_matrix(logits, boxes, gcls, gbox, grid)
    for i in range(2):
        for j in range(2):
            p = sig(logits[i, gcls[j]])
            cls = 0.25 * (1 - p) ** 2 * -math.log(p) - 0.75 * p ** 2 * -math.log(1 - p)
            norm = [8.0, 4.0, 8.0, 4.0]
            l1 = sum(abs(boxes[i, c] - gbox[j, c]) / norm[c] for c in range(4))
            expected = 2 * cls + 5 * l1 + 2 * (1 - hand_giou(boxes[i], gbox[j]))
            assert abs(cost[i, j] - expected) <= 1e-12


def test_identical_confident_prediction_is_cheapest():
    gbox = np.array([[3.0, 3.0, 2.0, 2.0]])
    boxes = np.array([[3.0, 3.0, 2.0, 2.0], [1.0, 5.0, 1.0, 3.0], [3.2, 3.1, 2.0, 2.2]])
    logits = np.array([[6.0], [0.0], [1.0]])
    cost = match_cost_matrix(logits, boxes, np.array([0]), gbox, (8, 8))
    assert int(np.argmin(cost[:, 0])) == 0


# -- hungarian ------------------------------------------------------------------


def test_hungarian_trivial_cases():
    r = hungarian([[0.0]])
    assert r.pairs == [(0, 0)] and r.total_cost == 0.0
    r = hungarian([[1.0, 2.0], [2.0, 1.0]])
    assert r.pairs == [(0, 0), (1, 1)] and r.total_cost == 2.0


def test_hungarian_rectangular_unmatched():
    r = hungarian(np.array([[5.0], [1.0], [3.0]]))
    assert r.pairs == [(1, 0)] and r.unmatched == [0, 2]
    r = hungarian(np.array([[4.0, 1.0, 3.0]]))
    assert r.pairs == [(0, 1)] and r.unmatched == []


def test_hungarian_matches_brute_force_1000():
    rng = np.random.default_rng(1)
    for t in range(1000):
        n, m = (int(v) for v in rng.integers(1, 8, size=2))
        # integer costs make sums exact and produce many ties
        cost = rng.integers(0, 10, size=(n, m)).astype(float) if t % 2 else rng.uniform(0, 10, size=(n, m))
        res = hungarian(cost)
        assert len(res.pairs) == min(n, m)
        assert len({i for i, _ in res.pairs}) == len({j for _, j in res.pairs}) == min(n, m)
        ref = brute_force_assignment(cost)
        if t % 2:
            assert res.total_cost == ref
        else:
            assert abs(res.total_cost - ref) <= 1e-12 * max(1.0, ref)


def test_hungarian_scale_invariant_pairing():
    rng = np.random.default_rng(2)
    for _ in range(100):
        cost = rng.uniform(0, 5, size=tuple(int(v) for v in rng.integers(1, 7, size=2)))
        base = hungarian(cost).pairs
        for c in (1e-3, 0.5, 7.0, 1e4):
            assert hungarian(cost * c).pairs == base


def test_hungarian_deterministic_on_ties():
    assert hungarian(np.zeros((3, 3))).pairs == [(0, 0), (1, 1), (2, 2)]
    a, b = hungarian(np.ones((4, 6))), hungarian(np.ones((4, 6)))
    assert a.pairs == b.pairs


def test_hungarian_rejects_nan():
    with pytest.raises(DomainError, match="NaN"):
        hungarian([[0.0, float("nan")]])


# -- hybrid loss ----------------------------------------------------------------


GRID = (4, 4)


def trace(logits, boxes, refs):
    return DecoderTrace(layers=[LayerOutput(Tensor(logits, requires_grad=True), Tensor(boxes, requires_grad=True),
                                            np.asarray(refs))])


def random_output(rng, K=3, C=2, L=2, aux_k=None):
    def one(k):
        t = DecoderTrace()
        for _ in range(L):
            refs = np.concatenate([rng.uniform(1, 3, (1, k, 2)), rng.uniform(0.5, 1.5, (1, k, 2))], axis=-1)
            boxes = refs * rng.uniform(0.9, 1.1, refs.shape)
            t.layers.append(LayerOutput(Tensor(rng.normal(size=(1, k, C)), requires_grad=True),
                                        Tensor(boxes, requires_grad=True), refs))
        return t

    main = one(K)
    main.proposal_logits = Tensor(rng.normal(size=(1, 16, C)))
    anchors = np.concatenate([rng.uniform(1, 3, (1, 16, 2)), np.ones((1, 16, 2))], axis=-1)
    main.proposal_boxes = Tensor(anchors * rng.uniform(0.9, 1.1, anchors.shape))
    main.proposal_refs = anchors
    return ModelOutput(main, one(aux_k) if aux_k else None, Tensor(np.zeros((1, 16, 4))))


TARGETS = [Target(np.array([1, 0]), np.array([[2.0, 2.0, 1.0, 1.2], [1.5, 2.5, 0.8, 1.0]]))]


def test_total_recomposes():
    out = hybrid_loss(random_output(np.random.default_rng(3), aux_k=6), TARGETS, GRID)
    assert abs(out.total.item() - out.recompose()) <= 1e-12
    assert all(v >= 0 for v in out.values().values())
    assert all(v <= 2 * 2 for k, v in out.values().items() if k.endswith("giou"))
    assert any(k.startswith("o2m.") for k in out.components)


def test_k1_without_aux_is_plain_one_to_one():
    output = random_output(np.random.default_rng(4))
    out = hybrid_loss(output, TARGETS, GRID, hybrid_k=1)
    w = LossWeights()
    expected = 0.0
    stages = [(output.main.proposal_logits, output.main.proposal_boxes, output.main.proposal_refs)]
    stages += [(lay.logits, lay.boxes, lay.refs) for lay in output.main.layers]
    for logits, boxes, refs in stages:
        comps, _ = stage_loss(logits, boxes, refs, TARGETS, GRID, True, w)
        expected += 2 * comps["focal"].item() + 5 * comps["l1"].item() + 2 * comps["giou"].item()
    assert abs(out.total.item() - expected) <= 1e-12
    assert not any(k.startswith("o2m.") for k in out.components)


def test_zero_gt_leaves_only_classification():
    out = hybrid_loss(random_output(np.random.default_rng(5), aux_k=4), [Target(np.zeros(0, int), np.zeros((0, 4)))],
                      GRID)
    for k, v in out.values().items():
        if k.endswith("focal"):
            assert v > 0
        else:
            assert v == 0.0


def test_tiny_instance_hand_composed():
    # K=2 queries, G=1 ground truth, one layer, no proposal stage, no auxiliary group
    logits = np.array([[[0.4, -1.0], [-0.3, 0.8]]])
    refs = np.array([[[1.0, 1.0, 1.0, 1.0], [3.0, 2.0, 1.0, 2.0]]])
    boxes = np.array([[[1.2, 1.1, 1.5, 0.9], [2.6, 2.4, 1.2, 1.5]]])
    g_cls, g_box = 1, np.array([2.8, 2.2, 1.0, 1.6])
    out = hybrid_loss(ModelOutput(trace(logits, boxes, refs), None, None),
                      [Target(np.array([g_cls]), g_box[None])], GRID)

    costs = []
    for q in range(2):
        p = sig(logits[0, q, g_cls])
        c = 0.25 * (1 - p) ** 2 * -math.log(p) - 0.75 * p ** 2 * -math.log(1 - p)
        l1 = sum(abs(boxes[0, q, i] - g_box[i]) / 4 for i in range(4))
        costs.append(2 * c + 5 * l1 + 2 * (1 - hand_giou(boxes[0, q], g_box)))
    q = int(np.argmin(costs))
    assert q == 1

    focal = 0.0
    for k in range(2):
        for c in range(2):
            p = sig(logits[0, k, c])
            if (k, c) == (q, g_cls):
                focal += 0.25 * (1 - p) ** 2 * -math.log(p)
            else:
                focal += 0.75 * p ** 2 * -math.log(1 - p)
    r, b = refs[0, q], boxes[0, q]

    def deltas(x):
        return [(x[0] - r[0]) / r[2], (x[1] - r[1]) / r[3], math.log(x[2] / r[2]), math.log(x[3] / r[3])]

    l1 = sum(abs(u - v) for u, v in zip(deltas(b), deltas(g_box)))
    expected = 2 * focal + 5 * l1 + 2 * (1 - hand_giou(b, g_box))
    assert abs(out.total.item() - expected) <= 1e-12


def test_one_to_many_assigns_distinct_duplicates():
    box = np.array([2.0, 2.0, 1.0, 1.0])
    logits = np.zeros((1, 5, 2))
    boxes = np.tile(box, (1, 5, 1))
    tgt = Target(np.array([0]), np.array([[2.1, 1.9, 1.0, 1.1]])).replicate(3)
    (m,) = match_batch(logits, boxes, [tgt], GRID, LossWeights(), 0.25, 2.0)
    assert len(m.pairs) == 3
    assert len({q for q, _ in m.pairs}) == 3 and sorted(g for _, g in m.pairs) == [0, 1, 2]


def test_stage_loss_gradient():
    rng = np.random.default_rng(6)
    out = random_output(rng, L=1)
    lay = out.main.layers[0]
    matches = match_batch(lay.logits.data, lay.boxes.data, TARGETS, GRID, LossWeights(), 0.25, 2.0)

    def f():
        comps, _ = stage_loss(lay.logits, lay.boxes, lay.refs, TARGETS, GRID, True, LossWeights(), matches=matches)
        return comps["focal"] * 2.0 + comps["l1"] * 5.0 + comps["giou"] * 2.0

    assert nx.finite_diff_check(f, [lay.logits, lay.boxes]) <= 1e-4
