import json

import numpy as np
import pytest

from plaindetr import numerics as nx
from plaindetr.decoder import (
    BIAS_VARIANTS,
    PipelineConfig,
    PlainDETR,
    box_position_embedding,
    topk_indices,
)
from plaindetr.errors import ConfigError
from plaindetr.geometry import elementwise_giou
from plaindetr.numerics import Tensor

from _oracles import composed_pipeline_error, decoder_layer_oracle, replay_model

TINY = dict(image_size=8, patch_size=4, d=8, heads=2, enc_depth=1, dec_depth=1, num_queries=2,
            num_classes=2, ffn_dim=8, aux_queries=4, rpb_hidden=4)


def small(**kw):
    base = dict(image_size=16, patch_size=4, d=16, heads=2, enc_depth=1, dec_depth=2, num_queries=4,
                num_classes=2, ffn_dim=16, aux_queries=6, rpb_hidden=8)
    base.update(kw)
    return PipelineConfig(**base)


def perturb(model, rng, scale=0.1):
    for p in model.parameters():
        p.data += rng.normal(0.0, scale, p.shape)


def images(cfg, n=2, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, (n, cfg.image_size, cfg.image_size, 1))


# -- config -------------------------------------------------------------------


@pytest.mark.parametrize("kw", [
    dict(patch_size=7), dict(num_queries=0), dict(dec_depth=0), dict(d=12, heads=2),
    dict(bias="deformable"), dict(num_queries=17), dict(aux_queries=17),
])
def test_config_rejects(kw):
    with pytest.raises(ConfigError):
        small(**kw)


def test_config_json_roundtrip():
    cfg = small(bias="center", lft=False)
    assert PipelineConfig.from_json(json.dumps(cfg.to_dict())) == cfg
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"nonsense": 1})


# -- encode -------------------------------------------------------------------


def test_encode_token_grid():
    cfg = PipelineConfig.toy()
    mem = PlainDETR(cfg).encode(images(cfg, 1))
    assert mem.shape == (1, 64, cfg.d)


def test_encode_rejects_indivisible_image():
    model = PlainDETR(small())
    with pytest.raises(ConfigError):
        model.encode(np.zeros((1, 15, 15)))


def test_encode_depth_zero_is_embedding_plus_position():
    cfg = small(enc_depth=0)
    model = PlainDETR(cfg)
    img = images(cfg, 1)
    patches = model.patchify(img)
    expected = patches @ model.patch_embed.weight.data + model.patch_embed.bias.data + model.enc_pos
    assert np.allclose(model.encode(img).data, expected, rtol=0, atol=1e-13)


def test_constant_image_tokens_differ_only_by_position():
    cfg = small(enc_depth=0)
    model = PlainDETR(cfg)
    model.patch_embed.weight.data[:] = 0.0
    mem = model.encode(np.full((1, 16, 16, 1), 0.3)).data[0]
    content = mem - model.enc_pos
    assert np.all(content == content[0])


# -- proposals and queries ----------------------------------------------------


def test_topk_cases():
    assert topk_indices(np.array([0.9, 0.1, 0.5]), 2).tolist() == [0, 2]
    assert topk_indices(np.full(6, 0.4), 3).tolist() == [0, 1, 2]
    assert topk_indices(np.array([0.2, 0.7, 0.2, 0.9]), 4).tolist() == [3, 1, 0, 2]
    with pytest.raises(ConfigError):
        topk_indices(np.zeros(3), 4)


def test_proposals_shapes_and_anchor_identity():
    cfg = small()
    model = PlainDETR(cfg)
    props = model.generate_proposals(model.encode(images(cfg)))
    assert props.logits.shape == (2, 16, 2) and props.boxes.shape == (2, 16, 4)
    # zero-initialized box head: every proposal is its cell's unit box
    assert np.allclose(props.boxes.data, np.broadcast_to(props.anchors, (2, 16, 4)), atol=1e-12)


def test_position_embedding_width_and_identity():
    emb = box_position_embedding(np.array([[1.0, 2.0, 3.0, 4.0], [1.0, 2.0, 3.0, 4.0]]), (8, 8), 32)
    assert emb.shape == (2, 32)
    assert np.array_equal(emb[0], emb[1])


@pytest.mark.parametrize("mqs", [True, False])
def test_mixed_query_selection(mqs):
    cfg = small(mqs=mqs)
    model = PlainDETR(cfg)
    perturb(model, np.random.default_rng(1))
    mem = model.encode(images(cfg))
    props = model.generate_proposals(mem)
    qs = model.mixed_query_init(mem, props, 4, model.content_embed)
    idx = topk_indices(props.scores, 4)
    assert np.array_equal(qs.boxes, np.take_along_axis(props.boxes.data, idx[..., None], axis=1))
    assert np.array_equal(qs.pos, box_position_embedding(qs.boxes, cfg.grid, cfg.d))
    same = np.array_equal(qs.content.data[0], qs.content.data[1])
    if mqs:
        assert same and np.array_equal(qs.content.data[0], model.content_embed.data)
    else:
        assert not same


# -- decoder layer ------------------------------------------------------------


def test_zero_delta_head_keeps_boxes():
    cfg = small()
    model = PlainDETR(cfg)  # the last box-head layer starts at zero
    out = model(images(cfg), with_aux=False)
    for layer in out.main.layers:
        assert np.allclose(layer.boxes.data, layer.refs, rtol=0, atol=1e-12)


def test_zero_rpb_layer_equals_unbiased_layer():
    biased = PlainDETR(small(bias="decomposed"), seed=3)
    for layer in biased.layers:
        for mlp in layer.rpb.values():
            for p in mlp.parameters():
                p.data[:] = 0.0
    plain = PlainDETR(small(bias="none"), seed=4)
    plain.load_arrays({k: v for k, v in biased.state_arrays().items() if ".rpb." not in k})
    img = images(biased.cfg)
    a = biased(img, with_aux=False, keep_weights=True).main
    b = plain(img, with_aux=False, keep_weights=True).main
    for la, lb in zip(a.layers, b.layers):
        assert np.array_equal(la.logits.data, lb.logits.data)
        assert np.array_equal(la.boxes.data, lb.boxes.data)
        assert np.array_equal(la.weights, lb.weights)


def test_single_layer_matches_step_by_step_oracle():
    cfg = PipelineConfig(**dict(TINY, bias="decomposed"))
    model = PlainDETR(cfg, seed=5)
    rng = np.random.default_rng(5)
    perturb(model, rng, 0.3)
    H, W = cfg.grid
    x = rng.normal(size=(1, 2, cfg.d))
    refs = np.array([[[0.8, 1.1, 1.2, 0.9], [1.3, 0.7, 0.6, 1.0]]])
    pos = box_position_embedding(refs, cfg.grid, cfg.d)
    mem = rng.normal(size=(1, H * W, cfg.d))
    got_x, got_logits, got_delta, _ = model.decoder_layer(0, Tensor(x), pos, refs, Tensor(mem))
    ex, el, ed = decoder_layer_oracle(model.layers[0], x[0], pos[0], refs[0], mem[0], model.enc_pos, H, W)
    assert np.max(np.abs(got_x.data[0] - ex)) <= 1e-12
    assert np.max(np.abs(got_logits.data[0] - el)) <= 1e-12
    assert np.max(np.abs(got_delta.data[0] - ed)) <= 1e-12


# -- run_decoder ----------------------------------------------------------------


def test_trace_shape():
    cfg = small(dec_depth=2, num_queries=4)
    out = PlainDETR(cfg)(images(cfg), with_aux=True)
    assert len(out.main) == 2
    for layer in out.main.layers:
        assert layer.logits.shape == (2, 4, 2) and layer.boxes.shape == (2, 4, 4)
    assert len(out.aux) == 2 and out.aux.layers[0].boxes.shape == (2, 6, 4)


@pytest.mark.parametrize("variant", BIAS_VARIANTS)
@pytest.mark.parametrize("reparam", [True, False])
def test_every_variant_runs_with_valid_boxes(variant, reparam):
    cfg = small(bias=variant, reparam=reparam)
    model = PlainDETR(cfg, seed=2)
    perturb(model, np.random.default_rng(2), 0.5)
    out = model(images(cfg), with_aux=True)
    H, W = cfg.grid
    for trace in (out.main, out.aux):
        for layer in trace.layers:
            b = layer.boxes.data
            assert np.all(np.isfinite(b)) and np.all(b[..., 2:] > 0)
            assert np.all(b[..., 0] - b[..., 2] / 2 >= -1e-9) and np.all(b[..., 0] + b[..., 2] / 2 <= W + 1e-9)
            assert np.all(b[..., 1] - b[..., 3] / 2 >= -1e-9) and np.all(b[..., 1] + b[..., 3] / 2 <= H + 1e-9)


def test_forward_deterministic():
    cfg = small(bias="naive")
    a = PlainDETR(cfg, seed=9)(images(cfg), with_aux=True)
    b = PlainDETR(cfg, seed=9)(images(cfg), with_aux=True)
    for la, lb in zip(a.main.layers + a.aux.layers, b.main.layers + b.aux.layers):
        assert la.logits.data.tobytes() == lb.logits.data.tobytes()
        assert la.boxes.data.tobytes() == lb.boxes.data.tobytes()


# -- look forward twice ---------------------------------------------------------


def _lft_setup(lft: bool):
    cfg = PipelineConfig(**dict(TINY, dec_depth=2, lft=lft))
    model = replay_model(cfg, seed=11)
    rng = np.random.default_rng(11)
    perturb(model, rng, 0.05)
    for layer in model.layers:  # small generic deltas, away from the grid clamp
        layer.box_head.fc2.weight.data[:] = rng.normal(0.0, 0.05, layer.box_head.fc2.weight.shape)
    img = rng.uniform(0, 1, (1, 8, 8, 1))
    gt = Tensor(np.array([[[0.9, 1.0, 1.1, 0.8], [1.2, 1.3, 0.7, 0.9]]]))

    def loss():
        boxes = model(img, with_aux=False).main.layers[1].boxes
        return nx.tabs(boxes - gt).sum() + (1.0 - elementwise_giou(boxes, gt)).sum()

    return model, loss, model.layers[0].box_head.parameters()


def _central_differences(loss, params, h=1e-5):
    out = []
    for p in params:
        flat = p.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            with nx.no_grad():
                flat[j] = orig + h
                up = loss().item()
                flat[j] = orig - h
                down = loss().item()
            flat[j] = orig
            out.append((up - down) / (2 * h))
    return np.array(out)


def test_lft_off_cuts_previous_box_path():
    model, loss, params = _lft_setup(False)
    nx.backward(loss())
    assert all(not p.grad.any() for p in params)
    assert np.max(np.abs(_central_differences(loss, params))) <= 1e-10


def test_lft_on_reaches_previous_delta_head():
    model, loss, params = _lft_setup(True)
    nx.backward(loss())
    analytic = np.concatenate([p.grad.reshape(-1) for p in params])
    numeric = _central_differences(loss, params)
    assert np.max(np.abs(numeric)) > 1e-3
    assert np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))) <= 1e-6


# -- composed gradient ----------------------------------------------------------


def test_composed_pipeline_gradient_few_instances():
    assert max(composed_pipeline_error(s) for s in range(5)) <= 1e-3
