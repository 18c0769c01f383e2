import json
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from plaindetr import numerics as nx
from plaindetr.errors import ContractError, DimensionError, NumericsError
from plaindetr.numerics import Tensor

from _oracles import PRIMITIVES, op_case


def leaf(a):
    return Tensor(a, requires_grad=True)


# -- matmul -----------------------------------------------------------------


def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(2, 2))
    assert np.array_equal(nx.matmul(Tensor(np.eye(2)), Tensor(a)).data, a)


def test_matmul_hand_case_matches_triple_loop():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[1.0], [1.0]])
    ref = np.zeros((2, 1))
    for i in range(2):
        for j in range(1):
            for k in range(2):
                ref[i, j] += a[i, k] * b[k, j]
    out = nx.matmul(Tensor(a), Tensor(b)).data
    assert np.array_equal(out, ref)
    assert out.tolist() == [[3.0], [7.0]]


def test_matmul_shape_mismatch_reports_both_shapes():
    with pytest.raises(DimensionError) as exc:
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    assert "(2, 3)" in str(exc.value)


def test_matmul_batched():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(3, 2, 4)), rng.normal(size=(3, 4, 5))
    assert np.allclose(nx.matmul(Tensor(a), Tensor(b)).data, np.einsum("bik,bkj->bij", a, b), atol=1e-14)


# -- softmax ------------------------------------------------------------------


def test_softmax_symmetric():
    assert nx.softmax_last(Tensor([0.0, 0.0])).data.tolist() == [0.5, 0.5]


def test_softmax_direct_formula():
    x = np.array([1.0, 2.0, 3.0])
    ref = np.exp(x) / np.exp(x).sum()
    assert np.max(np.abs(nx.softmax_last(Tensor(x)).data - ref)) <= 1e-12


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-1e3, 1e3)), st.floats(-50, 50))
@settings(max_examples=100, deadline=None)
def test_softmax_rows_and_shift(x, c):
    s = nx.softmax_last(Tensor(x)).data
    assert np.all(s >= 0)
    assert np.all(np.abs(s.sum(axis=-1) - 1) <= 1e-9)
    assert np.max(np.abs(nx.softmax_last(Tensor(x + c)).data - s)) <= 1e-12


def test_softmax_empty_axis():
    with pytest.raises(DimensionError):
        nx.softmax_last(Tensor(np.zeros((2, 0))))


# -- backward -----------------------------------------------------------------


def test_backward_sum():
    x = leaf([1.0, 2.0, 3.0])
    nx.backward(x.sum())
    assert x.grad.tolist() == [1.0, 1.0, 1.0]


def test_backward_square():
    x = leaf(3.0)
    nx.backward((x * x).sum())
    assert x.grad == 6.0


def test_backward_accumulates_without_reset():
    x = leaf([2.0])
    nx.backward((x * x).sum())
    nx.backward((x * x).sum())
    assert x.grad.tolist() == [8.0]


def test_backward_fanout_adds():
    x = leaf([1.5])
    y = x * 2.0
    nx.backward((y + y * y).sum())
    assert x.grad[0] == pytest.approx(2 + 8 * 1.5)


def test_backward_non_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(ContractError):
        nx.backward(x * 2.0)


def test_tape_reverse_execution_order():
    x = leaf([1.0, 2.0])
    a = nx.exp(x)
    b = nx.sigmoid(a)
    c = b.sum()
    tape = nx.Tape.from_loss(c)
    seqs = [n._seq for n in tape.nodes]
    assert seqs == sorted(seqs, reverse=True)
    assert tape.ops()[0] == "sum" and tape.ops()[-1] == "exp"


def test_mlp_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    mlp = nx.FeedForward(5, 7, 3, rng)
    x = Tensor(rng.normal(size=(4, 5)))
    w = Tensor(rng.normal(size=(4, 3)))
    params = list(mlp.parameters())
    assert nx.finite_diff_check(lambda: (mlp(x) * w).sum(), params) <= 1e-4


def test_backward_bit_deterministic():
    def grads():
        rng = np.random.default_rng(3)
        mlp = nx.FeedForward(4, 6, 2, rng)
        x = Tensor(rng.normal(size=(3, 4)))
        nx.backward(nx.softmax_last(mlp(x)).sum() + nx.layer_norm(mlp(x), Tensor(np.ones(2)), Tensor(np.zeros(2))).mean())
        return [p.grad.copy() for p in mlp.parameters()]

    for a, b in zip(grads(), grads()):
        assert np.array_equal(a, b)


def test_elementwise_rejects_implicit_broadcast():
    with pytest.raises(DimensionError):
        nx.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))
    assert nx.add(Tensor(np.ones((2, 3))), 1.0).data.sum() == 12.0


def test_non_finite_forward_raises_in_debug():
    with nx.debug_checks(True), pytest.raises(NumericsError):
        nx.log(Tensor([0.0]))
    with nx.debug_checks(False):
        assert np.isinf(nx.log(Tensor([0.0])).data[0])


# -- finite differences -------------------------------------------------------


def test_fd_square():
    x = leaf(3.0)
    assert nx.finite_diff_check(lambda: x * x, [x], h=1e-5) <= 1e-8


def test_fd_constant():
    x = leaf([1.0, 2.0])
    assert nx.finite_diff_check(lambda: Tensor(5.0) + 0.0 * x.sum(), [x]) == 0.0


def test_fd_focal_two_steps():
    from plaindetr.matching import focal_loss

    rng = np.random.default_rng(4)
    x = leaf(rng.normal(size=(6, 3)) * 2)
    tgt = rng.integers(-1, 3, size=6)
    f = lambda: focal_loss(x, tgt)  # noqa: E731
    assert nx.finite_diff_check(f, [x], h=1e-5) <= 1e-4
    assert nx.finite_diff_check(f, [x], h=1e-4) <= 1e-4


def test_fd_names_bad_coordinate():
    x = Tensor([1.0, 1e-6], requires_grad=True, name="x")

    def f():
        with nx.debug_checks(False):
            return nx.log(x).sum()

    with pytest.raises(NumericsError, match=r"x.*flat index 1"):
        nx.finite_diff_check(f, [x], h=1e-5)


@pytest.mark.parametrize("name", PRIMITIVES)
def test_primitive_gradients(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = max(nx.finite_diff_check(*op_case(name, rng)) for _ in range(100))
    assert worst <= 1e-4


# -- optimizer ----------------------------------------------------------------


def _one_param(v):
    return {"p": leaf(np.array(v, dtype=float))}


def test_adamw_zero_lr():
    params = _one_param([1.0, -2.0])
    st_ = nx.OptimState(lr=0.0, weight_decay=0.1)
    nx.adamw_step(st_, params, {"p": np.array([0.3, 0.4])})
    assert params["p"].data.tolist() == [1.0, -2.0]


def test_adamw_first_step_formula():
    g = np.array([0.5, -2.0, 1e-3])
    params = _one_param([0.0, 0.0, 0.0])
    st_ = nx.OptimState(lr=0.01)
    nx.adamw_step(st_, params, {"p": g})
    assert np.allclose(params["p"].data, -0.01 * g / (np.abs(g) + st_.eps), rtol=1e-9, atol=0)
    assert st_.step == 1


def test_adamw_decay_only():
    params = _one_param([2.0, -4.0])
    st_ = nx.OptimState(lr=0.1, weight_decay=0.5)
    nx.adamw_step(st_, params, {"p": np.zeros(2)})
    assert np.allclose(params["p"].data, np.array([2.0, -4.0]) * (1 - 0.05), rtol=0, atol=1e-15)


def test_adamw_shape_mismatch():
    with pytest.raises(DimensionError):
        nx.adamw_step(nx.OptimState(), _one_param([1.0]), {"p": np.zeros(2)})


def test_adamw_step_counter_monotone():
    params = _one_param([1.0])
    opt = nx.AdamW(params, lr=0.1)
    steps = []
    for _ in range(3):
        params["p"].grad[:] = 1.0
        opt.step()
        steps.append(opt.state.step)
    assert steps == [1, 2, 3]
    assert opt.state.m["p"].shape == params["p"].shape


def test_clip_grad_norm():
    params = {"a": leaf([3.0]), "b": leaf([4.0])}
    params["a"].grad[:] = 3.0
    params["b"].grad[:] = 4.0
    assert nx.clip_grad_norm(params, 1.0) == 5.0
    norm = np.sqrt(params["a"].grad[0] ** 2 + params["b"].grad[0] ** 2)
    assert norm == pytest.approx(1.0, abs=1e-6)


# -- checkpoints --------------------------------------------------------------


def test_checkpoint_bit_exact(tmp_path):
    rng = np.random.default_rng(5)
    arrays = {"w": rng.normal(size=(3, 4)), "b": np.array([np.pi, -0.0, 1e-310]), "s": np.array(2.5)}
    manifest = nx.save_arrays(tmp_path / "ck", arrays, {"step": 7})
    back, meta = nx.load_arrays(manifest)
    assert meta == {"step": 7}
    for k, v in arrays.items():
        assert back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()
    spec = json.loads(manifest.read_text())
    assert spec["format"] == "f64le"
    assert [p["offset"] for p in spec["params"]] == [0, 96, 120]
    assert (tmp_path / "ck.bin").stat().st_size == 128


def test_module_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    a = nx.FeedForward(3, 5, 2, rng)
    b = nx.FeedForward(3, 5, 2, np.random.default_rng(7))
    path = nx.save_arrays(tmp_path / "m", a.state_arrays())
    b.load_arrays(nx.load_arrays(path)[0])
    x = Tensor(rng.normal(size=(2, 3)))
    assert np.array_equal(a(x).data, b(x).data)
