import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mplexattn import autograd as ag
from mplexattn.autograd import Parameter, Tensor


def _param(rng, shape, name="x", scale=1.0):
    return Parameter(rng.normal(scale=scale, size=shape), name)


# ---------------------------------------------------------------------------
# forward values


def test_matmul_identity_and_hand_values():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ag.matmul(a, Tensor(np.eye(2))).data, a.data)
    assert np.array_equal((a @ Tensor([[1.0], [1.0]])).data, [[3.0], [7.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        ag.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_values():
    assert np.allclose(ag.softmax(Tensor([[2.0, 2.0, 2.0]])).data, 1 / 3, atol=0, rtol=1e-15)
    out = ag.softmax(Tensor([[1000.0, 0.0]])).data
    assert out[0, 0] == 1.0 and out[0, 1] == 0.0


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 7)),
              elements=st.floats(-1e6, 1e6, allow_nan=False)))
def test_softmax_rows_are_distributions(x):
    out = ag.softmax(Tensor(x), axis=-1).data
    assert np.all(out >= 0)
    assert np.all(np.abs(out.sum(axis=-1) - 1.0) <= 1e-9)


def test_masked_softmax_respects_mask():
    x = Tensor([[1.0, 5.0, 2.0], [0.0, 0.0, 0.0]])
    mask = np.array([[True, False, True], [False, False, False]])
    out = ag.masked_softmax(x, mask).data
    assert out[0, 1] == 0.0
    assert out[0, 0] + out[0, 2] == pytest.approx(1.0, abs=1e-15)
    assert np.all(out[1] == 0.0)


def test_elementwise_values():
    assert ag.sigmoid(Tensor([0.0])).data[0] == 0.5
    assert ag.leaky_relu(Tensor([-2.0]), 0.2).data[0] == pytest.approx(-0.4, abs=1e-15)
    assert ag.elu(Tensor([-1.0])).data[0] == pytest.approx(np.exp(-1) - 1)
    assert ag.concat([Tensor(np.ones(3)), Tensor(np.zeros(3))]).shape == (6,)
    with pytest.raises(ValueError):
        ag.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))], axis=-1)


def test_sigmoid_extremes_are_finite():
    out = ag.sigmoid(Tensor([-800.0, 800.0])).data
    assert out[0] == 0.0 and out[1] == 1.0


def test_non_finite_result_names_the_operation():
    with pytest.raises(ag.NonFiniteError, match="log"):
        ag.log(Tensor([0.0]))


# ---------------------------------------------------------------------------
# dropout


def test_dropout_identity_cases():
    x = Tensor(np.arange(10.0))
    assert ag.dropout(x, 0.0, True, np.random.default_rng(0)) is x
    assert ag.dropout(x, 0.7, False) is x
    with pytest.raises(ValueError):
        ag.dropout(x, 1.0, True, np.random.default_rng(0))


def test_dropout_survivor_fraction_and_scaling():
    x = Tensor(np.ones(100_000))
    out = ag.dropout(x, 0.5, True, np.random.default_rng(7)).data
    survivors = out != 0
    assert abs(survivors.mean() - 0.5) <= 0.01
    assert np.all(out[survivors] == 2.0)


# ---------------------------------------------------------------------------
# backward


def test_backward_square_and_chain():
    x = Parameter([3.0], "x")
    ag.backward(ag.sum(x * x))
    assert x.grad[0] == 6.0
    y = Parameter([0.0], "y")
    ag.backward(ag.sum(ag.sigmoid(ag.mul(y, 2.0))))
    assert y.grad[0] == 0.5


def test_backward_requires_scalar():
    x = Parameter(np.ones(3), "x")
    with pytest.raises(ValueError):
        ag.backward(x * 2.0)


def test_unreachable_parameters_get_zero_gradient():
    x, unused = Parameter([1.0, 2.0], "x"), Parameter(np.ones((2, 2)), "unused")
    ag.backward(ag.sum(x * x), [x, unused])
    assert np.array_equal(x.grad, [2.0, 4.0])
    assert np.array_equal(unused.grad, np.zeros((2, 2)))


def test_shared_subexpression_accumulates():
    x = Parameter([2.0], "x")
    y = x * x
    ag.backward(ag.sum(y + y * 3.0))  # 4 x^2
    assert x.grad[0] == 16.0


def test_tape_visits_each_node_once_in_reverse_topological_order():
    x = Parameter(np.ones(3), "x")
    h = ag.exp(x)
    loss = ag.sum(h * h + h)
    tape = ag.Tape.from_loss(loss)
    ids = [id(n) for n in tape.nodes]
    assert len(ids) == len(set(ids))
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    for node in tape.nodes:
        for parent in node._parents:
            if parent.requires_grad:
                assert pos[id(parent)] > pos[id(node)]


def test_backward_is_bitwise_deterministic(rng):
    W = _param(rng, (4, 3), "W")
    x = Tensor(rng.normal(size=(5, 4)))
    grads = []
    for _ in range(2):
        ag.zero_grad([W])
        ag.backward(ag.sum(ag.softmax(x @ W) * ag.elu(x @ W)))
        grads.append(W.grad.copy())
    assert grads[0].tobytes() == grads[1].tobytes()


OPS = {
    "add": lambda a, b: ag.add(a, b),
    "sub": lambda a, b: ag.sub(a, b),
    "mul": lambda a, b: ag.mul(a, b),
    "matmul": lambda a, b: ag.matmul(a, ag.transpose(b)),
    "batched_matmul": lambda a, b: ag.matmul(ag.reshape(a, (1, 3, 4)), ag.reshape(ag.transpose(b), (1, 4, 3))),
    "swapaxes": lambda a, b: ag.mul(ag.swapaxes(a, 0, 1), ag.transpose(b)),
    "broadcast_row": lambda a, b: ag.add(a, ag.broadcast_to(ag.reshape(ag.take(b, 0), (1, 4)), (3, 4))),
    "sum_axis": lambda a, b: ag.mul(ag.sum(a, axis=0, keepdims=True), b),
    "mean": lambda a, b: ag.mul(ag.mean(a, axis=1), ag.mean(b)),
    "exp": lambda a, b: ag.exp(ag.mul(a, 0.5)),
    "log": lambda a, b: ag.log(ag.add(ag.mul(a, a), 1.0)),
    "clip": lambda a, b: ag.clip(a, -0.5, 0.5),
    "sigmoid": lambda a, b: ag.sigmoid(a),
    "relu": lambda a, b: ag.relu(a),
    "leaky_relu": lambda a, b: ag.leaky_relu(a, 0.2),
    "elu": lambda a, b: ag.elu(a),
    "softmax": lambda a, b: ag.softmax(a, axis=-1),
    "softmax_axis0": lambda a, b: ag.softmax(a, axis=0),
    "masked_softmax": lambda a, b: ag.masked_softmax(a, np.array([[1, 0, 1, 1], [0, 0, 0, 0], [1, 1, 0, 1]], bool)),
    "concat": lambda a, b: ag.concat([a, b], axis=-1),
    "take": lambda a, b: ag.take(a, np.array([2, 0, 2])),
    "reshape": lambda a, b: ag.reshape(a, (2, 6)),
    "dropout_eval": lambda a, b: ag.dropout(a, 0.3, False),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_operation_gradient_matches_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    # keep kinks of relu/leaky/clip/elu away from the evaluation points
    a_data = rng.uniform(0.1, 1.0, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4))
    if name == "clip":
        a_data = np.where(np.abs(np.abs(a_data) - 0.5) < 0.05, a_data * 0.5, a_data)
    a = Parameter(a_data, "a")
    b = Parameter(rng.normal(size=(3, 4)), "b")
    proj = rng.normal(size=OPS[name](a, b).shape)
    err = ag.finite_difference_check(lambda: ag.sum(ag.mul(OPS[name](a, b), proj)), [a, b], n_samples=None)
    assert err < 1e-6, f"{name}: max relative error {err:.2e}"


def test_train_mode_dropout_gradient_with_fixed_mask():
    a = Parameter(np.random.default_rng(3).normal(size=(4, 5)), "a")
    err = ag.finite_difference_check(
        lambda: ag.sum(ag.dropout(a * a, 0.4, True, np.random.default_rng(11))), [a], n_samples=None)
    assert err < 1e-6


def test_linear_model_finite_difference_is_exact():
    rng = np.random.default_rng(0)
    W = Parameter(rng.normal(size=(3, 2)), "W")
    x = Tensor(rng.normal(size=(5, 3)))
    c = rng.normal(size=(5, 2))
    assert ag.finite_difference_check(lambda: ag.sum(ag.mul(x @ W, c)), [W], n_samples=None) < 1e-9


# ---------------------------------------------------------------------------
# optimisation


def test_clip_global_norm():
    p = Parameter(np.zeros(2), "p")
    p.grad = np.array([6.0, 8.0])
    assert ag.clip_global_norm([p], 1.0) == pytest.approx(0.1)
    assert ag.global_grad_norm([p]) == pytest.approx(1.0)
    p.grad = np.array([0.3, 0.4])
    assert ag.clip_global_norm([p], 1.0) == 1.0
    assert np.array_equal(p.grad, [0.3, 0.4])


@settings(max_examples=100, deadline=None)
@given(st.lists(arrays(np.float64, st.integers(1, 6), elements=st.floats(-1e3, 1e3)), min_size=1, max_size=4),
       st.floats(1e-3, 10.0))
def test_clip_global_norm_bounds_the_norm(grads, max_norm):
    params = [Parameter(np.zeros_like(g), f"p{i}") for i, g in enumerate(grads)]
    for p, g in zip(params, grads):
        p.grad = g.copy()
    ag.clip_global_norm(params, max_norm)
    assert ag.global_grad_norm(params) <= max_norm + 1e-9


def test_adam_first_step_hand_value():
    p = Parameter([0.0], "p")
    p.grad = np.array([1.0])
    ag.adam_step([p], lr=0.1)
    # m_hat = 1, v_hat = 1 -> update = 0.1 / (1 + 1e-8)
    assert p.data[0] == pytest.approx(-0.1 / (1.0 + 1e-8), abs=1e-15)
    assert p.step == 1 and p.grad is None


def test_adam_zero_gradient_from_fresh_state_is_a_no_op():
    p = Parameter([0.5, -1.0], "p")
    p.grad = np.zeros(2)
    ag.adam_step([p], lr=0.1)
    assert np.array_equal(p.data, [0.5, -1.0])
    assert np.array_equal(p.m, [0.0, 0.0]) and np.array_equal(p.v, [0.0, 0.0])


def test_adam_zero_gradient_decays_warm_moments():
    p = Parameter([0.5], "p")
    p.m[:] = 0.2
    p.v[:] = 0.04
    p.step = 3
    p.grad = np.zeros(1)
    ag.adam_step([p], lr=0.1)
    m, v = 0.9 * 0.2, 0.999 * 0.04
    assert p.m[0] == pytest.approx(m) and p.v[0] == pytest.approx(v)
    expected = 0.5 - 0.1 * (m / (1 - 0.9**4)) / (np.sqrt(v / (1 - 0.999**4)) + 1e-8)
    assert p.data[0] == pytest.approx(expected, abs=1e-15)
    assert p.step == 4


def test_adam_runs_are_bitwise_identical():
    def run():
        rng = np.random.default_rng(5)
        W = Parameter(rng.normal(size=(3, 3)), "W")
        x = Tensor(rng.normal(size=(8, 3)))
        for _ in range(20):
            ag.backward(ag.mean(ag.mul(ag.sigmoid(x @ W), ag.sigmoid(x @ W))))
            ag.clip_global_norm([W], 1.0)
            ag.adam_step([W], 0.05)
        return W.data.tobytes()

    assert run() == run()


def test_adam_rejects_non_finite_update():
    p = Parameter([1.0], "p")
    p.grad = np.array([np.inf])
    with pytest.raises(ag.NonFiniteError):
        ag.adam_step([p], 0.1)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path, rng):
    params = [Parameter(rng.normal(size=(3, 4)), "attn.W_q"), Parameter(rng.normal(size=(1,)), "head.b"),
              Parameter(np.array(2.5), "scalar")]
    path = tmp_path / "m.ckpt"
    ag.save_checkpoint(path, params, {"lr": 0.001})
    loaded = ag.load_checkpoint(path)
    assert list(loaded) == ["attn.W_q", "head.b", "scalar"]
    for p in params:
        assert np.array_equal(loaded[p.name], p.data.astype(np.float32).astype(np.float64))
    raw = path.read_bytes()
    assert raw[:8] == ag.CHECKPOINT_MAGIC
    # header + per tensor: name length, name, ndim, dims, float32 payload
    expected = 8 + 8 + sum(4 + len(p.name) + 4 + 4 * p.data.ndim + 4 * p.data.size for p in params)
    assert len(raw) == expected
    import json

    manifest = json.loads((tmp_path / "m.ckpt.json").read_text())
    assert manifest["fingerprint"] == ag.fingerprint({"lr": 0.001})
    assert [t["shape"] for t in manifest["tensors"]] == [[3, 4], [1], []]


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        ag.load_checkpoint(path)


def test_fingerprint_ignores_key_order():
    assert ag.fingerprint({"a": 1, "b": [1, 2]}) == ag.fingerprint({"b": [1, 2], "a": 1})
    assert ag.fingerprint({"a": 1}) != ag.fingerprint({"a": 2})
