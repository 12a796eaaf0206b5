import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eegdiff.numerics import (
    Adam, AdamState, NonFiniteError, Tensor, adam_step, backward, precision,
)
from eegdiff.numerics import ops
from eegdiff.numerics.gradcheck import check_gradients
from eegdiff.numerics.nn import Parameter


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


def test_matmul_identity_and_zero():
    b = np.random.default_rng(0).normal(size=(2, 5))
    with precision(np.float64):
        assert np.array_equal((Tensor(np.eye(2)) @ Tensor(b)).data, b)
        assert np.all((Tensor(b.T) @ Tensor(np.zeros((2, 3)))).data == 0)


def test_matmul_hand_example():
    with precision(np.float64):
        out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[5.0, 6.0], [7.0, 8.0]])
    assert out.data.tolist() == [[19, 22], [43, 50]]
    assert naive_matmul(np.array([[1, 2], [3, 4.0]]), np.array([[5, 6], [7, 8.0]])).tolist() == [[19, 22], [43, 50]]


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


@given(st.integers(1, 32), st.integers(1, 32), st.integers(1, 32), st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_matmul_matches_naive_loop(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
    with precision(np.float64):
        out = (Tensor(a) @ Tensor(b)).data
    np.testing.assert_allclose(out, naive_matmul(a, b), atol=1e-6)


def test_softmax_examples():
    with precision(np.float64):
        np.testing.assert_allclose(ops.softmax(Tensor([5.0, 5.0, 5.0])).data, [1 / 3] * 3)
        np.testing.assert_allclose(ops.softmax(Tensor([0.0, np.log(2.0)])).data, [1 / 3, 2 / 3])
    with pytest.raises(ValueError):
        ops.softmax(Tensor(np.zeros((2, 2))), axis=2)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=20), st.floats(-100, 100))
@settings(max_examples=60, deadline=None)
def test_softmax_sums_to_one_and_shift_invariant(xs, c):
    with precision(np.float64):
        x = np.array(xs)
        s = ops.softmax(Tensor(x)).data
        s2 = ops.softmax(Tensor(x + c)).data
    assert abs(s.sum() - 1.0) < 1e-6
    assert np.all(s >= 0) and np.all(s <= 1)
    np.testing.assert_allclose(s, s2, atol=1e-6)


def test_conv1d_examples():
    with precision(np.float64):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        ident = Tensor(np.eye(2).reshape(2, 2, 1))
        np.testing.assert_array_equal(ops.conv1d(x, ident).data, x.data)
        out = ops.conv1d(Tensor([[1.0, 2.0, 3.0, 4.0]]), Tensor([[[1.0, 1.0]]]), stride=2)
        assert out.data.tolist() == [[3.0, 7.0]]
        sig = Tensor(np.random.default_rng(1).normal(size=(3, 24)))
        k = Tensor(np.ones((5, 3, 4)))
        assert ops.conv1d(sig, k, stride=4).shape == (5, 6)
        with pytest.raises(ValueError):
            ops.conv1d(Tensor(np.ones((1, 3))), Tensor(np.ones((1, 1, 4))))


def test_conv1d_output_length_formula():
    with precision(np.float64):
        for L, K, s in [(10, 3, 1), (10, 3, 2), (11, 4, 3), (7, 7, 1)]:
            out = ops.conv1d(Tensor(np.ones((2, L))), Tensor(np.ones((1, 2, K))), stride=s)
            assert out.shape == (1, (L - K) // s + 1)


def test_backward_examples():
    with precision(np.float64):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
        g = backward(x.sum())
        np.testing.assert_array_equal(g[x], np.ones((3, 4)))
        y = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        assert backward((y * y).sum())[y].tolist() == [2.0, 4.0, 6.0]


def test_backward_rejects_non_scalar_and_skips_non_ancestors():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        backward(a * 2.0)
    grads = backward((a * 3.0).sum())
    assert a in grads and b not in grads


def test_gradient_accumulates_over_reuse():
    with precision(np.float64):
        x = Tensor([2.0], requires_grad=True)
        loss = (x * x + x * 3.0 + x).sum()
        assert backward(loss)[x].tolist() == [8.0]


def test_non_finite_raises():
    with pytest.raises(NonFiniteError):
        ops.log(Tensor([0.0]))


def test_two_layer_network_gradient():
    rng = np.random.default_rng(3)
    with precision(np.float64):
        x = Tensor(rng.normal(size=(5, 4)))
        w1 = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
        w2 = Tensor(rng.normal(size=(2, 6)), requires_grad=True)

        def f():
            return ops.linear(ops.tanh(ops.linear(x, w1)), w2).sum()

        assert check_gradients(f, [w1, w2]) < 1e-4


# Each op gets its own finite-difference check.
def _rand(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


OP_CASES = {
    "add_broadcast": lambda r: ((a := _rand(r, 3, 4)), (b := _rand(r, 4)), lambda: (a + b) * a),
    "mul": lambda r: ((a := _rand(r, 3, 4)), (b := _rand(r, 3, 4)), lambda: a * b),
    "div": lambda r: ((a := _rand(r, 3)), (b := Tensor(r.uniform(1, 2, 3), requires_grad=True)), lambda: a / b),
    "matmul_batched": lambda r: ((a := _rand(r, 2, 3, 4)), (b := _rand(r, 4, 5)), lambda: a @ b),
    "transpose": lambda r: ((a := _rand(r, 2, 3, 4)), (b := _rand(r, 4, 3, 2)), lambda: ops.transpose(a, (2, 1, 0)) * b),
    "reshape": lambda r: ((a := _rand(r, 2, 6)), (b := _rand(r, 3, 4)), lambda: a.reshape(3, 4) * b),
    "sum_axis": lambda r: ((a := _rand(r, 3, 4)), (b := _rand(r, 3)), lambda: a.sum(axis=1) * b),
    "mean_axis": lambda r: ((a := _rand(r, 3, 4)), (b := _rand(r, 4)), lambda: a.mean(axis=0) * b),
    "gelu": lambda r: ((a := _rand(r, 10)), (b := _rand(r, 10)), lambda: ops.gelu(a) * b),
    "tanh_sigmoid": lambda r: ((a := _rand(r, 10)), (b := _rand(r, 10)), lambda: ops.tanh(a) * ops.sigmoid(b)),
    "softmax": lambda r: ((a := _rand(r, 3, 5)), (b := _rand(r, 3, 5)), lambda: ops.softmax(a, axis=-1) * b),
    "softmax_axis0": lambda r: ((a := _rand(r, 3, 5)), (b := _rand(r, 3, 5)), lambda: ops.softmax(a, axis=0) * b),
    "log_softmax": lambda r: ((a := _rand(r, 3, 5)), (b := _rand(r, 3, 5)), lambda: ops.log_softmax(a) * b),
    "layer_norm": lambda r: ((a := _rand(r, 4, 6)), (b := _rand(r, 6)),
                             lambda: ops.layer_norm(a, b, b * 0.5) * ops.sigmoid(a)),
    "group_norm": lambda r: ((a := _rand(r, 2, 4, 3, 3)), (b := _rand(r, 4)),
                             lambda: ops.group_norm(a, 2, b, b * 0.3) * ops.tanh(a)),
    "l2_normalize": lambda r: ((a := _rand(r, 3, 5)), (b := _rand(r, 3, 5)), lambda: ops.l2_normalize(a) * b),
    "embedding": lambda r: ((a := _rand(r, 6, 3)), (b := _rand(r, 4, 3)), lambda: ops.embedding(a, [0, 2, 2, 5]) * b),
    "index_rows": lambda r: ((a := _rand(r, 2, 5, 3)), (b := _rand(r, 2, 2, 3)),
                             lambda: ops.index_rows(a, np.array([[0, 4], [3, 3]])) * b),
    "concat_getitem": lambda r: ((a := _rand(r, 2, 3)), (b := _rand(r, 2, 2)),
                                 lambda: ops.concat([a, b], axis=1)[:, 1:4] * 2.0),
    "conv1d": lambda r: ((a := _rand(r, 2, 9)), (b := _rand(r, 3, 2, 3)), lambda: ops.conv1d(a, b, stride=2)),
    "conv2d": lambda r: ((a := _rand(r, 2, 2, 5, 5)), (b := _rand(r, 3, 2, 3, 3)),
                         lambda: ops.conv2d(a, b, stride=2, padding=1) * ops.conv2d(a, b, stride=2, padding=1)),
    "upsample": lambda r: ((a := _rand(r, 1, 2, 2, 3)), (b := _rand(r, 1, 2, 4, 6)), lambda: ops.upsample_nearest2d(a) * b),
    "exp_log_sqrt": lambda r: ((a := _rand(r, 4)), (b := Tensor(r.uniform(0.5, 2, 4), requires_grad=True)),
                               lambda: ops.exp(a) * ops.log(b) + ops.sqrt(b)),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    with precision(np.float64):
        a, b, fn = OP_CASES[name](rng)
        weight = None

        def f():
            nonlocal weight
            out = fn()
            if weight is None:
                weight = np.random.default_rng(1).normal(size=out.shape)
            return (out * Tensor(weight)).sum()

        assert check_gradients(f, [a, b]) < 1e-4


def test_cross_entropy_gradient():
    rng = np.random.default_rng(5)
    with precision(np.float64):
        logits = _rand(rng, 4, 3)
        assert check_gradients(lambda: ops.cross_entropy(logits, [0, 2, 1, 2]), [logits]) < 1e-4


def test_adam_zero_gradient_leaves_params():
    p = [np.array([1.0, -2.0])]
    new, state = adam_step(p, [np.zeros(2)], AdamState(), lr=0.1)
    np.testing.assert_array_equal(new[0], p[0])
    assert state.step == 1


def test_adam_first_step_is_signed_lr():
    p = [np.array([0.0, 0.0, 0.0])]
    g = [np.array([0.5, -3.0, 1e-3])]
    new, _ = adam_step(p, g, AdamState(), lr=0.01, eps=1e-8)
    np.testing.assert_allclose(new[0], -0.01 * np.sign(g[0]), rtol=1e-4)


def test_adam_converges_on_quadratic():
    with precision(np.float64):
        w = Parameter(np.array([0.0]))
        opt = Adam([w], lr=0.1)
        for _ in range(100):
            opt.step(backward(((w - 3.0) * (w - 3.0)).sum()))
    assert abs(w.data[0] - 3.0) < 0.1


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step([np.zeros(2)], [np.zeros(3)], AdamState(), lr=0.1)


def test_training_step_bit_identical_on_replay():
    def run():
        rng = np.random.default_rng(11)
        w = Parameter(rng.normal(size=(4, 3)))
        x = Tensor(rng.normal(size=(8, 3)))
        opt = Adam([w], lr=1e-2)
        for _ in range(5):
            opt.step(backward(ops.mse(ops.gelu(ops.linear(x, w)), 0.5)))
        return w.data.tobytes()

    assert run() == run()


def test_distance_bias_values():
    from eegdiff.numerics.nn import distance_bias
    b = distance_bias(np.array([0, 2, 5]), 2)
    assert b.shape == (2, 3, 3)
    np.testing.assert_allclose(b[0], -(2.0**-4) * np.array([[0, 2, 5], [2, 0, 3], [5, 3, 0]]))
    np.testing.assert_allclose(b[1], -(2.0**-8) * np.array([[0, 2, 5], [2, 0, 3], [5, 3, 0]]))
    assert distance_bias(np.zeros((4, 6), np.int64), 3).shape == (4, 3, 6, 6)


def test_attention_bias_shifts_logits():
    from eegdiff.numerics.nn import MultiHeadAttention
    rng = np.random.default_rng(0)
    with precision(np.float64):
        mha = MultiHeadAttention(4, 2, rng)
        x = Tensor(rng.normal(size=(1, 3, 4)))
        # a uniform offset per query row leaves the softmax unchanged
        np.testing.assert_allclose(mha(x, np.full((3, 3), 7.0)).data, mha(x).data, atol=1e-12)
        # a huge penalty off the diagonal makes each token attend only to itself
        only_self = mha(x, np.where(np.eye(3, dtype=bool), 0.0, -1e9)).data
        expect = mha.out(mha.v(x)).data
        np.testing.assert_allclose(only_self, expect, atol=1e-9)


def test_relative_error_floor_for_exactly_zero_gradients():
    from eegdiff.numerics.gradcheck import relative_error
    noise = np.array([1e-17, -2e-17])
    assert relative_error(np.zeros(2), noise) == pytest.approx(1.0)
    assert relative_error(np.zeros(2), noise, floor=1e-7) < 1e-9
    # the floor never hides a real mismatch
    assert relative_error(np.array([1.0, 0.0]), np.array([1.1, 0.0]), floor=1e-7) == pytest.approx(0.1 / 1.1)
