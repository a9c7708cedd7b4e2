import math

import numpy as np
import numpy.testing as npt
import pytest

import mmlm.tensor as T
from mmlm.errors import ConfigError, DataError, DimensionError, StateError, UsageError


def test_tensor_wraps_2d_and_promotes():
    t = T.const([[1, 2], [3, 4]])
    assert t.shape == (2, 2)
    assert t.dtype == np.float64
    row = T.const([1.0, 2.0, 3.0])
    assert row.shape == (1, 3)
    scalar = T.const(5.0)
    assert scalar.shape == (1, 1)
    assert scalar.item() == 5.0


def test_tensor_rejects_higher_rank():
    with pytest.raises(DimensionError):
        T.const(np.zeros((2, 2, 2)))


def test_matmul_known_value():
    a = T.const([[1.0, 2.0]])
    b = T.const([[3.0], [4.0]])
    npt.assert_array_equal(T.matmul(a, b).data, [[11.0]])


def test_matmul_shape_error_names_both_shapes():
    a = T.const(np.zeros((2, 3)))
    b = T.const(np.zeros((2, 3)))
    with pytest.raises(DimensionError) as ei:
        T.matmul(a, b)
    assert "(2, 3)" in str(ei.value)


def test_mixed_precision_rejected():
    a = T.const(np.zeros((2, 2), dtype=np.float32))
    b = T.const(np.zeros((2, 2), dtype=np.float64))
    with pytest.raises(ConfigError):
        T.add(a, b)
    with pytest.raises(ConfigError):
        T.matmul(a, b)


def test_matmul_backward_hand_computed():
    # c = a @ b, loss = sum(c):  da = ones @ b.T, db = a.T @ ones
    a = T.param([[1.0, 2.0], [3.0, 4.0]])
    b = T.param([[5.0, 6.0], [7.0, 8.0]])
    T.backward(T.sum_all(T.matmul(a, b)))
    npt.assert_array_equal(a.grad, [[11.0, 15.0], [11.0, 15.0]])
    npt.assert_array_equal(b.grad, [[4.0, 4.0], [6.0, 6.0]])


def test_add_and_hadamard_require_same_shape():
    a = T.const(np.zeros((2, 3)))
    b = T.const(np.zeros((3, 2)))
    with pytest.raises(DimensionError):
        T.add(a, b)
    with pytest.raises(DimensionError):
        T.hadamard(a, b)


def test_hadamard_backward():
    a = T.param([[2.0, 3.0]])
    b = T.param([[5.0, 7.0]])
    T.backward(T.sum_all(a * b))
    npt.assert_array_equal(a.grad, [[5.0, 7.0]])
    npt.assert_array_equal(b.grad, [[2.0, 3.0]])


def test_activations_known_values():
    x = T.const([[0.0, 0.5, -1.0]])
    npt.assert_allclose(T.sigmoid(x).data, [[0.5, 0.6224593312018546, 0.2689414213699951]], rtol=1e-12)
    npt.assert_allclose(T.tanh(x).data, [[0.0, 0.46211715726000974, -0.7615941559557649]], rtol=1e-12)
    npt.assert_array_equal(T.relu(x).data, [[0.0, 0.5, 0.0]])
    npt.assert_array_equal(T.identity(x).data, x.data)


def test_sigmoid_extreme_inputs_stay_finite():
    x = T.const([[-1000.0, 1000.0]])
    with np.errstate(over="raise"):
        y = T.sigmoid(x)
    npt.assert_allclose(y.data, [[0.0, 1.0]], atol=1e-12)


def test_relu_derivative_zero_at_zero():
    x = T.param([[-1.0, 0.0, 2.0]])
    T.backward(T.sum_all(T.relu(x)))
    npt.assert_array_equal(x.grad, [[0.0, 0.0, 1.0]])


def test_elementwise_dispatch():
    x = T.const([[1.0, -1.0]])
    y = T.const([[2.0, 2.0]])
    npt.assert_array_equal(T.elementwise("relu", x).data, [[1.0, 0.0]])
    npt.assert_array_equal(T.elementwise("add", x, y).data, [[3.0, 1.0]])
    npt.assert_array_equal(T.elementwise("hadamard", x, y).data, [[2.0, -2.0]])
    with pytest.raises(UsageError):
        T.elementwise("tanh", x, y)
    with pytest.raises(UsageError):
        T.elementwise("add", x)
    with pytest.raises(UsageError):
        T.elementwise("gelu", x)


def test_softmax_known_value():
    x = T.const([[math.log(1.0), math.log(3.0)]])
    npt.assert_allclose(T.softmax_rows(x).data, [[0.25, 0.75]], rtol=1e-12)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = T.const(rng.uniform(-50, 50, (4, 9)))
        y = T.softmax_rows(x).data
        assert y.min() >= 0.0
        npt.assert_allclose(y.sum(axis=1), np.ones(4), atol=1e-6)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(1)
    x = rng.uniform(-5, 5, (3, 7))
    a = T.softmax_rows(T.const(x)).data
    b = T.softmax_rows(T.const(x + 123.0)).data
    npt.assert_allclose(a, b, atol=1e-12)


def test_log_softmax_matches_log_of_softmax():
    rng = np.random.default_rng(2)
    x = rng.uniform(-10, 10, (5, 6))
    npt.assert_allclose(
        T.log_softmax_rows(T.const(x)).data,
        np.log(T.softmax_rows(T.const(x)).data),
        atol=1e-12,
    )


def test_transpose_backward():
    a = T.param([[1.0, 2.0, 3.0]])
    w = T.const([[1.0], [10.0], [100.0]])
    T.backward(T.sum_all(T.hadamard(T.transpose(a), w)))
    npt.assert_array_equal(a.grad, [[1.0, 10.0, 100.0]])


def test_add_row_and_mul_row():
    x = T.param([[1.0, 2.0], [3.0, 4.0]])
    v = T.param([[10.0, 20.0]])
    out = T.add_row(x, v)
    npt.assert_array_equal(out.data, [[11.0, 22.0], [13.0, 24.0]])
    T.backward(T.sum_all(out))
    npt.assert_array_equal(x.grad, np.ones((2, 2)))
    npt.assert_array_equal(v.grad, [[2.0, 2.0]])  # bias grad sums over rows

    x2 = T.param([[1.0, 2.0], [3.0, 4.0]])
    v2 = T.param([[10.0, 20.0]])
    out2 = T.mul_row(x2, v2)
    npt.assert_array_equal(out2.data, [[10.0, 40.0], [30.0, 80.0]])
    T.backward(T.sum_all(out2))
    npt.assert_array_equal(x2.grad, [[10.0, 20.0], [10.0, 20.0]])
    npt.assert_array_equal(v2.grad, [[4.0, 6.0]])


def test_row_ops_reject_bad_vector_shape():
    x = T.const(np.zeros((2, 3)))
    v = T.const(np.zeros((1, 2)))
    with pytest.raises(DimensionError):
        T.add_row(x, v)
    with pytest.raises(DimensionError):
        T.mul_row(x, v)


def test_embed_columns_forward_and_backward():
    w = T.param([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])  # hidden=2, vocab=3
    out = T.embed_columns(w, np.array([2, 0, 2]))
    npt.assert_array_equal(out.data, [[3.0, 6.0], [1.0, 4.0], [3.0, 6.0]])
    T.backward(T.sum_all(out))
    # column 2 looked up twice, column 0 once, column 1 never
    npt.assert_array_equal(w.grad, [[1.0, 0.0, 2.0], [1.0, 0.0, 2.0]])


def test_embed_columns_rejects_out_of_range():
    w = T.const(np.zeros((2, 3)))
    with pytest.raises(DataError):
        T.embed_columns(w, np.array([0, 3]))
    with pytest.raises(DataError):
        T.embed_columns(w, np.array([-1]))


def test_take_per_row():
    x = T.param([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    out = T.take_per_row(x, np.array([2, 0]))
    npt.assert_array_equal(out.data, [[3.0], [4.0]])
    T.backward(T.scale(T.sum_all(out), 2.0))
    npt.assert_array_equal(x.grad, [[0.0, 0.0, 2.0], [2.0, 0.0, 0.0]])
    with pytest.raises(DimensionError):
        T.take_per_row(x, np.array([0]))
    with pytest.raises(DataError):
        T.take_per_row(x, np.array([0, 3]))


def test_backward_requires_scalar():
    a = T.param(np.ones((2, 2)))
    with pytest.raises(DimensionError):
        T.backward(T.scale(a, 2.0))


def test_backward_twice_is_state_error():
    a = T.param(np.ones((1, 1)))
    loss = T.sum_all(T.scale(a, 3.0))
    T.backward(loss)
    with pytest.raises(StateError):
        T.backward(loss)


def test_constant_loss_leaves_grads_zero():
    a = T.param(np.ones((2, 2)))
    loss = T.sum_all(T.const(np.ones((1, 1))))
    T.backward(loss)
    npt.assert_array_equal(a.grad, np.zeros((2, 2)))


def test_shared_subexpression_visited_once():
    # h is used twice; d(h*h + h)/da at a=3 is 2a + 1 = 7
    a = T.param([[3.0]])
    h = T.identity(a)
    loss = T.sum_all(T.add(T.hadamard(h, h), h))
    T.backward(loss)
    npt.assert_array_equal(a.grad, [[7.0]])


def test_grad_accumulates_across_tapes_until_zeroed():
    a = T.param([[1.0]])
    T.backward(T.sum_all(T.scale(a, 2.0)))
    T.backward(T.sum_all(T.scale(a, 3.0)))
    npt.assert_array_equal(a.grad, [[5.0]])
    T.zero_grad([a])
    npt.assert_array_equal(a.grad, [[0.0]])


def test_clip_gradients():
    grads = {"w": np.array([[3.0, -2.5, 1.0]]), "b": np.array([[-7.0]])}
    clipped = T.clip_gradients(grads, 2.0)
    npt.assert_array_equal(clipped["w"], [[2.0, -2.0, 1.0]])
    npt.assert_array_equal(clipped["b"], [[-2.0]])
    # already inside the bound: unchanged
    npt.assert_array_equal(T.clip_gradients(np.array([0.5, -0.5]), 2.0), [0.5, -0.5])
    with pytest.raises(ConfigError):
        T.clip_gradients(grads, 0.0)
    with pytest.raises(ConfigError):
        T.clip_gradients(grads, -1.0)


def test_finite_diff_check_rejects_float32_and_bad_eps():
    a = T.param(np.ones((1, 1), dtype=np.float32))
    with pytest.raises(ConfigError):
        T.finite_diff_check(lambda: T.sum_all(a), [a])
    b = T.param(np.ones((1, 1)))
    with pytest.raises(ConfigError):
        T.finite_diff_check(lambda: T.sum_all(b), [b], eps=0.0)


def test_finite_diff_check_flags_wrong_gradient():
    # a deliberately broken backward must push the reported error toward 1
    a = T.param([[0.3]])

    def loss():
        out = T._result(a.data * 2.0, (a,), lambda g: T._accum(a, g * 5.0))
        return T.sum_all(out)

    assert T.finite_diff_check(loss, [a]) > 0.4


def test_finite_diff_random_graphs_stay_tight():
    worst = 0.0
    for seed in range(30):
        rng = np.random.default_rng(seed)
        a = T.param(rng.uniform(-1, 1, (3, 4)))
        b = T.param(rng.uniform(-1, 1, (4, 5)))
        v = T.param(rng.uniform(-1, 1, (1, 5)))
        emb_ids = rng.integers(0, 4, size=3)
        pick_cols = rng.integers(0, 5, size=3)

        def loss():
            x = T.add_row(T.matmul(a, b), v)
            g1 = T.sigmoid(x)
            g2 = T.tanh(T.mul_row(x, v))
            mixed = T.add(T.hadamard(g1, g2), T.scale(g2, 0.5))
            pick = T.take_per_row(T.log_softmax_rows(mixed), pick_cols)
            e = T.embed_columns(a, emb_ids)
            return T.add(T.sum_all(pick), T.sum_all(T.softmax_rows(e)))

        worst = max(worst, T.finite_diff_check(loss, [a, b, v], eps=1e-5))
    assert worst < 1e-6, worst


def test_seed_stream_deterministic_and_name_split():
    a1 = T.seed_stream(7, "init").uniform(size=5)
    a2 = T.seed_stream(7, "init").uniform(size=5)
    b = T.seed_stream(7, "shuffle").uniform(size=5)
    c = T.seed_stream(8, "init").uniform(size=5)
    npt.assert_array_equal(a1, a2)
    assert not np.allclose(a1, b)
    assert not np.allclose(a1, c)
