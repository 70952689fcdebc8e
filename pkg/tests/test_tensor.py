import threading

import numpy as np
import pytest

from eaformer.exceptions import DomainError, NonFiniteError, ShapeError, TapeError
from eaformer.network.attention import weighted_attention
from eaformer.utils import tensor as T
from eaformer.utils.gradcheck import max_relative_error
from eaformer.utils.tensor import Tape, Tensor, backward


def _leaf(rng, *shape, low=None, high=None):
    if low is None:
        data = rng.standard_normal(shape)
    else:
        data = rng.uniform(low, high, size=shape)
    return Tensor(data, requires_grad=True)


# === matmul ===
def test_matmul_identity():
    out = T.matmul(np.eye(2), [[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])


def test_matmul_row_by_column():
    assert T.matmul([[1.0, 2.0]], [[3.0], [4.0]]).data.tolist() == [[11.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    a, b = _leaf(rng, 3, 3), _leaf(rng, 3, 3)
    assert max_relative_error(lambda: T.tensor_sum(T.matmul(a, b)), [a, b]) < 1e-6


# === softmax ===
def test_softmax_uniform_row():
    np.testing.assert_allclose(T.softmax_rows([[0.0, 0.0, 0.0]]).data, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-15)


def test_softmax_is_stable_for_large_logits():
    out = T.softmax_rows([[1000.0, 0.0, 0.0]]).data
    np.testing.assert_allclose(out, [[1.0, 0.0, 0.0]], atol=1e-12)


def test_softmax_two_entries_closed_form():
    e = np.e
    np.testing.assert_allclose(T.softmax_rows([[1.0, 0.0]]).data, [[e / (e + 1), 1 / (e + 1)]], atol=1e-15)
    np.testing.assert_allclose(T.softmax_rows([[1.0, 0.0]]).data, [[0.7311, 0.2689]], atol=1e-4)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(1)
    for _ in range(20):
        y = T.softmax_rows(rng.standard_normal((5, 7)) * 10).data
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)
        assert y.min() >= 0.0 and y.max() <= 1.0


def test_masked_softmax_excludes_keys_and_zeroes_empty_rows():
    mask = np.array([[True, False, True], [False, False, False]])
    y = T.softmax_rows([[0.0, 50.0, 0.0], [1.0, 2.0, 3.0]], mask).data
    np.testing.assert_allclose(y[0], [0.5, 0.0, 0.5], atol=1e-15)
    np.testing.assert_array_equal(y[1], [0.0, 0.0, 0.0])


# === elementwise ===
def test_hadamard_product():
    assert T.mul([1.0, 2.0], [3.0, 4.0]).data.tolist() == [3.0, 8.0]


def test_exp_of_zero():
    assert T.exp([0.0]).data.tolist() == [1.0]


def test_exp_gradient_is_exp():
    x = Tensor([0.3, -1.2, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = T.tensor_sum(T.exp(x))
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, np.exp(x.data), rtol=1e-15)
    assert max_relative_error(lambda: T.tensor_sum(T.exp(x)), [x]) < 1e-6


def test_elementwise_shape_mismatch():
    with pytest.raises(ShapeError):
        T.add(np.ones(2), np.ones(3))


def test_scalar_broadcast_is_allowed():
    assert T.mul([1.0, 2.0], 3.0).data.tolist() == [3.0, 6.0]


def test_log_of_non_positive_value():
    with pytest.raises(DomainError):
        T.log([1.0, 0.0])


def test_non_finite_values_are_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        T.exp([1000.0])


# === backward ===
def test_backward_of_sum():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        loss = T.tensor_sum(x)
    tape.backward(loss)
    assert x.grad.tolist() == [1.0, 1.0, 1.0]


def test_backward_power_rule_through_fan_out():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape():
        loss = T.tensor_sum(x * x)
    backward(loss)
    assert x.grad.tolist() == [2.0, 4.0]


def test_backward_requires_scalar_loss():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = T.scale(x, 2.0)
    with pytest.raises(TapeError):
        tape.backward(y)


def test_second_backward_on_same_tape_fails():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = T.tensor_sum(x)
    tape.backward(loss)
    with pytest.raises(TapeError):
        tape.backward(loss)


def test_records_are_replayed_in_reverse_order():
    x = Tensor([0.5], requires_grad=True)
    with Tape() as tape:
        y = T.exp(x)
        z = T.tensor_sum(T.mul(y, y))
    assert [r.op for r in tape.records] == ["exp", "mul", "sum"]
    tape.backward(z)
    np.testing.assert_allclose(x.grad, 2.0 * np.exp(2 * 0.5), rtol=1e-14)


def test_ops_without_tape_are_constants():
    x = Tensor([1.0], requires_grad=True)
    y = T.exp(x)
    assert not y.requires_grad


def test_weighted_attention_pipeline_gradient():
    rng = np.random.default_rng(2)
    q, k, v = _leaf(rng, 3, 4), _leaf(rng, 5, 4), _leaf(rng, 5, 4)
    w = rng.uniform(0.0, 1.0, (3, 5))
    c = rng.standard_normal((3, 4))
    fn = lambda: T.tensor_sum(T.mul(weighted_attention(w, q, k, v, n_heads=2), c))
    assert max_relative_error(fn, [q, k, v], h=1e-5) < 1e-4


# === finite-difference property over many seeds ===
def _composite(a, b, x, w, c):
    logits = T.mul(T.matmul(a, b), w)
    attn = T.softmax_rows(logits)
    y = T.add(T.layer_norm_rows(attn), T.gelu(T.matmul(a, b)))
    z = T.add(T.tensor_sum(T.mul(y, c)), T.mean(T.log(T.power(x, 2.0))))
    return T.add(z, T.tensor_sum(T.tanh(T.sigmoid(T.neg(x)))))


@pytest.mark.parametrize("seed", range(100))
def test_random_composition_gradients(seed):
    rng = np.random.default_rng(seed)
    a, b = _leaf(rng, 2, 3), _leaf(rng, 3, 4)
    x = _leaf(rng, 3, low=0.5, high=2.0)
    w = rng.uniform(0.0, 1.0, (2, 4))
    c = rng.standard_normal((2, 4))
    assert max_relative_error(lambda: _composite(a, b, x, w, c), [a, b, x]) < 1e-4


def test_spatial_op_gradients():
    rng = np.random.default_rng(3)
    img = _leaf(rng, 4, 6, 2)
    c = rng.standard_normal((6, 18))
    fn = lambda: T.tensor_sum(T.mul(T.neighborhood3x3(T.avg_pool2d(img, 2)), c))
    assert max_relative_error(fn, [img]) < 1e-6


def test_avg_pool_requires_divisible_size():
    with pytest.raises(ShapeError):
        T.avg_pool2d(np.ones((5, 4, 1)), 2)


def test_determinism():
    rng = np.random.default_rng(4)
    a, b = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))
    first = T.softmax_rows(T.matmul(a, b)).data
    second = T.softmax_rows(T.matmul(a, b)).data
    assert first.tobytes() == second.tobytes()


def test_independent_tapes_on_threads():
    results = {}

    def run(k):
        x = Tensor([float(k), 1.0], requires_grad=True)
        with Tape() as tape:
            loss = T.tensor_sum(T.mul(x, x))
        tape.backward(loss)
        results[k] = x.grad.tolist()

    threads = [threading.Thread(target=run, args=(k,)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert results == {k: [2.0 * k, 2.0] for k in range(4)}
