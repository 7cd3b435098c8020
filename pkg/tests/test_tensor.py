import numpy as np
import pytest

from backwarp.errors import ContractError, DimensionError
from backwarp.tensor import Tensor, concat, narrow, no_grad, repeat_batch


def test_shape_and_data_roundtrip():
    arr = np.random.default_rng(0).standard_normal((2, 3, 4, 5)).astype(np.float32)
    t = Tensor(arr)
    assert t.shape == (2, 3, 4, 5)
    assert t.size == arr.size
    assert np.array_equal(t.data, arr)
    assert np.array_equal(t.numpy(), arr)


def test_grad_matches_shape_after_backward():
    x = Tensor(np.random.default_rng(1).standard_normal((2, 3, 4, 4)).astype(np.float32),
               requires_grad=True)
    (x * 2.0).sum().backward()
    assert x.grad is not None
    assert x.grad.shape == x.shape
    assert np.allclose(x.grad, 2.0)


def test_sum_backward_is_ones():
    x = Tensor(np.arange(12, dtype=np.float32).reshape(3, 4), requires_grad=True)
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((3, 4), np.float32))


def test_fanout_accumulates():
    y = Tensor(np.ones((2, 2), np.float32), requires_grad=True)
    (y + y).sum().backward()
    assert np.array_equal(y.grad, 2 * np.ones((2, 2), np.float32))


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2), np.float32), requires_grad=True)
    with pytest.raises(ContractError):
        (x * 1.0).backward()


def test_leaky_relu_values():
    x = Tensor(np.asarray([-1.0, 0.0, 2.0], np.float32))
    out = x.leaky_relu(0.1)
    assert np.allclose(out.data, [-0.1, 0.0, 2.0])


def test_abs_subgradient_zero_at_zero():
    x = Tensor(np.asarray([-2.0, 0.0, 3.0], np.float32), requires_grad=True)
    x.abs().sum().backward()
    assert np.array_equal(x.grad, [-1.0, 0.0, 1.0])


def test_mul_shapes_must_match():
    a = Tensor(np.ones((2, 3), np.float32))
    b = Tensor(np.ones((3, 2), np.float32))
    with pytest.raises(DimensionError):
        _ = a * b


def test_concat_channel_mismatch_message():
    a = Tensor(np.ones((1, 2, 4, 4), np.float32))
    b = Tensor(np.ones((1, 2, 4, 5), np.float32))
    with pytest.raises(DimensionError):
        concat([a, b], axis=1)


def test_concat_and_narrow_roundtrip():
    rng = np.random.default_rng(2)
    a = Tensor(rng.standard_normal((2, 3, 4, 4)).astype(np.float32))
    b = Tensor(rng.standard_normal((2, 5, 4, 4)).astype(np.float32))
    cat = concat([a, b], axis=1)
    assert cat.shape == (2, 8, 4, 4)
    assert np.array_equal(narrow(cat, 1, 0, 3).data, a.data)
    assert np.array_equal(narrow(cat, 1, 3, 5).data, b.data)


def test_repeat_batch_grad_sums():
    x = Tensor(np.ones((2, 1, 2, 2), np.float32), requires_grad=True)
    repeat_batch(x, 3).sum().backward()
    assert np.allclose(x.grad, 3.0)


def test_no_grad_blocks_graph():
    x = Tensor(np.ones((2, 2), np.float32), requires_grad=True)
    with no_grad():
        y = x * 5.0
    assert not y.requires_grad


def test_backward_deterministic():
    rng = np.random.default_rng(3)
    arr = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
    grads = []
    for _ in range(2):
        x = Tensor(arr.copy(), requires_grad=True)
        y = Tensor(arr.copy() * 0.5, requires_grad=True)
        loss = ((x * y) + x.leaky_relu(0.1)).abs().mean()
        loss.backward()
        grads.append((x.grad.copy(), y.grad.copy()))
    assert np.array_equal(grads[0][0], grads[1][0])
    assert np.array_equal(grads[0][1], grads[1][1])
