import numpy as np
import pytest

from backwarp.errors import ContractError
from backwarp.optim import Adam
from backwarp.tensor import Tensor


def test_first_step_moves_exactly_minus_lr():
    p = Tensor(np.zeros((), np.float32), requires_grad=True)
    p._gbuf = np.ones((), np.float32)
    adam = Adam({"p": p}, lr=0.1, weight_decay=0.0)
    adam.step()
    assert abs(float(p.data) + 0.1) < 1e-8
    assert p.grad is None  # grads zeroed afterwards


def test_zero_grad_zero_decay_is_noop():
    arr = np.asarray([1.0, -2.0], np.float32)
    p = Tensor(arr.copy(), requires_grad=True)
    p._gbuf = np.zeros(2, np.float32)
    adam = Adam({"p": p}, lr=0.1, weight_decay=0.0)
    adam.step()
    assert np.array_equal(p.data, arr)


def test_scalar_quadratic_convergence():
    p = Tensor(np.zeros((), np.float32), requires_grad=True)
    adam = Adam({"p": p}, lr=0.1, weight_decay=0.0)
    for _ in range(200):
        p._gbuf = np.asarray(2.0 * (float(p.data) - 3.0), np.float32)
        adam.step()
    assert abs(float(p.data) - 3.0) < 0.05


def test_missing_grad_is_contract_error():
    p = Tensor(np.zeros(3, np.float32), requires_grad=True)
    adam = Adam({"p": p})
    with pytest.raises(ContractError, match="'p'"):
        adam.step()


def test_frozen_parameters_bit_unchanged():
    rng = np.random.default_rng(0)
    a = Tensor(rng.standard_normal(4).astype(np.float32), requires_grad=True)
    b = Tensor(rng.standard_normal(4).astype(np.float32), requires_grad=True)
    before = b.data.tobytes()
    a._gbuf = np.ones(4, np.float32)
    adam = Adam({"a": a, "b": b}, lr=0.01, weight_decay=4e-4)
    adam.step(freeze={"b"})
    assert b.data.tobytes() == before
    assert not np.array_equal(a.data, rng.standard_normal(4))  # a moved


def test_decoupled_weight_decay_direction():
    # with zero gradient and nonzero decay the parameter shrinks by lr*wd*p
    p = Tensor(np.asarray([2.0], np.float32), requires_grad=True)
    p._gbuf = np.zeros(1, np.float32)
    adam = Adam({"p": p}, lr=0.5, weight_decay=0.1)
    adam.step()
    assert abs(float(p.data) - (2.0 - 0.5 * 0.1 * 2.0)) < 1e-6


def test_state_entries_roundtrip():
    p = Tensor(np.ones((2, 3, 3, 3), np.float32), requires_grad=True)
    adam = Adam({"w": p}, lr=0.1)
    p._gbuf = np.full_like(p._buf, 0.5)
    adam.step()
    entries = adam.state_entries()
    assert set(entries) == {"optim/m/w", "optim/v/w", "optim/t/w"}
    adam2 = Adam({"w": Tensor(np.ones((2, 3, 3, 3), np.float32), requires_grad=True)}, lr=0.1)
    adam2.load_state_entries(entries)
    assert adam2.t["w"] == 1
    assert np.allclose(adam2.m["w"], adam.m["w"])
