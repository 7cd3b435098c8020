"""Finite-difference verification and op-level invariants on random tensors."""

import numpy as np

from backwarp import ops
from backwarp.gradcheck import check_gradients, run_suite
from backwarp.tensor import Tensor


def test_suite_all_ops_pass():
    results = run_suite(seed=0, instances=2)
    failed = [r for r in results if not r.passed]
    assert not failed, f"gradient failures: {[(r.name, r.max_rel_err) for r in failed]}"
    # the suite covers the full op set
    names = {r.name for r in results}
    for expected in ("conv2d/stride1", "conv_transpose2d", "grid_sample",
                     "affine_grid_sample", "correlation", "upsample_bilinear2x",
                     "leaky_relu", "epe", "linear", "global_avg_pool"):
        assert expected in names


def test_random_small_tensors_within_spec_bound():
    # spec-sized random instances: tensors at most 2x4x6x6
    rng = np.random.default_rng(42)
    x = rng.standard_normal((2, 4, 6, 6))
    w = rng.standard_normal((3, 4, 3, 3)) * 0.5
    err = check_gradients(lambda a, b: ops.conv2d(a, b, None), [x, w], [0, 1])
    assert err < 1e-4


def test_correlation_self_max_property():
    rng = np.random.default_rng(7)
    for _ in range(3):
        raw = rng.standard_normal((1, 6, 9, 9)).astype(np.float32)
        raw /= np.linalg.norm(raw, axis=1, keepdims=True)
        cv = ops.correlation(Tensor(raw), Tensor(raw), max_disp=3).data[0]
        interior = cv[:, 3:-3, 3:-3]
        assert (interior.argmax(axis=0) == (3 * 7 + 3)).all()


def test_adjoint_identity_random_cases():
    rng = np.random.default_rng(8)
    for _ in range(3):
        x = rng.standard_normal((1, 2, 6, 6)).astype(np.float32)
        w = rng.standard_normal((3, 2, 4, 4)).astype(np.float32)
        y = rng.standard_normal((1, 3, 3, 3)).astype(np.float32)
        lhs = float((ops.conv2d(Tensor(x), Tensor(w), None, stride=2, padding=1).data * y).sum())
        rhs = float((ops.conv_transpose2d(Tensor(y), Tensor(w), None).data * x).sum())
        assert abs(lhs - rhs) <= 1e-4 * max(1.0, abs(lhs))
