"""Finite-difference verification of every differentiable operation.

Analytic gradients from the engine are compared against central differences
evaluated in float64 ("shadow" evaluation).  Non-scalar outputs are reduced
with a fixed random projection so one scalar check covers all output
elements.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import ops
from .tensor import Tensor, concat, narrow, no_grad, repeat_batch


@dataclass
class CheckResult:
    name: str
    instances: int
    max_rel_err: float
    passed: bool


def check_gradients(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray],
                    wrt: Sequence[int], eps: float = 1e-6,
                    rtol: float = 1e-4, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps Tensors to one Tensor; ``arrays`` are float inputs promoted
    to float64; ``wrt`` selects which inputs to differentiate.
    """
    # contiguous copies: the numeric pass mutates elements through reshape(-1)
    arrays = [np.array(a, np.float64, order="C") for a in arrays]
    rng = np.random.default_rng(seed)

    def make_tensors():
        return [Tensor(a.copy(), requires_grad=(i in wrt)) for i, a in enumerate(arrays)]

    ts = make_tensors()
    out = fn(*ts)
    proj = rng.standard_normal(out.shape) if out.shape else np.asarray(1.0)
    proj_t = Tensor(proj, dtype=np.float64)
    loss = (out * proj_t).sum() if out.shape else out * float(proj)
    loss.backward()
    analytic = [ts[i].grad.copy() for i in wrt]

    def value(mod_arrays) -> float:
        with no_grad():
            tensors = [Tensor(a) for a in mod_arrays]
            o = fn(*tensors)
            if o.shape:
                return float((o.data * proj).sum())
            return float(o.item() * float(proj))

    max_rel = 0.0
    for slot, i in enumerate(wrt):
        base = arrays[i]
        flat = base.reshape(-1)
        num = np.zeros_like(flat)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = value(arrays)
            flat[j] = orig - eps
            fm = value(arrays)
            flat[j] = orig
            num[j] = (fp - fm) / (2 * eps)
        num = num.reshape(base.shape)
        ana = analytic[slot]
        denom = np.maximum(1.0, np.maximum(np.abs(ana), np.abs(num)))
        rel = np.abs(ana - num) / denom
        max_rel = max(max_rel, float(rel.max()))
    return max_rel


def _rand(rng, *shape):
    return rng.standard_normal(shape)


def _away_from_kinks(a, margin=0.05):
    """Nudge values off zero so abs/relu subgradient points are avoided."""
    a = a.copy()
    small = np.abs(a) < margin
    a[small] = margin * np.where(a[small] >= 0, 1.0, -1.0)
    return a


def suite_cases(seed: int = 0, instances: int = 5):
    """Yield (name, fn, arrays, wrt) covering every differentiable op."""
    rng = np.random.default_rng(seed)
    for k in range(instances):
        b, c, h, w = 2, 3, 6, 6
        x = _rand(rng, b, c, h, w)

        wt = _rand(rng, 4, c, 3, 3) * 0.5
        bias = _rand(rng, 4)
        yield (f"conv2d/stride1[{k}]",
               lambda xx, ww, bb: ops.conv2d(xx, ww, bb, stride=1, padding=1),
               [x, wt, bias], [0, 1, 2])
        yield (f"conv2d/stride2[{k}]",
               lambda xx, ww, bb: ops.conv2d(xx, ww, bb, stride=2, padding=1),
               [x, wt, bias], [0, 1, 2])
        yield (f"conv2d/dilated[{k}]",
               lambda xx, ww: ops.conv2d(xx, ww, None, stride=1, padding=2, dilation=2),
               [x, wt], [0, 1])

        wtt = _rand(rng, c, 2, 4, 4) * 0.5
        bt = _rand(rng, 2)
        yield (f"conv_transpose2d[{k}]",
               lambda xx, ww, bb: ops.conv_transpose2d(xx, ww, bb, stride=2, padding=1),
               [x[:, :, :3, :3], wtt, bt], [0, 1, 2])

        flow = rng.uniform(-1.4, 1.4, (b, 2, h, w)) + 0.13
        yield (f"grid_sample[{k}]", ops.grid_sample, [x, flow], [0, 1])

        theta = np.tile(np.asarray([1.0, 0, 0, 0, 1.0, 0]), (b, 1))
        theta = theta + 0.08 * _rand(rng, b, 6)
        yield (f"affine_grid_sample[{k}]", ops.affine_grid_sample, [x, theta], [0, 1])

        f2 = _rand(rng, b, c, 5, 5)
        yield (f"correlation[{k}]",
               lambda a_, b_: ops.correlation(a_, b_, max_disp=2),
               [x[:, :, :5, :5], f2], [0, 1])

        yield (f"upsample_bilinear2x[{k}]",
               lambda a_: ops.upsample_bilinear2x(a_, scale_values=False),
               [x[:, :, :4, :4]], [0])
        yield (f"upsample_bilinear2x/flow[{k}]",
               lambda a_: ops.upsample_bilinear2x(a_, scale_values=True),
               [_rand(rng, b, 2, 4, 4)], [0])

        yield (f"leaky_relu[{k}]",
               lambda a_: a_.leaky_relu(0.1).sum(),
               [_away_from_kinks(x)], [0])
        yield (f"abs[{k}]",
               lambda a_: a_.abs().mean(),
               [_away_from_kinks(x)], [0])

        y = _rand(rng, b, c, h, w)
        yield (f"add[{k}]", lambda a_, b_: a_ + b_, [x, y], [0, 1])
        yield (f"sub[{k}]", lambda a_, b_: a_ - b_, [x, y], [0, 1])
        yield (f"mul/elementwise[{k}]", lambda a_, b_: a_ * b_, [x, y], [0, 1])
        yield (f"mul/scalar[{k}]", lambda a_: a_ * 1.7, [x], [0])
        yield (f"neg[{k}]", lambda a_: (-a_).sum(), [x], [0])
        yield (f"sum[{k}]", lambda a_: a_.sum(), [x], [0])
        yield (f"mean[{k}]", lambda a_: a_.mean(), [x], [0])

        yield (f"concat_channels[{k}]",
               lambda a_, b_: concat([a_, b_], axis=1),
               [x, _rand(rng, b, 2, h, w)], [0, 1])
        yield (f"concat_batch[{k}]",
               lambda a_, b_: concat([a_, b_], axis=0),
               [x, y], [0, 1])
        yield (f"narrow[{k}]",
               lambda a_: narrow(a_, 1, 1, 2),
               [x], [0])
        yield (f"repeat_batch[{k}]",
               lambda a_: repeat_batch(a_, 3),
               [x], [0])

        yield (f"global_avg_pool[{k}]", ops.global_avg_pool, [x], [0])
        lw = _rand(rng, c, 4)
        lb = _rand(rng, 4)
        yield (f"linear[{k}]",
               lambda a_, w_, b_: ops.linear(a_, w_, b_),
               [_rand(rng, b, c), lw, lb], [0, 1, 2])

        fa = _rand(rng, b, 2, h, w)
        fb = fa + rng.uniform(0.2, 1.0, fa.shape) * np.where(_rand(rng, b, 2, h, w) > 0, 1, -1)
        yield (f"epe[{k}]", ops.epe, [fa, fb], [0, 1])


def run_suite(seed: int = 0, instances: int = 5, rtol: float = 1e-4) -> list[CheckResult]:
    """Run the finite-difference suite; one result row per op family."""
    worst: dict[str, float] = {}
    counts: dict[str, int] = {}
    for name, fn, arrays, wrt in suite_cases(seed, instances):
        family = name.split("[")[0]
        err = check_gradients(fn, arrays, wrt, rtol=rtol, seed=seed)
        worst[family] = max(worst.get(family, 0.0), err)
        counts[family] = counts.get(family, 0) + 1
    return [CheckResult(fam, counts[fam], worst[fam], worst[fam] <= rtol)
            for fam in worst]
