"""Temporal ordering of decoded latent windows.

Frame averaging destroys temporal direction: a window of latent frames and
its reverse produce the same blurry input.  Direction is recovered from the
magnitudes of the flows between each input's extremum latent positions and
the other input's reference frame: the extremum that is temporally farther
from the opposite reference must carry the larger flow, so if the nearer one
does, the window was decoded in reverse and is flipped.  Only the four
extremum flows are consulted.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError
from .indexing import FrameIndexing
from .tensor import Tensor

EPSILON_RULE = 1e-3  # px of mean flow magnitude below which a tie is declared


@dataclass
class OrderDecision:
    direction: str                  # "forward" | "reversed"
    magnitudes: tuple[float, float]  # (far-extremum, near-extremum) mean px
    margin: float                   # far - near, px
    tie: bool

    @property
    def reversed(self) -> bool:
        return self.direction == "reversed"

    def to_dict(self) -> dict:
        return {"direction": self.direction, "magnitudes": list(self.magnitudes),
                "margin": self.margin, "tie": self.tie}


def _as_flow_array(flow) -> np.ndarray:
    arr = flow.data if isinstance(flow, Tensor) else np.asarray(flow)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise DimensionError(
                f"ordering rule expects one flow field, got batch {arr.shape[0]}")
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[0] != 2:
        raise DimensionError(f"flow must be (2, H, W), got {arr.shape}")
    return arr


def flow_magnitude(flow) -> float:
    """Mean over pixels of the per-pixel Euclidean flow norm."""
    arr = _as_flow_array(flow).astype(np.float64)
    return float(np.sqrt(arr[0] ** 2 + arr[1] ** 2).mean())


def _decide(mag_far: float, mag_near: float) -> OrderDecision:
    margin = mag_far - mag_near
    tie = abs(margin) <= EPSILON_RULE
    direction = "reversed" if margin < -EPSILON_RULE else "forward"
    return OrderDecision(direction=direction, magnitudes=(mag_far, mag_near),
                         margin=margin, tie=tie)


def decide_order(flow_first_early, flow_first_late,
                 flow_second_early, flow_second_late) -> tuple[OrderDecision, OrderDecision]:
    """Direction of each input's decoded window from the four extremum flows.

    Arguments are the flows (earliest-of-first -> second reference),
    (latest-of-first -> second reference), (earliest-of-second -> first
    reference) and (latest-of-second -> first reference).  The first window
    is forward when its early extremum (farther from the second input) moves
    more than its late extremum; the second window mirrors this with the late
    extremum being the farther one.  Ties default to forward and are flagged.
    """
    first = _decide(flow_magnitude(flow_first_early), flow_magnitude(flow_first_late))
    second = _decide(flow_magnitude(flow_second_late), flow_magnitude(flow_second_early))
    return first, second


def decide_order_from_output(out, sample: int = 0) -> tuple[OrderDecision, OrderDecision]:
    """Apply the rule to one sample of a pipeline output's full-scale flows."""
    rule = out.indexing.ordering_rule_pairs()
    def fetch(name):
        from .tensor import narrow
        t = out.flow(1, rule[name])
        return narrow(t, 0, sample, 1)
    return decide_order(fetch("first_early"), fetch("first_late"),
                        fetch("second_early"), fetch("second_late"))


def apply_order(window_first: np.ndarray, window_second: np.ndarray,
                decisions: Sequence[OrderDecision]) -> np.ndarray:
    """Reorder two latent windows into one coherent 2N-frame sequence.

    Each window is reversed when flagged; the reference frames stay at the
    centers of their windows either way.
    """
    w0 = np.asarray(window_first)
    w1 = np.asarray(window_second)
    if decisions[0].reversed:
        w0 = w0[::-1]
    if decisions[1].reversed:
        w1 = w1[::-1]
    return np.concatenate([w0, w1], axis=0)


def flow_fix(window_first: np.ndarray, window_second: np.ndarray,
             flow_fn: Callable[[np.ndarray, np.ndarray], np.ndarray],
             ) -> tuple[np.ndarray, tuple[OrderDecision, OrderDecision]]:
    """Post-hoc ordering of third-party frame windows via a flow oracle.

    ``flow_fn(a, b)`` must return the (2, H, W) flow from frame a to frame b.
    The rule runs on the four extremum flows toward the opposite window's
    center frame and the reordered sequence is returned with the decisions.
    """
    w0 = np.asarray(window_first)
    w1 = np.asarray(window_second)
    n = w0.shape[0]
    ref0 = w0[n // 2]
    ref1 = w1[w1.shape[0] // 2]
    decisions = decide_order(
        flow_fn(w0[0], ref1), flow_fn(w0[-1], ref1),
        flow_fn(w1[0], ref0), flow_fn(w1[-1], ref0))
    return apply_order(w0, w1, decisions), decisions


def order_frames_from_output(out, sample: int = 0):
    """Full-scale frames of one sample, reordered by the rule.

    Returns (frames (2N, 3, H, W) in [model output] order after correction,
    decisions).  Models without estimated flows keep the decoded order.
    """
    fi: FrameIndexing = out.indexing
    frames = np.stack([
        out.frame(1, p).data[sample] for p in range(fi.n_total)])
    if out.flows is None:
        d = OrderDecision("forward", (0.0, 0.0), 0.0, True)
        return frames, (d, d)
    decisions = decide_order_from_output(out, sample)
    ordered = apply_order(frames[:fi.n], frames[fi.n:], decisions)
    return ordered, decisions
