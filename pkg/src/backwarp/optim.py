"""Adam optimizer with decoupled weight decay."""

from __future__ import annotations

from typing import Dict, Iterable, Optional

import numpy as np

from .errors import ContractError
from .tensor import Tensor, _to_internal, _to_logical


class Adam:
    """Adam over a named parameter dict.

    Weight decay is decoupled: it is applied directly to the parameters and
    scaled by the learning rate, independent of the moment estimates.  Each
    parameter keeps its own step count so that parameters frozen for some
    epochs get correct bias correction once they start updating.
    """

    def __init__(self, params: Dict[str, Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 4e-4):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(p._buf) for k, p in params.items()}
        self.v = {k: np.zeros_like(p._buf) for k, p in params.items()}
        self.t = {k: 0 for k in params}

    def step(self, lr: Optional[float] = None, freeze: Iterable[str] = ()) -> None:
        """Apply one update in place; gradients are zeroed afterwards.

        ``freeze`` names parameters to leave bit-unchanged (no update, no
        weight decay, no moment update).
        """
        lr = self.lr if lr is None else lr
        frozen = set(freeze)
        for name, p in self.params.items():
            if name in frozen:
                continue
            if p._gbuf is None:
                raise ContractError(f"adam step: parameter '{name}' has no gradient")
            g = p._gbuf
            self.t[name] += 1
            t = self.t[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            mhat = m / (1.0 - self.beta1 ** t)
            vhat = v / (1.0 - self.beta2 ** t)
            upd = mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay:
                upd = upd + self.weight_decay * p._buf
            p._buf -= (lr * upd).astype(p._buf.dtype, copy=False)
        for name, p in self.params.items():
            p.zero_grad()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    # -- serialization into the checkpoint container -------------------------

    def state_entries(self) -> Dict[str, np.ndarray]:
        """Moment buffers in logical order, keyed under the optim/ prefix."""
        out: Dict[str, np.ndarray] = {}
        for name in self.params:
            out[f"optim/m/{name}"] = np.ascontiguousarray(_to_logical(self.m[name]))
            out[f"optim/v/{name}"] = np.ascontiguousarray(_to_logical(self.v[name]))
            out[f"optim/t/{name}"] = np.asarray([float(self.t[name])], np.float32)
        return out

    def load_state_entries(self, entries: Dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            mk, vk, tk = f"optim/m/{name}", f"optim/v/{name}", f"optim/t/{name}"
            if mk in entries:
                self.m[name] = _to_internal(
                    entries[mk].reshape(p.shape)).astype(p._buf.dtype)
                self.v[name] = _to_internal(
                    entries[vk].reshape(p.shape)).astype(p._buf.dtype)
                self.t[name] = int(entries[tk].reshape(-1)[0])
