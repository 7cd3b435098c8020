"""Minimal reverse-mode automatic differentiation engine.

Tensors carry float32 buffers (float64 is supported for shadow evaluation in
gradient checks) and an optional gradient of the same shape.  Calling
``backward()`` on a scalar tensor walks the recorded graph in reverse
topological order and accumulates gradients with ``+=`` at fan-out points.

Image-like (4-D) tensors present the conventional (batch, channels, height,
width) shape, but are stored channels-last internally so that convolution and
sampling kernels run on contiguous channel vectors.  The ``data`` / ``grad``
properties always expose the logical (B, C, H, W) view; only the ``_buf`` /
``_gbuf`` attributes see the storage layout, and nothing outside this package
should touch them.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_FLOAT_TYPES = (np.float32, np.float64)

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


def _to_internal(arr: np.ndarray) -> np.ndarray:
    """Logical (B,C,H,W) array -> channels-last storage buffer."""
    if arr.ndim == 4:
        return np.ascontiguousarray(arr.transpose(0, 2, 3, 1))
    return np.ascontiguousarray(arr)


def _to_logical(buf: np.ndarray) -> np.ndarray:
    """Storage buffer -> logical-order view (no copy)."""
    if buf.ndim == 4:
        return buf.transpose(0, 3, 1, 2)
    return buf


def _logical_shape(buf: np.ndarray) -> tuple:
    if buf.ndim == 4:
        b, h, w, c = buf.shape
        return (b, c, h, w)
    return buf.shape


class Tensor:
    """A dense N-D float array with optional gradient tracking."""

    __slots__ = ("_buf", "_gbuf", "requires_grad", "_parents", "_backward_fn", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_TYPES:
            arr = arr.astype(np.float32)
        self._buf = _to_internal(arr)
        self._gbuf: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward_fn: Optional[Callable[[np.ndarray], None]] = None
        self.name = name

    # -- construction used by ops ------------------------------------------

    @classmethod
    def _from_buf(cls, buf: np.ndarray, parents: Sequence["Tensor"],
                  backward_fn: Optional[Callable[[np.ndarray], None]]) -> "Tensor":
        t = cls.__new__(cls)
        t._buf = buf
        t._gbuf = None
        t.name = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            t.requires_grad = True
            t._parents = tuple(parents)
            t._backward_fn = backward_fn
        else:
            t.requires_grad = False
            t._parents = ()
            t._backward_fn = None
        return t

    # -- views --------------------------------------------------------------

    @property
    def data(self) -> np.ndarray:
        """Values in logical (B, C, H, W) order.  A view for 4-D tensors."""
        return _to_logical(self._buf)

    @property
    def grad(self) -> Optional[np.ndarray]:
        if self._gbuf is None:
            return None
        return _to_logical(self._gbuf)

    @property
    def shape(self) -> tuple:
        return _logical_shape(self._buf)

    @property
    def ndim(self) -> int:
        return self._buf.ndim

    @property
    def size(self) -> int:
        return self._buf.size

    @property
    def dtype(self):
        return self._buf.dtype

    def numpy(self) -> np.ndarray:
        """Contiguous copy of the values in logical order."""
        return np.ascontiguousarray(self.data)

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() requires a scalar tensor, got shape {self.shape}")
        return float(self._buf.reshape(-1)[0])

    def __float__(self) -> float:
        return self.item()

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t._buf = self._buf
        t._gbuf = None
        t.requires_grad = False
        t._parents = ()
        t._backward_fn = None
        t.name = self.name
        return t

    def zero_grad(self):
        self._gbuf = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # -- autodiff core -------------------------------------------------------

    def _accumulate(self, contrib: np.ndarray, own: bool = True):
        """Add a gradient contribution (in storage layout).

        ``own`` marks that the caller hands over the array; otherwise a copy
        is taken before it is stored, so later ``+=`` cannot alias.
        """
        if not self.requires_grad:
            return
        if self._gbuf is None:
            self._gbuf = contrib if own else contrib.copy()
        else:
            self._gbuf += contrib

    def backward(self):
        """Populate gradients of every reachable tensor with requires_grad."""
        if self.size != 1:
            raise ContractError(f"backward() requires a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._gbuf = np.ones_like(self._buf)
        for node in reversed(topo):
            fn = node._backward_fn
            if fn is not None and node._gbuf is not None:
                fn(node._gbuf)
                # break references so the graph frees as we go
                node._backward_fn = None
                node._parents = ()

    # -- elementwise arithmetic ----------------------------------------------

    def _binary_shape_check(self, other: "Tensor", opname: str):
        if self.shape != other.shape:
            raise DimensionError(f"{opname}: shape {self.shape} does not match {other.shape}")

    def __add__(self, other):
        if isinstance(other, Tensor):
            self._binary_shape_check(other, "add")
            a, b = self, other
            out = Tensor._from_buf(a._buf + b._buf, (a, b), None)
            if out.requires_grad:
                def bw(g):
                    a._accumulate(g, own=False)
                    b._accumulate(g, own=False)
                out._backward_fn = bw
            return out
        return self + _scalar(other, self)

    __radd__ = __add__

    def __sub__(self, other):
        if not isinstance(other, Tensor):
            other = _scalar(other, self)
        self._binary_shape_check(other, "sub")
        a, b = self, other
        out = Tensor._from_buf(a._buf - b._buf, (a, b), None)
        if out.requires_grad:
            def bw(g):
                a._accumulate(g, own=False)
                b._accumulate(-g)
            out._backward_fn = bw
        return out

    def __neg__(self):
        a = self
        out = Tensor._from_buf(-a._buf, (a,), None)
        if out.requires_grad:
            out._backward_fn = lambda g: a._accumulate(-g)
        return out

    def __mul__(self, other):
        a = self
        if isinstance(other, Tensor):
            if other.size == 1 and a.size != 1:
                return _scale_by_scalar_tensor(a, other)
            if a.size == 1 and other.size != 1:
                return _scale_by_scalar_tensor(other, a)
            self._binary_shape_check(other, "mul")
            b = other
            out = Tensor._from_buf(a._buf * b._buf, (a, b), None)
            if out.requires_grad:
                def bw(g):
                    if a.requires_grad:
                        a._accumulate(g * b._buf)
                    if b.requires_grad:
                        b._accumulate(g * a._buf)
                out._backward_fn = bw
            return out
        c = float(other)
        out = Tensor._from_buf(a._buf * c, (a,), None)
        if out.requires_grad:
            out._backward_fn = lambda g: a._accumulate(g * c)
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("tensor/tensor division is not part of the op set")
        return self * (1.0 / float(other))

    # -- activations and reductions -------------------------------------------

    def leaky_relu(self, slope: float = 0.1) -> "Tensor":
        a = self
        buf = a._buf
        # max(x, slope*x) equals leaky relu for 0 < slope < 1
        out_buf = buf * slope
        np.maximum(out_buf, buf, out=out_buf)
        out = Tensor._from_buf(out_buf, (a,), None)
        if out.requires_grad:
            def bw(g):
                # output sign recovers the input sign for slope > 0
                a._accumulate(np.where(out._buf >= 0, g, g * slope))
            out._backward_fn = bw
        return out

    def abs(self) -> "Tensor":
        a = self
        out = Tensor._from_buf(np.abs(a._buf), (a,), None)
        if out.requires_grad:
            # subgradient at 0 is 0
            out._backward_fn = lambda g: a._accumulate(g * np.sign(a._buf))
        return out

    def sum(self) -> "Tensor":
        a = self
        out = Tensor._from_buf(np.asarray(a._buf.sum(dtype=a.dtype)), (a,), None)
        if out.requires_grad:
            def bw(g):
                a._accumulate(np.full(a._buf.shape, float(g), dtype=a.dtype))
            out._backward_fn = bw
        return out

    def mean(self) -> "Tensor":
        a = self
        out = Tensor._from_buf(
            np.asarray(a._buf.mean(dtype=np.float64)).astype(a.dtype), (a,), None)
        if out.requires_grad:
            inv = 1.0 / a.size
            def bw(g):
                a._accumulate(np.full(a._buf.shape, float(g) * inv, dtype=a.dtype))
            out._backward_fn = bw
        return out


def _scalar(value, like: Tensor) -> Tensor:
    return Tensor(np.full((), float(value), dtype=like.dtype))


def _scale_by_scalar_tensor(a: Tensor, s: Tensor) -> Tensor:
    sval = s._buf.reshape(())
    out = Tensor._from_buf(a._buf * sval, (a, s), None)
    if out.requires_grad:
        def bw(g):
            if a.requires_grad:
                a._accumulate(g * sval)
            if s.requires_grad:
                s._accumulate(np.asarray((g * a._buf).sum()).reshape(s._buf.shape).astype(s.dtype))
        out._backward_fn = bw
    return out


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    return x.leaky_relu(slope)


def _axis_to_internal(buf_ndim: int, logical_axis: int) -> int:
    """Map a logical (B,C,H,W) axis index to the storage layout axis."""
    if buf_ndim != 4:
        return logical_axis
    return {0: 0, 1: 3, 2: 1, 3: 2}[logical_axis]


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along a logical axis (default: channels)."""
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat requires at least one tensor")
    ref = tensors[0]
    for t in tensors[1:]:
        if t.ndim != ref.ndim:
            raise DimensionError(f"concat: rank {t.ndim} does not match {ref.ndim}")
        for ax in range(ref.ndim):
            if ax != axis and t.shape[ax] != ref.shape[ax]:
                raise DimensionError(
                    f"concat: axis {ax} sizes differ ({t.shape[ax]} vs {ref.shape[ax]})")
    iax = _axis_to_internal(ref._buf.ndim, axis)
    out_buf = np.concatenate([t._buf for t in tensors], axis=iax)
    out = Tensor._from_buf(out_buf, tensors, None)
    if out.requires_grad:
        sizes = [t._buf.shape[iax] for t in tensors]
        def bw(g):
            start = 0
            for t, sz in zip(tensors, sizes):
                sl = [slice(None)] * g.ndim
                sl[iax] = slice(start, start + sz)
                t._accumulate(np.ascontiguousarray(g[tuple(sl)]))
                start += sz
        out._backward_fn = bw
    return out


def concat_channels(*tensors: Tensor) -> Tensor:
    return concat(tensors, axis=1)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries from ``start`` along a logical axis."""
    if start < 0 or start + length > x.shape[axis]:
        raise DimensionError(
            f"narrow: [{start}:{start + length}] out of range for axis {axis} of size {x.shape[axis]}")
    iax = _axis_to_internal(x._buf.ndim, axis)
    sl = [slice(None)] * x._buf.ndim
    sl[iax] = slice(start, start + length)
    out_buf = np.ascontiguousarray(x._buf[tuple(sl)])
    out = Tensor._from_buf(out_buf, (x,), None)
    if out.requires_grad:
        def bw(g):
            full = np.zeros_like(x._buf)
            full[tuple(sl)] = g
            x._accumulate(full)
        out._backward_fn = bw
    return out


def repeat_batch(x: Tensor, reps: int) -> Tensor:
    """Stack ``reps`` copies of ``x`` along the batch axis."""
    out_buf = np.concatenate([x._buf] * reps, axis=0)
    out = Tensor._from_buf(out_buf, (x,), None)
    if out.requires_grad:
        b = x._buf.shape[0]
        def bw(g):
            x._accumulate(g.reshape((reps, b) + g.shape[1:]).sum(axis=0))
        out._backward_fn = bw
    return out


def add_n(tensors: Iterable[Tensor]) -> Tensor:
    """Sum a sequence of same-shape (typically scalar) tensors."""
    tensors = list(tensors)
    out = tensors[0]
    for t in tensors[1:]:
        out = out + t
    return out
