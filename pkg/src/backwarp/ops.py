"""Differentiable array operations used by the restoration pipeline.

All functions take and return :class:`~backwarp.tensor.Tensor` values with
logical (B, C, H, W) shapes.  Internally they run on the channels-last
storage buffers; convolutions are lowered to BLAS GEMM calls accumulated at
flat pixel offsets, which keeps the hot path free of im2col copies.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from scipy.linalg.blas import dgemm, sgemm

from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor


def _gemm_acc(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> None:
    """c += a @ b for C-contiguous 2-D arrays (float32 or float64)."""
    f = sgemm if a.dtype == np.float32 else dgemm
    # BLAS wants Fortran order; (a@b).T = b.T @ a.T lets the views line up.
    f(1.0, b.T, a.T, beta=1.0, c=c.T, overwrite_c=1)


def _gemm_acc_AtB(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> None:
    """c += a.T @ b for C-contiguous a (M, K1), b (M, K2), c (K1, K2)."""
    f = sgemm if a.dtype == np.float32 else dgemm
    # c.T (K2, K1 Fortran view) += b.T (K2, M) @ a, with a supplied as its
    # Fortran view a.T plus a transpose flag; no operand is copied.
    f(1.0, b.T, a.T, beta=1.0, c=c.T, trans_b=1, overwrite_c=1)


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ConfigError(f"expected an int or a pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding=1, dilation: int = 1) -> Tensor:
    """Cross-correlation convolution over (B, Cin, H, W).

    ``weight`` has shape (Cout, Cin, kh, kw).  Stride may be 1 or 2; padding
    is an int or (ph, pw) of zero padding; dilation expands the kernel taps.
    """
    if x.ndim != 4:
        raise DimensionError(f"conv2d: input must be 4-D, got shape {x.shape}")
    if weight.ndim != 4:
        raise DimensionError(f"conv2d: weight must be 4-D, got shape {weight.shape}")
    if stride not in (1, 2):
        raise ConfigError(f"conv2d: stride must be 1 or 2, got {stride}")
    b_, cin, h, w_ = x.shape
    cout, wcin, kh, kw = weight.shape
    if cin != wcin:
        raise DimensionError(
            f"conv2d: input channel axis ({cin}) does not match weight in-channels ({wcin})")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(
            f"conv2d: bias shape {bias.shape} does not match out-channels ({cout},)")
    ph, pw = _pair(padding)
    keh = (kh - 1) * dilation + 1
    kew = (kw - 1) * dilation + 1
    ho = (h + 2 * ph - keh) // stride + 1
    wo = (w_ + 2 * pw - kew) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} dil {dilation} does not fit input {h}x{w_} pad {(ph, pw)}")

    xb = x._buf                       # (B, H, W, Cin)
    if ph == 0 and pw == 0:
        xp = xb
    else:
        xp = np.zeros((b_, h + 2 * ph, w_ + 2 * pw, cin), xb.dtype)
        xp[:, ph:ph + h, pw:pw + w_] = xb
    hp, wp = xp.shape[1], xp.shape[2]
    # (kh, kw, Cin, Cout) tap matrices
    wt = np.ascontiguousarray(weight._buf.transpose(1, 2, 3, 0))

    # small problems go through a single im2col GEMM; large ones through
    # per-tap GEMMs accumulated at flat pixel offsets (no im2col copy).
    # the dispatch ignores the batch size so a sample's result cannot depend
    # on what it is batched with
    small = ho * wo * max(cin, cout) < 65536 or stride != 1

    def gather_cols():
        # batch kept as the leading matmul axis: per-sample GEMM shapes do
        # not depend on the batch size, which keeps results batch-invariant
        cols = np.empty((b_, ho, wo, kh * kw, cin), xp.dtype)
        for dy in range(kh):
            for dx in range(kw):
                oy, ox = dy * dilation, dx * dilation
                cols[:, :, :, dy * kw + dx, :] = \
                    xp[:, oy:oy + stride * ho:stride, ox:ox + stride * wo:stride, :]
        return cols.reshape(b_, ho * wo, kh * kw * cin)

    if small:
        wmat = wt.reshape(kh * kw * cin, cout)
        valid = np.matmul(gather_cols(), wmat).reshape(b_, ho, wo, cout)
    else:
        x2 = xp.reshape(-1, cin)
        m = x2.shape[0]
        out_full = np.zeros((b_, hp, wp, cout), xb.dtype)
        o2 = out_full.reshape(-1, cout)
        for dy in range(kh):
            for dx in range(kw):
                k = (dy * wp + dx) * dilation
                _gemm_acc(x2[k:], wt[dy, dx], o2[:m - k] if k else o2)
        valid = out_full[:, :ho, :wo]

    if bias is not None:
        out_buf = valid + bias._buf
    else:
        out_buf = np.ascontiguousarray(valid)

    parents = (x, weight) if bias is None else (x, weight, bias)
    out = Tensor._from_buf(out_buf, parents, None)
    if out.requires_grad:
        def bw(g):  # g: (B, Ho, Wo, Cout)
            if bias is not None and bias.requires_grad:
                bias._accumulate(g.sum(axis=(0, 1, 2)))
            need_x = x.requires_grad
            need_w = weight.requires_grad
            if not (need_x or need_w):
                return
            if small:
                g2 = g.reshape(b_, ho * wo, cout)
                if need_w:
                    gw = np.matmul(gather_cols().transpose(0, 2, 1), g2).sum(axis=0)
                    gw = gw.reshape(kh, kw, cin, cout)
                if need_x:
                    gcols = np.matmul(g2, wt.reshape(-1, cout).T).reshape(
                        b_, ho, wo, kh * kw, cin)
                    gxp = np.zeros_like(xp)
                    for dy in range(kh):
                        for dx in range(kw):
                            oy, ox = dy * dilation, dx * dilation
                            gxp[:, oy:oy + stride * ho:stride,
                                ox:ox + stride * wo:stride, :] += gcols[:, :, :, dy * kw + dx, :]
            else:
                x2 = xp.reshape(-1, cin)
                m = x2.shape[0]
                gfull = np.zeros((b_, hp, wp, cout), g.dtype)
                gfull[:, :ho, :wo] = g
                g2 = gfull.reshape(-1, cout)
                gw = np.zeros((kh, kw, cin, cout), g.dtype) if need_w else None
                gxp = np.zeros_like(xp) if need_x else None
                gx2 = gxp.reshape(-1, cin) if need_x else None
                wt_t = np.ascontiguousarray(wt.transpose(0, 1, 3, 2)) if need_x else None
                for dy in range(kh):
                    for dx in range(kw):
                        k = (dy * wp + dx) * dilation
                        gsl = g2[:m - k] if k else g2
                        if need_w:
                            _gemm_acc_AtB(x2[k:], gsl, gw[dy, dx])
                        if need_x:
                            _gemm_acc(gsl, wt_t[dy, dx], gx2[k:])
            if need_w:
                # back to internal weight layout (Cout, kh, kw, Cin)
                weight._accumulate(np.ascontiguousarray(gw.transpose(3, 0, 1, 2)))
            if need_x:
                if ph == 0 and pw == 0:
                    x._accumulate(gxp)
                else:
                    x._accumulate(np.ascontiguousarray(gxp[:, ph:ph + h, pw:pw + w_]))
        out._backward_fn = bw
    return out


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
                     stride: int = 2, padding: int = 1) -> Tensor:
    """Adjoint of conv2d that exactly doubles the spatial dimensions.

    ``weight`` has shape (Cin, Cout, kh, kw).  The geometry is constrained to
    stride 2 with kh = kw = 2*padding + 2 so the output is exactly 2x the
    input; anything else is a configuration error.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError("conv_transpose2d: input and weight must be 4-D")
    b_, cin, h, w_ = x.shape
    wcin, cout, kh, kw = weight.shape
    if cin != wcin:
        raise DimensionError(
            f"conv_transpose2d: input channels ({cin}) do not match weight in-channels ({wcin})")
    if stride != 2 or kh != kw or kh != 2 * padding + 2:
        raise ConfigError(
            f"conv_transpose2d: geometry stride={stride} kernel={kh}x{kw} padding={padding} "
            "cannot produce an exact 2x upsampling (need stride 2, k = 2p + 2)")
    ho, wo = 2 * h, 2 * w_
    hf, wf = ho + 2 * padding, wo + 2 * padding
    xb = x._buf
    x2 = xb.reshape(-1, cin)
    wt = weight._buf  # internal layout (Cin, kh, kw, Cout)

    x3 = xb.reshape(b_, h * w_, cin)
    out_full = np.zeros((b_, hf, wf, cout), xb.dtype)
    for dy in range(kh):
        for dx in range(kw):
            t = np.matmul(x3, np.ascontiguousarray(wt[:, dy, dx, :]))
            out_full[:, dy:dy + 2 * h:2, dx:dx + 2 * w_:2, :] += t.reshape(b_, h, w_, cout)
    valid = out_full[:, padding:padding + ho, padding:padding + wo]
    out_buf = valid + bias._buf if bias is not None else np.ascontiguousarray(valid)

    parents = (x, weight) if bias is None else (x, weight, bias)
    out = Tensor._from_buf(out_buf, parents, None)
    if out.requires_grad:
        def bw(g):
            if bias is not None and bias.requires_grad:
                bias._accumulate(g.sum(axis=(0, 1, 2)))
            need_x, need_w = x.requires_grad, weight.requires_grad
            if not (need_x or need_w):
                return
            gfull = np.zeros((b_, hf, wf, cout), g.dtype)
            gfull[:, padding:padding + ho, padding:padding + wo] = g
            gx2 = np.zeros((b_ * h * w_, cin), g.dtype) if need_x else None
            gw = np.zeros((kh, kw, cin, cout), g.dtype) if need_w else None
            for dy in range(kh):
                for dx in range(kw):
                    gsl = np.ascontiguousarray(
                        gfull[:, dy:dy + 2 * h:2, dx:dx + 2 * w_:2, :]).reshape(-1, cout)
                    if need_x:
                        _gemm_acc(gsl, np.ascontiguousarray(wt[:, dy, dx, :].T), gx2)
                    if need_w:
                        _gemm_acc_AtB(x2, gsl, gw[dy, dx])
            if need_x:
                x._accumulate(gx2.reshape(b_, h, w_, cin))
            if need_w:
                # back to the internal weight layout (Cin, kh, kw, Cout)
                weight._accumulate(np.ascontiguousarray(gw.transpose(2, 0, 1, 3)))
        out._backward_fn = bw
    return out


def conv2d_grouped(x: Tensor, weights: Sequence[Tensor], biases: Sequence[Tensor],
                   stride: int = 1, padding=1) -> Tensor:
    """Apply G independent convolutions to G equal batch blocks of ``x``.

    ``x`` is (G*B, Cin, H, W) and weight g convolves block g.  Equivalent to
    running conv2d per block but executed as one batched GEMM, which keeps
    the many small per-offset decoders cheap.
    """
    g_ = len(weights)
    if x.shape[0] % g_:
        raise DimensionError(
            f"conv2d_grouped: batch {x.shape[0]} is not divisible into {g_} groups")
    gb, cin, h, w_ = x.shape
    b_ = gb // g_
    cout, wcin, kh, kw = weights[0].shape
    for wt_ in weights:
        if wt_.shape != (cout, wcin, kh, kw):
            raise DimensionError("conv2d_grouped: weights must share one shape")
    if wcin != cin:
        raise DimensionError(
            f"conv2d_grouped: input channels ({cin}) do not match weights ({wcin})")
    ph, pw = _pair(padding)
    ho = (h + 2 * ph - kh) // stride + 1
    wo = (w_ + 2 * pw - kw) // stride + 1
    xb = x._buf
    if ph or pw:
        xp = np.zeros((gb, h + 2 * ph, w_ + 2 * pw, cin), xb.dtype)
        xp[:, ph:ph + h, pw:pw + w_] = xb
    else:
        xp = xb

    # (G, kh*kw*Cin, Cout) weight blocks
    wmat = np.stack([np.ascontiguousarray(
        wt_._buf.transpose(1, 2, 3, 0)).reshape(kh * kw * cin, cout)
        for wt_ in weights])
    bvec = np.stack([bi._buf for bi in biases]) if biases else None

    def gather_cols():
        # per-sample matmul slices keep results independent of batch size
        cols = np.empty((gb, ho, wo, kh * kw, cin), xp.dtype)
        for dy in range(kh):
            for dx in range(kw):
                cols[:, :, :, dy * kw + dx, :] = \
                    xp[:, dy:dy + stride * ho:stride, dx:dx + stride * wo:stride, :]
        return cols.reshape(g_, b_, ho * wo, kh * kw * cin)

    colsg = gather_cols()
    out3 = np.matmul(colsg, wmat[:, None])             # (G, B, Ho*Wo, Cout)
    if bvec is not None:
        out3 += bvec[:, None, None, :]
    out_buf = np.ascontiguousarray(out3.reshape(gb, ho, wo, cout))

    parents = (x, *weights, *biases)
    out = Tensor._from_buf(out_buf, parents, None)
    if out.requires_grad:
        def bw(g):
            g3 = g.reshape(g_, b_ * ho * wo, cout)
            if biases and biases[0].requires_grad:
                gb_ = g3.sum(axis=1)
                for i, bi in enumerate(biases):
                    bi._accumulate(gb_[i])
            if weights[0].requires_grad:
                cols2 = gather_cols().reshape(g_, b_ * ho * wo, kh * kw * cin)
                gw = np.matmul(cols2.transpose(0, 2, 1), g3)
                for i, wt_ in enumerate(weights):
                    wt_._accumulate(np.ascontiguousarray(
                        gw[i].reshape(kh, kw, cin, cout).transpose(3, 0, 1, 2)))
            if x.requires_grad:
                gcols = np.matmul(g3, wmat.transpose(0, 2, 1)).reshape(
                    gb, ho, wo, kh * kw, cin)
                gxp = np.zeros_like(xp)
                for dy in range(kh):
                    for dx in range(kw):
                        gxp[:, dy:dy + stride * ho:stride,
                            dx:dx + stride * wo:stride, :] += gcols[:, :, :, dy * kw + dx, :]
                if ph or pw:
                    gxp = np.ascontiguousarray(gxp[:, ph:ph + h, pw:pw + w_])
                x._accumulate(gxp)
        out._backward_fn = bw
    return out


def linear_grouped(x: Tensor, weights: Sequence[Tensor],
                   biases: Sequence[Tensor]) -> Tensor:
    """Per-block affine maps: block g of (G*B, Cin) through weight g."""
    g_ = len(weights)
    if x.ndim != 2 or x.shape[0] % g_:
        raise DimensionError(
            f"linear_grouped: input {x.shape} is not divisible into {g_} groups")
    gb, cin = x.shape
    b_ = gb // g_
    wmat = np.stack([wt_._buf for wt_ in weights])     # (G, Cin, Cout)
    bvec = np.stack([bi._buf for bi in biases]) if biases else None
    x3 = x._buf.reshape(g_, b_, cin)
    # per-row matmul: each sample's product is computed at a fixed shape
    out3 = np.matmul(x3[:, :, None, :], wmat[:, None]).reshape(g_, b_, -1)
    if bvec is not None:
        out3 += bvec[:, None, :]
    cout = wmat.shape[2]
    out = Tensor._from_buf(np.ascontiguousarray(out3.reshape(gb, cout)),
                           (x, *weights, *biases), None)
    if out.requires_grad:
        def bw(g):
            g3 = g.reshape(g_, b_, cout)
            if biases and biases[0].requires_grad:
                gb_ = g3.sum(axis=1)
                for i, bi in enumerate(biases):
                    bi._accumulate(gb_[i])
            if weights[0].requires_grad:
                gw = np.matmul(x3.transpose(0, 2, 1), g3)
                for i, wt_ in enumerate(weights):
                    wt_._accumulate(gw[i])
            if x.requires_grad:
                x._accumulate(np.matmul(g3, wmat.transpose(0, 2, 1)).reshape(gb, cin))
        out._backward_fn = bw
    return out


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

class _BilinearPrep:
    """Indices, fractional weights and clamp masks for one sampling grid."""

    __slots__ = ("fx", "fy", "lins", "maskx", "masky", "in_shape")

    def __init__(self, xshape, px: np.ndarray, py: np.ndarray):
        b_, h, w_, c = xshape
        self.in_shape = xshape
        cpx = np.clip(px, 0.0, w_ - 1.0)
        cpy = np.clip(py, 0.0, h - 1.0)
        x0f = np.floor(cpx)
        y0f = np.floor(cpy)
        self.fx = (cpx - x0f)[..., None]
        self.fy = (cpy - y0f)[..., None]
        ix0 = x0f.astype(np.intp)
        iy0 = y0f.astype(np.intp)
        ix1 = np.minimum(ix0 + 1, w_ - 1)
        iy1 = np.minimum(iy0 + 1, h - 1)
        base = (np.arange(b_, dtype=np.intp) * (h * w_))[:, None, None]
        row0 = base + iy0 * w_
        row1 = base + iy1 * w_
        self.lins = (row0 + ix0, row0 + ix1, row1 + ix0, row1 + ix1)
        self.maskx = (px >= 0) & (px <= w_ - 1)
        self.masky = (py >= 0) & (py <= h - 1)

    def gather(self, xb: np.ndarray):
        c = xb.shape[-1]
        xflat = xb.reshape(-1, c)
        sh = self.lins[0].shape + (c,)
        return tuple(xflat[lin.reshape(-1)].reshape(sh) for lin in self.lins)

    def blend(self, vals) -> np.ndarray:
        v00, v01, v10, v11 = vals
        fx, fy = self.fx, self.fy
        return ((1 - fy) * ((1 - fx) * v00 + fx * v01)
                + fy * ((1 - fx) * v10 + fx * v11))

    def input_grad(self, g: np.ndarray) -> np.ndarray:
        fx, fy = self.fx, self.fy
        n = self.in_shape[0] * self.in_shape[1] * self.in_shape[2]
        acc = np.zeros((n, g.shape[-1]), g.dtype)
        weights = ((1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy)
        for lin, wk in zip(self.lins, weights):
            np.add.at(acc, lin.reshape(-1), (wk * g).reshape(-1, g.shape[-1]))
        return acc.reshape(self.in_shape)

    def coord_grad(self, g: np.ndarray, vals):
        v00, v01, v10, v11 = vals
        fx, fy = self.fx, self.fy
        dpx = (1 - fy) * (v01 - v00) + fy * (v11 - v10)
        dpy = (1 - fx) * (v10 - v00) + fx * (v11 - v01)
        gpx = (g * dpx).sum(axis=-1)
        gpy = (g * dpy).sum(axis=-1)
        # clamped coordinates have zero derivative
        gpx *= self.maskx
        gpy *= self.masky
        return gpx, gpy


def grid_sample(x: Tensor, flow: Tensor) -> Tensor:
    """Back-warp ``x`` by a pixel-displacement flow field.

    Output pixel (y, x) bilinearly samples ``x`` at
    (x + flow_x, y + flow_y), with out-of-range coordinates clamped to the
    border.  Differentiable in both the image and the flow.
    """
    if x.ndim != 4 or flow.ndim != 4:
        raise DimensionError("grid_sample: input and flow must be 4-D")
    if flow.shape[1] != 2:
        raise DimensionError(
            f"grid_sample: flow channel axis must have size 2, got {flow.shape[1]}")
    b_, c, h, w_ = x.shape
    if flow.shape[0] != b_ or flow.shape[2:] != (h, w_):
        raise DimensionError(
            f"grid_sample: flow shape {flow.shape} does not match input {x.shape}")
    xb, fb = x._buf, flow._buf

    def coords():
        gx = np.arange(w_, dtype=xb.dtype)[None, None, :] + fb[..., 0]
        gy = np.arange(h, dtype=xb.dtype)[None, :, None] + fb[..., 1]
        return gx, gy

    prep = None
    if not fb.any():
        out_buf = xb.copy()   # zero flow is a bit-exact identity
    else:
        prep = _BilinearPrep(xb.shape, *coords())
        out_buf = prep.blend(prep.gather(xb))

    out = Tensor._from_buf(out_buf, (x, flow), None)
    if out.requires_grad:
        def bw(g):
            p = prep if prep is not None else _BilinearPrep(xb.shape, *coords())
            if x.requires_grad:
                x._accumulate(p.input_grad(g))
            if flow.requires_grad:
                gpx, gpy = p.coord_grad(g, p.gather(xb))
                flow._accumulate(np.stack([gpx, gpy], axis=-1))
        out._backward_fn = bw
    return out


def affine_grid_sample(x: Tensor, theta: Tensor) -> Tensor:
    """Sample ``x`` on the grid produced by per-batch affine parameters.

    ``theta`` is (B, 6) or (B, 2, 3), a row-major 2x3 matrix that maps
    normalized output coordinates in [-1, 1]^2 (corners at pixel centers) to
    normalized input coordinates.  Identity is [1, 0, 0, 0, 1, 0].
    """
    if x.ndim != 4:
        raise DimensionError("affine_grid_sample: input must be 4-D")
    b_, c, h, w_ = x.shape
    if theta.shape not in ((b_, 6), (b_, 2, 3)):
        raise DimensionError(
            f"affine_grid_sample: theta shape {theta.shape} is not ({b_}, 6) or ({b_}, 2, 3)")
    xb = x._buf
    tb = theta._buf.reshape(b_, 2, 3)
    dt = xb.dtype

    gxp = np.broadcast_to(np.arange(w_, dtype=dt), (h, w_))
    gyp = np.broadcast_to(np.arange(h, dtype=dt)[:, None], (h, w_))
    sx = dt.type(0.0 if w_ == 1 else 2.0 / (w_ - 1))
    sy = dt.type(0.0 if h == 1 else 2.0 / (h - 1))
    inv_sx = dt.type((w_ - 1) / 2.0)
    inv_sy = dt.type((h - 1) / 2.0)
    xn = gxp * sx - 1 if w_ > 1 else np.zeros((h, w_), dt)
    yn = gyp * sy - 1 if h > 1 else np.zeros((h, w_), dt)

    def transformed():
        t = tb.astype(dt, copy=False)
        xo = t[:, 0, 0, None, None] * xn + t[:, 0, 1, None, None] * yn + t[:, 0, 2, None, None]
        yo = t[:, 1, 0, None, None] * xn + t[:, 1, 1, None, None] * yn + t[:, 1, 2, None, None]
        # anchoring on the integer base grid keeps the identity transform exact
        px = gxp + (xo - xn) * inv_sx
        py = gyp + (yo - yn) * inv_sy
        return px, py

    prep = _BilinearPrep(xb.shape, *transformed())
    out_buf = prep.blend(prep.gather(xb))
    out = Tensor._from_buf(out_buf, (x, theta), None)
    if out.requires_grad:
        def bw(g):
            if x.requires_grad:
                x._accumulate(prep.input_grad(g))
            if theta.requires_grad:
                gpx, gpy = prep.coord_grad(g, prep.gather(xb))
                gxo = gpx * inv_sx
                gyo = gpy * inv_sy
                gt = np.empty((b_, 2, 3), g.dtype)
                gt[:, 0, 0] = (gxo * xn).sum(axis=(1, 2))
                gt[:, 0, 1] = (gxo * yn).sum(axis=(1, 2))
                gt[:, 0, 2] = gxo.sum(axis=(1, 2))
                gt[:, 1, 0] = (gyo * xn).sum(axis=(1, 2))
                gt[:, 1, 1] = (gyo * yn).sum(axis=(1, 2))
                gt[:, 1, 2] = gyo.sum(axis=(1, 2))
                theta._accumulate(gt.reshape(theta._buf.shape))
        out._backward_fn = bw
    return out


# ---------------------------------------------------------------------------
# correlation
# ---------------------------------------------------------------------------

def correlation(f1: Tensor, f2: Tensor, max_disp: int = 4) -> Tensor:
    """Cost volume between two feature maps.

    Output channel i*(2d+1)+j holds the channel-mean dot product of f1 at
    (x, y) with f2 at (x + i - d, y + j - d); out-of-range samples of f2
    count as zero.
    """
    if f1.shape != f2.shape:
        raise DimensionError(
            f"correlation: feature shapes differ ({f1.shape} vs {f2.shape})")
    if f1.ndim != 4:
        raise DimensionError("correlation: features must be 4-D")
    d = int(max_disp)
    nd = 2 * d + 1
    b_, c, h, w_ = f1.shape
    ab, bb = f1._buf, f2._buf
    bp = np.zeros((b_, h + 2 * d, w_ + 2 * d, c), bb.dtype)
    bp[:, d:d + h, d:d + w_] = bb
    inv_c = 1.0 / c

    def x_shift_view(arr, j):
        """(B, H, W, nd, C) view of row-block j; the x-displacement axis
        steps by one pixel and costs no copy in the channels-last layout."""
        sub = arr[:, j:j + h]
        s = arr.strides
        return np.lib.stride_tricks.as_strided(
            sub, shape=(b_, h, w_, nd, c), strides=(s[0], s[1], s[2], s[2], s[3]),
            writeable=False)

    out_buf = np.empty((b_, h, w_, nd * nd), ab.dtype)
    for j in range(nd):
        # channels i*nd + j for i = 0..nd-1
        np.einsum('bhwc,bhwic->bhwi', ab, x_shift_view(bp, j),
                  out=out_buf[..., j::nd])
    out_buf *= inv_c
    out = Tensor._from_buf(out_buf, (f1, f2), None)
    if out.requires_grad:
        def bw(g):
            need1, need2 = f1.requires_grad, f2.requires_grad
            gs = g * inv_c
            if need1:
                g1 = np.zeros_like(ab)
                for j in range(nd):
                    gj = np.ascontiguousarray(gs[..., j::nd])   # (B, H, W, nd)
                    g1 += np.einsum('bhwi,bhwic->bhwc', gj, x_shift_view(bp, j))
                f1._accumulate(g1)
            if need2:
                # gather formulation of the scatter adjoint: pad the upstream
                # gradient and f1 by d, then read both back at reversed
                # displacements so no overlapping writes occur
                gp = np.zeros((b_, h + 2 * d, w_ + 2 * d, nd * nd), gs.dtype)
                gp[:, d:d + h, d:d + w_] = gs
                ap = np.zeros_like(bp)
                ap[:, d:d + h, d:d + w_] = ab
                g2 = np.zeros((b_, h, w_, c), gs.dtype)
                sg, sa = gp.strides, ap.strides
                it = gp.dtype.itemsize
                for j in range(nd):
                    # base pixel (2d - j, 2d) channel j; advancing the
                    # displacement axis steps one pixel left and nd channels up
                    gv = np.lib.stride_tricks.as_strided(
                        gp[:, 2 * d - j:, 2 * d:, j:],
                        shape=(b_, h, w_, nd),
                        strides=(sg[0], sg[1], sg[2], nd * it - sg[2]),
                        writeable=False)
                    av = np.lib.stride_tricks.as_strided(
                        ap[:, 2 * d - j:, 2 * d:, :],
                        shape=(b_, h, w_, nd, c),
                        strides=(sa[0], sa[1], sa[2], -sa[2], sa[3]),
                        writeable=False)
                    g2 += np.einsum('bhwi,bhwic->bhwc', gv, av)
                f2._accumulate(g2)
        out._backward_fn = bw
    return out


def correlation_displacement(channel: int, max_disp: int = 4) -> tuple[int, int]:
    """(dx, dy) displacement encoded by a cost-volume channel index."""
    nd = 2 * max_disp + 1
    return channel // nd - max_disp, channel % nd - max_disp


# ---------------------------------------------------------------------------
# upsampling
# ---------------------------------------------------------------------------

_UPSAMPLE_CACHE: dict = {}


def _upsample_matrix(n: int, dtype) -> np.ndarray:
    """Dense (2n, n) bilinear interpolation matrix (align_corners=False)."""
    key = (n, np.dtype(dtype).name)
    m = _UPSAMPLE_CACHE.get(key)
    if m is None:
        src = (np.arange(2 * n, dtype=np.float64) + 0.5) / 2.0 - 0.5
        src = np.clip(src, 0.0, n - 1.0)
        i0 = np.floor(src).astype(int)
        frac = src - i0
        i1 = np.minimum(i0 + 1, n - 1)
        m = np.zeros((2 * n, n), np.float64)
        m[np.arange(2 * n), i0] += 1.0 - frac
        m[np.arange(2 * n), i1] += frac
        m = m.astype(dtype)
        _UPSAMPLE_CACHE[key] = m
    return m


def upsample_bilinear2x(x: Tensor, scale_values: bool = False) -> Tensor:
    """Double the spatial dimensions with bilinear interpolation.

    With ``scale_values=True`` the result is additionally multiplied by 2,
    which converts a flow field to the finer level's pixel units.
    """
    if x.ndim != 4:
        raise DimensionError("upsample_bilinear2x: input must be 4-D")
    b_, c, h, w_ = x.shape
    xb = x._buf
    ky = _upsample_matrix(h, xb.dtype)
    kx = _upsample_matrix(w_, xb.dtype)

    def apply(buf, my, mx):
        bb, hh, ww, cc = buf.shape
        t = (my @ buf.reshape(bb, hh, ww * cc)).reshape(bb, -1, ww, cc)
        t2 = np.matmul(mx, t.reshape(bb * t.shape[1], ww, cc))
        return np.ascontiguousarray(t2.reshape(bb, t.shape[1], -1, cc))

    out_buf = apply(xb, ky, kx)
    if scale_values:
        out_buf *= 2
    out = Tensor._from_buf(out_buf, (x,), None)
    if out.requires_grad:
        def bw(g):
            gi = apply(g, np.ascontiguousarray(ky.T), np.ascontiguousarray(kx.T))
            if scale_values:
                gi *= 2
            x._accumulate(gi)
        out._backward_fn = bw
    return out


# ---------------------------------------------------------------------------
# heads and losses
# ---------------------------------------------------------------------------

def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean, (B, C, H, W) -> (B, C)."""
    if x.ndim != 4:
        raise DimensionError("global_avg_pool: input must be 4-D")
    b_, c, h, w_ = x.shape
    xb = x._buf
    out = Tensor._from_buf(np.ascontiguousarray(xb.mean(axis=(1, 2))), (x,), None)
    if out.requires_grad:
        inv = 1.0 / (h * w_)
        def bw(g):
            x._accumulate(np.broadcast_to((g * inv)[:, None, None, :], xb.shape).copy())
        out._backward_fn = bw
    return out


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map on feature vectors, (B, Cin) @ (Cin, Cout) + bias."""
    if x.ndim != 2 or weight.ndim != 2:
        raise DimensionError("linear: expects a 2-D input and weight")
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(
            f"linear: input features ({x.shape[1]}) do not match weight rows ({weight.shape[0]})")
    # per-row matmul keeps each sample's result independent of batch size
    out_buf = np.matmul(x._buf[:, None, :], weight._buf)[:, 0, :]
    if bias is not None:
        out_buf += bias._buf
    parents = (x, weight) if bias is None else (x, weight, bias)
    out = Tensor._from_buf(out_buf, parents, None)
    if out.requires_grad:
        def bw(g):
            if bias is not None and bias.requires_grad:
                bias._accumulate(g.sum(axis=0))
            if x.requires_grad:
                x._accumulate(g @ weight._buf.T)
            if weight.requires_grad:
                weight._accumulate(x._buf.T @ g)
        out._backward_fn = bw
    return out


def epe(pred: Tensor, target: Tensor) -> Tensor:
    """Mean per-pixel Euclidean norm of the flow difference (endpoint error)."""
    if pred.shape != target.shape:
        raise DimensionError(
            f"epe: shapes differ ({pred.shape} vs {target.shape})")
    if pred.ndim != 4:
        raise DimensionError("epe: expects 4-D flow fields")
    a, b = pred, target
    diff = a._buf - b._buf                      # (B, H, W, 2)
    norm = np.sqrt((diff * diff).sum(axis=-1))  # (B, H, W)
    out = Tensor._from_buf(
        np.asarray(norm.mean(dtype=np.float64)).astype(a.dtype), (a, b), None)
    if out.requires_grad:
        count = norm.size
        def bw(g):
            inv = np.zeros_like(norm)
            nz = norm > 0
            inv[nz] = 1.0 / norm[nz]
            gd = diff * (inv * (float(g) / count))[..., None]
            if a.requires_grad:
                a._accumulate(gd)
            if b.requires_grad:
                b._accumulate(-gd)
        out._backward_fn = bw
    return out


def l1_mean(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute difference over all elements."""
    return (pred - target).abs().mean()
