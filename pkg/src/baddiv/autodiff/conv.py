"""2-D convolution and transposed convolution primitives (NCHW).

The kernels run per kernel-offset: each offset contributes one BLAS matmul
over the channel axis, accumulated directly into the output via ``sgemm`` with
beta=1.  Data is laid out NHWC internally so the channel contraction hits
contiguous memory; the public API stays NCHW.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg.blas import sgemm

from .tensor import DTYPE, ShapeError, Tensor, _coerce, record

__all__ = ["conv2d", "conv_transpose2d"]


def _to_nhwc(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(x, 1, 3))


def _to_nchw(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(x, 3, 1))


def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))


def _gather_mm(src: np.ndarray, wf: np.ndarray, stride: int,
               out_h: int, out_w: int) -> np.ndarray:
    """Correlate: out[m, :] += patch(i,j)[m, :] @ wf[i, j] over all offsets.

    src: (B, Hs, Ws, A) contiguous, wf: (kh, kw, A, C); returns (B, oh, ow, C).
    Accumulation happens inside sgemm (beta=1) on the transposed output view.
    """
    batch, _, _, a_ch = src.shape
    kh, kw, _, c_ch = wf.shape
    out = np.zeros((batch * out_h * out_w, c_ch), dtype=DTYPE)
    out_t = out.T  # F-contiguous alias
    he = (out_h - 1) * stride + 1
    we = (out_w - 1) * stride + 1
    ws = np.empty((batch, out_h, out_w, a_ch), dtype=DTYPE)
    ws2_t = ws.reshape(-1, a_ch).T
    for i in range(kh):
        for j in range(kw):
            np.copyto(ws, src[:, i:i + he:stride, j:j + we:stride, :])
            # out.T = wf[i,j].T @ patch.T + out.T, all operands F-contiguous
            sgemm(1.0, wf[i, j].T, ws2_t, beta=1.0, c=out_t, overwrite_c=1)
    return out.reshape(batch, out_h, out_w, c_ch)


def _scatter_mm(src: np.ndarray, wf: np.ndarray, stride: int,
                canvas_h: int, canvas_w: int) -> np.ndarray:
    """Adjoint of :func:`_gather_mm`: scatter-add per-offset matmul results.

    src: (B, H, W, A), wf: (kh, kw, A, C); returns (B, canvas_h, canvas_w, C)
    with canvas[b, h*s+i, w*s+j, :] += src[b, h, w, :] @ wf[i, j].
    """
    batch, h, w, a_ch = src.shape
    kh, kw, _, c_ch = wf.shape
    canvas = np.zeros((batch, canvas_h, canvas_w, c_ch), dtype=DTYPE)
    s2 = src.reshape(-1, a_ch)
    he = (h - 1) * stride + 1
    we = (w - 1) * stride + 1
    prod = np.empty((s2.shape[0], c_ch), dtype=DTYPE)
    prod4 = prod.reshape(batch, h, w, c_ch)
    for i in range(kh):
        for j in range(kw):
            np.matmul(s2, wf[i, j], out=prod)
            canvas[:, i:i + he:stride, j:j + we:stride, :] += prod4
    return canvas


def _offset_dw(src: np.ndarray, gy: np.ndarray, stride: int,
               kh: int, kw: int) -> np.ndarray:
    """Weight gradient: dw[i, j] = patch(i,j).T @ gy, per offset.

    src: (B, Hs, Ws, A), gy: (B, oh, ow, C); returns (kh, kw, A, C).
    """
    batch, oh, ow, c_ch = gy.shape
    a_ch = src.shape[3]
    g2 = gy.reshape(-1, c_ch)
    out = np.empty((kh, kw, a_ch, c_ch), dtype=DTYPE)
    he = (oh - 1) * stride + 1
    we = (ow - 1) * stride + 1
    ws = np.empty((batch, oh, ow, a_ch), dtype=DTYPE)
    ws2 = ws.reshape(-1, a_ch)
    for i in range(kh):
        for j in range(kw):
            np.copyto(ws, src[:, i:i + he:stride, j:j + we:stride, :])
            out[i, j] = ws2.T @ g2
    return out


def conv2d(x, w, *, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x (B, Ci, H, W) with w (Co, Ci, kh, kw).

    Output extent per spatial axis: floor((in + 2*pad - kernel)/stride) + 1.
    """
    x, w = _coerce(x), _coerce(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: need 4-d input and weight, "
                         f"got {x.shape} and {w.shape}")
    b, ci, h, wd = x.shape
    co, ci_w, kh, kw = w.shape
    if ci != ci_w:
        raise ShapeError(f"conv2d: input channels {x.shape} vs weight {w.shape}")
    s, p = int(stride), int(padding)
    oh = (h + 2 * p - kh) // s + 1
    ow = (wd + 2 * p - kw) // s + 1
    if oh < 1 or ow < 1 or h + 2 * p < kh or wd + 2 * p < kw:
        raise ShapeError(f"conv2d: kernel {w.shape} too large for input "
                         f"{x.shape} with padding {p}")
    xp = _pad_hw(_to_nhwc(x.data), p)
    wf = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0))  # (kh,kw,Ci,Co)
    y = _gather_mm(xp, wf, s, oh, ow)

    def backward(g):
        gn = _to_nhwc(g)
        gw = None
        if w.requires_grad:
            gw = _offset_dw(xp, gn, s, kh, kw).transpose(3, 2, 0, 1)
            gw = np.ascontiguousarray(gw)
        gx = None
        if x.requires_grad:
            wb = np.ascontiguousarray(w.data.transpose(2, 3, 0, 1))  # (kh,kw,Co,Ci)
            gxp = _scatter_mm(gn, wb, s, h + 2 * p, wd + 2 * p)
            if p:
                gxp = gxp[:, p:p + h, p:p + wd, :]
            gx = _to_nchw(gxp)
        return gx, gw

    return record("conv2d", _to_nchw(y), (x, w), backward)


def conv_transpose2d(x, w, *, stride: int = 1, padding: int = 0,
                     output_padding: int = 0) -> Tensor:
    """Transposed correlation of x (B, Ci, H, W) with w (Ci, Co, kh, kw).

    Output extent per spatial axis:
    (in - 1)*stride - 2*pad + kernel + output_padding.
    """
    x, w = _coerce(x), _coerce(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv_transpose2d: need 4-d input and weight, "
                         f"got {x.shape} and {w.shape}")
    b, ci, h, wd = x.shape
    ci_w, co, kh, kw = w.shape
    if ci != ci_w:
        raise ShapeError(
            f"conv_transpose2d: input channels {x.shape} vs weight {w.shape}")
    s, p, op = int(stride), int(padding), int(output_padding)
    if not 0 <= op < max(s, 1):
        raise ShapeError(
            f"conv_transpose2d: output_padding {op} must be < stride {s}")
    oh = (h - 1) * s - 2 * p + kh + op
    ow = (wd - 1) * s - 2 * p + kw + op
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv_transpose2d: empty output for input {x.shape}, "
                         f"kernel {w.shape}, stride {s}, padding {p}")
    ch = (h - 1) * s + kh + op
    cw = (wd - 1) * s + kw + op
    xn = _to_nhwc(x.data)
    wf = np.ascontiguousarray(w.data.transpose(2, 3, 0, 1))  # (kh,kw,Ci,Co)
    canvas = _scatter_mm(xn, wf, s, ch, cw)
    y = canvas[:, p:p + oh, p:p + ow, :]

    def backward(g):
        cg = np.zeros((b, ch, cw, co), dtype=DTYPE)
        cg[:, p:p + oh, p:p + ow, :] = _to_nhwc(g)
        gx = None
        if x.requires_grad:
            wb = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0))  # (kh,kw,Co,Ci)
            gx = _to_nchw(_gather_mm(cg, wb, s, h, wd))
        gw = None
        if w.requires_grad:
            gw = _offset_dw(cg, xn, s, kh, kw).transpose(3, 2, 0, 1)
            gw = np.ascontiguousarray(gw)
        return gx, gw

    return record("conv_transpose2d", _to_nchw(np.ascontiguousarray(y)),
                  (x, w), backward)
