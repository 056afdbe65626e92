import numpy as np
import pytest

import baddiv.autodiff as ad
from baddiv.autodiff import ShapeError, Tensor


# ---------------------------------------------------------------------------
# reference implementations (independent quadruple-loop oracles, float64)
# ---------------------------------------------------------------------------

def conv2d_ref(x, w, stride=1, padding=0):
    b, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    xp = np.pad(x.astype(np.float64),
                ((0, 0), (0, 0), (padding,) * 2, (padding,) * 2))
    out = np.zeros((b, co, oh, ow))
    for n in range(b):
        for o in range(co):
            for y in range(oh):
                for z in range(ow):
                    patch = xp[n, :, y * stride:y * stride + kh,
                               z * stride:z * stride + kw]
                    out[n, o, y, z] = np.sum(patch * w[o].astype(np.float64))
    return out


def conv_transpose2d_ref(x, w, stride=1, padding=0, output_padding=0):
    b, ci, h, wd = x.shape
    _, co, kh, kw = w.shape
    oh = (h - 1) * stride - 2 * padding + kh + output_padding
    ow = (wd - 1) * stride - 2 * padding + kw + output_padding
    full = np.zeros((b, co, (h - 1) * stride + kh + output_padding,
                     (wd - 1) * stride + kw + output_padding))
    for n in range(b):
        for c in range(ci):
            for y in range(h):
                for z in range(wd):
                    full[n, :, y * stride:y * stride + kh,
                         z * stride:z * stride + kw] += \
                        x[n, c, y, z] * w[c].astype(np.float64)
    return full[:, :, padding:padding + oh, padding:padding + ow]


def _rand(rng, *shape):
    return rng.normal(size=shape).astype(np.float32)


# ---------------------------------------------------------------------------
# forward values and shapes
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 3)])
def test_conv2d_matches_loop_reference(rng, stride, padding):
    x = _rand(rng, 2, 3, 9, 8)
    w = _rand(rng, 4, 3, 3, 3)
    got = ad.conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding)
    ref = conv2d_ref(x, w, stride, padding)
    assert got.shape == ref.shape
    np.testing.assert_allclose(got.numpy(), ref, atol=1e-4)


@pytest.mark.parametrize("stride,padding,outpad", [
    (1, 0, 0), (1, 2, 0), (2, 1, 1), (2, 3, 0), (4, 4, 3),
])
def test_conv_transpose2d_matches_loop_reference(rng, stride, padding, outpad):
    x = _rand(rng, 2, 3, 5, 6)
    w = _rand(rng, 3, 4, 5, 5)
    got = ad.conv_transpose2d(Tensor(x), Tensor(w), stride=stride,
                              padding=padding, output_padding=outpad)
    ref = conv_transpose2d_ref(x, w, stride, padding, outpad)
    assert got.shape == ref.shape
    np.testing.assert_allclose(got.numpy(), ref, atol=1e-4)


def test_conv2d_shape_formula(rng):
    # 1x1x28x28 with 3x3 kernel, stride 1, pad 1 keeps 28x28
    x = _rand(rng, 1, 1, 28, 28)
    w = _rand(rng, 8, 1, 3, 3)
    out = ad.conv2d(Tensor(x), Tensor(w), stride=1, padding=1)
    assert out.shape == (1, 8, 28, 28)


def test_conv_shape_errors(rng):
    with pytest.raises(ShapeError, match="channels"):
        ad.conv2d(Tensor(_rand(rng, 1, 2, 8, 8)), Tensor(_rand(rng, 4, 3, 3, 3)))
    with pytest.raises(ShapeError, match="too large"):
        ad.conv2d(Tensor(_rand(rng, 1, 1, 4, 4)), Tensor(_rand(rng, 1, 1, 7, 7)))
    with pytest.raises(ShapeError, match="output_padding"):
        ad.conv_transpose2d(Tensor(_rand(rng, 1, 1, 4, 4)),
                            Tensor(_rand(rng, 1, 1, 3, 3)),
                            stride=1, output_padding=1)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1)])
def test_gradcheck_conv2d(rng, gradcheck, stride, padding):
    x = _rand(rng, 2, 2, 5, 5)
    w = _rand(rng, 3, 2, 3, 3) * 0.5
    probe = None

    def fn(xx, ww):
        nonlocal probe
        y = ad.conv2d(xx, ww, stride=stride, padding=padding)
        if probe is None:
            probe = Tensor(np.asarray(
                np.random.default_rng(7).normal(size=y.shape), np.float32))
        return ad.tmean(ad.mul(y, probe))

    gradcheck(fn, [x, w])


@pytest.mark.parametrize("stride,padding,outpad", [(1, 1, 0), (2, 1, 1)])
def test_gradcheck_conv_transpose2d(rng, gradcheck, stride, padding, outpad):
    x = _rand(rng, 2, 2, 4, 4)
    w = _rand(rng, 2, 3, 3, 3) * 0.5
    probe = None

    def fn(xx, ww):
        nonlocal probe
        y = ad.conv_transpose2d(xx, ww, stride=stride, padding=padding,
                                output_padding=outpad)
        if probe is None:
            probe = Tensor(np.asarray(
                np.random.default_rng(8).normal(size=y.shape), np.float32))
        return ad.tmean(ad.mul(y, probe))

    gradcheck(fn, [x, w])
