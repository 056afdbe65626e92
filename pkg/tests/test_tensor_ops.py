import numpy as np
import pytest

import baddiv.autodiff as ad
from baddiv.autodiff import (
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    no_grad,
)


# ---------------------------------------------------------------------------
# forward semantics
# ---------------------------------------------------------------------------

def test_matmul_identity(rng):
    a = rng.normal(size=(3, 3)).astype(np.float32)
    out = ad.matmul(Tensor(np.eye(3)), Tensor(a))
    np.testing.assert_array_equal(out.numpy(), a)


def test_sigmoid_at_zero():
    assert ad.sigmoid(Tensor(np.zeros(4))).numpy()[0] == pytest.approx(0.5)


def test_sigmoid_extreme_inputs_stay_finite():
    out = ad.sigmoid(Tensor([-500.0, 500.0])).numpy()
    assert out[0] == pytest.approx(0.0, abs=1e-6)
    assert out[1] == pytest.approx(1.0, abs=1e-6)


def test_softmax_rows_sum_to_one(rng):
    x = rng.normal(scale=5.0, size=(6, 10)).astype(np.float32)
    probs = ad.softmax(Tensor(x)).numpy()
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-5)
    np.testing.assert_allclose(
        np.log(probs), ad.log_softmax(Tensor(x)).numpy(), atol=1e-5)


def test_elu_matches_definition(rng):
    x = rng.normal(size=32).astype(np.float32)
    out = ad.elu(Tensor(x)).numpy()
    expect = np.where(x > 0, x, np.exp(x) - 1.0)
    np.testing.assert_allclose(out, expect, atol=1e-6)


def test_leaky_relu_slope():
    out = ad.leaky_relu(Tensor([-2.0, 3.0]), negative_slope=0.1).numpy()
    np.testing.assert_allclose(out, [-0.2, 3.0], atol=1e-7)


def test_reductions_match_numpy(rng):
    x = rng.normal(size=(4, 5, 6)).astype(np.float32)
    np.testing.assert_allclose(ad.tsum(Tensor(x)).item(), x.sum(), rtol=1e-5)
    np.testing.assert_allclose(
        ad.tsum(Tensor(x), axis=1).numpy(), x.sum(axis=1), rtol=1e-5)
    np.testing.assert_allclose(
        ad.tmean(Tensor(x), axis=(0, 2)).numpy(), x.mean(axis=(0, 2)),
        rtol=1e-5)


def test_trace_and_outer(rng):
    a = rng.normal(size=(5, 5)).astype(np.float32)
    assert ad.trace(Tensor(a)).item() == pytest.approx(np.trace(a), rel=1e-5)
    u = rng.normal(size=4).astype(np.float32)
    v = rng.normal(size=3).astype(np.float32)
    np.testing.assert_allclose(
        ad.outer(Tensor(u), Tensor(v)).numpy(), np.outer(u, v), rtol=1e-6)


def test_scalar_mixing():
    x = Tensor([1.0, 2.0])
    np.testing.assert_allclose((2.0 * x + 1.0).numpy(), [3.0, 5.0])
    np.testing.assert_allclose((x / 2.0).numpy(), [0.5, 1.0])
    np.testing.assert_allclose((1.0 - x).numpy(), [0.0, -1.0])


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    with pytest.raises(ShapeError, match=r"add.*\(2,\).*\(3,\)"):
        ad.add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))


def test_non_finite_output_is_an_error():
    with np.errstate(divide="ignore"):
        with pytest.raises(NonFiniteError, match="log"):
            ad.log(Tensor([0.0]))
        with pytest.raises(NonFiniteError, match="div"):
            ad.div(Tensor([1.0]), Tensor([0.0]))
        with ad.finite_checks(False):
            assert np.isinf(ad.div(Tensor([1.0]), Tensor([0.0])).numpy()[0])


def test_forward_determinism(rng):
    x = rng.normal(size=(16, 16)).astype(np.float32)
    w = rng.normal(size=(16, 16)).astype(np.float32)

    def run():
        return ad.sigmoid(ad.matmul(Tensor(x), Tensor(w))).numpy()

    np.testing.assert_array_equal(run(), run())


# ---------------------------------------------------------------------------
# backward contracts
# ---------------------------------------------------------------------------

def test_backward_of_sum_is_ones(rng):
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    with Tape() as tape:
        y = ad.tsum(x)
    tape.backward(y)
    np.testing.assert_array_equal(x.grad, np.ones((3, 4), dtype=np.float32))


def test_backward_of_mean_square(rng):
    data = rng.normal(size=8).astype(np.float32)
    x = Tensor(data, requires_grad=True)
    with Tape() as tape:
        y = ad.tmean(ad.mul(x, x))
    tape.backward(y)
    np.testing.assert_allclose(x.grad, 2.0 * data / 8.0, rtol=1e-5)


def test_backward_requires_scalar_root(rng):
    x = Tensor(rng.normal(size=4), requires_grad=True)
    with Tape() as tape:
        y = ad.mul(x, x)
    with pytest.raises(ShapeError, match="scalar"):
        tape.backward(y)


def test_backward_rejects_detached_root():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        ad.mul(x, x)
    stray = Tensor([1.0])
    with pytest.raises(ValueError, match="detached"):
        tape.backward(stray)


def test_leaf_off_the_root_path_gets_zero_grad(rng):
    x = Tensor(rng.normal(size=3), requires_grad=True)
    unused = Tensor(rng.normal(size=3), requires_grad=True)
    with Tape() as tape:
        ad.mul(unused, unused)  # recorded but not an ancestor of the root
        y = ad.tsum(ad.mul(x, 2.0))
    tape.backward(y)
    np.testing.assert_array_equal(unused.grad, np.zeros(3, dtype=np.float32))
    np.testing.assert_array_equal(x.grad, np.full(3, 2.0, dtype=np.float32))


def test_grad_accumulates_over_reuse(rng):
    x = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        y = ad.tsum(ad.add(ad.mul(x, x), x))  # x^2 + x -> dy/dx = 2x + 1
    tape.backward(y)
    np.testing.assert_allclose(x.grad, [7.0], rtol=1e-6)


def test_no_grad_suppresses_recording():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        with no_grad():
            y = ad.mul(x, x)
    assert len(tape) == 0
    assert not y.requires_grad


# ---------------------------------------------------------------------------
# finite-difference checks for every primitive
# ---------------------------------------------------------------------------

def _rand(rng, *shape):
    return rng.normal(size=shape).astype(np.float32)


def test_gradcheck_elementwise_binary(rng, gradcheck):
    a, b = _rand(rng, 3, 4), _rand(rng, 3, 4)
    gradcheck(lambda x, y: ad.tsum(ad.mul(ad.add(x, y), ad.sub(x, y))), [a, b])
    bpos = np.abs(b) + 0.5
    gradcheck(lambda x, y: ad.tsum(ad.div(x, y)), [a, bpos])


def test_gradcheck_broadcasting(rng, gradcheck):
    a = _rand(rng, 4, 5)
    b = _rand(rng, 5)
    c = _rand(rng, 4, 1)
    gradcheck(lambda x, y, z: ad.tsum(ad.mul(ad.add(x, y), z)), [a, b, c])


def test_gradcheck_matmul_transpose(rng, gradcheck):
    a, b = _rand(rng, 3, 4), _rand(rng, 4, 2)
    gradcheck(lambda x, y: ad.tsum(ad.matmul(x, y)), [a, b])
    gradcheck(lambda x, y: ad.tsum(ad.matmul(ad.transpose(y), ad.transpose(x))),
              [a, b])


def test_gradcheck_reshape_mean(rng, gradcheck):
    a = _rand(rng, 2, 6)
    gradcheck(lambda x: ad.tmean(ad.reshape(x, (3, 4)), axis=1).sum(), [a])


@pytest.mark.parametrize("op", [
    lambda x: ad.tsum(ad.exp(x)),
    lambda x: ad.tsum(ad.sigmoid(x)),
    lambda x: ad.tsum(ad.elu(x)),
    lambda x: ad.tsum(ad.leaky_relu(x)),
    lambda x: ad.tsum(ad.mul(ad.softmax(x, axis=1), ad.softmax(x, axis=1))),
    lambda x: ad.tsum(ad.mul(x, ad.log_softmax(x, axis=1))),
])
def test_gradcheck_nonlinearities(rng, gradcheck, op):
    gradcheck(op, [_rand(rng, 4, 6)])


def test_gradcheck_log_sqrt_clip(rng, gradcheck):
    pos = np.abs(_rand(rng, 3, 3)) + 0.5
    gradcheck(lambda x: ad.tsum(ad.log(x)), [pos])
    gradcheck(lambda x: ad.tsum(ad.sqrt(x)), [pos])
    # keep finite-difference probes away from the clip boundaries
    inner = np.clip(_rand(rng, 16), -0.9, 0.9) * 0.5
    gradcheck(lambda x: ad.tsum(ad.clip(x, -1.0, 1.0)), [inner])


def test_gradcheck_trace_outer(rng, gradcheck):
    a = _rand(rng, 5, 5)
    gradcheck(lambda x: ad.trace(ad.matmul(x, x)), [a])
    u, v = _rand(rng, 4), _rand(rng, 4)
    gradcheck(lambda x, y: ad.tsum(ad.outer(x, y)), [u, v])


def test_gradcheck_batch_norm(rng, gradcheck):
    # weight the outputs so the gradient through the batch statistics is not
    # identically zero (sum of bn(x)^2 is constant in x by construction)
    x = _rand(rng, 6, 3)
    gamma = np.abs(_rand(rng, 3)) + 0.5
    beta = _rand(rng, 3)
    w2 = Tensor(_rand(rng, 6, 3))
    gradcheck(lambda a, g, b: ad.tsum(
        ad.mul(ad.batch_norm(a, g, b), w2)), [x, gamma, beta])
    x4 = _rand(rng, 2, 3, 3, 3)
    gradcheck(lambda a, g, b: ad.tmean(
        ad.exp(ad.mul(ad.batch_norm(a, g, b), 0.3))), [x4, gamma, beta])


def test_gradcheck_batch_norm_eval_mode(rng, gradcheck):
    x = _rand(rng, 5, 3)
    gamma, beta = np.ones(3, np.float32), np.zeros(3, np.float32)
    mean, var = np.array([0.1, -0.2, 0.3]), np.array([1.5, 0.7, 2.0])
    gradcheck(lambda a, g, b: ad.tsum(ad.mul(
        ad.batch_norm(a, g, b, mean=mean, var=var),
        ad.batch_norm(a, g, b, mean=mean, var=var))), [x, gamma, beta])


def test_gradcheck_chain_composition(rng, gradcheck):
    # f(g(x)) as one unit, not just each factor alone
    a = _rand(rng, 3, 3)
    b = _rand(rng, 3, 3)

    def composed(x, y):
        h = ad.sigmoid(ad.matmul(x, y))
        z = ad.elu(ad.sub(ad.matmul(h, y), x))
        return ad.tmean(ad.mul(z, z))

    gradcheck(composed, [a, b])
