import numpy as np
import pytest

from baddiv.autodiff import Tape, Tensor, no_grad


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def numeric_grad(fn, arrays, wrt, eps=1e-3):
    """Central finite differences of a scalar function w.r.t. arrays[wrt].

    ``fn`` consumes Tensors and returns a scalar Tensor; evaluation happens
    off-tape.  This is the independent oracle for every analytic gradient.
    """
    base = [np.array(a, dtype=np.float32) for a in arrays]
    x = base[wrt]
    grad = np.zeros(x.shape, dtype=np.float64)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for k in range(flat_x.size):
        orig = flat_x[k]
        flat_x[k] = orig + eps
        with no_grad():
            fp = fn(*[Tensor(a) for a in base]).item()
        flat_x[k] = orig - eps
        with no_grad():
            fm = fn(*[Tensor(a) for a in base]).item()
        flat_x[k] = orig
        flat_g[k] = (fp - fm) / (2.0 * eps)
    return grad


def tape_grads(fn, arrays):
    """Analytic gradients of a scalar-valued tensor function via the tape."""
    ts = [Tensor(np.array(a, dtype=np.float32), requires_grad=True)
          for a in arrays]
    with Tape() as tape:
        y = fn(*ts)
    tape.backward(y)
    return [t.grad for t in ts], y


def assert_gradients_close(fn, arrays, rtol=1e-3, eps=1e-3):
    """Check every input's tape gradient against central finite differences."""
    analytic, _ = tape_grads(fn, arrays)
    for i in range(len(arrays)):
        numeric = numeric_grad(fn, arrays, i, eps=eps)
        scale = max(float(np.abs(numeric).max()), 1.0)
        err = float(np.abs(analytic[i] - numeric).max()) / scale
        assert err < rtol, (
            f"gradient mismatch for input {i}: max rel err {err:.2e}\n"
            f"analytic:\n{analytic[i]}\nnumeric:\n{numeric}")


@pytest.fixture
def gradcheck():
    return assert_gradients_close
