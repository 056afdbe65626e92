"""Differentiable square root of a symmetric positive-definite matrix.

Newton-Schulz iteration with trace pre-normalization: for SPD input the
normalized matrix has spectrum in (0, 1], which guarantees convergence.  The
whole iteration is a composition of matmuls, so gradients flow through it on
the tape like any other primitive chain.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import DTYPE, Tensor

__all__ = ["newton_schulz_sqrt", "SqrtmError"]


class SqrtmError(ValueError):
    """Raised for invalid (non-SPD) inputs or a diverging iteration."""


def _validate_spd(a: np.ndarray) -> None:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise SqrtmError(f"newton_schulz_sqrt: need a square matrix, got {a.shape}")
    scale = max(1.0, float(np.abs(a).max()))
    asym = float(np.abs(a - a.T).max())
    if asym > 1e-5 * scale:
        raise SqrtmError(
            f"newton_schulz_sqrt: input not symmetric (max asymmetry {asym:.3e})")
    jittered = a.astype(np.float64) + 1e-6 * np.eye(a.shape[0])
    try:
        np.linalg.cholesky(jittered)
    except np.linalg.LinAlgError:
        raise SqrtmError(
            "newton_schulz_sqrt: input not positive definite "
            "(Cholesky probe failed after 1e-6 jitter)") from None


def newton_schulz_sqrt(m, iters: int = 15) -> Tensor:
    """Return Y with Y @ Y ~= m for SPD ``m``, differentiable through matmuls."""
    if iters < 1:
        raise SqrtmError(f"newton_schulz_sqrt: iters must be >= 1, got {iters}")
    m = m if isinstance(m, Tensor) else Tensor(m)
    _validate_spd(m.data)
    n = m.shape[0]
    eye = Tensor(np.eye(n, dtype=DTYPE))
    three_eye = Tensor(3.0 * np.eye(n, dtype=DTYPE))

    tau = T.trace(m)
    y = T.div(m, tau)
    z = eye
    norm_a = float(np.linalg.norm(m.data))
    sqrt_tau = T.sqrt(tau)
    best_residual = np.inf
    for _ in range(iters):
        t_mat = T.mul(T.sub(three_eye, T.matmul(z, y)), 0.5)
        y = T.matmul(y, t_mat)
        z = T.matmul(t_mat, z)
        approx = y.data * np.sqrt(float(tau.data))
        residual = float(np.linalg.norm(approx @ approx - m.data)) / max(norm_a, 1e-30)
        # converged iterates jitter at the f32 noise floor; only a residual
        # growing well past the best seen marks true divergence
        if residual > max(10.0 * best_residual, 1e-3) and best_residual < 0.1:
            raise SqrtmError(
                f"newton_schulz_sqrt: iteration diverging "
                f"(residual {residual:.3e}, best was {best_residual:.3e})")
        best_residual = min(best_residual, residual)
    return T.mul(y, sqrt_tau)
