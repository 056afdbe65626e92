"""Divergence metrics (inception score, Frechet distance, MMD^2) and the two
loss couples that drive the decoder away from digit-class clusters while
keeping it inside the global digit distribution.

Sign convention: the couple weights (alpha, beta) are stored exactly as
signed values and the training loop always MAXIMIZES
``total = alpha * l_div - beta * l_reg``.  The inception score enters the
IS/FID couple with a negative alpha because a low score is the goal there.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import DTYPE, Tensor, newton_schulz_sqrt, no_grad

__all__ = [
    "KernelConfig",
    "BadConfig",
    "GaussianMoments",
    "WEIGHT_PRESETS",
    "inception_score",
    "gaussian_moments",
    "frechet_distance",
    "rbf_kernel_matrix",
    "median_bandwidth",
    "mmd2",
    "bad_loss_isfid",
    "bad_loss_mmd",
]

# (classifier family, couple) -> (alpha, beta)
WEIGHT_PRESETS = {
    ("custom", "is_fid"): (-1.0, 1.0),
    ("custom", "mmd"): (1.0, 20.0),
    ("generic", "is_fid"): (-1.0, 0.1),
    ("generic", "mmd"): (1.0, 5.0),
}


@dataclass
class KernelConfig:
    """RBF kernel; bandwidth is a positive scalar or "median" for the
    median-heuristic (recomputed per call, frozen for differentiation)."""

    kind: str = "rbf"
    bandwidth: Union[float, str] = "median"

    def __post_init__(self):
        if self.kind != "rbf":
            raise ValueError(f"unsupported kernel kind {self.kind!r}")
        if isinstance(self.bandwidth, str):
            if self.bandwidth != "median":
                raise ValueError(f"bad bandwidth spec {self.bandwidth!r}")
        elif self.bandwidth <= 0:
            raise ValueError(f"bandwidth must be > 0, got {self.bandwidth}")


@dataclass
class BadConfig:
    """Weights, couple selector and classifier selector for the objective."""

    couple: str = "mmd"  # "is_fid" | "mmd"
    alpha: float = None
    beta: float = None
    classifier: str = "custom"
    num_classes: int = 10
    kernel: KernelConfig = field(default_factory=KernelConfig)
    fid_squared_mean_term: bool = True

    def __post_init__(self):
        if self.couple not in ("is_fid", "mmd"):
            raise ValueError(f"unknown loss couple {self.couple!r}")
        preset = WEIGHT_PRESETS.get((self.classifier, self.couple))
        if self.alpha is None:
            self.alpha = preset[0] if preset else 1.0
        if self.beta is None:
            self.beta = preset[1] if preset else 1.0


@dataclass
class GaussianMoments:
    mu: Tensor
    sigma: Tensor


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# inception score
# ---------------------------------------------------------------------------

def inception_score(probs) -> Tensor:
    """exp of the mean KL between per-sample class posteriors and the batch
    marginal; >= 1, differentiable w.r.t. probs."""
    probs = _as_tensor(probs)
    if probs.ndim != 2 or probs.shape[0] < 2:
        raise ValueError(
            f"inception_score: need (batch >= 2, classes), got {probs.shape}")
    sums = probs.data.sum(axis=1)
    if np.abs(sums - 1.0).max() > 1e-4:
        raise ValueError("inception_score: rows must sum to 1 (+- 1e-4)")
    p = ad.clip(probs, 1e-12, 1.0)
    marginal = ad.tmean(p, axis=0, keepdims=True)
    kl_rows = ad.tsum(ad.mul(p, ad.sub(ad.log(p), ad.log(marginal))), axis=1)
    return ad.exp(ad.tmean(kl_rows))


# ---------------------------------------------------------------------------
# Frechet distance
# ---------------------------------------------------------------------------

def gaussian_moments(feats) -> GaussianMoments:
    """Column mean and unbiased sample covariance (divisor n-1), symmetrized."""
    feats = _as_tensor(feats)
    n = feats.shape[0]
    if feats.ndim != 2 or n < 2:
        raise ValueError(f"gaussian_moments: need (n >= 2, d), got {feats.shape}")
    mu = ad.tmean(feats, axis=0)
    centered = ad.sub(feats, ad.reshape(mu, (1, -1)))
    sigma = ad.div(ad.matmul(ad.transpose(centered), centered), float(n - 1))
    sigma = ad.mul(ad.add(sigma, ad.transpose(sigma)), 0.5)
    return GaussianMoments(mu=mu, sigma=sigma)


def frechet_distance(a: GaussianMoments, b: GaussianMoments,
                     sqrt_iters: int = 15,
                     squared_mean_term: bool = True) -> Tensor:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^1/2).

    The square-root factor is computed as sqrt(S_a) S_b sqrt(S_a) (similar to
    S_a S_b but symmetric) so the Newton-Schulz iteration stays on SPD inputs
    and the whole expression is differentiable.  Small negative totals from
    truncated iterations are clamped to 0.
    """
    if a.mu.shape != b.mu.shape or a.sigma.shape != b.sigma.shape:
        raise ValueError(
            f"frechet_distance: dimension mismatch {a.mu.shape}/{a.sigma.shape}"
            f" vs {b.mu.shape}/{b.sigma.shape}")
    d = a.mu.shape[0]
    jitter = Tensor(1e-6 * np.eye(d, dtype=DTYPE))
    sig_a = ad.add(a.sigma, jitter)
    sig_b = ad.add(b.sigma, jitter)
    root_a = newton_schulz_sqrt(sig_a, iters=sqrt_iters)
    inner = ad.matmul(ad.matmul(root_a, sig_b), root_a)
    inner = ad.mul(ad.add(inner, ad.transpose(inner)), 0.5)
    cross_root = newton_schulz_sqrt(inner, iters=sqrt_iters)
    diff = ad.sub(a.mu, b.mu)
    mean_sq = ad.tsum(ad.mul(diff, diff))
    if squared_mean_term:
        mean_term = mean_sq
    else:
        mean_term = ad.sqrt(ad.add(mean_sq, 1e-12))
    trace_term = ad.sub(ad.add(ad.trace(sig_a), ad.trace(sig_b)),
                        ad.mul(ad.trace(cross_root), 2.0))
    total = ad.add(mean_term, trace_term)
    return ad.clip(total, 0.0, np.inf)


# ---------------------------------------------------------------------------
# MMD
# ---------------------------------------------------------------------------

def median_bandwidth(x: np.ndarray, y: np.ndarray) -> float:
    """Median pairwise Euclidean distance over the joined sample."""
    joined = np.concatenate([np.asarray(x), np.asarray(y)], axis=0)
    sq = np.sum(joined ** 2, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (joined @ joined.T)
    iu = np.triu_indices(len(joined), k=1)
    med = float(np.median(np.sqrt(np.maximum(d2[iu], 0.0))))
    if med <= 0.0:
        raise ValueError(
            "median_bandwidth: joined sample is degenerate (all points "
            "identical); pass an explicit bandwidth")
    return med


def rbf_kernel_matrix(x, y, bandwidth: Union[float, str] = "median") -> Tensor:
    """k(x, y) = exp(-||x - y||^2 / (2 h^2)), differentiable w.r.t. x and y.

    With bandwidth="median" the median heuristic over the joined sample sets
    h once per call; the value is excluded from differentiation.
    """
    x, y = _as_tensor(x), _as_tensor(y)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ValueError(
            f"rbf_kernel_matrix: need (m, d) and (m', d), got {x.shape} "
            f"and {y.shape}")
    if bandwidth == "median":
        h = median_bandwidth(x.data, y.data)
    else:
        h = float(bandwidth)
        if h <= 0:
            raise ValueError(f"rbf_kernel_matrix: bandwidth must be > 0, got {h}")
    x2 = ad.tsum(ad.mul(x, x), axis=1, keepdims=True)
    y2 = ad.tsum(ad.mul(y, y), axis=1, keepdims=True)
    cross = ad.matmul(x, ad.transpose(y))
    d2 = ad.add(ad.sub(x2, ad.mul(cross, 2.0)), ad.transpose(y2))
    d2 = ad.clip(d2, 0.0, np.inf)
    return ad.exp(ad.div(d2, -2.0 * h * h))


def _offdiag_mean(k: Tensor, n: int) -> Tensor:
    return ad.div(ad.sub(ad.tsum(k), ad.trace(k)), float(n * (n - 1)))


def mmd2(x_feats, y_feats, kernel: KernelConfig = None) -> Tensor:
    """Squared maximum mean discrepancy with off-diagonal-mean within-set
    terms and a full-mean cross term (1/(m m') generalizes the printed 1/m^2
    to unequal set sizes)."""
    kernel = kernel or KernelConfig()
    x, y = _as_tensor(x_feats), _as_tensor(y_feats)
    m, mp = x.shape[0], y.shape[0]
    if m < 2 or mp < 2:
        raise ValueError(f"mmd2: need at least 2 samples per set, "
                         f"got {m} and {mp}")
    if kernel.bandwidth == "median":
        h = median_bandwidth(x.data, y.data)
    else:
        h = float(kernel.bandwidth)
    kxx = rbf_kernel_matrix(x, x, h)
    kxy = rbf_kernel_matrix(x, y, h)
    kyy = rbf_kernel_matrix(y, y, h)
    cross = ad.div(ad.tsum(kxy), float(m * mp))
    return ad.add(ad.sub(_offdiag_mean(kxx, m), ad.mul(cross, 2.0)),
                  _offdiag_mean(kyy, mp))


# ---------------------------------------------------------------------------
# loss couples
# ---------------------------------------------------------------------------

def _check_eval_mode(classifier) -> None:
    if getattr(classifier, "training", False):
        raise ValueError("classifier must be in eval mode for the loss couples")


def bad_loss_isfid(gen, real, classifier, cfg: BadConfig):
    """IS as divergence, Frechet distance on embeddings as regularizer.

    Returns (total, l_div, l_reg) with total = alpha * IS - beta * FID; the
    training loop maximizes total (alpha < 0 makes a low score the goal).
    """
    _check_eval_mode(classifier)
    gen, real = _as_tensor(gen), _as_tensor(real)
    if gen.shape[0] < 2 or real.shape[0] < 2:
        raise ValueError(f"bad_loss_isfid: need batches >= 2, got "
                         f"{gen.shape[0]} and {real.shape[0]}")
    _, probs, gen_emb = classifier.forward(gen)
    with no_grad():
        real_emb = classifier.embed(real).detach()
    l_div = inception_score(probs)
    l_reg = frechet_distance(gaussian_moments(real_emb),
                             gaussian_moments(gen_emb),
                             squared_mean_term=cfg.fid_squared_mean_term)
    total = ad.sub(ad.mul(l_div, cfg.alpha), ad.mul(l_reg, cfg.beta))
    return total, l_div, l_reg


def bad_loss_mmd(gen, real_by_class: Sequence, real_all, classifier,
                 cfg: BadConfig):
    """Classwise MMD^2 sum as divergence, global MMD^2 as regularizer.

    Returns (total, l_div, l_reg) with total = alpha * l_div - beta * l_reg;
    the training loop maximizes total.
    """
    _check_eval_mode(classifier)
    gen = _as_tensor(gen)
    if gen.shape[0] < 2:
        raise ValueError(f"bad_loss_mmd: need gen batch >= 2, got {gen.shape[0]}")
    if len(real_by_class) != cfg.num_classes:
        raise ValueError(f"bad_loss_mmd: expected {cfg.num_classes} class "
                         f"batches, got {len(real_by_class)}")
    for k, xb in enumerate(real_by_class):
        if xb.shape[0] < 2:
            raise ValueError(
                f"bad_loss_mmd: class {k} has {xb.shape[0]} samples in the "
                f"real batch (need >= 2)")
    gen_emb = classifier.embed(gen)
    with no_grad():
        class_embs = [classifier.embed(_as_tensor(xb)).detach()
                      for xb in real_by_class]
        all_emb = classifier.embed(_as_tensor(real_all)).detach()
    l_div = None
    for emb_k in class_embs:
        term = mmd2(gen_emb, emb_k, cfg.kernel)
        l_div = term if l_div is None else ad.add(l_div, term)
    l_reg = mmd2(gen_emb, all_emb, cfg.kernel)
    total = ad.sub(ad.mul(l_div, cfg.alpha), ad.mul(l_reg, cfg.beta))
    return total, l_div, l_reg
