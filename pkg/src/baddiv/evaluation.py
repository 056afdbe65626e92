"""Precision-recall analysis, diversity score, temperature sweeps, and the
metric-vs-batch-size bias report comparing baseline and diverged decoders."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .autodiff import Tensor, no_grad
from .checkpoint import load_checkpoint
from .divergences import (
    KernelConfig,
    frechet_distance,
    gaussian_moments,
    inception_score,
    mmd2,
)
from .models import MnistClassifier, Vae, sample_prior

__all__ = [
    "PRDCurve",
    "EvalReport",
    "kmeans",
    "prd_curve",
    "prd_from_histograms",
    "diversity_score",
    "mean_pairwise_distance",
    "evaluate_run",
    "write_png_grid",
    "DEFAULT_TEMPERATURES",
]

DEFAULT_TEMPERATURES = (0.1, 0.5, 0.7, 1.0, 1.2, 1.5, 1.8, 2.0, 3.0)


# ---------------------------------------------------------------------------
# k-means (seeded, deterministic)
# ---------------------------------------------------------------------------

def kmeans(points: np.ndarray, k: int, seed: int = 0,
           max_iters: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd iterations from a k-means++ init until the assignment fixpoint.

    Returns (assignments, centers); deterministic under the seed.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if not 1 <= k <= n:
        raise ValueError(f"kmeans: need n >= k >= 1, got n={n}, k={k}")
    rng = np.random.default_rng(seed)

    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    closest = np.full(n, np.inf)
    for j in range(1, k):
        d = ((points - centers[j - 1]) ** 2).sum(axis=1)
        closest = np.minimum(closest, d)
        total = closest.sum()
        if total <= 0:
            centers[j:] = points[rng.integers(n, size=k - j)]
            break
        centers[j] = points[rng.choice(n, p=closest / total)]

    assign = np.zeros(n, dtype=np.int64)
    for _ in range(max_iters):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = d2.argmin(axis=1)
        for j in range(k):
            members = points[new_assign == j]
            if len(members):
                centers[j] = members.mean(axis=0)
            else:
                # deterministic re-seed on the point farthest from its center
                centers[j] = points[d2.min(axis=1).argmax()]
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return assign, centers.astype(np.float32)


# ---------------------------------------------------------------------------
# precision-recall curves
# ---------------------------------------------------------------------------

@dataclass
class PRDCurve:
    """Upper envelope of (precision, recall) pairs over the angle sweep."""

    precision: np.ndarray
    recall: np.ndarray
    num_clusters: int = 0
    n_real: int = 0
    n_gen: int = 0
    temperature: Optional[float] = None

    def max_f_beta(self, beta: float = 1.0) -> float:
        b2 = beta * beta
        p, r = self.precision, self.recall
        with np.errstate(divide="ignore", invalid="ignore"):
            f = (1 + b2) * p * r / (b2 * p + r)
        return float(np.nanmax(np.where(np.isfinite(f), f, 0.0)))


def _prune_envelope(p: np.ndarray, r: np.ndarray):
    """Drop points dominated by another (p' >= p and r' >= r, one strict)."""
    order = np.lexsort((-r, -p))
    keep = []
    best_r = -1.0
    for i in order:
        if r[i] > best_r + 1e-12:
            keep.append(i)
            best_r = r[i]
    keep = np.array(sorted(keep))
    return p[keep], r[keep]


def prd_from_histograms(p_hist: np.ndarray, q_hist: np.ndarray,
                        num_angles: int = 1001) -> tuple[np.ndarray, np.ndarray]:
    """Sweep lambda = tan(theta) over (0, pi/2): precision(lam) =
    sum_i min(lam * P_i, Q_i), recall(lam) = precision(lam) / lam.

    P is the reference histogram, Q the generated one.  The angle grid is
    symmetric under theta -> pi/2 - theta, so swapping P and Q exactly
    transposes the curve.
    """
    p_hist = np.asarray(p_hist, dtype=np.float64)
    q_hist = np.asarray(q_hist, dtype=np.float64)
    angles = np.pi / 2 * np.arange(1, num_angles + 1) / (num_angles + 1)
    lam = np.tan(angles)
    precision = np.minimum(lam[:, None] * p_hist[None, :],
                           q_hist[None, :]).sum(axis=1)
    recall = precision / lam
    return precision, recall


def prd_curve(real_feats: np.ndarray, gen_feats: np.ndarray,
              num_clusters: int = 20, num_angles: int = 1001,
              seed: int = 0, temperature: Optional[float] = None) -> PRDCurve:
    """Cluster the union, histogram both sets over clusters, sweep angles."""
    real_feats = np.asarray(real_feats)
    gen_feats = np.asarray(gen_feats)
    if len(real_feats) < num_clusters or len(gen_feats) < num_clusters:
        raise ValueError(
            f"prd_curve: need at least num_clusters={num_clusters} samples "
            f"per set, got {len(real_feats)} and {len(gen_feats)}")
    union = np.concatenate([real_feats, gen_feats], axis=0)
    assign, _ = kmeans(union, num_clusters, seed=seed)
    real_hist = np.bincount(assign[:len(real_feats)], minlength=num_clusters)
    gen_hist = np.bincount(assign[len(real_feats):], minlength=num_clusters)
    p, r = prd_from_histograms(real_hist / real_hist.sum(),
                               gen_hist / gen_hist.sum(), num_angles)
    p, r = _prune_envelope(p, r)
    return PRDCurve(precision=p.astype(np.float64), recall=r.astype(np.float64),
                    num_clusters=num_clusters, n_real=len(real_feats),
                    n_gen=len(gen_feats), temperature=temperature)


# ---------------------------------------------------------------------------
# diversity
# ---------------------------------------------------------------------------

def mean_pairwise_distance(feats: np.ndarray) -> float:
    feats = np.asarray(feats, dtype=np.float64)
    if len(feats) < 2:
        raise ValueError(f"mean_pairwise_distance: need n >= 2, "
                         f"got {len(feats)}")
    sq = (feats ** 2).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * feats @ feats.T
    iu = np.triu_indices(len(feats), k=1)
    return float(np.sqrt(np.maximum(d2[iu], 0.0)).mean())


def diversity_score(gen_feats: np.ndarray, real_feats: np.ndarray) -> float:
    """Mean pairwise distance of the generated embeddings, normalized by the
    same statistic on an equal-size real sample (1.0 = real-data diversity).

    The statistic itself is a stand-in: the metric family this accompanies
    names a diversity score without defining one.
    """
    real_feats = np.asarray(real_feats)
    gen_feats = np.asarray(gen_feats)
    n = min(len(gen_feats), len(real_feats))
    denom = mean_pairwise_distance(real_feats[:n])
    return mean_pairwise_distance(gen_feats[:n]) / max(denom, 1e-12)


# ---------------------------------------------------------------------------
# PNG grids
# ---------------------------------------------------------------------------

def write_png_grid(path, images: np.ndarray, tiles: int = 8,
                   separator: int = 2) -> None:
    """Tile the first tiles^2 images (n, 1, 28, 28) into one 8-bit grayscale
    PNG with separator-pixel gutters."""
    images = np.asarray(images)
    side = images.shape[-1]
    canvas_side = tiles * side + (tiles - 1) * separator
    canvas = np.zeros((canvas_side, canvas_side), dtype=np.uint8)
    for t in range(min(tiles * tiles, len(images))):
        r, c = divmod(t, tiles)
        y = r * (side + separator)
        x = c * (side + separator)
        tile = np.clip(images[t, 0] * 255.0, 0, 255).astype(np.uint8)
        canvas[y:y + side, x:x + side] = tile
    Image.fromarray(canvas, mode="L").save(path)


# ---------------------------------------------------------------------------
# full evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    prd_curves: dict = field(default_factory=dict)
    temperatures: tuple = DEFAULT_TEMPERATURES


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _decode_batched(vae: Vae, z: np.ndarray, batch: int = 256) -> np.ndarray:
    outs = []
    with no_grad():
        for start in range(0, len(z), batch):
            outs.append(vae.decode(Tensor(z[start:start + batch])).numpy())
    return np.concatenate(outs, axis=0)


def _classify_batched(clf: MnistClassifier, images: np.ndarray,
                      batch: int = 256):
    probs, embs = [], []
    with no_grad():
        for start in range(0, len(images), batch):
            _, p, e = clf.forward(Tensor(images[start:start + batch]))
            probs.append(p.numpy())
            embs.append(e.numpy())
    return np.concatenate(probs), np.concatenate(embs)


def _metric_row(probs, gen_emb, real_emb, kernel) -> dict:
    with no_grad():
        is_val = inception_score(Tensor(probs)).item()
        fid = frechet_distance(gaussian_moments(Tensor(real_emb)),
                               gaussian_moments(Tensor(gen_emb))).item()
        mmd = mmd2(Tensor(gen_emb), Tensor(real_emb), kernel).item()
    return {"is": is_val, "fid": fid, "mmd2": mmd}


def evaluate_run(vae_ckpt, bad_ckpt, classifier_ckpt, out_dir,
                 temperatures: Sequence[float] = DEFAULT_TEMPERATURES,
                 seed: int = 0, n_samples: int = 2048,
                 real_images: Optional[np.ndarray] = None,
                 data_dir: Optional[str] = None,
                 run_id: str = "eval",
                 bias_batch_sizes: Sequence[int] = (64, 256, 1024, 2048),
                 prd_clusters: int = 20) -> EvalReport:
    """Compare the baseline and diverged decoders over a temperature sweep.

    Emits metrics.csv (one row per temperature x decoder x metric), per-run
    PRD curve CSVs, 8x8 PNG grids per temperature, and a bias report of
    IS/FID/MMD^2 against evaluation batch size.  Deterministic under (seed,
    checkpoints): re-runs produce byte-identical CSVs.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    base_vae = Vae(seed=0)
    from .training import _clf_arch, _vae_arch  # avoid a module cycle
    vck = load_checkpoint(vae_ckpt, expected_arch=_vae_arch(base_vae))
    bck = load_checkpoint(bad_ckpt)
    if bck.arch_hash != vck.arch_hash:
        raise ValueError(
            f"evaluate_run: incompatible decoder checkpoints: baseline arch "
            f"{vck.arch_hash} vs diverged {bck.arch_hash}")
    clf = MnistClassifier(seed=0)
    cck = load_checkpoint(classifier_ckpt, expected_arch=_clf_arch(clf))
    clf.load_state_dict(cck.tensors)
    clf.eval()

    if real_images is None:
        if data_dir is None:
            raise ValueError("evaluate_run: need real_images or data_dir")
        from .data import load_mnist_idx
        real = load_mnist_idx(Path(data_dir) / "t10k-images-idx3-ubyte",
                              Path(data_dir) / "t10k-labels-idx1-ubyte")
        real_images = real.images
    _, real_emb = _classify_batched(clf, real_images)

    kernel = KernelConfig(bandwidth="median")
    report = EvalReport(temperatures=tuple(temperatures))
    decoders = {}
    for name, ck in (("baseline", vck), ("diverged", bck)):
        vae = Vae(seed=0)
        vae.load_state_dict(ck.tensors)
        vae.eval()
        decoders[name] = vae

    for temperature in temperatures:
        for name, vae in decoders.items():
            rng = np.random.default_rng(seed + int(temperature * 1000))
            z = sample_prior(n_samples, temperature, rng).numpy()
            gens = _decode_batched(vae, z)
            probs, gen_emb = _classify_batched(clf, gens)
            metrics = _metric_row(probs, gen_emb, real_emb, kernel)
            curve = prd_curve(real_emb, gen_emb, num_clusters=prd_clusters,
                              seed=seed, temperature=temperature)
            diversity = diversity_score(gen_emb, real_emb)
            row = {"run_id": run_id, "decoder": name,
                   "temperature": temperature, "n_samples": n_samples,
                   "seed": seed, **metrics, "diversity": diversity,
                   "prd_max_f1": curve.max_f_beta(1.0),
                   "prd_max_f1_8": curve.max_f_beta(1.0 / 8.0),
                   "prd_max_f8": curve.max_f_beta(8.0),
                   "max_prob_mean": float(probs.max(axis=1).mean())}
            report.rows.append(row)
            report.prd_curves[(name, temperature)] = curve
            prd_path = out / f"prd_{name}_{temperature}.csv"
            with open(prd_path, "w") as f:
                f.write("precision,recall\n")
                for p, r in zip(curve.precision, curve.recall):
                    f.write(f"{repr(float(p))},{repr(float(r))}\n")
            write_png_grid(out / f"grid_{name}_{temperature}.png", gens)

    metric_names = ["is", "fid", "mmd2", "diversity", "prd_max_f1",
                    "prd_max_f1_8", "prd_max_f8", "max_prob_mean"]
    with open(out / "metrics.csv", "w") as f:
        f.write("run_id,decoder,temperature,metric,value,n_samples,seed\n")
        for row in report.rows:
            for m in metric_names:
                f.write(f"{row['run_id']},{row['decoder']},"
                        f"{_fmt(row['temperature'])},{m},{_fmt(row[m])},"
                        f"{row['n_samples']},{row['seed']}\n")

    # estimator bias: the same metrics at shrinking evaluation batch sizes
    rng = np.random.default_rng(seed + 424242)
    z = sample_prior(max(bias_batch_sizes), 1.0, rng).numpy()
    gens = _decode_batched(decoders["baseline"], z)
    probs, gen_emb = _classify_batched(clf, gens)
    with open(out / "bias_report.csv", "w") as f:
        f.write("batch_size,metric,value\n")
        for bs in bias_batch_sizes:
            n_real = min(bs, len(real_emb))
            m = _metric_row(probs[:bs], gen_emb[:bs], real_emb[:n_real],
                            kernel)
            for name, value in m.items():
                f.write(f"{bs},{name},{_fmt(value)}\n")
    return report
