import numpy as np
import pytest

from baddiv.evaluation import (
    PRDCurve,
    diversity_score,
    kmeans,
    mean_pairwise_distance,
    prd_curve,
    prd_from_histograms,
    write_png_grid,
)


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------

def test_kmeans_single_cluster_is_mean(rng):
    pts = rng.normal(size=(40, 3)).astype(np.float32)
    assign, centers = kmeans(pts, 1, seed=0)
    assert np.all(assign == 0)
    np.testing.assert_allclose(centers[0], pts.mean(axis=0), atol=1e-5)


def test_kmeans_separates_two_blobs(rng):
    a = rng.normal(size=(50, 2)) + np.array([0.0, 0.0])
    b = rng.normal(size=(60, 2)) + np.array([30.0, 0.0])  # 10+ sigma apart
    pts = np.concatenate([a, b]).astype(np.float32)
    labels = np.array([0] * 50 + [1] * 60)
    assign, _ = kmeans(pts, 2, seed=1)
    # match up to relabeling
    flip = assign[0] != labels[0]
    matched = (assign != labels) if flip else (assign == labels)
    assert matched.all()


def test_kmeans_objective_non_increasing(rng):
    pts = rng.normal(size=(200, 4)).astype(np.float32)

    def wcss(assign, centers):
        return sum(((pts[assign == j] - centers[j]) ** 2).sum()
                   for j in range(len(centers)))

    prev = np.inf
    for iters in (1, 2, 4, 8, 16):
        assign, centers = kmeans(pts, 5, seed=3, max_iters=iters)
        val = wcss(assign, centers)
        assert val <= prev + 1e-6
        prev = val


def test_kmeans_seeded_determinism(rng):
    pts = rng.normal(size=(100, 3)).astype(np.float32)
    a1, c1 = kmeans(pts, 7, seed=9)
    a2, c2 = kmeans(pts, 7, seed=9)
    np.testing.assert_array_equal(a1, a2)
    np.testing.assert_array_equal(c1, c2)


def test_kmeans_validates_k(rng):
    with pytest.raises(ValueError, match="n >= k"):
        kmeans(rng.normal(size=(3, 2)), 5)


# ---------------------------------------------------------------------------
# PRD
# ---------------------------------------------------------------------------

def test_prd_hand_case_two_clusters():
    # P = (0.5, 0.5), Q = (1.0, 0.0): at lambda = 1 precision = recall = 0.5
    p, r = prd_from_histograms(np.array([0.5, 0.5]), np.array([1.0, 0.0]),
                               num_angles=1001)
    mid = 500  # angle grid is symmetric; the middle angle is pi/4, lambda=1
    assert p[mid] == pytest.approx(0.5, abs=1e-12)
    assert r[mid] == pytest.approx(0.5, abs=1e-12)


def test_prd_identical_histograms_hit_one_one():
    h = np.array([0.25, 0.5, 0.25])
    p, r = prd_from_histograms(h, h)
    best = (p + r).argmax()
    assert p[best] == pytest.approx(1.0, abs=1e-9)
    assert r[best] == pytest.approx(1.0, abs=1e-9)


def test_prd_swap_transposes_curve(rng):
    ph = rng.dirichlet(np.ones(8))
    qh = rng.dirichlet(np.ones(8))
    p1, r1 = prd_from_histograms(ph, qh)
    p2, r2 = prd_from_histograms(qh, ph)
    np.testing.assert_allclose(p1, r2[::-1], atol=1e-9)
    np.testing.assert_allclose(r1, p2[::-1], atol=1e-9)


def test_prd_identical_feature_sets(rng):
    feats = rng.normal(size=(200, 5)).astype(np.float32)
    curve = prd_curve(feats, feats, num_clusters=20, seed=0)
    best = (curve.precision + curve.recall).argmax()
    slack = 1.0 / 20
    assert curve.precision[best] >= 1.0 - slack
    assert curve.recall[best] >= 1.0 - slack
    assert np.all(curve.precision <= 1.0 + 1e-9)
    assert np.all(curve.recall <= 1.0 + 1e-9)
    assert np.all(curve.precision >= 0.0)


def test_prd_disjoint_supports(rng):
    real = rng.normal(size=(100, 2)).astype(np.float32)
    gen = rng.normal(size=(100, 2)).astype(np.float32) + 1000.0
    curve = prd_curve(real, gen, num_clusters=10, seed=0)
    assert np.all(curve.precision * curve.recall <= 1e-6)


def test_prd_envelope_has_no_dominated_points(rng):
    real = rng.normal(size=(300, 4)).astype(np.float32)
    gen = (rng.normal(size=(300, 4)) * 1.4 + 0.3).astype(np.float32)
    curve = prd_curve(real, gen, num_clusters=15, seed=2)
    p, r = curve.precision, curve.recall
    for i in range(len(p)):
        dominated = (p >= p[i] + 1e-12) & (r >= r[i] + 1e-12)
        assert not dominated.any()


def test_prd_needs_enough_samples(rng):
    feats = rng.normal(size=(10, 2)).astype(np.float32)
    with pytest.raises(ValueError, match="num_clusters"):
        prd_curve(feats, feats, num_clusters=20)


# ---------------------------------------------------------------------------
# diversity
# ---------------------------------------------------------------------------

def test_diversity_identical_embeddings_zero(rng):
    real = rng.normal(size=(50, 4)).astype(np.float32)
    gen = np.tile(real[0], (50, 1))
    assert diversity_score(gen, real) == pytest.approx(0.0, abs=1e-7)


def test_diversity_of_real_sample_is_one_ish(rng):
    # bootstrap band: same-distribution samples land near 1
    base = rng.normal(size=(400, 6)).astype(np.float32)
    vals = []
    for trial in range(20):
        sub = np.random.default_rng(trial).permutation(base)[:200]
        vals.append(diversity_score(sub, base[:200]))
    assert 0.9 < np.mean(vals) < 1.1


def test_pairwise_distance_homogeneity(rng):
    feats = rng.normal(size=(30, 3)).astype(np.float32)
    one = mean_pairwise_distance(feats)
    two = mean_pairwise_distance(2.0 * feats)
    assert two == pytest.approx(2.0 * one, rel=1e-6)
    with pytest.raises(ValueError, match="n >= 2"):
        mean_pairwise_distance(feats[:1])


# ---------------------------------------------------------------------------
# PNG grid
# ---------------------------------------------------------------------------

def test_png_grid_dimensions(tmp_path, rng):
    from PIL import Image
    imgs = rng.random((64, 1, 28, 28)).astype(np.float32)
    path = tmp_path / "grid.png"
    write_png_grid(path, imgs)
    with Image.open(path) as im:
        assert im.size == (238, 238)  # 8*28 + 7*2
        assert im.mode == "L"
