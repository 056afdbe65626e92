import numpy as np
import pytest

import baddiv.autodiff as ad
from baddiv import nn
from baddiv.autodiff import ShapeError, Tape, Tensor, no_grad
from baddiv.models import (
    EMBED_DIM,
    LATENT_DIM,
    MnistClassifier,
    Vae,
    reparameterize,
    sample_prior,
)


def conv_out(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def convt_out(n, k, s, p, op):
    return (n - 1) * s - 2 * p + k + op


# ---------------------------------------------------------------------------
# shape schedules (symbolic oracle over the documented layer stack)
# ---------------------------------------------------------------------------

def test_decoder_shape_schedule_oracle():
    # (channels, kernel, stride, padding, output_padding) per transposed conv
    stack = [(32, 9, 2, 4, 1), (32, 7, 2, 3, 1), (64, 5, 1, 2, 0),
             (1, 3, 1, 1, 0)]
    n = 7
    trace = [(16, n)]
    for ch, k, s, p, op in stack:
        n = convt_out(n, k, s, p, op)
        trace.append((ch, n))
    assert trace == [(16, 7), (32, 14), (32, 28), (64, 28), (1, 28)]


def test_encoder_shape_schedule_oracle():
    stack = [(64, 3, 1, 1), (32, 5, 1, 2), (32, 7, 2, 3), (16, 9, 2, 4)]
    n = 28
    trace = []
    for ch, k, s, p in stack:
        n = conv_out(n, k, s, p)
        trace.append((ch, n))
    assert trace == [(64, 28), (32, 28), (32, 14), (16, 7)]


def test_decode_follows_schedule_live():
    vae = Vae(seed=0).eval()
    z = Tensor(np.zeros((2, LATENT_DIM), np.float32))
    h = ad.reshape(vae.dec_fc2(ad.elu(vae.dec_bn(vae.dec_fc1(z)))),
                   (2, 16, 7, 7))
    expected = [(2, 32, 14, 14), (2, 32, 28, 28), (2, 64, 28, 28),
                (2, 1, 28, 28)]
    seen = []
    for layer in vae.dec_convs.layers:
        h = layer(h)
        if isinstance(layer, nn.ConvTranspose2d):
            seen.append(h.shape)
    assert seen == expected


# ---------------------------------------------------------------------------
# encode / decode contracts
# ---------------------------------------------------------------------------

def test_encode_output_shapes_and_determinism():
    vae = Vae(seed=1).eval()
    x = np.zeros((8, 1, 28, 28), np.float32)
    mu, logvar = vae.encode(x)
    assert mu.shape == (8, LATENT_DIM) and logvar.shape == (8, LATENT_DIM)
    mu2, logvar2 = vae.encode(x)
    np.testing.assert_array_equal(mu.numpy(), mu2.numpy())
    np.testing.assert_array_equal(logvar.numpy(), logvar2.numpy())


def test_encode_rejects_bad_shape():
    with pytest.raises(ShapeError, match="encode"):
        Vae(seed=0).encode(np.zeros((2, 1, 27, 28), np.float32))


def test_fresh_encoder_logvar_is_sane(rng):
    vae = Vae(seed=2).eval()
    x = rng.random((16, 1, 28, 28)).astype(np.float32)
    _, logvar = vae.encode(x)
    assert np.all(np.abs(logvar.numpy()) < 20.0)


def test_decode_shape_and_range(rng):
    vae = Vae(seed=3).eval()
    z = rng.normal(scale=4.0, size=(64, LATENT_DIM)).astype(np.float32)
    out = vae.decode(z).numpy()
    assert out.shape == (64, 1, 28, 28)
    assert np.all(out > 0.0) and np.all(out < 1.0)
    assert np.all(np.isfinite(out))


def test_state_dict_roundtrip_restores_forward_exactly(rng):
    vae = Vae(seed=4).eval()
    x = rng.random((4, 1, 28, 28)).astype(np.float32)
    want = vae.decode(vae.encode(x)[0]).numpy().copy()
    state = vae.state_dict()
    other = Vae(seed=99).eval()
    other.load_state_dict(state)
    got = other.decode(other.encode(x)[0]).numpy()
    np.testing.assert_array_equal(want, got)


def test_decoder_parameter_count_is_fixed():
    vae = Vae(seed=0)
    n = sum(p.size for _, p in vae.decoder_named_parameters())
    # linear 16->800 (+bn) + linear 800->784 + four transposed convs
    expect = (16 * 800 + 800) + (800 + 800) + (800 * 784 + 784) + \
        (16 * 32 * 81 + 32) + (32 * 32 * 49 + 32) + (32 * 64 * 25 + 64) + \
        (64 * 1 * 9 + 1)
    assert n == expect


# ---------------------------------------------------------------------------
# reparameterization
# ---------------------------------------------------------------------------

def test_reparameterize_zero_variance_limit(rng):
    mu = Tensor(rng.normal(size=(5, LATENT_DIM)).astype(np.float32))
    logvar = Tensor(np.full((5, LATENT_DIM), -40.0, np.float32))
    z = reparameterize(mu, logvar, rng)
    np.testing.assert_allclose(z.numpy(), mu.numpy(), atol=1e-8)


def test_reparameterize_unit_statistics():
    rng = np.random.default_rng(7)
    mu = Tensor(np.zeros((100_000, 4), np.float32))
    logvar = Tensor(np.zeros((100_000, 4), np.float32))
    z = reparameterize(mu, logvar, rng).numpy()
    assert np.all(z.std(axis=0) > 0.99) and np.all(z.std(axis=0) < 1.01)


def test_reparameterize_gradient_reaches_mu_not_eps(rng):
    mu = Tensor(np.zeros((1, 16), np.float32), requires_grad=True)
    logvar = Tensor(np.zeros((1, 16), np.float32), requires_grad=True)
    with Tape() as tape:
        z = reparameterize(mu, logvar, rng)
        y = ad.tmean(z)
    tape.backward(y)
    np.testing.assert_allclose(mu.grad, np.full((1, 16), 1.0 / 16), rtol=1e-5)


# ---------------------------------------------------------------------------
# prior sampling
# ---------------------------------------------------------------------------

def test_sample_prior_statistics():
    rng = np.random.default_rng(11)
    z = sample_prior(100_000, 1.0, rng).numpy()
    assert np.all(z.std(axis=0) > 0.99) and np.all(z.std(axis=0) < 1.01)
    z = sample_prior(100_000, 0.1, np.random.default_rng(12)).numpy()
    np.testing.assert_allclose(z.std(axis=0), 0.1, atol=0.002)


def test_sample_prior_edge_cases(rng):
    assert sample_prior(0, 1.0, rng).shape == (0, LATENT_DIM)
    with pytest.raises(ValueError, match="temperature"):
        sample_prior(4, 0.0, rng)
    with pytest.raises(ValueError, match="temperature"):
        sample_prior(4, -1.0, rng)


# ---------------------------------------------------------------------------
# classifier
# ---------------------------------------------------------------------------

def test_classifier_forward_contracts(rng):
    clf = MnistClassifier(seed=5).eval()
    x = rng.random((6, 1, 28, 28)).astype(np.float32)
    logits, probs, emb = clf.forward(x)
    assert logits.shape == (6, 10)
    assert probs.shape == (6, 10)
    assert emb.shape == (6, EMBED_DIM)
    np.testing.assert_allclose(probs.numpy().sum(axis=1), 1.0, atol=1e-5)
    assert np.all(probs.numpy() >= 0)


def test_classifier_identical_inputs_identical_embeddings(rng):
    clf = MnistClassifier(seed=6).eval()
    img = rng.random((1, 1, 28, 28)).astype(np.float32)
    x = np.concatenate([img, img], axis=0)
    _, _, emb = clf.forward(x)
    np.testing.assert_array_equal(emb.numpy()[0], emb.numpy()[1])


def test_classifier_rejects_bad_shape():
    with pytest.raises(ShapeError, match="classifier"):
        MnistClassifier(seed=0).forward(np.zeros((2, 3, 28, 28), np.float32))


# ---------------------------------------------------------------------------
# batch norm layer modes
# ---------------------------------------------------------------------------

def test_batchnorm_running_stats_track_training(rng):
    bn = nn.BatchNorm(3)
    x = rng.normal(loc=2.0, scale=3.0, size=(64, 3)).astype(np.float32)
    with no_grad():
        for _ in range(200):
            bn(Tensor(x))
    np.testing.assert_allclose(bn.running_mean, x.mean(axis=0), atol=0.05)
    np.testing.assert_allclose(
        bn.running_var, x.var(axis=0, ddof=1), rtol=0.05)
    bn.eval()
    with no_grad():
        y = bn(Tensor(x)).numpy()
    np.testing.assert_allclose(y.mean(axis=0), 0.0, atol=0.05)
    np.testing.assert_allclose(y.std(axis=0), 1.0, atol=0.05)
