"""The VAE (encoder + decoder) and the convolutional digit classifier.

Decoder shape schedule (latent 16):
    Linear(16->800) -> BatchNorm -> ELU -> Linear(800->784) -> reshape 16x7x7
    -> ConvT(16->32, k9, s2, p4, op1) -> ELU   # 7x7   -> 14x14
    -> ConvT(32->32, k7, s2, p3, op1) -> ELU   # 14x14 -> 28x28
    -> ConvT(32->64, k5, s1, p2)      -> ELU   # 28x28 -> 28x28
    -> ConvT(64->1,  k3, s1, p1)      -> Sigmoid

The encoder mirrors it with convolutions in reverse order, ending in two
parallel linear heads for (mu, log-variance).

Classifier:
    Conv(1->64, k3, s2, p1) -> LeakyReLU       # 28x28 -> 14x14
    -> Conv(64->32, k7, s2, p3) -> LeakyReLU   # 14x14 -> 7x7
    -> Conv(32->16, k9, s2, p4)                # 7x7   -> 4x4
    -> flatten (embedding, 256-d) -> Linear(256->10) -> softmax
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import DTYPE, ShapeError, Tensor

__all__ = ["Vae", "MnistClassifier", "reparameterize", "sample_prior",
           "LATENT_DIM", "EMBED_DIM"]

LATENT_DIM = 16
EMBED_DIM = 16 * 4 * 4


class Vae(nn.Module):
    """Convolutional VAE for 1x28x28 images in [0, 1]."""

    def __init__(self, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.enc_convs = nn.Sequential(
            nn.Conv2d(1, 64, 3, rng, stride=1, padding=1), nn.Elu(),
            nn.Conv2d(64, 32, 5, rng, stride=1, padding=2), nn.Elu(),
            nn.Conv2d(32, 32, 7, rng, stride=2, padding=3), nn.Elu(),
            nn.Conv2d(32, 16, 9, rng, stride=2, padding=4), nn.Elu(),
        )
        self.enc_fc = nn.Linear(784, 800, rng)
        self.enc_bn = nn.BatchNorm(800)
        self.mu_head = nn.Linear(800, LATENT_DIM, rng)
        self.logvar_head = nn.Linear(800, LATENT_DIM, rng)

        self.dec_fc1 = nn.Linear(LATENT_DIM, 800, rng)
        self.dec_bn = nn.BatchNorm(800)
        self.dec_fc2 = nn.Linear(800, 784, rng)
        self.dec_convs = nn.Sequential(
            nn.ConvTranspose2d(16, 32, 9, rng, stride=2, padding=4,
                               output_padding=1), nn.Elu(),
            nn.ConvTranspose2d(32, 32, 7, rng, stride=2, padding=3,
                               output_padding=1), nn.Elu(),
            nn.ConvTranspose2d(32, 64, 5, rng, stride=1, padding=2), nn.Elu(),
            nn.ConvTranspose2d(64, 1, 3, rng, stride=1, padding=1),
            nn.Sigmoid(),
        )

    def encode(self, x) -> tuple[Tensor, Tensor]:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 4 or x.shape[1:] != (1, 28, 28):
            raise ShapeError(f"encode: expected (batch, 1, 28, 28), got {x.shape}")
        h = self.enc_convs(x)
        h = ad.reshape(h, (x.shape[0], 784))
        h = ad.elu(self.enc_bn(self.enc_fc(h)))
        return self.mu_head(h), self.logvar_head(h)

    def decode(self, z) -> Tensor:
        z = z if isinstance(z, Tensor) else Tensor(z)
        if z.ndim != 2 or z.shape[1] != LATENT_DIM:
            raise ShapeError(
                f"decode: expected (batch, {LATENT_DIM}), got {z.shape}")
        h = ad.elu(self.dec_bn(self.dec_fc1(z)))
        h = self.dec_fc2(h)
        h = ad.reshape(h, (z.shape[0], 16, 7, 7))
        return self.dec_convs(h)

    def forward(self, x, rng: np.random.Generator):
        mu, logvar = self.encode(x)
        z = reparameterize(mu, logvar, rng)
        return self.decode(z), mu, logvar

    def decoder_named_parameters(self):
        for name, p in self.named_parameters():
            if name.startswith("dec_"):
                yield name, p

    def encoder_named_parameters(self):
        for name, p in self.named_parameters():
            if not name.startswith("dec_"):
                yield name, p


def reparameterize(mu: Tensor, logvar: Tensor,
                   rng: np.random.Generator) -> Tensor:
    """z = mu + exp(logvar/2) * eps with eps ~ N(0, I); grads reach mu/logvar."""
    if mu.shape != logvar.shape:
        raise ShapeError(f"reparameterize: mu {mu.shape} vs logvar {logvar.shape}")
    eps = Tensor(rng.standard_normal(mu.shape).astype(DTYPE))
    return ad.add(mu, ad.mul(ad.exp(ad.mul(logvar, 0.5)), eps))


def sample_prior(n: int, temperature: float, rng: np.random.Generator,
                 latent_dim: int = LATENT_DIM) -> Tensor:
    """Draw n latents from N(0, temperature^2 * I)."""
    if temperature <= 0:
        raise ValueError(f"sample_prior: temperature must be > 0, "
                         f"got {temperature}")
    z = temperature * rng.standard_normal((n, latent_dim))
    return Tensor(z.astype(DTYPE))


class IdentityEmbedder:
    """Feature extractor that returns flattened inputs unchanged; stands in
    for the classifier on low-dimensional harness data."""

    training = False

    def __init__(self, num_classes: int = 4):
        self.num_classes = num_classes

    def embed(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        return ad.reshape(x, (x.shape[0], -1))

    def forward(self, x):
        emb = self.embed(x)
        probs = Tensor(np.full((emb.shape[0], self.num_classes),
                               1.0 / self.num_classes, dtype=DTYPE))
        return probs, probs, emb


class MnistClassifier(nn.Module):
    """3-block convolutional classifier; the flattened last conv map is the
    embedding used as feature space by the divergence losses."""

    def __init__(self, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.conv1 = nn.Conv2d(1, 64, 3, rng, stride=2, padding=1)
        self.conv2 = nn.Conv2d(64, 32, 7, rng, stride=2, padding=3)
        self.conv3 = nn.Conv2d(32, 16, 9, rng, stride=2, padding=4)
        self.head = nn.Linear(EMBED_DIM, 10, rng)

    def forward(self, x) -> tuple[Tensor, Tensor, Tensor]:
        """Return (logits, probs, embedding) for x of shape (batch, 1, 28, 28)."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 4 or x.shape[1:] != (1, 28, 28):
            raise ShapeError(
                f"classifier: expected (batch, 1, 28, 28), got {x.shape}")
        h = ad.leaky_relu(self.conv1(x))
        h = ad.leaky_relu(self.conv2(h))
        h = self.conv3(h)
        embedding = ad.reshape(h, (x.shape[0], EMBED_DIM))
        logits = self.head(embedding)
        probs = ad.softmax(logits, axis=1)
        return logits, probs, embedding

    def embed(self, x) -> Tensor:
        return self.forward(x)[2]
