"""Divergence-driven fine-tuning of a small MNIST VAE.

Pretrain a convolutional VAE on binarized MNIST, fine-tune its decoder to
drift away from the digit-class clusters while staying inside the global digit
distribution (IS/FID or MMD loss couples), and evaluate the result with
precision-recall curves and divergence metrics.
"""

from . import _malloc

_malloc.tune()

__version__ = "0.1.0"
