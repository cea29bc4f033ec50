"""Training objectives: SSIM, generator loss, discriminator loss.

Generator loss = adversarial BCE + lambda_l1 * L1 + alpha_ssim * (1 - SSIM);
discriminator loss = BCE against 1 for real pairs and 0 for generated ones,
averaged over the 10x10 patch grid.  Log arguments are clamped from below at
1e-7 so a saturated discriminator never produces log(0); the upper side needs
no clamp (log 1 = 0), which keeps the perfect-prediction losses exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, conv2d

LOG_GUARD = 1e-7

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
_C1 = 0.01 ** 2  # (0.01 * L)^2 with dynamic range L = 1
_C2 = 0.03 ** 2


@dataclass
class LossWeights:
    lambda_l1: float = 10.0
    alpha_ssim: float = 5.0

    def __post_init__(self):
        if self.lambda_l1 < 0 or self.alpha_ssim < 0:
            raise ValueError("loss weights must be non-negative")


def _gaussian_window(dtype):
    ax = np.arange(SSIM_WINDOW, dtype=np.float64) - (SSIM_WINDOW - 1) / 2.0
    g = np.exp(-(ax * ax) / (2.0 * SSIM_SIGMA ** 2))
    k = np.outer(g, g)
    k /= k.sum()
    return k.astype(dtype).reshape(1, 1, SSIM_WINDOW, SSIM_WINDOW)


def ssim(a, b):
    """Mean structural similarity over 11x11 Gaussian windows (sigma 1.5).

    Inputs are [N,1,H,W] in [0,1] with H, W >= 11; differentiable in both
    arguments.  ssim(y, y) is exactly 1.
    """
    if a.shape != b.shape:
        raise ShapeError(f"ssim inputs must share a shape: {a.shape} vs {b.shape}")
    if a.ndim != 4 or a.shape[1] != 1:
        raise ShapeError(f"ssim expects [N,1,H,W] inputs, got {a.shape}")
    if a.shape[2] < SSIM_WINDOW or a.shape[3] < SSIM_WINDOW:
        raise ShapeError(f"ssim needs extents >= {SSIM_WINDOW}, got {a.shape}")
    w = Tensor(_gaussian_window(a.dtype))
    mu_a = conv2d(a, w)
    mu_b = conv2d(b, w)
    var_a = conv2d(a * a, w) - mu_a * mu_a
    var_b = conv2d(b * b, w) - mu_b * mu_b
    cov = conv2d(a * b, w) - mu_a * mu_b
    num = (mu_a * mu_b * 2.0 + _C1) * (cov * 2.0 + _C2)
    den = (mu_a * mu_a + mu_b * mu_b + _C1) * (var_a + var_b + _C2)
    score = num / den
    return score.sum() / float(score.size)


def _neg_log(p):
    return -(p.clip(LOG_GUARD, 1.0).log())


def generator_loss(d_out, mask, target, weights, parts=None):
    """Eq.-style generator objective on one batch.

    d_out: discriminator patch grid for (image, generated mask); mask: the
    generated mask; target: ground truth.  If `parts` is a dict it receives
    the scalar values of the adversarial, L1 and SSIM terms.
    """
    adv = _neg_log(d_out).sum() / float(d_out.size)
    l1 = (target - mask).abs().sum() / float(mask.size)
    ssim_term = 1.0 - ssim(target, mask)
    loss = adv + weights.lambda_l1 * l1 + weights.alpha_ssim * ssim_term
    if parts is not None:
        parts["adv"] = float(adv.data)
        parts["l1"] = float(l1.data)
        parts["ssim_term"] = float(ssim_term.data)
    return loss


def discriminator_loss(d_real, d_fake):
    """BCE with real pairs labeled 1 and generated pairs labeled 0."""
    real_term = _neg_log(d_real).sum() / float(d_real.size)
    fake_term = _neg_log(1.0 - d_fake).sum() / float(d_fake.size)
    return real_term + fake_term
