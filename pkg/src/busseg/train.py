"""Alternating adversarial training: one discriminator step, one generator step.

Each iteration draws a shuffled batch, updates the discriminator on the
(real, generated) BCE objective, then updates the generator on the
adversarial + L1 + SSIM objective behind a frozen discriminator.  Everything
is seeded through RngStream substreams, so identically configured runs are
bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import LossWeights, discriminator_loss, generator_loss
from .nets import Discriminator, Generator, set_requires_grad
from .tensor import Adam, NumericError, RngStream, Tensor

# substream tags for the independent randomness consumers
_STREAM_GEN_INIT = 1
_STREAM_DISC_INIT = 2
_STREAM_DROPOUT = 3
_STREAM_SHUFFLE = 4


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 8
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.lr <= 0:
            raise ValueError("epochs, batch_size and lr must be positive")


def samples_to_arrays(samples):
    images = np.stack([s.image for s in samples]).astype(np.float32)[:, None]
    masks = np.stack([s.mask for s in samples]).astype(np.float32)[:, None]
    return images, masks


def build_models(seed, dtype=np.float32):
    root = RngStream(seed)
    gen = Generator(root.substream(_STREAM_GEN_INIT), dtype=dtype)
    disc = Discriminator(root.substream(_STREAM_DISC_INIT), dtype=dtype)
    return gen, disc


def train(samples, cfg=None, weights=None, progress=None):
    """Train on preprocessed samples; returns (generator, discriminator, history).

    History is one dict per epoch with mean loss terms
    (epoch, gen_loss, disc_loss, l1, ssim_term, adv_term).
    """
    cfg = cfg or TrainConfig()
    weights = weights or LossWeights()
    if not samples:
        raise ValueError("training set is empty")
    bad = [s.id for s in samples if s.image.shape != (96, 96)]
    if bad:
        raise ValueError(f"samples not preprocessed to 96x96: {', '.join(bad[:5])}")
    images, masks = samples_to_arrays(samples)
    gen, disc = build_models(cfg.seed)
    root = RngStream(cfg.seed)
    drop_rng = root.substream(_STREAM_DROPOUT)
    shuffle_rng = root.substream(_STREAM_SHUFFLE)
    opt_g = Adam(gen.named_parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    opt_d = Adam(disc.named_parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    history = []
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(samples))
        sums = {"gen_loss": 0.0, "disc_loss": 0.0, "l1": 0.0,
                "ssim_term": 0.0, "adv_term": 0.0}
        batches = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = Tensor(images[idx])
            y = Tensor(masks[idx])
            g_val, d_val, parts = train_step(gen, disc, opt_g, opt_d, x, y,
                                             weights, drop_rng)
            if not (np.isfinite(g_val) and np.isfinite(d_val)):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, iteration {batches}: "
                    f"gen={g_val}, disc={d_val}")
            sums["gen_loss"] += g_val
            sums["disc_loss"] += d_val
            sums["adv_term"] += parts["adv"]
            sums["l1"] += parts["l1"]
            sums["ssim_term"] += parts["ssim_term"]
            batches += 1
        record = {"epoch": epoch}
        record.update((k, v / batches) for k, v in sums.items())
        history.append(record)
        if progress is not None:
            progress(record)
    return gen, disc, history


def train_step(gen, disc, opt_g, opt_d, x, y, weights, drop_rng):
    """One alternating update; returns (gen_loss, disc_loss, generator parts)."""
    fake = gen(x, drop_rng, train=True)
    # discriminator step (generated mask detached)
    d_real = disc(x, y, train=True)
    d_fake = disc(x, fake.detach(), train=True)
    d_loss = discriminator_loss(d_real, d_fake)
    opt_d.zero_grad()
    d_loss.backward()
    opt_d.step()
    # generator step behind the frozen, freshly updated discriminator
    set_requires_grad(disc, False)
    try:
        d_gen = disc(x, fake, train=True)
        parts = {}
        g_loss = generator_loss(d_gen, fake, y, weights, parts=parts)
        opt_g.zero_grad()
        g_loss.backward()
        opt_g.step()
    finally:
        set_requires_grad(disc, True)
    return float(g_loss.data), float(d_loss.data), parts


def write_history_csv(history, path):
    with open(path, "w") as fh:
        fh.write("epoch,gen_loss,disc_loss,l1,ssim_term,adv_term\n")
        for rec in history:
            fh.write(f"{rec['epoch']},{rec['gen_loss']:.6f},{rec['disc_loss']:.6f},"
                     f"{rec['l1']:.6f},{rec['ssim_term']:.6f},{rec['adv_term']:.6f}\n")


def segment(gen, image, seed=0):
    """Run the generator on one preprocessed [0,1] 96x96 image; returns [0,1] map."""
    from .tensor import no_grad

    x = Tensor(image.astype(np.float32).reshape(1, 1, 96, 96))
    rng = RngStream(seed, stream=_STREAM_DROPOUT)
    with no_grad():
        out = gen(x, rng, train=False)
    return out.data.reshape(96, 96)
