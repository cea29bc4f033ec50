"""Generator and discriminator networks for 96x96 mask synthesis.

Generator: seven stride-2 encoder convolutions (En1-En7) with the atrous
block replacing one halving between En3 and En4 and a CAW block at the
1x1x512 bottleneck, mirrored by seven decoder deconvolutions (Dn1-Dn7) with
skip concatenations.  Dropout (p=0.5) stays active in Dn1-Dn3 at inference
as the network's stochastic input.  Output is tanh mapped affinely to [0,1].

Discriminator: five convolutions over the (image, mask) channel pair,
ending in a sigmoid 10x10 patch grid of real/fake probabilities.
"""

from __future__ import annotations

import numpy as np

from .blocks import AtrousBlock, CAWBlock
from .layers import BatchNorm, Conv, Deconv, leaky, relu
from .tensor import ShapeError, activation, concat, dropout, pad2d

# encoder widths En1..En7 (atrous keeps 256 between En3 and En4)
GEN_WIDTHS = (64, 128, 256, 256, 512, 512, 512, 512)
DROP_RATE = 0.5


class Generator:
    def __init__(self, rng, dtype=np.float32, reduction=16):
        self.dtype = dtype
        self.en1 = Conv("gen.en1", 1, 64, 4, 2, 1, rng=rng, dtype=dtype)
        self.en2 = Conv("gen.en2", 64, 128, 4, 2, 1, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm("gen.en2.bn", 128, dtype=dtype)
        self.en3 = Conv("gen.en3", 128, 256, 4, 2, 1, rng=rng, dtype=dtype)
        self.bn3 = BatchNorm("gen.en3.bn", 256, dtype=dtype)
        self.atrous = AtrousBlock("gen.atrous", 256, rng=rng, dtype=dtype)
        self.en4 = Conv("gen.en4", 256, 512, 4, 2, 1, rng=rng, dtype=dtype)
        self.bn4 = BatchNorm("gen.en4.bn", 512, dtype=dtype)
        self.en5 = Conv("gen.en5", 512, 512, 4, 2, 1, rng=rng, dtype=dtype)
        self.bn5 = BatchNorm("gen.en5.bn", 512, dtype=dtype)
        self.en6 = Conv("gen.en6", 512, 512, 4, 2, 1, rng=rng, dtype=dtype)
        self.bn6 = BatchNorm("gen.en6.bn", 512, dtype=dtype)
        self.en7 = Conv("gen.en7", 512, 512, 4, 2, 2, rng=rng, dtype=dtype)
        self.caw = CAWBlock("gen.caw", 512, rng=rng, reduction=reduction, dtype=dtype)
        self.dn1 = Deconv("gen.dn1", 512, 512, 4, 2, 1, rng=rng, dtype=dtype)
        self.dbn1 = BatchNorm("gen.dn1.bn", 512, dtype=dtype)
        self.dn2 = Deconv("gen.dn2", 1024, 512, 4, 2, 1, rng=rng, dtype=dtype)
        self.dbn2 = BatchNorm("gen.dn2.bn", 512, dtype=dtype)
        self.dn3 = Deconv("gen.dn3", 1024, 256, 4, 2, 2, rng=rng, dtype=dtype)
        self.dbn3 = BatchNorm("gen.dn3.bn", 256, dtype=dtype)
        self.dn4 = Deconv("gen.dn4", 512, 256, 4, 2, 1, rng=rng, dtype=dtype)
        self.dbn4 = BatchNorm("gen.dn4.bn", 256, dtype=dtype)
        self.dn5 = Deconv("gen.dn5", 512, 128, 4, 2, 1, rng=rng, dtype=dtype)
        self.dbn5 = BatchNorm("gen.dn5.bn", 128, dtype=dtype)
        self.dn6 = Deconv("gen.dn6", 256, 64, 4, 2, 1, rng=rng, dtype=dtype)
        self.dbn6 = BatchNorm("gen.dn6.bn", 64, dtype=dtype)
        self.dn7 = Deconv("gen.dn7", 128, 1, 4, 2, 1, rng=rng, dtype=dtype)

    def forward(self, x, rng, train=False, trace=None):
        """Map [N,1,96,96] images in [0,1] to masks in [0,1].

        `rng` drives the always-on decoder dropout; `trace`, if given, is a
        dict filled with named intermediate shapes.
        """
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (96, 96):
            raise ShapeError(
                f"generator expects [N,1,96,96] input, got {x.shape}; "
                "preprocess images to 96x96 in [0,1] first")
        e1 = leaky(self.en1(x))
        e2 = leaky(self.bn2(self.en2(e1), train))
        e3 = leaky(self.bn3(self.en3(e2), train))
        a = self.atrous(e3, train)
        e4 = leaky(self.bn4(self.en4(a), train))
        e4p = pad2d(e4, (0, 1, 0, 1))  # 3x3 -> 4x4, right/bottom
        e5 = leaky(self.bn5(self.en5(e4p), train))
        e6 = leaky(self.bn6(self.en6(e5), train))
        e7 = relu(self.en7(e6))
        c = self.caw(e7)
        d1 = relu(dropout(self.dbn1(self.dn1(c), train), DROP_RATE, rng))
        d2 = relu(dropout(self.dbn2(self.dn2(concat([d1, e5])), train), DROP_RATE, rng))
        d3 = relu(dropout(self.dbn3(self.dn3(concat([d2, e4p])), train), DROP_RATE, rng))
        d4 = relu(self.dbn4(self.dn4(concat([d3, a])), train))
        d5 = relu(self.dbn5(self.dn5(concat([d4, e3])), train))
        d6 = relu(self.dbn6(self.dn6(concat([d5, e2])), train))
        g = activation(self.dn7(concat([d6, e1])), "tanh")
        if trace is not None:
            for name, t in (("en1", e1), ("en2", e2), ("en3", e3), ("atrous", a),
                            ("en4", e4), ("en4_padded", e4p), ("en5", e5),
                            ("en6", e6), ("en7", e7), ("caw", c), ("dn1", d1),
                            ("dn2", d2), ("dn3", d3), ("dn4", d4), ("dn5", d5),
                            ("dn6", d6), ("dn7", g)):
                trace[name] = t.shape
        return (g + 1.0) * 0.5

    __call__ = forward

    def _modules(self):
        return (self.en1, self.en2, self.bn2, self.en3, self.bn3, self.atrous,
                self.en4, self.bn4, self.en5, self.bn5, self.en6, self.bn6,
                self.en7, self.caw, self.dn1, self.dbn1, self.dn2, self.dbn2,
                self.dn3, self.dbn3, self.dn4, self.dbn4, self.dn5, self.dbn5,
                self.dn6, self.dbn6, self.dn7)

    def named_parameters(self):
        out = []
        for m in self._modules():
            out.extend(m.params())
        return out

    def arrays(self):
        out = []
        for m in self._modules():
            out.extend(m.arrays())
        return out

    def load(self, get):
        for m in self._modules():
            m.load(get)


class Discriminator:
    def __init__(self, rng, dtype=np.float32):
        self.cn1 = Conv("disc.cn1", 2, 64, 4, 2, 1, rng=rng, dtype=dtype)
        self.cn2 = Conv("disc.cn2", 64, 128, 4, 2, 1, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm("disc.cn2.bn", 128, dtype=dtype)
        self.cn3 = Conv("disc.cn3", 128, 256, 4, 2, 1, rng=rng, dtype=dtype)
        self.bn3 = BatchNorm("disc.cn3.bn", 256, dtype=dtype)
        self.cn4 = Conv("disc.cn4", 256, 512, 4, 1, 1, rng=rng, dtype=dtype)
        self.bn4 = BatchNorm("disc.cn4.bn", 512, dtype=dtype)
        self.cn5 = Conv("disc.cn5", 512, 1, 4, 1, 1, rng=rng, dtype=dtype)

    def forward(self, image, mask, train=False):
        """Judge an (image, mask) pair; returns a [N,1,10,10] grid in (0,1)."""
        if image.shape != mask.shape:
            raise ShapeError(f"discriminator inputs disagree: image {image.shape} "
                             f"vs mask {mask.shape}")
        if image.ndim != 4 or image.shape[1] != 1 or image.shape[2:] != (96, 96):
            raise ShapeError(f"discriminator expects [N,1,96,96] pairs, got {image.shape}")
        x = concat([image, mask], axis=1)
        h = leaky(self.cn1(x))                       # 48
        h = leaky(self.bn2(self.cn2(h), train))      # 24
        h = leaky(self.bn3(self.cn3(h), train))      # 12
        h = leaky(self.bn4(self.cn4(h), train))      # 11
        return activation(self.cn5(h), "sigmoid")    # 10

    __call__ = forward

    def _modules(self):
        return (self.cn1, self.cn2, self.bn2, self.cn3, self.bn3,
                self.cn4, self.bn4, self.cn5)

    def named_parameters(self):
        out = []
        for m in self._modules():
            out.extend(m.params())
        return out

    def arrays(self):
        out = []
        for m in self._modules():
            out.extend(m.arrays())
        return out

    def load(self, get):
        for m in self._modules():
            m.load(get)


def set_requires_grad(net, flag):
    for _, p in net.named_parameters():
        p.requires_grad = flag
