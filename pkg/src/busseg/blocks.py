"""The two architectural add-ons: the atrous block and the CAW block.

The atrous block looks at its input through three dilated stride-2 branches
(dilations 1, 6, 9; padding equal to dilation keeps all three outputs the
same size) and fuses them with a 1x1 convolution.  The CAW block re-balances
the deepest encoder features as the sum of a softmax channel-affinity
attention term and a squeeze-style per-channel gate.
"""

from __future__ import annotations

import numpy as np

from .layers import BatchNorm, Conv, Linear, leaky, relu
from .tensor import ShapeError, Tensor, activation, concat, softmax


class AtrousBlock:
    def __init__(self, name, cin, rng, branch_channels=None, cout=None,
                 dilations=(1, 6, 9), dtype=np.float32):
        cb = branch_channels or cin
        cout = cout or cin
        self.name = name
        self.dilations = tuple(dilations)
        self.branches = [
            Conv(f"{name}.branch{d}", cin, cb, 3, stride=2, pad=d, dilation=d,
                 rng=rng, dtype=dtype)
            for d in self.dilations
        ]
        self.fuse = Conv(f"{name}.fuse", cb * len(self.branches), cout, 1,
                         rng=rng, dtype=dtype)
        self.bn = BatchNorm(f"{name}.bn", cout, dtype=dtype)

    def __call__(self, x, train=False):
        outs = [branch(x) for branch in self.branches]
        extents = {o.shape[2:] for o in outs}
        if len(extents) != 1:
            raise ShapeError(f"atrous branch outputs disagree on spatial extents: {extents}")
        y = self.fuse(concat(outs, axis=1))
        return leaky(self.bn(y, train))

    def params(self):
        out = []
        for m in (*self.branches, self.fuse, self.bn):
            out.extend(m.params())
        return out

    def arrays(self):
        out = []
        for m in (*self.branches, self.fuse, self.bn):
            out.extend(m.arrays())
        return out

    def load(self, get):
        for m in (*self.branches, self.fuse, self.bn):
            m.load(get)


def channel_attention(x, gamma):
    """Residual channel attention: softmax affinity over channel rows.

    Reshapes to C x (H*W), forms A = row_softmax(X X^T) and returns
    gamma * (A X) + X in the original shape.
    """
    n, c, h, w = x.shape
    xm = x.reshape(n, c, h * w)
    affinity = xm @ xm.transpose(0, 2, 1)
    att = softmax(affinity, axis=-1)
    out = gamma * (att @ xm) + xm
    return out.reshape(n, c, h, w)


class ChannelWeighting:
    """Squeeze-style gate: sigmoid(W2 relu(W1 GAP(x))) scales each channel."""

    def __init__(self, name, channels, reduction, rng, dtype=np.float32):
        if channels % reduction:
            raise ValueError(f"reduction {reduction} must divide {channels} channels")
        self.name = name
        self.fc1 = Linear(f"{name}.fc1", channels, channels // reduction, rng, dtype)
        self.fc2 = Linear(f"{name}.fc2", channels // reduction, channels, rng, dtype)

    def __call__(self, x):
        n, c, h, w = x.shape
        gap = x.mean(axis=(2, 3))
        s = activation(self.fc2(relu(self.fc1(gap))), "sigmoid")
        return x * s.reshape(n, c, 1, 1)

    def params(self):
        return self.fc1.params() + self.fc2.params()

    def arrays(self):
        return self.fc1.arrays() + self.fc2.arrays()

    def load(self, get):
        self.fc1.load(get)
        self.fc2.load(get)


class CAWBlock:
    """Sum of the channel-attention and channel-weighting branches."""

    def __init__(self, name, channels, rng, reduction=16, dtype=np.float32):
        self.name = name
        self.gamma = Tensor(np.zeros((), dtype=dtype), requires_grad=True,
                            name=f"{name}.gamma")
        self.weighting = ChannelWeighting(f"{name}.cw", channels, reduction, rng, dtype)

    def __call__(self, x):
        return channel_attention(x, self.gamma) + self.weighting(x)

    def params(self):
        return [(self.gamma.name, self.gamma)] + self.weighting.params()

    def arrays(self):
        return [(self.gamma.name, self.gamma.data)] + self.weighting.arrays()

    def load(self, get):
        self.gamma.data = np.asarray(get(self.gamma.name), dtype=self.gamma.data.dtype).reshape(())
        self.weighting.load(get)
