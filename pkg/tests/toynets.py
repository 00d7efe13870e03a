"""Miniature networks for exercising the adversarial machinery in tests."""

import numpy as np

from terragan import tensor as T
from terragan.nn import Conv2d, ConvTranspose2d


class TinyGenerator:
    """z [B,dim] -> [B,channels,4,4] image in (-1,1)."""

    def __init__(self, dim, rng, channels=1):
        self.dim = dim
        self.head = ConvTranspose2d(dim, channels, 4, rng)

    def __call__(self, z):
        h = T.reshape(z, [z.shape[0], self.dim, 1, 1])
        return T.tanh(self.head(h))

    def parameters(self):
        return self.head.parameters()

    def named_parameters(self, prefix=""):
        return self.head.named_parameters(prefix + "head")


class TinyDiscriminator:
    """[B,channels,4,4] -> [B] scores in (0,1)."""

    def __init__(self, rng, channels=1, width=8):
        self.conv = Conv2d(channels, width, 4, rng)
        self.head = Conv2d(width, 1, 1, rng)

    def __call__(self, x):
        h = T.leaky_relu(self.conv(x), 0.2)
        s = T.sigmoid(self.head(h))
        return T.reshape(s, [x.shape[0]])

    def parameters(self):
        return self.conv.parameters() + self.head.parameters()

    def named_parameters(self, prefix=""):
        return (self.conv.named_parameters(prefix + "conv")
                + self.head.named_parameters(prefix + "head"))


def snapshot_params(params):
    return [p.data.copy() for p in params]


def params_equal(params, snap):
    return all(np.array_equal(p.data, s) for p, s in zip(params, snap))
