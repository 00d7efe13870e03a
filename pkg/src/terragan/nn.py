"""Thin parameterized layers over the tensor ops.

Initialization convention for all adversarial models in this package:
conv kernels ~ normal(0, 0.02), biases zero.
"""

from __future__ import annotations

import numpy as np

from .optim import Parameter
from .tensor import Rng, Tensor, conv2d, conv2d_transpose, normal, zeros

__all__ = ["Conv2d", "ConvTranspose2d", "INIT_STD"]

INIT_STD = 0.02


class Conv2d:
    """[B,Cin,H,W] -> [B,Cout,H',W'] cross-correlation layer."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: Rng, stride: int = 1, padding: int = 0,
                 dtype=np.float32):
        self.stride = stride
        self.padding = padding
        self.kernel = Parameter(normal(
            [out_channels, in_channels, kernel_size, kernel_size],
            rng, 0.0, INIT_STD, dtype=dtype))
        self.bias = Parameter(zeros([out_channels], dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.kernel.tensor, self.bias.tensor,
                      stride=self.stride, padding=self.padding)

    def parameters(self) -> list[Parameter]:
        return [self.kernel, self.bias]

    def named_parameters(self, prefix: str) -> list[tuple[str, Parameter]]:
        return [(f"{prefix}.kernel", self.kernel), (f"{prefix}.bias", self.bias)]


class ConvTranspose2d:
    """[B,Cin,H,W] -> [B,Cout,(H-1)s-2p+K,...] transposed convolution layer."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: Rng, stride: int = 1, padding: int = 0,
                 dtype=np.float32):
        self.stride = stride
        self.padding = padding
        self.kernel = Parameter(normal(
            [in_channels, out_channels, kernel_size, kernel_size],
            rng, 0.0, INIT_STD, dtype=dtype))
        self.bias = Parameter(zeros([out_channels], dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d_transpose(x, self.kernel.tensor, self.bias.tensor,
                                stride=self.stride, padding=self.padding)

    def parameters(self) -> list[Parameter]:
        return [self.kernel, self.bias]

    def named_parameters(self, prefix: str) -> list[tuple[str, Parameter]]:
        return [(f"{prefix}.kernel", self.kernel), (f"{prefix}.bias", self.bias)]
