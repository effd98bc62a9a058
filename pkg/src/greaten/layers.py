"""Shared neural building blocks: conv stacks, channel layer norm, resizing."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "ChannelLayerNorm",
    "ConvINReLU",
    "conv_in_relu_stack",
    "resize_bilinear",
]


class ConvINReLU(nn.Module):
    """3x3 (by default) convolution followed by instance norm and ReLU.

    Instance norm runs without affine parameters and with eps 1e-5, so a
    spatially constant input channel maps to zero after normalization.  With
    zero-initialized conv biases this makes an all-zero input produce an
    all-zero output, which several callers rely on.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 3,
        stride: int = 1,
    ) -> None:
        super().__init__()
        self.conv = nn.Conv2d(
            in_channels,
            out_channels,
            kernel_size,
            stride=stride,
            padding=kernel_size // 2,
        )
        self.norm = nn.InstanceNorm2d(out_channels, eps=1e-5)
        nn.init.zeros_(self.conv.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.norm(self.conv(x)))


def conv_in_relu_stack(
    in_channels: int,
    out_channels: int,
    depth: int,
    stride: int = 1,
) -> nn.Sequential:
    """A strided ConvINReLU followed by ``depth - 1`` stride-1 refinements."""
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    blocks = [ConvINReLU(in_channels, out_channels, stride=stride)]
    for _ in range(depth - 1):
        blocks.append(ConvINReLU(out_channels, out_channels))
    return nn.Sequential(*blocks)


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis of a (B, C, H, W) tensor.

    Normalizes each spatial location independently across channels, with a
    learnable per-channel weight and bias.  Kept explicit (rather than
    permuting into nn.LayerNorm) so the reduction axis is obvious.
    """

    def __init__(self, channels: int, eps: float = 1e-5) -> None:
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.weight.shape[0]:
            raise ValueError(
                f"expected (B, {self.weight.shape[0]}, H, W) input, got {tuple(x.shape)}"
            )
        mean = x.mean(dim=1, keepdim=True)
        var = x.var(dim=1, unbiased=False, keepdim=True)
        normed = (x - mean) / torch.sqrt(var + self.eps)
        return normed * self.weight[None, :, None, None] + self.bias[None, :, None, None]


def resize_bilinear(x: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Bilinear resize of a (B, C, H, W) tensor to the given spatial size."""
    if x.shape[-2:] == (height, width):
        return x
    return F.interpolate(x, size=(height, width), mode="bilinear", align_corners=False)
