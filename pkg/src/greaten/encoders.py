"""Multi-scale feature encoders for images and surface normal maps.

Both encoders emit a four-level pyramid at strides 4, 8, 16 and 32 with a
shared channel plan, returned as a dict keyed by stride.  The image encoder is
a plain strided stack; the normal encoder is a small U-Net (two downsamplings
below quarter scale, two upsamplings back) whose side projections provide the
strided outputs, with the stride-32 level taken from an extra strided head on
the bottleneck.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import ConvINReLU, conv_in_relu_stack

__all__ = [
    "PYRAMID_STRIDES",
    "EncoderConfig",
    "ImageEncoder",
    "NormalEncoder",
]

PYRAMID_STRIDES = (4, 8, 16, 32)


@dataclass(frozen=True)
class EncoderConfig:
    """Channel plan and depth for the pyramid encoders.

    channel_plan gives the output width at strides 4, 8, 16, 32 in that
    order.  blocks_per_stage is the number of ConvINReLU blocks per stage;
    the first block of a stage carries the stride.
    """

    channel_plan: tuple[int, int, int, int] = (48, 64, 96, 128)
    blocks_per_stage: int = 2
    in_channels: int = 3

    def __post_init__(self) -> None:
        if len(self.channel_plan) != 4 or any(c < 1 for c in self.channel_plan):
            raise ValueError(f"channel_plan needs four positive widths, got {self.channel_plan}")
        if self.blocks_per_stage < 1:
            raise ValueError(f"blocks_per_stage must be >= 1, got {self.blocks_per_stage}")


def _validate_input(x: torch.Tensor, in_channels: int) -> None:
    if x.dim() != 4:
        raise ValueError(f"expected a (B, C, H, W) tensor, got shape {tuple(x.shape)}")
    if x.shape[1] != in_channels:
        raise ValueError(f"expected {in_channels} input channels, got {x.shape[1]}")
    h, w = x.shape[-2:]
    if h % 32 or w % 32:
        raise ValueError(f"input height and width must be divisible by 32, got {h}x{w}")


class ImageEncoder(nn.Module):
    """Strided ConvINReLU stack producing the four-level image pyramid.

    A two-conv stride-2 stem reaches quarter scale; each later stage halves
    resolution once and then refines at constant width.
    """

    def __init__(self, config: EncoderConfig = EncoderConfig()) -> None:
        super().__init__()
        self.config = config
        c4, c8, c16, c32 = config.channel_plan
        depth = config.blocks_per_stage
        stem = [
            ConvINReLU(config.in_channels, c4, stride=2),
            ConvINReLU(c4, c4, stride=2),
        ]
        stem.extend(ConvINReLU(c4, c4) for _ in range(depth - 1))
        self.stage4 = nn.Sequential(*stem)
        self.stage8 = conv_in_relu_stack(c4, c8, depth, stride=2)
        self.stage16 = conv_in_relu_stack(c8, c16, depth, stride=2)
        self.stage32 = conv_in_relu_stack(c16, c32, depth, stride=2)

    def forward(self, image: torch.Tensor) -> dict[int, torch.Tensor]:
        _validate_input(image, self.config.in_channels)
        f4 = self.stage4(image)
        f8 = self.stage8(f4)
        f16 = self.stage16(f8)
        f32 = self.stage32(f16)
        return {4: f4, 8: f8, 16: f16, 32: f32}


class NormalEncoder(nn.Module):
    """Small U-Net over normal maps with strided side outputs.

    The stem reaches quarter scale, the contracting path continues to 1/16,
    and the expanding path returns to quarter scale with skip connections.
    Levels 4 and 8 are 1x1 projections of the decoder, level 16 projects the
    bottleneck, and level 32 is a strided head on the bottleneck.
    """

    def __init__(self, config: EncoderConfig = EncoderConfig()) -> None:
        super().__init__()
        self.config = config
        c4, c8, c16, c32 = config.channel_plan
        depth = config.blocks_per_stage
        self.stem = nn.Sequential(
            ConvINReLU(config.in_channels, c4, stride=2),
            ConvINReLU(c4, c4, stride=2),
        )
        self.down8 = conv_in_relu_stack(c4, c8, depth, stride=2)
        self.down16 = conv_in_relu_stack(c8, c16, depth, stride=2)
        self.up8 = ConvINReLU(c16 + c8, c8)
        self.up4 = ConvINReLU(c8 + c4, c4)
        self.head4 = nn.Conv2d(c4, c4, 1)
        self.head8 = nn.Conv2d(c8, c8, 1)
        self.head16 = nn.Conv2d(c16, c16, 1)
        self.head32 = nn.Conv2d(c16, c32, 3, stride=2, padding=1)
        for head in (self.head4, self.head8, self.head16, self.head32):
            nn.init.zeros_(head.bias)

    def forward(self, normals: torch.Tensor) -> dict[int, torch.Tensor]:
        _validate_input(normals, self.config.in_channels)
        e4 = self.stem(normals)
        e8 = self.down8(e4)
        e16 = self.down16(e8)
        u8 = self.up8(torch.cat([_up2(e16), e8], dim=1))
        u4 = self.up4(torch.cat([_up2(u8), e4], dim=1))
        return {
            4: self.head4(u4),
            8: self.head8(u8),
            16: self.head16(e16),
            32: self.head32(e16),
        }


def _up2(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
