"""Gated fusion of image and normal feature pyramids.

A small conv net predicts a single-channel reliability gate at quarter scale
from the two feature maps plus the resized raw inputs.  The gate suppresses
image features wherever texture is untrustworthy; the suppressed features are
then fused with the normal features level by level.  Coarser gates come from
non-overlapping average pooling of the quarter-scale gate, so they stay in
[0, 1] and equal exact block means.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import PYRAMID_STRIDES, EncoderConfig
from .layers import ConvINReLU, resize_bilinear

__all__ = [
    "GatedMaskNet",
    "GatedFusion",
    "downsample_masks",
]


class GatedMaskNet(nn.Module):
    """Predicts the quarter-scale gate mask in (0, 1).

    Input is the channel concatenation of image features, the resized image,
    normal features and the resized normal map; output is one sigmoid channel.
    Weights are shared across views by construction (callers run each view
    through the same module).
    """

    def __init__(
        self,
        feature_channels: int,
        hidden_channels: int = 64,
        depth: int = 3,
        raw_channels: int = 3,
    ) -> None:
        super().__init__()
        self.feature_channels = feature_channels
        self.raw_channels = raw_channels
        in_channels = 2 * feature_channels + 2 * raw_channels
        blocks = [ConvINReLU(in_channels, hidden_channels)]
        blocks.extend(ConvINReLU(hidden_channels, hidden_channels) for _ in range(depth - 1))
        self.body = nn.Sequential(*blocks)
        self.head = nn.Conv2d(hidden_channels, 1, 3, padding=1)
        nn.init.zeros_(self.head.bias)

    def forward(
        self,
        f_image4: torch.Tensor,
        image4: torch.Tensor,
        f_normal4: torch.Tensor,
        normals4: torch.Tensor,
    ) -> torch.Tensor:
        for name, t, channels in (
            ("f_image4", f_image4, self.feature_channels),
            ("image4", image4, self.raw_channels),
            ("f_normal4", f_normal4, self.feature_channels),
            ("normals4", normals4, self.raw_channels),
        ):
            if t.dim() != 4 or t.shape[1] != channels:
                raise ValueError(f"{name}: expected {channels} channels, got shape {tuple(t.shape)}")
            if t.shape[-2:] != f_image4.shape[-2:] or t.shape[0] != f_image4.shape[0]:
                raise ValueError(
                    f"{name}: spatial/batch shape {tuple(t.shape)} does not match "
                    f"f_image4 {tuple(f_image4.shape)}"
                )
        x = torch.cat([f_image4, image4, f_normal4, normals4], dim=1)
        return torch.sigmoid(self.head(self.body(x)))


def downsample_masks(mask4: torch.Tensor) -> dict[int, torch.Tensor]:
    """Expands the quarter-scale gate into the {4, 8, 16, 32} pyramid.

    Levels below quarter scale are non-overlapping average pools with factors
    2, 4 and 8, so each coarse value is the mean of the block it covers.
    """
    if mask4.dim() != 4 or mask4.shape[1] != 1:
        raise ValueError(f"expected a (B, 1, H, W) mask, got shape {tuple(mask4.shape)}")
    masks = {4: mask4}
    for stride in PYRAMID_STRIDES[1:]:
        factor = stride // 4
        masks[stride] = F.avg_pool2d(mask4, kernel_size=factor, stride=factor)
    return masks


class GatedFusion(nn.Module):
    """Applies the gate to the image pyramid and fuses with the normal pyramid.

    Per level: filtered = image features * gate (gate broadcast over
    channels), fused = ConvINReLU over the concatenation of filtered and
    normal features.  Returns the fused pyramid plus the quarter-scale
    filtered features, which the matching attention stage consumes directly.
    """

    def __init__(
        self,
        config: EncoderConfig = EncoderConfig(),
        mask_hidden_channels: int = 64,
        mask_depth: int = 3,
    ) -> None:
        super().__init__()
        self.config = config
        self.mask_net = GatedMaskNet(
            config.channel_plan[0],
            hidden_channels=mask_hidden_channels,
            depth=mask_depth,
            raw_channels=config.in_channels,
        )
        self.fuse_convs = nn.ModuleDict(
            {
                str(stride): ConvINReLU(2 * channels, channels)
                for stride, channels in zip(PYRAMID_STRIDES, config.channel_plan)
            }
        )

    def fuse(
        self,
        f_image_pyr: dict[int, torch.Tensor],
        masks: dict[int, torch.Tensor],
        f_normal_pyr: dict[int, torch.Tensor],
    ) -> tuple[dict[int, torch.Tensor], torch.Tensor]:
        fused: dict[int, torch.Tensor] = {}
        filtered4 = None
        for stride in PYRAMID_STRIDES:
            f_image = f_image_pyr[stride]
            f_normal = f_normal_pyr[stride]
            mask = masks[stride]
            if f_image.shape != f_normal.shape:
                raise ValueError(
                    f"stride {stride}: image features {tuple(f_image.shape)} and normal "
                    f"features {tuple(f_normal.shape)} differ"
                )
            if mask.shape[-2:] != f_image.shape[-2:]:
                raise ValueError(
                    f"stride {stride}: mask {tuple(mask.shape)} does not match features "
                    f"{tuple(f_image.shape)}"
                )
            filtered = f_image * mask
            fused[stride] = self.fuse_convs[str(stride)](torch.cat([filtered, f_normal], dim=1))
            if stride == 4:
                filtered4 = filtered
        return fused, filtered4

    def forward(
        self,
        f_image_pyr: dict[int, torch.Tensor],
        f_normal_pyr: dict[int, torch.Tensor],
        image: torch.Tensor,
        normals: torch.Tensor,
        mask_override: torch.Tensor | None = None,
    ) -> tuple[dict[int, torch.Tensor], torch.Tensor, dict[int, torch.Tensor]]:
        h4, w4 = f_image_pyr[4].shape[-2:]
        if mask_override is not None:
            mask4 = mask_override
        else:
            image4 = resize_bilinear(image, h4, w4)
            normals4 = resize_bilinear(normals, h4, w4)
            mask4 = self.mask_net(f_image_pyr[4], image4, f_normal_pyr[4], normals4)
        masks = downsample_masks(mask4)
        fused, filtered4 = self.fuse(f_image_pyr, masks, f_normal_pyr)
        return fused, filtered4, masks
