"""Cost volume construction, volume gating, and initial disparity regression.

The combined volume holds, per disparity candidate d, group-wise correlations
between the left features and the right features shifted by d, concatenated
with low-channel projections of both views, mixed down to the group count by
a pointwise 3D conv.  A gating stage then modulates the volume with a sigmoid
filter built from a disparity-axis softmax of the volume and the spatial
attention features.  The initial disparity is the soft-argmax of a one-channel
score reduction.
"""

from __future__ import annotations

import torch
import torch.nn as nn

__all__ = [
    "CombinedCostVolume",
    "SimpleVolumeAttention",
    "DisparityRegression",
    "shift_right_features",
]


def shift_right_features(feat: torch.Tensor, disparity: int) -> torch.Tensor:
    """Shifts a (B, C, H, W) map right by an integer disparity, zero-filling.

    Column x of the result holds the input's column x - disparity, matching
    the correspondence f_r(x - d) used by the correlation; columns with
    x - d < 0 are zero.
    """
    if disparity == 0:
        return feat
    shifted = torch.zeros_like(feat)
    shifted[..., disparity:] = feat[..., : feat.shape[-1] - disparity]
    return shifted


class CombinedCostVolume(nn.Module):
    """Builds the N_g-group combined cost volume from matched stereo features.

    Correlation entries are alpha * <left group, shifted right group> with
    alpha = 1 / (channels per group).  Channel groups are contiguous slices.
    A shared 1x1 conv projects each view to n_groups channels for the
    concatenation part, and a pointwise 3D conv mixes correlation plus
    concatenation (3 * n_groups channels) back down to n_groups.
    """

    def __init__(self, channels: int, n_groups: int = 8) -> None:
        super().__init__()
        if channels % n_groups:
            raise ValueError(
                f"channels ({channels}) must be divisible by n_groups ({n_groups})"
            )
        self.channels = channels
        self.n_groups = n_groups
        self.group_size = channels // n_groups
        self.alpha = 1.0 / self.group_size
        self.proj = nn.Conv2d(channels, n_groups, 1)
        self.mix = nn.Conv3d(3 * n_groups, n_groups, 1)

    def _check(self, f_l: torch.Tensor, f_r: torch.Tensor, n_candidates: int) -> None:
        if f_l.dim() != 4 or f_l.shape[1] != self.channels or f_l.shape != f_r.shape:
            raise ValueError(
                f"expected matching (B, {self.channels}, h, w) maps, got "
                f"{tuple(f_l.shape)} and {tuple(f_r.shape)}"
            )
        if not 1 <= n_candidates <= f_l.shape[-1]:
            raise ValueError(
                f"candidate count {n_candidates} outside [1, width={f_l.shape[-1]}]"
            )

    def correlation_volume(
        self, f_l: torch.Tensor, f_r: torch.Tensor, n_candidates: int
    ) -> torch.Tensor:
        """The pure group-correlation part: (B, n_groups, D, h, w)."""
        self._check(f_l, f_r, n_candidates)
        b, _, h, w = f_l.shape
        left = f_l.view(b, self.n_groups, self.group_size, h, w)
        slices = []
        for d in range(n_candidates):
            right = shift_right_features(f_r, d).view(
                b, self.n_groups, self.group_size, h, w
            )
            slices.append(self.alpha * (left * right).sum(dim=2))
        return torch.stack(slices, dim=2)

    def forward(
        self, f_l: torch.Tensor, f_r: torch.Tensor, n_candidates: int
    ) -> torch.Tensor:
        self._check(f_l, f_r, n_candidates)
        c_cor = self.correlation_volume(f_l, f_r, n_candidates)
        p_l = self.proj(f_l)
        p_r = self.proj(f_r)
        cat_slices = [
            torch.cat([p_l, shift_right_features(p_r, d)], dim=1)
            for d in range(n_candidates)
        ]
        c_cat = torch.stack(cat_slices, dim=2)
        return self.mix(torch.cat([c_cor, c_cat], dim=1))


class SimpleVolumeAttention(nn.Module):
    """Gates the cost volume with context-conditioned per-entry confidence.

    A 3D conv over the volume gives logits whose softmax runs along the
    disparity axis; the resulting distribution scales a projection of the
    spatial attention features (broadcast over disparity), and the sigmoid of
    that product multiplies the volume, so every entry shrinks toward zero
    unless the filter saturates open.
    """

    def __init__(self, n_groups: int, spatial_channels: int) -> None:
        super().__init__()
        self.n_groups = n_groups
        self.spatial_channels = spatial_channels
        self.volume_conv = nn.Conv3d(n_groups, n_groups, 3, padding=1)
        self.spatial_proj = nn.Conv2d(spatial_channels, n_groups, 1)

    def forward(
        self,
        volume: torch.Tensor,
        f_spatial4: torch.Tensor,
        return_filter: bool = False,
    ):
        if volume.dim() != 5 or volume.shape[1] != self.n_groups:
            raise ValueError(
                f"expected a (B, {self.n_groups}, D, h, w) volume, got {tuple(volume.shape)}"
            )
        if (
            f_spatial4.dim() != 4
            or f_spatial4.shape[1] != self.spatial_channels
            or f_spatial4.shape[-2:] != volume.shape[-2:]
            or f_spatial4.shape[0] != volume.shape[0]
        ):
            raise ValueError(
                f"spatial features {tuple(f_spatial4.shape)} do not match volume "
                f"{tuple(volume.shape)}"
            )
        dist = torch.softmax(self.volume_conv(volume), dim=2)
        context = self.spatial_proj(f_spatial4)
        volume_filter = dist * context[:, :, None]
        refined = torch.sigmoid(volume_filter) * volume
        if return_filter:
            return refined, volume_filter
        return refined


class DisparityRegression(nn.Module):
    """Soft-argmax over the disparity axis of a group volume.

    A pointwise 3D conv reduces groups to one score channel; the output is
    the softmax-weighted mean of candidate indices, so it always lies in
    [0, D - 1].
    """

    def __init__(self, n_groups: int) -> None:
        super().__init__()
        self.n_groups = n_groups
        self.score_conv = nn.Conv3d(n_groups, 1, 1)

    def forward(self, volume: torch.Tensor) -> torch.Tensor:
        if volume.dim() != 5 or volume.shape[1] != self.n_groups:
            raise ValueError(
                f"expected a (B, {self.n_groups}, D, h, w) volume, got {tuple(volume.shape)}"
            )
        scores = self.score_conv(volume)[:, 0]
        prob = torch.softmax(scores, dim=1)
        candidates = torch.arange(
            volume.shape[2], device=volume.device, dtype=volume.dtype
        )
        return (prob * candidates[None, :, None, None]).sum(dim=1, keepdim=True)
