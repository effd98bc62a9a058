"""Sparse deformable attention: point sampling, spatial and cross-view blocks.

The primitive is bilinear sampling of a feature map at predicted continuous
points, implemented by hand with gathers so it is differentiable in both the
features and the points, exact at lattice points, and zero-padded outside the
map.  On top of it sit per-pixel key-point sampling (a linear head predicts k
offsets from the query pixel), a spatial attention block applied per pyramid
level, and a dual-branch cross-view block whose sampling points are pinned to
the query's epipolar line.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .layers import ChannelLayerNorm

__all__ = [
    "positional_embed",
    "grid_sample_bilinear",
    "BilinearSampler",
    "KeyPointSampler",
    "SparseSpatialAttention",
    "SparseDualMatchingAttention",
]


def positional_embed(
    height: int,
    width: int,
    channels: int,
    device: torch.device | None = None,
    dtype: torch.dtype | None = None,
) -> torch.Tensor:
    """Parameter-free 2D sinusoidal embedding of shape (channels, h, w).

    The first half of the channels encodes x, the second half y.  Within a
    half, channels alternate sin and cos over frequencies descending
    geometrically from 1 to 1/10000.
    """
    if channels % 2:
        raise ValueError(f"channels must be even, got {channels}")
    half = channels // 2
    n_freq = (half + 1) // 2
    if n_freq > 1:
        exponents = torch.arange(n_freq, dtype=torch.float64) / (n_freq - 1)
        freqs = torch.pow(torch.tensor(10000.0, dtype=torch.float64), -exponents)
    else:
        freqs = torch.ones(1, dtype=torch.float64)

    def encode(positions: torch.Tensor) -> torch.Tensor:
        angles = positions[None, :] * freqs[:, None]
        rows = []
        for t in range(n_freq):
            rows.append(torch.sin(angles[t]))
            if len(rows) < half:
                rows.append(torch.cos(angles[t]))
        return torch.stack(rows[:half])

    xs = encode(torch.arange(width, dtype=torch.float64))
    ys = encode(torch.arange(height, dtype=torch.float64))
    pe = torch.empty(channels, height, width, dtype=torch.float64)
    pe[:half] = xs[:, None, :]
    pe[half:] = ys[:, :, None]
    return pe.to(device=device, dtype=dtype if dtype is not None else torch.float32)


def _split_points(points: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    if points.dim() != 5 or points.shape[1] != 2:
        raise ValueError(f"points must be (B, 2, k, h, w), got {tuple(points.shape)}")
    return points[:, 0], points[:, 1]


def grid_sample_bilinear(feat: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Bilinear sampling in pixel coordinates with zero padding.

    feat: (B, C, h, w) or (C, h, w); points: (B, 2, k, h, w) or (2, k, h, w)
    holding (x, y).  Returns (B, k, C, h, w) (batch axis dropped when the
    inputs were unbatched).  The four lattice neighbours are gathered and
    blended; a neighbour outside the map contributes zero.  Differentiable in
    both arguments.
    """
    unbatched = feat.dim() == 3
    if unbatched:
        feat = feat[None]
        points = points[None]
    b, c, h, w = feat.shape
    x, y = _split_points(points)
    k, grid_h, grid_w = x.shape[1:]
    x0 = torch.floor(x)
    y0 = torch.floor(y)
    fx = x - x0
    fy = y - y0
    flat = feat.reshape(b, c, h * w)
    out = None
    for dx, wx in ((0, 1.0 - fx), (1, fx)):
        for dy, wy in ((0, 1.0 - fy), (1, fy)):
            xi = x0 + dx
            yi = y0 + dy
            inside = (xi >= 0) & (xi <= w - 1) & (yi >= 0) & (yi <= h - 1)
            weight = wx * wy * inside.to(feat.dtype)
            idx = (
                yi.detach().clamp(0, h - 1) * w + xi.detach().clamp(0, w - 1)
            ).long()
            gathered = flat.gather(
                2, idx.reshape(b, 1, -1).expand(b, c, -1)
            ).reshape(b, c, k, grid_h, grid_w)
            term = weight[:, :, None] * gathered.permute(0, 2, 1, 3, 4)
            out = term if out is None else out + term
    return out[0] if unbatched else out


class BilinearSampler(nn.Module):
    """Module wrapper around grid_sample_bilinear.

    Keeps the lattice cell of the last forward so gradient checkers can tell
    when a perturbation stepped across an interpolation kink.
    """

    def __init__(self) -> None:
        super().__init__()
        self._last_cells: torch.Tensor | None = None

    def forward(self, feat: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
        coords = points if points.dim() == 5 else points[None]
        self._last_cells = torch.floor(coords.detach())
        return grid_sample_bilinear(feat, points)

    def kink_signature(self) -> torch.Tensor:
        return self._last_cells


def _initial_offsets(k: int, mode: str) -> list[tuple[float, float]]:
    """Distinct starting offsets so zero-weight heads still spread points.

    Spatial mode walks the 3x3 ring around the query (larger rings for
    k > 8); epipolar mode alternates +-1, 2, 4, ... along x.
    """
    offsets = []
    if mode == "spatial":
        ring = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)]
        for j in range(k):
            radius = j // len(ring) + 1
            dx, dy = ring[j % len(ring)]
            offsets.append((float(dx * radius), float(dy * radius)))
    else:
        for j in range(k):
            magnitude = float(2 ** (j // 2))
            offsets.append((magnitude if j % 2 == 0 else -magnitude, 0.0))
    return offsets


class KeyPointSampler(nn.Module):
    """Predicts k sampling points per query pixel and gathers values there.

    A 1x1 conv head over the query features yields raw (dx, dy) offsets from
    the pixel location; in epipolar mode the predicted y is discarded and the
    point row is the query row, exactly.  Values pass through their own 1x1
    linear map before sampling.
    """

    def __init__(
        self,
        query_channels: int,
        value_channels: int | None = None,
        k: int = 8,
        mode: str = "spatial",
    ) -> None:
        super().__init__()
        if mode not in ("spatial", "epipolar"):
            raise ValueError(f"mode must be 'spatial' or 'epipolar', got {mode!r}")
        self.k = k
        self.mode = mode
        self.query_channels = query_channels
        self.value_channels = query_channels if value_channels is None else value_channels
        self.offset_head = nn.Conv2d(query_channels, 2 * k, 1)
        self.value_proj = nn.Conv2d(self.value_channels, self.value_channels, 1)
        self.sampler = BilinearSampler()
        nn.init.zeros_(self.offset_head.weight)
        with torch.no_grad():
            bias = self.offset_head.bias.view(k, 2)
            for j, (dx, dy) in enumerate(_initial_offsets(k, mode)):
                bias[j, 0] = dx
                bias[j, 1] = dy

    def forward(
        self, query_feat: torch.Tensor, value_feat: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        if query_feat.dim() != 4 or query_feat.shape[1] != self.query_channels:
            raise ValueError(
                f"query: expected (B, {self.query_channels}, h, w), got {tuple(query_feat.shape)}"
            )
        if (
            value_feat.dim() != 4
            or value_feat.shape[1] != self.value_channels
            or value_feat.shape[-2:] != query_feat.shape[-2:]
            or value_feat.shape[0] != query_feat.shape[0]
        ):
            raise ValueError(
                f"value: expected (B, {self.value_channels}, h, w) matching the query, "
                f"got {tuple(value_feat.shape)}"
            )
        b, _, h, w = query_feat.shape
        raw = self.offset_head(query_feat).view(b, self.k, 2, h, w)
        xs = torch.arange(w, device=query_feat.device, dtype=query_feat.dtype)
        ys = torch.arange(h, device=query_feat.device, dtype=query_feat.dtype)
        base_x = xs[None, None, None, :].expand(b, self.k, h, w)
        base_y = ys[None, None, :, None].expand(b, self.k, h, w)
        px = base_x + raw[:, :, 0]
        if self.mode == "epipolar":
            py = base_y
        else:
            py = base_y + raw[:, :, 1]
        points = torch.stack([px, py], dim=1)
        values = self.sampler(self.value_proj(value_feat), points)
        return points, values


class SparseSpatialAttention(nn.Module):
    """Per-level attention block aggregating k freely placed samples.

    The input is lifted with the positional embedding, points and values come
    from the spatial-mode sampler, per-point weights from a softmax head, and
    two LayerNorm residual stages close the block.
    """

    def __init__(self, channels: int, k: int = 8) -> None:
        super().__init__()
        self.channels = channels
        self.kps = KeyPointSampler(channels, k=k, mode="spatial")
        self.weight_head = nn.Conv2d(channels, k, 1)
        self.agg_proj = nn.Conv2d(channels, channels, 1)
        self.norm1 = ChannelLayerNorm(channels)
        self.ffn = nn.Conv2d(channels, channels, 1)
        self.norm2 = ChannelLayerNorm(channels)

    def forward(self, x: torch.Tensor, return_details: bool = False):
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise ValueError(f"expected (B, {self.channels}, h, w), got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        pe = positional_embed(h, w, self.channels, device=x.device, dtype=x.dtype)
        x = pe[None] + x
        points, values = self.kps(x, x)
        weights = torch.softmax(self.weight_head(x), dim=1)
        agg = (weights[:, :, None] * values).sum(dim=1)
        y = self.norm1(x + self.agg_proj(agg))
        out = self.norm2(y + self.ffn(y))
        if return_details:
            return out, {"points": points, "weights": weights}
        return out


class SparseDualMatchingAttention(nn.Module):
    """Cross-view matching block with image and normal value branches.

    Queries are the left/right fused features stacked along the batch axis;
    values come from the opposite view (right for left queries and vice
    versa), so one batched pass covers both directions.  Both branches sample
    along the query's epipolar line only.  The normal branch can be omitted
    for variants that run without surface normals.
    """

    def __init__(self, channels: int, k: int = 8, use_normal_branch: bool = True) -> None:
        super().__init__()
        self.channels = channels
        self.use_normal_branch = use_normal_branch
        self.query_norm = ChannelLayerNorm(channels)
        self.image_norm = ChannelLayerNorm(channels)
        self.kps_image = KeyPointSampler(channels, k=k, mode="epipolar")
        self.weight_image = nn.Conv2d(channels, k, 1)
        branches = 1
        if use_normal_branch:
            self.normal_norm = ChannelLayerNorm(channels)
            self.kps_normal = KeyPointSampler(channels, k=k, mode="epipolar")
            self.weight_normal = nn.Conv2d(channels, k, 1)
            branches = 2
        self.merge = nn.Conv2d(branches * channels, channels, 1)
        self.out_norm = ChannelLayerNorm(channels)
        self.out_proj = nn.Conv2d(channels, channels, 1)

    def forward(
        self,
        f_fuse_l: torch.Tensor,
        f_fuse_r: torch.Tensor,
        f_filter_l: torch.Tensor,
        f_filter_r: torch.Tensor,
        f_normal_l: torch.Tensor | None = None,
        f_normal_r: torch.Tensor | None = None,
        return_details: bool = False,
    ):
        maps = [f_fuse_l, f_fuse_r, f_filter_l, f_filter_r]
        if self.use_normal_branch:
            if f_normal_l is None or f_normal_r is None:
                raise ValueError("normal features required when the normal branch is active")
            maps.extend([f_normal_l, f_normal_r])
        shape = tuple(f_fuse_l.shape)
        for m in maps:
            if m.dim() != 4 or m.shape[1] != self.channels or tuple(m.shape) != shape:
                raise ValueError(
                    f"all feature maps must share shape {shape} with {self.channels} "
                    f"channels, got {tuple(m.shape)}"
                )
        b, _, h, w = shape
        queries = torch.cat([f_fuse_l, f_fuse_r], dim=0)
        image_stack = torch.cat([f_filter_r, f_filter_l], dim=0)
        pe = positional_embed(h, w, self.channels, device=queries.device, dtype=queries.dtype)
        queries = pe[None] + queries
        q_norm = self.query_norm(queries)
        points_i, values_i = self.kps_image(q_norm, self.image_norm(image_stack))
        weights_i = torch.softmax(self.weight_image(q_norm), dim=1)
        agg = (weights_i[:, :, None] * values_i).sum(dim=1)
        details = {"points_image": points_i, "weights_image": weights_i}
        if self.use_normal_branch:
            normal_stack = torch.cat([f_normal_r, f_normal_l], dim=0)
            points_n, values_n = self.kps_normal(q_norm, self.normal_norm(normal_stack))
            weights_n = torch.softmax(self.weight_normal(q_norm), dim=1)
            agg_n = (weights_n[:, :, None] * values_n).sum(dim=1)
            agg = torch.cat([agg, agg_n], dim=1)
            details.update({"points_normal": points_n, "weights_normal": weights_n})
        f_mat = queries + self.merge(agg)
        f_mat = f_mat + self.out_proj(self.out_norm(f_mat))
        out_l, out_r = f_mat[:b], f_mat[b:]
        if return_details:
            return out_l, out_r, details
        return out_l, out_r
