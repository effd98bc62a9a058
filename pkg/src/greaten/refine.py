"""Iterative disparity refinement.

A ConvGRU repeatedly updates a coarse disparity field using local cost-volume
lookups and a static context embedding of the fused left features.  Each
iterate is lifted to full resolution by convex-combination upsampling whose
weights depend only on the context and the current disparity, so a zeroed
update head yields a perfectly constant output sequence.  A learnable
scale-shift block aligns an affine-ambiguous relative depth prior to the
metric disparity scale, and a stub generator produces such priors from ground
truth for training without an external monocular network.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.ndimage
import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "RefinerState",
    "DisparitySequence",
    "lookup_cost",
    "ScaleShift",
    "ConvGRUCell",
    "ConvexUpsampler",
    "DisparityRefiner",
    "stub_relative_depth",
]


@dataclass
class RefinerState:
    """Carried across GRU iterations; hidden stays in (-1, 1)."""

    hidden: torch.Tensor
    context: torch.Tensor
    disparity: torch.Tensor


@dataclass
class DisparitySequence:
    """Full-resolution outputs of one refinement run.

    ``initial`` is the upsampled soft-argmax disparity, ``metric`` the
    upsampled scale-shift-aligned prior when that path is active, and
    ``iterates`` holds one upsampled map per GRU step.
    """

    initial: torch.Tensor
    iterates: list[torch.Tensor] = field(default_factory=list)
    metric: torch.Tensor | None = None

    @property
    def final(self) -> torch.Tensor:
        return self.iterates[-1]


def lookup_cost(
    volume: torch.Tensor, disparity: torch.Tensor, radius: int
) -> torch.Tensor:
    """Samples the volume at candidates {d - r, ..., d + r} per pixel.

    Values are linearly interpolated along the disparity axis; candidates
    falling outside [0, D - 1] contribute zeros.  Output channels are
    offset-major: block o (of n_groups channels) holds candidate d - r + o.
    Integer candidates reproduce direct indexing bit for bit.
    """
    if volume.dim() != 5:
        raise ValueError(f"expected a (B, G, D, h, w) volume, got {tuple(volume.shape)}")
    b, n_groups, n_d, h, w = volume.shape
    if disparity.shape != (b, 1, h, w):
        raise ValueError(
            f"disparity {tuple(disparity.shape)} does not match volume {tuple(volume.shape)}"
        )
    if radius < 0:
        raise ValueError(f"radius must be non-negative, got {radius}")
    if not torch.isfinite(disparity).all():
        raise ValueError("disparity contains non-finite values")

    offsets = torch.arange(
        -radius, radius + 1, device=disparity.device, dtype=disparity.dtype
    )
    cand = disparity + offsets.view(1, -1, 1, 1)  # (B, 2r+1, h, w)
    in_range = (cand >= 0) & (cand <= n_d - 1)
    lo_f = cand.floor()
    frac = cand - lo_f
    lo = lo_f.clamp(0, n_d - 1).long()
    hi = (lo + 1).clamp(max=n_d - 1)

    def take(idx):
        expanded = idx[:, None].expand(b, n_groups, idx.shape[1], h, w)
        return volume.gather(2, expanded)

    value = (1.0 - frac)[:, None] * take(lo) + frac[:, None] * take(hi)
    value = value * in_range[:, None].to(value.dtype)
    return value.permute(0, 2, 1, 3, 4).reshape(b, -1, h, w)


class ScaleShift(nn.Module):
    """Per-pixel affine alignment of a relative prior: d_met = a * d_rel + b.

    A small conv block over the stacked initial disparity and prior predicts
    the (a, b) maps.  The final layer starts at zero weights with bias
    (1, 0), so an untrained block passes the prior through unchanged.  With
    ``collapse_to_global`` the maps are replaced by their spatial means,
    giving a single scale and shift per sample.
    """

    def __init__(self, hidden_channels: int = 32, collapse_to_global: bool = False):
        super().__init__()
        self.collapse_to_global = collapse_to_global
        self.pre = nn.Conv2d(2, hidden_channels, 3, padding=1)
        self.head = nn.Conv2d(hidden_channels, 2, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        with torch.no_grad():
            self.head.bias.copy_(torch.tensor([1.0, 0.0]))

    def forward(
        self, d0: torch.Tensor, d_rel: torch.Tensor, return_params: bool = False
    ):
        if d0.shape != d_rel.shape or d0.dim() != 4 or d0.shape[1] != 1:
            raise ValueError(
                f"expected matching (B, 1, h, w) maps, got {tuple(d0.shape)} "
                f"and {tuple(d_rel.shape)}"
            )
        params = self.head(torch.tanh(self.pre(torch.cat([d0, d_rel], dim=1))))
        scale = params[:, 0:1]
        shift = params[:, 1:2]
        if self.collapse_to_global:
            scale = scale.mean(dim=(2, 3), keepdim=True)
            shift = shift.mean(dim=(2, 3), keepdim=True)
        d_met = scale * d_rel + shift
        if return_params:
            return d_met, scale, shift
        return d_met


class ConvGRUCell(nn.Module):
    """Convolutional GRU: h' = (1 - z) * h + z * tanh-candidate."""

    def __init__(self, hidden_channels: int, input_channels: int):
        super().__init__()
        both = hidden_channels + input_channels
        self.update_gate = nn.Conv2d(both, hidden_channels, 3, padding=1)
        self.reset_gate = nn.Conv2d(both, hidden_channels, 3, padding=1)
        self.candidate = nn.Conv2d(both, hidden_channels, 3, padding=1)

    def forward(self, hidden: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        hx = torch.cat([hidden, x], dim=1)
        z = torch.sigmoid(self.update_gate(hx))
        r = torch.sigmoid(self.reset_gate(hx))
        h_tilde = torch.tanh(self.candidate(torch.cat([r * hidden, x], dim=1)))
        return (1.0 - z) * hidden + z * h_tilde


class ConvexUpsampler(nn.Module):
    """Lifts a stride-4 disparity to full resolution by convex combination.

    For each fine pixel a softmax over the 3x3 coarse neighborhood (replicate
    padded) mixes disparities already multiplied by the resolution ratio 4,
    so every output lies within 4x the local coarse extrema.
    """

    def __init__(self, guide_channels: int, hidden_channels: int = 64):
        super().__init__()
        self.weight_head = nn.Sequential(
            nn.Conv2d(guide_channels, hidden_channels, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden_channels, 9 * 16, 1),
        )

    def forward(self, d: torch.Tensor, guide: torch.Tensor) -> torch.Tensor:
        if d.dim() != 4 or d.shape[1] != 1 or d.shape[-2:] != guide.shape[-2:]:
            raise ValueError(
                f"expected (B, 1, h, w) disparity matching guide, got "
                f"{tuple(d.shape)} and {tuple(guide.shape)}"
            )
        b, _, h, w = d.shape
        logits = self.weight_head(guide).view(b, 9, 16, h, w)
        weights = torch.softmax(logits, dim=1)
        padded = F.pad(4.0 * d, (1, 1, 1, 1), mode="replicate")
        neighbors = F.unfold(padded, 3).view(b, 9, h, w)
        fine = (weights * neighbors[:, :, None]).sum(dim=1)  # (B, 16, h, w)
        fine = fine.view(b, 4, 4, h, w).permute(0, 3, 1, 4, 2)
        return fine.reshape(b, 1, 4 * h, 4 * w)


class DisparityRefiner(nn.Module):
    """Runs the lookup -> GRU -> upsample loop over a refined cost volume.

    The context embedding is computed once from the fused left features and
    held fixed; the upsampling weights see only context plus the current
    disparity, never the evolving hidden state, which keeps the output
    sequence exactly constant when the update head produces zeros.  The
    update head's final layer is zero-initialized so training starts from
    the initial disparity rather than noise.
    """

    def __init__(
        self,
        fuse_channels: int,
        n_groups: int = 8,
        hidden_channels: int = 96,
        context_channels: int = 96,
        motion_channels: int = 64,
        lookup_radius: int = 4,
    ):
        super().__init__()
        self.lookup_radius = lookup_radius
        cost_channels = (2 * lookup_radius + 1) * n_groups
        self.hidden_head = nn.Conv2d(fuse_channels, hidden_channels, 3, padding=1)
        self.context_head = nn.Conv2d(fuse_channels, context_channels, 3, padding=1)
        self.motion_encoder = nn.Sequential(
            nn.Conv2d(cost_channels + 1, motion_channels, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(motion_channels, motion_channels, 3, padding=1),
            nn.ReLU(inplace=True),
        )
        self.gru = ConvGRUCell(hidden_channels, motion_channels + context_channels)
        self.delta_head = nn.Sequential(
            nn.Conv2d(hidden_channels, hidden_channels, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden_channels, 1, 3, padding=1),
        )
        nn.init.zeros_(self.delta_head[-1].weight)
        nn.init.zeros_(self.delta_head[-1].bias)
        self.upsampler = ConvexUpsampler(context_channels + 1)

    def init_state(self, f_fuse_l: torch.Tensor, d_init: torch.Tensor) -> RefinerState:
        hidden = torch.tanh(self.hidden_head(f_fuse_l))
        context = torch.relu(self.context_head(f_fuse_l))
        return RefinerState(hidden=hidden, context=context, disparity=d_init)

    def gru_step(
        self, state: RefinerState, cost_features: torch.Tensor
    ) -> tuple[RefinerState, torch.Tensor]:
        motion = self.motion_encoder(
            torch.cat([cost_features, state.disparity], dim=1)
        )
        hidden = self.gru(state.hidden, torch.cat([motion, state.context], dim=1))
        delta = self.delta_head(hidden)
        new_state = RefinerState(
            hidden=hidden, context=state.context, disparity=state.disparity + delta
        )
        return new_state, delta

    def upsample(self, d: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        return self.upsampler(d, torch.cat([context, d], dim=1))

    def forward(
        self,
        volume: torch.Tensor,
        d0: torch.Tensor,
        f_fuse_l: torch.Tensor,
        n_iters: int,
        d_met: torch.Tensor | None = None,
    ) -> DisparitySequence:
        if n_iters < 1:
            raise ValueError(f"n_iters must be at least 1, got {n_iters}")
        d_init = d_met if d_met is not None else d0
        state = self.init_state(f_fuse_l, d_init)
        sequence = DisparitySequence(initial=self.upsample(d0, state.context))
        if d_met is not None:
            sequence.metric = self.upsample(d_met, state.context)
        for _ in range(n_iters):
            cost = lookup_cost(volume, state.disparity, self.lookup_radius)
            state, _ = self.gru_step(state, cost)
            sequence.iterates.append(self.upsample(state.disparity, state.context))
        return sequence


def stub_relative_depth(
    sample,
    rng: np.random.Generator,
    a_range: tuple[float, float] = (0.5, 2.0),
    b_range: tuple[float, float] = (-2.0, 2.0),
    eps: float = 0.1,
) -> np.ndarray:
    """Builds an affine-distorted stand-in for a monocular relative prior.

    d_rel = a * disparity_gt + b plus smooth low-frequency noise whose
    standard deviation is eps times that of the ground truth, so the prior
    stays strongly rank-correlated with true disparity while carrying an
    unknown scale and shift.
    """
    disparity = np.asarray(sample.disparity_gt, dtype=np.float64)
    a = float(rng.uniform(*a_range))
    b = float(rng.uniform(*b_range))
    d_rel = a * disparity + b
    if eps > 0.0:
        h, w = disparity.shape
        coarse = rng.standard_normal((max(2, h // 16), max(2, w // 16)))
        noise = scipy.ndimage.zoom(
            coarse, (h / coarse.shape[0], w / coarse.shape[1]), order=3
        )
        noise_std = float(noise.std())
        if noise_std > 0:
            noise = noise / noise_std
        d_rel = d_rel + eps * float(disparity.std()) * noise
    return d_rel.astype(np.float32)
