"""Training loss over disparity sequences and region-split evaluation metrics.

The loss sums a smooth-L1 term on the initial (and optional metric-aligned)
disparity with exponentially weighted L1 terms over the GRU iterates, all
masked means over valid pixels.  Metrics report end-point error and
threshold-exceedance percentages over the full valid region and its
non-occluded / occluded split.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

__all__ = [
    "LossBreakdown",
    "RegionMetrics",
    "MetricReport",
    "stereo_loss",
    "compute_metrics",
]


@dataclass
class LossBreakdown:
    """Scalar loss terms; ``total`` is their sum and carries the autograd graph."""

    initial: torch.Tensor
    iterate_terms: list[torch.Tensor]
    total: torch.Tensor
    gamma: float
    metric: torch.Tensor | None = None

    def as_floats(self) -> dict[str, float]:
        out = {
            "initial": float(self.initial.detach()),
            "total": float(self.total.detach()),
        }
        if self.metric is not None:
            out["metric"] = float(self.metric.detach())
        for i, term in enumerate(self.iterate_terms):
            out[f"iter_{i + 1}"] = float(term.detach())
        return out


def _masked_mean(values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return (values * mask).sum() / mask.sum()


def stereo_loss(
    d0: torch.Tensor,
    d_met: torch.Tensor | None,
    d_seq: list[torch.Tensor],
    d_gt: torch.Tensor,
    valid_mask: torch.Tensor,
    gamma: float = 0.9,
) -> LossBreakdown:
    """Supervises every output of one refinement run against ground truth.

    d0 and d_met use smooth L1 (quadratic inside one pixel); iterate i of N
    uses plain L1 weighted gamma**(N - i), so the final iterate carries full
    weight.  All reductions are means over valid pixels only.
    """
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    if not d_seq:
        raise ValueError("disparity sequence is empty")
    for name, tensor in [("d0", d0), ("d_gt", d_gt)] + [
        (f"d_seq[{i}]", t) for i, t in enumerate(d_seq)
    ]:
        if tensor.shape != valid_mask.shape:
            raise ValueError(
                f"{name} shape {tuple(tensor.shape)} does not match valid_mask "
                f"{tuple(valid_mask.shape)}"
            )
    mask = valid_mask.to(d0.dtype)
    if float(mask.sum()) == 0:
        raise ValueError("valid mask is empty; masked mean undefined")

    initial = _masked_mean(
        F.smooth_l1_loss(d0, d_gt, reduction="none", beta=1.0), mask
    )
    metric = None
    if d_met is not None:
        metric = _masked_mean(
            F.smooth_l1_loss(d_met, d_gt, reduction="none", beta=1.0), mask
        )
    n = len(d_seq)
    iterate_terms = [
        gamma ** (n - i) * _masked_mean((d_i - d_gt).abs(), mask)
        for i, d_i in enumerate(d_seq, start=1)
    ]
    total = initial + sum(iterate_terms)
    if metric is not None:
        total = total + metric
    return LossBreakdown(
        initial=initial,
        iterate_terms=iterate_terms,
        total=total,
        gamma=gamma,
        metric=metric,
    )


@dataclass
class RegionMetrics:
    """Per-region error statistics; thresholds are in pixels."""

    count: int
    epe: float
    dx: dict[float, float] = field(default_factory=dict)


@dataclass
class MetricReport:
    regions: dict[str, RegionMetrics | None]

    def as_dict(self) -> dict:
        out = {}
        for name, region in self.regions.items():
            if region is None:
                out[name] = None
            else:
                out[name] = {
                    "count": region.count,
                    "epe": region.epe,
                    **{f"d{x:g}": v for x, v in region.dx.items()},
                }
        return out


def compute_metrics(
    pred: np.ndarray,
    gt: np.ndarray,
    valid_mask: np.ndarray,
    occlusion_mask: np.ndarray,
    thresholds: tuple[float, ...] = (1.0, 2.0, 3.0),
) -> MetricReport:
    """EPE and Dx over All / Noc / Occ regions; empty regions report absent.

    Predictions are clamped at zero before comparison (small negatives are
    tolerated upstream of evaluation).  Dx is the percentage of region pixels
    whose absolute error exceeds x.
    """
    pred = np.maximum(np.asarray(pred, dtype=np.float64), 0.0)
    gt = np.asarray(gt, dtype=np.float64)
    valid = np.asarray(valid_mask, dtype=bool)
    occluded = np.asarray(occlusion_mask, dtype=bool)
    if pred.shape != gt.shape or pred.shape != valid.shape or pred.shape != occluded.shape:
        raise ValueError(
            f"shape mismatch: pred {pred.shape}, gt {gt.shape}, "
            f"valid {valid.shape}, occlusion {occluded.shape}"
        )
    error = np.abs(pred - gt)
    regions = {
        "all": valid,
        "noc": valid & ~occluded,
        "occ": valid & occluded,
    }
    report: dict[str, RegionMetrics | None] = {}
    for name, region in regions.items():
        count = int(region.sum())
        if count == 0:
            report[name] = None
            continue
        err = error[region]
        report[name] = RegionMetrics(
            count=count,
            epe=float(err.mean()),
            dx={float(x): float(100.0 * (err > x).mean()) for x in thresholds},
        )
    return MetricReport(regions=report)
