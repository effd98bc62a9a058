"""Full network assembly, training step, and checkpoint persistence.

Three variants share one wiring: ``sparse_only`` drops the normal encoder,
gated fusion, and the dual attention's normal branch entirely (its outputs
cannot depend on normal inputs); ``greaten`` runs the full
normal-guided pipeline; ``greaten_prior`` additionally aligns a relative
depth prior through the learnable scale-shift block and initializes the
refinement loop from the aligned prior.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import EncoderConfig, ImageEncoder, NormalEncoder
from .gcgf import GatedFusion
from .loss_metrics import LossBreakdown, stereo_loss
from .refine import DisparityRefiner, DisparitySequence, ScaleShift
from .sparse_attn import SparseDualMatchingAttention, SparseSpatialAttention
from .volume import CombinedCostVolume, DisparityRegression, SimpleVolumeAttention

__all__ = [
    "ModelConfig",
    "GreatenModel",
    "build_model",
    "samples_to_batch",
    "train_step",
    "make_optimizer",
    "clip_gradients",
    "save_checkpoint",
    "load_checkpoint",
    "config_hash",
]

VARIANTS = ("sparse_only", "greaten", "greaten_prior")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and training hyperparameters for one model build."""

    variant: str = "greaten"
    channel_plan: tuple[int, int, int, int] = (48, 64, 96, 128)
    blocks_per_stage: int = 2
    n_groups: int = 8
    sample_points: int = 8
    max_disparity: int = 64
    train_iters: int = 6
    infer_iters: int = 12
    hidden_channels: int = 96
    context_channels: int = 96
    motion_channels: int = 64
    lookup_radius: int = 4
    mask_hidden_channels: int = 64
    mask_depth: int = 3
    scale_shift_hidden: int = 32
    scale_shift_global: bool = False
    sta: bool = False
    seed: int = 0
    gamma: float = 0.9
    lr_max: float = 2e-4
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.max_disparity <= 0 or self.max_disparity % 4:
            raise ValueError(
                f"max_disparity must be a positive multiple of 4, got {self.max_disparity}"
            )
        if self.channel_plan[0] % self.n_groups:
            raise ValueError(
                f"stride-4 channels ({self.channel_plan[0]}) must be divisible by "
                f"n_groups ({self.n_groups})"
            )
        if self.train_iters < 1 or self.infer_iters < 1:
            raise ValueError("iteration counts must be at least 1")

    @property
    def n_candidates(self) -> int:
        """Disparity candidates at quarter resolution."""
        return self.max_disparity // 4


def config_hash(config: ModelConfig) -> str:
    payload = json.dumps(dataclasses.asdict(config), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


class GreatenModel(nn.Module):
    """Encode -> (gated fusion) -> dual matching attention -> cost volume ->
    volume gating -> soft-argmax -> (scale-shift) -> GRU refinement."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.uses_normals = config.variant in ("greaten", "greaten_prior")
        self.uses_prior = config.variant == "greaten_prior"
        enc_cfg = EncoderConfig(
            channel_plan=config.channel_plan, blocks_per_stage=config.blocks_per_stage
        )
        c4 = config.channel_plan[0]
        self.image_encoder = ImageEncoder(enc_cfg)
        if self.uses_normals:
            self.normal_encoder = NormalEncoder(enc_cfg)
            self.fusion = GatedFusion(
                enc_cfg,
                mask_hidden_channels=config.mask_hidden_channels,
                mask_depth=config.mask_depth,
            )
        self.sdma = SparseDualMatchingAttention(
            c4, k=config.sample_points, use_normal_branch=self.uses_normals
        )
        self.ssa = SparseSpatialAttention(c4, k=config.sample_points)
        self.volume = CombinedCostVolume(c4, config.n_groups)
        self.sva = SimpleVolumeAttention(config.n_groups, c4)
        self.regression = DisparityRegression(config.n_groups)
        if self.uses_prior:
            self.scale_shift = ScaleShift(
                hidden_channels=config.scale_shift_hidden,
                collapse_to_global=config.scale_shift_global,
            )
        self.refiner = DisparityRefiner(
            fuse_channels=c4,
            n_groups=config.n_groups,
            hidden_channels=config.hidden_channels,
            context_channels=config.context_channels,
            motion_channels=config.motion_channels,
            lookup_radius=config.lookup_radius,
        )

    def forward(
        self,
        left: torch.Tensor,
        right: torch.Tensor,
        normals_left: torch.Tensor | None = None,
        normals_right: torch.Tensor | None = None,
        d_rel: torch.Tensor | None = None,
        n_iters: int | None = None,
        mask_override: torch.Tensor | None = None,
        return_diagnostics: bool = False,
    ):
        if n_iters is None:
            n_iters = (
                self.config.train_iters if self.training else self.config.infer_iters
            )
        if left.shape != right.shape:
            raise ValueError(
                f"stereo views must match, got {tuple(left.shape)} and {tuple(right.shape)}"
            )
        f_img_l = self.image_encoder(left)
        f_img_r = self.image_encoder(right)
        diagnostics: dict = {}
        if self.uses_normals:
            if normals_left is None or normals_right is None:
                raise ValueError(
                    f"variant {self.config.variant!r} requires surface normal inputs"
                )
            f_n_l = self.normal_encoder(normals_left)
            f_n_r = self.normal_encoder(normals_right)
            fuse_l, filt_l, masks = self.fusion(
                f_img_l, f_n_l, left, normals_left, mask_override=mask_override
            )
            fuse_r, filt_r, _ = self.fusion(
                f_img_r, f_n_r, right, normals_right, mask_override=mask_override
            )
            f_fuse_l, f_fuse_r = fuse_l[4], fuse_r[4]
            mat_l, mat_r, attention = self.sdma(
                f_fuse_l,
                f_fuse_r,
                filt_l,
                filt_r,
                f_n_l[4],
                f_n_r[4],
                return_details=True,
            )
            diagnostics["masks"] = masks
        else:
            f_fuse_l, f_fuse_r = f_img_l[4], f_img_r[4]
            mat_l, mat_r, attention = self.sdma(
                f_fuse_l, f_fuse_r, f_img_l[4], f_img_r[4], return_details=True
            )
        f_spatial = self.ssa(f_fuse_l)
        volume = self.volume(mat_l, mat_r, self.config.n_candidates)
        refined = self.sva(volume, f_spatial)
        d0 = self.regression(refined)
        d_met = None
        if self.uses_prior:
            if d_rel is None:
                raise ValueError("variant 'greaten_prior' requires a relative prior map")
            if d_rel.shape[-2:] != left.shape[-2:]:
                raise ValueError(
                    f"prior {tuple(d_rel.shape)} does not match image {tuple(left.shape)}"
                )
            # Full-resolution pixels to quarter-resolution disparity units.
            d_rel_q = F.avg_pool2d(d_rel, 4) / 4.0
            d_met = self.scale_shift(d0, d_rel_q)
        sequence = self.refiner(refined, d0, f_fuse_l, n_iters, d_met=d_met)
        if return_diagnostics:
            diagnostics.update({"d0": d0, "d_met": d_met, "attention": attention})
            return sequence, diagnostics
        return sequence


def build_model(config: ModelConfig) -> GreatenModel:
    """Constructs a model with parameter init driven by config.seed."""
    torch.manual_seed(config.seed)
    return GreatenModel(config)


def samples_to_batch(samples, priors=None) -> dict[str, torch.Tensor]:
    """Stacks StereoSamples (and optional relative priors) into model tensors."""

    def stack_images(arrays):
        return torch.stack(
            [torch.from_numpy(np.ascontiguousarray(a)).permute(2, 0, 1) for a in arrays]
        )

    batch = {
        "left": stack_images([s.left_image for s in samples]),
        "right": stack_images([s.right_image for s in samples]),
        "normals_left": stack_images([s.left_normals for s in samples]),
        "normals_right": stack_images([s.right_normals for s in samples]),
        "disparity_gt": torch.stack(
            [torch.from_numpy(s.disparity_gt)[None] for s in samples]
        ),
        "valid_mask": torch.stack(
            [torch.from_numpy(s.valid_mask.astype(np.float32))[None] for s in samples]
        ),
        "occlusion_mask": torch.stack(
            [torch.from_numpy(s.occlusion_mask.astype(np.float32))[None] for s in samples]
        ),
    }
    if priors is not None:
        batch["d_rel"] = torch.stack(
            [torch.from_numpy(np.asarray(p, dtype=np.float32))[None] for p in priors]
        )
    return batch


def make_optimizer(
    model: nn.Module, config: ModelConfig, total_steps: int
) -> tuple[torch.optim.Optimizer, torch.optim.lr_scheduler.LRScheduler]:
    optimizer = torch.optim.AdamW(
        model.parameters(),
        lr=config.lr_max,
        betas=(config.beta1, config.beta2),
        weight_decay=config.weight_decay,
    )
    scheduler = torch.optim.lr_scheduler.OneCycleLR(
        optimizer, max_lr=config.lr_max, total_steps=max(total_steps, 1)
    )
    return optimizer, scheduler


def clip_gradients(parameters) -> None:
    """Elementwise gradient clip to [-1, 1]."""
    torch.nn.utils.clip_grad_value_(parameters, 1.0)


def _first_nonfinite_term(breakdown: LossBreakdown) -> str | None:
    if not torch.isfinite(breakdown.initial):
        return "initial"
    if breakdown.metric is not None and not torch.isfinite(breakdown.metric):
        return "metric"
    for i, term in enumerate(breakdown.iterate_terms, start=1):
        if not torch.isfinite(term):
            return f"iterate_{i}"
    if not torch.isfinite(breakdown.total):
        return "total"
    return None


def train_step(
    model: GreatenModel,
    batch: dict[str, torch.Tensor],
    optimizer: torch.optim.Optimizer,
    scheduler=None,
) -> LossBreakdown:
    """One forward/backward/clip/update pass; aborts on non-finite loss."""
    config = model.config
    model.train()
    sequence = model(
        batch["left"],
        batch["right"],
        normals_left=batch.get("normals_left"),
        normals_right=batch.get("normals_right"),
        d_rel=batch.get("d_rel"),
        n_iters=config.train_iters,
    )
    breakdown = stereo_loss(
        sequence.initial,
        sequence.metric,
        sequence.iterates,
        batch["disparity_gt"],
        batch["valid_mask"],
        gamma=config.gamma,
    )
    bad = _first_nonfinite_term(breakdown)
    if bad is not None:
        raise RuntimeError(f"aborting step: loss term {bad!r} is non-finite")
    optimizer.zero_grad(set_to_none=True)
    breakdown.total.backward()
    clip_gradients(model.parameters())
    optimizer.step()
    if scheduler is not None:
        scheduler.step()
    return breakdown


def save_checkpoint(
    directory: str | Path, model: GreatenModel, step: int
) -> Path:
    """Writes manifest.json plus one little-endian float32 blob per parameter."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    parameters = {}
    for name, param in model.named_parameters():
        blob = param.detach().cpu().to(torch.float32).numpy().astype("<f4")
        filename = name + ".bin"
        (directory / filename).write_bytes(blob.tobytes())
        parameters[name] = {"shape": list(param.shape), "file": filename}
    manifest = {
        "schema_version": 1,
        "config_hash": config_hash(model.config),
        "step": step,
        "parameters": parameters,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_checkpoint(directory: str | Path, model: GreatenModel) -> int:
    """Restores parameters, verifying every shape against the manifest."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json in {directory}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("schema_version") != 1:
        raise ValueError(f"unsupported checkpoint schema {manifest.get('schema_version')}")
    stored = manifest["parameters"]
    with torch.no_grad():
        for name, param in model.named_parameters():
            if name not in stored:
                raise ValueError(f"checkpoint is missing parameter {name!r}")
            meta = stored[name]
            if list(param.shape) != meta["shape"]:
                raise ValueError(
                    f"shape mismatch for {name!r}: checkpoint {meta['shape']}, "
                    f"model {list(param.shape)}"
                )
            raw = (directory / meta["file"]).read_bytes()
            values = np.frombuffer(raw, dtype="<f4").reshape(meta["shape"]).copy()
            param.copy_(torch.from_numpy(values).to(param.dtype))
    return int(manifest["step"])
