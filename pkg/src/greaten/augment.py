"""Photometric specular/transparent augmentation for stereo pairs.

Two families of label-preserving corruptions: feathered elliptical highlights
blended toward white independently per view, and transparent-looking patches
where both views get the same donor content at disparity-consistent
locations. Ground-truth maps are never touched.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from greaten.synthdata.scene import StereoSample, TextureSpec, _texture_color

_MAX_ATTEMPTS = 12
_GRAY = 0.5


@dataclass
class StaConfig:
    p_specular: float = 0.5
    p_transparent: float = 0.5
    n_ellipses: tuple[int, int] = (1, 3)
    axis_range: tuple[float, float] = (8.0, 40.0)  # pixel semi-axes
    strength_range: tuple[float, float] = (0.5, 1.0)  # white blend weight
    blur_sigma: tuple[float, float] = (1.0, 4.0)
    patch_size: tuple[int, int] = (24, 64)  # transparent rect edge, pixels
    shift_jitter: int = 2
    p_gray: float = 0.25
    alpha_range: tuple[float, float] = (0.35, 0.75)
    seed: int = 0


@dataclass
class SpecularRegion:
    view: str
    center: tuple[float, float]
    axes: tuple[float, float]
    angle: float
    strength: float
    sigma: float


@dataclass
class TransparentRegion:
    left_rect: tuple[int, int, int, int]  # x0, y0, w, h
    right_rect: tuple[int, int, int, int]
    median_disparity: float
    offset: int  # round(median_disparity)
    jitter: int
    gray_fill: bool
    alpha: float | None


@dataclass
class AugmentationRecord:
    specular: list[SpecularRegion] = field(default_factory=list)
    transparent: list[TransparentRegion] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


def _ellipse_indicator(h, w, center, axes, angle):
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    dx = xs - center[0]
    dy = ys - center[1]
    c, s = np.cos(angle), np.sin(angle)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return ((u / axes[0]) ** 2 + (v / axes[1]) ** 2 <= 1.0).astype(np.float64)


def specular_augment(image, rng, config: StaConfig, view: str = "left"):
    """Blend feathered elliptical highlights toward white; returns regions."""
    h, w = image.shape[:2]
    out = image.astype(np.float32).copy()
    regions = []
    n = int(rng.integers(config.n_ellipses[0], config.n_ellipses[1] + 1))
    for _ in range(n):
        center = (rng.uniform(0, w - 1), rng.uniform(0, h - 1))
        axes = tuple(rng.uniform(*config.axis_range, size=2))
        angle = rng.uniform(0.0, np.pi)
        strength = rng.uniform(*config.strength_range)
        sigma = rng.uniform(*config.blur_sigma)
        mask = _ellipse_indicator(h, w, center, axes, angle)
        if sigma > 1e-9:
            mask = gaussian_filter(mask, sigma, mode="constant")
        wm = (strength * mask).astype(np.float32)[..., None]
        # out + wm*(1 - out) never dips below out, keeping the blend monotone
        out = out + wm * (1.0 - out)
        regions.append(
            SpecularRegion(view, center, axes, float(angle), float(strength), float(sigma))
        )
    return out, regions


def transparent_augment(left, right, disparity_gt, donor_image, rng, config: StaConfig):
    """Overlay one disparity-consistent fake-transparency patch on both views.

    The right-view rectangle sits at the left one shifted by
    -round(median disparity) plus an integer jitter; content is either a flat
    mid-gray or an alpha blend with the same donor crop in both views. Returns
    ``(left, right, region)`` with ``region=None`` when no in-bounds placement
    was found.
    """
    h, w = left.shape[:2]
    left = left.astype(np.float32).copy()
    right = right.astype(np.float32).copy()
    lo, hi = config.patch_size
    for _ in range(_MAX_ATTEMPTS):
        pw = int(rng.integers(lo, hi + 1))
        ph = int(rng.integers(lo, hi + 1))
        if pw >= w or ph >= h:
            continue
        x0 = int(rng.integers(0, w - pw + 1))
        y0 = int(rng.integers(0, h - ph + 1))
        d_med = float(np.median(disparity_gt[y0 : y0 + ph, x0 : x0 + pw]))
        offset = int(np.rint(d_med))
        jitter = int(rng.integers(-config.shift_jitter, config.shift_jitter + 1))
        rx0 = x0 - offset + jitter
        if rx0 < 0 or rx0 + pw > w:
            continue
        gray = bool(rng.random() < config.p_gray)
        if gray:
            alpha = None
            left[y0 : y0 + ph, x0 : x0 + pw] = _GRAY
            right[y0 : y0 + ph, rx0 : rx0 + pw] = _GRAY
        else:
            alpha = float(rng.uniform(*config.alpha_range))
            dh, dw = donor_image.shape[:2]
            if dw < pw or dh < ph:
                continue
            dx0 = int(rng.integers(0, dw - pw + 1))
            dy0 = int(rng.integers(0, dh - ph + 1))
            patch = donor_image[dy0 : dy0 + ph, dx0 : dx0 + pw].astype(np.float32)
            for img, cx0 in ((left, x0), (right, rx0)):
                region = img[y0 : y0 + ph, cx0 : cx0 + pw]
                img[y0 : y0 + ph, cx0 : cx0 + pw] = (1.0 - alpha) * region + alpha * patch
        return (
            left,
            right,
            TransparentRegion(
                left_rect=(x0, y0, pw, ph),
                right_rect=(rx0, y0, pw, ph),
                median_disparity=d_med,
                offset=offset,
                jitter=jitter,
                gray_fill=gray,
                alpha=alpha,
            ),
        )
    return left, right, None


def _procedural_donor(h, w, rng):
    spec = TextureSpec(
        family=("stripes", "noise", "checker")[int(rng.integers(3))],
        base=tuple(rng.uniform(0.25, 0.75, size=3)),
        amp=tuple(rng.uniform(-0.25, 0.25, size=3)),
        wavelength=float(rng.uniform(10.0, 40.0)),
        angle=float(rng.uniform(0.0, np.pi)),
        phase=float(rng.uniform(0.0, 2.0 * np.pi)),
        cell_seed=int(rng.integers(1 << 30)),
    )
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return np.clip(_texture_color(spec, xs, ys), 0.0, 1.0).astype(np.float32)


def apply_sta(sample: StereoSample, rng, config: StaConfig, donor_image=None):
    """Apply the configured augmentations to one sample.

    Ground-truth disparity, masks and normals are passed through untouched.
    Returns the augmented sample and a record of what was applied.
    """
    left = sample.left_image
    right = sample.right_image
    record = AugmentationRecord()
    if rng.random() < config.p_specular:
        left, regions_l = specular_augment(left, rng, config, view="left")
        right, regions_r = specular_augment(right, rng, config, view="right")
        record.specular.extend(regions_l + regions_r)
    if rng.random() < config.p_transparent:
        donor = donor_image
        if donor is None:
            donor = _procedural_donor(left.shape[0], left.shape[1], rng)
        left, right, region = transparent_augment(
            left, right, sample.disparity_gt, donor, rng, config
        )
        if region is not None:
            record.transparent.append(region)
    augmented = StereoSample(
        left_image=np.ascontiguousarray(left),
        right_image=np.ascontiguousarray(right),
        disparity_gt=sample.disparity_gt,
        valid_mask=sample.valid_mask,
        occlusion_mask=sample.occlusion_mask,
        left_normals=sample.left_normals,
        right_normals=sample.right_normals,
        meta=dict(sample.meta),
    )
    return augmented, record
