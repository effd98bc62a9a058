"""Procedural rectified-stereo scene rendering on the CPU.

Scenes are built from a fronto-parallel background plane plus a handful of
textured primitives (bounded planes, ellipsoid caps). Both views are ray-cast
analytically, so ground-truth disparity, per-view normals and the z-buffer
occlusion mask are exact rather than estimated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

GENERATOR_VERSION = "1"

# Textures are band-limited so that a bilinear lookup of the right view at
# x - d reproduces the left view to well under 8-bit quantization.
_MIN_WAVELENGTH_PX = 26.0
_CHECKER_MIN_WAVELENGTH_PX = 44.0
_MAX_AMPLITUDE = 0.24
_DISPARITY_HEADROOM = 0.95


@dataclass
class TextureSpec:
    family: str  # "stripes" | "noise" | "checker"
    base: tuple[float, float, float]
    amp: tuple[float, float, float]  # signed per-channel amplitude of the pattern
    wavelength: float  # world units
    angle: float = 0.0
    phase: float = 0.0
    cell_seed: int = 0


@dataclass
class PlaneSpec:
    center: tuple[float, float]  # pixel coords in the left view
    disparity: float  # at the center point
    extent: tuple[float, float]  # half extent in pixels at the center depth
    slope: tuple[float, float] = (0.0, 0.0)  # dz/dX, dz/dY in world units
    texture: TextureSpec | None = None


@dataclass
class EllipsoidSpec:
    center: tuple[float, float]  # pixel coords of the front pole, left view
    disparity: float  # at the front pole
    radius: tuple[float, float]  # pixel semi-axes at the pole depth
    depth_ratio: float = 0.35  # depth semi-axis relative to the smaller lateral one
    rim: float = 0.78  # lateral cutoff; keeps surface slope bounded
    texture: TextureSpec | None = None


@dataclass
class SceneConfig:
    height: int = 192
    width: int = 288
    max_disparity: int = 64
    n_planes: int = 2
    n_ellipsoids: int = 1
    texture_families: tuple[str, ...] = ("stripes", "noise", "checker")
    focal: float = 320.0
    baseline: float = 0.5
    seed: int = 0
    background_disparity: float | None = None
    primitives: list | None = None  # explicit PlaneSpec/EllipsoidSpec list


@dataclass
class StereoSample:
    left_image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    right_image: np.ndarray
    disparity_gt: np.ndarray  # (H, W) float32, left view, >= 0
    valid_mask: np.ndarray  # (H, W) bool
    occlusion_mask: np.ndarray  # (H, W) bool, subset of valid
    left_normals: np.ndarray  # (H, W, 3) float32, unit, n_z > 0
    right_normals: np.ndarray
    meta: dict = field(default_factory=dict)


@dataclass
class RenderResult:
    sample: StereoSample
    disparity_right: np.ndarray
    depth_left: np.ndarray
    depth_right: np.ndarray
    prim_id_left: np.ndarray  # int32, 0 = background
    prim_id_right: np.ndarray


def _validate_config(config: SceneConfig) -> None:
    if config.height % 32 or config.width % 32:
        raise ValueError(
            f"image size {config.height}x{config.width} must be divisible by 32"
        )
    if config.max_disparity % 4:
        raise ValueError(f"max_disparity {config.max_disparity} must be divisible by 4")
    if config.max_disparity >= config.width / 2:
        raise ValueError(
            f"max_disparity {config.max_disparity} too large for width {config.width}"
        )
    if config.focal <= 0 or config.baseline <= 0:
        raise ValueError("focal and baseline must be positive")


def _texture_lattice(iu, iv, seed):
    # integer lattice hash to U(-1, 1), stable across calls
    h = (iu * 374761393 + iv * 668265263 + np.int64(seed) * 974634599) & 0x7FFFFFFF
    h = ((h ^ (h >> 13)) * 1274126177) & 0x7FFFFFFF
    return (h % 65536) / 32767.5 - 1.0


def _value_noise(u, v, wavelength, seed):
    gu = u / wavelength
    gv = v / wavelength
    iu = np.floor(gu).astype(np.int64)
    iv = np.floor(gv).astype(np.int64)
    wu = 0.5 - 0.5 * np.cos(np.pi * (gu - iu))
    wv = 0.5 - 0.5 * np.cos(np.pi * (gv - iv))
    n00 = _texture_lattice(iu, iv, seed)
    n10 = _texture_lattice(iu + 1, iv, seed)
    n01 = _texture_lattice(iu, iv + 1, seed)
    n11 = _texture_lattice(iu + 1, iv + 1, seed)
    top = n00 + (n10 - n00) * wu
    bot = n01 + (n11 - n01) * wu
    return top + (bot - top) * wv


def _texture_pattern(spec: TextureSpec, u, v):
    # scalar pattern in [-1, 1] as a function of world coordinates
    c, s = math.cos(spec.angle), math.sin(spec.angle)
    ur = u * c + v * s
    vr = -u * s + v * c
    if spec.family == "stripes":
        return np.sin(2.0 * np.pi * ur / spec.wavelength + spec.phase)
    if spec.family == "checker":
        a = np.tanh(1.5 * np.sin(2.0 * np.pi * ur / spec.wavelength + spec.phase))
        b = np.tanh(1.5 * np.sin(2.0 * np.pi * vr / spec.wavelength))
        return a * b
    if spec.family == "noise":
        return _value_noise(ur, vr, spec.wavelength, spec.cell_seed)
    raise ValueError(f"unknown texture family {spec.family!r}")


def _texture_color(spec: TextureSpec, u, v):
    pattern = _texture_pattern(spec, u, v)
    base = np.asarray(spec.base, dtype=np.float64)
    amp = np.asarray(spec.amp, dtype=np.float64)
    return base[None, None, :] + pattern[..., None] * amp[None, None, :]


class _Plane:
    """World-space bounded plane z = k + gx*X + gy*Y, graph over (X, Y)."""

    def __init__(self, spec: PlaneSpec, config: SceneConfig):
        f, cx, cy = config.focal, (config.width - 1) / 2, (config.height - 1) / 2
        z0 = config.focal * config.baseline / spec.disparity
        self.x0 = (spec.center[0] - cx) * z0 / f
        self.y0 = (spec.center[1] - cy) * z0 / f
        self.gx, self.gy = spec.slope
        self.k = z0 - self.gx * self.x0 - self.gy * self.y0
        self.sx = spec.extent[0] * z0 / f
        self.sy = spec.extent[1] * z0 / f
        self.texture = spec.texture

    def intersect(self, dx, dy, ox):
        den = 1.0 - self.gx * dx - self.gy * dy
        with np.errstate(divide="ignore", invalid="ignore"):
            z = (self.k + self.gx * ox) / den
        x = ox + z * dx
        y = z * dy
        hit = (
            (den > 1e-6)
            & (z > 1e-6)
            & (np.abs(x - self.x0) <= self.sx)
            & (np.abs(y - self.y0) <= self.sy)
        )
        return z, hit

    def normals(self, x, y, z):
        n = np.empty(x.shape + (3,), dtype=np.float64)
        norm = math.sqrt(self.gx**2 + self.gy**2 + 1.0)
        n[..., 0] = self.gx / norm
        n[..., 1] = self.gy / norm
        n[..., 2] = 1.0 / norm
        return n

    def color(self, x, y, z):
        return _texture_color(self.texture, x - self.x0, y - self.y0)


class _Ellipsoid:
    """Front cap of an axis-aligned ellipsoid, clipped before the silhouette."""

    def __init__(self, spec: EllipsoidSpec, config: SceneConfig):
        f, cx, cy = config.focal, (config.width - 1) / 2, (config.height - 1) / 2
        zf = config.focal * config.baseline / spec.disparity  # front pole depth
        self.a = spec.radius[0] * zf / f
        self.b = spec.radius[1] * zf / f
        self.c = spec.depth_ratio * min(self.a, self.b)
        self.zc = zf + self.c  # center depth
        self.xc = (spec.center[0] - cx) * zf / f
        self.yc = (spec.center[1] - cy) * zf / f
        self.rim = spec.rim
        self.texture = spec.texture

    def intersect(self, dx, dy, ox):
        rx = (ox - self.xc) / self.a
        ry = -self.yc / self.b
        rz = -self.zc / self.c
        ax = dx / self.a
        ay = dy / self.b
        az = 1.0 / self.c
        qa = ax**2 + ay**2 + az**2
        qb = 2.0 * (rx * ax + ry * ay + rz * az)
        qc = rx**2 + ry**2 + rz**2 - 1.0
        disc = qb**2 - 4.0 * qa * qc
        ok = disc > 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        z = (-qb - sq) / (2.0 * qa)
        x = ox + z * dx
        y = z * dy
        lat = ((x - self.xc) / self.a) ** 2 + ((y - self.yc) / self.b) ** 2
        hit = ok & (z > 1e-6) & (lat <= self.rim**2)
        return z, hit

    def normals(self, x, y, z):
        gx = (x - self.xc) / self.a**2
        gy = (y - self.yc) / self.b**2
        gz = (z - self.zc) / self.c**2  # < 0 on the front cap
        norm = np.sqrt(gx**2 + gy**2 + gz**2)
        n = np.stack([gx / norm, gy / norm, -gz / norm], axis=-1)
        return n

    def color(self, x, y, z):
        return _texture_color(self.texture, x - self.xc, y - self.yc)


class _Background:
    """Unbounded fronto-parallel plane."""

    def __init__(self, depth: float, texture: TextureSpec):
        self.z = depth
        self.texture = texture

    def intersect(self, dx, dy, ox):
        z = np.full(dx.shape, self.z)
        return z, np.ones(dx.shape, dtype=bool)

    def normals(self, x, y, z):
        n = np.zeros(x.shape + (3,), dtype=np.float64)
        n[..., 2] = 1.0
        return n

    def color(self, x, y, z):
        return _texture_color(self.texture, x, y)


def _sample_texture(rng, families, wavelength_px, z, focal, cell_seed):
    family = families[int(rng.integers(len(families)))]
    min_px = _CHECKER_MIN_WAVELENGTH_PX if family == "checker" else _MIN_WAVELENGTH_PX
    wl_px = rng.uniform(min_px, min_px * 1.7) if wavelength_px is None else wavelength_px
    base = rng.uniform(0.34, 0.66, size=3)
    direction = rng.uniform(-1.0, 1.0, size=3)
    direction /= max(np.abs(direction).max(), 1e-6)
    amp = direction * rng.uniform(0.5, 1.0) * _MAX_AMPLITUDE
    return TextureSpec(
        family=family,
        base=tuple(base),
        amp=tuple(amp),
        wavelength=wl_px * z / focal,
        angle=rng.uniform(0.0, np.pi),
        phase=rng.uniform(0.0, 2.0 * np.pi),
        cell_seed=cell_seed,
    )


def _sample_primitives(config: SceneConfig, rng):
    f = config.focal
    h, w = config.height, config.width
    d_bg = (
        config.background_disparity
        if config.background_disparity is not None
        else rng.uniform(0.06, 0.16) * config.max_disparity
    )
    specs = []
    if config.primitives is not None:
        specs = list(config.primitives)
    else:
        d_lo = min(1.7 * d_bg + 3.0, 0.4 * config.max_disparity)
        d_hi = 0.82 * config.max_disparity
        for _ in range(config.n_planes):
            d = rng.uniform(d_lo, d_hi)
            specs.append(
                PlaneSpec(
                    center=(rng.uniform(0.15, 0.85) * w, rng.uniform(0.15, 0.85) * h),
                    disparity=d,
                    extent=(
                        rng.uniform(0.14, 0.3) * w,
                        rng.uniform(0.14, 0.3) * h,
                    ),
                    slope=tuple(rng.uniform(-0.3, 0.3, size=2)),
                )
            )
        for _ in range(config.n_ellipsoids):
            d = rng.uniform(d_lo, d_hi)
            r = rng.uniform(0.12, 0.24) * min(h, w)
            specs.append(
                EllipsoidSpec(
                    center=(rng.uniform(0.2, 0.8) * w, rng.uniform(0.2, 0.8) * h),
                    disparity=d,
                    radius=(r * rng.uniform(0.9, 1.4), r),
                )
            )
    prims = []
    for i, spec in enumerate(specs):
        if isinstance(spec, PlaneSpec):
            prim = _Plane(spec, config)
            z_ref = f * config.baseline / spec.disparity
        elif isinstance(spec, EllipsoidSpec):
            prim = _Ellipsoid(spec, config)
            z_ref = f * config.baseline / spec.disparity
        else:
            raise ValueError(f"unknown primitive spec {type(spec).__name__}")
        if prim.texture is None:
            prim.texture = _sample_texture(
                rng, config.texture_families, None, z_ref, f, cell_seed=i + 1
            )
        prims.append(prim)
    z_bg = f * config.baseline / d_bg
    background = _Background(z_bg, _sample_texture(rng, config.texture_families, None, z_bg, f, 0))
    return background, prims


def _render_view(background, prims, config: SceneConfig, ox: float):
    h, w = config.height, config.width
    cx, cy = (w - 1) / 2, (h - 1) / 2
    dx = (np.arange(w, dtype=np.float64) - cx) / config.focal
    dy = (np.arange(h, dtype=np.float64) - cy) / config.focal
    dxg, dyg = np.meshgrid(dx, dy)

    depth, _ = background.intersect(dxg, dyg, ox)
    prim_id = np.zeros((h, w), dtype=np.int32)
    for i, prim in enumerate(prims, start=1):
        z, hit = prim.intersect(dxg, dyg, ox)
        closer = hit & (z < depth)
        depth = np.where(closer, z, depth)
        prim_id[closer] = i

    x = ox + depth * dxg
    y = depth * dyg
    image = np.empty((h, w, 3), dtype=np.float64)
    normals = np.empty((h, w, 3), dtype=np.float64)
    for i, prim in enumerate([background] + prims):
        mask = prim_id == i
        if not mask.any():
            continue
        image[mask] = prim.color(x, y, depth)[mask]
        normals[mask] = prim.normals(x, y, depth)[mask]
    np.clip(image, 0.0, 1.0, out=image)
    disparity = config.focal * config.baseline / depth
    return image, disparity, normals, depth, prim_id


def _zbuffer_occlusion(disp_left, prim_id_left, prim_id_right):
    """Left pixels whose right-view bilinear footprint is out of frame or lands
    on a different primitive (hidden surface or depth-edge straddle)."""
    h, w = disp_left.shape
    xr = np.arange(w, dtype=np.float64)[None, :] - disp_left
    oob = (xr < 0.0) | (xr > w - 1.0)
    x0 = np.floor(xr)
    frac = xr - x0
    i0 = np.clip(x0.astype(np.int64), 0, w - 1)
    i1 = np.clip(i0 + 1, 0, w - 1)
    rows = np.arange(h, dtype=np.int64)[:, None]
    differs0 = (prim_id_right[rows, i0] != prim_id_left) & (1.0 - frac > 1e-6)
    differs1 = (prim_id_right[rows, i1] != prim_id_left) & (frac > 1e-6)
    return oob | (~oob & (differs0 | differs1))


def render_scene(config: SceneConfig) -> RenderResult:
    """Ray-cast both views; returns the sample plus per-view internals."""
    _validate_config(config)
    rng = np.random.default_rng(config.seed)
    background, prims = _sample_primitives(config, rng)

    img_l, disp_l, nrm_l, depth_l, pid_l = _render_view(background, prims, config, 0.0)
    img_r, disp_r, nrm_r, depth_r, pid_r = _render_view(
        background, prims, config, config.baseline
    )

    limit = _DISPARITY_HEADROOM * config.max_disparity
    if disp_l.max() >= limit or disp_r.max() >= limit:
        raise ValueError(
            f"scene disparity {max(disp_l.max(), disp_r.max()):.2f} exceeds "
            f"{limit:.2f} (max_disparity {config.max_disparity})"
        )

    occ = _zbuffer_occlusion(disp_l, pid_l, pid_r)
    valid = np.ones(disp_l.shape, dtype=bool)
    meta = {
        "seed": config.seed,
        "generator_version": GENERATOR_VERSION,
        "height": config.height,
        "width": config.width,
        "focal": config.focal,
        "baseline": config.baseline,
        "max_disparity": config.max_disparity,
    }
    sample = StereoSample(
        left_image=img_l.astype(np.float32),
        right_image=img_r.astype(np.float32),
        disparity_gt=disp_l.astype(np.float32),
        valid_mask=valid,
        occlusion_mask=occ & valid,
        left_normals=nrm_l.astype(np.float32),
        right_normals=nrm_r.astype(np.float32),
        meta=meta,
    )
    return RenderResult(
        sample=sample,
        disparity_right=disp_r.astype(np.float32),
        depth_left=depth_l.astype(np.float32),
        depth_right=depth_r.astype(np.float32),
        prim_id_left=pid_l,
        prim_id_right=pid_r,
    )


def generate_scene(config: SceneConfig) -> StereoSample:
    """Render a procedural stereo pair with exact ground truth."""
    return render_scene(config).sample
