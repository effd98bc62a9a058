"""On-disk sample format: 8-bit PNGs, PFM float maps, JSON metadata."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from greaten.synthdata.scene import StereoSample


class SampleFormatError(Exception):
    """Raised when a sample file exists but cannot be decoded."""


def write_pfm(path, data: np.ndarray, scale: float = 1.0) -> None:
    """Write a float32 map in the PFM format (bottom-up raster).

    Single-channel maps use the 'Pf' header, 3-channel maps 'PF'. The scale
    is stored negative to mark little-endian payloads.
    """
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF"
    else:
        raise ValueError(f"PFM supports HxW or HxWx3 maps, got shape {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(f"{-abs(scale)}\n".encode("ascii"))
        f.write(np.flipud(data).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a PFM map back as float32 (top-down raster)."""
    with open(path, "rb") as f:
        header = f.readline().rstrip()
        if header == b"PF":
            channels = 3
        elif header == b"Pf":
            channels = 1
        else:
            raise SampleFormatError(f"{path}: not a PFM file (header {header!r})")
        try:
            dims = f.readline().split()
            w, h = int(dims[0]), int(dims[1])
            scale = float(f.readline().strip())
        except (ValueError, IndexError) as e:
            raise SampleFormatError(f"{path}: malformed PFM header") from e
        if w <= 0 or h <= 0:
            raise SampleFormatError(f"{path}: bad PFM dimensions {w}x{h}")
        dtype = "<f4" if scale < 0 else ">f4"
        payload = f.read(w * h * channels * 4)
        if len(payload) != w * h * channels * 4:
            raise SampleFormatError(f"{path}: truncated PFM payload")
        data = np.frombuffer(payload, dtype=dtype).reshape(
            (h, w) if channels == 1 else (h, w, channels)
        )
    return np.flipud(data).astype(np.float32)


def _write_png(path, img: np.ndarray) -> None:
    arr = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def _read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return (arr / 255.0).astype(np.float32)


def write_sample(sample: StereoSample, out_dir) -> None:
    """Write one sample directory: left/right PNGs, PFM maps, masks, meta."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_png(out / "left.png", sample.left_image)
    _write_png(out / "right.png", sample.right_image)
    write_pfm(out / "disp.pfm", sample.disparity_gt)
    write_pfm(out / "normals_l.pfm", sample.left_normals)
    write_pfm(out / "normals_r.pfm", sample.right_normals)
    masks = sample.valid_mask.astype(np.uint8) | (
        sample.occlusion_mask.astype(np.uint8) << 1
    )
    Image.fromarray(masks, mode="L").save(out / "masks.png")
    with open(out / "meta.json", "w") as f:
        json.dump(sample.meta, f, sort_keys=True, indent=2)
        f.write("\n")


def read_sample(in_dir) -> StereoSample:
    """Read a sample directory written by :func:`write_sample`."""
    src = Path(in_dir)
    left = _read_png(src / "left.png")
    right = _read_png(src / "right.png")
    disp = read_pfm(src / "disp.pfm")
    normals_l = read_pfm(src / "normals_l.pfm")
    normals_r = read_pfm(src / "normals_r.pfm")
    with Image.open(src / "masks.png") as im:
        masks = np.asarray(im.convert("L"), dtype=np.uint8)
    with open(src / "meta.json") as f:
        try:
            meta = json.load(f)
        except json.JSONDecodeError as e:
            raise SampleFormatError(f"{src}: malformed meta.json") from e
    shapes = {left.shape[:2], right.shape[:2], disp.shape, masks.shape,
              normals_l.shape[:2], normals_r.shape[:2]}
    if len(shapes) != 1:
        raise SampleFormatError(f"{src}: inconsistent map shapes {sorted(shapes)}")
    return StereoSample(
        left_image=left,
        right_image=right,
        disparity_gt=disp,
        valid_mask=(masks & 1).astype(bool),
        occlusion_mask=(masks & 2).astype(bool),
        left_normals=normals_l,
        right_normals=normals_r,
        meta=meta,
    )
