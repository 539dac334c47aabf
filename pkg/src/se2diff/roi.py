"""Oriented region-of-interest cropping and the image <-> ORoI pose maps.

A crop is defined by an ``OroiSpec``: a center pose Z in the image frame, a
square side S, and a scale (source pixels per crop pixel).  Crop pixel
(u, v) samples the source image at Z applied to the centered offset
((u + 0.5 - S/2) * scale, (v + 0.5 - S/2) * scale), so the target at Z
appears centered and facing the crop's +x axis.

Pose residuals live in crop units with the origin at the crop center:
``to_roi(Z) == identity`` and ``from_roi`` is its exact inverse.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lie_se2 import Se2Pose, compose, inverse


@dataclass(frozen=True)
class OroiSpec:
    center: Se2Pose
    size: int = 48
    scale: float = 1.0

    def __post_init__(self):
        if self.size < 2 or self.size % 2 != 0:
            raise ValueError("crop size must be even and >= 2")
        if self.scale <= 0:
            raise ValueError("scale must be positive")


def crop(image: np.ndarray, spec: OroiSpec, fill_color=(0, 0, 0)) -> np.ndarray:
    """Inverse-warp an (H, W, 3) image into an (S, S, 3) float32 crop.

    Bilinear sampling with pixel centers at half-integer coordinates;
    samples outside the source are filled with ``fill_color``.
    """
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {img.shape}")
    img = img.astype(np.float32, copy=False)
    h, w = img.shape[:2]
    s = spec.size
    # crop-pixel centers relative to the crop center, in source pixels
    offs = (np.arange(s) + 0.5 - s / 2.0) * spec.scale
    du, dv = np.meshgrid(offs, offs)  # du: columns (crop x), dv: rows (crop y)
    pts = spec.center.apply(np.stack([du, dv], axis=-1).reshape(-1, 2))
    gx = pts[:, 0] - 0.5
    gy = pts[:, 1] - 0.5
    j0 = np.floor(gx).astype(np.int64)
    i0 = np.floor(gy).astype(np.int64)
    fx = (gx - j0).astype(np.float32)
    fy = (gy - i0).astype(np.float32)
    fill = np.asarray(fill_color, dtype=np.float32)
    out = np.zeros((s * s, 3), dtype=np.float32)
    any_valid = np.zeros(s * s, dtype=bool)
    for di, dj, wgt in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        ii = i0 + di
        jj = j0 + dj
        valid = (ii >= 0) & (ii < h) & (jj >= 0) & (jj < w)
        any_valid |= valid
        vals = np.where(
            valid[:, None],
            img[np.clip(ii, 0, h - 1), np.clip(jj, 0, w - 1)],
            fill,
        )
        out += wgt[:, None] * vals
    # pixels that touched no source sample are exactly the fill color
    out[~any_valid] = fill
    return out.reshape(s, s, 3)


def to_roi(pose: Se2Pose, spec: OroiSpec) -> Se2Pose:
    """Image-frame pose -> residual in crop units (origin at the crop center)."""
    rel = compose(inverse(spec.center), pose)
    return Se2Pose(theta=rel.theta, tx=rel.tx / spec.scale, ty=rel.ty / spec.scale)


def from_roi(residual: Se2Pose, spec: OroiSpec) -> Se2Pose:
    """Exact inverse of to_roi: residual in crop units -> image-frame pose."""
    scaled = Se2Pose(
        theta=residual.theta, tx=residual.tx * spec.scale, ty=residual.ty * spec.scale
    )
    return compose(spec.center, scaled)


def crop_pixel_of(pose: Se2Pose, spec: OroiSpec) -> np.ndarray:
    """Continuous crop-chart position where an image-frame pose lands."""
    res = to_roi(pose, spec)
    return np.array([spec.size / 2.0 + res.tx, spec.size / 2.0 + res.ty])
