"""Pose and color augmentation for coarse and fine training.

Coarse augmentation re-poses the pick and place objects independently and
re-renders the scene, so labels are recomputed from geometry and can never
go stale.  Fine augmentation emulates coarse-stage error: it crops at the
ground-truth pose composed with a small clipped-Gaussian perturbation and
returns the residual back to the true pose as the regression label.  Color
jitter applies only to fine-model crops.

Batch samplers amortize re-rendering through a pose-augmentation pool built
once per training run from deterministic RNG substreams; crop perturbations
and color jitter stay fully stochastic per step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GenerationError
from .lie_se2 import Se2Pose, compose, wrap_angle
from .roi import OroiSpec, crop, to_roi
from .sim2d import (
    Demonstration,
    MAX_PLACEMENT_ATTEMPTS,
    MIN_OBJECT_GAP_PX,
    SceneParams,
    TaskSpec,
    WorkspaceConfig,
    _fully_inside,
    demonstration_from_scene,
    get_task,
    polygon_distance,
)


@dataclass(frozen=True)
class ColorJitterConfig:
    brightness: float = 0.2  # fraction of full scale
    contrast: float = 0.2
    hue_deg: float = 10.0
    noise_std: float = 2.0  # 8-bit counts

    def __post_init__(self):
        for name in ("brightness", "contrast", "hue_deg", "noise_std"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass(frozen=True)
class AugmentConfig:
    """Ranges for pose and color augmentation.

    ``coarse_range_frac`` scales the re-pose ranges: 1.0 re-poses objects
    uniformly anywhere within the margins with free rotation, 0.0 is the
    identity augmentation.  Fine perturbations are clipped Gaussians in crop
    units.
    """

    coarse_range_frac: float = 1.0
    fine_sigma_t_px: float = 3.0
    fine_sigma_r_deg: float = 5.0
    fine_clip_t_px: float = 8.0
    fine_clip_r_deg: float = 15.0
    color: ColorJitterConfig = field(default_factory=ColorJitterConfig)
    color_enabled: bool = True

    def __post_init__(self):
        if not 0.0 <= self.coarse_range_frac <= 1.0:
            raise ValueError("coarse_range_frac must be in [0, 1]")
        for name in ("fine_sigma_t_px", "fine_sigma_r_deg", "fine_clip_t_px", "fine_clip_r_deg"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.fine_clip_t_px < 2 * self.fine_sigma_t_px:
            raise ValueError("fine_clip_t_px must be at least twice fine_sigma_t_px")
        if self.fine_clip_r_deg < 2 * self.fine_sigma_r_deg:
            raise ValueError("fine_clip_r_deg must be at least twice fine_sigma_r_deg")


# ---------------------------------------------------------------------------
# Coarse augmentation (independent re-pose + re-render)
# ---------------------------------------------------------------------------


def _repose(old: Se2Pose, frac: float, cfg: WorkspaceConfig, rng: np.random.Generator) -> Se2Pose:
    mx = cfg.margin_frac * cfg.width
    my = cfg.margin_frac * cfg.height
    span_x = cfg.width - 2 * mx
    span_y = cfg.height - 2 * my
    lo_x = max(mx, old.tx - frac * span_x)
    hi_x = min(cfg.width - mx, old.tx + frac * span_x)
    lo_y = max(my, old.ty - frac * span_y)
    hi_y = min(cfg.height - my, old.ty + frac * span_y)
    return Se2Pose(
        theta=wrap_angle(old.theta + rng.uniform(-frac * math.pi, frac * math.pi)),
        tx=rng.uniform(lo_x, hi_x),
        ty=rng.uniform(lo_y, hi_y),
    )


def draw_augmented_scene(
    scene: SceneParams,
    task: TaskSpec,
    cfg: WorkspaceConfig,
    aug: AugmentConfig,
    rng: np.random.Generator,
) -> SceneParams:
    """Independently re-pose both objects, subject to the generator's
    visibility and separation constraints."""
    if aug.coarse_range_frac == 0.0:
        return scene
    pick_poly = task.pick_shape.polygon_array()
    place_poly = task.place_shape.polygon_array()
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        pick_obj = _repose(scene.pick_obj, aug.coarse_range_frac, cfg, rng)
        place_obj = _repose(scene.place_obj, aug.coarse_range_frac, cfg, rng)
        pv = pick_obj.apply(pick_poly)
        qv = place_obj.apply(place_poly)
        if not (_fully_inside(pv, cfg) and _fully_inside(qv, cfg)):
            continue
        if polygon_distance(pv, qv) < MIN_OBJECT_GAP_PX:
            continue
        return SceneParams(task=scene.task, pick_obj=pick_obj, place_obj=place_obj)
    raise GenerationError(
        f"coarse augmentation found no valid placement in {MAX_PLACEMENT_ATTEMPTS} attempts"
    )


def augment_coarse(
    demo: Demonstration,
    cfg: WorkspaceConfig,
    aug: AugmentConfig,
    rng: np.random.Generator,
    task: TaskSpec | None = None,
) -> Demonstration:
    """Re-posed, re-rendered demonstration with labels recomputed exactly."""
    task = task if task is not None else get_task(demo.scene.task)
    scene = draw_augmented_scene(demo.scene, task, cfg, aug, rng)
    return demonstration_from_scene(scene, cfg, task)


# ---------------------------------------------------------------------------
# Fine augmentation (perturbed ORoI crop + residual label)
# ---------------------------------------------------------------------------


def _clipped_normal(rng: np.random.Generator, sigma: float, clip: float, size=None):
    return np.clip(rng.normal(0.0, sigma, size=size), -clip, clip)


def augment_fine(
    demo: Demonstration,
    which: str,
    cfg: WorkspaceConfig,
    aug: AugmentConfig,
    rng: np.random.Generator,
    roi_size: int = 48,
    roi_scale: float = 1.0,
):
    """Crop at the ground-truth pose perturbed by a clipped Gaussian.

    Returns (crop image float32 in 0..255, residual label Se2Pose in crop
    units).  The label is exactly ``to_roi(ground truth)`` for the perturbed
    crop center, i.e. what a fine model must output to undo the emulated
    coarse error.
    """
    if which == "pick":
        gt = demo.pick_pose
    elif which == "place":
        gt = demo.place_pose
    else:
        raise ValueError(f"which must be 'pick' or 'place', got {which!r}")
    d_theta = float(_clipped_normal(rng, math.radians(aug.fine_sigma_r_deg),
                                    math.radians(aug.fine_clip_r_deg)))
    d_t = _clipped_normal(rng, aug.fine_sigma_t_px, aug.fine_clip_t_px, size=2)
    delta = Se2Pose(theta=d_theta, tx=d_t[0] * roi_scale, ty=d_t[1] * roi_scale)
    spec = OroiSpec(center=compose(gt, delta), size=roi_size, scale=roi_scale)
    image = crop(demo.image, spec, fill_color=cfg.bg_color)
    label = to_roi(gt, spec)
    return image, label


# ---------------------------------------------------------------------------
# Color jitter
# ---------------------------------------------------------------------------

# RGB -> YIQ; hue shifts rotate the IQ plane
_RGB_TO_YIQ = np.array(
    [
        [0.299, 0.587, 0.114],
        [0.595716, -0.274453, -0.321263],
        [0.211456, -0.522591, 0.311135],
    ]
)
_YIQ_TO_RGB = np.linalg.inv(_RGB_TO_YIQ)


def color_jitter(image: np.ndarray, cfg: ColorJitterConfig, rng: np.random.Generator) -> np.ndarray:
    """Brightness/contrast/hue/noise jitter; clamps to [0, 255].

    uint8 input returns uint8; float input returns float32 on the 0..255
    scale.  Draws are consumed in a fixed order (hue, contrast, brightness,
    noise) so fixed seeds reproduce exactly; zero-range settings are exact
    identities.
    """
    img = np.asarray(image)
    was_uint8 = img.dtype == np.uint8
    x = img.astype(np.float32)
    hue = rng.uniform(-math.radians(cfg.hue_deg), math.radians(cfg.hue_deg))
    contrast = 1.0 + rng.uniform(-cfg.contrast, cfg.contrast)
    brightness = rng.uniform(-cfg.brightness, cfg.brightness) * 255.0
    if hue != 0.0:
        c, s = math.cos(hue), math.sin(hue)
        rot = np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
        t = (_YIQ_TO_RGB @ rot @ _RGB_TO_YIQ).astype(np.float32)
        x = x @ t.T
    if contrast != 1.0:
        x = (x - 127.5) * np.float32(contrast) + 127.5
    if brightness != 0.0:
        x = x + np.float32(brightness)
    if cfg.noise_std > 0.0:
        x = x + rng.normal(0.0, cfg.noise_std, size=x.shape).astype(np.float32)
    if was_uint8:
        return np.clip(np.rint(x), 0, 255).astype(np.uint8)
    return np.clip(x, 0.0, 255.0)


# ---------------------------------------------------------------------------
# Batch samplers feeding scorenet.train
# ---------------------------------------------------------------------------


class CoarseBatchSampler:
    """Pose-augmentation pool for coarse training.

    The pool holds ``pool_size`` re-rendered scenes built from deterministic
    per-item RNG substreams of ``seed``; batches sample it uniformly.  With
    ``augment=False`` the pool is the raw demonstrations.  Emitted poses are
    (pick, place) tuples in the workspace-normalized frame.
    """

    def __init__(
        self,
        demos,
        cfg: WorkspaceConfig,
        aug: AugmentConfig,
        pool_size: int = 2500,
        seed: int = 0,
        augment: bool = True,
        task: TaskSpec | None = None,
    ):
        if not demos:
            raise ValueError("need at least one demonstration")
        task = task if task is not None else get_task(demos[0].scene.task)
        if augment:
            pool = [
                augment_coarse(
                    demos[j % len(demos)], cfg, aug, np.random.default_rng([seed, j]), task
                )
                for j in range(pool_size)
            ]
        else:
            pool = list(demos)
        self.images = np.stack([d.image for d in pool])
        self.poses = cfg.pose_to_norm(np.stack([d.poses_array() for d in pool]))

    def __call__(self, rng: np.random.Generator, n: int):
        idx = rng.integers(0, len(self.images), size=n)
        return self.images[idx], self.poses[idx]


class FineBatchSampler:
    """Scene pool plus per-step crop perturbation and color jitter.

    Scenes are pose-augmented once (same pool mechanics as the coarse
    sampler); every emitted sample draws a fresh clipped-Gaussian crop
    perturbation, so residual labels remain fully stochastic.  Emitted poses
    are (1, 3) residuals scaled by ``2 / roi_size`` into the fine model's
    normalized frame; images are network-ready floats in [-0.5, 0.5].
    """

    def __init__(
        self,
        demos,
        which: str,
        cfg: WorkspaceConfig,
        aug: AugmentConfig,
        roi_size: int = 48,
        roi_scale: float = 1.0,
        pool_size: int = 2500,
        seed: int = 0,
        augment: bool = True,
        task: TaskSpec | None = None,
    ):
        if not demos:
            raise ValueError("need at least one demonstration")
        if which not in ("pick", "place"):
            raise ValueError(f"which must be 'pick' or 'place', got {which!r}")
        task = task if task is not None else get_task(demos[0].scene.task)
        if augment:
            self.pool = [
                augment_coarse(
                    demos[j % len(demos)], cfg, aug, np.random.default_rng([seed, j]), task
                )
                for j in range(pool_size)
            ]
        else:
            self.pool = list(demos)
        self.which = which
        self.cfg = cfg
        self.aug = aug
        self.roi_size = roi_size
        self.roi_scale = roi_scale
        self.trans_scale = 2.0 / roi_size

    def __call__(self, rng: np.random.Generator, n: int):
        images = np.empty((n, self.roi_size, self.roi_size, 3), dtype=np.float32)
        poses = np.empty((n, 1, 3), dtype=np.float64)
        idx = rng.integers(0, len(self.pool), size=n)
        for row, k in enumerate(idx):
            img, label = augment_fine(
                self.pool[k], self.which, self.cfg, self.aug, rng,
                roi_size=self.roi_size, roi_scale=self.roi_scale,
            )
            if self.aug.color_enabled:
                img = color_jitter(img, self.aug.color, rng)
            images[row] = img / 255.0 - 0.5
            poses[row, 0] = [
                label.tx * self.trans_scale,
                label.ty * self.trans_scale,
                label.theta,
            ]
        return images, poses
