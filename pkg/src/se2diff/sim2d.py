"""Synthetic top-down workspace: task shapes, anti-aliased polygon
rendering, scene generation, and dataset I/O.

Continuous coordinates are pixels with the origin at the image's top-left
corner, x along columns and y along rows; the center of pixel (row r, col c)
is (c + 0.5, r + 0.5).  A pose's positive theta rotates the x-axis toward
the y-axis (clockwise on screen, counterclockwise in the y-up convention the
labels are documented in; the two descriptions are mirror images and every
consumer in this package uses the same one).

Datasets are directories:

    scenes/000000.png ...   8-bit RGB renders
    poses.jsonl             one record per scene (poses as [x, y, theta])
    manifest.json           config echo, seed, count, format version
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, GenerationError
from .lie_se2 import Se2Pose, compose, inverse

DATASET_VERSION = 1


@dataclass(frozen=True)
class WorkspaceConfig:
    """Workspace geometry and rendering knobs.

    The pixel <-> normalized mapping is x_norm = 2 * px / W - 1 per axis
    (pixel centers land on exactly recoverable values).
    """

    width: int = 96
    height: int = 96
    bg_color: tuple = (38, 42, 48)
    margin_frac: float = 0.12
    supersample: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.width < 32 or self.height < 32:
            raise ValueError("workspace must be at least 32x32 pixels")
        if not 0 <= self.margin_frac < 0.5:
            raise ValueError("margin_frac must be in [0, 0.5)")
        if self.supersample < 1:
            raise ValueError("supersample must be >= 1")
        object.__setattr__(self, "bg_color", tuple(int(c) for c in self.bg_color))

    def to_norm(self, xy: np.ndarray) -> np.ndarray:
        """Map (..., 2) pixel positions to normalized [-1, 1] coordinates."""
        xy = np.asarray(xy, dtype=np.float64)
        return np.stack(
            [(2.0 * xy[..., 0] - self.width) / self.width,
             (2.0 * xy[..., 1] - self.height) / self.height],
            axis=-1,
        )

    def to_px(self, xy_norm: np.ndarray) -> np.ndarray:
        xy_norm = np.asarray(xy_norm, dtype=np.float64)
        return np.stack(
            [(xy_norm[..., 0] * self.width + self.width) / 2.0,
             (xy_norm[..., 1] * self.height + self.height) / 2.0],
            axis=-1,
        )

    def pose_to_norm(self, poses: np.ndarray) -> np.ndarray:
        """Map (..., 3) pixel-frame poses into the normalized frame (theta kept)."""
        poses = np.asarray(poses, dtype=np.float64)
        out = poses.copy()
        out[..., :2] = self.to_norm(poses[..., :2])
        return out

    def pose_to_px(self, poses: np.ndarray) -> np.ndarray:
        poses = np.asarray(poses, dtype=np.float64)
        out = poses.copy()
        out[..., :2] = self.to_px(poses[..., :2])
        return out


# ---------------------------------------------------------------------------
# Polygon geometry
# ---------------------------------------------------------------------------


def polygon_area(verts: np.ndarray) -> float:
    v = np.asarray(verts, dtype=np.float64)
    x, y = v[:, 0], v[:, 1]
    return 0.5 * abs(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def point_in_polygon(pt, verts) -> bool:
    """Even-odd rule."""
    v = np.asarray(verts, dtype=np.float64)
    x, y = float(pt[0]), float(pt[1])
    x1, y1 = v[:, 0], v[:, 1]
    x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
    dy = y2 - y1
    safe = np.where(dy == 0, 1.0, dy)
    crossing = ((y1 > y) != (y2 > y)) & (x < (x2 - x1) * (y - y1) / safe + x1)
    return bool(np.sum(crossing) % 2)


def _orient(a, b, c) -> float:
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _segments_intersect(p1, p2, q1, q2) -> bool:
    d1 = _orient(q1, q2, p1)
    d2 = _orient(q1, q2, p2)
    d3 = _orient(p1, p2, q1)
    d4 = _orient(p1, p2, q2)
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)):
        return True
    # touching or collinear contact counts as intersecting (conservative)
    for d, a, b, c in ((d1, q1, q2, p1), (d2, q1, q2, p2), (d3, p1, p2, q1), (d4, p1, p2, q2)):
        if d == 0 and _on_segment(a, b, c):
            return True
    return False


def _on_segment(a, b, c) -> bool:
    return (
        min(a[0], b[0]) <= c[0] <= max(a[0], b[0])
        and min(a[1], b[1]) <= c[1] <= max(a[1], b[1])
    )


def polygons_intersect(a: np.ndarray, b: np.ndarray) -> bool:
    """True if the two simple polygons overlap, touch, or one contains the other."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = len(a), len(b)
    for i in range(na):
        for j in range(nb):
            if _segments_intersect(a[i], a[(i + 1) % na], b[j], b[(j + 1) % nb]):
                return True
    return point_in_polygon(a[0], b) or point_in_polygon(b[0], a)


def _point_segment_dist(p, a, b) -> float:
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom == 0 else float(np.clip((p - a) @ ab / denom, 0.0, 1.0))
    return float(np.linalg.norm(p - (a + t * ab)))


def polygon_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Minimum distance between two disjoint simple polygons (0 if they intersect)."""
    if polygons_intersect(a, b):
        return 0.0
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    best = math.inf
    for poly1, poly2 in ((a, b), (b, a)):
        n2 = len(poly2)
        for p in poly1:
            for j in range(n2):
                best = min(best, _point_segment_dist(p, poly2[j], poly2[(j + 1) % n2]))
    return best


def polygon_is_simple(verts: np.ndarray) -> bool:
    v = np.asarray(verts, dtype=np.float64)
    n = len(v)
    for i in range(n):
        for j in range(i + 1, n):
            # skip adjacent edges (they share an endpoint)
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue
            if _segments_intersect(v[i], v[(i + 1) % n], v[j], v[(j + 1) % n]):
                return False
    return True


# ---------------------------------------------------------------------------
# Shapes and tasks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ShapeSpec:
    """A filled polygon in object-local pixel units, with an optional hole
    (drawn in background color) and the pick-anchor pose in the object frame."""

    name: str
    polygon: tuple
    color: tuple
    anchor: tuple = (0.0, 0.0, 0.0)  # (x, y, theta) in the object frame
    hole: tuple | None = None

    def __post_init__(self):
        poly = tuple(tuple(float(c) for c in v) for v in self.polygon)
        object.__setattr__(self, "polygon", poly)
        if self.hole is not None:
            object.__setattr__(
                self, "hole", tuple(tuple(float(c) for c in v) for v in self.hole)
            )
        object.__setattr__(self, "color", tuple(int(c) for c in self.color))
        object.__setattr__(self, "anchor", tuple(float(a) for a in self.anchor))
        if len(poly) < 3 or not polygon_is_simple(np.array(poly)):
            raise ValueError(f"shape {self.name}: polygon must be simple")
        if not point_in_polygon(self.anchor[:2], np.array(poly)):
            raise ValueError(f"shape {self.name}: anchor must lie inside the polygon")

    def polygon_array(self) -> np.ndarray:
        return np.array(self.polygon, dtype=np.float64)

    def hole_array(self) -> np.ndarray | None:
        return None if self.hole is None else np.array(self.hole, dtype=np.float64)

    def anchor_pose(self) -> Se2Pose:
        return Se2Pose(theta=self.anchor[2], tx=self.anchor[0], ty=self.anchor[1])

    def circumradius(self) -> float:
        verts = self.polygon_array()
        return float(np.max(np.linalg.norm(verts, axis=1)))


@dataclass(frozen=True)
class TaskSpec:
    name: str
    pick_shape: ShapeSpec
    place_shape: ShapeSpec


# L block: 5 px arms, 13 px long, anchored at the center of the corner square.
_L_VERTS = ((-2.5, -2.5), (10.5, -2.5), (10.5, 2.5), (2.5, 2.5), (2.5, 10.5), (-2.5, 10.5))
# Frame: the same L offset outward by 3 px, with the L itself as the hole.
_L_FRAME_OUTER = ((-5.5, -5.5), (13.5, -5.5), (13.5, 5.5), (5.5, 5.5), (5.5, 13.5), (-5.5, 13.5))

# Chamfered rectangles for the block-stacking variant (chamfer breaks the
# 180-degree symmetry so ground-truth rotations stay unambiguous).
_RECT_PICK = ((-8.0, -4.5), (8.0, -4.5), (8.0, 1.5), (5.0, 4.5), (-8.0, 4.5))
_RECT_PLACE = ((-10.0, -6.5), (10.0, -6.5), (10.0, 3.5), (7.0, 6.5), (-10.0, 6.5))


def l_shape_task() -> TaskSpec:
    return TaskSpec(
        name="l-shape",
        pick_shape=ShapeSpec(name="l-block", polygon=_L_VERTS, color=(208, 52, 44)),
        place_shape=ShapeSpec(
            name="l-frame", polygon=_L_FRAME_OUTER, color=(126, 126, 126), hole=_L_VERTS
        ),
    )


def block_stack_task() -> TaskSpec:
    return TaskSpec(
        name="block-stack",
        pick_shape=ShapeSpec(name="top-block", polygon=_RECT_PICK, color=(235, 142, 40)),
        place_shape=ShapeSpec(name="base-block", polygon=_RECT_PLACE, color=(58, 94, 204)),
    )


_TASKS = {"l-shape": l_shape_task, "block-stack": block_stack_task}


def get_task(name: str) -> TaskSpec:
    try:
        return _TASKS[name]()
    except KeyError:
        raise DataError(f"unknown task {name!r}; available: {sorted(_TASKS)}") from None


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SceneParams:
    """Everything needed to re-render a scene exactly."""

    task: str
    pick_obj: Se2Pose
    place_obj: Se2Pose


def fill_polygon(img: np.ndarray, verts: np.ndarray, color, supersample: int = 4) -> None:
    """Blend a filled polygon into a float32 (H, W, 3) image with box-filter
    anti-aliasing at ``supersample``^2 samples per pixel."""
    h, w = img.shape[:2]
    v = np.asarray(verts, dtype=np.float64)
    x0 = max(0, int(np.floor(v[:, 0].min())))
    x1 = min(w, int(np.ceil(v[:, 0].max())))
    y0 = max(0, int(np.floor(v[:, 1].min())))
    y1 = min(h, int(np.ceil(v[:, 1].max())))
    if x0 >= x1 or y0 >= y1:
        return
    ss = supersample
    xs = x0 + (np.arange((x1 - x0) * ss) + 0.5) / ss
    ys = y0 + (np.arange((y1 - y0) * ss) + 0.5) / ss
    gx = xs[None, :]
    gy = ys[:, None]
    inside = np.zeros((ys.size, xs.size), dtype=bool)
    ex1, ey1 = v[:, 0], v[:, 1]
    ex2, ey2 = np.roll(ex1, -1), np.roll(ey1, -1)
    for k in range(len(v)):
        dy = ey2[k] - ey1[k]
        if dy == 0:
            continue
        crossing = ((ey1[k] > gy) != (ey2[k] > gy)) & (
            gx < (ex2[k] - ex1[k]) * (gy - ey1[k]) / dy + ex1[k]
        )
        inside ^= crossing
    cov = inside.reshape(y1 - y0, ss, x1 - x0, ss).mean(axis=(1, 3)).astype(np.float32)
    region = img[y0:y1, x0:x1]
    col = np.asarray(color, dtype=np.float32)
    region *= 1.0 - cov[:, :, None]
    region += col * cov[:, :, None]


def render_shapes(shape_pose_pairs, cfg: WorkspaceConfig) -> np.ndarray:
    """Rasterize (shape, pose) pairs in order onto the background."""
    img = np.empty((cfg.height, cfg.width, 3), dtype=np.float32)
    img[:] = np.asarray(cfg.bg_color, dtype=np.float32)
    for shape, pose in shape_pose_pairs:
        fill_polygon(img, pose.apply(shape.polygon_array()), shape.color, cfg.supersample)
        hole = shape.hole_array()
        if hole is not None:
            fill_polygon(img, pose.apply(hole), cfg.bg_color, cfg.supersample)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def render(scene: SceneParams, cfg: WorkspaceConfig, task: TaskSpec | None = None) -> np.ndarray:
    """Deterministic rasterization of a scene; frame drawn below the block."""
    task = task if task is not None else get_task(scene.task)
    return render_shapes(
        [(task.place_shape, scene.place_obj), (task.pick_shape, scene.pick_obj)], cfg
    )


# ---------------------------------------------------------------------------
# Scene generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Demonstration:
    image: np.ndarray  # (H, W, 3) uint8
    pick_pose: Se2Pose  # pixel frame
    place_pose: Se2Pose
    scene: SceneParams

    def poses_array(self) -> np.ndarray:
        """(2, 3) array [pick, place] in [x, y, theta] order."""
        return np.stack([self.pick_pose.as_array(), self.place_pose.as_array()])


MAX_PLACEMENT_ATTEMPTS = 1000
MIN_OBJECT_GAP_PX = 1.0


def _random_object_pose(cfg: WorkspaceConfig, rng: np.random.Generator) -> Se2Pose:
    mx = cfg.margin_frac * cfg.width
    my = cfg.margin_frac * cfg.height
    return Se2Pose(
        theta=rng.uniform(-math.pi, math.pi),
        tx=rng.uniform(mx, cfg.width - mx),
        ty=rng.uniform(my, cfg.height - my),
    )


def _fully_inside(verts: np.ndarray, cfg: WorkspaceConfig) -> bool:
    return bool(
        np.all(verts[:, 0] >= 0)
        and np.all(verts[:, 0] <= cfg.width)
        and np.all(verts[:, 1] >= 0)
        and np.all(verts[:, 1] <= cfg.height)
    )


def sample_scene_params(
    task: TaskSpec, cfg: WorkspaceConfig, rng: np.random.Generator
) -> SceneParams:
    """Rejection-sample non-overlapping, fully visible object placements.

    Anchor positions are uniform within the margins; placements whose
    polygons poke outside the canvas or come within MIN_OBJECT_GAP_PX of
    each other are rejected.
    """
    pick_poly = task.pick_shape.polygon_array()
    place_poly = task.place_shape.polygon_array()
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        pick_obj = _random_object_pose(cfg, rng)
        place_obj = _random_object_pose(cfg, rng)
        pv = pick_obj.apply(pick_poly)
        qv = place_obj.apply(place_poly)
        if not (_fully_inside(pv, cfg) and _fully_inside(qv, cfg)):
            continue
        if polygon_distance(pv, qv) < MIN_OBJECT_GAP_PX:
            continue
        return SceneParams(task=task.name, pick_obj=pick_obj, place_obj=place_obj)
    raise GenerationError(
        f"no valid placement after {MAX_PLACEMENT_ATTEMPTS} attempts; "
        f"workspace too small for task {task.name!r}"
    )


def generate_scene(task: TaskSpec, cfg: WorkspaceConfig, rng: np.random.Generator) -> Demonstration:
    scene = sample_scene_params(task, cfg, rng)
    return demonstration_from_scene(scene, cfg, task)


def demonstration_from_scene(
    scene: SceneParams, cfg: WorkspaceConfig, task: TaskSpec | None = None
) -> Demonstration:
    task = task if task is not None else get_task(scene.task)
    image = render(scene, cfg, task)
    pick = compose(scene.pick_obj, task.pick_shape.anchor_pose())
    place = compose(scene.place_obj, task.place_shape.anchor_pose())
    return Demonstration(image=image, pick_pose=pick, place_pose=place, scene=scene)


def generate_dataset(
    task: TaskSpec, cfg: WorkspaceConfig, count: int, seed: int
) -> list:
    """Deterministic dataset: scene k uses the RNG substream (seed, k)."""
    if count < 1:
        raise DataError("dataset count must be >= 1")
    return [
        generate_scene(task, cfg, np.random.default_rng([seed, k])) for k in range(count)
    ]


# ---------------------------------------------------------------------------
# Dataset I/O
# ---------------------------------------------------------------------------


def _pose_list(p: Se2Pose) -> list:
    return [p.tx, p.ty, p.theta]


def _pose_from_list(v) -> Se2Pose:
    return Se2Pose(theta=float(v[2]), tx=float(v[0]), ty=float(v[1]))


def write_dataset(demos, out_dir, cfg: WorkspaceConfig, seed: int, task_name: str) -> None:
    out = Path(out_dir)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    lines = []
    for k, demo in enumerate(demos):
        Image.fromarray(demo.image).save(out / "scenes" / f"{k:06d}.png")
        record = {
            "index": k,
            "pick_pose": _pose_list(demo.pick_pose),
            "place_pose": _pose_list(demo.place_pose),
            "scene": {
                "task": demo.scene.task,
                "pick_obj": _pose_list(demo.scene.pick_obj),
                "place_obj": _pose_list(demo.scene.place_obj),
            },
            "generator_version": DATASET_VERSION,
        }
        lines.append(json.dumps(record, sort_keys=True))
    (out / "poses.jsonl").write_text("\n".join(lines) + "\n")
    manifest = {
        "version": DATASET_VERSION,
        "count": len(demos),
        "seed": seed,
        "task": task_name,
        "workspace": dataclasses.asdict(cfg),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_dataset(in_dir):
    """Load a dataset directory; returns (demonstrations, manifest)."""
    root = Path(in_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"{root}: missing manifest.json")
    manifest = json.loads(manifest_path.read_text())
    poses_path = root / "poses.jsonl"
    if not poses_path.exists():
        raise DataError(f"{root}: missing poses.jsonl")
    demos = []
    with open(poses_path) as fh:
        for ln, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                idx = rec["index"]
                scene = SceneParams(
                    task=rec["scene"]["task"],
                    pick_obj=_pose_from_list(rec["scene"]["pick_obj"]),
                    place_obj=_pose_from_list(rec["scene"]["place_obj"]),
                )
                pick = _pose_from_list(rec["pick_pose"])
                place = _pose_from_list(rec["place_pose"])
            except (KeyError, IndexError, TypeError, ValueError) as exc:
                raise DataError(f"{poses_path} line {ln}: malformed record ({exc})") from exc
            img_path = root / "scenes" / f"{idx:06d}.png"
            if not img_path.exists():
                raise DataError(f"scene {idx}: missing image file {img_path}")
            image = np.asarray(Image.open(img_path).convert("RGB"))
            demos.append(
                Demonstration(image=image, pick_pose=pick, place_pose=place, scene=scene)
            )
    if len(demos) != manifest.get("count"):
        raise DataError(
            f"{root}: manifest count {manifest.get('count')} != {len(demos)} records"
        )
    return demos, manifest


def workspace_from_manifest(manifest: dict) -> WorkspaceConfig:
    ws = dict(manifest["workspace"])
    ws["bg_color"] = tuple(ws["bg_color"])
    return WorkspaceConfig(**ws)
