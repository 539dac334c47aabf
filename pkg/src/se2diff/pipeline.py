"""Coarse-to-fine inference and evaluation.

The coarse model samples joint (pick, place) poses from the full image; each
estimate is refined by cropping an oriented region of interest at the coarse
pose and sampling a residual from the matching fine model.  Aggregation maps
the residual back through the ORoI frame, and the transport pose is the
rigid motion carrying the aggregated pick pose onto the aggregated place
pose.

Evaluation grants a single attempt per scene.  Per-scene RNG substreams
derive from (seed, scene index), so results are identical however scenes are
batched.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .diffusion import NoiseSchedule, sample_batch, translation_box_projection
from .errors import CheckpointError
from .lie_se2 import Se2Pose, compose, inverse, wrap_angle
from .roi import OroiSpec, crop, from_roi
from .scorenet import ScoreModel
from .sim2d import WorkspaceConfig


@dataclass(frozen=True)
class SuccessCriteria:
    """A scene succeeds if pick, place, and transport translational errors
    are all below trans_px and the transport rotational error is below
    rot_deg."""

    trans_px: float = 5.0
    rot_deg: float = 5.0


@dataclass(frozen=True)
class EstimateResult:
    coarse_pick: Se2Pose
    coarse_place: Se2Pose
    fine_pick: Se2Pose | None  # residuals in crop units; None in coarse-only mode
    fine_place: Se2Pose | None
    pick: Se2Pose  # aggregated
    place: Se2Pose
    transport: Se2Pose
    coarse_ms: float
    fine_ms: float


def _check_models(coarse, fine_pick, fine_place):
    if coarse.n != 2:
        raise CheckpointError(f"coarse model must have N=2, got N={coarse.n}")
    for name, m in (("fine_pick", fine_pick), ("fine_place", fine_place)):
        if m is not None and m.n != 1:
            raise CheckpointError(f"{name} model must have N=1, got N={m.n}")
    if (fine_pick is None) != (fine_place is None):
        raise CheckpointError("provide both fine models or neither")


# Chains are clamped to a box slightly larger than the trained pose range:
# +-1.2 normalized units for the coarse workspace, +-2.0 for fine residuals.
COARSE_CHAIN_LIMIT = 1.2
FINE_CHAIN_LIMIT = 2.0


def _sample_fine_batch(model, crops, rngs, schedule, steps_per_level, final_denoise):
    """Residual poses (B,) in crop units from a fine model on prepared crops."""
    fn = model.make_score_fn(crops)
    out = sample_batch(
        fn, schedule, 1, rngs, steps_per_level=steps_per_level,
        final_denoise=final_denoise,
        project=translation_box_projection(FINE_CHAIN_LIMIT),
    )
    res = model.denormalize_poses(out)[:, 0]
    return [Se2Pose(theta=row[2], tx=row[0], ty=row[1]) for row in res]


def estimate_batch(
    images: np.ndarray,
    coarse: ScoreModel,
    fine_pick: ScoreModel | None,
    fine_place: ScoreModel | None,
    ws_cfg: WorkspaceConfig,
    rngs,
    coarse_schedule: NoiseSchedule | None = None,
    coarse_step_indices=None,
    steps_per_level: int = 1,
    final_denoise: bool = True,
) -> list:
    """Run the two-stage estimator on a batch of scenes (one rng per scene)."""
    _check_models(coarse, fine_pick, fine_place)
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    b = images.shape[0]
    if len(rngs) != b:
        raise ValueError(f"need one rng per scene: {len(rngs)} != {b}")

    t0 = time.perf_counter()
    schedule = coarse_schedule if coarse_schedule is not None else coarse.schedule()
    fn = coarse.make_score_fn(images)
    tuples_nrm = sample_batch(
        fn, schedule, 2, rngs,
        steps_per_level=steps_per_level, final_denoise=final_denoise,
        step_indices=coarse_step_indices,
        project=translation_box_projection(COARSE_CHAIN_LIMIT),
    )
    # the model's own normalization maps straight back to pixel poses
    coarse_px = coarse.denormalize_poses(tuples_nrm)
    coarse_ms = (time.perf_counter() - t0) * 1000.0 / b

    coarse_picks = [Se2Pose(theta=r[2], tx=r[0], ty=r[1]) for r in coarse_px[:, 0]]
    coarse_places = [Se2Pose(theta=r[2], tx=r[0], ty=r[1]) for r in coarse_px[:, 1]]

    results = []
    if fine_pick is None:
        for k in range(b):
            xc, yc = coarse_picks[k], coarse_places[k]
            results.append(
                EstimateResult(
                    coarse_pick=xc, coarse_place=yc, fine_pick=None, fine_place=None,
                    pick=xc, place=yc, transport=compose(yc, inverse(xc)),
                    coarse_ms=coarse_ms, fine_ms=0.0,
                )
            )
        return results

    t1 = time.perf_counter()
    size = fine_pick.image_hw[0]
    pick_specs = [
        OroiSpec(center=coarse_picks[k], size=size, scale=fine_pick.roi_scale)
        for k in range(b)
    ]
    place_specs = [
        OroiSpec(center=coarse_places[k], size=fine_place.image_hw[0],
                 scale=fine_place.roi_scale)
        for k in range(b)
    ]
    pick_crops = np.stack(
        [crop(images[k], pick_specs[k], ws_cfg.bg_color) / 255.0 - 0.5 for k in range(b)]
    )
    place_crops = np.stack(
        [crop(images[k], place_specs[k], ws_cfg.bg_color) / 255.0 - 0.5 for k in range(b)]
    )
    fine_picks = _sample_fine_batch(
        fine_pick, pick_crops, rngs, fine_pick.schedule(), steps_per_level, final_denoise
    )
    fine_places = _sample_fine_batch(
        fine_place, place_crops, rngs, fine_place.schedule(), steps_per_level, final_denoise
    )
    fine_ms = (time.perf_counter() - t1) * 1000.0 / b

    for k in range(b):
        x_sum = from_roi(fine_picks[k], pick_specs[k])
        y_sum = from_roi(fine_places[k], place_specs[k])
        results.append(
            EstimateResult(
                coarse_pick=coarse_picks[k], coarse_place=coarse_places[k],
                fine_pick=fine_picks[k], fine_place=fine_places[k],
                pick=x_sum, place=y_sum, transport=compose(y_sum, inverse(x_sum)),
                coarse_ms=coarse_ms, fine_ms=fine_ms,
            )
        )
    return results


def estimate(
    image: np.ndarray,
    coarse: ScoreModel,
    fine_pick: ScoreModel | None,
    fine_place: ScoreModel | None,
    ws_cfg: WorkspaceConfig,
    rng: np.random.Generator,
    **kwargs,
) -> EstimateResult:
    """Single-scene estimate; see estimate_batch."""
    return estimate_batch(
        np.asarray(image)[None], coarse, fine_pick, fine_place, ws_cfg, [rng], **kwargs
    )[0]


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def scene_errors(result: EstimateResult, pick_gt: Se2Pose, place_gt: Se2Pose) -> dict:
    """Translational/rotational errors in pixels and degrees.

    The transport translational error is the displacement between the
    predicted and true transports applied at the true pick point.
    """
    t_gt = compose(place_gt, inverse(pick_gt))
    p = np.array([pick_gt.tx, pick_gt.ty])
    moved_pred = result.transport.apply(p)
    moved_gt = t_gt.apply(p)
    return {
        "pick_err_px": float(math.hypot(result.pick.tx - pick_gt.tx,
                                        result.pick.ty - pick_gt.ty)),
        "place_err_px": float(math.hypot(result.place.tx - place_gt.tx,
                                         result.place.ty - place_gt.ty)),
        "transport_trans_err_px": float(np.linalg.norm(moved_pred - moved_gt)),
        "transport_rot_err_deg": abs(math.degrees(wrap_angle(
            result.transport.theta - t_gt.theta))),
    }


def is_success(errors: dict, criteria: SuccessCriteria) -> bool:
    return (
        errors["pick_err_px"] < criteria.trans_px
        and errors["place_err_px"] < criteria.trans_px
        and errors["transport_trans_err_px"] < criteria.trans_px
        and errors["transport_rot_err_deg"] < criteria.rot_deg
    )


@dataclass
class EvalReport:
    rows: list
    summary: dict

    def to_csv(self, path) -> None:
        cols = [
            "scene", "pick_err_px", "place_err_px", "transport_trans_err_px",
            "transport_rot_err_deg", "success",
        ]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(cols)
            for row in self.rows:
                writer.writerow([row[c] if c != "success" else int(row[c]) for c in cols])
            writer.writerow([
                "mean",
                self.summary["mean_pick_err_px"],
                self.summary["mean_place_err_px"],
                self.summary["mean_transport_trans_err_px"],
                self.summary["mean_transport_rot_err_deg"],
                self.summary["success_rate"],
            ])

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary, fh, indent=2, sort_keys=True)
            fh.write("\n")


def evaluate(
    demos,
    coarse: ScoreModel,
    fine_pick: ScoreModel | None,
    fine_place: ScoreModel | None,
    ws_cfg: WorkspaceConfig,
    criteria: SuccessCriteria,
    seed: int,
    limit: int | None = None,
    batched: bool = True,
    coarse_schedule: NoiseSchedule | None = None,
    coarse_step_indices=None,
    steps_per_level: int = 1,
) -> EvalReport:
    """Single-attempt evaluation over a test set.

    Mean errors aggregate over every scene (not only successes).  With
    ``batched=False`` scenes run one at a time; per-scene RNG substreams make
    the two modes produce identical rows.
    """
    if not demos:
        raise ValueError("test set must be nonempty")
    subset = demos[:limit] if limit is not None else list(demos)
    images = np.stack([d.image for d in subset])
    rngs = [np.random.default_rng([seed, k]) for k in range(len(subset))]
    kwargs = dict(
        coarse_schedule=coarse_schedule, coarse_step_indices=coarse_step_indices,
        steps_per_level=steps_per_level,
    )
    if batched:
        results = estimate_batch(
            images, coarse, fine_pick, fine_place, ws_cfg, rngs, **kwargs
        )
    else:
        results = []
        for k in range(len(subset)):
            results.extend(
                estimate_batch(
                    images[k : k + 1], coarse, fine_pick, fine_place, ws_cfg,
                    [rngs[k]], **kwargs,
                )
            )
    rows = []
    for k, (demo, res) in enumerate(zip(subset, results)):
        errors = scene_errors(res, demo.pick_pose, demo.place_pose)
        errors["scene"] = k
        errors["success"] = is_success(errors, criteria)
        errors["coarse_ms"] = res.coarse_ms
        errors["fine_ms"] = res.fine_ms
        rows.append(errors)
    summary = {
        "count": len(rows),
        "mean_pick_err_px": float(np.mean([r["pick_err_px"] for r in rows])),
        "mean_place_err_px": float(np.mean([r["place_err_px"] for r in rows])),
        "mean_transport_trans_err_px": float(
            np.mean([r["transport_trans_err_px"] for r in rows])
        ),
        "mean_transport_rot_err_deg": float(
            np.mean([r["transport_rot_err_deg"] for r in rows])
        ),
        "success_rate": float(100.0 * np.mean([r["success"] for r in rows])),
        "mean_coarse_ms": float(np.mean([r["coarse_ms"] for r in rows])),
        "mean_fine_ms": float(np.mean([r["fine_ms"] for r in rows])),
        "criteria": {"trans_px": criteria.trans_px, "rot_deg": criteria.rot_deg},
    }
    return EvalReport(rows=rows, summary=summary)


# ---------------------------------------------------------------------------
# Denoising-step ablation
# ---------------------------------------------------------------------------


def subsampled_schedule(model: ScoreModel, L: int):
    """Rebuild the model's schedule at L levels by subsampling its sigma
    ladder (always keeping sigma_max); returns (schedule, original 1-based
    indices for conditioning)."""
    if L < 1:
        raise ValueError("L must be >= 1")
    full = len(model.sigmas)
    idx = np.unique(np.round(np.linspace(full - 1, 0, min(L, full))).astype(int))
    sigmas = model.sigmas[idx]
    return NoiseSchedule(sigmas=tuple(sigmas), eps0=model.eps0), (idx + 1).tolist()


def ablate_steps(
    demos,
    coarse: ScoreModel,
    ws_cfg: WorkspaceConfig,
    criteria: SuccessCriteria,
    steps_list,
    seed: int,
    fine_pick: ScoreModel | None = None,
    fine_place: ScoreModel | None = None,
    limit: int | None = None,
    steps_per_level: int = 1,
) -> list:
    """Coarse-stage success rate and inference time per denoising-step count.

    When fine models are provided the coarse+fine success rate is reported
    alongside (the fine stage keeps its own full schedule).
    """
    rows = []
    for L in steps_list:
        schedule, step_indices = subsampled_schedule(coarse, L)
        t0 = time.perf_counter()
        report = evaluate(
            demos, coarse, None, None, ws_cfg, criteria, seed, limit=limit,
            coarse_schedule=schedule, coarse_step_indices=step_indices,
            steps_per_level=steps_per_level,
        )
        elapsed_ms = (time.perf_counter() - t0) * 1000.0 / report.summary["count"]
        row = {
            "steps": int(L),
            "coarse_success_rate": report.summary["success_rate"],
            "mean_scene_ms": elapsed_ms,
        }
        if fine_pick is not None and fine_place is not None:
            cf = evaluate(
                demos, coarse, fine_pick, fine_place, ws_cfg, criteria, seed,
                limit=limit, coarse_schedule=schedule,
                coarse_step_indices=step_indices, steps_per_level=steps_per_level,
            )
            row["coarse_fine_success_rate"] = cf.summary["success_rate"]
        rows.append(row)
    return rows
