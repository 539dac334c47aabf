"""Noise schedules, the product perturbation kernel on SE(2)^N, the DSM-N
loss, and annealed sampling via a geodesic random walk.

Tuples of N poses are perturbed independently, one shared sigma per step.
The scalar API mirrors the batched ``*_batch`` functions, which operate on
``(B, N, 3)`` arrays in ``[x, y, theta]`` / ``[rho_x, rho_y, omega]`` order
and carry all training and inference traffic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .lie_se2 import Se2Pose, Twist, compose_arr, exp_map_arr

PoseArray = np.ndarray  # (..., 3) poses, [x, y, theta]


@dataclass(frozen=True)
class NoiseSchedule:
    """Increasing noise levels sigma_1 < ... < sigma_L plus Langevin step sizes.

    ``step_size(i) = eps0 * sigma_i**2 / sigma_L**2`` for 1-based step i.
    """

    sigmas: tuple
    eps0: float

    def __post_init__(self):
        s = np.asarray(self.sigmas, dtype=np.float64)
        if s.ndim != 1 or s.size < 1:
            raise ValueError("sigmas must be a nonempty 1-D sequence")
        if np.any(s <= 0):
            raise ValueError("all sigmas must be positive")
        if np.any(np.diff(s) <= 0):
            raise ValueError("sigmas must be strictly increasing")
        if self.eps0 <= 0:
            raise ValueError("eps0 must be positive")
        object.__setattr__(self, "sigmas", tuple(float(v) for v in s))

    @property
    def L(self) -> int:
        return len(self.sigmas)

    def sigma(self, i: int) -> float:
        """sigma_i for 1-based step index i."""
        if not 1 <= i <= self.L:
            raise IndexError(f"step index {i} outside 1..{self.L}")
        return self.sigmas[i - 1]

    def step_size(self, i: int) -> float:
        return self.eps0 * self.sigma(i) ** 2 / self.sigmas[-1] ** 2

    def sigma_array(self) -> np.ndarray:
        return np.asarray(self.sigmas, dtype=np.float64)


def geometric_schedule(sigma_min: float, sigma_max: float, L: int, eps0: float) -> NoiseSchedule:
    """Geometric ladder sigma_i = sigma_min * (sigma_max/sigma_min)^((i-1)/(L-1)).

    For L = 1 the single level is sigma_max.
    """
    if not 0 < sigma_min < sigma_max:
        raise ValueError(f"need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}")
    if L < 1:
        raise ValueError("L must be >= 1")
    if L == 1:
        return NoiseSchedule(sigmas=(sigma_max,), eps0=eps0)
    sig = sigma_min * (sigma_max / sigma_min) ** (np.arange(L) / (L - 1))
    return NoiseSchedule(sigmas=tuple(sig), eps0=eps0)


def default_eps0(sigma_max: float, factor: float = 0.1) -> float:
    """Default Langevin base step: eps0 = factor * sigma_L^2.

    Makes step_size(i) = factor * sigma_i^2, i.e. a per-step contraction of
    ``factor`` toward the score's target at every noise level.
    """
    return factor * sigma_max**2


@dataclass(frozen=True)
class PoseTuple:
    """Ordered tuple of N SE(2) poses; order is (pick, place) for N = 2."""

    poses: tuple

    def __post_init__(self):
        object.__setattr__(self, "poses", tuple(self.poses))
        if not self.poses:
            raise ValueError("PoseTuple must hold at least one pose")

    @property
    def n(self) -> int:
        return len(self.poses)

    def as_array(self) -> np.ndarray:
        return np.stack([p.as_array() for p in self.poses], axis=0)

    @staticmethod
    def from_array(a) -> "PoseTuple":
        return PoseTuple(tuple(Se2Pose.from_array(row) for row in np.asarray(a)))


@dataclass(frozen=True)
class ScoreEstimate:
    """One score twist per primitive, paired with a PoseTuple of the same N."""

    twists: tuple

    def __post_init__(self):
        object.__setattr__(self, "twists", tuple(self.twists))
        if not self.twists:
            raise ValueError("ScoreEstimate must hold at least one twist")

    @property
    def n(self) -> int:
        return len(self.twists)

    def as_array(self) -> np.ndarray:
        return np.stack([t.as_array() for t in self.twists], axis=0)

    @staticmethod
    def from_array(a) -> "ScoreEstimate":
        return ScoreEstimate(tuple(Twist.from_array(row) for row in np.asarray(a)))


# ---------------------------------------------------------------------------
# Forward perturbation and loss
# ---------------------------------------------------------------------------


def perturb_batch(poses: PoseArray, sigma, rng: np.random.Generator):
    """Perturb (B, N, 3) poses with per-sample noise scale ``sigma`` (scalar or (B,)).

    Returns (perturbed poses, surrogate-score targets -z/sigma^2).
    """
    poses = np.asarray(poses, dtype=np.float64)
    sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), poses.shape[:1])
    z = rng.standard_normal(poses.shape) * sig[:, None, None]
    perturbed = compose_arr(poses, exp_map_arr(z))
    targets = -z / sig[:, None, None] ** 2
    return perturbed, targets


def perturb_tuple(x: PoseTuple, schedule: NoiseSchedule, i: int, rng: np.random.Generator):
    """Perturb each primitive independently with sigma_i; targets are -z_n / sigma_i^2."""
    sigma = schedule.sigma(i)
    pert, tgt = perturb_batch(x.as_array()[None], sigma, rng)
    return PoseTuple.from_array(pert[0]), ScoreEstimate.from_array(tgt[0])


def dsm_loss_batch(predicted: np.ndarray, target: np.ndarray, sigma) -> float:
    """Mean over the batch of sum_n 0.5 ||sigma (s_hat_n - s_n)||^2."""
    predicted = np.asarray(predicted, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if predicted.shape != target.shape:
        raise ValueError(f"shape mismatch: {predicted.shape} vs {target.shape}")
    sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), predicted.shape[:1])
    diff = (predicted - target) * sig[:, None, None]
    return float(0.5 * np.sum(diff**2) / predicted.shape[0])


def dsm_loss_n(predicted: ScoreEstimate, target: ScoreEstimate, sigma: float) -> float:
    """DSM loss on SE(2)^N: the sum of per-primitive sigma^2-weighted DSM terms."""
    if predicted.n != target.n:
        raise ValueError(f"primitive count mismatch: {predicted.n} vs {target.n}")
    return dsm_loss_batch(predicted.as_array()[None], target.as_array()[None], sigma)


# ---------------------------------------------------------------------------
# Reverse process
# ---------------------------------------------------------------------------


def reverse_step_batch(
    poses: PoseArray,
    scores: np.ndarray,
    eps: float,
    noise: np.ndarray,
) -> PoseArray:
    """One geodesic-random-walk update: x <- x o Exp(eps * s + sqrt(2 eps) * z)."""
    step = eps * np.asarray(scores, dtype=np.float64) + np.sqrt(2.0 * eps) * noise
    return compose_arr(poses, exp_map_arr(step))


def reverse_step(
    x_tilde: PoseTuple,
    scores: ScoreEstimate,
    schedule: NoiseSchedule,
    i: int,
    rng: np.random.Generator,
    noise_scale: float = 1.0,
) -> PoseTuple:
    """Per-primitive reverse update at step i; ``noise_scale=0`` gives the
    deterministic (score-only) move."""
    if scores.n != x_tilde.n:
        raise ValueError(f"primitive count mismatch: {scores.n} vs {x_tilde.n}")
    eps = schedule.step_size(i)
    z = rng.standard_normal((x_tilde.n, 3)) * noise_scale
    out = reverse_step_batch(x_tilde.as_array()[None], scores.as_array()[None], eps, z[None])
    return PoseTuple.from_array(out[0])


def translation_box_projection(limit: float) -> Callable[[PoseArray], PoseArray]:
    """Clamp chain translations to [-limit, limit] per axis.

    Inference-time prior knowledge: valid poses live in the (normalized)
    workspace, and a learned score is only trustworthy inside the envelope
    it was trained on.  The clamp is inactive for chains that stay inside.
    """

    def project(poses: PoseArray) -> PoseArray:
        out = poses.copy()
        out[..., :2] = np.clip(out[..., :2], -limit, limit)
        return out

    return project


def sample_batch(
    score_fn: Callable[[PoseArray, int], np.ndarray],
    schedule: NoiseSchedule,
    n: int,
    rngs: Sequence[np.random.Generator],
    steps_per_level: int = 1,
    final_denoise: bool = True,
    step_indices: Sequence[int] | None = None,
    project: Callable[[PoseArray], PoseArray] | None = None,
) -> PoseArray:
    """Run B annealed chains; chain b draws all its noise from ``rngs[b]``.

    ``score_fn(poses, i)`` receives the full (B, N, 3) batch and the 1-based
    step index.  ``step_indices`` overrides the index passed to ``score_fn``
    per level (used when a model trained at some L runs on a subsampled
    schedule and must see its original conditioning indices).  ``project``,
    when given, is applied after the prior draw and after every update
    (e.g. translation_box_projection).

    Results are independent of how chains are grouped into batches: chain b
    consumes rngs[b] in a fixed order (prior draw, then one draw per
    reverse step).
    """
    if steps_per_level < 1:
        raise ValueError("steps_per_level must be >= 1")
    b = len(rngs)
    sigma_l = schedule.sigmas[-1]
    x = exp_map_arr(
        np.stack([rng.standard_normal((n, 3)) * sigma_l for rng in rngs], axis=0)
    )
    if project is not None:
        x = project(x)
    levels = list(range(schedule.L, 0, -1))
    for i in levels:
        cond_i = step_indices[i - 1] if step_indices is not None else i
        eps = schedule.step_size(i)
        for _ in range(steps_per_level):
            scores = score_fn(x, cond_i)
            noise = np.stack([rng.standard_normal((n, 3)) for rng in rngs], axis=0)
            x = reverse_step_batch(x, scores, eps, noise)
            if project is not None:
                x = project(x)
    if final_denoise:
        cond_i = step_indices[0] if step_indices is not None else 1
        scores = score_fn(x, cond_i)
        x = compose_arr(x, exp_map_arr(schedule.step_size(1) * scores))
    return x


def sample(
    score_fn: Callable[[PoseTuple, int], ScoreEstimate],
    schedule: NoiseSchedule,
    n: int,
    rng: np.random.Generator,
    steps_per_level: int = 1,
    final_denoise: bool = True,
) -> PoseTuple:
    """Single-chain annealed sampling from the prior Exp(z), z ~ N(0, sigma_L^2 I)."""

    def batched(poses, i):
        est = score_fn(PoseTuple.from_array(poses[0]), i)
        if est.n != n:
            raise ValueError(f"score_fn returned {est.n} twists, expected {n}")
        return est.as_array()[None]

    out = sample_batch(
        batched, schedule, n, [rng], steps_per_level=steps_per_level,
        final_denoise=final_denoise,
    )
    return PoseTuple.from_array(out[0])
