"""SE(2) group and algebra operations.

Planar rigid motions are represented as ``Se2Pose`` (rotation angle plus 2D
translation) and tangent elements as ``Twist`` (rho_x, rho_y, omega).  The
module provides the exponential/logarithm maps, group composition, the
group-Gaussian perturbation used for score training, and both the exact and
surrogate Stein scores of that perturbation kernel.

Two API levels coexist:

* scalar functions operating on ``Se2Pose`` / ``Twist`` values, and
* vectorized ``*_arr`` functions operating on ``(..., 3)`` float arrays with
  component order ``[x, y, theta]`` for poses and ``[rho_x, rho_y, omega]``
  for twists.  These back every hot path (training, sampling, evaluation).

Angles are eagerly wrapped into (-pi, pi] so equal poses have equal
representations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TAU = 2.0 * math.pi

# Below this |theta| the closed forms for V(theta) and V(theta)^-1 are
# replaced by 4-term Taylor expansions to avoid cancellation.
SMALL_ANGLE = 1e-7

# |theta| within this distance of pi means the principal logarithm is about
# to jump branches; the scalar log_map refuses rather than guessing.
BRANCH_EPS = 1e-9


class BranchAmbiguityError(ValueError):
    """Raised when a logarithm is requested too close to the cut at |theta| = pi."""


def wrap_angle(theta):
    """Wrap an angle (scalar or array) into (-pi, pi]."""
    w = np.mod(theta, TAU)
    w = np.where(w > math.pi, w - TAU, w)
    if np.ndim(theta) == 0:
        return float(w)
    return w


@dataclass(frozen=True)
class Se2Pose:
    """Element of SE(2): rotation ``theta`` (radians) and translation (tx, ty).

    ``theta`` is wrapped into (-pi, pi] on construction.
    """

    theta: float
    tx: float
    ty: float

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))
        object.__setattr__(self, "tx", float(self.tx))
        object.__setattr__(self, "ty", float(self.ty))

    @staticmethod
    def identity() -> "Se2Pose":
        return Se2Pose(0.0, 0.0, 0.0)

    def as_array(self) -> np.ndarray:
        """Pose as ``[tx, ty, theta]`` (the array-API layout)."""
        return np.array([self.tx, self.ty, self.theta], dtype=np.float64)

    @staticmethod
    def from_array(a) -> "Se2Pose":
        a = np.asarray(a, dtype=np.float64)
        return Se2Pose(theta=a[2], tx=a[0], ty=a[1])

    def apply(self, point) -> np.ndarray:
        """Transform a 2D point (or (..., 2) array of points) by this pose."""
        p = np.asarray(point, dtype=np.float64)
        c, s = math.cos(self.theta), math.sin(self.theta)
        x = c * p[..., 0] - s * p[..., 1] + self.tx
        y = s * p[..., 0] + c * p[..., 1] + self.ty
        return np.stack([x, y], axis=-1)


@dataclass(frozen=True)
class Twist:
    """Element of the Lie algebra se(2): translation part (rho_x, rho_y), rotation omega."""

    rho_x: float
    rho_y: float
    omega: float

    def __post_init__(self):
        object.__setattr__(self, "rho_x", float(self.rho_x))
        object.__setattr__(self, "rho_y", float(self.rho_y))
        object.__setattr__(self, "omega", float(self.omega))

    def norm(self) -> float:
        return math.sqrt(self.rho_x**2 + self.rho_y**2 + self.omega**2)

    def as_array(self) -> np.ndarray:
        """Twist as ``[rho_x, rho_y, omega]``."""
        return np.array([self.rho_x, self.rho_y, self.omega], dtype=np.float64)

    @staticmethod
    def from_array(a) -> "Twist":
        a = np.asarray(a, dtype=np.float64)
        return Twist(rho_x=a[0], rho_y=a[1], omega=a[2])


# ---------------------------------------------------------------------------
# V(theta) and its inverse: the 2x2 block coupling rotation into translation
# in the SE(2) exponential,  t = V(theta) @ rho.
# ---------------------------------------------------------------------------


def _v_coeffs(theta):
    """Return (a, b) with V(theta) = [[a, -b], [b, a]].

    a = sin(theta)/theta, b = (1 - cos(theta))/theta, with Taylor fallbacks
    near zero.  Works on scalars and arrays.
    """
    th = np.asarray(theta, dtype=np.float64)
    small = np.abs(th) < SMALL_ANGLE
    th_safe = np.where(small, 1.0, th)
    a = np.where(small, 1.0 - th**2 / 6.0 + th**4 / 120.0 - th**6 / 5040.0,
                 np.sin(th_safe) / th_safe)
    b = np.where(small, th / 2.0 - th**3 / 24.0 + th**5 / 720.0 - th**7 / 40320.0,
                 (1.0 - np.cos(th_safe)) / th_safe)
    return a, b


def _v_inv_coeffs(theta):
    """Return (a, b) with V(theta)^-1 = [[a, b], [-b, a]].

    a = (theta/2) * cot(theta/2), b = theta/2, with a Taylor fallback for a
    near zero.
    """
    th = np.asarray(theta, dtype=np.float64)
    small = np.abs(th) < SMALL_ANGLE
    th_safe = np.where(small, 1.0, th)
    half = th_safe / 2.0
    a = np.where(small, 1.0 - th**2 / 12.0 - th**4 / 720.0 - th**6 / 30240.0,
                 half * np.cos(half) / np.sin(half))
    return a, th / 2.0


# ---------------------------------------------------------------------------
# Vectorized core (poses as [x, y, theta], twists as [rho_x, rho_y, omega])
# ---------------------------------------------------------------------------


def exp_map_arr(z: np.ndarray) -> np.ndarray:
    """SE(2) exponential on a (..., 3) twist array -> (..., 3) pose array.

    The translation uses V evaluated at the raw (unwrapped) omega; only the
    stored angle is wrapped.
    """
    z = np.asarray(z, dtype=np.float64)
    om = z[..., 2]
    a, b = _v_coeffs(om)
    out = np.empty_like(z)
    out[..., 0] = a * z[..., 0] - b * z[..., 1]
    out[..., 1] = b * z[..., 0] + a * z[..., 1]
    out[..., 2] = wrap_angle(om)
    return out


def log_map_arr(p: np.ndarray) -> np.ndarray:
    """Principal SE(2) logarithm on a (..., 3) pose array.

    Total on (-pi, pi]; unlike the scalar ``log_map`` it does not raise near
    the branch cut (sampling paths must never abort), the caller accepts the
    principal value.
    """
    p = np.asarray(p, dtype=np.float64)
    th = p[..., 2]
    a, b = _v_inv_coeffs(th)
    out = np.empty_like(p)
    out[..., 0] = a * p[..., 0] + b * p[..., 1]
    out[..., 1] = -b * p[..., 0] + a * p[..., 1]
    out[..., 2] = th
    return out


def compose_arr(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Group product on (..., 3) pose arrays (broadcasting)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c, s = np.cos(a[..., 2]), np.sin(a[..., 2])
    out = np.empty(np.broadcast_shapes(a.shape, b.shape), dtype=np.float64)
    out[..., 0] = a[..., 0] + c * b[..., 0] - s * b[..., 1]
    out[..., 1] = a[..., 1] + s * b[..., 0] + c * b[..., 1]
    out[..., 2] = wrap_angle(a[..., 2] + b[..., 2])
    return out


def inverse_arr(p: np.ndarray) -> np.ndarray:
    """Group inverse on (..., 3) pose arrays."""
    p = np.asarray(p, dtype=np.float64)
    c, s = np.cos(p[..., 2]), np.sin(p[..., 2])
    out = np.empty_like(p)
    out[..., 0] = -(c * p[..., 0] + s * p[..., 1])
    out[..., 1] = -(-s * p[..., 0] + c * p[..., 1])
    out[..., 2] = wrap_angle(-p[..., 2])
    return out


# ---------------------------------------------------------------------------
# Scalar operations
# ---------------------------------------------------------------------------


def exp_map(z: Twist) -> Se2Pose:
    """Exponential map se(2) -> SE(2).

    theta = wrap(omega), translation = V(omega) @ (rho_x, rho_y) with
    V(theta) = (1/theta) [[sin t, -(1-cos t)], [1-cos t, sin t]] and V(0) = I.
    """
    return Se2Pose.from_array(exp_map_arr(z.as_array()))


def log_map(p: Se2Pose) -> Twist:
    """Principal logarithm SE(2) -> se(2), inverse of exp_map.

    Raises:
        BranchAmbiguityError: if |theta| is within 1e-9 of pi, where the
            principal branch is ambiguous; the caller decides how to proceed.
    """
    if abs(p.theta) > math.pi - BRANCH_EPS:
        raise BranchAmbiguityError(
            f"log_map near branch cut: |theta|={abs(p.theta):.12f} within "
            f"{BRANCH_EPS:g} of pi"
        )
    return Twist.from_array(log_map_arr(p.as_array()))


def compose(a: Se2Pose, b: Se2Pose) -> Se2Pose:
    """SE(2) product: theta = wrap(a.theta + b.theta), t = a.t + R(a.theta) b.t."""
    return Se2Pose.from_array(compose_arr(a.as_array(), b.as_array()))


def inverse(a: Se2Pose) -> Se2Pose:
    """Group inverse, satisfying compose(a, inverse(a)) = identity."""
    return Se2Pose.from_array(inverse_arr(a.as_array()))


# ---------------------------------------------------------------------------
# Right Jacobian and scores
# ---------------------------------------------------------------------------


def right_jacobian(z: Twist) -> np.ndarray:
    """Closed-form right Jacobian J_r of SE(2) at twist z (3x3, twist order).

    J_r = sum_k (-ad_z)^k / (k+1)!  evaluated in closed form.  With
    rho = (rho_x, rho_y) and w = omega:

        J_r = [[ V(-w)            , -W(-w) @ (rho_y, -rho_x) ],
               [ 0      , 0       , 1                        ]]

    where W(t) = [[(1-cos t)/t^2, (sin t - t)/t^2],
                  [(t - sin t)/t^2, (1-cos t)/t^2]].
    """
    if abs(wrap_angle(z.omega)) > math.pi - BRANCH_EPS or abs(z.omega) >= math.pi:
        raise BranchAmbiguityError(
            f"right_jacobian near branch cut: |omega|={abs(z.omega):.12f}"
        )
    w = -z.omega
    a, b = _v_coeffs(w)
    if abs(w) < SMALL_ANGLE:
        c = 0.5 - w**2 / 24.0 + w**4 / 720.0
        d = -w / 6.0 + w**3 / 120.0 - w**5 / 5040.0
    else:
        c = (1.0 - math.cos(w)) / w**2
        d = (math.sin(w) - w) / w**2
    v = np.array([z.rho_y, -z.rho_x])
    jr = np.zeros((3, 3), dtype=np.float64)
    jr[0, 0] = a
    jr[0, 1] = -b
    jr[1, 0] = b
    jr[1, 1] = a
    jr[0:2, 2] = -np.array([[c, d], [-d, c]]) @ v
    jr[2, 2] = 1.0
    return jr


def right_jacobian_inv_transpose(z: Twist) -> np.ndarray:
    """J_r^{-T}(z) for SE(2); the factor relating the kernel score to -z/sigma^2."""
    return np.linalg.inv(right_jacobian(z)).T


def sample_perturbed(x: Se2Pose, sigma: float, rng: np.random.Generator):
    """Perturb ``x`` by a group-Gaussian step: x_tilde = x o Exp(z), z ~ N(0, sigma^2 I).

    Returns (x_tilde, z) so training targets can use the exact draw.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    z = Twist.from_array(rng.normal(0.0, sigma, size=3))
    return compose(x, exp_map(z)), z


def kernel_log_density(x: Se2Pose, x_tilde: Se2Pose, sigma: float) -> float:
    """Unnormalized log-density of the group-Gaussian kernel at x_tilde given x.

    -0.5 ||Log(x^-1 x_tilde)||^2 / sigma^2; the normalization constant is
    score-irrelevant and deliberately not computed.
    """
    z = log_map(compose(inverse(x), x_tilde))
    return -0.5 * float(z.as_array() @ z.as_array()) / sigma**2


def surrogate_score(x: Se2Pose, x_tilde: Se2Pose, sigma: float) -> Twist:
    """Surrogate Stein score -z / sigma^2 with z = Log(x^-1 x_tilde)."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    z = log_map(compose(inverse(x), x_tilde))
    return Twist.from_array(-z.as_array() / sigma**2)


def exact_score(x: Se2Pose, x_tilde: Se2Pose, sigma: float) -> Twist:
    """Exact kernel score -J_r^{-T}(z) z / sigma^2 (test and analysis use)."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    z = log_map(compose(inverse(x), x_tilde))
    s = -right_jacobian_inv_transpose(z) @ z.as_array() / sigma**2
    return Twist.from_array(s)
