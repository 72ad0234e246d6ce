"""Planar rigid-body poses and the small amount of Lie-ish algebra the rest
of the package needs.

A pose is (x, y, theta) with theta kept in (-pi, pi].  Composition follows the
usual convention: ``a.compose(b)`` is "b expressed in a's frame, pushed out to
the world", and ``b.between(a)`` ( = a ⊖ b ) is "a seen from b".

Array variants (``compose_xyt`` etc.) operate on (..., 3) float arrays and are
what the optimizer hot path uses; the ``Pose2`` methods are the friendly
scalar API.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Pose2",
    "GaussianPose",
    "wrap_angle",
    "wrap_angle_array",
    "angle_sq_diff",
    "pose_distance",
    "compose_xyt",
    "between_xyt",
    "inverse_xyt",
    "jacobians_compose",
    "jacobians_between",
    "symmetrize",
    "repair_psd",
]


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi].

    Values already in range pass through bit-exact (wrapping is idempotent),
    which keeps serialization round trips and tight residual math honest.
    """
    if -math.pi < a <= math.pi:
        return a
    w = math.atan2(math.sin(a), math.cos(a))
    # atan2 can land exactly on -pi; fold it onto the closed +pi end.
    return math.pi if w <= -math.pi else w


def wrap_angle_array(a: np.ndarray) -> np.ndarray:
    """Vectorized :func:`wrap_angle`."""
    a = np.asarray(a, dtype=float)
    ok = (a > -np.pi) & (a <= np.pi)
    if ok.all():
        return a
    w = np.arctan2(np.sin(a), np.cos(a))
    w = np.where(w <= -np.pi, np.pi, w)
    return np.where(ok, a, w)


@dataclass(frozen=True)
class Pose2:
    """A planar pose.  theta is normalized to (-pi, pi] on construction."""

    x: float
    y: float
    theta: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    def compose(self, other: "Pose2") -> "Pose2":
        """self ⊕ other: `other` interpreted in this pose's frame."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )

    def inverse(self) -> "Pose2":
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2(-(c * self.x + s * self.y), s * self.x - c * self.y, -self.theta)

    def between(self, other: "Pose2") -> "Pose2":
        """other ⊖ self: `other` expressed in this pose's frame."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        dx, dy = other.x - self.x, other.y - self.y
        return Pose2(c * dx + s * dy, -s * dx + c * dy, other.theta - self.theta)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta], dtype=float)

    @staticmethod
    def from_array(v: np.ndarray) -> "Pose2":
        return Pose2(float(v[0]), float(v[1]), float(v[2]))

    def position(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=float)


def compose_xyt(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Compose (..., 3) pose arrays: a ⊕ b."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    c, s = np.cos(a[..., 2]), np.sin(a[..., 2])
    out = np.empty(np.broadcast_shapes(a.shape, b.shape), dtype=float)
    out[..., 0] = a[..., 0] + c * b[..., 0] - s * b[..., 1]
    out[..., 1] = a[..., 1] + s * b[..., 0] + c * b[..., 1]
    out[..., 2] = wrap_angle_array(a[..., 2] + b[..., 2])
    return out


def inverse_xyt(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    c, s = np.cos(a[..., 2]), np.sin(a[..., 2])
    out = np.empty(a.shape, dtype=float)
    out[..., 0] = -(c * a[..., 0] + s * a[..., 1])
    out[..., 1] = s * a[..., 0] - c * a[..., 1]
    out[..., 2] = wrap_angle_array(-a[..., 2])
    return out


def between_xyt(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """b ⊖ a on (..., 3) arrays: b expressed in a's frame."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    c, s = np.cos(a[..., 2]), np.sin(a[..., 2])
    dx = b[..., 0] - a[..., 0]
    dy = b[..., 1] - a[..., 1]
    out = np.empty(np.broadcast_shapes(a.shape, b.shape), dtype=float)
    out[..., 0] = c * dx + s * dy
    out[..., 1] = -s * dx + c * dy
    out[..., 2] = wrap_angle_array(b[..., 2] - a[..., 2])
    return out


def jacobians_compose(a: Pose2, b: Pose2) -> tuple[np.ndarray, np.ndarray]:
    """Analytic Jacobians of a ⊕ b w.r.t. a and b.

    With c = cos(a.theta), s = sin(a.theta):

        d(a⊕b)/da = [[1, 0, -s*bx - c*by],    d(a⊕b)/db = [[c, -s, 0],
                      [0, 1,  c*bx - s*by],                  [s,  c, 0],
                      [0, 0,  1          ]]                  [0,  0, 1]]
    """
    c, s = math.cos(a.theta), math.sin(a.theta)
    ja = np.array(
        [
            [1.0, 0.0, -s * b.x - c * b.y],
            [0.0, 1.0, c * b.x - s * b.y],
            [0.0, 0.0, 1.0],
        ]
    )
    jb = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return ja, jb


def jacobians_between(a: Pose2, b: Pose2) -> tuple[np.ndarray, np.ndarray]:
    """Analytic Jacobians of b ⊖ a (a.between(b)) w.r.t. a and b."""
    c, s = math.cos(a.theta), math.sin(a.theta)
    r = a.between(b)
    ja = np.array(
        [
            [-c, -s, r.y],
            [s, -c, -r.x],
            [0.0, 0.0, -1.0],
        ]
    )
    jb = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    return ja, jb


def angle_sq_diff(a: float, b: float = 0.0) -> float:
    """Squared wrapped angular difference; continuous across +-pi."""
    d = wrap_angle(a - b)
    return d * d


def pose_distance(p: Pose2, q: Pose2, angle_weight: float) -> float:
    """Squared Euclidean position gap plus weighted squared heading gap."""
    dx, dy = p.x - q.x, p.y - q.y
    return dx * dx + dy * dy + angle_weight * angle_sq_diff(p.theta, q.theta)


def symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def repair_psd(m: np.ndarray, floor: float = 0.0) -> np.ndarray:
    """Clamp eigenvalues of a symmetric matrix to at least `floor`.

    Used wherever covariance arithmetic (differences of PSD matrices, sampled
    scatters) can go slightly indefinite through rounding.
    """
    m = symmetrize(np.asarray(m, dtype=float))
    w, v = np.linalg.eigh(m)
    if w.min() >= floor:
        return m
    w = np.maximum(w, floor)
    return symmetrize((v * w) @ v.T)


@dataclass(frozen=True)
class GaussianPose:
    """A pose with 3x3 covariance (x, y, theta order)."""

    mean: Pose2
    cov: np.ndarray

    def __post_init__(self) -> None:
        cov = np.asarray(self.cov, dtype=float)
        if cov.shape != (3, 3):
            raise ValueError(f"covariance must be 3x3, got {cov.shape}")
        object.__setattr__(self, "cov", cov)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GaussianPose):
            return NotImplemented
        return self.mean == other.mean and np.array_equal(self.cov, other.cov)
