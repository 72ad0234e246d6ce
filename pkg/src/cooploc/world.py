"""Ground-truth world: kinematics, steering, and sensor models.

Vehicles follow polyline paths under unicycle kinematics with pure-pursuit
steering.  Three sensors feed the estimator:

* accumulated dead reckoning (odometry integrated from the true start pose,
  with noise growing in the distance travelled),
* sparse absolute pose fixes ("map matches") with additive global noise,
* a planar range scanner returning rectangle returns per visible vehicle,
  segmented by ground truth (no cross-vehicle occlusion is modelled).
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field

import numpy as np

from .assoc import VehicleGeometry
from .errors import TimestampMismatch
from .se2 import GaussianPose, Pose2, compose_xyt, jacobians_compose, wrap_angle

__all__ = [
    "OdometryNoiseModel",
    "MapNoiseModel",
    "LidarModel",
    "PolylinePath",
    "Vehicle",
    "TruthLog",
    "unicycle_increment",
    "advance_pose",
    "pure_pursuit_omega",
    "sense_map",
    "lidar_scan",
]


# ----------------------------------------------------------------------
# noise / sensor parameter bundles


@dataclass(frozen=True)
class OdometryNoiseModel:
    """Per-step odometry noise, linear in the arc length of the step."""

    sigma_pos_per_m: float = 0.05
    sigma_theta_per_m: float = 0.012


@dataclass(frozen=True)
class MapNoiseModel:
    sigma_pos: float = 0.5
    sigma_theta: float = math.radians(2.0)


@dataclass(frozen=True)
class LidarModel:
    sigma_range: float = 0.05
    max_range: float = 30.0
    fov_half: float = math.pi / 2
    angular_resolution: float = math.radians(0.5)

    def bearings(self) -> np.ndarray:
        n = int(round(2 * self.fov_half / self.angular_resolution)) + 1
        return np.linspace(-self.fov_half, self.fov_half, n)


# ----------------------------------------------------------------------
# kinematics


def unicycle_increment(v: float, omega: float, dt: float) -> Pose2:
    """Exact body-frame displacement of a unicycle over one step.

    Constant (v, omega) trace a circular arc of radius v/omega; the straight
    case is the omega -> 0 limit.
    """
    if abs(omega) < 1e-12:
        return Pose2(v * dt, 0.0, omega * dt)
    r = v / omega
    a = omega * dt
    return Pose2(r * math.sin(a), r * (1.0 - math.cos(a)), a)


def advance_pose(pose: Pose2, v: float, omega: float, dt: float) -> Pose2:
    return pose.compose(unicycle_increment(v, omega, dt))


def pure_pursuit_omega(
    pose: Pose2, target: np.ndarray, v: float, max_omega: float = 1.5
) -> float:
    """Turn rate steering toward a lookahead point.

    Curvature of the arc through the target: kappa = 2 sin(alpha) / d with
    alpha the bearing of the target in the body frame.
    """
    dx = target[0] - pose.x
    dy = target[1] - pose.y
    d = math.hypot(dx, dy)
    if d < 1e-9:
        return 0.0
    alpha = wrap_angle(math.atan2(dy, dx) - pose.theta)
    kappa = 2.0 * math.sin(alpha) / d
    return float(np.clip(v * kappa, -max_omega, max_omega))


class PolylinePath:
    """Piecewise-linear reference path parameterized by arc length."""

    def __init__(self, points: np.ndarray) -> None:
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise ValueError("a path needs at least two 2-D points")
        self.points = pts
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        if np.any(seg <= 0):
            raise ValueError("path has a zero-length segment")
        self._cum = np.concatenate([[0.0], np.cumsum(seg)])

    @property
    def length(self) -> float:
        return float(self._cum[-1])

    def point_at(self, s: float) -> np.ndarray:
        s = min(max(s, 0.0), self.length)
        i = min(bisect.bisect_right(self._cum, s), len(self._cum) - 1)
        if i == 0:
            return self.points[0].copy()
        s0, s1 = self._cum[i - 1], self._cum[i]
        w = (s - s0) / (s1 - s0)
        return (1.0 - w) * self.points[i - 1] + w * self.points[i]

    def heading_at(self, s: float) -> float:
        eps = min(0.5, self.length / 4)
        a = self.point_at(min(max(s, 0.0), self.length - eps))
        b = self.point_at(min(max(s, 0.0) + eps, self.length))
        return math.atan2(b[1] - a[1], b[0] - a[0])


# ----------------------------------------------------------------------
# vehicles


@dataclass
class Vehicle:
    """Ground-truth state of one simulated vehicle plus its dead reckoning.

    `odom_mean`/`odom_cov` accumulate the noisy odometry from the true start
    pose, which is exactly what the vehicle broadcasts in its
    origin-referenced odometry packets.
    """

    vid: int
    geometry: VehicleGeometry
    path: PolylinePath
    speed: float
    lookahead: float = 4.0
    s: float = 0.0
    pose: Pose2 = field(default_factory=lambda: Pose2(0.0, 0.0, 0.0))
    odom_mean: np.ndarray = field(default_factory=lambda: np.zeros(3))
    odom_cov: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))

    @classmethod
    def on_path(
        cls,
        vid: int,
        geometry: VehicleGeometry,
        path: PolylinePath,
        speed: float,
        s0: float = 0.0,
        lookahead: float = 4.0,
    ) -> "Vehicle":
        start = path.point_at(s0)
        pose = Pose2(start[0], start[1], path.heading_at(s0))
        return cls(
            vid,
            geometry,
            path,
            speed,
            lookahead=lookahead,
            s=s0,
            pose=pose,
            odom_mean=pose.as_array(),
        )

    def step(
        self, dt: float, rng: np.random.Generator, noise: OdometryNoiseModel
    ) -> GaussianPose:
        """Advance the truth one tick and integrate noisy dead reckoning.

        Returns the accumulated origin-referenced odometry after the step.
        """
        target = self.path.point_at(self.s + self.lookahead)
        omega = pure_pursuit_omega(self.pose, target, self.speed)
        inc_true = unicycle_increment(self.speed, omega, dt)
        self.pose = self.pose.compose(inc_true)
        self.s += self.speed * dt

        arc = abs(self.speed) * dt
        sp = noise.sigma_pos_per_m * arc
        st = noise.sigma_theta_per_m * arc
        eps = rng.normal(0.0, [sp, sp, st])
        inc = inc_true.as_array() + eps
        inc[2] = wrap_angle(inc[2])
        q = np.diag([sp * sp, sp * sp, st * st])
        j1, j2 = jacobians_compose(Pose2.from_array(self.odom_mean), Pose2.from_array(inc))
        self.odom_cov = j1 @ self.odom_cov @ j1.T + j2 @ q @ j2.T
        self.odom_mean = compose_xyt(self.odom_mean, inc)
        return GaussianPose(Pose2.from_array(self.odom_mean), self.odom_cov.copy())


def sense_map(
    truth: Pose2, rng: np.random.Generator, model: MapNoiseModel
) -> GaussianPose:
    """Absolute pose fix: truth plus additive global-frame noise."""
    n = rng.normal(0.0, [model.sigma_pos, model.sigma_pos, model.sigma_theta])
    mean = Pose2(truth.x + n[0], truth.y + n[1], wrap_angle(truth.theta + n[2]))
    cov = np.diag(
        [model.sigma_pos**2, model.sigma_pos**2, model.sigma_theta**2]
    )
    return GaussianPose(mean, cov)


# ----------------------------------------------------------------------
# lidar


def lidar_scan(
    observer: Pose2,
    targets: list[tuple[int, Pose2, VehicleGeometry]],
    model: LidarModel,
    rng: np.random.Generator,
) -> dict[int, np.ndarray]:
    """Rectangle returns per target, in the observer's body frame.

    Every bearing in the field of view casts one ray; a ray contributes a
    return on a target when it intersects that target's footprint rectangle
    within range (slab test, vectorized over rays).  Segmentation is by
    ground truth and targets do not occlude each other.  Range noise is
    applied along the beam.  Targets with no returns are omitted.
    """
    bearings = model.bearings()
    body_dirs = np.column_stack([np.cos(bearings), np.sin(bearings)])
    co, so = math.cos(observer.theta), math.sin(observer.theta)
    world_dirs = body_dirs @ np.array([[co, so], [-so, co]])
    origin = observer.position()

    out: dict[int, np.ndarray] = {}
    for tid, pose, geom in targets:
        ct, st = math.cos(pose.theta), math.sin(pose.theta)
        rot = np.array([[ct, st], [-st, ct]])  # world -> target frame
        o = rot @ (origin - pose.position())
        d = world_dirs @ rot.T
        # Avoid 0/0 in the slab test; nudging a dead-parallel component by
        # 1e-12 shifts intersections by far less than the range noise.
        dx = np.where(np.abs(d[:, 0]) < 1e-12, 1e-12, d[:, 0])
        dy = np.where(np.abs(d[:, 1]) < 1e-12, 1e-12, d[:, 1])
        hl, hw = geom.length / 2, geom.width / 2
        tx1 = (-hl - o[0]) / dx
        tx2 = (hl - o[0]) / dx
        ty1 = (-hw - o[1]) / dy
        ty2 = (hw - o[1]) / dy
        tmin = np.maximum(np.minimum(tx1, tx2), np.minimum(ty1, ty2))
        tmax = np.minimum(np.maximum(tx1, tx2), np.maximum(ty1, ty2))
        hit = (tmax >= tmin) & (tmin > 1e-9) & (tmin <= model.max_range)
        n_hit = int(np.count_nonzero(hit))
        if n_hit == 0:
            continue
        r = tmin[hit] + rng.normal(0.0, model.sigma_range, n_hit)
        out[tid] = r[:, None] * body_dirs[hit]
    return out


# ----------------------------------------------------------------------
# truth bookkeeping


class TruthLog:
    """True poses indexed by (vehicle, timestamp) for error evaluation."""

    def __init__(self) -> None:
        self._poses: dict[tuple[int, float], Pose2] = {}

    def record(self, vehicle: int, t: float, pose: Pose2) -> None:
        self._poses[(vehicle, t)] = pose

    def lookup(self, vehicle: int, t: float) -> Pose2:
        try:
            return self._poses[(vehicle, t)]
        except KeyError:
            raise TimestampMismatch(
                f"no ground truth recorded for vehicle {vehicle} at t={t}"
            ) from None

    def error(self, vehicle: int, t: float, est: Pose2) -> tuple[float, float]:
        """(position error, absolute heading error) against the truth."""
        truth = self.lookup(vehicle, t)
        dp = math.hypot(est.x - truth.x, est.y - truth.y)
        dth = abs(wrap_angle(est.theta - truth.theta))
        return dp, dth
