"""L-shape fitting and relative-pose extraction from LIDAR point clusters.

A vehicle seen by a planar LIDAR presents two perpendicular sides meeting at
the nearest corner.  `fit_lshape` recovers that corner by scanning side
orientation over a coarse grid, assigning each point to the nearer of two
perpendicular lines, refitting the line offsets in closed form, and polishing
the winning angles with a bounded scalar minimization.

The fitted corner is canonicalized so that the cluster extends from it along
+theta0 and +(theta0 + pi/2); that convention is what makes the heading
option index p pair correctly with the corner offsets in
:class:`~cooploc.assoc.VehicleGeometry`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from .assoc import CornerCandidate, LShapeHypothesisSet, VehicleGeometry, infer_candidate_poses
from .errors import DegenerateCluster
from .se2 import Pose2, angle_sq_diff, repair_psd, wrap_angle, wrap_angle_array

__all__ = [
    "HypothesisSelectionConfig",
    "CovarianceSamplingConfig",
    "fit_lshape",
    "select_best_hypothesis",
    "relative_mean",
    "relative_covariance",
]

log = logging.getLogger(__name__)

_MIN_POINTS = 4


@dataclass(frozen=True)
class HypothesisSelectionConfig:
    fit_weight: float = 1.0  # on the corner's point-fit residual
    heading_weight: float = 1.0  # on squared heading gap to the prior estimate


@dataclass(frozen=True)
class CovarianceSamplingConfig:
    """Grid sampling around the fitted relative pose.

    `n_samples` is realized as the nearest integer cube (125 -> 5 per axis).
    `sigma` is the point-noise scale of the Gaussian likelihood; it defaults
    to the simulator's LIDAR range noise.
    """

    half_width: tuple[float, float, float] = (0.3, 0.3, 0.15)
    n_samples: int = 125
    sigma: float = 0.03

    def axis_counts(self) -> int:
        n = max(1, round(self.n_samples ** (1.0 / 3.0)))
        return n


def _two_line_fit(u: np.ndarray, v: np.ndarray, refits: int = 3):
    """Best two-perpendicular-line fit for fixed axes.

    u, v are point coordinates along the two candidate side directions.
    Tries all four extreme-corner initializations, alternates
    nearest-line assignment with closed-form offset refits, and returns
    (error, u0, v0, mask) where mask marks points assigned to the line of
    constant v (the side running along the u axis).
    """
    lo_u, hi_u = u.min(), u.max()
    lo_v, hi_v = v.min(), v.max()
    u0 = np.array([lo_u, lo_u, hi_u, hi_u])
    v0 = np.array([lo_v, hi_v, lo_v, hi_v])
    U = u[:, None]
    V = v[:, None]
    for _ in range(refits):
        on_u = np.abs(V - v0) <= np.abs(U - u0)  # closer to the line of constant v
        cnt_u = on_u.sum(axis=0)
        cnt_v = len(u) - cnt_u
        sum_v = np.where(on_u, V, 0.0).sum(axis=0)
        sum_u = np.where(~on_u, U, 0.0).sum(axis=0)
        v0 = np.where(cnt_u > 0, sum_v / np.maximum(cnt_u, 1), v0)
        u0 = np.where(cnt_v > 0, sum_u / np.maximum(cnt_v, 1), u0)
    dv = V - v0
    du = U - u0
    errs = np.minimum(dv * dv, du * du).sum(axis=0)
    k = int(np.argmin(errs))
    on_u_side = np.abs(dv[:, k]) <= np.abs(du[:, k])
    return float(errs[k]), float(u0[k]), float(v0[k]), on_u_side


def _angle_scan(pts: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Fit error of the best two-line fit at each scan angle, vectorized."""
    d1 = np.stack([np.cos(angles), np.sin(angles)], axis=0)  # 2 x A
    d2 = np.stack([-np.sin(angles), np.cos(angles)], axis=0)
    U = pts @ d1  # P x A
    V = pts @ d2
    best = np.full(angles.shape, np.inf)
    for pick_u in (U.min(axis=0), U.max(axis=0)):
        for pick_v in (V.min(axis=0), V.max(axis=0)):
            u0, v0 = pick_u, pick_v
            for _ in range(3):
                dv = np.abs(V - v0)
                du = np.abs(U - u0)
                on_u = dv <= du
                cnt_u = on_u.sum(axis=0)
                cnt_v = (~on_u).sum(axis=0)
                sum_v = np.where(on_u, V, 0.0).sum(axis=0)
                sum_u = np.where(~on_u, U, 0.0).sum(axis=0)
                v0 = np.where(cnt_u > 0, sum_v / np.maximum(cnt_u, 1), v0)
                u0 = np.where(cnt_v > 0, sum_u / np.maximum(cnt_v, 1), u0)
            err = np.minimum((V - v0) ** 2, (U - u0) ** 2).sum(axis=0)
            best = np.minimum(best, err)
    return best


def _side_extents(pts: np.ndarray, angle: float) -> tuple[float, float]:
    """Spread of the points assigned to each fitted side, along that side."""
    c, s = math.cos(angle), math.sin(angle)
    u = pts @ np.array([c, s])
    v = pts @ np.array([-s, c])
    _, _, _, on_u_side = _two_line_fit(u, v)
    eu = float(np.ptp(u[on_u_side])) if on_u_side.any() else 0.0
    ev = float(np.ptp(v[~on_u_side])) if (~on_u_side).any() else 0.0
    return eu, ev


def _candidate_at_angle(pts: np.ndarray, angle: float) -> CornerCandidate:
    """Polished corner candidate for one side orientation."""
    c, s = math.cos(angle), math.sin(angle)
    u = pts @ np.array([c, s])
    v = pts @ np.array([-s, c])
    err, u0, v0, on_u_side = _two_line_fit(u, v)
    # Corner = intersection of the two fitted lines.
    corner = u0 * np.array([c, s]) + v0 * np.array([-s, c])
    # Which way does each side extend away from the corner?
    sign_u = 1.0 if (u[on_u_side].mean() >= u0 if on_u_side.any() else True) else -1.0
    sign_v = 1.0 if (v[~on_u_side].mean() >= v0 if (~on_u_side).any() else True) else -1.0
    alpha1 = math.atan2(sign_u * s, sign_u * c)  # extension of the u-running side
    alpha2 = math.atan2(sign_v * c, -sign_v * s)  # extension of the v-running side
    # Canonical theta0: the extension direction whose perpendicular partner
    # sits at +90 degrees, so the cluster spans +theta0 and +theta0+pi/2.
    if abs(wrap_angle(alpha2 - alpha1 - math.pi / 2.0)) < 1e-9:
        theta0 = alpha1
    else:
        theta0 = alpha2
    return CornerCandidate(float(corner[0]), float(corner[1]), wrap_angle(theta0), err)


def fit_lshape(
    points: np.ndarray,
    *,
    angle_step_deg: float = 1.0,
    max_candidates: int = 3,
    collinear_rms: float = 1e-3,
    min_side_extent: float = 0.15,
) -> LShapeHypothesisSet:
    """Fit corner candidates to a 2-D point cluster (observer frame).

    Raises DegenerateCluster for clusters of fewer than four points.  A
    cluster collinear within `collinear_rms` RMS cannot pin a corner; it
    yields two candidates placed at the segment's endpoints instead.  The
    same endpoint treatment applies when the corner search wins over a
    plain line fit by less than half: on a noisy single side the "corner"
    lands wherever the noise says, which is worse than admitting there is
    no corner to find.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"expected (n, 2) points, got {pts.shape}")
    if len(pts) < _MIN_POINTS:
        raise DegenerateCluster(f"{len(pts)} points are too few to fit an L-shape")

    centroid = pts.mean(axis=0)
    centered = pts - centroid
    cov = centered.T @ centered / len(pts)
    evals, evecs = np.linalg.eigh(cov)
    line_dir = evecs[:, -1]
    perp_rms = math.sqrt(max(evals[0], 0.0))
    if perp_rms < collinear_rms:
        return _collinear_candidates(pts, centroid, line_dir)
    line_sse = len(pts) * max(evals[0], 0.0)

    step = math.radians(angle_step_deg)
    angles = np.arange(0.0, math.pi / 2.0, step)
    errors = _angle_scan(centered, angles)

    # Local minima over the 90-degree-periodic error curve.
    prev = np.roll(errors, 1)
    nxt = np.roll(errors, -1)
    minima = np.where((errors <= prev) & (errors <= nxt))[0]
    if len(minima) == 0:
        minima = np.array([int(np.argmin(errors))])
    order = minima[np.argsort(errors[minima], kind="stable")][:max_candidates]
    # Minima far above the best cannot win hypothesis selection on any
    # plausible heading prior; skip the polish step for them.
    order = order[errors[order] <= 25.0 * max(errors[order[0]], 1e-12)]

    candidates = []
    for idx in order:
        a = float(angles[idx])
        res = minimize_scalar(
            lambda ang: _two_line_fit(
                centered @ np.array([math.cos(ang), math.sin(ang)]),
                centered @ np.array([-math.sin(ang), math.cos(ang)]),
            )[0],
            bounds=(a - step, a + step),
            method="bounded",
            options={"xatol": 1e-8},
        )
        cand = _candidate_at_angle(centered, float(res.x))
        candidates.append(
            CornerCandidate(
                cand.x + centroid[0], cand.y + centroid[1], cand.theta0, cand.fit_error
            )
        )
    # Drop near-duplicate minima (refinement can converge to the same angle).
    unique: list[CornerCandidate] = []
    for cand in candidates:
        if all(
            math.hypot(cand.x - u.x, cand.y - u.y) > 1e-6
            or angle_sq_diff(cand.theta0, u.theta0) > 1e-12
            for u in unique
        ):
            unique.append(cand)
    top = min(unique, key=lambda c: c.fit_error)
    if top.fit_error > 0.5 * line_sse:
        return _collinear_candidates(pts, centroid, line_dir)
    # A corner is only believable if both sides carry real extent; a side
    # whose points spread less than the noise floor is a phantom grabbed
    # off the end of a single visible face.
    if min(_side_extents(centered, top.theta0)) < min_side_extent:
        return _collinear_candidates(pts, centroid, line_dir)
    return LShapeHypothesisSet(tuple(unique), frame="observer")


def _collinear_candidates(
    pts: np.ndarray, centroid: np.ndarray, line_dir: np.ndarray
) -> LShapeHypothesisSet:
    """Collinear cluster: corner could hide at either end of the segment.

    A corner candidate only admits box placements in the quadrant between
    theta0 and theta0 + 90 degrees.  For a single visible face the box must
    cover the segment and sit on the far side of it from the sensor (the
    sensor, at the origin of the cluster frame, saw this face and nothing
    nearer), so theta0 is chosen per endpoint to span exactly that quadrant.
    """
    proj = (pts - centroid) @ line_dir
    perp_dir = np.array([-line_dir[1], line_dir[0]])
    perp = (pts - centroid) @ perp_dir
    err = float(np.sum(perp * perp))
    lo, hi = float(proj.min()), float(proj.max())
    ends = []
    for end, inward in ((centroid + lo * line_dir, line_dir),
                        (centroid + hi * line_dir, -line_dir)):
        inward_perp = np.array([-inward[1], inward[0]])
        if float(-end @ inward_perp) > 0.0:
            # Sensor on the +90-degree side of the inward direction: span
            # the quadrant starting at the outward perpendicular instead.
            theta0 = math.atan2(-inward_perp[1], -inward_perp[0])
        else:
            theta0 = math.atan2(inward[1], inward[0])
        ends.append((end, theta0))
    cands = tuple(
        CornerCandidate(float(p[0]), float(p[1]), wrap_angle(theta), err)
        for p, theta in ends
    )
    return LShapeHypothesisSet(cands, frame="observer")


def select_best_hypothesis(
    shape: LShapeHypothesisSet,
    geom: VehicleGeometry,
    estimate: Pose2,
    config: HypothesisSelectionConfig = HypothesisSelectionConfig(),
) -> tuple[Pose2, float]:
    """Pick the candidate origin pose that best matches a prior estimate.

    Scores fit residual against squared heading gap; position plays no part
    in the score itself because association already settled which vehicle
    this shape is.  Single-side views are the catch: both segment endpoints
    carry the same fit error and generate the same heading set, so their
    scores tie to the last ulp while the implied origins sit a full vehicle
    length apart.  Ties (within a relative epsilon) therefore fall back to
    whichever origin lies closest to the prior estimate.
    """
    poses = infer_candidate_poses(shape, geom)
    lambdas = [c.fit_error for c in shape.candidates for _ in range(4)]
    scores = [
        config.fit_weight * lam
        + config.heading_weight * angle_sq_diff(pose.theta, estimate.theta)
        for pose, lam in zip(poses, lambdas)
    ]
    f_min = min(scores)
    tol = 1e-9 * (1.0 + abs(f_min))
    best_pose, best_f, best_gap = None, math.inf, math.inf
    for pose, f in zip(poses, scores):
        if f > f_min + tol:
            continue
        gap = (pose.x - estimate.x) ** 2 + (pose.y - estimate.y) ** 2
        if gap < best_gap:
            best_pose, best_f, best_gap = pose, f, gap
    assert best_pose is not None
    return best_pose, best_f


def relative_mean(best_pose: Pose2, observer: Pose2) -> Pose2:
    """Relative pose of the selected hypothesis as seen from the observer."""
    return observer.between(best_pose)


def _side_distance_sq(local: np.ndarray, geom: VehicleGeometry) -> np.ndarray:
    """Squared distance of target-frame points to the nearest rectangle side."""
    hl, hw = geom.length / 2.0, geom.width / 2.0
    dx = np.minimum(np.abs(local[..., 0] - hl), np.abs(local[..., 0] + hl))
    dy = np.minimum(np.abs(local[..., 1] - hw), np.abs(local[..., 1] + hw))
    return np.minimum(dx, dy) ** 2


def relative_covariance(
    points: np.ndarray,
    geom: VehicleGeometry,
    mean: Pose2,
    config: CovarianceSamplingConfig = CovarianceSamplingConfig(),
) -> np.ndarray:
    """Sampled covariance of a fitted relative pose.

    Perturbs the relative pose over a uniform grid, scores each sample by how
    well the original cluster hugs the rectangle sides it implies, converts
    scores to normalized Gaussian likelihood weights, and returns the weighted
    scatter of the samples about `mean`.  If every weight underflows to zero
    the weights fall back to uniform (logged), so a covariance always comes
    back.
    """
    pts = np.asarray(points, dtype=float)
    n_axis = config.axis_counts()
    offsets = [
        np.linspace(-h, h, n_axis) if n_axis > 1 else np.array([0.0])
        for h in config.half_width
    ]
    gx, gy, gt = np.meshgrid(*offsets, indexing="ij")
    grid = np.stack([gx.ravel(), gy.ravel(), gt.ravel()], axis=1)  # N x 3

    base = mean.as_array()
    samples = np.empty_like(grid)
    samples[:, 0] = base[0] + grid[:, 0]
    samples[:, 1] = base[1] + grid[:, 1]
    samples[:, 2] = wrap_angle_array(base[2] + grid[:, 2])

    # Points into each sampled target frame: rot(-theta) @ (p - trans).
    c = np.cos(samples[:, 2])[:, None]
    s = np.sin(samples[:, 2])[:, None]
    dx = pts[None, :, 0] - samples[:, 0][:, None]
    dy = pts[None, :, 1] - samples[:, 1][:, None]
    local = np.stack([c * dx + s * dy, -s * dx + c * dy], axis=-1)  # N x P x 2
    lam = _side_distance_sq(local, geom).sum(axis=1)  # N

    sigma = max(config.sigma, 1e-12)
    weights = np.exp(-lam / (2.0 * sigma * sigma))
    total = float(weights.sum())
    if not np.isfinite(total) or total <= 0.0:
        log.debug(
            "all %d sampled likelihoods vanished (min residual %.3g); "
            "falling back to uniform weights",
            len(weights),
            float(lam.min()),
        )
        weights = np.full_like(weights, 1.0 / len(weights))
        total = 1.0
    weights = weights / total

    dev = grid.copy()
    dev[:, 2] = wrap_angle_array(samples[:, 2] - base[2])
    cov = (weights[:, None] * dev).T @ dev
    return repair_psd(cov, floor=0.0)
