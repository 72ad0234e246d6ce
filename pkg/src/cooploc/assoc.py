"""Associating fitted L-shapes with known vehicles.

An L-shape measurement is ambiguous four ways: the detected corner can be any
of the four rectangle corners, and the heading any of four right-angle
rotations of the fitted side direction.  Both ambiguities resolve jointly --
orientation option p pairs with one specific corner-to-origin offset q_p --
so each corner candidate expands into exactly four vehicle-origin hypotheses.

Association itself is a rectangular assignment problem: rows are vehicles,
columns are detected shapes plus one null column per vehicle so that a
vehicle may match nothing at bounded cost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .se2 import Pose2, pose_distance, wrap_angle

__all__ = [
    "INFEASIBLE",
    "VehicleGeometry",
    "CornerCandidate",
    "LShapeHypothesisSet",
    "AssociationConfig",
    "infer_candidate_poses",
    "association_cost",
    "build_cost_matrix",
    "solve_assignment",
    "extract_correspondence",
]

# Finite stand-in for a prohibited assignment; small enough that row sums
# cannot overflow, large enough that it never beats a real option.
INFEASIBLE = 1e18


@dataclass(frozen=True)
class VehicleGeometry:
    """Rectangular footprint with the origin at the box center.

    ``corner_offsets[p]`` maps a corner pose holding the p-th heading
    hypothesis to the vehicle origin; the pairing with heading option
    theta0 + p*pi/2 is fixed by which two sides extend from which corner.
    """

    length: float
    width: float
    corner_offsets: tuple[Pose2, ...] = field(init=False)

    def __post_init__(self) -> None:
        if self.length <= 0 or self.width <= 0:
            raise ValueError("vehicle footprint must have positive extent")
        hl, hw = self.length / 2.0, self.width / 2.0
        # Heading option p = 0 corresponds to the rear-right corner (both
        # visible sides extending along +x and +y of the vehicle frame);
        # each +90 deg heading option shifts the hypothesized corner to
        # rear-left, front-left, front-right in turn.
        object.__setattr__(
            self,
            "corner_offsets",
            (
                Pose2(hl, hw, 0.0),
                Pose2(hl, -hw, 0.0),
                Pose2(-hl, -hw, 0.0),
                Pose2(-hl, hw, 0.0),
            ),
        )

    @property
    def half_size(self) -> float:
        """Half the larger footprint extent; the association gate radius."""
        return max(self.length, self.width) / 2.0

    def corners(self, pose: Pose2) -> np.ndarray:
        """World positions of the four corners (rear-right first, CCW)."""
        hl, hw = self.length / 2.0, self.width / 2.0
        local = np.array([[-hl, -hw], [hl, -hw], [hl, hw], [-hl, hw]])
        c, s = math.cos(pose.theta), math.sin(pose.theta)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([pose.x, pose.y])


@dataclass(frozen=True)
class CornerCandidate:
    """One fitted corner: position, canonical side direction, fit residual."""

    x: float
    y: float
    theta0: float
    fit_error: float

    def orientations(self) -> tuple[float, ...]:
        return tuple(wrap_angle(self.theta0 + p * math.pi / 2.0) for p in range(4))


@dataclass(frozen=True)
class LShapeHypothesisSet:
    """Corner candidates extracted from one point cluster.

    `frame` records which frame the candidates live in ('observer' right
    after fitting, 'global' once the observer's own pose estimate has been
    applied); association requires global-frame candidates.
    """

    candidates: tuple[CornerCandidate, ...]
    frame: str = "observer"

    def __post_init__(self) -> None:
        object.__setattr__(self, "candidates", tuple(self.candidates))
        if self.frame not in ("observer", "global"):
            raise ValueError(f"unknown frame {self.frame!r}")

    def to_global(self, observer: Pose2) -> "LShapeHypothesisSet":
        """Push observer-frame candidates through the observer's pose."""
        if self.frame == "global":
            return self
        moved = []
        for c in self.candidates:
            p = observer.compose(Pose2(c.x, c.y, c.theta0))
            moved.append(CornerCandidate(p.x, p.y, p.theta, c.fit_error))
        return LShapeHypothesisSet(tuple(moved), frame="global")


@dataclass(frozen=True)
class AssociationConfig:
    angle_weight: float = 4.0  # weight on squared heading gap in the cost
    null_cost: float = 3.0  # cost of assigning a vehicle to nothing


def infer_candidate_poses(shape: LShapeHypothesisSet, geom: VehicleGeometry) -> list[Pose2]:
    """All vehicle-origin poses a hypothesis set can explain.

    Four per corner candidate: heading option p composed with its paired
    corner-to-origin offset.
    """
    poses = []
    for cand in shape.candidates:
        for p, theta in enumerate(cand.orientations()):
            corner_pose = Pose2(cand.x, cand.y, theta)
            poses.append(corner_pose.compose(geom.corner_offsets[p]))
    return poses


def association_cost(
    shape: LShapeHypothesisSet,
    geom: VehicleGeometry,
    estimate: Pose2,
    config: AssociationConfig,
) -> float:
    """Best pose-distance between any candidate origin pose and `estimate`."""
    if shape.frame != "global":
        raise ValueError("association needs global-frame hypotheses")
    return min(
        pose_distance(candidate, estimate, config.angle_weight)
        for candidate in infer_candidate_poses(shape, geom)
    )


def build_cost_matrix(
    shapes: list[LShapeHypothesisSet],
    geoms: list[VehicleGeometry],
    estimates: list[Pose2],
    config: AssociationConfig,
) -> np.ndarray:
    """n x (m + n) cost matrix: m shape columns then n null columns.

    Null column j costs `null_cost` for vehicle j and is infeasible for every
    other vehicle, so "match nothing" is always available at bounded cost.
    """
    n, m = len(geoms), len(shapes)
    if len(estimates) != n:
        raise ValueError("need one estimate per vehicle")
    cost = np.full((n, m + n), INFEASIBLE, dtype=float)
    for i in range(n):
        for k, shape in enumerate(shapes):
            cost[i, k] = association_cost(shape, geoms[i], estimates[i], config)
        cost[i, m + i] = config.null_cost
    return cost


def solve_assignment(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost assignment of every row to a distinct column.

    Returns the binary assignment matrix (row sums exactly 1, column sums at
    most 1).  The null columns guarantee feasibility; the optimum matches the
    relaxed linear program because assignment polytopes are integral.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2 or cost.shape[0] > cost.shape[1]:
        raise ValueError("cost matrix must be n x (m+n) with n <= m+n")
    rows, cols = linear_sum_assignment(cost)
    z = np.zeros(cost.shape, dtype=int)
    z[rows, cols] = 1
    return z


def extract_correspondence(z: np.ndarray, n_shapes: int) -> list[int | None]:
    """Per-vehicle matched shape index, or None for a null assignment."""
    out: list[int | None] = []
    for row in np.asarray(z):
        k = int(np.argmax(row))
        out.append(k if k < n_shapes else None)
    return out
