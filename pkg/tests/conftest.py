"""Shared helpers for the test suite."""

import numpy as np

from cooploc.se2 import Pose2


def fd_jacobians(fn, a: Pose2, b: Pose2, step: float = 1e-6):
    """Central finite-difference Jacobians of fn(a, b) -> Pose2.

    Angle components are differenced with wrapping so that results near the
    +/-pi seam stay comparable to the analytic forms.
    """

    def col(which: int, axis: int) -> np.ndarray:
        da = np.zeros(3)
        da[axis] = step
        if which == 0:
            hi = fn(Pose2.from_array(a.as_array() + da), b).as_array()
            lo = fn(Pose2.from_array(a.as_array() - da), b).as_array()
        else:
            hi = fn(a, Pose2.from_array(b.as_array() + da)).as_array()
            lo = fn(a, Pose2.from_array(b.as_array() - da)).as_array()
        d = hi - lo
        d[2] = np.arctan2(np.sin(d[2]), np.cos(d[2]))
        return d / (2.0 * step)

    ja = np.column_stack([col(0, k) for k in range(3)])
    jb = np.column_stack([col(1, k) for k in range(3)])
    return ja, jb


def random_pose(rng: np.random.Generator, span: float = 10.0) -> Pose2:
    x, y = rng.uniform(-span, span, 2)
    return Pose2(x, y, rng.uniform(-np.pi, np.pi))


def random_psd(rng: np.random.Generator, scale: float = 0.1) -> np.ndarray:
    m = rng.normal(0.0, scale, (3, 3))
    return m @ m.T + 1e-6 * np.eye(3)
