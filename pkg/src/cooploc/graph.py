"""Sliding-window pose graph shared by every vehicle.

Nodes are (vehicle, timestamp) poses.  Four factor kinds constrain them:

* ``MAP_PRIOR``    -- absolute pose fix (also used to anchor the first
                      dead-reckoning packet of a vehicle),
* ``TEMPORAL``     -- relative pose between two timestamps of one vehicle,
                      obtained by decomposing origin-referenced odometry,
* ``SPATIAL``      -- relative pose between two vehicles at one timestamp,
* ``DENSE_MARGINAL`` -- linear Gaussian left behind when old nodes are
                      marginalized out of the window.

Optimization is batch Levenberg-Marquardt on the full window; the hot path
is vectorized over factors because it runs once per simulation tick per
vehicle.

Origin-referenced odometry and delivery order
---------------------------------------------

Dead-reckoning packets carry the accumulated pose since the vehicle's start,
not per-step increments.  The graph keeps every received value ("base") per
vehicle and always maintains between-factors exactly between *consecutive
received* bases: when a packet arrives late and lands between two existing
bases, the factor spanning them is replaced by the two sub-spans.  The
resulting factor set depends only on the set of packets received, never on
their arrival order, which is what makes loss and reordering survivable.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, NamedTuple

import numpy as np
import scipy.sparse as sp
from scipy.linalg import solveh_banded
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu

from .errors import (
    InvalidObservation,
    OutOfOrderOdometry,
    StaleMeasurement,
    UnderconstrainedGraph,
)
from .se2 import (
    GaussianPose,
    Pose2,
    between_xyt,
    compose_xyt,
    inverse_xyt,
    jacobians_compose,
    repair_psd,
    symmetrize,
    wrap_angle,
    wrap_angle_array,
)
from .wire import MapMeasurement, SpatialRelObs, TemporalRelObs, WireMessage

__all__ = ["NodeKey", "FactorKind", "Factor", "OdometryBase", "PoseGraph"]

# Regularization floor applied when inverting measurement covariances, so
# that noise-free (zero covariance) streams stay solvable.
_INFO_FLOOR = 1e-12
# Eigenvalue clamp for covariances recovered by decomposition.
_DECOMP_FLOOR = 1e-9
# Widest half-bandwidth (in scalar rows) still solved by banded Cholesky;
# beyond this a general sparse LU wins.
_BAND_LIMIT = 120


class NodeKey(NamedTuple):
    vehicle: int
    t: float


class FactorKind(Enum):
    MAP_PRIOR = "MapPrior"
    TEMPORAL = "TemporalBetween"
    SPATIAL = "SpatialBetween"
    DENSE_MARGINAL = "DenseMarginal"


@dataclass(eq=False)
class Factor:
    """One constraint.  `z` for measurement factors, `mean`/`info` for
    dense marginals (stacked over `keys`, angles wrapped in residuals).

    Factors compare by identity: the graph removes and re-adds them during
    span replacement and marginalization, and two distinct constraints can
    carry equal values.
    """

    kind: FactorKind
    keys: tuple[NodeKey, ...]
    z: GaussianPose | None = None
    mean: np.ndarray | None = None
    info: np.ndarray | None = None
    _z_info: np.ndarray | None = field(default=None, repr=False)
    _z_vec: np.ndarray | None = field(default=None, repr=False)

    def z_information(self) -> np.ndarray:
        """Measurement information matrix, cached, with a tiny floor."""
        if self._z_info is None:
            assert self.z is not None
            self._z_info = np.linalg.inv(self.z.cov + _INFO_FLOOR * np.eye(3))
        return self._z_info

    def z_vector(self) -> np.ndarray:
        """Measurement mean as an (x, y, theta) array, cached."""
        if self._z_vec is None:
            assert self.z is not None
            self._z_vec = self.z.mean.as_array()
        return self._z_vec

    @staticmethod
    def map_prior(key: NodeKey, z: GaussianPose) -> "Factor":
        return Factor(FactorKind.MAP_PRIOR, (key,), z=z)

    @staticmethod
    def temporal(key_a: NodeKey, key_b: NodeKey, z: GaussianPose) -> "Factor":
        if key_a.vehicle != key_b.vehicle:
            raise InvalidObservation("temporal factor must stay on one vehicle")
        if not key_a.t < key_b.t:
            raise OutOfOrderOdometry(f"temporal span {key_a.t} -> {key_b.t}")
        return Factor(FactorKind.TEMPORAL, (key_a, key_b), z=z)

    @staticmethod
    def spatial(key_i: NodeKey, key_j: NodeKey, z: GaussianPose) -> "Factor":
        if key_i.vehicle == key_j.vehicle:
            raise InvalidObservation("a vehicle cannot observe itself")
        if key_i.t != key_j.t:
            raise InvalidObservation("spatial factor endpoints must share a timestamp")
        return Factor(FactorKind.SPATIAL, (key_i, key_j), z=z)

    @staticmethod
    def dense_marginal(
        keys: tuple[NodeKey, ...], mean: np.ndarray, info: np.ndarray
    ) -> "Factor":
        mean = np.asarray(mean, dtype=float)
        info = np.asarray(info, dtype=float)
        k = 3 * len(keys)
        if mean.shape != (k,) or info.shape != (k, k):
            raise ValueError("marginal dimensions do not match its keys")
        return Factor(FactorKind.DENSE_MARGINAL, tuple(keys), mean=mean, info=info)


class OdometryBase(NamedTuple):
    """One received origin-referenced odometry value."""

    t: float
    mean: np.ndarray  # (3,)
    cov: np.ndarray  # (3, 3)


def decompose_span(base_a: OdometryBase, base_b: OdometryBase) -> GaussianPose:
    """Relative constraint between two origin-referenced odometry values.

    Mean is the group difference.  The covariance solves the forward
    propagation  cov_b = J1 cov_a J1' + J2 cov_span J2'  for cov_span, where
    (J1, J2) are the composition Jacobians; J2 is orthonormal so its inverse
    is its transpose.  Rounding can leave the recovered matrix slightly
    indefinite, hence the eigenvalue clamp.
    """
    if not base_a.t < base_b.t:
        raise OutOfOrderOdometry(f"span must advance in time: {base_a.t} -> {base_b.t}")
    mean = between_xyt(base_a.mean, base_b.mean)
    j1, j2 = jacobians_compose(Pose2.from_array(base_a.mean), Pose2.from_array(mean))
    inner = base_b.cov - j1 @ base_a.cov @ j1.T
    cov = repair_psd(j2.T @ inner @ j2, floor=_DECOMP_FLOOR)
    return GaussianPose(Pose2.from_array(mean), cov)


class PoseGraph:
    """Sliding-window pose graph for one receiving vehicle."""

    def __init__(self, window: float = 10.0) -> None:
        if window <= 0:
            raise ValueError("window must be positive")
        self.window = window
        self.nodes: dict[NodeKey, np.ndarray] = {}
        self.factors: list[Factor] = []
        self.latest_t = -math.inf
        self._bases: dict[int, list[OdometryBase]] = {}
        self._chain: dict[tuple[int, float, float], Factor] = {}
        self._anchors: dict[int, list[Factor]] = {}
        self._pending: list[MapMeasurement | SpatialRelObs] = []
        self.pending_expired = 0
        self.last_converged = True
        self._ctx_cache: tuple | None = None
        self._anchored_token: tuple | None = None
        self._chain_cache: tuple | None = None

    def _snapshot(self):
        return (
            dict(self.nodes),
            list(self.factors),
            {v: list(b) for v, b in self._bases.items()},
            dict(self._chain),
            {v: list(a) for v, a in self._anchors.items()},
            list(self._pending),
            self.pending_expired,
            self.latest_t,
        )

    def _restore(self, snap) -> None:
        (
            self.nodes,
            self.factors,
            self._bases,
            self._chain,
            self._anchors,
            self._pending,
            self.pending_expired,
            self.latest_t,
        ) = snap

    # ------------------------------------------------------------------
    # bookkeeping helpers

    def _check_fresh(self, t: float) -> None:
        if t < self.latest_t - self.window:
            raise StaleMeasurement(
                f"t={t} is older than the window "
                f"[{self.latest_t - self.window}, {self.latest_t}]"
            )

    def _touch(self, t: float) -> None:
        if t > self.latest_t:
            self.latest_t = t

    def _ensure_node(self, key: NodeKey, initial: np.ndarray) -> None:
        if key not in self.nodes:
            v = np.asarray(initial, dtype=float).copy()
            v[2] = wrap_angle(v[2])
            self.nodes[key] = v

    def estimate(self, key: NodeKey) -> Pose2:
        return Pose2.from_array(self.nodes[key])

    def all_estimates(self) -> dict[NodeKey, Pose2]:
        return {k: Pose2.from_array(v) for k, v in self.nodes.items()}

    def latest_estimates(self) -> dict[NodeKey, Pose2]:
        """Highest-timestamp estimate of each vehicle present in the graph."""
        newest: dict[int, NodeKey] = {}
        for key in self.nodes:
            cur = newest.get(key.vehicle)
            if cur is None or key.t > cur.t:
                newest[key.vehicle] = key
        return {k: Pose2.from_array(self.nodes[k]) for k in newest.values()}

    # ------------------------------------------------------------------
    # measurement ingestion

    def add_map_measurement(self, vehicle: int, t: float, z: GaussianPose) -> Factor:
        """Absolute fix: creates the node at the measured pose if missing."""
        self._check_fresh(t)
        key = NodeKey(vehicle, t)
        self._ensure_node(key, z.mean.as_array())
        f = Factor.map_prior(key, z)
        self.factors.append(f)
        self._touch(t)
        return f

    def factor_decompose(
        self, vehicle: int, t: float, z0t: GaussianPose
    ) -> tuple[float | None, GaussianPose]:
        """Turn an origin-referenced odometry packet into a span constraint.

        Records (t, z0t) as a new base for `vehicle` and returns
        (previous_base_t, span) against the nearest strictly earlier base.
        The first base of a vehicle returns (None, z0t): an anchor prior at
        the dead-reckoned pose.
        """
        bases = self._bases.setdefault(vehicle, [])
        new = OdometryBase(t, z0t.mean.as_array(), np.asarray(z0t.cov, dtype=float))
        idx = bisect.bisect_left([b.t for b in bases], t)
        bases.insert(idx, new)
        if idx == 0:
            return None, z0t
        prev = bases[idx - 1]
        return prev.t, decompose_span(prev, new)

    def add_temporal_rel_obs(
        self, vehicle: int, t_prev: float, t: float, z: GaussianPose
    ) -> Factor:
        """Relative-odometry constraint between two timestamps of a vehicle."""
        if not t_prev < t:
            raise OutOfOrderOdometry(f"temporal span {t_prev} -> {t}")
        self._check_fresh(t)
        key_a, key_b = NodeKey(vehicle, t_prev), NodeKey(vehicle, t)
        if key_a not in self.nodes:
            base = self._base_at(vehicle, t_prev)
            seed = base.mean if base is not None else self._nearest_estimate(vehicle, t_prev)
            if seed is None:
                raise InvalidObservation(
                    f"no reference pose to place vehicle {vehicle} at t={t_prev}"
                )
            self._ensure_node(key_a, seed)
        self._ensure_node(key_b, compose_xyt(self.nodes[key_a], z.mean.as_array()))
        f = Factor.temporal(key_a, key_b, z)
        self.factors.append(f)
        self._chain[(vehicle, t_prev, t)] = f
        self._touch(t)
        return f

    def ingest_temporal_packet(self, vehicle: int, t: float, z0t: GaussianPose) -> None:
        """Full handling of one origin-referenced odometry packet.

        Keeps the invariant that between-factors connect exactly the
        consecutive received bases, so the factor set depends only on the
        multiset of packets received:

        * a packet landing between two known bases splits their spanning
          factor in two;
        * a packet older than the current first base takes over the anchor
          role, demoting the old anchor prior into a span;
        * a duplicate timestamp adds a parallel constraint.
        """
        self._check_fresh(t)
        bases = self._bases.get(vehicle, [])
        times = [b.t for b in bases]
        i = bisect.bisect_left(times, t)
        if i < len(times) and times[i] == t:
            # Duplicate base: parallel constraint, no splitting.
            if i == 0:
                self._add_anchor(vehicle, t, z0t)
            else:
                prev = bases[i - 1]
                dup = OdometryBase(
                    t, z0t.mean.as_array(), np.asarray(z0t.cov, dtype=float)
                )
                self.add_temporal_rel_obs(vehicle, prev.t, t, decompose_span(prev, dup))
            return

        successor = bases[i] if i < len(bases) else None
        t_prev, z = self.factor_decompose(vehicle, t, z0t)
        if t_prev is None:
            self._add_anchor(vehicle, t, z)
        else:
            self.add_temporal_rel_obs(vehicle, t_prev, t, z)

        if successor is None:
            return
        # Late arrival: whatever used to start at `successor` must now start
        # at `t` instead.
        here = self._base_at(vehicle, t)
        assert here is not None
        if t_prev is not None:
            old = self._chain.pop((vehicle, t_prev, successor.t), None)
            if old is not None:
                self.factors.remove(old)
            self.add_temporal_rel_obs(
                vehicle, t, successor.t, decompose_span(here, successor)
            )
            return
        demoted = [
            f for f in self._anchors.get(vehicle, []) if f.keys[0].t == successor.t
        ]
        for old_anchor in demoted:
            self._anchors[vehicle].remove(old_anchor)
            self.factors.remove(old_anchor)
            assert old_anchor.z is not None
            old_base = OdometryBase(
                old_anchor.keys[0].t,
                old_anchor.z.mean.as_array(),
                np.asarray(old_anchor.z.cov, dtype=float),
            )
            self.add_temporal_rel_obs(
                vehicle, t, successor.t, decompose_span(here, old_base)
            )
        if not demoted:
            # The old first base already lost its anchor to marginalization;
            # just link the chain.
            self.add_temporal_rel_obs(
                vehicle, t, successor.t, decompose_span(here, successor)
            )

    def _add_anchor(self, vehicle: int, t: float, z: GaussianPose) -> None:
        """Absolute prior from a vehicle's earliest dead-reckoning packet."""
        key = NodeKey(vehicle, t)
        self._ensure_node(key, z.mean.as_array())
        f = Factor.map_prior(key, z)
        self.factors.append(f)
        self._anchors.setdefault(vehicle, []).append(f)
        self._touch(t)

    def add_spatial_rel_obs(
        self, observer: int, target: int, t: float, z: GaussianPose
    ) -> Factor:
        """Relative observation of `target` from `observer` at time `t`."""
        if observer == target:
            raise InvalidObservation(f"vehicle {observer} cannot observe itself")
        self._check_fresh(t)
        key_i, key_j = NodeKey(observer, t), NodeKey(target, t)
        if key_i not in self.nodes and key_j not in self.nodes:
            seed = self._nearest_estimate(observer, t)
            if seed is None:
                alt = self._nearest_estimate(target, t)
                if alt is None:
                    raise InvalidObservation(
                        f"no reference pose for either endpoint of "
                        f"{observer}->{target} at t={t}"
                    )
                self._ensure_node(key_j, alt)
            else:
                self._ensure_node(key_i, seed)
        if key_i not in self.nodes:
            self._ensure_node(key_i, compose_xyt(self.nodes[key_j], inverse_xyt(z.mean.as_array())))
        self._ensure_node(key_j, compose_xyt(self.nodes[key_i], z.mean.as_array()))
        f = Factor.spatial(key_i, key_j, z)
        self.factors.append(f)
        self._touch(t)
        return f

    def _base_at(self, vehicle: int, t: float) -> OdometryBase | None:
        for b in self._bases.get(vehicle, []):
            if b.t == t:
                return b
        return None

    def _nearest_estimate(self, vehicle: int, t: float) -> np.ndarray | None:
        best, best_dt = None, math.inf
        for key, est in self.nodes.items():
            if key.vehicle == vehicle:
                dt = abs(key.t - t)
                if dt < best_dt:
                    best, best_dt = est, dt
        return best

    # ------------------------------------------------------------------
    # packet-level interface

    def _bases_ready(self, p: MapMeasurement | SpatialRelObs) -> bool:
        """True once every vehicle touched by the payload has an odometry
        base at exactly the payload timestamp."""
        if isinstance(p, MapMeasurement):
            return self._base_at(p.vehicle, p.t) is not None
        if self._base_at(p.vehicle, p.t) is None:
            return False
        return all(self._base_at(d.target, p.t) is not None for d in p.detections)

    def _apply_payload(self, p: MapMeasurement | SpatialRelObs) -> None:
        if isinstance(p, MapMeasurement):
            self.add_map_measurement(p.vehicle, p.t, p.pose)
        else:
            for det in p.detections:
                self.add_spatial_rel_obs(p.vehicle, det.target, p.t, det.relative)

    def _drain_pending(self) -> None:
        """Replay parked fixes whose bases have since arrived.

        Entries that aged out of the window while waiting are counted and
        dropped: their odometry packet is gone for good, so the fix would
        anchor nothing.
        """
        if not self._pending:
            return
        keep: list[MapMeasurement | SpatialRelObs] = []
        for p in self._pending:
            if p.t < self.latest_t - self.window:
                self.pending_expired += 1
            elif self._bases_ready(p):
                self._apply_payload(p)
            else:
                keep.append(p)
        self._pending = keep

    def ingest_message(self, msg: WireMessage) -> None:
        """Route one wire message to the right add operation.

        Relative and map fixes referencing a timestamp whose odometry packet
        has not arrived yet (lost or still in flight) are parked rather than
        applied: attaching them to dead-reckoned seeds would float a
        disconnected island in the graph.  Parked fixes replay as soon as
        the missing bases land and are discarded once they age out of the
        window, so the resulting factor set still depends only on the set of
        packets received, never on their arrival order.
        """
        p = msg.payload
        if isinstance(p, MapMeasurement):
            self._check_fresh(p.t)
            if self._bases_ready(p):
                self.add_map_measurement(p.vehicle, p.t, p.pose)
            else:
                self._pending.append(p)
        elif isinstance(p, TemporalRelObs):
            self.ingest_temporal_packet(p.vehicle, p.t, p.origin_pose)
            self._drain_pending()
        elif isinstance(p, SpatialRelObs):
            # Validate everything first so one bad detection cannot leave a
            # half-applied packet behind.
            self._check_fresh(p.t)
            for det in p.detections:
                if det.target == p.vehicle:
                    raise InvalidObservation("self-detection in spatial packet")
            if self._bases_ready(p):
                self._apply_payload(p)
            else:
                self._pending.append(p)
        else:
            raise TypeError(f"unsupported payload {type(p).__name__}")

    def process_packet(self, msg: WireMessage) -> dict[NodeKey, Pose2]:
        """Ingest one packet, then optimize and slide the window.

        All-or-nothing: if anything in the sequence fails, the graph rolls
        back to its state before the packet and the error propagates.
        """
        snapshot = self._snapshot()
        try:
            self.ingest_message(msg)
            estimates = self.optimize()
            self.marginalize_old_nodes()
            return estimates
        except Exception:
            self._restore(snapshot)
            raise

    def ingest_atomic(self, msg: WireMessage) -> None:
        """Ingest without optimizing, still all-or-nothing per packet.

        The simulation loop batches several packets per tick and optimizes
        once; this keeps the per-packet rollback guarantee on that path.
        """
        snapshot = self._snapshot()
        try:
            self.ingest_message(msg)
        except Exception:
            self._restore(snapshot)
            raise

    # ------------------------------------------------------------------
    # optimization

    def optimize(
        self, max_iterations: int = 100, tol: float = 1e-8
    ) -> dict[NodeKey, Pose2]:
        """Batch Levenberg-Marquardt over all nodes.

        Damping starts at 1e-4, divides by 10 on accepted steps and
        multiplies by 10 on rejected ones; accepted cost is monotonically
        nonincreasing.  Converges when the largest state update drops below
        `tol`.  Returns the per-vehicle latest estimates.
        """
        if not self.nodes:
            return {}
        keys, index, ctx = self._linearization()
        self._require_anchored(ctx)

        x = np.stack([self.nodes[k] for k in keys])

        cost = ctx.cost(x)
        lam = 1e-4
        self.last_converged = False
        for _ in range(max_iterations):
            h_data, grad = ctx.normal_equations(x)
            accepted = False
            plateau = False
            while lam <= 1e10:
                try:
                    step = ctx.solve(h_data, grad, lam)
                except RuntimeError:
                    lam *= 10.0
                    continue
                x_new = x + step.reshape(-1, 3)
                x_new[:, 2] = wrap_angle_array(x_new[:, 2])
                new_cost = ctx.cost(x_new)
                if new_cost <= cost:
                    x, cost = x_new, new_cost
                    lam = max(lam / 10.0, 1e-15)
                    accepted = True
                    break
                if np.max(np.abs(step)) < tol:
                    # The rejected correction is already below the
                    # convergence resolution while cost sits at its
                    # floating-point floor; more damping only shrinks it
                    # further.  Converged.
                    plateau = True
                    break
                lam *= 10.0
            if plateau or not accepted:
                # Damping exhausted without improvement: we are at (or
                # numerically indistinguishable from) a local minimum.
                self.last_converged = True
                break
            if np.max(np.abs(step)) < tol:
                self.last_converged = True
                break

        for k, row in zip(keys, x):
            self.nodes[k] = row
        return self.latest_estimates()

    def _linearization(
        self,
    ) -> tuple[list[NodeKey], dict[NodeKey, int], "_LinearizationContext"]:
        """Node ordering plus the matching linearization context.

        Nodes are ordered by time so the normal matrix comes out banded
        (see _LinearizationContext).  The context depends only on the node
        and factor sets, so it is cached and reused until either changes —
        the optimizer and the per-tick covariance queries share one build.
        """
        token = self._structure_token()
        if self._ctx_cache is not None and self._ctx_cache[0] == token:
            return self._ctx_cache[1:]
        keys = sorted(self.nodes.keys(), key=lambda k: (k.t, k.vehicle))
        index = {k: i for i, k in enumerate(keys)}
        ctx = _LinearizationContext(self.factors, index, len(keys))
        self._ctx_cache = (token, keys, index, ctx)
        return keys, index, ctx

    def marginal_covariance(self, key: NodeKey) -> np.ndarray:
        """Posterior 3x3 covariance block of one node at the current
        linearization point (inverse of the full information matrix,
        extracted by three sparse solves)."""
        keys, index, ctx = self._linearization()
        if key not in index:
            raise KeyError(key)
        x = np.stack([self.nodes[k] for k in keys])
        h_data, _ = ctx.normal_equations(x)
        i = index[key]
        rhs = np.zeros((3 * len(keys), 3))
        rhs[3 * i, 0] = rhs[3 * i + 1, 1] = rhs[3 * i + 2, 2] = 1.0
        try:
            cols = ctx.solve_system(h_data, rhs, 0.0)
        except RuntimeError as exc:
            raise UnderconstrainedGraph(str(exc)) from exc
        return symmetrize(cols[3 * i : 3 * i + 3, :])

    def _structure_token(self) -> tuple:
        """Identity of the current node/factor sets (factors by object
        identity).  Everything that depends only on graph structure —
        linearization sparsity, anchoring, chain connectivity — is memoized
        against this."""
        return (tuple(self.nodes.keys()), tuple(self.factors))

    def _require_anchored(self, ctx: "_LinearizationContext") -> None:
        """Every connected component needs at least one absolute constraint."""
        token = self._structure_token()
        if token == self._anchored_token:
            return
        ia = [ctx.bet_ia]
        ib = [ctx.bet_ib]
        anchored = [ctx.pri_i]
        for idxs, _, _ in ctx.marginals:
            ia.append(idxs[:-1])
            ib.append(idxs[1:])
            anchored.append(idxs)
        ia = np.concatenate(ia)
        ib = np.concatenate(ib)
        anchored = np.concatenate(anchored)
        adj = sp.coo_matrix((np.ones(len(ia)), (ia, ib)), shape=(ctx.n, ctx.n))
        n_comp, labels = connected_components(adj, directed=False)
        if len(np.unique(labels[anchored])) != n_comp:
            raise UnderconstrainedGraph(
                "graph has a connected component without any absolute "
                "constraint; wait for an anchor factor"
            )
        self._anchored_token = token

    # ------------------------------------------------------------------
    # marginalization

    def marginalize_old_nodes(self) -> Factor | None:
        """Remove nodes older than the window via Schur complement.

        Factors touching removed nodes are absorbed, at the current
        linearization point, into one dense Gaussian over their Markov
        blanket.  Estimates of surviving nodes are untouched.
        """
        if not self.nodes or math.isinf(self.latest_t):
            return None
        cutoff = self.latest_t - self.window
        old = [k for k in self.nodes if k.t < cutoff]
        if not old:
            return None
        old_set = set(old)
        touched = [f for f in self.factors if any(k in old_set for k in f.keys)]
        blanket = sorted({k for f in touched for k in f.keys if k not in old_set})

        marginal: Factor | None = None
        if blanket and touched:
            local = {k: i for i, k in enumerate(old + blanket)}
            dim = 3 * len(local)
            h = np.zeros((dim, dim))
            g = np.zeros(dim)
            for f in touched:
                self._accumulate_dense(f, local, h, g)
            nr = 3 * len(old)
            h_rr, h_rb = h[:nr, :nr], h[:nr, nr:]
            h_bb = h[nr:, nr:]
            g_r, g_b = g[:nr], g[nr:]
            try:
                sol = np.linalg.solve(h_rr, np.hstack([h_rb, g_r[:, None]]))
            except np.linalg.LinAlgError:
                sol = np.linalg.lstsq(h_rr, np.hstack([h_rb, g_r[:, None]]), rcond=None)[0]
            info = symmetrize(h_bb - h_rb.T @ sol[:, :-1])
            g_m = g_b - h_rb.T @ sol[:, -1]
            info = repair_psd(info, floor=0.0)
            x_b = np.concatenate([self.nodes[k] for k in blanket])
            shift = np.linalg.lstsq(info, -g_m, rcond=None)[0]
            mean = x_b + shift
            mean[2::3] = wrap_angle_array(mean[2::3])
            if np.any(info):
                marginal = Factor.dense_marginal(tuple(blanket), mean, info)

        removed = set(map(id, touched))
        self.factors = [f for f in self.factors if id(f) not in removed]
        if marginal is not None:
            self.factors.append(marginal)
        for k in old:
            del self.nodes[k]
        self._chain = {
            key: f for key, f in self._chain.items() if id(f) not in removed
        }
        for v in list(self._anchors):
            kept_anchors = [f for f in self._anchors[v] if id(f) not in removed]
            if kept_anchors:
                self._anchors[v] = kept_anchors
            else:
                del self._anchors[v]
        for v in list(self._bases):
            kept = [b for b in self._bases[v] if b.t >= cutoff]
            if kept:
                self._bases[v] = kept
            else:
                del self._bases[v]
        return marginal

    def _accumulate_dense(
        self,
        f: Factor,
        local: dict[NodeKey, int],
        h: np.ndarray,
        g: np.ndarray,
    ) -> None:
        """Add one factor's JᵀΛJ / JᵀΛr at the current estimates."""
        if f.kind is FactorKind.DENSE_MARGINAL:
            assert f.mean is not None and f.info is not None
            idxs = [local[k] for k in f.keys]
            r = np.concatenate([self.nodes[k] for k in f.keys]) - f.mean
            r[2::3] = wrap_angle_array(r[2::3])
            n = len(idxs)
            for a in range(n):
                sa = slice(3 * idxs[a], 3 * idxs[a] + 3)
                fa = slice(3 * a, 3 * a + 3)
                g[sa] += f.info[fa, :] @ r
                for b in range(n):
                    sb = slice(3 * idxs[b], 3 * idxs[b] + 3)
                    fb = slice(3 * b, 3 * b + 3)
                    h[sa, sb] += f.info[fa, fb]
            return

        lam = f.z_information()
        assert f.z is not None
        if f.kind is FactorKind.MAP_PRIOR:
            (key,) = f.keys
            i = local[key]
            r = self.nodes[key] - f.z.mean.as_array()
            r[2] = wrap_angle(r[2])
            s = slice(3 * i, 3 * i + 3)
            h[s, s] += lam
            g[s] += lam @ r
            return

        key_a, key_b = f.keys
        xa, xb = self.nodes[key_a], self.nodes[key_b]
        r, ja, jb = _between_residual(xa, xb, f.z.mean.as_array())
        ia, ib = local[key_a], local[key_b]
        sa = slice(3 * ia, 3 * ia + 3)
        sb = slice(3 * ib, 3 * ib + 3)
        la = lam @ ja
        lb = lam @ jb
        h[sa, sa] += ja.T @ la
        h[sa, sb] += ja.T @ lb
        h[sb, sa] += jb.T @ la
        h[sb, sb] += jb.T @ lb
        g[sa] += ja.T @ (lam @ r)
        g[sb] += jb.T @ (lam @ r)

    # ------------------------------------------------------------------
    # inspection / export

    def chain_components(self, vehicle: int) -> list[set[NodeKey]]:
        """Connected components of one vehicle's odometry chain.

        Edges are TemporalBetween factors and DenseMarginal factors (which
        inherit the chain links they absorbed).  A healthy chain is a single
        component; losses are expected to be bridged by decomposed spanning
        factors, so more than one component means the loss-robustness scheme
        failed.
        """
        index = {k: i for i, k in enumerate(self.nodes)}
        parent = list(range(len(index)))

        def find(i: int) -> int:
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        chain_nodes: set[NodeKey] = set()
        for f in self.factors:
            if f.kind not in (FactorKind.TEMPORAL, FactorKind.DENSE_MARGINAL):
                continue
            idxs = [index[k] for k in f.keys]
            for a, b in zip(idxs, idxs[1:]):
                ra, rb = find(a), find(b)
                if ra != rb:
                    parent[ra] = rb
            chain_nodes.update(k for k in f.keys if k.vehicle == vehicle)
        groups: dict[int, set[NodeKey]] = {}
        for k in chain_nodes:
            groups.setdefault(find(index[k]), set()).add(k)
        return list(groups.values())

    def chain_intact(self, vehicle: int) -> bool:
        return len(self.chain_components(vehicle)) <= 1

    def chain_component_counts(self) -> dict[int, int]:
        """Number of odometry-chain components per vehicle, in one pass."""
        token = self._structure_token()
        if self._chain_cache is not None and self._chain_cache[0] == token:
            return dict(self._chain_cache[1])
        index = {k: i for i, k in enumerate(self.nodes)}
        n = len(index)
        ia, ib = [], []
        chain_nodes: set[NodeKey] = set()
        for f in self.factors:
            if f.kind is FactorKind.TEMPORAL:
                a, b = f.keys
                ia.append(index[a])
                ib.append(index[b])
                chain_nodes.add(a)
                chain_nodes.add(b)
            elif f.kind is FactorKind.DENSE_MARGINAL:
                idxs = [index[k] for k in f.keys]
                ia.extend(idxs[:-1])
                ib.extend(idxs[1:])
                chain_nodes.update(f.keys)
        adj = sp.coo_matrix((np.ones(len(ia)), (ia, ib)), shape=(n, n))
        _, labels = connected_components(adj, directed=False)
        counts: dict[int, set[int]] = {}
        for k in chain_nodes:
            counts.setdefault(k.vehicle, set()).add(int(labels[index[k]]))
        result = {v: len(roots) for v, roots in counts.items()}
        self._chain_cache = (token, result)
        return dict(result)

    def dump_snapshot(self) -> str:
        """Deterministic text form of the graph for plotting and goldens."""
        lines = []
        for key in sorted(self.nodes):
            x, y, th = self.nodes[key]
            lines.append(
                f"NODE {key.vehicle} {key.t:.9g} {x:.17g} {y:.17g} {th:.17g}"
            )
        for f in self.factors:
            keys = " ".join(f"{k.vehicle}:{k.t:.9g}" for k in f.keys)
            if f.kind is FactorKind.DENSE_MARGINAL:
                assert f.mean is not None and f.info is not None
                mean = " ".join(f"{v:.17g}" for v in f.mean)
                n = f.info.shape[0]
                tri = " ".join(
                    f"{f.info[i, j]:.17g}" for i in range(n) for j in range(i, n)
                )
                lines.append(f"FACTOR {f.kind.value} {keys} mean {mean} info {tri}")
            else:
                assert f.z is not None
                m = f.z.mean
                cov = f.z.cov
                tri = " ".join(
                    f"{cov[i, j]:.17g}" for i in range(3) for j in range(i, 3)
                )
                lines.append(
                    f"FACTOR {f.kind.value} {keys} mean {m.x:.17g} {m.y:.17g} "
                    f"{m.theta:.17g} cov {tri}"
                )
        return "\n".join(lines) + "\n"


def _between_residual(
    xa: np.ndarray, xb: np.ndarray, z: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Residual (prediction vs measurement, in the measurement frame) and its
    Jacobians for one between factor; scalar-path twin of the vectorized
    optimizer kernel."""
    ca, sa = math.cos(xa[2]), math.sin(xa[2])
    dx, dy = xb[0] - xa[0], xb[1] - xa[1]
    qx = ca * dx + sa * dy
    qy = -sa * dx + ca * dy
    qt = xb[2] - xa[2]
    cz, sz = math.cos(z[2]), math.sin(z[2])
    r = np.array(
        [
            cz * (qx - z[0]) + sz * (qy - z[1]),
            -sz * (qx - z[0]) + cz * (qy - z[1]),
            wrap_angle(qt - z[2]),
        ]
    )
    jq_a = np.array([[-ca, -sa, qy], [sa, -ca, -qx], [0.0, 0.0, -1.0]])
    jq_b = np.array([[ca, sa, 0.0], [-sa, ca, 0.0], [0.0, 0.0, 1.0]])
    rz = np.array([[cz, sz, 0.0], [-sz, cz, 0.0], [0.0, 0.0, 1.0]])
    return r, rz @ jq_a, rz @ jq_b


class _LinearizationContext:
    """Vectorized residual/Jacobian machinery for one optimize() call.

    The factor set is frozen for the duration, so sparsity structure and
    measurement information matrices are computed once; only block values
    change per iteration.
    """

    def __init__(
        self, factors: list[Factor], index: dict[NodeKey, int], n_nodes: int
    ) -> None:
        self.n = n_nodes
        bet_ia, bet_ib, bet_z, bet_info = [], [], [], []
        pri_i, pri_z, pri_info = [], [], []
        self.marginals: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
        for f in factors:
            if f.kind is FactorKind.DENSE_MARGINAL:
                assert f.mean is not None and f.info is not None
                idxs = np.array([index[k] for k in f.keys])
                self.marginals.append((idxs, f.mean, f.info))
            elif f.kind is FactorKind.MAP_PRIOR:
                pri_i.append(index[f.keys[0]])
                pri_z.append(f.z_vector())
                pri_info.append(f.z_information())
            else:
                bet_ia.append(index[f.keys[0]])
                bet_ib.append(index[f.keys[1]])
                bet_z.append(f.z_vector())
                bet_info.append(f.z_information())
        self.bet_ia = np.array(bet_ia, dtype=int)
        self.bet_ib = np.array(bet_ib, dtype=int)
        self.bet_z = np.array(bet_z).reshape(-1, 3)
        self.bet_info = np.array(bet_info).reshape(-1, 3, 3)
        self.pri_i = np.array(pri_i, dtype=int)
        self.pri_z = np.array(pri_z).reshape(-1, 3)
        self.pri_info = np.array(pri_info).reshape(-1, 3, 3)

        rr, cc = np.meshgrid(np.arange(3), np.arange(3), indexing="ij")
        rr, cc = rr.ravel(), cc.ravel()
        # Block index pairs in the order normal_equations emits values:
        # per between factor (aa, ab, ba, bb), then priors, then marginals.
        bi = np.stack([self.bet_ia, self.bet_ia, self.bet_ib, self.bet_ib], axis=1)
        bj = np.stack([self.bet_ia, self.bet_ib, self.bet_ia, self.bet_ib], axis=1)
        rows = [
            (3 * bi[:, :, None] + rr).ravel(),
            (3 * self.pri_i[:, None] + rr).ravel(),
        ]
        cols = [
            (3 * bj[:, :, None] + cc).ravel(),
            (3 * self.pri_i[:, None] + cc).ravel(),
        ]
        for idxs, _, info in self.marginals:
            pa = np.repeat(idxs, len(idxs))
            pb = np.tile(idxs, len(idxs))
            rows.append((3 * pa[:, None] + rr).ravel())
            cols.append((3 * pb[:, None] + cc).ravel())
        self.rows = np.concatenate(rows)
        self.cols = np.concatenate(cols)

        # With nodes ordered by time every factor couples near-diagonal
        # blocks (odometry steps span one tick, inter-vehicle observations
        # are same-tick), so the normal matrix is narrow-banded and a banded
        # Cholesky beats a general sparse LU by a wide margin.  Gappy graphs
        # (long spans after packet loss, arbitrary key orders) blow the band
        # open; those fall back to SuperLU.
        dim = 3 * self.n
        bw = int(np.abs(self.rows - self.cols).max()) if len(self.rows) else 0
        if bw <= _BAND_LIMIT:
            self.bandwidth = bw
            upper = self.rows <= self.cols
            self._band_mask = upper
            self._band_flat = (bw + self.rows[upper] - self.cols[upper]) * dim + self.cols[upper]
            self._band_size = (bw + 1) * dim
        else:
            self.bandwidth = None

        # Residuals are defined in each measurement's own frame,
        # r = R(theta_z)' (q - z), so the information contributes to the
        # normal equations only through K = R Lambda R', which is constant
        # per factor.  Working with K and the raw group difference q - z
        # saves rotating every residual on every evaluation.
        cz = np.cos(self.bet_z[:, 2])
        sz = np.sin(self.bet_z[:, 2])
        f = len(cz)
        rz = np.zeros((f, 3, 3))
        rz[:, 0, 0] = cz
        rz[:, 0, 1] = sz
        rz[:, 1, 0] = -sz
        rz[:, 1, 1] = cz
        rz[:, 2, 2] = 1.0
        self.bet_K = rz.transpose(0, 2, 1) @ self.bet_info @ rz

    # -- residual kernels ------------------------------------------------

    def _between_errors(self, x: np.ndarray) -> np.ndarray:
        """Group difference minus measurement, before the frame rotation."""
        a = x[self.bet_ia]
        b = x[self.bet_ib]
        e = between_xyt(a, b)
        e -= self.bet_z
        e[:, 2] = wrap_angle_array(e[:, 2])
        return e

    def _prior_residuals(self, x: np.ndarray) -> np.ndarray:
        r = x[self.pri_i] - self.pri_z
        r[:, 2] = wrap_angle_array(r[:, 2])
        return r

    def cost(self, x: np.ndarray) -> float:
        total = 0.0
        if len(self.bet_ia):
            e = self._between_errors(x)
            total += float(np.einsum("fi,fij,fj->", e, self.bet_K, e))
        if len(self.pri_i):
            r = self._prior_residuals(x)
            total += float(np.einsum("fi,fij,fj->", r, self.pri_info, r))
        for idxs, mean, info in self.marginals:
            r = x[idxs].ravel() - mean
            r[2::3] = wrap_angle_array(r[2::3])
            total += float(r @ info @ r)
        return total

    # -- normal equations --------------------------------------------------

    def normal_equations(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Block values (ordered to match the precomputed sparsity) and the
        gradient vector at `x`."""
        grad = np.zeros((self.n, 3))
        blocks = []

        if len(self.bet_ia):
            a = x[self.bet_ia]
            b = x[self.bet_ib]
            ca, sa = np.cos(a[:, 2]), np.sin(a[:, 2])
            dx = b[:, 0] - a[:, 0]
            dy = b[:, 1] - a[:, 1]
            qx = ca * dx + sa * dy
            qy = -sa * dx + ca * dy
            f = len(ca)
            jq_a = np.zeros((f, 3, 3))
            jq_a[:, 0, 0] = -ca
            jq_a[:, 0, 1] = -sa
            jq_a[:, 0, 2] = qy
            jq_a[:, 1, 0] = sa
            jq_a[:, 1, 1] = -ca
            jq_a[:, 1, 2] = -qx
            jq_a[:, 2, 2] = -1.0
            jq_b = np.zeros((f, 3, 3))
            jq_b[:, 0, 0] = ca
            jq_b[:, 0, 1] = sa
            jq_b[:, 1, 0] = -sa
            jq_b[:, 1, 1] = ca
            jq_b[:, 2, 2] = 1.0
            e = self._between_errors(x)
            la = self.bet_K @ jq_a
            lb = self.bet_K @ jq_b
            jat = jq_a.transpose(0, 2, 1)
            jbt = jq_b.transpose(0, 2, 1)
            blocks.append(
                np.stack([jat @ la, jat @ lb, jbt @ la, jbt @ lb], axis=1).reshape(-1, 9)
            )
            ke = np.einsum("fij,fj->fi", self.bet_K, e)
            np.add.at(grad, self.bet_ia, np.einsum("fji,fj->fi", jq_a, ke))
            np.add.at(grad, self.bet_ib, np.einsum("fji,fj->fi", jq_b, ke))

        if len(self.pri_i):
            r = self._prior_residuals(x)
            blocks.append(self.pri_info.reshape(-1, 9))
            np.add.at(grad, self.pri_i, np.einsum("fij,fj->fi", self.pri_info, r))

        for idxs, mean, info in self.marginals:
            r = x[idxs].ravel() - mean
            r[2::3] = wrap_angle_array(r[2::3])
            k = len(idxs)
            blocks.append(
                info.reshape(k, 3, k, 3).transpose(0, 2, 1, 3).reshape(-1, 9)
            )
            np.add.at(grad, idxs, (info @ r).reshape(k, 3))

        data = np.concatenate([b.ravel() for b in blocks]) if blocks else np.empty(0)
        return data, grad.ravel()

    def solve_system(self, h_data: np.ndarray, b: np.ndarray, lam: float) -> np.ndarray:
        """Solve (H + lam*I) x = b for the assembled block values."""
        dim = 3 * self.n
        if self.bandwidth is not None:
            ab = np.bincount(
                self._band_flat,
                weights=h_data[self._band_mask],
                minlength=self._band_size,
            ).reshape(self.bandwidth + 1, dim)
            ab[self.bandwidth] += lam
            try:
                return solveh_banded(ab, b, lower=False, check_finite=False)
            except np.linalg.LinAlgError as exc:
                raise RuntimeError(str(exc)) from exc
        diag = np.arange(dim)
        h = sp.coo_matrix(
            (
                np.concatenate([h_data, np.full(dim, lam)]),
                (np.concatenate([self.rows, diag]), np.concatenate([self.cols, diag])),
            ),
            shape=(dim, dim),
        ).tocsc()
        try:
            return splu(h).solve(b)
        except Exception as exc:  # SuperLU signals singularity via RuntimeError
            raise RuntimeError(str(exc)) from exc

    def solve(self, h_data: np.ndarray, grad: np.ndarray, lam: float) -> np.ndarray:
        return self.solve_system(h_data, -grad, lam)
