"""Scenario execution: paired cooperative/independent runs and reporting.

One call to :func:`run_scenario` generates the sensor streams exactly once.
The cooperative (CL) pass consumes everything — own sensors, received
odometry and map packets, and the relative observations produced by the
detection/association front-end.  The independent (IL) pass replays only each
vehicle's own map and odometry stream into a fresh graph, which is the same
estimation problem with the spatial factors removed (without them the joint
graph decouples per vehicle).  Errors from the two passes are therefore a
paired comparison on identical data.

Per tick the loop is: advance truth and integrate odometry; emit/broadcast
proprioceptive packets; scan, fit L-shapes, associate against the previous
tick's estimates, and broadcast relative observations; then each vehicle
polls its channel queue, ingests the batch, optimizes, and slides its
window.
"""

from __future__ import annotations

import csv
import io
import math
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .assoc import build_cost_matrix, extract_correspondence, solve_assignment
from .channel import Channel
from .errors import (
    ConfigError,
    CoopLocError,
    DegenerateCluster,
    UnderconstrainedGraph,
)
from .graph import NodeKey, PoseGraph
from .lshape import (
    fit_lshape,
    relative_covariance,
    relative_mean,
    select_best_hypothesis,
)
from .scenario import ScenarioConfig, with_seed
from .se2 import GaussianPose, Pose2, pose_distance
from .wire import (
    Detection,
    MapMeasurement,
    SpatialRelObs,
    TemporalRelObs,
    WireMessage,
    decode,
    encode,
)
from .world import TruthLog, lidar_scan, sense_map

__all__ = [
    "TraceRow",
    "AssociationRecord",
    "RunResult",
    "RunReport",
    "run_scenario",
    "sweep_scenario",
    "apply_sweep_param",
    "write_report",
    "SWEEP_PARAMS",
]


@dataclass(frozen=True)
class TraceRow:
    t: float
    truth: Pose2
    est: Pose2
    cov_trace: float


@dataclass(frozen=True)
class AssociationRecord:
    t: float
    observer: int
    source: int  # vehicle that actually generated the cluster
    assigned: int
    correct: bool  # implied position within half vehicle size of assigned truth
    implied: Pose2


@dataclass
class RunResult:
    """Everything measured during one pass (one mode) over a scenario."""

    mode: str
    traces: dict[int, list[TraceRow]] = field(default_factory=dict)
    pos_errors: dict[int, list[float]] = field(default_factory=dict)
    ori_errors: dict[int, list[float]] = field(default_factory=dict)
    associations: list[AssociationRecord] = field(default_factory=list)
    error_counts: Counter = field(default_factory=Counter)
    degenerate_clusters: int = 0
    edge_clipped: int = 0
    channel_stats: dict[str, int] = field(default_factory=dict)
    delivery_trace_csv: str = ""
    chains_ok: bool = True
    converged_ok: bool = True
    window_ok: bool = True
    psd_ok: bool = True
    graphs: dict[int, PoseGraph] = field(default_factory=dict)

    @property
    def assertions_passed(self) -> bool:
        return self.chains_ok and self.converged_ok and self.window_ok and self.psd_ok

    def mean_position_error(self) -> float:
        all_errs = [e for errs in self.pos_errors.values() for e in errs]
        return float(np.mean(all_errs)) if all_errs else math.nan

    def mean_orientation_error(self) -> float:
        all_errs = [e for errs in self.ori_errors.values() for e in errs]
        return float(np.mean(all_errs)) if all_errs else math.nan

    def association_accuracy(self) -> float:
        if not self.associations:
            return math.nan
        return sum(a.correct for a in self.associations) / len(self.associations)


@dataclass
class RunReport:
    scenario: str
    seed: int
    cl: RunResult | None
    il: RunResult | None
    runtime_s: float

    @property
    def assertions_passed(self) -> bool:
        results = [r for r in (self.cl, self.il) if r is not None]
        return all(r.assertions_passed for r in results)


# ----------------------------------------------------------------------
# the cooperative pass


def _fresh_message(vid: int, seqs: dict[int, int], payload) -> WireMessage:
    """Build, serialize, and re-decode a packet: receivers (and the sender's
    own back-end) only ever see what survived the wire format."""
    msg = WireMessage(sender=vid, seq=seqs[vid], payload=payload)
    seqs[vid] += 1
    return decode(encode(msg))


def _run_cl(cfg: ScenarioConfig) -> tuple[RunResult, dict[int, list[list[WireMessage]]], TruthLog]:
    vehicles = {v.vid: v for v in cfg.build_vehicles()}
    ids = sorted(vehicles)
    world_rng = np.random.default_rng(cfg.seed)
    channel = Channel(cfg.channel, ids)
    graphs = {vid: PoseGraph(cfg.window) for vid in ids}
    truth = TruthLog()
    seqs = {vid: 0 for vid in ids}
    est_prev: dict[int, dict[int, Pose2]] = {vid: {} for vid in ids}
    self_streams: dict[int, list[list[WireMessage]]] = {vid: [] for vid in ids}

    res = RunResult(mode="cl")
    res.graphs = graphs
    for vid in ids:
        res.traces[vid] = []
        res.pos_errors[vid] = []
        res.ori_errors[vid] = []

    for i in range(1, cfg.n_ticks + 1):
        t = i * cfg.dt
        own: dict[int, list[WireMessage]] = {vid: [] for vid in ids}

        # world advance + odometry/map sensing
        for vid in ids:
            veh = vehicles[vid]
            z_dr = veh.step(cfg.dt, world_rng, cfg.odometry)
            truth.record(vid, t, veh.pose)
            msg = _fresh_message(vid, seqs, TemporalRelObs(vid, t, z_dr))
            own[vid].append(msg)
            channel.broadcast(msg, t)
            if i % cfg.map_every == 0:
                z = sense_map(veh.pose, world_rng, cfg.map_noise)
                mmsg = _fresh_message(vid, seqs, MapMeasurement(vid, t, z))
                own[vid].append(mmsg)
                channel.broadcast(mmsg, t)

        # perception: scan, fit, associate against last tick's estimates
        for vid in ids:
            veh = vehicles[vid]
            targets = [(o, vehicles[o].pose, cfg.geometry) for o in ids if o != vid]
            clusters = lidar_scan(veh.pose, targets, cfg.lidar, world_rng)
            obs_est = est_prev[vid].get(vid)
            known = sorted(
                (o, e) for o, e in est_prev[vid].items() if o != vid
            )
            if obs_est is None or not clusters or not known:
                continue
            shapes, shape_src, shape_pts = [], [], []
            fov_edge = cfg.lidar.fov_half - 1.5 * cfg.lidar.angular_resolution
            for tid in sorted(clusters):
                pts = clusters[tid]
                # A cluster touching the field-of-view boundary is a clipped
                # partial face: its apparent endpoints are cut points, not
                # vehicle corners, and a fit would slide freely along the
                # face.  Skip it rather than feed the graph a guess.
                if np.abs(np.arctan2(pts[:, 1], pts[:, 0])).max() > fov_edge:
                    res.edge_clipped += 1
                    continue
                try:
                    hyp = fit_lshape(pts)
                except DegenerateCluster:
                    res.degenerate_clusters += 1
                    continue
                shapes.append(hyp.to_global(obs_est))
                shape_src.append(tid)
                shape_pts.append(pts)
            if not shapes:
                continue
            cost = build_cost_matrix(
                shapes,
                [cfg.geometry] * len(known),
                [e for _, e in known],
                cfg.association,
            )
            corr = extract_correspondence(solve_assignment(cost), len(shapes))
            detections = []
            for row, shape_idx in enumerate(corr):
                if shape_idx is None:
                    continue
                target_id, target_est = known[row]
                best_pose, _ = select_best_hypothesis(
                    shapes[shape_idx], cfg.geometry, target_est, cfg.selection
                )
                # Innovation gate, same budget as the null column: association
                # matched this shape on its best-placed hypothesis, but
                # selection may settle on a different corner reading.  A
                # winner farther from the prior than a null assignment would
                # have been is not worth a factor.
                gap = pose_distance(
                    best_pose, target_est, cfg.association.angle_weight
                )
                if gap > cfg.association.null_cost:
                    continue
                rel = relative_mean(best_pose, obs_est)
                cov = relative_covariance(
                    shape_pts[shape_idx], cfg.geometry, rel, cfg.sampling
                ) + cfg.spatial_floor()
                detections.append(Detection(target_id, GaussianPose(rel, cov)))
                tp = truth.lookup(target_id, t)
                dist = math.hypot(best_pose.x - tp.x, best_pose.y - tp.y)
                res.associations.append(
                    AssociationRecord(
                        t,
                        vid,
                        shape_src[shape_idx],
                        target_id,
                        dist <= cfg.geometry.length / 2.0,
                        best_pose,
                    )
                )
            if detections:
                smsg = _fresh_message(vid, seqs, SpatialRelObs(vid, t, tuple(detections)))
                own[vid].append(smsg)
                channel.broadcast(smsg, t)

        # fusion: poll, ingest the batch, optimize once, slide the window
        for vid in ids:
            g = graphs[vid]
            self_streams[vid].append(
                [m for m in own[vid] if not isinstance(m.payload, SpatialRelObs)]
            )
            batch = own[vid] + [m for _, m in channel.poll(vid, t)]
            for m in batch:
                try:
                    g.ingest_atomic(m)
                except CoopLocError as exc:
                    res.error_counts[type(exc).__name__] += 1
            try:
                g.optimize()
            except UnderconstrainedGraph:
                res.error_counts["UnderconstrainedGraph"] += 1
                res.converged_ok = False
                continue
            if not g.last_converged:
                res.converged_ok = False
            _record_tick(res, g, truth, vid, t, cfg)
            g.marginalize_old_nodes()
            est_prev[vid] = {
                k.vehicle: p for k, p in g.latest_estimates().items()
            }

        # invariants that must hold at every tick
        for vid in ids:
            g = graphs[vid]
            if any(n > 1 for n in g.chain_component_counts().values()):
                res.chains_ok = False
            if g.nodes and min(k.t for k in g.nodes) < g.latest_t - g.window - 1e-9:
                res.window_ok = False

    res.psd_ok = all(_graph_psd_ok(g) for g in graphs.values())
    expired = sum(g.pending_expired for g in graphs.values())
    if expired:
        res.error_counts["PendingExpired"] = expired
    res.channel_stats = channel.stats()
    res.delivery_trace_csv = channel.trace_csv()
    return res, self_streams, truth


def _record_tick(
    res: RunResult,
    g: PoseGraph,
    truth: TruthLog,
    vid: int,
    t: float,
    cfg: ScenarioConfig,
) -> None:
    latest = g.latest_estimates()
    mine = [(k, p) for k, p in latest.items() if k.vehicle == vid]
    if not mine:
        return
    key, est = mine[0]
    dp, dth = truth.error(vid, key.t, est)
    res.pos_errors[vid].append(dp)
    res.ori_errors[vid].append(dth)
    cov_tr = float(np.trace(g.marginal_covariance(key)))
    res.traces[vid].append(TraceRow(key.t, truth.lookup(vid, key.t), est, cov_tr))


def _graph_psd_ok(g: PoseGraph) -> bool:
    for f in g.factors:
        m = f.info if f.info is not None else f.z.cov  # type: ignore[union-attr]
        if not np.all(np.isfinite(m)):
            return False
        if np.linalg.eigvalsh(np.asarray(m)).min() < -1e-9:
            return False
    return True


# ----------------------------------------------------------------------
# the independent pass


def _run_il(
    cfg: ScenarioConfig,
    self_streams: dict[int, list[list[WireMessage]]],
    truth: TruthLog,
) -> RunResult:
    ids = sorted(self_streams)
    graphs = {vid: PoseGraph(cfg.window) for vid in ids}
    res = RunResult(mode="il")
    res.graphs = graphs
    for vid in ids:
        res.traces[vid] = []
        res.pos_errors[vid] = []
        res.ori_errors[vid] = []

    for i in range(1, cfg.n_ticks + 1):
        t = i * cfg.dt
        for vid in ids:
            g = graphs[vid]
            for m in self_streams[vid][i - 1]:
                try:
                    g.ingest_atomic(m)
                except CoopLocError as exc:
                    res.error_counts[type(exc).__name__] += 1
            try:
                g.optimize()
            except UnderconstrainedGraph:
                res.error_counts["UnderconstrainedGraph"] += 1
                res.converged_ok = False
                continue
            if not g.last_converged:
                res.converged_ok = False
            _record_tick(res, g, truth, vid, t, cfg)
            g.marginalize_old_nodes()
        for vid in ids:
            g = graphs[vid]
            if any(n > 1 for n in g.chain_component_counts().values()):
                res.chains_ok = False
            if g.nodes and min(k.t for k in g.nodes) < g.latest_t - g.window - 1e-9:
                res.window_ok = False

    res.psd_ok = all(_graph_psd_ok(g) for g in graphs.values())
    return res


# ----------------------------------------------------------------------
# entry points


def run_scenario(
    cfg: ScenarioConfig, mode: str = "both", seed: int | None = None
) -> RunReport:
    """Run a scenario in `cl`, `il`, or `both` mode.

    Sensor streams are generated exactly once; IL replays the recorded
    per-vehicle streams, so a `both` report is a paired comparison.
    """
    if mode not in ("cl", "il", "both"):
        raise ConfigError(f"mode must be cl, il, or both, got {mode!r}")
    if seed is not None:
        cfg = with_seed(cfg, seed)
    start = time.perf_counter()
    cl_res, self_streams, truth = _run_cl(cfg)
    il_res = _run_il(cfg, self_streams, truth) if mode in ("il", "both") else None
    report = RunReport(
        scenario=cfg.name,
        seed=cfg.seed,
        cl=cl_res if mode in ("cl", "both") else None,
        il=il_res,
        runtime_s=time.perf_counter() - start,
    )
    return report


SWEEP_PARAMS = ("loss_prob", "delay", "upsilon", "W")


def apply_sweep_param(cfg: ScenarioConfig, param: str, value: float) -> ScenarioConfig:
    from dataclasses import replace

    if param == "loss_prob":
        return replace(cfg, channel=replace(cfg.channel, loss_prob=value))
    if param == "delay":
        return replace(cfg, channel=replace(cfg.channel, delay_jitter=value))
    if param == "upsilon":
        return replace(cfg, association=replace(cfg.association, null_cost=value))
    if param == "W":
        return replace(cfg, association=replace(cfg.association, angle_weight=value))
    raise ConfigError(
        f"unknown sweep parameter {param!r}; expected one of {', '.join(SWEEP_PARAMS)}"
    )


def sweep_scenario(
    cfg: ScenarioConfig,
    param: str,
    values: list[float],
    mode: str = "both",
    seed: int | None = None,
) -> list[tuple[float, RunReport]]:
    """One paired run per parameter value, identical seeds across values."""
    out = []
    for v in values:
        out.append((v, run_scenario(apply_sweep_param(cfg, param, v), mode, seed)))
    return out


# ----------------------------------------------------------------------
# report files


def _stats(values: list[float]) -> tuple[float, float]:
    if not values:
        return math.nan, math.nan
    arr = np.asarray(values)
    return float(arr.mean()), float(arr.std())


def report_csv(report: RunReport) -> str:
    """Per-vehicle error table, deterministic (no wall-clock content)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(
        [
            "mode",
            "vehicle",
            "samples",
            "pos_err_ave_m",
            "pos_err_std_m",
            "ori_err_ave_deg",
            "ori_err_std_deg",
            "assoc_count",
            "assoc_correct",
        ]
    )
    for res in (report.cl, report.il):
        if res is None:
            continue
        by_observer = Counter(a.observer for a in res.associations)
        correct_by_observer = Counter(
            a.observer for a in res.associations if a.correct
        )
        for vid in sorted(res.pos_errors):
            pa, ps = _stats(res.pos_errors[vid])
            oa, os_ = _stats([math.degrees(e) for e in res.ori_errors[vid]])
            w.writerow(
                [
                    res.mode,
                    vid,
                    len(res.pos_errors[vid]),
                    f"{pa:.6f}",
                    f"{ps:.6f}",
                    f"{oa:.6f}",
                    f"{os_:.6f}",
                    by_observer.get(vid, 0),
                    correct_by_observer.get(vid, 0),
                ]
            )
    return buf.getvalue()


def report_table(report: RunReport) -> str:
    """Human-readable summary."""
    lines = [f"scenario: {report.scenario}   seed: {report.seed}"]
    for res in (report.cl, report.il):
        if res is None:
            continue
        lines.append(f"-- mode {res.mode.upper()} --")
        lines.append(
            f"{'vehicle':>8} {'pos ave [m]':>12} {'pos std [m]':>12} "
            f"{'ori ave [deg]':>14} {'ori std [deg]':>14}"
        )
        for vid in sorted(res.pos_errors):
            pa, ps = _stats(res.pos_errors[vid])
            oa, os_ = _stats([math.degrees(e) for e in res.ori_errors[vid]])
            lines.append(f"{vid:>8} {pa:>12.4f} {ps:>12.4f} {oa:>14.4f} {os_:>14.4f}")
        if res.mode == "cl":
            acc = res.association_accuracy()
            lines.append(
                f"associations: {len(res.associations)} "
                f"(accuracy {acc * 100:.2f}%)"
                if res.associations
                else "associations: 0"
            )
            lines.append(f"channel: {res.channel_stats}")
        if res.error_counts:
            lines.append(f"packet errors: {dict(res.error_counts)}")
        lines.append(f"assertions passed: {res.assertions_passed}")
    lines.append(f"runtime: {report.runtime_s:.2f} s")
    return "\n".join(lines) + "\n"


def trace_csv(rows: list[TraceRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(
        ["t", "truth_x", "truth_y", "truth_th", "est_x", "est_y", "est_th", "cov_trace"]
    )
    for r in rows:
        w.writerow(
            [
                f"{r.t:.6f}",
                f"{r.truth.x:.9f}",
                f"{r.truth.y:.9f}",
                f"{r.truth.theta:.9f}",
                f"{r.est.x:.9f}",
                f"{r.est.y:.9f}",
                f"{r.est.theta:.9f}",
                f"{r.cov_trace:.12g}",
            ]
        )
    return buf.getvalue()


def associations_csv(records: list[AssociationRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(
        ["t", "observer", "source", "assigned", "correct", "implied_x", "implied_y", "implied_th"]
    )
    for a in records:
        w.writerow(
            [
                f"{a.t:.6f}",
                a.observer,
                a.source,
                a.assigned,
                int(a.correct),
                f"{a.implied.x:.9f}",
                f"{a.implied.y:.9f}",
                f"{a.implied.theta:.9f}",
            ]
        )
    return buf.getvalue()


def packets_csv(res: RunResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value"])
    for k in sorted(res.channel_stats):
        w.writerow([k, res.channel_stats[k]])
    w.writerow(["degenerate_clusters", res.degenerate_clusters])
    for k in sorted(res.error_counts):
        w.writerow([f"ingest_error_{k}", res.error_counts[k]])
    return buf.getvalue()


def write_report(report: RunReport, out_dir: str | Path) -> None:
    """Write the full report bundle under `out_dir`."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report_csv(report))
    (out / "report.txt").write_text(report_table(report))
    for res in (report.cl, report.il):
        if res is None:
            continue
        for vid, rows in sorted(res.traces.items()):
            (out / f"trace_{res.mode}_v{vid}.csv").write_text(trace_csv(rows))
    if report.cl is not None:
        (out / "associations.csv").write_text(associations_csv(report.cl.associations))
        (out / "delivery_trace.csv").write_text(report.cl.delivery_trace_csv)
        (out / "packets.csv").write_text(packets_csv(report.cl))
        for vid, g in sorted(report.cl.graphs.items()):
            (out / f"graph_v{vid}.txt").write_text(g.dump_snapshot())
