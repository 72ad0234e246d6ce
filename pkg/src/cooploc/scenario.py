"""Scenario configuration: YAML schema, validation, and world construction.

A scenario file describes the fleet (two opposing platoons on a straight or
sine-shaped road), the sensor noise, and the channel.  Everything except
`vehicles` has defaults; validation failures raise :class:`ConfigError`
naming the offending key.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .assoc import AssociationConfig, VehicleGeometry
from .channel import ChannelConfig
from .errors import ConfigError
from .lshape import CovarianceSamplingConfig, HypothesisSelectionConfig
from .world import (
    LidarModel,
    MapNoiseModel,
    OdometryNoiseModel,
    PolylinePath,
    Vehicle,
)

__all__ = [
    "VehicleSpec",
    "RoadSpec",
    "ScenarioConfig",
    "load_scenario",
    "parse_scenario",
    "with_seed",
]


@dataclass(frozen=True)
class VehicleSpec:
    vid: int
    lane: str  # "east" (+x travel, y = 0) or "west" (-x travel, y = lane_offset)
    start: float  # initial x position
    speed: float


@dataclass(frozen=True)
class RoadSpec:
    kind: str = "straight"  # or "sine"
    lane_offset: float = 3.5
    amplitude: float = 6.0  # sine only
    wavelength: float = 80.0  # sine only


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    duration: float
    dt: float
    window: float
    map_rate_hz: float
    seed: int
    road: RoadSpec
    vehicles: tuple[VehicleSpec, ...]
    geometry: VehicleGeometry
    odometry: OdometryNoiseModel
    map_noise: MapNoiseModel
    lidar: LidarModel
    sampling: CovarianceSamplingConfig
    association: AssociationConfig
    selection: HypothesisSelectionConfig
    channel: ChannelConfig
    # Additive measurement floor for relative-pose factors.  The sampled
    # covariance describes one scan in isolation; consecutive scans of the
    # same partial view repeat the same fit error, so fusing them at their
    # raw (per-scan) confidence overweights the shared bias.
    spatial_floor_sigma_pos: float = 0.2
    spatial_floor_sigma_theta: float = 0.1

    def spatial_floor(self) -> np.ndarray:
        sp, st = self.spatial_floor_sigma_pos, self.spatial_floor_sigma_theta
        return np.diag([sp * sp, sp * sp, st * st])

    @property
    def n_ticks(self) -> int:
        return int(round(self.duration / self.dt))

    @property
    def map_every(self) -> int:
        """Ticks between absolute fixes (at least one tick)."""
        return max(1, int(round(1.0 / (self.map_rate_hz * self.dt))))

    def vehicle_ids(self) -> list[int]:
        return [v.vid for v in self.vehicles]

    def build_vehicles(self) -> list[Vehicle]:
        """Instantiate vehicles on their lane paths at their start stations."""
        out = []
        for spec in self.vehicles:
            path = self._lane_path(spec)
            out.append(
                Vehicle.on_path(spec.vid, self.geometry, path, spec.speed)
            )
        return out

    def _lane_path(self, spec: VehicleSpec) -> PolylinePath:
        margin = 25.0
        travel = spec.speed * self.duration + margin
        if spec.lane == "east":
            xs = np.arange(spec.start, spec.start + travel, 1.0)
            y0 = 0.0
        else:
            xs = np.arange(spec.start, spec.start - travel, -1.0)
            y0 = self.road.lane_offset
        if self.road.kind == "sine":
            ys = y0 + self.road.amplitude * np.sin(
                2.0 * math.pi * xs / self.road.wavelength
            )
        else:
            ys = np.full_like(xs, y0)
        return PolylinePath(np.column_stack([xs, ys]))


_REQUIRED = object()


def _require_map(node: object, path: str) -> dict:
    if not isinstance(node, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(node).__name__}")
    return node


def _get(node: dict, key: str, path: str, default=_REQUIRED):
    if key in node:
        return node[key]
    if default is _REQUIRED:
        raise ConfigError(f"{path}.{key}: required key missing")
    return default


def _number(node: dict, key: str, path: str, default=None, lo=None, hi=None) -> float:
    raw = _get(node, key, path) if default is None else node.get(key, default)
    if isinstance(raw, bool) or not isinstance(raw, (int, float)):
        raise ConfigError(f"{path}.{key}: expected a number, got {raw!r}")
    v = float(raw)
    if lo is not None and v < lo:
        raise ConfigError(f"{path}.{key}: must be >= {lo}, got {v}")
    if hi is not None and v > hi:
        raise ConfigError(f"{path}.{key}: must be <= {hi}, got {v}")
    return v


def parse_scenario(doc: object, *, name_hint: str = "scenario") -> ScenarioConfig:
    """Validate a parsed YAML document into a :class:`ScenarioConfig`."""
    root = _require_map(doc, name_hint)
    name = str(root.get("name", name_hint))

    duration = _number(root, "duration", name, lo=0.1)
    dt = _number(root, "dt", name, default=0.1, lo=1e-4)
    window = _number(root, "window", name, default=10.0, lo=dt)
    map_rate = _number(root, "map_rate_hz", name, default=1.0, lo=1e-6)
    seed = int(_number(root, "seed", name, default=0))

    road_node = _require_map(root.get("road", {}), f"{name}.road")
    kind = str(road_node.get("kind", "straight"))
    if kind not in ("straight", "sine"):
        raise ConfigError(f"{name}.road.kind: must be 'straight' or 'sine', got {kind!r}")
    road = RoadSpec(
        kind=kind,
        lane_offset=_number(road_node, "lane_offset", f"{name}.road", default=3.5),
        amplitude=_number(road_node, "amplitude", f"{name}.road", default=6.0, lo=0.0),
        wavelength=_number(road_node, "wavelength", f"{name}.road", default=80.0, lo=1.0),
    )

    raw_vehicles = _get(root, "vehicles", name)
    if not isinstance(raw_vehicles, list) or not raw_vehicles:
        raise ConfigError(f"{name}.vehicles: expected a non-empty list")
    vehicles = []
    for i, item in enumerate(raw_vehicles):
        p = f"{name}.vehicles[{i}]"
        item = _require_map(item, p)
        lane = str(_get(item, "lane", p))
        if lane not in ("east", "west"):
            raise ConfigError(f"{p}.lane: must be 'east' or 'west', got {lane!r}")
        vehicles.append(
            VehicleSpec(
                vid=int(_number(item, "id", p)),
                lane=lane,
                start=_number(item, "start", p),
                speed=_number(item, "speed", p, default=8.0, lo=0.1),
            )
        )
    ids = [v.vid for v in vehicles]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"{name}.vehicles: duplicate vehicle ids {ids}")

    g = _require_map(root.get("geometry", {}), f"{name}.geometry")
    geometry = VehicleGeometry(
        length=_number(g, "length", f"{name}.geometry", default=4.0, lo=0.1),
        width=_number(g, "width", f"{name}.geometry", default=2.0, lo=0.1),
    )

    o = _require_map(root.get("odometry", {}), f"{name}.odometry")
    odometry = OdometryNoiseModel(
        sigma_pos_per_m=_number(o, "sigma_pos_per_m", f"{name}.odometry", default=0.02, lo=0.0),
        sigma_theta_per_m=_number(o, "sigma_theta_per_m", f"{name}.odometry", default=0.005, lo=0.0),
    )

    m = _require_map(root.get("map_noise", {}), f"{name}.map_noise")
    map_noise = MapNoiseModel(
        sigma_pos=_number(m, "sigma_pos", f"{name}.map_noise", default=0.25, lo=0.0),
        sigma_theta=math.radians(
            _number(m, "sigma_theta_deg", f"{name}.map_noise", default=1.2, lo=0.0)
        ),
    )

    li = _require_map(root.get("lidar", {}), f"{name}.lidar")
    lidar = LidarModel(
        sigma_range=_number(li, "sigma_range", f"{name}.lidar", default=0.03, lo=0.0),
        max_range=_number(li, "max_range", f"{name}.lidar", default=30.0, lo=1.0),
        fov_half=math.radians(
            _number(li, "fov_deg", f"{name}.lidar", default=180.0, lo=1.0, hi=360.0) / 2.0
        ),
        angular_resolution=math.radians(
            _number(li, "angular_resolution_deg", f"{name}.lidar", default=0.5, lo=0.01)
        ),
    )

    sa = _require_map(root.get("sampling", {}), f"{name}.sampling")
    hw = sa.get("half_width", [0.3, 0.3, 0.15])
    if not isinstance(hw, list) or len(hw) != 3:
        raise ConfigError(f"{name}.sampling.half_width: expected a 3-element list")
    sampling = CovarianceSamplingConfig(
        half_width=(float(hw[0]), float(hw[1]), float(hw[2])),
        n_samples=int(_number(sa, "n_samples", f"{name}.sampling", default=125, lo=1)),
        sigma=_number(sa, "sigma", f"{name}.sampling", default=lidar.sigma_range, lo=0.0),
    )

    a = _require_map(root.get("association", {}), f"{name}.association")
    association = AssociationConfig(
        angle_weight=_number(a, "angle_weight", f"{name}.association", default=4.0, lo=0.0),
        null_cost=_number(a, "null_cost", f"{name}.association", default=3.0),
    )
    if association.null_cost <= 0:
        raise ConfigError(f"{name}.association.null_cost: must be positive")

    se = _require_map(root.get("selection", {}), f"{name}.selection")
    selection = HypothesisSelectionConfig(
        fit_weight=_number(se, "fit_weight", f"{name}.selection", default=1.0, lo=0.0),
        heading_weight=_number(se, "heading_weight", f"{name}.selection", default=1.0, lo=0.0),
    )

    sf = _require_map(root.get("spatial_floor", {}), f"{name}.spatial_floor")
    floor_pos = _number(sf, "sigma_pos", f"{name}.spatial_floor", default=0.2, lo=0.0)
    floor_theta = _number(sf, "sigma_theta", f"{name}.spatial_floor", default=0.1, lo=0.0)

    ch = _require_map(root.get("channel", {}), f"{name}.channel")
    try:
        channel = ChannelConfig(
            loss_prob=_number(ch, "loss_prob", f"{name}.channel", default=0.0),
            delay_base=_number(ch, "delay_base", f"{name}.channel", default=0.005),
            delay_jitter=_number(ch, "delay_jitter", f"{name}.channel", default=0.035),
            duplicate_prob=_number(ch, "duplicate_prob", f"{name}.channel", default=0.0),
            reorder=bool(ch.get("reorder", True)),
            seed=seed + 1,
        )
    except ValueError as exc:
        raise ConfigError(f"{name}.channel: {exc}") from exc

    return ScenarioConfig(
        name=name,
        duration=duration,
        dt=dt,
        window=window,
        map_rate_hz=map_rate,
        seed=seed,
        road=road,
        vehicles=tuple(vehicles),
        geometry=geometry,
        odometry=odometry,
        map_noise=map_noise,
        lidar=lidar,
        sampling=sampling,
        association=association,
        selection=selection,
        channel=channel,
        spatial_floor_sigma_pos=floor_pos,
        spatial_floor_sigma_theta=floor_theta,
    )


def load_scenario(path: str | Path) -> ScenarioConfig:
    """Load and validate a scenario YAML file.

    Syntax errors carry the line/column reported by the YAML parser;
    semantic errors carry the dotted key path.
    """
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read scenario file {p}: {exc}") from exc
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"{p}: YAML syntax error{where}: {exc}") from exc
    return parse_scenario(doc, name_hint=p.stem)


def with_seed(cfg: ScenarioConfig, seed: int) -> ScenarioConfig:
    """Copy of a scenario with a different base seed (channel follows)."""
    from dataclasses import replace

    return replace(
        cfg,
        seed=seed,
        channel=replace(cfg.channel, seed=seed + 1),
    )
