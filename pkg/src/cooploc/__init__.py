"""Cooperative localization for connected vehicles.

A sliding-window pose-graph estimator fed by three measurement streams —
absolute map fixes, origin-referenced odometry, and LIDAR-derived
vehicle-to-vehicle relative poses — plus a deterministic simulator (world,
sensors, lossy broadcast channel) to exercise it.
"""

from .assoc import (
    AssociationConfig,
    CornerCandidate,
    LShapeHypothesisSet,
    VehicleGeometry,
    association_cost,
    build_cost_matrix,
    extract_correspondence,
    infer_candidate_poses,
    solve_assignment,
)
from .channel import Channel, ChannelConfig, DeliveryRecord
from .errors import (
    AllZeroLikelihood,
    ConfigError,
    CoopLocError,
    DegenerateCluster,
    InvalidObservation,
    OutOfOrderOdometry,
    StaleMeasurement,
    TimestampMismatch,
    TruncatedFrame,
    UnderconstrainedGraph,
    UnknownKind,
)
from .graph import Factor, FactorKind, NodeKey, OdometryBase, PoseGraph, decompose_span
from .lshape import (
    CovarianceSamplingConfig,
    HypothesisSelectionConfig,
    fit_lshape,
    relative_covariance,
    relative_mean,
    select_best_hypothesis,
)
from .runner import RunReport, RunResult, run_scenario, sweep_scenario, write_report
from .scenario import ScenarioConfig, load_scenario, parse_scenario, with_seed
from .se2 import GaussianPose, Pose2, wrap_angle
from .wire import (
    Detection,
    MapMeasurement,
    MessageKind,
    SpatialRelObs,
    TemporalRelObs,
    WireMessage,
    decode,
    encode,
    frame_size,
)
from .world import (
    LidarModel,
    MapNoiseModel,
    OdometryNoiseModel,
    PolylinePath,
    TruthLog,
    Vehicle,
    advance_pose,
    lidar_scan,
    pure_pursuit_omega,
    sense_map,
    unicycle_increment,
)

__version__ = "0.1.0"
