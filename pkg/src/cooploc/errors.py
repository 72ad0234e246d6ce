"""Error signals raised across the package.

These are deliberately specific so callers (and the run harness) can count
and react to individual failure modes instead of catching bare ValueError.
"""

from __future__ import annotations


class CoopLocError(Exception):
    """Base class for all package-specific errors."""


class StaleMeasurement(CoopLocError):
    """Measurement timestamp fell behind the graph's sliding window."""


class OutOfOrderOdometry(CoopLocError):
    """A relative-odometry constraint whose endpoints are not ordered in time."""


class InvalidObservation(CoopLocError):
    """A relative observation that cannot be a real measurement (e.g. self-loop)."""


class UnderconstrainedGraph(CoopLocError):
    """Normal equations are singular beyond gauge; wait for an anchor factor."""


class DegenerateCluster(CoopLocError):
    """Point cluster too small or too thin to support shape fitting."""


class AllZeroLikelihood(CoopLocError):
    """Every sampled pose received zero likelihood weight."""


class TruncatedFrame(CoopLocError):
    """Wire frame shorter than its declared layout."""


class UnknownKind(CoopLocError):
    """Wire frame with an unrecognized magic or message-kind byte."""


class TimestampMismatch(CoopLocError):
    """Estimate/truth series compared at different timestamps."""


class ConfigError(CoopLocError):
    """Scenario configuration file failed to parse or validate."""
