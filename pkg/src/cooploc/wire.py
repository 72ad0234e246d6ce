"""Binary V2V message codec.

Every frame is little-endian and starts with a magic byte (0xC1) followed by
a one-byte message kind, a two-byte sender id, a four-byte sequence number
and an eight-byte timestamp.  Poses travel as three doubles, covariances as
their upper triangle (six doubles, row-major: xx, xy, xt, yy, yt, tt).

Frame sizes:

    MapMeasurement / TemporalRelObs   16 + 72            =  88 bytes
    SpatialRelObs                     16 + 2 + 74 * k     =  18 + 74k bytes

where k is the detection count.  The per-detection increment is constant by
construction; tests pin that property.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .errors import TruncatedFrame, UnknownKind
from .se2 import GaussianPose, Pose2

__all__ = [
    "MAGIC",
    "MessageKind",
    "Detection",
    "MapMeasurement",
    "TemporalRelObs",
    "SpatialRelObs",
    "WireMessage",
    "encode",
    "decode",
    "frame_size",
]

MAGIC = 0xC1

_HEADER = struct.Struct("<BBHId")  # magic, kind, sender, seq, timestamp
_POSE_COV = struct.Struct("<9d")  # x, y, theta, upper-triangular covariance
_DET_COUNT = struct.Struct("<H")
_DETECTION = struct.Struct("<H9d")  # target id + pose + covariance

_TRIU = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]


class MessageKind(IntEnum):
    MAP_MEASUREMENT = 1
    TEMPORAL_REL_OBS = 2
    SPATIAL_REL_OBS = 3


@dataclass(frozen=True)
class Detection:
    """One detected vehicle: its id and pose relative to the sender."""

    target: int
    relative: GaussianPose


@dataclass(frozen=True)
class MapMeasurement:
    """Absolute pose fix of `vehicle` at time `t` (map-matching style)."""

    vehicle: int
    t: float
    pose: GaussianPose

    kind = MessageKind.MAP_MEASUREMENT


@dataclass(frozen=True)
class TemporalRelObs:
    """Dead-reckoned pose of `vehicle` at `t`, referenced to its start pose.

    Broadcasting the accumulated (origin-referenced) value rather than the
    per-step increment is what lets receivers bridge packet loss: the span
    between any two received values is itself a valid relative constraint.
    """

    vehicle: int
    t: float
    origin_pose: GaussianPose

    kind = MessageKind.TEMPORAL_REL_OBS


@dataclass(frozen=True)
class SpatialRelObs:
    """LIDAR-derived relative poses of other vehicles seen by `vehicle`."""

    vehicle: int
    t: float
    detections: tuple[Detection, ...] = field(default_factory=tuple)

    kind = MessageKind.SPATIAL_REL_OBS

    def __post_init__(self) -> None:
        object.__setattr__(self, "detections", tuple(self.detections))


Payload = MapMeasurement | TemporalRelObs | SpatialRelObs


@dataclass(frozen=True)
class WireMessage:
    """Envelope actually put on the air: payload plus sender/sequence id."""

    sender: int
    seq: int
    payload: Payload

    @property
    def kind(self) -> MessageKind:
        return self.payload.kind

    @property
    def t(self) -> float:
        return self.payload.t


def _pack_gaussian(g: GaussianPose) -> tuple[float, ...]:
    m = g.mean
    cov = g.cov
    return (m.x, m.y, m.theta) + tuple(float(cov[i, j]) for i, j in _TRIU)


def _unpack_gaussian(vals: tuple[float, ...]) -> GaussianPose:
    cov = np.empty((3, 3), dtype=float)
    for (i, j), v in zip(_TRIU, vals[3:]):
        cov[i, j] = v
        cov[j, i] = v
    return GaussianPose(Pose2(vals[0], vals[1], vals[2]), cov)


def encode(msg: WireMessage) -> bytes:
    """Serialize a message to its wire frame."""
    p = msg.payload
    if p.vehicle != msg.sender:
        raise ValueError(
            f"payload vehicle {p.vehicle} does not match sender {msg.sender}"
        )
    head = _HEADER.pack(MAGIC, int(p.kind), msg.sender, msg.seq, p.t)
    if isinstance(p, MapMeasurement):
        return head + _POSE_COV.pack(*_pack_gaussian(p.pose))
    if isinstance(p, TemporalRelObs):
        return head + _POSE_COV.pack(*_pack_gaussian(p.origin_pose))
    if isinstance(p, SpatialRelObs):
        body = _DET_COUNT.pack(len(p.detections))
        for det in p.detections:
            body += _DETECTION.pack(det.target, *_pack_gaussian(det.relative))
        return head + body
    raise TypeError(f"unsupported payload {type(p).__name__}")


def decode(frame: bytes) -> WireMessage:
    """Parse a wire frame back into a message.

    Raises TruncatedFrame when the frame does not match its declared layout
    length and UnknownKind on a bad magic or kind byte.
    """
    if len(frame) < _HEADER.size:
        raise TruncatedFrame(f"frame of {len(frame)} bytes is shorter than the header")
    magic, kind_byte, sender, seq, t = _HEADER.unpack_from(frame)
    if magic != MAGIC:
        raise UnknownKind(f"bad magic byte 0x{magic:02X}")
    try:
        kind = MessageKind(kind_byte)
    except ValueError:
        raise UnknownKind(f"unrecognized message kind 0x{kind_byte:02X}") from None

    body = frame[_HEADER.size:]
    if kind in (MessageKind.MAP_MEASUREMENT, MessageKind.TEMPORAL_REL_OBS):
        if len(body) != _POSE_COV.size:
            raise TruncatedFrame(
                f"pose payload is {len(body)} bytes, expected {_POSE_COV.size}"
            )
        g = _unpack_gaussian(_POSE_COV.unpack(body))
        payload: Payload
        if kind is MessageKind.MAP_MEASUREMENT:
            payload = MapMeasurement(sender, t, g)
        else:
            payload = TemporalRelObs(sender, t, g)
        return WireMessage(sender, seq, payload)

    if len(body) < _DET_COUNT.size:
        raise TruncatedFrame("spatial payload missing detection count")
    (count,) = _DET_COUNT.unpack_from(body)
    expected = _DET_COUNT.size + count * _DETECTION.size
    if len(body) != expected:
        raise TruncatedFrame(
            f"spatial payload is {len(body)} bytes, expected {expected} for "
            f"{count} detections"
        )
    dets = []
    off = _DET_COUNT.size
    for _ in range(count):
        vals = _DETECTION.unpack_from(body, off)
        dets.append(Detection(vals[0], _unpack_gaussian(vals[1:])))
        off += _DETECTION.size
    return WireMessage(sender, seq, SpatialRelObs(sender, t, tuple(dets)))


def frame_size(kind: MessageKind, detections: int = 0) -> int:
    """Exact frame length for a message of `kind`."""
    if kind is MessageKind.SPATIAL_REL_OBS:
        return _HEADER.size + _DET_COUNT.size + detections * _DETECTION.size
    return _HEADER.size + _POSE_COV.size
