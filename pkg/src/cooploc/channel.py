"""Broadcast channel with loss, delay, duplication and reordering.

The channel is deliberately simple: every broadcast fans out to all other
receivers, each copy independently survives a Bernoulli loss draw and picks
up a uniform delay.  Receivers poll for everything that has arrived by their
current clock; duplicate copies (same sender and sequence number) are
suppressed at the receiver, first arrival wins.

All randomness comes from one seeded generator, so a fixed seed replays the
exact same delivery schedule.
"""

from __future__ import annotations

import csv
import heapq
import io
from dataclasses import dataclass, field

import numpy as np

from .wire import WireMessage

__all__ = ["ChannelConfig", "Channel", "DeliveryRecord"]


@dataclass(frozen=True)
class ChannelConfig:
    loss_prob: float = 0.0
    delay_base: float = 0.005
    delay_jitter: float = 0.035
    duplicate_prob: float = 0.0
    reorder: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.loss_prob <= 1.0:
            raise ValueError("loss_prob must be in [0, 1]")
        if not 0.0 <= self.duplicate_prob <= 1.0:
            raise ValueError("duplicate_prob must be in [0, 1]")
        if self.delay_base < 0.0 or self.delay_jitter < 0.0:
            raise ValueError("delays must be nonnegative")


@dataclass(frozen=True)
class DeliveryRecord:
    """One scheduled copy: its fate ends up in the delivery trace."""

    send_t: float
    recv_t: float | None  # None when the copy was lost
    sender: int
    receiver: int
    kind: int
    seq: int
    dropped: bool


class Channel:
    """Fan-out broadcast medium between a known set of peers."""

    def __init__(self, config: ChannelConfig, vehicles: "int | list[int]") -> None:
        ids = list(range(vehicles)) if isinstance(vehicles, int) else list(vehicles)
        if len(set(ids)) != len(ids):
            raise ValueError("vehicle ids must be unique")
        self.config = config
        self.vehicle_ids = ids
        self._rng = np.random.default_rng(config.seed)
        self._queues: dict[int, list] = {v: [] for v in ids}
        self._tiebreak = 0
        self._last_arrival: dict[tuple[int, int], float] = {}
        self._seen: dict[int, set[tuple[int, int]]] = {v: set() for v in ids}
        self.trace: list[DeliveryRecord] = []
        self.sent = 0
        self.scheduled = 0
        self.dropped = 0
        self.delivered = 0
        self.suppressed_duplicates = 0

    def broadcast(self, msg: WireMessage, send_t: float) -> None:
        """Offer one message to every other vehicle."""
        self.sent += 1
        for receiver in self.vehicle_ids:
            if receiver == msg.sender:
                continue
            self._offer_copy(msg, send_t, receiver)
            if self.config.duplicate_prob > 0.0 and (
                self._rng.random() < self.config.duplicate_prob
            ):
                self._offer_copy(msg, send_t, receiver)

    def _offer_copy(self, msg: WireMessage, send_t: float, receiver: int) -> None:
        cfg = self.config
        if self._rng.random() < cfg.loss_prob:
            self.dropped += 1
            self.trace.append(
                DeliveryRecord(send_t, None, msg.sender, receiver, int(msg.kind), msg.seq, True)
            )
            return
        arrival = send_t + cfg.delay_base + cfg.delay_jitter * self._rng.random()
        if not cfg.reorder:
            # FIFO per sender->receiver stream: never schedule behind an
            # earlier copy of the same stream.
            key = (msg.sender, receiver)
            arrival = max(arrival, self._last_arrival.get(key, arrival))
            self._last_arrival[key] = arrival
        self.scheduled += 1
        self._tiebreak += 1
        heapq.heappush(self._queues[receiver], (arrival, self._tiebreak, msg))
        self.trace.append(
            DeliveryRecord(send_t, arrival, msg.sender, receiver, int(msg.kind), msg.seq, False)
        )

    def poll(self, receiver: int, now: float) -> list[tuple[float, WireMessage]]:
        """Everything that has arrived at `receiver` by `now`, oldest first.

        Duplicate (sender, seq) pairs beyond the first are suppressed here.
        """
        q = self._queues[receiver]
        seen = self._seen[receiver]
        out: list[tuple[float, WireMessage]] = []
        while q and q[0][0] <= now:
            arrival, _, msg = heapq.heappop(q)
            ident = (msg.sender, msg.seq)
            if ident in seen:
                self.suppressed_duplicates += 1
                continue
            seen.add(ident)
            self.delivered += 1
            out.append((arrival, msg))
        return out

    def pending(self, receiver: int | None = None) -> int:
        if receiver is not None:
            return len(self._queues[receiver])
        return sum(len(q) for q in self._queues.values())

    def next_arrival(self) -> float | None:
        """Earliest outstanding arrival time across all receivers, if any."""
        times = [q[0][0] for q in self._queues.values() if q]
        return min(times) if times else None

    def trace_csv(self) -> str:
        """Delivery trace as CSV: send_t,recv_t,sender,receiver,kind,seq,dropped."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["send_t", "recv_t", "sender", "receiver", "kind", "seq", "dropped"])
        for r in self.trace:
            w.writerow(
                [
                    f"{r.send_t:.6f}",
                    "" if r.recv_t is None else f"{r.recv_t:.6f}",
                    r.sender,
                    r.receiver,
                    r.kind,
                    r.seq,
                    int(r.dropped),
                ]
            )
        return buf.getvalue()

    def stats(self) -> dict[str, int]:
        return {
            "sent": self.sent,
            "scheduled": self.scheduled,
            "dropped": self.dropped,
            "delivered": self.delivered,
            "pending": self.pending(),
            "suppressed_duplicates": self.suppressed_duplicates,
        }
