"""Per-TEID request/response matching at a single capture point.

An uplink observation opens a pending entry keyed by (TEID, inner 5-tuple,
correlation id).  The downlink observation carrying the same correlation id
on the reversed 5-tuple closes it and yields a :class:`LatencySample`.

Request leg: uplink request seen -> downlink response seen, i.e. the
UPF -> server -> UPF round trip.  Response leg: UPF -> UE -> UPF, which
needs a UE-side echo that a two-record trace does not carry, so it is 0
unless supplied through :meth:`FlowTracker.add_response_leg`.
"""
from __future__ import annotations

import enum
from collections import OrderedDict, defaultdict, deque
from dataclasses import dataclass
from typing import Optional

import numpy as np

from upfwatch.gtpu import InnerFlowKey

OUT_OF_ORDER_TOLERANCE_S = 0.050


class TrackerError(ValueError):
    pass


class NegativeInterval(TrackerError):
    pass


class OutOfOrder(TrackerError):
    pass


class PendingOverflow(TrackerError):
    """Raised after the oldest pending entry of a TEID was evicted to make room.

    The offending observation itself *was* recorded; ``evicted`` is the
    dropped entry.
    """

    def __init__(self, teid: int, evicted: "PendingEntry"):
        super().__init__(f"TEID {teid}: pending table full, evicted correlation id {evicted.correlation_id}")
        self.teid = teid
        self.evicted = evicted


class Direction(enum.Enum):
    UPLINK = "UL"
    DOWNLINK = "DL"


@dataclass(frozen=True)
class Observation:
    timestamp: float
    direction: Direction
    teid: int
    inner_flow: InnerFlowKey
    correlation_id: int


@dataclass(frozen=True)
class LatencySample:
    teid: int
    request_leg_ms: float
    response_leg_ms: float
    total_ms: float
    completed_at: float
    correlation_id: int = -1


@dataclass(frozen=True)
class PendingEntry:
    teid: int
    flow: InnerFlowKey
    correlation_id: int
    timestamp: float


@dataclass(frozen=True)
class TrackerConfig:
    match_timeout_ms: float = 2000.0
    max_pending_per_teid: int = 4096

    def __post_init__(self):
        if self.match_timeout_ms <= 0:
            raise ValueError("match_timeout_ms must be > 0")
        if self.max_pending_per_teid <= 0:
            raise ValueError("max_pending_per_teid must be > 0")


@dataclass
class TrackerStats:
    observations: int = 0
    matched: int = 0  # observations consumed by emitted samples (two per sample)
    samples: int = 0
    expired: int = 0  # timed out or evicted by overflow
    orphans: int = 0  # responses with nothing pending
    overflows: int = 0
    rejected: int = 0  # out-of-order or negative interval; not in ``observations``


def time_shift_latency(t_in: float, t_out: float) -> float:
    """Milliseconds between a packet entering and leaving the vantage point."""
    if t_out < t_in:
        raise NegativeInterval(f"t_out {t_out!r} precedes t_in {t_in!r}")
    return (t_out - t_in) * 1000.0


def total_latency(request_leg_ms: float, response_leg_ms: float) -> float:
    return request_leg_ms + response_leg_ms


class FlowTracker:
    """Single-writer matcher. Shard by TEID across instances for parallelism."""

    def __init__(self, config: TrackerConfig = TrackerConfig()):
        self.config = config
        self.stats = TrackerStats()
        # key -> FIFO of slot numbers sharing that key
        self._pending: dict[tuple, deque[int]] = {}
        # teid -> slot -> (key, entry), insertion ordered for oldest-first eviction
        self._order: dict[int, OrderedDict] = defaultdict(OrderedDict)
        self._seq = 0
        self._high_water = -np.inf
        self._response_legs: dict[tuple, float] = {}

    @property
    def pending_count(self) -> int:
        return sum(len(q) for q in self._pending.values())

    def pending_for(self, teid: int) -> int:
        return len(self._order.get(teid, ()))

    def observe(self, obs: Observation) -> Optional[LatencySample]:
        if obs.timestamp < self._high_water - OUT_OF_ORDER_TOLERANCE_S:
            self.stats.rejected += 1
            raise OutOfOrder(
                f"timestamp {obs.timestamp!r} is more than {OUT_OF_ORDER_TOLERANCE_S * 1000:.0f} ms "
                f"behind {self._high_water!r}"
            )
        if obs.direction is Direction.UPLINK:
            self._high_water = max(self._high_water, obs.timestamp)
            self.stats.observations += 1
            self._add_pending(PendingEntry(obs.teid, obs.inner_flow, obs.correlation_id, obs.timestamp))
            return None

        key = (obs.teid, obs.inner_flow.reversed(), obs.correlation_id)
        queue = self._pending.get(key)
        if queue:
            head = self._order[obs.teid][queue[0]][1]
            if obs.timestamp < head.timestamp:
                # a response stamped before its request: reject, keep the request pending
                self.stats.rejected += 1
                time_shift_latency(head.timestamp, obs.timestamp)
        self._high_water = max(self._high_water, obs.timestamp)
        self.stats.observations += 1
        if not queue:
            self.stats.orphans += 1
            return None
        entry = self._pop(key)
        request_leg = time_shift_latency(entry.timestamp, obs.timestamp)
        response_leg = self._response_legs.pop(key, 0.0)
        self.stats.matched += 2
        self.stats.samples += 1
        return LatencySample(
            teid=obs.teid,
            request_leg_ms=request_leg,
            response_leg_ms=response_leg,
            total_ms=total_latency(request_leg, response_leg),
            completed_at=obs.timestamp,
            correlation_id=obs.correlation_id,
        )

    def add_response_leg(self, teid: int, flow: InnerFlowKey, correlation_id: int, leg_ms: float) -> None:
        """Attach a separately measured UE-side leg to a pending request."""
        if leg_ms < 0:
            raise NegativeInterval("response leg must be >= 0 ms")
        self._response_legs[(teid, flow, correlation_id)] = leg_ms

    def flush_stale(self, now: float) -> list[PendingEntry]:
        """Drop and return every pending entry older than the match timeout."""
        limit = self.config.match_timeout_ms
        expired = []
        for order in self._order.values():
            stale = [slot for slot, (_, e) in order.items() if (now - e.timestamp) * 1000.0 > limit]
            expired.extend(self._pop(order[slot][0], slot) for slot in stale)
        self.stats.expired += len(expired)
        expired.sort(key=lambda e: e.timestamp)
        return expired

    def drain(self) -> list[PendingEntry]:
        """Expire everything still pending (end of capture)."""
        return self.flush_stale(np.inf)

    def _add_pending(self, entry: PendingEntry) -> None:
        key = (entry.teid, entry.flow, entry.correlation_id)
        order = self._order[entry.teid]
        evicted = None
        if len(order) >= self.config.max_pending_per_teid:
            slot, (oldest_key, _) = next(iter(order.items()))
            evicted = self._pop(oldest_key, slot)
            self.stats.expired += 1
            self.stats.overflows += 1
        self._seq += 1
        self._pending.setdefault(key, deque()).append(self._seq)
        order[self._seq] = (key, entry)
        if evicted is not None:
            raise PendingOverflow(entry.teid, evicted)

    def _pop(self, key, slot: Optional[int] = None) -> PendingEntry:
        """Remove one entry under ``key``: the oldest (FIFO) unless ``slot`` names it."""
        queue = self._pending[key]
        if slot is None:
            slot = queue.popleft()
        else:
            queue.remove(slot)
        if not queue:
            del self._pending[key]
        teid = key[0]
        _, entry = self._order[teid].pop(slot)
        return entry


@dataclass(frozen=True)
class WindowStat:
    window_start: float
    mean_ms: float
    min_ms: float
    max_ms: float
    count: int


def window_aggregate(samples, window_ms: float) -> list[WindowStat]:
    """Bucket samples by ``completed_at`` into fixed windows; empty windows are omitted."""
    if window_ms <= 0:
        raise ValueError("window_ms must be > 0")
    if not samples:
        return []
    width = window_ms / 1000.0
    ts = np.array([s.completed_at for s in samples])
    vals = np.array([s.total_ms for s in samples])
    bucket = np.floor(ts / width).astype(np.int64)
    out = []
    for b in np.unique(bucket):
        v = vals[bucket == b]
        out.append(WindowStat(float(b * width), float(v.mean()), float(v.min()), float(v.max()), int(v.size)))
    return out
