"""Deterministic GTP-U request/response traces with known injected latency.

Trace file (JSON Lines), one record per line::

    {"v": 1, "ts": 12.5, "dir": "UL", "corr": 125, "bytes": "<base64 GTP-U>"}

Ground truth (CSV)::

    corr,send_ts,injected_ms,lost
"""
from __future__ import annotations

import base64
import csv
import ipaddress
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from upfwatch.gtpu import GtpuError, GtpuPacket, InnerFlowKey, encode_gtpu, encode_ipv4_udp, parse_gtpu
from upfwatch.tracker import (
    Direction,
    FlowTracker,
    LatencySample,
    Observation,
    TrackerConfig,
    TrackerError,
)

TRACE_FORMAT_VERSION = 1
GROUND_TRUTH_HEADER = ("corr", "send_ts", "injected_ms", "lost")

UE_NET = ipaddress.IPv4Address("10.45.0.1")
SERVER_ADDR = "198.51.100.10"
SERVER_PORT = 7777
UE_PORT_BASE = 40000


class CorruptRecord(ValueError):
    pass


@dataclass(frozen=True)
class SinusoidalProfile:
    min_ms: float = 1.0
    max_ms: float = 600.0
    period_s: float = 30.0
    phase_rad: float = 0.0

    def __post_init__(self):
        if not self.max_ms > self.min_ms > 0:
            raise ValueError("need max_ms > min_ms > 0")
        if self.period_s <= 0:
            raise ValueError("period_s must be > 0")


def profile_value(profile: SinusoidalProfile, t: float) -> float:
    """``min + (max - min)/2 * (1 + sin(2*pi*t/period + phase))``, clipped to [min, max]."""
    half = (profile.max_ms - profile.min_ms) / 2.0
    v = profile.min_ms + half * (1.0 + math.sin(2.0 * math.pi * t / profile.period_s + profile.phase_rad))
    return min(max(v, profile.min_ms), profile.max_ms)


@dataclass(frozen=True)
class SimConfig:
    duration_s: float = 600.0
    request_rate_hz: float = 20.0
    teids: tuple[int, ...] = (0x1001,)
    jitter_ms: float = 0.0
    loss_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.duration_s <= 0:
            raise ValueError("duration_s must be > 0")
        if self.request_rate_hz <= 0:
            raise ValueError("request_rate_hz must be > 0")
        if not 0.0 <= self.loss_prob < 1.0:
            raise ValueError("loss_prob must be in [0, 1)")
        if self.jitter_ms < 0:
            raise ValueError("jitter_ms must be >= 0")
        if not self.teids:
            raise ValueError("need at least one TEID")
        object.__setattr__(self, "teids", tuple(int(t) for t in self.teids))

    @property
    def request_count(self) -> int:
        return int(math.floor(self.duration_s * self.request_rate_hz + 1e-9))


@dataclass(frozen=True)
class TraceRecord:
    timestamp: float
    direction: Direction
    wire_bytes: bytes
    correlation_id: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "v": TRACE_FORMAT_VERSION,
                "ts": self.timestamp,
                "dir": self.direction.value,
                "corr": self.correlation_id,
                "bytes": base64.b64encode(self.wire_bytes).decode("ascii"),
            },
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line: str) -> "TraceRecord":
        doc = json.loads(line)
        version = doc.get("v", TRACE_FORMAT_VERSION)
        if version != TRACE_FORMAT_VERSION:
            raise ValueError(f"unsupported trace format version {version!r}")
        return cls(float(doc["ts"]), Direction(doc["dir"]), base64.b64decode(doc["bytes"]), int(doc["corr"]))


@dataclass(frozen=True)
class TruthRecord:
    correlation_id: int
    send_ts: float
    injected_ms: float
    lost: bool


@dataclass
class GroundTruth:
    records: list[TruthRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def by_corr(self) -> dict[int, TruthRecord]:
        return {r.correlation_id: r for r in self.records}


def ue_flow(teid_index: int) -> InnerFlowKey:
    """Uplink 5-tuple used for the ``teid_index``-th tunnel."""
    ue = str(UE_NET + teid_index)
    return InnerFlowKey(ue, SERVER_ADDR, UE_PORT_BASE + teid_index % 20000, SERVER_PORT, 17)


def _packet(teid: int, flow: InnerFlowKey, corr: int, size: int) -> bytes:
    body = struct.pack(">Q", corr).ljust(size, b"\x00")
    inner = encode_ipv4_udp(flow, body, ident=corr)
    return encode_gtpu(GtpuPacket.build(teid, inner))


def generate_trace(config: SimConfig, profile: SinusoidalProfile = SinusoidalProfile()):
    """Return ``(records, ground_truth)`` for ``config``.

    Request ``i`` leaves at ``i / rate`` on TEID ``teids[i % len(teids)]``.
    Its response is observed ``injected_ms`` later, where ``injected_ms`` is
    the profile value plus N(0, jitter) clamped at 0; with probability
    ``loss_prob`` the response is never emitted.
    """
    n = config.request_count
    rng = np.random.default_rng(config.seed)
    noise = rng.normal(0.0, config.jitter_ms, n) if config.jitter_ms > 0 else np.zeros(n)
    lost = rng.random(n) < config.loss_prob if config.loss_prob > 0 else np.zeros(n, dtype=bool)

    flows = [ue_flow(k) for k in range(len(config.teids))]
    keyed = []
    truth = GroundTruth()
    for i in range(n):
        send = i / config.request_rate_hz
        injected = max(profile_value(profile, send) + float(noise[i]), 0.0)
        k = i % len(config.teids)
        teid, flow = config.teids[k], flows[k]
        keyed.append(((send, i, 0), TraceRecord(send, Direction.UPLINK, _packet(teid, flow, i, 32), i)))
        if not lost[i]:
            back = send + injected / 1000.0
            rec = TraceRecord(back, Direction.DOWNLINK, _packet(teid, flow.reversed(), i, 64), i)
            keyed.append(((back, i, 1), rec))
        truth.records.append(TruthRecord(i, send, injected, bool(lost[i])))
    keyed.sort(key=lambda kv: kv[0])
    return [rec for _, rec in keyed], truth


@dataclass
class ReplaySummary:
    delivered: int = 0
    failed: int = 0
    sink_errors: int = 0


def to_observation(record: TraceRecord) -> Observation:
    try:
        pkt = parse_gtpu(record.wire_bytes)
    except GtpuError as exc:
        raise CorruptRecord(f"corr {record.correlation_id}: {exc}") from exc
    if pkt.inner_flow is None:
        raise CorruptRecord(f"corr {record.correlation_id}: no inner IPv4 UDP/TCP flow")
    return Observation(record.timestamp, record.direction, pkt.teid, pkt.inner_flow, record.correlation_id)


def replay(trace: Iterable[TraceRecord], sink: Callable[[Observation], object]) -> ReplaySummary:
    """Parse each record and hand it to ``sink`` in order.

    Unparseable records are skipped and counted as ``failed``; tracker
    errors raised by the sink are counted as ``sink_errors``.
    """
    summary = ReplaySummary()
    for record in trace:
        try:
            obs = to_observation(record)
        except CorruptRecord:
            summary.failed += 1
            continue
        try:
            sink(obs)
        except TrackerError:
            summary.sink_errors += 1
        summary.delivered += 1
    return summary


@dataclass
class EstimateRun:
    samples: list[LatencySample]
    tracker: FlowTracker
    replay: ReplaySummary
    expired: int


def estimate_trace(
    trace: Sequence[TraceRecord],
    config: TrackerConfig = TrackerConfig(),
    flush_every_s: float = 1.0,
    drain: bool = True,
) -> EstimateRun:
    """Replay ``trace`` through a fresh tracker, flushing stale entries as time advances."""
    tracker = FlowTracker(config)
    samples: list[LatencySample] = []
    expired = 0
    next_flush = None

    def sink(obs: Observation):
        nonlocal next_flush, expired
        if next_flush is None:
            next_flush = obs.timestamp + flush_every_s
        elif obs.timestamp >= next_flush:
            expired += len(tracker.flush_stale(obs.timestamp))
            next_flush = obs.timestamp + flush_every_s
        sample = tracker.observe(obs)
        if sample is not None:
            samples.append(sample)

    summary = replay(trace, sink)
    if drain:
        expired += len(tracker.drain())
    return EstimateRun(samples, tracker, summary, expired)


def pair_with_truth(samples: Sequence[LatencySample], truth: GroundTruth):
    """Aligned (send_ts, truth_ms, estimate_ms) arrays for every matched request."""
    index = truth.by_corr()
    rows = [(index[s.correlation_id].send_ts, index[s.correlation_id].injected_ms, s.total_ms) for s in samples]
    rows.sort()
    arr = np.array(rows, dtype=np.float64).reshape(-1, 3)
    return arr[:, 0], arr[:, 1], arr[:, 2]


# ------------------------------------------------------------------ files


def write_trace(path, records: Iterable[TraceRecord]) -> int:
    n = 0
    with open(path, "w", newline="\n") as fh:
        for rec in records:
            fh.write(rec.to_json())
            fh.write("\n")
            n += 1
    return n


def read_trace(path) -> list[TraceRecord]:
    with open(path) as fh:
        return [TraceRecord.from_json(line) for line in fh if line.strip()]


def write_ground_truth(path, truth: GroundTruth) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GROUND_TRUTH_HEADER)
        for r in truth.records:
            w.writerow([r.correlation_id, repr(r.send_ts), repr(r.injected_ms), int(r.lost)])


def read_ground_truth(path) -> GroundTruth:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != GROUND_TRUTH_HEADER:
            raise ValueError(f"{path}: expected header {','.join(GROUND_TRUTH_HEADER)}")
        return GroundTruth(
            [
                TruthRecord(int(r["corr"]), float(r["send_ts"]), float(r["injected_ms"]), r["lost"] in ("1", "true"))
                for r in reader
            ]
        )
