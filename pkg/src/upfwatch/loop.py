"""End-to-end closed loop: simulate -> track -> report -> classify/judge -> notify.

A scenario entry in the config's ``scenarios`` list::

    {"name": "over-budget",
     "profile": {"min_ms": 150, "max_ms": 600, "period_s": 30},
     "sim": {"duration_s": 60, "teids": [8193]},
     "expect": "notify"}          # or "silent"

Missing keys fall back to the config's top-level ``sim`` / ``profile``.
"""
from __future__ import annotations

import json
import logging
import urllib.request
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from upfwatch.ml.data import GAME_CLASSES, Dataset
from upfwatch.ml.models import ModelSpec, TrainedModel, fit, load_model
from upfwatch.service import (
    DERIVED_FEATURE_NAMES,
    LatencyReport,
    derive_features,
    serve,
    service_from_config,
    start_smf_stub,
)
from upfwatch.sim import SimConfig, SinusoidalProfile, estimate_trace, generate_trace
from upfwatch.tracker import LatencySample, TrackerConfig

log = logging.getLogger(__name__)

DEFAULT_SCENARIOS = [
    {
        "name": "over-budget",
        "profile": {"min_ms": 150.0, "max_ms": 600.0, "period_s": 30.0},
        "sim": {"duration_s": 60.0, "teids": [0x2001], "jitter_ms": 5.0, "loss_prob": 0.001},
        "expect": "notify",
    },
    {
        "name": "under-budget",
        "profile": {"min_ms": 1.0, "max_ms": 50.0, "period_s": 30.0},
        "sim": {"duration_s": 60.0, "teids": [0x2002], "jitter_ms": 5.0, "loss_prob": 0.001},
        "expect": "silent",
    },
]

# Per-class window-mean latency behaviour used to train the demo model on
# derived features: (centre ms, spread ms, spike probability, spike ms).
_CLASS_LATENCY = {
    "LOL": (55.0, 18.0, 0.00, 0.0),
    "TFT": (40.0, 5.0, 0.00, 0.0),
    "VAL": (30.0, 8.0, 0.10, 120.0),
}


class WindowReporter:
    """Turns a stream of samples into one LatencyReport per (TEID, window).

    A window is closed when a later-window sample for the same TEID arrives,
    or on :meth:`flush`.
    """

    def __init__(self, window_ms: float, emit: Callable[[LatencyReport], None]):
        if window_ms <= 0:
            raise ValueError("window_ms must be > 0")
        self.width = window_ms / 1000.0
        self.emit = emit
        self._open: dict[int, tuple[int, list[float]]] = {}

    def add(self, sample: LatencySample) -> None:
        bucket = int(np.floor(sample.completed_at / self.width))
        cur = self._open.get(sample.teid)
        if cur is not None and cur[0] != bucket:
            self._close(sample.teid)
            cur = None
        if cur is None:
            cur = self._open[sample.teid] = (bucket, [])
        cur[1].append(sample.total_ms)

    def _close(self, teid: int) -> None:
        bucket, vals = self._open.pop(teid)
        v = np.asarray(vals)
        self.emit(LatencyReport(teid, bucket * self.width, float(v.mean()), float(v.min()), float(v.max()), int(v.size)))

    def flush(self) -> None:
        for teid in sorted(self._open):
            self._close(teid)


def latency_session_dataset(sessions_per_class: int = 300, dim: int = 16, seed: int = 0) -> Dataset:
    """Synthetic sessions described by derived latency features, one row per session."""
    rng = np.random.default_rng(seed)
    rows, labels = [], []
    for label, name in enumerate(GAME_CLASSES):
        centre, spread, spike_p, spike = _CLASS_LATENCY[name]
        for _ in range(sessions_per_class):
            windows = int(rng.integers(4, 33))
            means = np.abs(centre + spread * rng.standard_normal(windows))
            means += spike * (rng.random(windows) < spike_p)
            widths = np.abs(rng.normal(0.3 * spread + 2.0, 1.0, windows))
            reports = [
                LatencyReport(0, float(i), float(m), float(max(m - w, 0.0)), float(m + w), int(rng.integers(5, 40)))
                for i, (m, w) in enumerate(zip(means, widths))
            ]
            rows.append(derive_features(reports, dim))
            labels.append(label)
    names = list(DERIVED_FEATURE_NAMES[:dim]) + [f"pad{j}" for j in range(dim - len(DERIVED_FEATURE_NAMES))]
    return Dataset(np.array(rows), np.array(labels), list(GAME_CLASSES), names)


def demo_model(seed: int = 0, dim: int = 16) -> TrainedModel:
    """Small gradient-boosted model on the derived latency schema."""
    data = latency_session_dataset(dim=dim, seed=seed)
    return fit(ModelSpec("gradient_boost", {"n_rounds": 30, "max_depth": 3}, seed=seed), data)


def _post_json(url: str, doc: dict, timeout: float = 5.0) -> dict:
    req = urllib.request.Request(
        url, data=json.dumps(doc).encode(), method="POST", headers={"Content-Type": "application/json"}
    )
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        return json.loads(resp.read() or b"null")


@dataclass
class ScenarioResult:
    name: str
    expect: str
    teids: list[int]
    reports: int
    decisions: dict = field(default_factory=dict)
    notifications: int = 0

    @property
    def passed(self) -> bool:
        if self.expect == "notify":
            return self.notifications >= 1
        return self.notifications == 0

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "expect": self.expect,
            "teids": self.teids,
            "reports": self.reports,
            "decisions": self.decisions,
            "notifications": self.notifications,
            "passed": self.passed,
        }


def run_loop(cfg: dict, model: Optional[TrainedModel] = None) -> list[ScenarioResult]:
    """Run every scenario against a freshly spawned service and SMF stub.

    Raises ``BindFailure`` when the configured service port is taken.
    """
    if model is None:
        path = cfg["service"].get("model_path")
        model = load_model(path) if path and Path(path).exists() else demo_model()
    scenarios = cfg.get("scenarios") or DEFAULT_SCENARIOS
    tracker_cfg = cfg["tracker"]

    stub_handle, stub = start_smf_stub()
    try:
        loop_cfg = {**cfg, "service": {**cfg["service"], "smf_endpoint": stub_handle.url}}
        service = service_from_config(loop_cfg, model)
        handle = serve(service, cfg["service"]["listen_host"], int(cfg["service"]["listen_port"]))
    except Exception:
        stub_handle.stop()
        raise
    results = []
    try:
        for sc in scenarios:
            results.append(_run_scenario(sc, cfg, tracker_cfg, handle.url, stub))
    finally:
        handle.stop()
        stub_handle.stop()
    return results


def _run_scenario(sc: dict, cfg: dict, tracker_cfg: dict, url: str, stub) -> ScenarioResult:
    sim_cfg = SimConfig(**{**cfg["sim"], **sc.get("sim", {})})
    profile = SinusoidalProfile(**{**cfg["profile"], **sc.get("profile", {})})
    records, _ = generate_trace(sim_cfg, profile)
    run = estimate_trace(
        records,
        TrackerConfig(tracker_cfg["match_timeout_ms"], int(tracker_cfg["max_pending_per_teid"])),
    )

    posted = 0
    verdicts: dict[str, int] = defaultdict(int)

    def emit(report: LatencyReport):
        nonlocal posted
        ack = _post_json(url + "/v1/reports", report.to_dict())
        posted += 1
        if ack.get("verdict"):
            verdicts[ack["verdict"]] += 1

    reporter = WindowReporter(float(tracker_cfg["window_ms"]), emit)
    for sample in sorted(run.samples, key=lambda s: (s.completed_at, s.correlation_id)):
        reporter.add(sample)
    reporter.flush()

    teids = list(sim_cfg.teids)
    with stub.lock:
        notes = sum(1 for doc in stub.received if doc.get("teid") in teids)
    result = ScenarioResult(sc.get("name", "scenario"), sc.get("expect", "notify"), teids, posted, dict(verdicts), notes)
    log.info("scenario %s: %d reports, %d notifications (%s)", result.name, posted, notes, "ok" if result.passed else "FAIL")
    return result
