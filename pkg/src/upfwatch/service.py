"""Analytics service: per-TEID latency sessions, game classification,
degradation verdicts and SMF notifications, plus its HTTP front end.

HTTP interface (JSON bodies)::

    POST /v1/reports            LatencyReport         -> 202 | 400
    GET  /v1/sessions           all session summaries -> 200
    GET  /v1/sessions/{teid}    session summary       -> 200 | 404
    POST /v1/classify/{teid}    {game, confidence}    -> 200 | 404 | 409 | 503
    GET  /healthz               {status, model}       -> 200

Notifications go to ``POST {smf_endpoint}/v1/notifications`` with a
Decision body, at most once per Degraded decision and never inside the
per-TEID cooldown.
"""
from __future__ import annotations

import enum
import json
import logging
import math
import re
import threading
import urllib.error
import urllib.request
from collections import deque
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Mapping, Optional, Sequence

import numpy as np

from upfwatch.ml.models import TrainedModel

log = logging.getLogger(__name__)

TEID_MAX = 0xFFFFFFFF
DERIVED_FEATURE_NAMES = (
    "mean_of_means",
    "std_of_means",
    "min_of_mins",
    "max_of_maxes",
    "p10_mean",
    "p25_mean",
    "p50_mean",
    "p75_mean",
    "p90_mean",
    "iqr_mean",
    "mean_spread",
    "mean_sample_count",
)


class ServiceError(Exception):
    status = 500


class MalformedReport(ServiceError):
    status = 400


class UnknownTeid(ServiceError):
    status = 404


class InsufficientData(ServiceError):
    status = 409


class Unclassified(ServiceError):
    status = 409


class NoModelLoaded(ServiceError):
    status = 503


class NotificationError(ServiceError):
    pass


class EndpointUnreachable(NotificationError):
    pass


class Non2xxResponse(NotificationError):
    def __init__(self, status_code: int, body: str = ""):
        super().__init__(f"SMF answered HTTP {status_code}")
        self.status_code = status_code
        self.body = body


class Verdict(enum.Enum):
    HEALTHY = "Healthy"
    DEGRADED = "Degraded"


@dataclass(frozen=True)
class LatencyReport:
    teid: int
    window_start: float
    mean_ms: float
    min_ms: float
    max_ms: float
    sample_count: int
    features: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        problems = []
        if not isinstance(self.teid, int) or not 0 <= self.teid <= TEID_MAX:
            problems.append("teid must be an unsigned 32-bit integer")
        nums = (self.window_start, self.mean_ms, self.min_ms, self.max_ms)
        if not all(isinstance(v, (int, float)) and math.isfinite(v) for v in nums):
            problems.append("window_start and latency fields must be finite numbers")
        elif not self.min_ms <= self.mean_ms <= self.max_ms:
            problems.append("need min_ms <= mean_ms <= max_ms")
        if not isinstance(self.sample_count, int) or self.sample_count < 1:
            problems.append("sample_count must be an integer >= 1")
        if self.features is not None:
            try:
                feats = tuple(float(v) for v in self.features)
            except (TypeError, ValueError):
                feats = ()
            if not feats or not all(math.isfinite(v) for v in feats):
                problems.append("features must be a non-empty list of finite numbers")
            else:
                object.__setattr__(self, "features", feats)
        if problems:
            raise MalformedReport("; ".join(problems))

    @classmethod
    def from_dict(cls, doc: Mapping) -> "LatencyReport":
        if not isinstance(doc, Mapping):
            raise MalformedReport("report body must be a JSON object")
        missing = {"teid", "window_start", "mean_ms", "min_ms", "max_ms", "sample_count"} - set(doc)
        if missing:
            raise MalformedReport(f"missing fields: {sorted(missing)}")
        return cls(
            teid=doc["teid"],
            window_start=doc["window_start"],
            mean_ms=doc["mean_ms"],
            min_ms=doc["min_ms"],
            max_ms=doc["max_ms"],
            sample_count=doc["sample_count"],
            features=doc.get("features"),
        )

    def to_dict(self) -> dict:
        doc = {
            "teid": self.teid,
            "window_start": self.window_start,
            "mean_ms": self.mean_ms,
            "min_ms": self.min_ms,
            "max_ms": self.max_ms,
            "sample_count": self.sample_count,
        }
        if self.features is not None:
            doc["features"] = list(self.features)
        return doc


@dataclass(frozen=True)
class DegradationPolicy:
    budget_ms: Mapping[str, float] = field(default_factory=lambda: {"LOL": 100.0, "TFT": 100.0, "VAL": 100.0})
    breach_fraction: float = 0.5
    min_windows: int = 4
    cooldown_s: float = 30.0
    default_budget_ms: float = 100.0

    def __post_init__(self):
        if any(v <= 0 for v in self.budget_ms.values()) or self.default_budget_ms <= 0:
            raise ValueError("latency budgets must be > 0")
        if not 0.0 < self.breach_fraction <= 1.0:
            raise ValueError("breach_fraction must be in (0, 1]")
        if self.min_windows < 1:
            raise ValueError("min_windows must be >= 1")
        if self.cooldown_s < 0:
            raise ValueError("cooldown_s must be >= 0")

    def budget_for(self, game: str) -> float:
        return float(self.budget_ms.get(game, self.default_budget_ms))

    @classmethod
    def from_dict(cls, doc: Mapping) -> "DegradationPolicy":
        return cls(
            budget_ms={str(k): float(v) for k, v in doc.get("budget_ms", {}).items()} or cls().budget_ms,
            breach_fraction=float(doc.get("breach_fraction", 0.5)),
            min_windows=int(doc.get("min_windows", 4)),
            cooldown_s=float(doc.get("cooldown_s", 30.0)),
        )


@dataclass(frozen=True)
class Decision:
    teid: int
    verdict: Verdict
    game: str
    breach_fraction: float
    budget_ms: float
    required_fraction: float
    windows: int
    issued_at: float

    def to_dict(self) -> dict:
        return {
            "teid": self.teid,
            "verdict": self.verdict.value,
            "game": self.game,
            "evidence": {
                "breach_fraction": self.breach_fraction,
                "budget_ms": self.budget_ms,
                "required_fraction": self.required_fraction,
                "windows": self.windows,
            },
            "issued_at": self.issued_at,
        }


@dataclass
class SessionState:
    teid: int
    ring: deque
    classification: Optional[tuple[str, float]] = None
    last_decision: Optional[Decision] = None
    last_notified_at: Optional[float] = None
    lock: threading.RLock = field(default_factory=threading.RLock, repr=False)
    # bumped on every ingest; classification is cached against it
    version: int = 0
    classified_version: int = -1

    def summary(self) -> dict:
        return {
            "teid": self.teid,
            "reports": len(self.ring),
            "ring": [r.to_dict() for r in self.ring],
            "classification": (
                None
                if self.classification is None
                else {"game": self.classification[0], "confidence": self.classification[1]}
            ),
            "last_decision": None if self.last_decision is None else self.last_decision.to_dict(),
        }


@dataclass
class Delivery:
    outcome: str  # "delivered" | "suppressed"
    status_code: Optional[int] = None


@dataclass
class Counters:
    reports: int = 0
    rejected: int = 0
    decisions: int = 0
    degraded: int = 0
    notified: int = 0
    suppressed: int = 0
    failed: int = 0


def derive_features(reports: Sequence[LatencyReport], dim: int) -> np.ndarray:
    """Latency-statistics vector for sessions whose reports carry no features.

    Layout follows ``DERIVED_FEATURE_NAMES``, zero-padded (or truncated) to ``dim``.
    """
    means = np.array([r.mean_ms for r in reports], dtype=np.float64)
    mins = np.array([r.min_ms for r in reports], dtype=np.float64)
    maxs = np.array([r.max_ms for r in reports], dtype=np.float64)
    counts = np.array([r.sample_count for r in reports], dtype=np.float64)
    p10, p25, p50, p75, p90 = np.percentile(means, [10, 25, 50, 75, 90])
    stats = np.array(
        [
            means.mean(),
            means.std(),
            mins.min(),
            maxs.max(),
            p10,
            p25,
            p50,
            p75,
            p90,
            p75 - p25,
            (maxs - mins).mean(),
            counts.mean(),
        ]
    )
    out = np.zeros(dim)
    n = min(dim, stats.size)
    out[:n] = stats[:n]
    return out


def post_notification(decision: Decision, endpoint: str, timeout: float = 2.0) -> int:
    """POST ``decision`` to ``{endpoint}/v1/notifications``; returns the HTTP status."""
    url = endpoint.rstrip("/") + "/v1/notifications"
    body = json.dumps(decision.to_dict()).encode()
    req = urllib.request.Request(url, data=body, method="POST", headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            status = resp.status
    except urllib.error.HTTPError as exc:
        raise Non2xxResponse(exc.code, exc.read().decode(errors="replace")) from None
    except (urllib.error.URLError, OSError) as exc:
        raise EndpointUnreachable(f"{url}: {exc}") from None
    if not 200 <= status < 300:
        raise Non2xxResponse(status)
    return status


class AnalyticsService:
    """In-process core. Thread-safe: one lock per session, one for the session table."""

    def __init__(
        self,
        model: Optional[TrainedModel] = None,
        policy: DegradationPolicy = DegradationPolicy(),
        ring_capacity: int = 32,
        smf_endpoint: Optional[str] = None,
        feature_dim: Optional[int] = None,
    ):
        if ring_capacity < 1:
            raise ValueError("ring_capacity must be >= 1")
        self.model = model
        self.policy = policy
        self.ring_capacity = ring_capacity
        self.smf_endpoint = smf_endpoint
        self.feature_dim = feature_dim if feature_dim is not None else (model.n_features if model else 16)
        self.counters = Counters()
        self.decision_log: list[Decision] = []
        self._sessions: dict[int, SessionState] = {}
        self._table_lock = threading.Lock()
        self._counter_lock = threading.Lock()

    # -- sessions ------------------------------------------------------

    def session(self, teid: int) -> SessionState:
        try:
            return self._sessions[teid]
        except KeyError:
            raise UnknownTeid(f"no session for TEID {teid}") from None

    def sessions(self) -> list[SessionState]:
        with self._table_lock:
            return list(self._sessions.values())

    def _count(self, **deltas) -> None:
        with self._counter_lock:
            for k, v in deltas.items():
                setattr(self.counters, k, getattr(self.counters, k) + v)

    def ingest_report(self, report: LatencyReport) -> dict:
        with self._table_lock:
            s = self._sessions.get(report.teid)
            if s is None:
                s = self._sessions[report.teid] = SessionState(report.teid, deque(maxlen=self.ring_capacity))
        with s.lock:
            s.ring.append(report)
            s.version += 1
            self._count(reports=1)
            return {"accepted": True, "teid": report.teid, "ring_length": len(s.ring)}

    # -- analytics -----------------------------------------------------

    def session_vector(self, s: SessionState) -> np.ndarray:
        reports = list(s.ring)
        with_features = [r.features for r in reports if r.features is not None]
        if len(with_features) >= self.policy.min_windows:
            vec = np.mean(np.array(with_features, dtype=np.float64), axis=0)
        elif len(reports) >= self.policy.min_windows:
            vec = derive_features(reports, self.feature_dim)
        else:
            raise InsufficientData(
                f"TEID {s.teid}: {len(reports)} reports, need {self.policy.min_windows}"
            )
        return vec

    def classify_session(self, teid: int) -> tuple[str, float]:
        s = self.session(teid)
        with s.lock:
            return self._classify_locked(s)

    def _classify_locked(self, s: SessionState) -> tuple[str, float]:
        if self.model is None:
            raise NoModelLoaded("service has no classification model")
        if s.classification is not None and s.classified_version == s.version:
            return s.classification
        vec = self.session_vector(s)
        if vec.size != self.model.n_features:
            raise InsufficientData(
                f"TEID {s.teid}: session vector has {vec.size} features, model expects {self.model.n_features}"
            )
        proba = self.model.predict_proba(vec[None, :])[0]
        k = int(np.argmax(proba))
        s.classification = (self.model.class_names[k], float(proba[k]))
        s.classified_version = s.version
        return s.classification

    def detect_degradation(self, teid: int, policy: Optional[DegradationPolicy] = None) -> Decision:
        s = self.session(teid)
        with s.lock:
            return self._detect_locked(s, policy or self.policy)

    def _detect_locked(self, s: SessionState, policy: DegradationPolicy) -> Decision:
        if s.classification is None:
            raise Unclassified(f"TEID {s.teid} has not been classified")
        reports = list(s.ring)
        if len(reports) < policy.min_windows:
            raise InsufficientData(f"TEID {s.teid}: {len(reports)} reports, need {policy.min_windows}")
        game = s.classification[0]
        budget = policy.budget_for(game)
        breaches = sum(1 for r in reports if r.mean_ms > budget)
        fraction = breaches / len(reports)
        verdict = Verdict.DEGRADED if fraction >= policy.breach_fraction else Verdict.HEALTHY
        decision = Decision(
            teid=s.teid,
            verdict=verdict,
            game=game,
            breach_fraction=fraction,
            budget_ms=budget,
            required_fraction=policy.breach_fraction,
            windows=len(reports),
            issued_at=reports[-1].window_start,
        )
        s.last_decision = decision
        self._count(decisions=1, degraded=int(verdict is Verdict.DEGRADED))
        with self._counter_lock:
            self.decision_log.append(decision)
        return decision

    def notify_smf(self, decision: Decision, endpoint: Optional[str] = None) -> Delivery:
        """Send a Degraded decision unless the TEID is inside its cooldown.

        Raises :class:`EndpointUnreachable` / :class:`Non2xxResponse`; no retries.
        """
        if decision.verdict is not Verdict.DEGRADED:
            raise ValueError("only Degraded decisions are sent to the SMF")
        endpoint = endpoint or self.smf_endpoint
        if endpoint is None:
            raise EndpointUnreachable("no SMF endpoint configured")
        s = self.session(decision.teid)
        with s.lock:
            if s.last_notified_at is not None and decision.issued_at - s.last_notified_at < self.policy.cooldown_s:
                self._count(suppressed=1)
                return Delivery("suppressed")
            try:
                status = post_notification(decision, endpoint)
            except NotificationError:
                self._count(failed=1)
                raise
            s.last_notified_at = decision.issued_at
            self._count(notified=1)
            return Delivery("delivered", status)

    def process(self, teid: int) -> Optional[Decision]:
        """Classify, judge and (if Degraded) notify; None while data is insufficient."""
        s = self.session(teid)
        with s.lock:
            if self.model is None or len(s.ring) < self.policy.min_windows:
                return None
            self._classify_locked(s)
            decision = self._detect_locked(s, self.policy)
            if decision.verdict is Verdict.DEGRADED and self.smf_endpoint:
                try:
                    self.notify_smf(decision)
                except NotificationError as exc:
                    log.warning("SMF notification for TEID %d failed: %s", teid, exc)
            return decision


# ------------------------------------------------------------------ HTTP

_SESSION_RE = re.compile(r"^/v1/sessions/(\d+)$")
_CLASSIFY_RE = re.compile(r"^/v1/classify/(\d+)$")


class _Handler(BaseHTTPRequestHandler):
    server: "AnalyticsHTTPServer"
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        log.debug("%s - %s", self.address_string(), fmt % args)

    def _send(self, status: int, doc) -> None:
        body = json.dumps(doc).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _error(self, exc: ServiceError) -> None:
        self._send(exc.status, {"error": type(exc).__name__, "detail": str(exc)})

    def _body(self):
        n = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(n) if n else b""
        try:
            return json.loads(raw or b"null")
        except json.JSONDecodeError as exc:
            raise MalformedReport(f"invalid JSON: {exc}") from None

    def do_GET(self):
        svc = self.server.service
        path = self.path.split("?", 1)[0]
        if path == "/healthz":
            return self._send(200, {"status": "ok", "model": svc.model is not None, "sessions": len(svc.sessions())})
        if path == "/v1/sessions":
            return self._send(200, {"sessions": [s.summary() for s in svc.sessions()]})
        m = _SESSION_RE.match(path)
        if m:
            try:
                s = svc.session(int(m.group(1)))
            except ServiceError as exc:
                return self._error(exc)
            with s.lock:
                return self._send(200, s.summary())
        self._send(404, {"error": "NotFound", "detail": path})

    def do_POST(self):
        svc = self.server.service
        path = self.path.split("?", 1)[0]
        try:
            if path == "/v1/reports":
                try:
                    report = LatencyReport.from_dict(self._body())
                except MalformedReport:
                    svc._count(rejected=1)
                    raise
                ack = svc.ingest_report(report)
                decision = svc.process(report.teid)
                ack["verdict"] = None if decision is None else decision.verdict.value
                return self._send(202, ack)
            m = _CLASSIFY_RE.match(path)
            if m:
                self._body()
                game, conf = svc.classify_session(int(m.group(1)))
                return self._send(200, {"teid": int(m.group(1)), "game": game, "confidence": conf})
        except ServiceError as exc:
            return self._error(exc)
        self._send(404, {"error": "NotFound", "detail": path})


class AnalyticsHTTPServer(ThreadingHTTPServer):
    daemon_threads = False  # server_close() joins in-flight handlers
    block_on_close = True

    def __init__(self, address, service: AnalyticsService):
        self.service = service
        super().__init__(address, _Handler)


class BindFailure(ServiceError):
    pass


class ServiceHandle:
    """A server running on a background thread; ``stop()`` drains and closes it."""

    def __init__(self, server: ThreadingHTTPServer):
        self.server = server
        self.thread = threading.Thread(target=server.serve_forever, name=type(server).__name__, daemon=True)
        self.thread.start()

    @property
    def url(self) -> str:
        host, port = self.server.server_address[:2]
        return f"http://{host}:{port}"

    def stop(self) -> None:
        self.server.shutdown()
        self.server.server_close()
        self.thread.join()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def serve(service: AnalyticsService, host: str = "127.0.0.1", port: int = 0) -> ServiceHandle:
    try:
        server = AnalyticsHTTPServer((host, port), service)
    except OSError as exc:
        raise BindFailure(f"cannot bind {host}:{port}: {exc}") from exc
    return ServiceHandle(server)


# -------------------------------------------------------------- SMF stub


class _SmfHandler(BaseHTTPRequestHandler):
    server: "SmfStub"
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        log.debug("smf-stub %s", fmt % args)

    def do_POST(self):
        n = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(n) if n else b""
        if self.path.split("?", 1)[0] != "/v1/notifications":
            status = 404
        else:
            try:
                doc = json.loads(raw)
            except json.JSONDecodeError:
                status = 400
            else:
                with self.server.lock:
                    self.server.received.append(doc)
                log.info("SMF stub: notification for TEID %s (%s)", doc.get("teid"), doc.get("verdict"))
                status = self.server.reply_status
        self.send_response(status)
        self.send_header("Content-Length", "0")
        self.end_headers()


class SmfStub(ThreadingHTTPServer):
    """Records every notification body; answers ``reply_status`` (default 204)."""

    daemon_threads = False
    block_on_close = True

    def __init__(self, address=("127.0.0.1", 0), reply_status: int = 204):
        self.received: list[dict] = []
        self.lock = threading.Lock()
        self.reply_status = reply_status
        super().__init__(address, _SmfHandler)


def start_smf_stub(host: str = "127.0.0.1", port: int = 0, reply_status: int = 204) -> tuple[ServiceHandle, SmfStub]:
    try:
        stub = SmfStub((host, port), reply_status)
    except OSError as exc:
        raise BindFailure(f"cannot bind {host}:{port}: {exc}") from exc
    return ServiceHandle(stub), stub


def service_from_config(cfg: Mapping, model: Optional[TrainedModel] = None) -> AnalyticsService:
    svc_cfg = cfg["service"]
    return AnalyticsService(
        model=model,
        policy=DegradationPolicy.from_dict(cfg["policy"]),
        ring_capacity=int(svc_cfg["ring_capacity"]),
        smf_endpoint=svc_cfg.get("smf_endpoint"),
        feature_dim=model.n_features if model else int(svc_cfg.get("feature_dim", 16)),
    )
