import json
import socket
import threading
import urllib.error
import urllib.request

import numpy as np
import pytest

from upfwatch.loop import WindowReporter, demo_model, latency_session_dataset
from upfwatch.ml import Dataset, ModelSpec, fit
from upfwatch.service import (
    AnalyticsService,
    DegradationPolicy,
    EndpointUnreachable,
    InsufficientData,
    LatencyReport,
    MalformedReport,
    NoModelLoaded,
    Non2xxResponse,
    Unclassified,
    UnknownTeid,
    Verdict,
    derive_features,
    serve,
    start_smf_stub,
)
from upfwatch.tracker import LatencySample


@pytest.fixture(scope="module")
def toy_model():
    # two well-separated classes in a 2-d feature space
    X = np.array([[0.0, 0.0], [0.1, 0.0], [10.0, 10.0], [10.0, 9.9]])
    data = Dataset(X, np.array([0, 0, 2, 2]), ["LOL", "TFT", "VAL"], ["a", "b"])
    return fit(ModelSpec("knn", {"k": 1}), data)


def report(teid=1, t=0.0, mean=10.0, feats=(0.0, 0.0), count=5):
    return LatencyReport(teid, t, mean, mean, mean, count, feats)


def policy(**kw):
    base = dict(budget_ms={"LOL": 50.0, "VAL": 80.0}, breach_fraction=0.5, min_windows=4, cooldown_s=30.0)
    base.update(kw)
    return DegradationPolicy(**base)


def http(method, url, doc=None):
    data = None if doc is None else json.dumps(doc).encode()
    req = urllib.request.Request(url, data=data, method=method, headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req, timeout=5) as resp:
            return resp.status, json.loads(resp.read() or b"null")
    except urllib.error.HTTPError as exc:
        return exc.code, json.loads(exc.read() or b"null")


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


# ---------------------------------------------------------------- reports


@pytest.mark.parametrize(
    "doc",
    [
        {"teid": -1, "window_start": 0, "mean_ms": 1, "min_ms": 1, "max_ms": 1, "sample_count": 1},
        {"teid": 2**32, "window_start": 0, "mean_ms": 1, "min_ms": 1, "max_ms": 1, "sample_count": 1},
        {"teid": 1, "window_start": 0, "mean_ms": 5, "min_ms": 6, "max_ms": 7, "sample_count": 1},
        {"teid": 1, "window_start": 0, "mean_ms": 1, "min_ms": 1, "max_ms": 1, "sample_count": 0},
        {"teid": 1, "window_start": 0, "mean_ms": "x", "min_ms": 1, "max_ms": 1, "sample_count": 1},
        {"teid": 1, "window_start": 0, "mean_ms": 1, "min_ms": 1, "max_ms": 1, "sample_count": 1, "features": []},
        {"teid": 1, "window_start": 0, "mean_ms": 1, "min_ms": 1, "max_ms": 1},
        [1, 2],
    ],
)
def test_malformed_reports(doc):
    with pytest.raises(MalformedReport):
        LatencyReport.from_dict(doc)


def test_report_dict_roundtrip():
    r = report(feats=(1.0, 2.0))
    assert LatencyReport.from_dict(r.to_dict()) == r
    plain = LatencyReport(7, 1.0, 2.0, 1.0, 3.0, 4)
    assert LatencyReport.from_dict(plain.to_dict()) == plain


def test_policy_validation():
    for bad in ({"breach_fraction": 0.0}, {"min_windows": 0}, {"cooldown_s": -1}, {"budget_ms": {"LOL": 0}}):
        with pytest.raises(ValueError):
            policy(**bad)
    assert policy().budget_for("TFT") == 100.0


def test_derive_features_layout():
    reps = [LatencyReport(1, float(i), m, m - 1, m + 1, 10) for i, m in enumerate([10.0, 20.0, 30.0, 40.0])]
    v = derive_features(reps, 16)
    assert v.shape == (16,)
    assert v[0] == 25.0 and v[2] == 9.0 and v[3] == 41.0
    assert v[6] == 25.0  # median of window means
    assert v[10] == 2.0 and v[11] == 10.0
    assert np.all(v[12:] == 0)
    assert derive_features(reps, 4).tolist() == v[:4].tolist()


# ---------------------------------------------------------------- in-process


def test_ring_capacity_bounds_history(toy_model):
    svc = AnalyticsService(toy_model, policy(), ring_capacity=3)
    for i in range(5):
        ack = svc.ingest_report(report(t=i))
    assert ack["ring_length"] == 3
    assert [r.window_start for r in svc.session(1).ring] == [2.0, 3.0, 4.0]


def test_classify_errors(toy_model):
    svc = AnalyticsService(toy_model, policy())
    with pytest.raises(UnknownTeid):
        svc.classify_session(9)
    svc.ingest_report(report())
    with pytest.raises(InsufficientData):
        svc.classify_session(1)
    bare = AnalyticsService(None, policy())
    bare.ingest_report(report())
    with pytest.raises(NoModelLoaded):
        bare.classify_session(1)


def test_classify_and_detect(toy_model):
    svc = AnalyticsService(toy_model, policy())
    for i in range(4):
        svc.ingest_report(report(t=i, mean=60.0 if i < 2 else 10.0))
    with pytest.raises(Unclassified):
        svc.detect_degradation(1)
    assert svc.classify_session(1) == ("LOL", 1.0)
    d = svc.detect_degradation(1)
    # 2 of 4 windows over the 50 ms LOL budget meets a 0.5 threshold
    assert d.verdict is Verdict.DEGRADED
    assert (d.breach_fraction, d.budget_ms, d.windows, d.issued_at) == (0.5, 50.0, 4, 3.0)
    doc = d.to_dict()
    assert doc["verdict"] == "Degraded" and doc["evidence"]["required_fraction"] == 0.5
    assert svc.detect_degradation(1, policy(breach_fraction=0.75)).verdict is Verdict.HEALTHY


@pytest.mark.parametrize(
    "means,expected",
    [
        ([60.0, 70.0, 10.0, 80.0], Verdict.DEGRADED),  # 3 of 4 over 50 ms
        ([10.0, 20.0, 30.0, 40.0], Verdict.HEALTHY),
        ([50.0, 50.0, 50.0, 50.0], Verdict.HEALTHY),  # equal to the budget is not a breach
        ([51.0, 10.0, 10.0, 10.0], Verdict.HEALTHY),  # 1 of 4 < 0.5
    ],
)
def test_breach_counting(toy_model, means, expected):
    svc = AnalyticsService(toy_model, policy())
    for i, m in enumerate(means):
        svc.ingest_report(report(t=i, mean=m))
    svc.classify_session(1)
    assert svc.detect_degradation(1).verdict is expected


def test_budget_depends_on_class(toy_model):
    svc = AnalyticsService(toy_model, policy())
    for i in range(4):
        svc.ingest_report(report(teid=2, t=i, mean=60.0, feats=(10.0, 10.0)))
    assert svc.classify_session(2)[0] == "VAL"
    d = svc.detect_degradation(2)
    assert d.verdict is Verdict.HEALTHY and d.budget_ms == 80.0


def test_classification_cached_until_new_report(toy_model):
    svc = AnalyticsService(toy_model, policy(), ring_capacity=4)
    for i in range(4):
        svc.ingest_report(report(t=i))
    assert svc.classify_session(1)[0] == "LOL"
    for i in range(4, 8):
        svc.ingest_report(report(t=i, feats=(10.0, 10.0)))
    assert svc.classify_session(1)[0] == "VAL"


def test_feature_dim_mismatch_is_insufficient(toy_model):
    svc = AnalyticsService(toy_model, policy())
    for i in range(4):
        svc.ingest_report(LatencyReport(1, float(i), 5.0, 5.0, 5.0, 1))
    # derived vectors are 2-d for a 2-feature model; they classify fine
    assert svc.classify_session(1)[0] in ("LOL", "TFT", "VAL")
    for i in range(4):
        svc.ingest_report(report(teid=3, t=i, feats=(1.0, 2.0, 3.0)))
    with pytest.raises(InsufficientData):
        svc.classify_session(3)


def test_notify_paths(toy_model):
    handle, stub = start_smf_stub()
    with handle:
        svc = AnalyticsService(toy_model, policy(), smf_endpoint=handle.url)
        for i in range(4):
            svc.ingest_report(report(t=i, mean=99.0))
        svc.classify_session(1)
        first = svc.detect_degradation(1)
        assert svc.notify_smf(first).outcome == "delivered"
        # a decision 10 s later is inside the 30 s cooldown
        svc.ingest_report(report(t=13.0, mean=99.0))
        second = svc.detect_degradation(1)
        assert svc.notify_smf(second).outcome == "suppressed"
        svc.ingest_report(report(t=40.0, mean=99.0))
        third = svc.detect_degradation(1)
        delivery = svc.notify_smf(third)
        assert (delivery.outcome, delivery.status_code) == ("delivered", 204)
        with stub.lock:
            assert [doc["issued_at"] for doc in stub.received] == [3.0, 40.0]
        assert (svc.counters.notified, svc.counters.suppressed) == (2, 1)
        healthy = svc.detect_degradation(1, policy(breach_fraction=1.0, budget_ms={"LOL": 1000.0}))
        with pytest.raises(ValueError):
            svc.notify_smf(healthy)


def test_notify_unreachable_and_non2xx(toy_model):
    svc = AnalyticsService(toy_model, policy(), smf_endpoint=f"http://127.0.0.1:{free_port()}")
    for i in range(4):
        svc.ingest_report(report(t=i, mean=99.0))
    svc.classify_session(1)
    d = svc.detect_degradation(1)
    with pytest.raises(EndpointUnreachable):
        svc.notify_smf(d)
    handle, _ = start_smf_stub(reply_status=500)
    with handle:
        with pytest.raises(Non2xxResponse) as info:
            svc.notify_smf(d, handle.url)
        assert info.value.status_code == 500
    assert svc.counters.failed == 2
    # failed deliveries do not start the cooldown
    assert svc.session(1).last_notified_at is None


def test_process_swallows_delivery_failure(toy_model):
    svc = AnalyticsService(toy_model, policy(), smf_endpoint=f"http://127.0.0.1:{free_port()}")
    for i in range(3):
        svc.ingest_report(report(t=i, mean=99.0))
        assert svc.process(1) is None
    svc.ingest_report(report(t=3, mean=99.0))
    assert svc.process(1).verdict is Verdict.DEGRADED
    assert svc.counters.failed == 1


# ---------------------------------------------------------------- HTTP


def test_http_routes(toy_model):
    stub_handle, stub = start_smf_stub()
    svc = AnalyticsService(toy_model, policy(), smf_endpoint=stub_handle.url)
    with stub_handle, serve(svc) as h:
        assert http("GET", h.url + "/healthz") == (200, {"status": "ok", "model": True, "sessions": 0})
        assert http("GET", h.url + "/v1/sessions/5")[0] == 404
        assert http("POST", h.url + "/v1/classify/5", {})[0] == 404
        assert http("GET", h.url + "/nope")[0] == 404

        status, body = http("POST", h.url + "/v1/reports", {"teid": 5})
        assert status == 400 and body["error"] == "MalformedReport"
        status, _ = http("POST", h.url + "/v1/reports", None)
        assert status == 400

        status, ack = http("POST", h.url + "/v1/reports", report(teid=5, mean=99.0).to_dict())
        assert status == 202 and ack["verdict"] is None and ack["ring_length"] == 1
        assert http("POST", h.url + "/v1/classify/5", {})[0] == 409
        for i in range(1, 4):
            status, ack = http("POST", h.url + "/v1/reports", report(teid=5, t=i, mean=99.0).to_dict())
        assert ack["verdict"] == "Degraded"
        status, body = http("POST", h.url + "/v1/classify/5", {})
        assert (status, body["game"], body["confidence"]) == (200, "LOL", 1.0)
        status, summary = http("GET", h.url + "/v1/sessions/5")
        assert status == 200 and summary["reports"] == 4
        assert summary["last_decision"]["verdict"] == "Degraded"
        assert len(http("GET", h.url + "/v1/sessions")[1]["sessions"]) == 1
        with stub.lock:
            assert len(stub.received) == 1
        assert svc.counters.rejected == 2


def test_http_no_model_is_503():
    svc = AnalyticsService(None, policy(min_windows=1))
    with serve(svc) as h:
        http("POST", h.url + "/v1/reports", report().to_dict())
        status, body = http("POST", h.url + "/v1/classify/1", {})
        assert status == 503 and body["error"] == "NoModelLoaded"


def test_bad_json_body_is_400(toy_model):
    with serve(AnalyticsService(toy_model, policy())) as h:
        req = urllib.request.Request(h.url + "/v1/reports", data=b"{oops", method="POST")
        with pytest.raises(urllib.error.HTTPError) as info:
            urllib.request.urlopen(req, timeout=5)
        assert info.value.code == 400


def test_concurrent_reports(toy_model):
    svc = AnalyticsService(toy_model, policy(), ring_capacity=1000)
    errors = []

    def worker(teid):
        try:
            for i in range(25):
                status, _ = http("POST", h.url + "/v1/reports", report(teid=teid, t=i).to_dict())
                assert status == 202
        except Exception as exc:  # pragma: no cover - surfaced below
            errors.append(exc)

    with serve(svc) as h:
        threads = [threading.Thread(target=worker, args=(t % 4,)) for t in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    assert errors == []
    assert svc.counters.reports == 200
    assert sorted(len(s.ring) for s in svc.sessions()) == [50, 50, 50, 50]


def test_bind_failure():
    from upfwatch.service import BindFailure

    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        s.listen()
        with pytest.raises(BindFailure):
            serve(AnalyticsService(), "127.0.0.1", s.getsockname()[1])


def test_smf_stub_defaults():
    handle, stub = start_smf_stub()
    with handle:
        assert http("POST", handle.url + "/v1/notifications", {"teid": 1}) == (204, None)
        assert http("POST", handle.url + "/elsewhere", {})[0] == 404
    assert stub.received == [{"teid": 1}]


# ---------------------------------------------------------------- loop helpers


def sample(teid, t, ms):
    return LatencySample(teid, ms, 0.0, ms, t)


def test_window_reporter_buckets():
    out = []
    w = WindowReporter(1000.0, out.append)
    for s in [sample(1, 0.1, 10), sample(1, 0.9, 30), sample(2, 0.5, 7), sample(1, 1.2, 5), sample(1, 3.0, 1)]:
        w.add(s)
    assert [(r.teid, r.window_start) for r in out] == [(1, 0.0), (1, 1.0)]
    assert (out[0].mean_ms, out[0].min_ms, out[0].max_ms, out[0].sample_count) == (20.0, 10.0, 30.0, 2)
    w.flush()
    assert [(r.teid, r.window_start, r.sample_count) for r in out[2:]] == [(1, 3.0, 1), (2, 0.0, 1)]
    with pytest.raises(ValueError):
        WindowReporter(0, out.append)


def test_demo_model_separates_latency_classes():
    model = demo_model()
    test = latency_session_dataset(sessions_per_class=60, seed=5)
    acc = (model.predict(test.features) == test.labels).mean()
    assert model.n_features == 16
    assert acc > 0.8
