"""``upfwatch`` command line: sim, estimate, train, evaluate, serve, loop.

Every subcommand that takes ``--out`` writes a ``manifest.json`` next to its
outputs (resolved config, seeds, inputs, SHA-256 of every output).
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import logging
import signal
import sys
import threading
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from upfwatch import __version__, backend_name
from upfwatch.config import ConfigError, load_config
from upfwatch.metrics import MetricsError, error_histogram, precision_recall_curve, regression_report, roc_curve
from upfwatch.ml.data import DatasetError, load_dataset, synth_dataset
from upfwatch.ml.evaluate import EvalProtocol, evaluate
from upfwatch.ml.models import ALIASES, KINDS, ModelError, ModelSpec, load_model, save_model
from upfwatch.service import ServiceError, serve, service_from_config
from upfwatch.sim import (
    SimConfig,
    SinusoidalProfile,
    estimate_trace,
    generate_trace,
    pair_with_truth,
    read_ground_truth,
    read_trace,
    write_ground_truth,
    write_trace,
)
from upfwatch.tracker import TrackerConfig, window_aggregate

log = logging.getLogger("upfwatch")

FORMAT_VERSION = 1
KIND_CHOICES = sorted(set(KINDS) | set(ALIASES))


class OutputError(RuntimeError):
    pass


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


class Run:
    """Collects what a subcommand did and writes the manifest."""

    def __init__(self, subcommand: str, out: Optional[Path]):
        self.subcommand = subcommand
        self.out = out
        self.started = time.monotonic()
        self.config: dict = {}
        self.seeds: dict = {}
        self.inputs: list[str] = []
        self.outputs: list[Path] = []
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        p = self.out / name
        self.outputs.append(p)
        return p

    def finish(self, **extra) -> None:
        if self.out is None:
            return
        checksums = {}
        for p in self.outputs:
            if not p.is_file() or p.stat().st_size == 0:
                raise OutputError(f"output {p} missing or empty")
            checksums[p.name] = _sha256(p)
        _write_json(
            self.out / "manifest.json",
            {
                "format_version": FORMAT_VERSION,
                "tool_version": __version__,
                "subcommand": self.subcommand,
                "config": self.config,
                "seeds": self.seeds,
                "inputs": self.inputs,
                "outputs": checksums,
                "backend": backend_name(),
                "duration_s": round(time.monotonic() - self.started, 3),
                "created_at": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
                **extra,
            },
        )


def _config(args) -> dict:
    return load_config(getattr(args, "config", None))


def _parse_params(items: Sequence[str]) -> dict:
    params = {}
    for item in items or ():
        key, sep, raw = item.partition("=")
        if not sep:
            raise ValueError(f"--param expects key=value, got {item!r}")
        try:
            params[key] = json.loads(raw)
        except json.JSONDecodeError:
            params[key] = raw
    return params


# ------------------------------------------------------------------ sim


def _sim_config(cfg: dict, args) -> tuple[SimConfig, SinusoidalProfile]:
    sim = dict(cfg["sim"])
    for attr, key in (("duration", "duration_s"), ("rate", "request_rate_hz"), ("jitter", "jitter_ms"),
                      ("loss", "loss_prob"), ("seed", "seed")):
        val = getattr(args, attr, None)
        if val is not None:
            sim[key] = val
    return SimConfig(**sim), SinusoidalProfile(**cfg["profile"])


def cmd_sim(args) -> int:
    cfg = _config(args)
    sim_cfg, profile = _sim_config(cfg, args)
    run = Run("sim", Path(args.out))
    run.config = {"sim": {**cfg["sim"], **sim_cfg.__dict__, "teids": list(sim_cfg.teids)}, "profile": cfg["profile"]}
    run.seeds = {"sim": sim_cfg.seed}
    if args.config:
        run.inputs.append(str(args.config))
    records, truth = generate_trace(sim_cfg, profile)
    write_trace(run.path("trace.jsonl"), records)
    write_ground_truth(run.path("ground_truth.csv"), truth)
    run.finish(counts={"records": len(records), "requests": len(truth), "lost": sum(r.lost for r in truth.records)})
    log.info("wrote %d trace records for %d requests to %s", len(records), len(truth), args.out)
    return 0


# ------------------------------------------------------------- estimate


def _svg_series(path: Path, t: np.ndarray, series: dict, width: int = 900, height: int = 300) -> None:
    """Plain SVG line chart; no plotting dependency."""
    colours = ("#1f77b4", "#d62728", "#2ca02c")
    lo = min(float(v.min()) for v in series.values())
    hi = max(float(v.max()) for v in series.values())
    span_y = (hi - lo) or 1.0
    span_x = float(t.max() - t.min()) or 1.0
    pad = 40
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect x="{pad}" y="10" width="{width - pad - 10}" height="{height - pad - 10}" fill="none" stroke="#888"/>',
    ]
    for i, (name, v) in enumerate(series.items()):
        xs = pad + (t - t.min()) / span_x * (width - pad - 10)
        ys = height - pad - (v - lo) / span_y * (height - pad - 10)
        pts = " ".join(f"{x:.1f},{y:.1f}" for x, y in zip(xs, ys))
        c = colours[i % len(colours)]
        parts.append(f'<polyline fill="none" stroke="{c}" stroke-width="1" points="{pts}"/>')
        parts.append(f'<text x="{pad + 10 + 160 * i}" y="{height - 12}" fill="{c}" font-size="12">{name}</text>')
    parts.append(f'<text x="2" y="20" font-size="10">{hi:.0f} ms</text>')
    parts.append(f'<text x="2" y="{height - pad}" font-size="10">{lo:.0f} ms</text>')
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n")


def cmd_estimate(args) -> int:
    trace_path = Path(args.trace)
    truth_path = Path(args.truth) if args.truth else trace_path.with_name("ground_truth.csv")
    cfg = _config(args)
    tcfg = cfg["tracker"]
    window_ms = args.window_ms if args.window_ms is not None else float(tcfg["window_ms"])
    records = read_trace(trace_path)
    truth = read_ground_truth(truth_path)

    run = Run("estimate", Path(args.out))
    run.inputs = [str(trace_path), str(truth_path)]
    run.config = {"tracker": {**tcfg, "window_ms": window_ms}}
    result = estimate_trace(records, TrackerConfig(float(tcfg["match_timeout_ms"]), int(tcfg["max_pending_per_teid"])))
    if not result.samples:
        raise OutputError("trace produced no matched samples")
    st = result.tracker.stats
    conserved = st.matched + st.expired + st.orphans + result.tracker.pending_count == st.observations

    with open(run.path("samples.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["corr", "teid", "completed_at", "request_leg_ms", "response_leg_ms", "total_ms"])
        for s in result.samples:
            w.writerow([s.correlation_id, s.teid, repr(s.completed_at), repr(s.request_leg_ms),
                        repr(s.response_leg_ms), repr(s.total_ms)])

    send_ts, t_ms, e_ms = pair_with_truth(result.samples, truth)
    with open(run.path("series.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["send_ts", "truth_ms", "estimate_ms"])
        w.writerows(zip(map(repr, send_ts.tolist()), map(repr, t_ms.tolist()), map(repr, e_ms.tolist())))

    counts, edges = error_histogram(e_ms - t_ms, bins=args.bins)
    with open(run.path("error_hist.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo_ms", "bin_hi_ms", "count"])
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])

    with open(run.path("windows.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["teid", "window_start", "mean_ms", "min_ms", "max_ms", "count"])
        for teid in sorted({s.teid for s in result.samples}):
            for ws in window_aggregate([s for s in result.samples if s.teid == teid], window_ms):
                w.writerow([teid, repr(ws.window_start), repr(ws.mean_ms), repr(ws.min_ms), repr(ws.max_ms), ws.count])

    report = regression_report(t_ms, e_ms)
    _write_json(
        run.path("regression_report.json"),
        {
            "format_version": FORMAT_VERSION,
            "regression": report.to_dict(),
            "tracker": {**st.__dict__, "pending": result.tracker.pending_count, "conserved": conserved},
            "replay": result.replay.__dict__,
            "error_hist_mode_bin": int(np.argmax(counts)),
            "error_hist_zero_bin": int(counts.size // 2),
        },
    )
    if args.svg:
        _svg_series(run.path("series.svg"), send_ts, {"truth ms": t_ms, "estimate ms": e_ms})
    if not conserved:
        raise OutputError("tracker conservation check failed")
    run.finish()
    log.info("r2_norm=%.6f mape_orig=%.4f over %d samples", report.r2_norm, report.mape_orig, report.n)
    return 0


# ---------------------------------------------------------- train/eval


def _dataset(args):
    if args.data:
        return load_dataset(args.data, label_column=args.label_column)
    return synth_dataset(n=args.n, d=args.d, separation=args.separation, seed=args.data_seed)


def _dataset_inputs(args) -> tuple[list[str], dict]:
    if args.data:
        return [str(args.data)], {"data": str(args.data), "label_column": args.label_column}
    return [], {"synth": {"n": args.n, "d": args.d, "separation": args.separation, "seed": args.data_seed}}


def cmd_train(args) -> int:
    data = _dataset(args)
    spec = ModelSpec(args.kind, _parse_params(args.param), seed=args.seed)
    protocol = EvalProtocol(runs=args.runs, test_fraction=args.test_fraction, base_seed=args.split_seed)
    run = Run("train", Path(args.out))
    run.inputs, dataset_cfg = _dataset_inputs(args)
    run.config = {"dataset": dataset_cfg, "model": {"kind": spec.kind, "params": dict(spec.params)},
                  "protocol": protocol.__dict__}
    run.seeds = {"model": spec.seed, "split_base": protocol.base_seed}

    result = evaluate(spec, data, protocol)
    save_model(result.last_model, run.path("model.json"))
    with open(run.path("accuracy_runs.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "split_seed", "accuracy"])
        for i, o in enumerate(result.runs):
            w.writerow([i, o.seed, repr(o.report.accuracy)])

    first = result.runs[0]
    y_test = data.labels[first.test_rows]
    aucs = {}
    for k, name in enumerate(data.class_names):
        if not (y_test == k).any():
            continue
        roc = roc_curve(y_test, first.proba, k)
        pr = precision_recall_curve(y_test, first.proba, k)
        roc.write_csv(run.path(f"roc_{name}.csv"))
        pr.write_csv(run.path(f"pr_{name}.csv"))
        aucs[name] = {"roc_auc": roc.auc, "pr_auc": pr.auc}
    _write_json(
        run.path("report.json"),
        {
            "format_version": FORMAT_VERSION,
            "kind": spec.kind,
            "classes": data.class_names,
            "mean": result.mean.to_dict(),
            "runs": [o.report.to_dict() for o in result.runs],
            "accuracy_spread": result.spread,
            "curves_run0": aucs,
        },
    )
    run.finish()
    log.info("%s: mean accuracy %.4f over %d runs", spec.kind, result.mean.accuracy, protocol.runs)
    return 0


def cmd_evaluate(args) -> int:
    data = _dataset(args)
    kinds = [ModelSpec(k).kind for k in (args.kinds or KINDS)]
    protocol = EvalProtocol(runs=args.runs, test_fraction=args.test_fraction, base_seed=args.split_seed)
    run = Run("evaluate", Path(args.out))
    run.inputs, dataset_cfg = _dataset_inputs(args)
    run.config = {"dataset": dataset_cfg, "kinds": kinds, "protocol": protocol.__dict__}
    run.seeds = {"model": args.seed, "split_base": protocol.base_seed}

    results = {k: evaluate(ModelSpec(k, seed=args.seed), data, protocol) for k in kinds}
    with open(run.path("table.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "accuracy", "precision", "recall", "f1", "accuracy_spread"])
        for k, r in results.items():
            m = r.mean
            w.writerow([k, f"{m.accuracy:.4f}", f"{m.precision:.4f}", f"{m.recall:.4f}", f"{m.f1:.4f}",
                        f"{r.spread:.4f}"])
    with open(run.path("accuracy_runs.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "run", "accuracy"])
        for k, r in results.items():
            for i, acc in enumerate(r.accuracies):
                w.writerow([k, i, repr(acc)])
    _write_json(
        run.path("report.json"),
        {
            "format_version": FORMAT_VERSION,
            "models": {k: {"mean": r.mean.to_dict(), "accuracies": r.accuracies, "spread": r.spread}
                       for k, r in results.items()},
        },
    )
    run.finish()
    for k, r in results.items():
        print(f"{k:16s} accuracy={r.mean.accuracy:.4f} f1={r.mean.f1:.4f} spread={r.spread:.4f}")
    return 0


# ------------------------------------------------------------ serve/loop


def cmd_serve(args) -> int:
    cfg = _config(args)
    path = cfg["service"]["model_path"]
    model = load_model(path) if path else None
    if model is None:
        log.warning("no model_path configured; classification requests will answer 503")
    service = service_from_config(cfg, model)
    handle = serve(service, cfg["service"]["listen_host"], int(cfg["service"]["listen_port"]))
    log.info("analytics service listening on %s", handle.url)
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    try:
        stop.wait()
    finally:
        handle.stop()
    if args.out:
        run = Run("serve", Path(args.out))
        run.config = cfg
        _write_json(run.path("counters.json"), {"format_version": FORMAT_VERSION, **service.counters.__dict__})
        run.finish()
    return 0


def cmd_loop(args) -> int:
    from upfwatch.loop import run_loop

    cfg = _config(args)
    if args.port is not None:
        cfg["service"]["listen_port"] = args.port
    results = run_loop(cfg)
    ok = all(r.passed for r in results)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: expect={r.expect} notifications={r.notifications} "
              f"reports={r.reports}")
    if args.out:
        run = Run("loop", Path(args.out))
        run.config = cfg
        run.seeds = {"sim": cfg["sim"]["seed"]}
        if args.config:
            run.inputs.append(str(args.config))
        _write_json(run.path("loop_result.json"),
                    {"format_version": FORMAT_VERSION, "passed": ok, "scenarios": [r.to_dict() for r in results]})
        run.finish()
    return 0 if ok else 1


# ----------------------------------------------------------------- main


def _add_dataset_args(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group()
    src.add_argument("--data", help="CSV dataset with a label column")
    src.add_argument("--synth", action="store_true", help="use the synthetic Gaussian dataset (default)")
    p.add_argument("--label-column", default="game")
    p.add_argument("--n", type=int, default=10_000, help="synthetic rows")
    p.add_argument("--d", type=int, default=16, help="synthetic features")
    p.add_argument("--separation", type=float, default=4.0)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--split-seed", type=int, default=0, help="seed of the first split")
    p.add_argument("--seed", type=int, default=0, help="model seed of the first run")
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="upfwatch", description="UPF latency estimation and game-aware analytics.")
    parser.add_argument("--version", action="version", version=f"upfwatch {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sim", help="generate a trace and its ground truth")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--duration", type=float, help="seconds (overrides config)")
    p.add_argument("--rate", type=float, help="requests per second")
    p.add_argument("--jitter", type=float, help="ms standard deviation")
    p.add_argument("--loss", type=float, help="response loss probability")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_sim)

    p = sub.add_parser("estimate", help="estimate latency from a trace and score it against ground truth")
    p.add_argument("trace")
    p.add_argument("--truth", help="ground-truth CSV (default: ground_truth.csv beside the trace)")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--window-ms", type=float)
    p.add_argument("--bins", type=int, default=41)
    p.add_argument("--svg", action="store_true", help="also write series.svg")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("train", help="evaluate one model over repeated splits and save it")
    p.add_argument("--kind", required=True, choices=KIND_CHOICES)
    p.add_argument("--param", action="append", metavar="KEY=VALUE", help="hyperparameter, repeatable")
    _add_dataset_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="compare model kinds under one protocol")
    p.add_argument("--kinds", nargs="+", choices=KIND_CHOICES)
    _add_dataset_args(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("serve", help="run the analytics service until SIGINT/SIGTERM")
    p.add_argument("--config")
    p.add_argument("--out", help="write counters and a manifest here on shutdown")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("loop", help="closed-loop demo against a spawned service and SMF stub")
    p.add_argument("--config")
    p.add_argument("--port", type=int, help="service port (0 picks a free one)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_loop)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError, ConfigError, DatasetError, ModelError, MetricsError, ServiceError,
            OutputError) as exc:
        print(f"upfwatch {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
