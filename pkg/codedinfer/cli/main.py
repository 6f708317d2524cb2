"""
codedinfer command line.

Exit codes: 0 ok, 1 unexpected error, 2 coding requested on an unsuitable
split, 3 stage timeouts or a broken campaign pairing, 4 parse/config error,
5 enumeration cap exceeded.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from codedinfer import __version__
from codedinfer.core.allocation import load_allocation, load_catalog, save_allocation
from codedinfer.core.analytics import (
    CoverageScheme,
    compare_coverage,
    histogram,
    load_topology,
    slowdown,
    topology_from_allocation,
)
from codedinfer.core.campaign import CAMPAIGN_THRESHOLD_MS, parse_sweep, run_campaign
from codedinfer.core.coder import decodability, default_groups
from codedinfer.core.config import Settings
from codedinfer.core.errors import (
    CdcError,
    EmptySamples,
    ExplosionGuard,
    IoError,
    OrderStatisticViolation,
    ParseError,
    StageTimeout,
    UnsuitableMethod,
)
from codedinfer.core.export import emit_report, load_run_report
from codedinfer.core.latency import LatencyModel, Purpose, parse_failures, parse_latency, stream
from codedinfer.core.metrics import RunMetrics, write_metrics
from codedinfer.core.model import init_weights, load_model
from codedinfer.core.planning import code_allocation
from codedinfer.core.runtime import CoordinatorConfig, run_inference
from codedinfer.core.transport import COORDINATOR, run_tcp_inference
from codedinfer.core.types import DType, Policy
from codedinfer.core.weights import load_weights, save_weights

logger = logging.getLogger("codedinfer")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_UNSUITABLE = 2
EXIT_TIMEOUT = 3
EXIT_CONFIG = 4
EXIT_EXPLOSION = 5

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


class _Parser(argparse.ArgumentParser):
    """Bad flags are configuration errors (exit 4), not argparse's default 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"Error: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


# --- Shared helpers ---

def _setup_logging(verbose: bool, settings: Settings):
    level = logging.DEBUG if verbose else getattr(logging, settings.log_level, logging.WARNING)
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)


def _seed(args, settings: Settings) -> int:
    return args.seed if args.seed is not None else settings.seed


def _model_for(alloc, model_path: Optional[str]):
    return load_model(Path(model_path) if model_path else alloc.model_path())


def _weights_for(model, path: Optional[str], seed: int, dtype: str):
    if path:
        return load_weights(path)
    return init_weights(model, seed=seed, dtype=DType(dtype))


def _input_for(model, path: Optional[str], seed: int, dtype) -> np.ndarray:
    """Input tensor from a .npy/.json file, or a seeded normal draw of the model's input shape."""
    if path is None:
        rng = stream(seed, COORDINATOR, 0, 0, Purpose.REQUEST_INPUT)
        return rng.standard_normal(model.input_shape).astype(dtype.numpy)
    p = Path(path)
    try:
        if p.suffix == ".npy":
            x = np.load(p)
        else:
            x = np.asarray(json.loads(p.read_text(encoding="utf-8")), dtype=np.float64)
    except (OSError, ValueError) as e:
        raise ParseError(f"cannot read input {p}: {e}")
    return x.astype(dtype.numpy)


def _parse_links(items: List[str]) -> Dict[int, str]:
    links = {}
    for item in items or ():
        device, sep, spec = item.partition("=")
        if not sep or not device.strip().isdigit():
            raise ParseError(f"--link {item!r} must look like DEVICE=SPEC")
        links[int(device)] = spec
    return links


def _latency_model(args, allocs) -> LatencyModel:
    model = LatencyModel(parse_latency(args.latency), ms_per_kib=args.ms_per_kib)
    for alloc in allocs:
        base = alloc.source.parent if alloc.source is not None else None
        model = model.with_overrides(alloc.link_overrides(), base)
    return model.with_overrides(_parse_links(args.link))


def _print_table(header: List[str], rows: List[List[str]]):
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(header)]
    print("  " + "  ".join(h.ljust(w) for h, w in zip(header, widths)))
    for r in rows:
        print("  " + "  ".join(c.ljust(w) for c, w in zip(r, widths)))


# --- Commands ---

def cmd_encode(args, settings: Settings) -> int:
    alloc = load_allocation(args.alloc)
    model = _model_for(alloc, args.model)
    weights = _weights_for(model, args.weights, _seed(args, settings), args.dtype)

    coded, store, costs = code_allocation(alloc, model, weights, code=args.code,
                                          tolerance=args.tolerate, stages=args.stage or None)

    out_dir = Path(args.out)
    alloc_path = out_dir / f"{coded.name}.json"
    weights_path = out_dir / f"{coded.name}.cdcw"
    model_abs = Path(args.model) if args.model else alloc.model_path()
    rel_model = os.path.relpath(model_abs.resolve(), out_dir.resolve())
    save_allocation(replace(coded, model=rel_model), alloc_path)
    print(f"✓ Saved allocation to {alloc_path}")
    save_weights(store, weights_path)
    print(f"✓ Saved weights to {weights_path}")

    if costs:
        print("\nHardware cost per coded stage:")
        for c in costs:
            print(f"  stage {c.stage} (layer {c.layer_id}, {c.method}, n={c.n}, "
                  f"groups={c.groups}): {c.hardware_cost:.2f}")
    else:
        print("\nNo coded stages (pass-through copy)")
    return EXIT_OK


def cmd_run(args, settings: Settings) -> int:
    if args.requests < 1:
        raise ParseError(f"--requests must be >= 1, got {args.requests}")
    seed = _seed(args, settings)
    alloc = load_allocation(args.alloc)
    model = _model_for(alloc, args.model)
    weights = _weights_for(model, args.weights, seed, args.dtype)
    x = _input_for(model, args.input, seed, weights.dtype)

    if args.tcp:
        crash = [int(d) for d in args.crash.split(",") if d.strip()] if args.crash else []
        result = run_tcp_inference(alloc, model, weights, x, crash=crash)
        print("TCP run complete:")
        print(f"  Relative error vs reference: {result.rel_error:.3g}")
        print(f"  Decoded devices: {result.decoded or 'none'}")
        print(f"  Unreachable devices: {result.unreachable or 'none'}")
        return EXIT_OK

    catalog = load_catalog([args.alloc] + list(args.catalog or [])) if args.catalog else []
    latency = _latency_model(args, [alloc] + catalog)
    failures = parse_failures(args.failures or "", seed)
    cfg = CoordinatorConfig(
        policy=Policy(args.policy),
        threshold_ms=args.threshold,
        seed=seed,
        ns_per_flop=args.ns_per_flop if args.ns_per_flop is not None else settings.ns_per_flop,
        detection_ms=args.detection_ms if args.detection_ms is not None else settings.detection_ms,
    )
    metrics = RunMetrics()
    report = run_inference(alloc, weights, x, latency, failures, cfg, args.requests,
                           model=model, catalog=catalog, metrics=metrics)

    out_dir = Path(args.out)
    emit_report(report, "json", out_dir / "report.json")
    print(f"✓ Saved report to {out_dir / 'report.json'}")
    emit_report(report, "csv", out_dir / "latency.csv")
    print(f"✓ Saved latencies to {out_dir / 'latency.csv'}")
    if args.metrics:
        write_metrics(metrics, args.metrics)
        print(f"✓ Saved metrics to {args.metrics}")

    summary = report.aggregate()
    print("\nRun complete:")
    print(f"  Requests: {summary['count']} ({summary['timeouts']} timeouts)")
    if summary["completed"]:
        print(f"  Mean latency: {summary['mean_ms']:.2f} ms, p99: {summary['p99_ms']:.2f} ms")
    print(f"  Decode events: {summary['decode_events']}")
    if report.fallbacks:
        event = report.fallbacks[0]
        print(f"  Fallback: {event.from_allocation} -> {event.to_allocation} at {event.at_ms:.1f} ms")
        before, after = report.split_at_fallback()
        try:
            print(f"  Slowdown after recovery: {slowdown(before, after):.2f}x")
        except EmptySamples:
            print("  Slowdown after recovery: n/a")

    mismatched = [r.request_id for r in report.requests if r.output_ok is False]
    if mismatched:
        print(f"Error: outputs of requests {mismatched} deviate from the reference")
        return EXIT_ERROR
    return EXIT_TIMEOUT if report.timeouts else EXIT_OK


def cmd_campaign(args, settings: Settings) -> int:
    counts = parse_sweep(args.sweep)
    thresholds = [float(t) for t in args.thresholds.split(",") if t.strip()] if args.thresholds else []
    if any(t <= 0 for t in thresholds):
        raise ParseError("--thresholds must all be > 0")
    if not args.policy_compare and not thresholds:
        raise ParseError("--no-policy-compare needs --thresholds")
    if args.requests < 1:
        raise ParseError(f"--requests must be >= 1, got {args.requests}")
    seed = _seed(args, settings)
    template = load_allocation(args.alloc)
    model = _model_for(template, args.model)
    weights = _weights_for(model, args.weights, seed, args.dtype)
    x = _input_for(model, args.input, seed, weights.dtype)
    latency = _latency_model(args, [template])

    result = run_campaign(
        template, model, weights, x, latency, counts,
        seed=seed,
        requests=args.requests,
        thresholds=thresholds,
        threshold_ms=args.threshold,
        stage=args.stage,
        ns_per_flop=args.ns_per_flop if args.ns_per_flop is not None else settings.ns_per_flop,
        compare=args.policy_compare,
    )

    out = Path(args.out)
    if result.rows:
        emit_report(result.rows, "csv", out)
        print(f"✓ Saved comparison to {out}")
    if result.thresholds:
        threshold_path = out.with_name(out.stem + "_thresholds" + out.suffix)
        emit_report(result.thresholds, "csv", threshold_path)
        print(f"✓ Saved threshold sweep to {threshold_path}")

    if not result.rows:
        return EXIT_OK
    print("\nDecodeAsap (n+1) vs WaitAll (n):")
    _print_table(["n", "wait_all_ms", "decode_asap_ms", "improvement"], [
        [str(r.n), f"{r.wait_all_mean_ms:.2f}", f"{r.decode_asap_mean_ms:.2f}", f"{r.improvement_pct:.1f}%"]
        for r in result.rows
    ])
    if any(r.improvement_pct < 0 for r in result.rows):
        print("Error: decode-asap slower than wait-all for some n")
        return EXIT_TIMEOUT
    return EXIT_OK


def cmd_coverage(args, settings: Settings) -> int:
    if args.budget < 0:
        raise ParseError(f"--budget must be >= 0, got {args.budget}")
    if args.alloc:
        topo = topology_from_allocation(load_allocation(args.alloc))
    elif args.topology:
        topo = load_topology(args.topology)
    else:
        raise ParseError("give a topology file or --alloc")

    reports = compare_coverage(topo, args.budget)
    print(f"Coverage of {topo.name} ({topo.total_devices} devices, budget {args.budget}):")
    _print_table(["scheme", "covered", "fraction", "hardware_cost"], [
        [s.value, f"{r.covered}/{r.total}", f"{100 * r.fraction:.1f}%", f"{r.hardware_cost:.2f}"]
        for s, r in reports.items()
    ])
    cdc = reports[CoverageScheme.CDC_PLUS_TWO_MR]
    mr = reports[CoverageScheme.TWO_MR]
    print(f"\nCDC+2MR {100 * cdc.fraction:.1f}% vs 2MR {100 * mr.fraction:.1f}%")
    if args.out:
        emit_report(list(reports.values()), "json", args.out)
        print(f"✓ Saved coverage to {args.out}")
    return EXIT_OK


def _parse_groups(text: str) -> List[List[int]]:
    try:
        groups = [[int(d) for d in g.split(",") if d.strip()] for g in text.split(";") if g.strip()]
    except ValueError:
        raise ParseError(f"--groups {text!r} must look like 0,1;1,2")
    if not groups or any(not g for g in groups):
        raise ParseError(f"--groups {text!r} has an empty group")
    return groups


def cmd_decodability(args, settings: Settings) -> int:
    if args.n < 1:
        raise ParseError(f"--n must be >= 1, got {args.n}")
    groups = _parse_groups(args.groups) if args.groups else default_groups(args.n, args.default)
    cap = args.cap if args.cap is not None else settings.pattern_cap
    report = decodability(args.n, groups, args.max_failures, cap=cap)

    print(f"Decodability of n={report.n} with groups {[list(g) for g in report.groups]}:")
    _print_table(["failures", "patterns", "recoverable", "fraction"], [
        [str(r.failures), str(r.total), str(r.recoverable), f"{100 * r.fraction:.1f}%"]
        for r in report.rows
    ])
    if args.out:
        emit_report(report, "json", args.out)
        print(f"✓ Saved decodability to {args.out}")
    return EXIT_OK


def cmd_report(args, settings: Settings) -> int:
    report = load_run_report(args.report)
    hist = histogram(report.latencies, args.bin_width)
    if args.format == "csv":
        emit_report(hist, "csv", args.out)
    else:
        document = {"aggregate": report.aggregate(), "histogram": hist.to_dict()}
        if report.fallbacks:
            before, after = report.split_at_fallback()
            try:
                document["slowdown"] = slowdown(before, after)
            except EmptySamples:
                document["slowdown"] = None
        emit_report(document, "json", args.out)
    print(f"✓ Saved {args.format} report to {args.out}")
    print(f"  Samples: {hist.total}, mean {hist.mean:.2f} ms, p50 {hist.p50:.2f}, "
          f"p90 {hist.p90:.2f}, p99 {hist.p99:.2f}")
    return EXIT_OK


COMMANDS = {
    "encode": cmd_encode,
    "run": cmd_run,
    "campaign": cmd_campaign,
    "coverage": cmd_coverage,
    "decodability": cmd_decodability,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="codedinfer",
        description="codedinfer - coded distributed DNN inference",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def model_args(p):
        p.add_argument("alloc", help="Allocation file (JSON)")
        p.add_argument("--model", help="Model descriptor (default: the allocation's model)")
        p.add_argument("--weights", help="Weight store (default: seeded random weights)")
        p.add_argument("--dtype", choices=[d.value for d in DType], default="f32",
                       help="Element width of generated weights")
        p.add_argument("--seed", type=int, help="Random seed (default: CDC_SEED or 0)")

    def latency_args(p):
        p.add_argument("--input", help="Input tensor (.npy or JSON); seeded random otherwise")
        p.add_argument("--latency", default="det:10",
                       help="Link latency: det:10, uniform:5..50, lognorm:mu,sigma, emp:file")
        p.add_argument("--link", action="append", metavar="DEV=SPEC", help="Per-device latency override")
        p.add_argument("--ms-per-kib", type=float, default=0.0, help="Payload term (ms per KiB)")
        p.add_argument("--ns-per-flop", type=float, help="Simulated compute speed")

    p = sub.add_parser("encode", help="Add coded devices and write coded weights")
    model_args(p)
    p.add_argument("--code", action="store_true", help="Code every split stage")
    p.add_argument("--tolerate", type=int, choices=[1, 2], default=1, help="Failures per stage to tolerate")
    p.add_argument("--stage", type=int, action="append", help="Only code this stage index")
    p.add_argument("--out", "-o", default="out", help="Output directory")

    p = sub.add_parser("run", help="Simulate inference requests")
    model_args(p)
    latency_args(p)
    p.add_argument("--requests", "-n", type=int, default=1, help="Number of requests")
    p.add_argument("--failures", help="Failure schedule: DEV:perm@T, DEV:down@T0-T1, DEV:drop@P")
    p.add_argument("--policy", choices=[pol.value for pol in Policy], default=Policy.DECODE_ASAP.value)
    p.add_argument("--threshold", type=float, default=500.0, help="Waiting threshold (ms)")
    p.add_argument("--catalog", nargs="+", help="Fallback allocations")
    p.add_argument("--detection-ms", type=float, help="Failure detection delay before fallback")
    p.add_argument("--metrics", help="Write Prometheus metrics to this file")
    p.add_argument("--tcp", action="store_true", help="Run one request over loopback TCP instead")
    p.add_argument("--crash", help="With --tcp: comma-separated devices that crash")
    p.add_argument("--out", "-o", default="out", help="Output directory")

    p = sub.add_parser("campaign", help="Paired DecodeAsap vs WaitAll sweep")
    model_args(p)
    latency_args(p)
    p.add_argument("--sweep", default="devices=2..4", help="Device counts, e.g. devices=2..8")
    p.add_argument("--policy-compare", action=argparse.BooleanOptionalAction, default=True,
                   help="Compare DecodeAsap (n+1) against WaitAll (n); --no-policy-compare runs only --thresholds")
    p.add_argument("--thresholds", help="Also run ThresholdThenDecode at these thresholds (ms)")
    p.add_argument("--threshold", type=float, default=CAMPAIGN_THRESHOLD_MS,
                   help="Stage deadline for the paired runs (ms)")
    p.add_argument("--requests", "-n", type=int, default=200, help="Requests per run")
    p.add_argument("--stage", type=int, help="Stage to sweep (default: first split stage)")
    p.add_argument("--out", "-o", default="campaign.csv", help="Comparison CSV")

    p = sub.add_parser("coverage", help="Single-failure coverage, CDC+2MR vs 2MR")
    p.add_argument("topology", nargs="?", help="Topology file (JSON)")
    p.add_argument("--alloc", help="Derive the topology from an allocation")
    p.add_argument("--budget", "-b", type=int, required=True, help="Extra devices")
    p.add_argument("--out", "-o", help="Write the reports as JSON")

    p = sub.add_parser("decodability", help="Enumerate multi-failure patterns")
    p.add_argument("--n", type=int, required=True, help="Base devices")
    p.add_argument("--groups", help="Coded groups, e.g. 0,1,2;1,2,3")
    p.add_argument("--default", type=int, choices=[1, 2], default=1,
                   help="Tolerance for the default groups when --groups is omitted")
    p.add_argument("--max-failures", type=int, required=True)
    p.add_argument("--cap", type=int, help="Pattern cap (default: CDC_PATTERN_CAP)")
    p.add_argument("--out", "-o", help="Write the report as JSON")

    p = sub.add_parser("report", help="Histogram of a saved run report")
    p.add_argument("report", help="report.json from 'run'")
    p.add_argument("--bin-width", type=float, default=10.0, help="Histogram bin width (ms)")
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    p.add_argument("--out", "-o", required=True, help="Output file")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        settings = Settings.from_env()
    except ValueError as e:
        print(f"Error: {e}")
        sys.exit(EXIT_CONFIG)
    _setup_logging(args.verbose, settings)

    try:
        code = COMMANDS[args.command](args, settings)
    except UnsuitableMethod as e:
        print(f"Error: {e}")
        print(f"  {e.row}")
        sys.exit(EXIT_UNSUITABLE)
    except ExplosionGuard as e:
        print(f"Error: {e}")
        sys.exit(EXIT_EXPLOSION)
    except (StageTimeout, OrderStatisticViolation) as e:
        print(f"Error: {e}")
        sys.exit(EXIT_TIMEOUT)
    except IoError as e:
        print(f"Error: {e}")
        sys.exit(EXIT_ERROR)
    except (CdcError, ValueError) as e:
        print(f"Error: {e}")
        sys.exit(EXIT_CONFIG)
    except Exception as e:
        logger.exception("Unexpected failure")
        print(f"Error: {e}")
        sys.exit(EXIT_ERROR)
    if code != EXIT_OK:
        sys.exit(code)
    return EXIT_OK


if __name__ == "__main__":
    main()
