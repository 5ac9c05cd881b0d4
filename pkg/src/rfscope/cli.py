"""``rfscope`` command line: analyze, gen, table, damp, erf, gradcheck.

Exit codes: 0 success, 1 gradient check above tolerance, 2 usage or
validation error, 3 degenerate data (all-zero gradient map).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .damping import damping_matrix
from .engine import EngineError, grad_check, init_weights, probe_center
from .erf import DegenerateMapError, erf_stats, export_heatmap, gradient_map, noise_inputs
from .families import FAMILIES, FamilyConfig, generate, rho_table
from .graph import ArchError, load_arch, serialize_arch, topo_order, with_damping
from .io import ContainerError, load_input, load_tensors
from .rf import count_params, max_rf, rf_window

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE, EXIT_DEGENERATE = 0, 1, 2, 3
DEFAULT_M = 0.9


class UsageError(Exception):
    pass


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def _pair(text: str) -> tuple[int, int]:
    try:
        f, t = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'f,t' integers, got {text!r}") from None
    return f, t


def _float_pair(text: str) -> tuple[float, float]:
    try:
        a, b = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected two comma-separated numbers, got {text!r}") from None
    return a, b


def _digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def resolve_seed(seed) -> int:
    if seed is not None:
        return seed
    env = os.environ.get("RFSCOPE_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"RFSCOPE_SEED must be an integer, got {env!r}") from None


def build_manifest(args, seed=None, files=()) -> dict:
    flags = {
        k: (list(v) if isinstance(v, tuple) else v)
        for k, v in sorted(vars(args).items())
        if k not in ("func", "manifest")
    }
    return {
        "subcommand": args.command,
        "flags": json.loads(json.dumps(flags, default=str)),
        "seed": seed,
        "version": __version__,
        "inputs": {str(p): _digest(p) for p in files},
    }


def emit_manifest(args, manifest: dict, default_path=None) -> None:
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    path = args.manifest or default_path
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stderr.write("manifest: " + json.dumps(manifest, sort_keys=True) + "\n")


def _damping_for(mode: str, m: float):
    return {"none": None, "freq": (0.0, m), "time": (m, 0.0), "both": (m, m)}[mode]


# --- subcommands -----------------------------------------------------------

def cmd_analyze(args) -> int:
    graph = load_arch(args.arch)
    report = max_rf(graph)
    probe = report[graph.probe_id]
    params = count_params(graph)
    window = None
    if args.window is not None:
        node = args.node or graph.probe_id
        window = rf_window(graph, node, args.window, report)
    if args.json:
        out = {
            "nodes": report.to_dict(),
            "probe": {"id": graph.probe_id, "max_rf": list(probe.rf), "cum_stride": list(probe.cum_stride)},
            "params": params,
        }
        if window is not None:
            out["window"] = window.to_dict()
        print(json.dumps(out, indent=2, sort_keys=True))
    else:
        width = max(len(n) for n in graph.nodes)
        print(f"{'node':<{width}}  {'kind':<12} {'rf (f x t)':>12} {'stride':>9} {'offset':>11}")
        for nid in topo_order(graph):
            e = report[nid]
            print(
                f"{nid:<{width}}  {graph.nodes[nid].kind:<12} "
                f"{f'{e.rf.freq} x {e.rf.time}':>12} "
                f"{f'{e.cum_stride.freq} x {e.cum_stride.time}':>9} "
                f"{f'{e.window_offset[0]},{e.window_offset[1]}':>11}"
            )
        print(f"probe max RF: {probe.rf.freq} x {probe.rf.time}")
        print(f"probe cumulative stride: {probe.cum_stride.freq} x {probe.cum_stride.time}")
        print(f"parameters: {params}")
        if window is not None:
            print(
                f"window: freq [{window.freq.lo}, {window.freq.hi}] time [{window.time.lo}, {window.time.hi}]"
                f" clipped freq [{window.clipped_freq.lo}, {window.clipped_freq.hi}]"
                f" time [{window.clipped_time.lo}, {window.clipped_time.hi}]"
            )
    emit_manifest(args, build_manifest(args, files=[args.arch]))
    return EXIT_OK


def config_from_args(args) -> FamilyConfig:
    if args.rho is not None and (args.rho_f is not None or args.rho_t is not None):
        raise UsageError("use either --rho or --rho-f/--rho-t")
    damping = args.damping
    if args.damp is not None:
        if damping is not None:
            raise UsageError("use either --damp or --damping")
        damping = _damping_for(args.damp, args.m)
    try:
        return FamilyConfig(
            family=args.family, rho=args.rho, rho_f=args.rho_f, rho_t=args.rho_t,
            growth_rate=args.growth_rate, groups=args.groups, damping=damping,
            damping_mode=args.damping_mode, extra_pools=args.extra_pools,
            n_frames=args.frames, n_bins=args.bins, base_channels=args.base_channels,
            shake_shake=args.shake_shake, freq_aware=args.freq_aware,
        )
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def cmd_gen(args) -> int:
    cfg = config_from_args(args)
    text = serialize_arch(generate(cfg))
    if args.out:
        Path(args.out).write_bytes(text.encode("utf-8"))
        emit_manifest(args, build_manifest(args), default_path=f"{args.out}.manifest.json")
    else:
        sys.stdout.write(text)
        emit_manifest(args, build_manifest(args))
    return EXIT_OK


def cmd_table(args) -> int:
    rows = rho_table(args.family)
    csv_text = "rho,max_rf_freq,max_rf_time\n" + "".join(f"{r},{rf.freq},{rf.time}\n" for r, rf in rows)
    if args.format == "csv":
        sys.stdout.write(csv_text)
    else:
        print(f"{args.family}: rho -> max RF")
        for r, rf in rows:
            print(f"{r:>3}  {rf.freq:>4} x {rf.time:<4}")
    if args.csv:
        Path(args.csv).write_text(csv_text, encoding="utf-8")
    emit_manifest(args, build_manifest(args))
    return EXIT_OK


def cmd_damp(args) -> int:
    try:
        C = damping_matrix(args.T, args.F, args.m_t, args.m_f, args.mode)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    csv_text = "".join(",".join(_fmt(v) for v in row) + "\n" for row in C.grid)
    if args.out:
        Path(f"{args.out}.csv").write_text(csv_text, encoding="utf-8")
        Path(f"{args.out}.json").write_text(json.dumps(C.to_json_dict(), indent=2, sort_keys=True) + "\n",
                                            encoding="utf-8")
    else:
        sys.stdout.write(csv_text)
    emit_manifest(args, build_manifest(args))
    return EXIT_OK


def _load_weights(graph, args, seed):
    if getattr(args, "weights", None):
        return load_tensors(args.weights)
    weights = init_weights(graph, seed)
    if getattr(args, "zero_weights", False):
        weights = {k: np.zeros_like(v) for k, v in weights.items()}
    return weights


def cmd_erf(args) -> int:
    seed = resolve_seed(args.seed)
    graph = load_arch(args.arch)
    if args.damp is not None:
        graph = with_damping(graph, _damping_for(args.damp, args.m), args.damping_mode)
    weights = _load_weights(graph, args, seed)
    if args.input_file:
        inputs = [load_input(p, graph.input_shape) for p in args.input_file]
    else:
        if args.n_inputs < 1:
            raise UsageError("--n-inputs must be >= 1")
        inputs = noise_inputs(graph.input_shape, args.n_inputs, seed)
    probe = args.probe if args.probe is not None else probe_center(graph)
    gmap = gradient_map(graph, weights, inputs, probe, args.identity_nonlinearity, args.workers)
    try:
        stats = erf_stats(gmap)
    except DegenerateMapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    window = rf_window(graph, graph.probe_id, gmap.probe_coord)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    formats = ("pgm", "csv") if args.format == "both" else (args.format,)
    for fmt in formats:
        export_heatmap(gmap, window, out / f"heatmap.{fmt}", fmt, seed=seed)
    print(f"mu (f, t): {_fmt(stats.mu_f)}, {_fmt(stats.mu_t)}")
    print(f"sigma (f, t): {_fmt(stats.sigma_f)}, {_fmt(stats.sigma_t)}")
    print(f"E (f, t): {_fmt(stats.E_f)}, {_fmt(stats.E_t)}")
    files = [args.arch, *(args.input_file or []), *([args.weights] if args.weights else [])]
    emit_manifest(args, build_manifest(args, seed, files), default_path=out / "manifest.json")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = resolve_seed(args.seed)
    graph = load_arch(args.arch)
    weights = _load_weights(graph, args, seed)
    if args.input_file:
        x = load_input(args.input_file, graph.input_shape)
    else:
        x = noise_inputs(graph.input_shape, 1, seed)[0]
    err = grad_check(graph, weights, x, args.n_probes, args.h, args.probe, seed,
                     args.identity_nonlinearity)
    ok = err <= args.tol
    print(f"max relative error: {_fmt(err)} ({'pass' if ok else 'FAIL'}, tolerance {_fmt(args.tol)})")
    files = [args.arch, *([args.input_file] if args.input_file else []), *([args.weights] if args.weights else [])]
    emit_manifest(args, build_manifest(args, seed, files))
    return EXIT_OK if ok else EXIT_CHECK_FAILED


# --- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rfscope", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"rfscope {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        p = sub.add_parser(name, help=help)
        p.set_defaults(func=func)
        p.add_argument("--manifest", help="write the run manifest here (default: next to outputs or stderr)")
        return p

    p = add("analyze", cmd_analyze, "per-node receptive fields of an architecture file")
    p.add_argument("arch")
    p.add_argument("--json", action="store_true", help="emit JSON instead of a table")
    p.add_argument("--window", type=_pair, metavar="F,T", help="report the input window of this unit")
    p.add_argument("--node", help="node for --window (default: the probe)")

    p = add("gen", cmd_gen, "generate a CP_ResNet / CP_DenseNet architecture file")
    p.add_argument("family", choices=FAMILIES)
    p.add_argument("--rho", type=int)
    p.add_argument("--rho-f", type=int)
    p.add_argument("--rho-t", type=int)
    p.add_argument("--growth-rate", type=int)
    p.add_argument("--groups", type=int, default=1)
    p.add_argument("--damp", choices=("none", "freq", "time", "both"))
    p.add_argument("--m", type=float, default=DEFAULT_M, help="damping strength for --damp")
    p.add_argument("--damping", type=_float_pair, metavar="M_T,M_F")
    p.add_argument("--damping-mode", choices=("literal", "centered"), default="literal")
    p.add_argument("--extra-pools", type=int, default=0)
    p.add_argument("--frames", type=int, default=256, help="input time extent")
    p.add_argument("--bins", type=int, default=256, help="input frequency extent")
    p.add_argument("--base-channels", type=int, default=128)
    p.add_argument("--shake-shake", action="store_true")
    p.add_argument("--freq-aware", action="store_true")
    p.add_argument("--out", help="output file (default: stdout)")

    p = add("table", cmd_table, "rho to Max RF table")
    p.add_argument("family", nargs="?", default="cp_resnet", choices=FAMILIES)
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.add_argument("--csv", help="also write the table as CSV here")

    p = add("damp", cmd_damp, "damping factor grid as CSV (rows = frequency)")
    p.add_argument("--T", type=int, default=3, help="kernel time extent")
    p.add_argument("--F", type=int, default=3, help="kernel frequency extent")
    p.add_argument("--m-t", type=float, default=DEFAULT_M)
    p.add_argument("--m-f", type=float, default=DEFAULT_M)
    p.add_argument("--mode", choices=("literal", "centered"), default="literal")
    p.add_argument("--out", help="write <out>.csv and <out>.json")

    p = add("erf", cmd_erf, "measure the effective receptive field")
    p.add_argument("arch")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-inputs", type=int, default=16)
    p.add_argument("--input-file", action="append", help="RFSW or CSV input (repeatable)")
    p.add_argument("--weights", help="RFSW weights file (default: seeded init)")
    p.add_argument("--damp", choices=("none", "freq", "time", "both"))
    p.add_argument("--m", type=float, default=DEFAULT_M)
    p.add_argument("--damping-mode", choices=("literal", "centered"), default="literal")
    p.add_argument("--probe", type=_pair, metavar="F,T", help="probe unit (default: centre)")
    p.add_argument("--identity-nonlinearity", action="store_true")
    p.add_argument("--format", choices=("pgm", "csv", "both"), default="both")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True, help="output directory")

    p = add("gradcheck", cmd_gradcheck, "compare input gradients with central differences")
    p.add_argument("arch")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-probes", type=int, default=10)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--probe", type=_pair, metavar="F,T")
    p.add_argument("--input-file")
    p.add_argument("--weights")
    p.add_argument("--zero-weights", action="store_true")
    p.add_argument("--identity-nonlinearity", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (UsageError, ArchError, ContainerError, EngineError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
