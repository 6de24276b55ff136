"""Command-line front end.

Subcommands: gen, gen-model, infer, verify, bench, quantize.
Exit codes: 0 ok, 1 semantic divergence (verify), 2 I/O or config error.
Set EVGNN_LOG to a logging level name (e.g. DEBUG) for diagnostics.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import engine, event_io, perf_model, quant, static_oracle
from .graph_builder import SearchParams
from .model import ModelConfigError, load_model, save_model

log = logging.getLogger("evgnn")

EXIT_OK = 0
EXIT_DIVERGENCE = 1
EXIT_IO = 2


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_IO):
        super().__init__(message)
        self.code = code


def _setup_logging() -> None:
    level = os.environ.get("EVGNN_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _load_stream(path: str, width: int, height: int,
                 fmt: str | None) -> event_io.EventStream:
    if fmt is None:
        fmt = "bin" if path.endswith((".bin", ".evb")) else "text"
    try:
        with open(path, "rb") as fh:
            data = fh.read()
        if fmt == "bin":
            return event_io.parse_binary_stream(data, width, height)
        return event_io.parse_text_stream(data, width, height)
    except OSError as exc:
        raise CliError(f"cannot read stream {path}: {exc}") from exc
    except event_io.StreamError as exc:
        raise CliError(f"bad stream {path}: {exc}") from exc


def _load_model(path: str):
    try:
        return load_model(path)
    except OSError as exc:
        raise CliError(f"cannot read model {path}: {exc}") from exc
    except (ModelConfigError, json.JSONDecodeError) as exc:
        raise CliError(f"bad model {path}: {exc}") from exc


def _apply_overrides(model, args):
    sp = model.search
    fields = {"shape": args.shape or sp.shape,
              "r_s": args.r_s if args.r_s is not None else sp.r_s,
              "r_t": args.r_t if args.r_t is not None else sp.r_t,
              "d_max": args.d_max if args.d_max is not None else sp.d_max,
              "queue_depth": (args.queue_depth
                              if args.queue_depth is not None
                              else sp.queue_depth)}
    model.search = SearchParams(r=sp.r, beta=sp.beta, **fields)
    return model


def _write_lines(path: str, lines: list[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line + "\n")


def _infer_one(model_path: str, stream_path: str, args) -> int:
    model = _apply_overrides(_load_model(model_path), args)
    stream = _load_stream(stream_path, model.width, model.height, args.format)
    if len(stream) == 0:
        print(f"{stream_path}: no events")
        return EXIT_OK
    t0 = time.perf_counter()
    result = engine.run_stream(model, stream, sequential=args.sequential)
    wall = time.perf_counter() - t0
    if args.trace_out:
        _write_lines(args.trace_out,
                     engine.prediction_trace_lines(model, result))
    final = int(result.cls[-1])
    print(f"{stream_path}: events={len(stream)} "
          f"class={model.classes[final]} ({final}) "
          f"throughput={len(stream) / wall:,.0f} ev/s")
    return EXIT_OK


def cmd_infer(args) -> int:
    if len(args.stream) > 1 and args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            codes = list(pool.map(_infer_worker,
                                  [(args.model, s, vars(args))
                                   for s in args.stream]))
        return max(codes)
    code = EXIT_OK
    for s in args.stream:
        code = max(code, _infer_one(args.model, s, args))
    return code


def _infer_worker(packed):
    model_path, stream_path, argd = packed
    ns = argparse.Namespace(**argd)
    try:
        return _infer_one(model_path, stream_path, ns)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


def cmd_verify(args) -> int:
    model = _apply_overrides(_load_model(args.model), args)
    stream = _load_stream(args.stream, model.width, model.height, args.format)
    par = engine.run_stream(model, stream, sequential=False)
    seq = engine.run_stream(model, stream, sequential=True,
                            adjacency=par.adjacency)
    graph = static_oracle.StaticGraph(stream, par.adjacency, model.search)
    sta = static_oracle.forward_eq7_int8(graph, model)

    sta_feats = np.zeros_like(par.feats)
    for l, f in enumerate(sta.feats):
        sta_feats[:, l, :f.shape[1]] = f

    for name, feats, logits in (("layer-sequential", seq.feats, seq.logits),
                                ("static-oracle", sta_feats, sta.logits)):
        if not np.array_equal(par.feats, feats):
            n, l, c = np.argwhere(par.feats != feats)[0]
            print(f"DIVERGENCE vs {name}: event n={n} layer={l + 1} "
                  f"channel={c}: {par.feats[n, l, c]} != {feats[n, l, c]}")
            return EXIT_DIVERGENCE
        if not np.array_equal(par.logits, logits):
            n, c = np.argwhere(par.logits != logits)[0]
            print(f"DIVERGENCE vs {name}: logits at event n={n} class={c}")
            return EXIT_DIVERGENCE
    print(f"OK: layer-parallel == layer-sequential == static oracle "
          f"({len(stream)} events, {len(model.layers)} layers)")
    return EXIT_OK


def cmd_bench(args) -> int:
    model = _apply_overrides(_load_model(args.model), args)
    stream = _load_stream(args.stream, model.width, model.height, args.format)
    cfg = (perf_model.load_hw_config(args.hw) if args.hw
           else perf_model.HwConfig())
    t0 = time.perf_counter()
    result = engine.run_stream(model, stream, sequential=args.sequential)
    wall = time.perf_counter() - t0
    trace = perf_model.trace_from_run(model, result.adjacency.deg,
                                      result.adjacency.entries_scanned)
    mode = "sequential" if args.sequential else "parallel"
    report = perf_model.estimate_stream_latency(model, trace, cfg, mode)
    des = perf_model.simulate_cycles(trace, model, cfg, mode)
    if report.total_cycles != des.total_cycles:
        raise CliError("analytic and discrete-event totals disagree",
                       EXIT_DIVERGENCE)
    ops = engine.count_ops(model, trace.deg)
    report.extra["mflops_per_event"] = ops.mflops_per_event
    report.extra["mean_degree"] = float(trace.deg.mean())
    report.extra["software_throughput_ev_s"] = len(stream) / wall
    if cfg.e_mac is not None:
        perf_model.estimate_energy(report, trace, model, cfg)
    if args.report_out:
        with open(args.report_out, "w", encoding="utf-8") as fh:
            json.dump(report.to_json(), fh, indent=2)
            fh.write("\n")
    energy = (f" energy={report.mean_energy_nj:.1f} nJ/ev"
              if report.per_event_energy is not None else "")
    print(f"{args.stream}: events={len(stream)} "
          f"model-latency={report.mean_us:.2f} us/ev{energy} "
          f"mflops/ev={ops.mflops_per_event:.4f} "
          f"sw-throughput={len(stream) / wall:,.0f} ev/s")
    return EXIT_OK


def cmd_gen(args) -> int:
    params = {"width": args.width, "height": args.height,
              "count": args.count, "duration_us": args.duration_us}
    if args.kind == "moving_dot":
        params["velocity"] = (args.vx, args.vy)
        params["dot_radius"] = args.dot_radius
    try:
        stream = event_io.gen_synthetic(args.kind, params, args.seed)
    except event_io.InvalidParams as exc:
        raise CliError(str(exc)) from exc
    data = (event_io.write_binary_stream(stream) if args.format == "bin"
            else event_io.write_text_stream(stream).encode())
    with open(args.out, "wb") as fh:
        fh.write(data)
    print(f"wrote {len(stream)} events to {args.out}")
    return EXIT_OK


def cmd_gen_model(args) -> int:
    fp = quant.random_fp_model(args.seed, width=args.width,
                               height=args.height, with_bn=args.with_bn)
    quant.save_fp_model(fp, args.out)
    print(f"wrote FP model to {args.out}")
    return EXIT_OK


def cmd_quantize(args) -> int:
    try:
        fp = quant.load_fp_model(args.fp_model)
    except OSError as exc:
        raise CliError(f"cannot read {args.fp_model}: {exc}") from exc
    except (ModelConfigError, json.JSONDecodeError) as exc:
        raise CliError(f"bad FP model: {exc}") from exc
    folded = quant.fold_model(fp)
    calib = _load_stream(args.calib, fp.width, fp.height, args.format)
    try:
        qm, rep = quant.quantize_model(folded, calib)
    except quant.EmptyCalibration as exc:
        raise CliError(str(exc)) from exc
    save_model(qm, args.out)
    log.info("activation scales: %s", rep.activation_scales)
    print(f"wrote quantized model to {args.out}")
    return EXIT_OK


def _add_common_search_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--format", choices=("text", "bin"), default=None)
    p.add_argument("--shape", choices=("prism", "cylinder"), default=None)
    p.add_argument("--r-s", dest="r_s", type=int, default=None)
    p.add_argument("--r-t", dest="r_t", type=int, default=None)
    p.add_argument("--d-max", dest="d_max", type=int, default=None)
    p.add_argument("--queue-depth", dest="queue_depth", type=int,
                   default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="evgnn",
        description="Event-driven quantized GNN inference and modeling")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("infer", help="run inference over event streams")
    p.add_argument("model")
    p.add_argument("stream", nargs="+")
    p.add_argument("--sequential", action="store_true")
    p.add_argument("--trace-out", default=None)
    p.add_argument("--jobs", type=int, default=1)
    _add_common_search_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("verify",
                       help="diff layer-parallel / sequential / static paths")
    p.add_argument("model")
    p.add_argument("stream")
    _add_common_search_flags(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="instrumented run + performance model")
    p.add_argument("model")
    p.add_argument("stream")
    p.add_argument("--hw", default=None, help="HwConfig JSON path")
    p.add_argument("--sequential", action="store_true")
    p.add_argument("--report-out", default=None)
    _add_common_search_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gen", help="generate a synthetic event stream")
    p.add_argument("--kind", choices=("uniform_random", "moving_dot"),
                   default="moving_dot")
    p.add_argument("--width", type=int, default=120)
    p.add_argument("--height", type=int, default=100)
    p.add_argument("--count", type=int, default=10_000)
    p.add_argument("--duration-us", type=int, default=100_000)
    p.add_argument("--vx", type=float, default=1.0)
    p.add_argument("--vy", type=float, default=0.0)
    p.add_argument("--dot-radius", type=float, default=4.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("text", "bin"), default="text")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("gen-model", help="generate a random FP model file")
    p.add_argument("--width", type=int, default=120)
    p.add_argument("--height", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--with-bn", action="store_true")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_gen_model)

    p = sub.add_parser("quantize", help="fold BN and quantize an FP model")
    p.add_argument("fp_model")
    p.add_argument("--calib", required=True, help="calibration stream path")
    p.add_argument("--format", choices=("text", "bin"), default=None)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_quantize)

    return ap


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
