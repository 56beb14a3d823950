"""Command-line driver: parse, quantize, infer, analyze, explore, emit, report."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import dse, emu, formats
from .emit import AcceleratorConfig, ConfigError, emit_config
from .fitting import load_measurements
from .netir import GraphError, zoo_model
from .parser import ModelSyntaxError, PrecisionError, format_model, load_model, parse_precision_tag

EXIT_OK, EXIT_USAGE, EXIT_PARSE, EXIT_INFEASIBLE, EXIT_IO = 0, 2, 3, 4, 5


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ------------------------------------------------------------- helpers

def _emit(args, payload: dict, text: str) -> None:
    out = json.dumps(payload, sort_keys=True, indent=2) + "\n" if args.json else text
    if args.out and args.command in ("analyze", "explore", "report", "parse"):
        Path(args.out).write_text(out)
    else:
        sys.stdout.write(out)


def _need(args, *names):
    for n in names:
        if getattr(args, n, None) is None:
            raise UsageError(f"{args.command} needs --{n.replace('_', '-')}")


def _model(args):
    _need(args, "model")
    return load_model(args.model)


def _scheme(args):
    _need(args, "scheme")
    return parse_precision_tag(args.scheme)


def _calib(args):
    return dse.load_calibration(args.calib)


def _device(args):
    return dse.load_device(args.device, args.devices)


def _float_weights(args, graph):
    if args.random_weights is not None:
        return emu.random_weights(graph, np.random.default_rng(args.random_weights))
    _need(args, "weights")
    return formats.read_weights(args.weights)


def _images(args, graph):
    if not args.image:
        return None
    return np.stack([formats.read_image(p) for p in args.image])


def _quantized(args, graph, scheme=None):
    """Load an .elbq, or quantize an .elbw / random weights on the fly."""
    if args.weights and formats.sniff(args.weights) == formats.QMODEL_MAGIC:
        qm = formats.read_qmodel(args.weights)
        if scheme is not None and qm.scheme_tag != scheme.tag:
            raise ConfigError(f"{args.weights} was quantized as {qm.scheme_tag}, not {scheme.tag}")
        return qm
    scheme = scheme or _scheme(args)
    return emu.quantize_model(graph, scheme, _float_weights(args, graph), _images(args, graph),
                              rounding=args.rounding)


def _table(header: list[str], rows: list[list]) -> str:
    cells = [header] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    return "\n".join(lines) + "\n"


def _report_dict(r: dse.EstimateReport) -> dict:
    return r.to_dict()


# ------------------------------------------------------------- subcommands

def cmd_parse(args) -> int:
    g = _model(args)
    stages = [{"name": s.name, "position": s.position.value,
               "ops": [l.kind.value for l in s.layers()],
               "in_shape": list(s.in_shape), "out_shape": list(s.out_shape)} for s in g.stages]
    payload = {"network": g.name, "input_shape": list(g.input_shape), "stages": stages,
               "model": format_model(g)}
    text = _table(["stage", "position", "ops", "in", "out"],
                  [[s["name"], s["position"], "+".join(s["ops"]),
                    "x".join(map(str, s["in_shape"])), "x".join(map(str, s["out_shape"]))]
                   for s in stages])
    _emit(args, payload, text)
    return EXIT_OK


def cmd_quantize(args) -> int:
    g = _model(args)
    scheme = _scheme(args)
    _need(args, "out")
    qm = emu.quantize_model(g, scheme, _float_weights(args, g), _images(args, g),
                            rounding=args.rounding)
    formats.write_qmodel(args.out, qm)
    if args.json:
        print(json.dumps({"out": args.out, "scheme": scheme.tag,
                          "stages": [s.name for s in qm.stages]}, sort_keys=True))
    return EXIT_OK


def cmd_infer(args) -> int:
    if args.config:
        cfg = AcceleratorConfig.loads(Path(args.config).read_text())
        g = cfg.graph()
        scheme = cfg.scheme()
    else:
        g = _model(args)
        scheme = parse_precision_tag(args.scheme) if args.scheme else None
    qm = _quantized(args, g, scheme)
    _need(args, "image", "out")
    if len(args.image) != 1:
        raise UsageError("infer takes exactly one --image")
    img = formats.read_image(args.image[0])
    stats: list = []
    codes = emu.run_network(g, qm, img, stats)
    Path(args.out).write_bytes(formats.dump_logits(codes))
    side = {"argmax": int(np.argmax(codes)), "scheme": qm.scheme_tag, "network": g.name,
            "output_format": list(qm.stages[-1].out_fmt.as_tuple()), "stages": stats}
    Path(str(args.out) + ".json").write_text(json.dumps(side, sort_keys=True, indent=2) + "\n")
    if args.json:
        print(json.dumps(side, sort_keys=True))
    else:
        print(f"argmax {side['argmax']}  ({len(codes)} logits -> {args.out})")
    return EXIT_OK


def cmd_analyze(args) -> int:
    g = _model(args)
    gop, per = dse.network_gop(g)
    total = sum(per)
    rows = [{"stage": s.name, "ops": n, "share": n / total} for s, n in zip(g.stages, per)]
    payload = {"network": g.name, "gop": gop, "stages": rows}
    text = f"{g.name}: {gop:.4f} GOP\n" + _table(
        ["stage", "GOP", "share"], [[r["stage"], f"{r['ops'] / 1e9:.4f}", f"{100 * r['share']:.2f}%"]
                                    for r in rows])
    if args.scheme:
        scheme = _scheme(args)
        v = dse.data_volume(g, scheme, 1)
        payload["scheme"] = scheme.tag
        payload["volume"] = {"weight_bits": v.weight_bits, "feature_bits": v.feature_bits,
                             "feature_share": v.feature_share,
                             "conv_feature_share": v.conv_feature_share,
                             "traffic_bytes_per_frame": v.traffic_bytes}
        payload["acc_bits"] = {s.name: emu.required_acc_bits(s, scheme) for s in g.stages}
        text += (f"feature-map share {100 * v.feature_share:.1f}% "
                 f"(conv only {100 * v.conv_feature_share:.1f}%), "
                 f"DRAM traffic {v.traffic_bytes / 1e6:.2f} MB/frame at batch 1\n")
    _emit(args, payload, text)
    return EXIT_OK


def _explore(g, scheme, budget, calib):
    plan = dse.balance_pipeline(g, scheme, budget, calib)
    return plan, dse.estimate(plan, g, scheme, budget, calib)


def _estimate_text(r: dse.EstimateReport) -> str:
    head = (f"{r.network} {r.scheme}: batch {r.batch}, {r.speed:.1f} img/s, {r.perf:.3f} TOPS, "
            f"{r.bandwidth:.2f} GB/s, bound by {r.binding}, bottleneck {r.bottleneck}\n"
            f"LUT {r.lut:.0f}  FF {r.ff:.0f}  BRAM {r.bram:.1f}  DSP {r.dsp}\n")
    return head + _table(["stage", "p_in", "p_out", "cycles", "lut/lane", "dsp/lane", "bram/lane",
                          "bram shared"],
                         [[s["stage"], s["p_in"], s["p_out"], s["cycles"], s["lut_per_lane"],
                           s["dsp_per_lane"], s["bram_lane"], s["bram_shared"]] for s in r.stages])


def cmd_explore(args) -> int:
    g = _model(args)
    _, rep = _explore(g, _scheme(args), _device(args), _calib(args))
    _emit(args, _report_dict(rep), _estimate_text(rep))
    return EXIT_OK


def cmd_emit(args) -> int:
    g = _model(args)
    scheme = _scheme(args)
    _need(args, "out")
    budget, calib = _device(args), _calib(args)
    qm = _quantized(args, g, scheme)
    plan, _ = _explore(g, scheme, budget, calib)
    cfg = emit_config(plan, g, scheme, qm, budget, calib)
    Path(args.out).write_text(cfg.dumps())
    if args.json:
        print(json.dumps({"out": args.out, "batch": plan.batch}, sort_keys=True))
    return EXIT_OK


def _pct(a: float, b: float) -> str:
    return f"{100 * (a / b - 1):+.1f}%"


def cmd_report(args) -> int:
    budget, calib = _device(args), _calib(args)
    refs = load_measurements(args.reference)
    if args.schemes:
        g = _model(args)
        wanted = [(g, parse_precision_tag(t)) for t in args.schemes.split(",")]
    else:
        wanted = [(zoo_model(r.network), parse_precision_tag(r.scheme)) for r in refs
                  if r.network.startswith("AlexNet")]
    rows, payload = [], []
    for g, scheme in wanted:
        _, rep = _explore(g, scheme, budget, calib)
        ref = next((r for r in refs if r.network == g.name and r.scheme == scheme.tag), None)
        entry = {"report": _report_dict(rep), "reference": ref.__dict__ if ref else None}
        payload.append(entry)
        delta = (["-"] * 4 if ref is None else
                 [f"{rep.batch - ref.batch:+d}", _pct(rep.speed, ref.speed),
                  _pct(rep.bandwidth, ref.bandwidth), _pct(rep.gop, ref.gop)])
        rows.append([g.name, scheme.tag, rep.batch, f"{rep.bandwidth:.2f}", f"{rep.gop:.3f}",
                     f"{rep.speed:.1f}", f"{rep.perf:.3f}", f"{rep.lut:.0f}", f"{rep.bram:.1f}",
                     rep.dsp, rep.binding, *delta])
    text = _table(["network", "scheme", "batch", "GB/s", "GOP", "img/s", "TOPS", "LUT", "BRAM",
                   "DSP", "bound", "d.batch", "d.img/s", "d.GB/s", "d.GOP"], rows)
    _emit(args, {"rows": payload}, text)
    return EXIT_OK


HELP = {
    "parse": "validate a model and list its fused stages",
    "quantize": "quantize float weights (.elbw) into a .elbq under --scheme",
    "infer": "run the bit-exact emulator on one raw image",
    "analyze": "operation counts, data volumes and accumulator widths",
    "explore": "search parallelism and batch lanes for --device",
    "emit": "write the accelerator configuration JSON",
    "report": "summary rows for several schemes with deltas to reference values",
}

COMMANDS = {"parse": cmd_parse, "quantize": cmd_quantize, "infer": cmd_infer,
            "analyze": cmd_analyze, "explore": cmd_explore, "emit": cmd_emit,
            "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--model", help="model file (.elbm) or zoo:<name>")
    common.add_argument("--weights", help=".elbw float weights or .elbq quantized model")
    common.add_argument("--random-weights", type=int, metavar="SEED",
                        help="use synthetic weights drawn with SEED instead of --weights")
    common.add_argument("--scheme", help="precision tag, e.g. Alexnet-8-8218")
    common.add_argument("--device", default="zc706", help="device preset name")
    common.add_argument("--devices", help="device presets file (default: shipped presets)")
    common.add_argument("--calib", help="cost-model calibration JSON")
    common.add_argument("--image", action="append", help="raw 8-bit image (repeatable)")
    common.add_argument("--config", help="accelerator config JSON (infer)")
    common.add_argument("--rounding", default="half_away", choices=["half_away", "floor"])
    common.add_argument("--schemes", help="comma-separated tags for report")
    common.add_argument("--reference", help="reference measurements JSON for report")
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("--out", help="output path")
    ap = _Parser(prog="lowbit-accel", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=HELP[name])
    return ap


def _fail(args_json: bool, code: int, kind: str, message: str) -> int:
    if args_json:
        sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code},
                                    sort_keys=True) + "\n")
    else:
        sys.stderr.write(f"lowbit-accel: {kind}: {message}\n")
    return code


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    want_json = "--json" in argv
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as e:
        return _fail(want_json, EXIT_USAGE, "usage", str(e))
    except (ModelSyntaxError, GraphError, PrecisionError, ConfigError) as e:
        return _fail(want_json, EXIT_PARSE, "parse", str(e))
    except dse.InfeasibleDesign as e:
        return _fail(want_json, EXIT_INFEASIBLE, "infeasible", str(e))
    except (OSError, formats.FormatError) as e:
        return _fail(want_json, EXIT_IO, "io", str(e))
    except KeyError as e:
        return _fail(want_json, EXIT_USAGE, "usage", str(e.args[0]) if e.args else "unknown name")


if __name__ == "__main__":
    raise SystemExit(main())
