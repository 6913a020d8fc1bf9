"""Command-line entry point: ``changeinfer <command> ...``.

Every command exits 0 on success. On failure it prints one line
``error[<category>]: <message>`` to stderr and exits nonzero.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import analysis, calibration
from .change_engine import CLOSED_LOOP, FEED_FORWARD
from .errors import ChangeInferError, ConfigError, FormatError
from .formats import (atomic_write, format_float, parse_thresholds, read_frames, read_model, to_csv,
                      write_frames, write_model, write_thresholds)
from .metrics import METRICS, MSE, loss as metric_loss
from .network import DenseNetwork, convert_to_cb, forward_sequence, random_weights, segmentation_spec
from .synthetic import SyntheticConfig, gen_synthetic

STATS_HEADER = ("frame", "layer", "changed_px", "change_frac", "eff_ops", "wall_ns", "loss")
SWEEP_HEADER = ("factor", "loss", "total_eff_ops", "wall_ns")
TRACE_HEADER = ("layer", "tau", "loss", "incremental_loss")
MEM_HEADER = ("mode", "quantity", "values")
OPS_HEADER = ("frame", "layer", "dense_ops", "cb_ops", "fg_sp_ops", "fg_fm_ops")

EXIT_CODES = {"parse": 3, "shape": 4, "config": 5, "calibration": 6, "io": 7}


def parse_factors(text: str) -> list[float]:
    """``start:stop:step`` (stop included) or a comma-separated list."""
    try:
        if ":" in text:
            start, stop, step = (float(v) for v in text.split(":"))
            if step <= 0 or stop < start:
                raise ValueError
            n = int(round((stop - start) / step))
            out = [start + i * step for i in range(n + 1)]
            if out[-1] > stop + 1e-9 * max(1.0, abs(stop)):
                out.pop()
            return [round(v, 12) for v in out]
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse factors {text!r}; use start:stop:step or a,b,c") from None


def _text_or_file(value: str):
    """Return (text, source) where value is inline text or a path to a file."""
    p = Path(value)
    if p.is_file():
        return p.read_text(encoding="utf-8"), str(p)
    return value, "<command line>"


def parse_policy_map(value: str) -> dict[str, str]:
    text, source = _text_or_file(value)
    out = {}
    pos = 0
    for item in text.replace(",", "\n").splitlines(keepends=True):
        body = item.split("#", 1)[0].strip()
        if body:
            parts = body.replace("=", " ").split()
            if len(parts) != 2:
                raise FormatError(source, pos, f"expected 'layer=policy', got {body!r}")
            out[parts[0]] = parts[1]
        pos += len(item.encode("utf-8"))
    return out


def _load_network(args):
    model = read_model(args.model)
    return model, DenseNetwork(model.spec, model.params)


def _thresholds(args, model, conv_names, option="thresholds"):
    value = getattr(args, option, None)
    if value is not None:
        text, source = _text_or_file(value)
        taus = parse_thresholds(text, source)
    else:
        taus = {n: t for n, t in model.thresholds.items() if n in conv_names}
    if isinstance(taus, dict):
        unknown = set(taus) - set(conv_names)
        if unknown:
            raise ConfigError(f"thresholds given for unknown conv layers {sorted(unknown)}")
        taus = [taus.get(n, 0.0) for n in conv_names]
    if len(taus) != len(conv_names):
        raise ConfigError(f"{len(taus)} thresholds given for {len(conv_names)} conv layers {conv_names}")
    factor = getattr(args, "threshold_factor", None)
    if factor is not None:
        taus = [factor * t for t in taus]
    return taus


def _build_cb(args, model, net, with_thresholds=True):
    policies = dict(model.policies)
    if getattr(args, "policy_map", None):
        policies.update(parse_policy_map(args.policy_map))
    mode = getattr(args, "mode", CLOSED_LOOP)
    cb = convert_to_cb(net, None, policies, mode)
    if with_thresholds:
        cb.set_thresholds(_thresholds(args, model, [c.name for c in cb.conv_layers]))
    return cb


def _write_or_print(path, text: str):
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        atomic_write(path, text)


def cmd_gen_frames(args) -> None:
    vx, vy = (int(v) for v in args.velocity.split(","))
    cfg = SyntheticConfig(height=args.height, width=args.width, channels=args.channels, n_frames=args.frames,
                          n_objects=args.objects, object_size=(args.object_size, args.object_size),
                          velocity=(vx, vy), noise_std=args.noise, seed=args.seed)
    write_frames(args.out, gen_synthetic(cfg))


def cmd_gen_model(args) -> None:
    if args.full_size:
        spec = segmentation_spec(channel_div=args.channel_div)
    else:
        spec = segmentation_spec((args.height, args.width), channel_div=args.channel_div, kernel=args.kernel)
    taus = {layer.name: args.tau for layer in spec.conv_layers} if args.tau is not None else None
    write_model(args.out, spec, random_weights(spec, args.seed), thresholds=taus)


def _dense_equivalents(cb) -> dict[str, str]:
    """Change-based node name -> dense layer whose output it reproduces."""
    equiv = {name: name for name, _, _ in cb.nodes}
    for layer in cb.spec.layers:
        if layer.name in cb.aliases:
            equiv[cb.aliases[layer.name]] = layer.name
    return equiv


def cmd_run(args) -> None:
    model, net = _load_network(args)
    cb = _build_cb(args, model, net)
    frames = read_frames(args.frames)
    compare = args.compare_dense
    equiv = _dense_equivalents(cb)
    layer_loss = {}
    refs = []

    def on_frame(t, cbnet, stats, maps):
        if not compare and args.ref_out is None:
            return
        dense = net.forward(frames[t], return_all=True, method="gemm")
        refs.append(dense[net.spec.layers[-1].name])
        if compare:
            for st in stats:
                live = cbnet.layer(st.layer).prev_output
                layer_loss[(t, st.layer)] = metric_loss(live, dense[equiv[st.layer]], args.metric)

    outputs, run = forward_sequence(cb, frames, on_frame=on_frame)
    rows = []
    for r in run.records:
        wall = 0 if args.no_timing else r.wall_ns
        rows.append((r.frame, r.layer, r.changed_px, format_float(r.change_frac), r.eff_ops, wall,
                     format_float(layer_loss.get((r.frame, r.layer)))))
    _write_or_print(args.stats_out, to_csv(STATS_HEADER, rows))
    if args.ref_out is not None:
        write_frames(args.ref_out, refs, prefix="ref")
    if args.out_frames is not None:
        write_frames(args.out_frames, outputs, prefix="out")


def _sequences(paths):
    return [read_frames(p) for p in paths]


def cmd_calibrate(args) -> None:
    model, net = _load_network(args)
    cb = _build_cb(args, model, net, with_thresholds=False)
    cfg = calibration.CalibConfig(_sequences(args.frames), initial_tau=args.init_tau, growth_factor=args.growth,
                                  per_layer_budget=args.budget, metric=args.metric, max_iter=args.max_iter,
                                  aggregate=args.aggregate, eval_frames=args.eval_frames, strict=args.strict)
    result = calibration.select_thresholds(cb, cfg)
    write_thresholds(args.out, result.layer_names, result.thresholds)
    trace_path = args.trace or str(Path(args.out).with_suffix("")) + "_trace.csv"
    rows = [(r.layer, format_float(r.tau), format_float(r.loss), format_float(r.incremental_loss))
            for r in result.trace]
    atomic_write(trace_path, to_csv(TRACE_HEADER, rows))
    for name in result.capped:
        print(f"warning: {name}: growth stopped at --max-iter", file=sys.stderr)


def cmd_sweep(args) -> None:
    model, net = _load_network(args)
    cb = _build_cb(args, model, net, with_thresholds=False)
    base = _thresholds(args, model, [c.name for c in cb.conv_layers], option="base_tau")
    curve = calibration.sweep_threshold_factor(cb, base, parse_factors(args.factors), _sequences(args.frames),
                                               metric=args.metric, eval_frames=args.eval_frames)
    rows = [(format_float(r.factor), format_float(r.loss), r.total_eff_ops, 0 if args.no_timing else r.wall_ns)
            for r in curve.rows]
    _write_or_print(args.out, to_csv(SWEEP_HEADER, rows))


def cmd_mem_report(args) -> None:
    model = read_model(args.model)
    modes = analysis.MEM_MODES if args.mode == "all" else (args.mode,)
    rows = []
    for mode in modes:
        rep = analysis.memory_accounting(model.spec, mode)
        rows += [(mode, "intermediates", rep.intermediate_values), (mode, "x_matrix", rep.x_matrix_values),
                 (mode, "params", rep.param_values)]
        if mode == analysis.CB:
            rows += [(mode, f"cb_{k}", v) for k, v in rep.cb_breakdown.items()]
            rows.append((mode, "cb_extra", rep.cb_extra_values))
        rows.append((mode, "total", rep.total))
    _write_or_print(args.out, to_csv(MEM_HEADER, rows))


def cmd_op_report(args) -> None:
    model, net = _load_network(args)
    cb = _build_cb(args, model, net)
    _, run = forward_sequence(cb, read_frames(args.frames), gather_fg=True)
    report = analysis.op_report(run, model.spec)
    rows = [(r.frame, r.layer, r.dense_ops, r.cb_ops, r.fg_sp_ops, r.fg_fm_ops) for r in report.rows]
    for layer, tot in report.by_layer().items():
        rows.append(("total", layer, tot["dense_ops"], tot["cb_ops"], tot["fg_sp_ops"], tot["fg_fm_ops"]))
    t = report.totals()
    rows.append(("total", "all", t["dense_ops"], t["cb_ops"], t["fg_sp_ops"], t["fg_fm_ops"]))
    _write_or_print(args.out, to_csv(OPS_HEADER, rows))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="changeinfer", description="Change-based CNN inference on video frames.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def model_arg(sp):
        sp.add_argument("--model", required=True, help="model manifest (JSON)")

    def cb_args(sp, thresholds=True):
        sp.add_argument("--policy-map", help="'L6=reuse_1x1,L7=propagate' or a file with such entries")
        sp.add_argument("--mode", choices=(CLOSED_LOOP, FEED_FORWARD), default=CLOSED_LOOP)
        if thresholds:
            sp.add_argument("--thresholds", help="'0.1,0.2,...', 'name value' lines, or a file (default: manifest)")
            sp.add_argument("--threshold-factor", type=float, help="scale every threshold by this factor")

    g = sub.add_parser("gen-frames", help="write a seeded synthetic frame sequence")
    g.add_argument("--out", required=True)
    g.add_argument("--height", type=int, default=128)
    g.add_argument("--width", type=int, default=128)
    g.add_argument("--channels", type=int, default=3)
    g.add_argument("--frames", type=int, default=20)
    g.add_argument("--objects", type=int, default=1)
    g.add_argument("--object-size", type=int, default=8)
    g.add_argument("--velocity", default="1,0", help="dx,dy in pixels per frame")
    g.add_argument("--noise", type=float, default=0.0, help="Gaussian noise standard deviation")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_frames)

    g = sub.add_parser("gen-model", help="write the seven-layer segmentation topology with random weights")
    g.add_argument("--out", required=True)
    g.add_argument("--full-size", action="store_true", help="declared 776x1040 resolutions (accounting only)")
    g.add_argument("--height", type=int, default=128)
    g.add_argument("--width", type=int, default=128)
    g.add_argument("--kernel", type=int, default=7)
    g.add_argument("--channel-div", type=int, default=1)
    g.add_argument("--tau", type=float, help="store this threshold for every conv layer")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_model)

    r = sub.add_parser("run", help="process a frame sequence and write per-layer stats")
    model_arg(r)
    r.add_argument("--frames", required=True)
    cb_args(r)
    r.add_argument("--stats-out", help="stats CSV path (default: stdout)")
    r.add_argument("--ref-out", help="write the dense reference outputs to this directory")
    r.add_argument("--out-frames", help="write the change-based outputs to this directory")
    r.add_argument("--compare-dense", action="store_true", help="fill the loss column against the dense network")
    r.add_argument("--metric", choices=METRICS, default=MSE)
    r.add_argument("--no-timing", action="store_true", help="write 0 in wall_ns (byte-stable output)")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("calibrate", help="select per-layer thresholds under a loss budget")
    model_arg(c)
    c.add_argument("--frames", required=True, nargs="+", help="one or more frame directories")
    cb_args(c, thresholds=False)
    c.add_argument("--metric", choices=METRICS, default=MSE)
    c.add_argument("--budget", type=float, required=True, help="acceptable loss increase per layer")
    c.add_argument("--init-tau", type=float, default=0.01)
    c.add_argument("--growth", type=float, default=1.1)
    c.add_argument("--max-iter", type=int, default=100)
    c.add_argument("--aggregate", choices=("mean", "worst"), default="mean")
    c.add_argument("--eval-frames", choices=(calibration.LAST, calibration.ALL), default=calibration.LAST)
    c.add_argument("--strict", action="store_true", help="fail if a layer hits --max-iter")
    c.add_argument("--out", required=True, help="threshold file")
    c.add_argument("--trace", help="trace CSV (default: <out>_trace.csv)")
    c.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("sweep", help="scale all thresholds jointly and record the trade-off")
    model_arg(s)
    s.add_argument("--frames", required=True, nargs="+")
    cb_args(s, thresholds=False)
    s.add_argument("--base-tau", help="base thresholds (default: manifest)")
    s.add_argument("--factors", default="0:2:0.25", help="start:stop:step (inclusive) or a,b,c")
    s.add_argument("--metric", choices=METRICS, default=MSE)
    s.add_argument("--eval-frames", choices=(calibration.LAST, calibration.ALL), default=calibration.LAST)
    s.add_argument("--no-timing", action="store_true")
    s.add_argument("--out", help="CSV path (default: stdout)")
    s.set_defaults(func=cmd_sweep)

    m = sub.add_parser("mem-report", help="memory accounting in stored values")
    model_arg(m)
    m.add_argument("--mode", choices=analysis.MEM_MODES + ("all",), default="all")
    m.add_argument("--out")
    m.set_defaults(func=cmd_mem_report)

    o = sub.add_parser("op-report", help="per-frame dense / change-based / fine-grained op counts")
    model_arg(o)
    o.add_argument("--frames", required=True)
    cb_args(o)
    o.add_argument("--out")
    o.set_defaults(func=cmd_op_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s: %(message)s")
    try:
        args.func(args)
    except ChangeInferError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return EXIT_CODES["io"]
    return 0


if __name__ == "__main__":
    sys.exit(main())
