"""``ese`` command line: generate, prune, quantize, encode, schedule, simulate, run, report, sweep.

Every stage appends a record to ``pipeline.json`` next to its output. The
record holds the sha256 of each input and output file, so a stage fed with
a file that changed after an earlier stage wrote it fails with exit code 3.

Exit codes: 0 ok, 1 other error, 2 I/O, 3 validation, 4 numeric.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .compress import (
    PePartition,
    apply_mask,
    load_masks,
    load_stats,
    prune_load_balanced,
    prune_magnitude,
    save_masks,
)
from .container import file_digest
from .encode import compressed_size_bytes, dump_columns, encode_csc, load_encoded, save_encoded
from .errors import ContainerIOError, EseError, StaleInputError, ValidationError
from .model import SPARSE_MATRICES, Activations, LayerConfig, load_model, save_model, synthetic_params, zero_params
from .quantize import (
    INPUT_FORMAT,
    QuantizedState,
    build_lut,
    default_luts,
    derive_plan,
    dump_lut_csv,
    load_quantized,
    quantize_params,
    quantize_values,
    quantized_lstm_step,
    save_plan,
    save_quantized,
)
from .schedule import build_schedule, check_schedule, load_schedule, run_schedule, save_schedule, schedule_to_dot
from .simulate import SimConfig, SimReport, simulate_lstm
from .workloads import DEPLOYED, fifo_sweep, sparsity_sweep

log = logging.getLogger("esesim")

PIPELINE_FILE = "pipeline.json"


# -- pipeline manifest --------------------------------------------------------


@dataclass
class StageRecord:
    stage: str
    tool_version: str
    inputs: dict[str, str]
    outputs: dict[str, str]
    params: dict
    timestamp: str


@dataclass
class PipelineManifest:
    path: Path
    stages: list[StageRecord] = field(default_factory=list)

    @classmethod
    def load(cls, path: str | Path) -> "PipelineManifest":
        path = Path(path)
        if not path.exists():
            return cls(path)
        try:
            doc = json.loads(path.read_text())
            return cls(path, [StageRecord(**s) for s in doc["stages"]])
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ValidationError(f"{path}: malformed pipeline manifest ({exc})") from exc

    def producer(self, key: str) -> StageRecord | None:
        for rec in reversed(self.stages):
            if key in rec.outputs:
                return rec
        return None

    def check_inputs(self, inputs: dict[str, str]) -> None:
        """Walk the hash chain upstream of every input.

        An input is stale when it differs from what its producing stage
        wrote, or when any file that stage consumed has since been rewritten.
        """
        seen: set[tuple[str, str]] = set()
        todo = list(inputs.items())
        while todo:
            key, digest = todo.pop()
            if (key, digest) in seen:
                continue
            seen.add((key, digest))
            rec = self.producer(key)
            if rec is None:
                continue
            if rec.outputs[key] != digest:
                raise StaleInputError(
                    f"{key} does not match the output recorded by stage {rec.stage!r} "
                    f"(recorded {rec.outputs[key][:12]}, used {digest[:12]}); rerun the pipeline from there"
                )
            todo.extend(rec.inputs.items())

    def record(self, stage: str, inputs: dict[str, str], outputs: dict[str, str], params: dict) -> None:
        stamp = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
        self.stages.append(StageRecord(stage, __version__, inputs, outputs, params, stamp))
        self.path.parent.mkdir(parents=True, exist_ok=True)
        doc = {"stages": [asdict(s) for s in self.stages]}
        self.path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _key(path: Path, base: Path) -> str:
    try:
        return os.path.relpath(path.resolve(), base.resolve())
    except ValueError:
        return str(path.resolve())


def _digest(path: Path) -> str:
    try:
        return file_digest(path)
    except OSError as exc:
        raise ContainerIOError(f"cannot read {path}: {exc.strerror or exc}") from exc


class Stage:
    """Context helper: hash inputs up front, record outputs afterwards."""

    def __init__(self, args, name: str, inputs: list[Path], first_output: Path, params: dict):
        self.name = name
        self.params = params
        mpath = Path(args.pipeline) if args.pipeline else Path(first_output).parent / PIPELINE_FILE
        self.base = mpath.parent
        self.manifest = PipelineManifest.load(mpath)
        self.inputs = {_key(p, self.base): _digest(p) for p in inputs}
        self.manifest.check_inputs(self.inputs)

    def done(self, outputs: list[Path]) -> None:
        outs = {_key(p, self.base): file_digest(p) for p in outputs}
        self.manifest.record(self.name, self.inputs, outs, self.params)


def _require(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ContainerIOError(f"no such file: {p}")
    return p


def _layer(layers: list, k: int):
    if not 0 <= k < len(layers):
        raise ValidationError(f"layer {k} out of range (model has {len(layers)})")
    return layers[k]


def _sim_config(args) -> SimConfig:
    return SimConfig(
        n_channels=args.channels,
        n_pe=args.n_pe,
        fifo_depth=args.fifo_depth,
        freq_pe=args.freq_pe,
        freq_mem=args.freq_mem,
        mem_width_bits=args.mem_width,
        push_mode=args.push_mode,
        weight_broadcast=not args.refetch_per_channel,
    )


def _write_csv(path: Path, header: list[str], rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


# -- commands -----------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = LayerConfig(args.input_dim, args.hidden, args.proj,
                      has_peephole=not args.no_peephole, has_projection=not args.no_projection)
    layers = [zero_params(cfg) if args.zero else synthetic_params(cfg, args.seed + k)
              for k in range(args.layers)]
    out = Path(args.out)
    st = Stage(args, "generate", [], out, {"seed": args.seed, "config": cfg.to_dict(),
                                           "layers": args.layers, "zero": args.zero})
    save_model(layers, out)
    st.done([out])
    print(f"wrote {out} ({args.layers} layer(s), hidden {cfg.hidden_dim})")
    return 0


def cmd_prune(args) -> int:
    src = _require(args.model)
    out, mask_path = Path(args.out), Path(args.masks)
    params = dict(density=args.density, balanced=args.balanced, n_pe=args.n_pe, per_row=args.per_row)
    st = Stage(args, "prune", [src], out, params)
    layers = load_model(src)
    pruned, masks = [], {}
    for k, p in enumerate(layers):
        t = p.tensors()
        repl = {}
        for name in SPARSE_MATRICES:
            if name not in t:
                continue
            if args.balanced:
                mk = prune_load_balanced(t[name], args.density, PePartition(args.n_pe), args.per_row)
            else:
                mk = prune_magnitude(t[name], args.density)
            masks[f"{k}/{name}"] = mk
            repl[name] = apply_mask(t[name], mk)
            loads, ratio = load_stats(mk, PePartition(args.n_pe))
            log.info("layer %d %s: nnz %d, load max/mean %.4f", k, name, mk.nnz, ratio)
        pruned.append(p.replace(**repl))
    save_model(pruned, out)
    save_masks(masks, mask_path)
    st.done([out, mask_path])
    print(f"wrote {out} and {mask_path}")
    return 0


def cmd_quantize(args) -> int:
    src = _require(args.model)
    out = Path(args.out)
    st = Stage(args, "quantize", [src], out, {"width": args.width})
    layers = load_model(src)
    qlayers = [quantize_params(p, derive_plan(p, args.width)) for p in layers]
    save_quantized(qlayers, out)
    outs = [out]
    if args.plan:
        save_plan(qlayers[0].plan, args.plan)
        outs.append(Path(args.plan))
    st.done(outs)
    for n, tf in qlayers[0].plan.tensors.items():
        log.info("%s: %s (index %s)", n, tf.format, tf.carries_index)
    print(f"wrote {out}")
    return 0


def cmd_encode(args) -> int:
    qpath, mpath = _require(args.qmodel), _require(args.masks)
    out = Path(args.out)
    st = Stage(args, "encode", [qpath, mpath], out, {"n_pe": args.n_pe, "layer": args.layer})
    qp = _layer(load_quantized(qpath), args.layer)
    masks = load_masks(mpath)
    from .quantize import QuantizedTensor

    enc = {}
    for name in SPARSE_MATRICES:
        if name not in qp.tensors:
            continue
        key = f"{args.layer}/{name}"
        if key not in masks:
            raise ValidationError(f"{mpath}: no mask for {key}")
        q = QuantizedTensor(qp.tensors[name], qp.plan.format_of(name))
        enc[name], stats = encode_csc(q, masks[key], args.n_pe)
        log.info("%s: %d words, padding %d (%.3f%% of dense)", name, stats.total_words,
                 stats.padding_words, 100 * stats.overhead)
    save_encoded(enc, out, {"config": qp.config.to_dict()})
    outs = [out]
    if args.dump:
        with open(args.dump, "w") as fh:
            for name, e in enc.items():
                fh.write(f"== {name} {e.rows}x{e.cols}\n")
                dump_columns(e, fh, args.dump_cols)
        outs.append(Path(args.dump))
    st.done(outs)
    total = sum(compressed_size_bytes(e) for e in enc.values())
    print(f"wrote {out} ({total} bytes of weights)")
    return 0


def _config_from(args) -> LayerConfig:
    if args.model:
        src = _require(args.model)
        from .container import read_manifest

        man = read_manifest(src)
        if "config" in man:
            return LayerConfig.from_dict(man["config"])
        if "layers" in man:
            layer = man["layers"][args.layer]
            return LayerConfig.from_dict(layer.get("config", layer))
        raise ValidationError(f"{src}: cannot find a layer config")
    return LayerConfig(args.input_dim, args.hidden, args.proj)


def cmd_schedule(args) -> int:
    cfg = _config_from(args)
    out = Path(args.out)
    inputs = [Path(args.model)] if args.model else []
    st = Stage(args, "schedule", inputs, out, {"config": cfg.to_dict(), "g": args.g})
    s = build_schedule(cfg, Activations(g=args.g))
    save_schedule(s, out)
    outs = [out]
    if args.dot:
        Path(args.dot).write_text(schedule_to_dot(s))
        outs.append(Path(args.dot))
    st.done(outs)
    print(f"wrote {out} ({len(s.states)} states, {len(s.ops())} ops)")
    return 0


def cmd_simulate(args) -> int:
    epath, spath = _require(args.encoded), _require(args.schedule)
    out = Path(args.out)
    cfg = _sim_config(args)
    st = Stage(args, "simulate", [epath, spath], out, asdict(cfg))
    sched = check_schedule(load_schedule(spath))
    _, enc = load_encoded(epath)
    report = simulate_lstm(enc, sched, cfg)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    outs = [out]
    if args.csv:
        outs.append(_write_states_csv(report, Path(args.csv)))
    st.done(outs)
    print(f"latency {report.latency_s * 1e6:.2f} us, utilization {report.utilization:.3f}, "
          f"{report.throughput['sparse_gops']:.1f} GOPS "
          f"({report.throughput['equivalent_gops']:.1f} dense-equivalent)")
    return 0


def _write_states_csv(report: SimReport, path: Path) -> Path:
    rows = [[p.state, p.phase, p.start, p.duration, p.spmv, p.spmv_cycles, p.elem_cycles,
             p.residual_fetch, int(p.fetch_bound)] for p in report.phases]
    return _write_csv(path, ["state", "phase", "start", "duration", "spmv", "spmv_cycles",
                             "elem_cycles", "residual_fetch", "fetch_bound"], rows)


def _read_sequence(path: Path, dim: int) -> np.ndarray:
    if path.suffix == ".npy":
        xs = np.load(path)
    else:
        xs = np.loadtxt(path, delimiter=",", ndmin=2)
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[1] != dim:
        raise ValidationError(f"{path}: expected a (T, {dim}) sequence, got {xs.shape}")
    return xs


def cmd_run(args) -> int:
    qpath, ipath = _require(args.qmodel), _require(args.inputs)
    out = Path(args.out)
    st = Stage(args, "run", [qpath, ipath], out, {"layer": args.layer, "scheduled": bool(args.schedule)})
    qp = _layer(load_quantized(qpath), args.layer)
    xs = _read_sequence(ipath, qp.config.input_dim)
    luts = default_luts()
    sched = check_schedule(load_schedule(_require(args.schedule))) if args.schedule else None
    state = QuantizedState.zeros(qp.config)
    fin = qp.plan.input_format.frac
    rows = []
    for t, x in enumerate(xs):
        xq = quantize_values(x, INPUT_FORMAT)
        if sched is None:
            y, state = quantized_lstm_step(qp, luts, xq, state)
        else:
            y, state = run_schedule(sched, qp, luts, xq, state)
        rows.append([t, *(y / 2.0 ** fin)])
    _write_csv(out, ["t", *[f"y{k}" for k in range(qp.config.output_dim)]], rows)
    st.done([out])
    print(f"wrote {out} ({len(rows)} steps)")
    return 0


def cmd_report(args) -> int:
    from .plotting import plot_pe_busy, plot_timeline

    src = _require(args.report)
    out_dir = Path(args.out_dir)
    st = Stage(args, "report", [src], out_dir / "summary.csv", {})
    try:
        report = SimReport.from_dict(json.loads(src.read_text()))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{src}: invalid JSON ({exc})") from exc
    outs = []
    mrows = []
    for name, m in report.matrices.items():
        ref = DEPLOYED.get(name)
        mrows.append([name, *m["shape"], m["words"], m["real_nnz"], 2 * m["words"],
                      m["compute_cycles"], m["lower_bound_cycles"], m["fetch_cycles"],
                      round(m["utilization"], 6), round(m["compute_time_s"] * 1e6, 4),
                      ref[3] if ref else "", ref[5] if ref else ""])
    outs.append(_write_csv(out_dir / "matrices.csv",
                           ["matrix", "rows", "cols", "words", "real_nnz", "bytes", "compute_cycles",
                            "lower_bound_cycles", "fetch_cycles", "utilization", "compute_us",
                            "reference_bytes", "reference_real_us"], mrows))
    outs.append(_write_states_csv(report, out_dir / "states.csv"))
    tp = report.throughput
    summary = [
        ("total_cycles", report.total_cycles),
        ("latency_us", report.latency_s * 1e6),
        ("utilization", report.utilization),
        ("spmv_utilization", report.spmv_utilization),
        ("sparse_ops", tp.get("sparse_ops", "")),
        ("dense_ops", tp.get("dense_ops", "")),
        ("sparse_gops", tp.get("sparse_gops", "")),
        ("useful_gops", tp.get("useful_gops", "")),
        ("equivalent_gops", tp.get("equivalent_gops", "")),
        ("fetch_bound_states", ";".join(report.fetch_bound_states)),
    ]
    outs.append(_write_csv(out_dir / "summary.csv", ["metric", "value"], summary))
    if not args.no_plots:
        outs.append(plot_timeline(report, out_dir / "timeline.png"))
        outs.append(plot_pe_busy(report, out_dir / "pe_busy.png"))
    st.done(outs)
    for k, v in summary:
        print(f"{k:20s} {v}")
    return 0


def _floats(s: str) -> list[float]:
    return [float(v) for v in s.split(",") if v.strip()]


def _ints(s: str) -> list[int]:
    return [int(v) for v in s.split(",") if v.strip()]


def cmd_sweep(args) -> int:
    out = Path(args.out)
    if args.kind == "fifo":
        res = fifo_sweep(_ints(args.depths), range(args.seed, args.seed + args.seeds),
                         args.density, args.balanced, args.n_pe)
        rows = [[d, float(np.median(v)), float(np.min(v)), float(np.max(v)), len(v)]
                for d, v in sorted(res.items())]
        _write_csv(out, ["depth", "median_utilization", "min", "max", "seeds"], rows)
        if args.plot:
            from .plotting import plot_fifo_sweep

            plot_fifo_sweep(res, args.plot)
    else:
        pts = sparsity_sweep(_floats(args.densities), seed=args.seed, jobs=args.jobs)
        rows = [[p.density, p.balanced_cycles, p.unbalanced_cycles, p.balanced_speedup,
                 p.unbalanced_speedup] for p in pts]
        _write_csv(out, ["density", "balanced_cycles", "unbalanced_cycles",
                         "balanced_speedup", "unbalanced_speedup"], rows)
        if args.plot:
            from .plotting import plot_sparsity_sweep

            plot_sparsity_sweep(pts, args.plot)
    for r in rows:
        print(",".join(f"{v:.4f}" if isinstance(v, float) else str(v) for v in r))
    return 0


def cmd_lut(args) -> int:
    lut = build_lut(args.fn, n_points=args.points)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        dump_lut_csv(lut, fh)
    print(f"wrote {out} ({lut.n_points} points over [{lut.sample_min}, {lut.sample_max}])")
    return 0


# -- argument parsing -----------------------------------------------------------


def _sim_args(p: argparse.ArgumentParser) -> None:
    d = SimConfig()
    p.add_argument("--channels", type=int, default=d.n_channels)
    p.add_argument("--n-pe", type=int, default=d.n_pe)
    p.add_argument("--fifo-depth", type=int, default=d.fifo_depth)
    p.add_argument("--freq-pe", type=float, default=d.freq_pe)
    p.add_argument("--freq-mem", type=float, default=d.freq_mem)
    p.add_argument("--mem-width", type=int, default=d.mem_width_bits)
    p.add_argument("--push-mode", choices=("broadcast", "independent"), default=d.push_mode)
    p.add_argument("--refetch-per-channel", action="store_true",
                   help="every channel streams its own copy of the weights")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ese", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("--seed", type=int, default=0, help="seed for every random choice")
    ap.add_argument("--pipeline", help="pipeline manifest path (default: next to the output)")
    # the global flags are accepted after the subcommand too
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--pipeline", default=argparse.SUPPRESS)
    sub = ap.add_subparsers(dest="command", required=True)
    _add = sub.add_parser
    sub.add_parser = lambda *a, **kw: _add(*a, parents=[common], **kw)

    p = sub.add_parser("generate", help="write a synthetic LSTM model")
    p.add_argument("--out", required=True)
    p.add_argument("--input-dim", type=int, default=153)
    p.add_argument("--hidden", type=int, default=1024)
    p.add_argument("--proj", type=int, default=512)
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--no-peephole", action="store_true")
    p.add_argument("--no-projection", action="store_true")
    p.add_argument("--zero", action="store_true", help="all-zero weights")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("prune", help="magnitude or load-balance-aware pruning")
    p.add_argument("model")
    p.add_argument("--out", required=True, help="pruned model")
    p.add_argument("--masks", required=True, help="mask container")
    p.add_argument("--density", type=float, default=0.1)
    p.add_argument("--balanced", action="store_true")
    p.add_argument("--n-pe", type=int, default=32)
    p.add_argument("--per-row", action="store_true", help="equal quota per row instead of per PE")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("quantize", help="dynamic-precision fixed point")
    p.add_argument("model")
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int, default=12)
    p.add_argument("--plan", help="also write the layer-0 plan as JSON")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("encode", help="relative-index CSC encoding")
    p.add_argument("qmodel")
    p.add_argument("--masks", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-pe", type=int, default=32)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--dump", help="human-readable column listing")
    p.add_argument("--dump-cols", type=int, default=4)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("schedule", help="build the LSTM operation schedule")
    p.add_argument("--model", help="any model container to take the layer shape from")
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--input-dim", type=int, default=153)
    p.add_argument("--hidden", type=int, default=1024)
    p.add_argument("--proj", type=int, default=512)
    p.add_argument("--g", choices=("tanh", "sigmoid"), default="tanh")
    p.add_argument("--out", required=True)
    p.add_argument("--dot", help="Graphviz output")
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("simulate", help="timing simulation of one timestep")
    p.add_argument("encoded")
    p.add_argument("--schedule", required=True)
    p.add_argument("--out", required=True, help="JSON report")
    p.add_argument("--csv", help="per-phase timeline CSV")
    _sim_args(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("run", help="fixed-point inference over an input sequence")
    p.add_argument("qmodel")
    p.add_argument("--inputs", required=True, help="CSV or .npy, one timestep per row")
    p.add_argument("--out", required=True)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--schedule", help="execute through this schedule instead of the fused step")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="tables, CSVs and figures from a simulation report")
    p.add_argument("report")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sweep", help="FIFO-depth or sparsity sweeps")
    p.add_argument("kind", choices=("fifo", "sparsity"))
    p.add_argument("--out", required=True)
    p.add_argument("--plot", help="PNG output")
    p.add_argument("--depths", default="1,2,4,8,16,32")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--density", type=float, default=0.11)
    p.add_argument("--balanced", action="store_true")
    p.add_argument("--n-pe", type=int, default=32)
    p.add_argument("--densities", default="0.05,0.1,0.2,0.3,0.5,0.7,1.0")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("lut", help="dump an activation lookup table")
    p.add_argument("fn", choices=("sigmoid", "tanh"))
    p.add_argument("--out", required=True)
    p.add_argument("--points", type=int, default=2048)
    p.set_defaults(func=cmd_lut)
    return ap


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("ESE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except EseError as exc:
        print(f"ese {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"ese {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
