"""Command-line front end.

Exit codes: 0 success, 2 usage or validation error, 3 mismatch under
``run --check``, 4 capacity error.
"""
from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import activity, golden, simulator
from .compiler import emit_program, load_program, save_program
from .errors import CapacityError, CutieError, EncodingRange, QueueOverflow, ValidationError
from .network import (CIFAR10_ARCH, ArchConfig, load_network, load_tensor, load_trits,
                      cifar10_network, save_network, save_tensor)
from .quantizer import DEFAULT_DELTA, DEFAULT_SCHEDULE, QuantSchedule, QuantStrategy, quantize_incremental
from .tiling import STRATEGIES, TilingPlan, tiling_transfer
from .trits import PackedTritTensor, encode_pixels

EXIT_OK, EXIT_USAGE, EXIT_MISMATCH, EXIT_CAPACITY = 0, 2, 3, 4

ARCH_KEYS = ("in_channels", "out_channels", "kernel", "fm_width", "fm_height", "max_layers", "stages")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    in_channels: int = 128
    out_channels: int = 128
    kernel: int = 3
    fm_width: int = 32
    fm_height: int = 32
    max_layers: int = 8
    stages: int = 4
    cost_model: Optional[str] = None
    seed: int = 0
    row_mode: str = "stall"
    explicit: frozenset = frozenset()  # keys set by a flag or the config file

    @property
    def arch(self) -> ArchConfig:
        return ArchConfig(**{k: getattr(self, k) for k in ARCH_KEYS})


def read_config_file(path) -> dict:
    types = {f.name: f.type for f in fields(RunConfig)}
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = (s.strip() for s in line.partition("="))
        key = key.replace("-", "_")
        if not sep or key not in types:
            raise UsageError(f"{path}:{n}: expected one of {', '.join(types)} = value")
        out[key] = val if key in ("cost_model", "row_mode") else int(val)
    return out


def resolve_config(args) -> RunConfig:
    """Flags override the config file, which overrides the defaults."""
    kv = read_config_file(args.config) if getattr(args, "config", None) else {}
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None and f.name != "explicit":
            kv[f.name] = v
    return RunConfig(**kv, explicit=frozenset(kv))


def _sim_arch(prog, cfg: RunConfig) -> ArchConfig:
    """The program's arch with any explicitly configured parameter swapped in."""
    over = {k: getattr(cfg, k) for k in ARCH_KEYS if k in cfg.explicit}
    if "in_channels" in over:
        over["words_per_pixel"] = None
    return replace(prog.arch, **over) if over else prog.arch


def _dims(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.lower().replace(",", "x").split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected dims like 32x32, got {text!r}") from None


def _write_csv(rows: Sequence[dict], out) -> None:
    if not rows:
        return
    w = csv.DictWriter(out, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})


def _emit_tables(tables: dict, out_dir: Optional[str]) -> None:
    """Write each table to ``out_dir/<name>.csv`` or to stdout, blank-line separated."""
    if out_dir:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        for name, rows in tables.items():
            with open(d / f"{name}.csv", "w", newline="") as fh:
                _write_csv(rows, fh)
        return
    for i, rows in enumerate(tables.values()):
        if i:
            sys.stdout.write("\n")
        _write_csv(rows, sys.stdout)


def _plot_path(args, name: str) -> Optional[Path]:
    if not args.plot:
        return None
    base = Path(args.output_dir) if args.output_dir else Path(".")
    return base / f"{name}.{args.plot_format}"


# -- subcommands ------------------------------------------------------------------

def cmd_compile(args, cfg: RunConfig) -> int:
    if args.cifar10:
        arch = cfg.arch if "max_layers" in cfg.explicit else replace(cfg.arch, max_layers=CIFAR10_ARCH.max_layers)
        net = cifar10_network(cfg.seed)
        if args.write_manifest:
            save_network(net, args.write_manifest)
    elif args.network:
        arch = cfg.arch
        net = load_network(args.network)
    else:
        raise UsageError("compile needs a network manifest or --cifar10")
    try:
        prog = emit_program(net, arch)
    except ValidationError as e:
        for v in e.violations:
            print(f"violation: {v}", file=sys.stderr)
        return EXIT_USAGE
    if args.output:
        save_program(args.output, prog)
    rows = []
    for i, ins in enumerate(prog.instrs):
        thr = prog.layer_thresholds(i)
        rows.append({
            "layer": i,
            "in_dims": "x".join(map(str, ins.in_dims)),
            "out_dims": "x".join(map(str, ins.out_dims)),
            "kernel": "x".join(map(str, ins.kernel)),
            "pooling": ins.pooling if ins.pooling == "none" else f"{ins.pooling}{ins.pool_size[0]}x{ins.pool_size[1]}",
            "dense": int(ins.dense),
            "ops": prog.source_ops[i] if prog.source_ops else ins.ops,
            "t_lo_min": int(thr[:, 0].min()), "t_lo_max": int(thr[:, 0].max()),
            "t_hi_min": int(thr[:, 1].min()), "t_hi_max": int(thr[:, 1].max()),
        })
    _write_csv(rows, sys.stdout)
    print(f"# total ops {sum(r['ops'] for r in rows)}", file=sys.stderr)
    if args.dump_thresholds:
        trows = [{"layer": i, "channel": c, "t_lo": int(lo), "t_hi": int(hi)}
                 for i in range(len(prog.instrs))
                 for c, (lo, hi) in enumerate(prog.layer_thresholds(i))]
        with open(args.dump_thresholds, "w", newline="") as fh:
            _write_csv(trows, fh)
    return EXIT_OK


def _load_input(path) -> np.ndarray:
    if not Path(path).exists():
        raise UsageError(f"input file {path} does not exist")
    return load_trits(path)


def _random_input(prog, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(-1, 2, size=prog.input_dims).astype(np.int8)


def _program_and_input(args, cfg: RunConfig):
    if not Path(args.program).exists():
        raise UsageError(f"program file {args.program} does not exist")
    prog = load_program(args.program)
    x = _load_input(args.input) if args.input else _random_input(prog, cfg.seed)
    return prog, x


def cmd_run(args, cfg: RunConfig) -> int:
    prog, x = _program_and_input(args, cfg)
    sim_cfg = simulator.SimConfig(row_mode=cfg.row_mode)
    if args.reference and not args.check:
        out = golden.run_program(prog, x)
        trace = None
    else:
        out, trace = simulator.run_program(prog, x, _sim_arch(prog, cfg), sim_cfg)
    if args.trace and trace is not None:
        n = simulator.write_trace(args.trace, trace)
        print(f"# trace {args.trace}: {trace.total_cycles} cycles, {n} bytes", file=sys.stderr)
    if args.output:
        save_tensor(args.output, PackedTritTensor.from_array(out))
    if args.check:
        ref = golden.run_program(prog, x)
        diff = np.argwhere(ref != out)
        if diff.size:
            idx = tuple(int(i) for i in diff[0])
            print(f"MISMATCH at {idx}: simulator {int(out[idx])}, reference {int(ref[idx])}")
            return EXIT_MISMATCH
        print("MATCH")
    elif not args.output:
        print(" ".join(str(int(v)) for v in out.reshape(-1)))
    return EXIT_OK


def cmd_encode(args, cfg: RunConfig) -> int:
    src = Path(args.raw)
    if not src.exists():
        raise UsageError(f"raw input {src} does not exist")
    if src.suffix == ".npy":
        raw = np.load(src)
    elif src.suffix == ".cttensor":
        raw = np.asarray(load_tensor(src))
    else:
        raw = np.loadtxt(src, dtype=np.int64, ndmin=1)
    raw = np.asarray(raw)
    if raw.dtype.kind == "f":
        if not np.all(raw == np.round(raw)):
            raise UsageError("raw pixels must be integers")
        raw = raw.astype(np.int64)
    if raw.ndim == 1:
        raw = raw.reshape(1, 1, -1)
    elif raw.ndim == 2:
        raw = raw[..., None]
    if args.from_8bit:
        if raw.min() < 0 or raw.max() > 255:
            raise UsageError("8-bit pixels must lie in [0, 255]")
        levels = 2 * args.m if args.kind == "ternary" else args.m
        raw = np.round(raw * levels / 255).astype(np.int64)
    t = encode_pixels(raw, args.m, args.kind)
    if args.channels and args.channels > t.shape[2]:
        pad = np.zeros((*t.shape[:2], args.channels - t.shape[2]), dtype=np.int8)
        t = np.concatenate([t, pad], axis=2)
    if args.output:
        save_tensor(args.output, PackedTritTensor.from_array(t))
    else:
        print(" ".join(str(int(v)) for v in t.reshape(-1)))
    return EXIT_OK


def cmd_report(args, cfg: RunConfig) -> int:
    from . import plotting

    if not (args.activity or args.energy):
        args.activity = args.energy = True
    prog, x = _program_and_input(args, cfg)
    _, trace = simulator.run_program(prog, x, _sim_arch(prog, cfg),
                                     simulator.SimConfig(row_mode=cfg.row_mode))
    tables = {}
    stats = [activity.count_toggles(trace, "unrolled")]
    if args.iterative:
        stats.append(activity.count_toggles(trace, "iterative", args.iterative))
    if args.activity:
        tables["activity"] = [{
            "mode": s.label,
            "multiplier_bits": s.multiplier_bits,
            "adder_bits": s.adder_bits,
            "multiplier_toggle_prob": s.multiplier_toggle_prob,
            "adder_input_toggle_prob": s.adder_input_toggle_prob,
        } for s in stats]
        if (p := _plot_path(args, "activity")):
            plotting.plot_toggles(stats, p)
    if args.energy:
        cost = activity.load_cost(cfg.cost_model)
        rep = activity.energy_estimate(trace, cost, stats[0], include_io=args.include_io)
        reports = [rep]
        cyc = {lt.index: lt.exec_cycles for lt in trace.layers}
        ops = {i: ins.ops for i, ins in enumerate(prog.instrs)}
        rows = []
        for r in rep.rows():
            layer = r["layer"]
            extra = ({"cycles": cyc[layer], "ops": ops[layer]} if layer != "total"
                     else {"cycles": sum(cyc.values()), "ops": sum(ops.values())})
            rows.append({"layer": layer, **extra, **{k: v for k, v in r.items() if k != "layer"}})
        tables["energy"] = rows
        if args.binary_discount:
            disc = activity.binary_discount(rep)
            reports.append(disc)
            tables["energy_binary_discount"] = disc.rows()
        if (p := _plot_path(args, "energy")):
            plotting.plot_energy(reports, p)
    _emit_tables(tables, args.output_dir)
    return EXIT_OK


def cmd_tiling(args, cfg: RunConfig) -> int:
    from . import plotting

    arch = cfg.arch
    cost = activity.load_cost(cfg.cost_model)
    strategies = STRATEGIES if args.strategy == "both" else (args.strategy,)
    tile = args.tile or (arch.fm_height, arch.fm_width)
    rows = []
    for fm in args.fm:
        if len(fm) == 1:
            fm = (fm[0], fm[0])
        for s in strategies:
            plan = TilingPlan(tuple(fm), tuple(tile), args.layers, s)
            try:
                rows.append(tiling_transfer(plan, arch, cost).as_dict())
            except CapacityError as e:
                raise UsageError(str(e)) from None
    tables = {"tiling": rows}
    _emit_tables(tables, args.output_dir)
    if (p := _plot_path(args, "tiling")):
        plotting.plot_tiling(rows, p)
    return EXIT_OK


def cmd_quantize(args, cfg: RunConfig) -> int:
    from . import plotting

    try:
        strategies = [QuantStrategy.parse(s) for s in args.strategy.split(",")]
        schedule = QuantSchedule.parse(args.schedule) if args.schedule else DEFAULT_SCHEDULE
    except ValueError as e:
        raise UsageError(str(e)) from None
    tensors = []
    for p in args.weights:
        if not Path(p).exists():
            raise UsageError(f"weights file {p} does not exist")
        tensors.append((Path(p).name, np.asarray(load_tensor(p), dtype=np.float64)))
    if args.gaussian:
        rng = np.random.default_rng(cfg.seed)
        for i in range(args.layers):
            tensors.append((f"gaussian{i}", rng.normal(size=args.gaussian)))
    if not tensors:
        raise UsageError("quantize needs weight tensors or --gaussian")
    rows = []
    out_dir = Path(args.output_dir) if args.output_dir else None
    for name, w in tensors:
        for strat in strategies:
            trits, steps = quantize_incremental(w, strat, schedule, args.delta)
            rows += [{"layer": name, "strategy": strat.value, "step": s.step, "sparsity": s.sparsity}
                     for s in steps]
            if out_dir:
                out_dir.mkdir(parents=True, exist_ok=True)
                stem = name.split(".")[0]
                save_tensor(out_dir / f"{stem}.{strat.value}.cttensor", PackedTritTensor.from_array(trits))
    _emit_tables({"quantize": rows}, args.output_dir)
    if (p := _plot_path(args, "quantize")):
        plotting.plot_quantization(rows, p)
    return EXIT_OK


# -- parser -----------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration (flags > --config file > defaults)")
    g.add_argument("--config", help="key = value file with arch parameters, cost_model, seed, row_mode")
    g.add_argument("--seed", type=int)
    g.add_argument("--cost-model", dest="cost_model", help="cost file (default: $CUTIE_COST_MODEL, then shipped)")
    g.add_argument("--row-mode", dest="row_mode", choices=("stall", "hide"))
    for key in ARCH_KEYS:
        g.add_argument("--" + key.replace("_", "-"), dest=key, type=int)


def _add_outputs(p: argparse.ArgumentParser) -> None:
    p.add_argument("--output-dir", help="write CSV tables (and figures) here instead of stdout")
    p.add_argument("--plot", action="store_true", help="render matplotlib figures next to the CSV")
    p.add_argument("--plot-format", default="png", choices=("png", "pdf", "svg"))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cutiesim", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compile", help="lower a network manifest to a program")
    p.add_argument("network", nargs="?", help=".ctnet manifest")
    p.add_argument("-o", "--output", help=".ctprog output")
    p.add_argument("--cifar10", action="store_true", help="use the built-in CIFAR-10 topology with random weights")
    p.add_argument("--write-manifest", help="with --cifar10, also save its manifest")
    p.add_argument("--dump-thresholds", help="write per-channel thresholds as CSV")
    _add_common(p)
    p.set_defaults(func=cmd_compile)

    p = sub.add_parser("run", help="simulate a program on an input tensor")
    p.add_argument("program")
    p.add_argument("input", nargs="?", help=".cttensor input (random trits from --seed when omitted)")
    p.add_argument("-o", "--output", help="write the output tensor")
    p.add_argument("--trace", help="write the per-cycle trace file")
    p.add_argument("--reference", action="store_true", help="use the golden model instead of the simulator")
    p.add_argument("--check", action="store_true", help="run both and compare")
    _add_common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("encode", help="thermometer-encode integer pixels")
    p.add_argument("raw", help=".npy, .cttensor or whitespace-separated integers")
    p.add_argument("--kind", choices=("binary", "ternary"), default="ternary")
    p.add_argument("-m", type=int, default=42, help="thermometer length per input channel")
    p.add_argument("--channels", type=int, help="zero-fill up to this many channels")
    p.add_argument("--from-8bit", action="store_true", help="rescale 0..255 pixels to the code's range first")
    p.add_argument("-o", "--output", help=".cttensor output")
    _add_common(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("report", help="activity and energy report of a simulated run")
    p.add_argument("program")
    p.add_argument("input", nargs="?")
    p.add_argument("--activity", action="store_true")
    p.add_argument("--energy", action="store_true")
    p.add_argument("--iterative", type=int, metavar="N", help="add an iterative(N) comparison row")
    p.add_argument("--binary-discount", action="store_true")
    p.add_argument("--include-io", action="store_true", help="charge network input/output at the DRAM rate")
    _add_outputs(p)
    _add_common(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("tiling", help="external transfer model for large feature maps")
    p.add_argument("--fm", type=_dims, nargs="+", default=[(32, 32), (64, 64), (96, 96)])
    p.add_argument("--tile", type=_dims, help="tile dims (default: the arch's feature-map memory)")
    p.add_argument("--layers", type=int, default=8)
    p.add_argument("--strategy", choices=(*STRATEGIES, "both"), default="both")
    _add_outputs(p)
    _add_common(p)
    p.set_defaults(func=cmd_tiling)

    p = sub.add_parser("quantize", help="incremental ternary quantization")
    p.add_argument("weights", nargs="*", help="real-valued .cttensor weight files")
    p.add_argument("--strategy", default="magnitude_inverse", help="comma-separated strategies")
    p.add_argument("--schedule", help="cumulative fractions, e.g. 0.2,0.4,0.6,0.7,0.8,0.9,0.95,1.0")
    p.add_argument("--delta", type=float, default=DEFAULT_DELTA)
    p.add_argument("--gaussian", type=_dims, help="quantize random N(0,1) tensors of this shape")
    p.add_argument("--layers", type=int, default=1, help="number of --gaussian tensors")
    _add_outputs(p)
    _add_common(p)
    p.set_defaults(func=cmd_quantize)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return args.func(args, cfg)
    except (UsageError, EncodingRange, ValidationError, QueueOverflow, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except CapacityError as e:
        print(f"capacity error: {e}", file=sys.stderr)
        return EXIT_CAPACITY
    except (CutieError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
