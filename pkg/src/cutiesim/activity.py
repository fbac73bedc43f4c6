"""Switching activity of simulated runs and the energy estimate built on it.

Toggle counts are taken at two groups of datapath nodes per output channel
compute unit (OCU):

* multiplier inputs: the feature trit and the weight trit, 2 bits each in the
  two's-complement memory encoding (0 -> 00, +1 -> 01, -1 -> 11);
* adder-tree inputs: the 2-bit product code (+1 -> 10, -1 -> 01, 0 -> 00).

The Hamming distance between product codes of trits x, y is |x - y|, and for
x, y in {-1, 0, 1} that equals x^2 + y^2 - x^2 y^2 - x y. Summed over all units
this turns into dot products with per-position weight statistics, so counting
never materialises the (cycles x units x positions) product tensor.
"""
from __future__ import annotations

import math
import os
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import EmptyTrace, Undefined
from .network import ArchConfig
from .simulator import LayerTrace, SimTrace
from .trits import BITS_PER_TRIT

MULT_BITS_PER_NODE = 4   # feature + weight operand, 2 bits each
ADDER_BITS_PER_NODE = 2


def twos_complement_distance(a, b) -> np.ndarray:
    """Elementwise bit distance between trits under the 00/01/11 encoding."""
    a = np.asarray(a, dtype=np.int8)
    b = np.asarray(b, dtype=np.int8)
    return ((a != 0) ^ (b != 0)).astype(np.int64) + ((a < 0) ^ (b < 0))


def product_code_distance(a, b) -> np.ndarray:
    return np.abs(np.asarray(a, dtype=np.int64) - np.asarray(b, dtype=np.int64))


# -- Hamming statistics -----------------------------------------------------------

def hamming_stats(stream) -> float:
    """Mean bit distance between consecutive pixels of a feature stream.

    ``stream`` is (N, C) pixels in stream order or an (H, W, C) map read
    row-major. Each pixel word carries 2 bits per channel in the product
    code, so a sign flip costs 2 bits and a change to or from 0 costs 1.
    """
    arr = np.asarray(stream, dtype=np.int8)
    if arr.ndim == 3:
        arr = arr.reshape(-1, arr.shape[2])
    if arr.ndim != 2:
        raise ValueError("expected an (N, C) pixel stream or an (H, W, C) map")
    if arr.shape[0] < 2:
        raise Undefined("Hamming distance needs at least two pixels")
    return float(product_code_distance(arr[1:], arr[:-1]).sum(axis=1).mean())


def expected_resample_distance(zero_fraction: float) -> float:
    """Expected per-channel product-code distance between two independent trits.

    Non-zero trits are equally likely to be +1 or -1.
    """
    z = zero_fraction
    p = (1.0 - z) / 2
    probs = {0: z, 1: p, -1: p}
    return sum(pa * pb * abs(a - b)
               for a, pa in probs.items() for b, pb in probs.items())


def synthetic_feature_map(rng: np.random.Generator, shape, hamming: float,
                          zero_fraction: float) -> np.ndarray:
    """Random (H, W, C) trit map whose row-major pixel stream has mean
    Hamming distance ``hamming`` (bits per 2C-bit word) in expectation.

    Each channel follows a Markov chain along the row-major stream: with
    probability q it is redrawn from the marginal (zero with probability
    ``zero_fraction``), otherwise it repeats. q is solved from the target.
    """
    h, w, c = shape
    per_draw = c * expected_resample_distance(zero_fraction)
    if per_draw == 0:
        raise ValueError("an all-zero marginal cannot reach a nonzero Hamming target")
    q = hamming / per_draw
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"target {hamming} bits is out of reach for {c} channels "
                         f"with zero fraction {zero_fraction}")
    n = h * w
    p = (1.0 - zero_fraction) / 2
    draws = rng.choice(np.array([0, 1, -1], dtype=np.int8), size=(n, c),
                       p=[zero_fraction, p, p])
    redraw = rng.random((n, c)) < q
    redraw[0] = True
    # index of the most recent redraw at or before each step
    src = np.where(redraw, np.arange(n)[:, None], 0)
    np.maximum.accumulate(src, axis=0, out=src)
    stream = np.take_along_axis(draws, src, axis=0)
    return stream.reshape(h, w, c)


# -- toggle counting --------------------------------------------------------------

@dataclass
class LayerToggles:
    layer: int
    units: int
    positions: int          # datapath width per unit (trits)
    transitions: int
    multiplier_bits: int
    adder_bits: int

    @property
    def multiplier_nodes(self) -> int:
        return self.units * self.positions * MULT_BITS_PER_NODE

    @property
    def adder_nodes(self) -> int:
        return self.units * self.positions * ADDER_BITS_PER_NODE

    @property
    def multiplier_toggle_prob(self) -> float:
        denom = self.multiplier_nodes * self.transitions
        return self.multiplier_bits / denom if denom else 0.0

    @property
    def adder_input_toggle_prob(self) -> float:
        denom = self.adder_nodes * self.transitions
        return self.adder_bits / denom if denom else 0.0


@dataclass
class ToggleStats:
    mode: str
    factor: int
    layers: list[LayerToggles] = field(default_factory=list)

    @property
    def multiplier_bits(self) -> int:
        return sum(lt.multiplier_bits for lt in self.layers)

    @property
    def adder_bits(self) -> int:
        return sum(lt.adder_bits for lt in self.layers)

    @property
    def multiplier_toggle_prob(self) -> float:
        denom = sum(lt.multiplier_nodes * lt.transitions for lt in self.layers)
        return self.multiplier_bits / denom if denom else 0.0

    @property
    def adder_input_toggle_prob(self) -> float:
        denom = sum(lt.adder_nodes * lt.transitions for lt in self.layers)
        return self.adder_bits / denom if denom else 0.0

    @property
    def label(self) -> str:
        return "unrolled" if self.mode == "unrolled" else f"iterative({self.factor})"


def parse_mode(text: str) -> tuple[str, int]:
    """``unrolled``, ``iterative`` or ``iterative(f)`` -> (mode, factor)."""
    m = re.fullmatch(r"\s*(unrolled|iterative)\s*(?:\(\s*(\d+)\s*\))?\s*", text.lower())
    if not m:
        raise ValueError(f"unknown toggle mode {text!r}")
    if m.group(1) == "unrolled":
        return "unrolled", 1
    return "iterative", int(m.group(2) or 2)


def _channel_tiles(a: np.ndarray, arch: ArchConfig, factor: int) -> np.ndarray:
    """Split the trailing window axis into ``factor`` input-channel tiles.

    (..., K*K*N_I) -> (factor, ..., K*K*N_I/factor)
    """
    k2 = arch.kernel * arch.kernel
    n_i = arch.in_channels
    if n_i % factor:
        raise ValueError(f"{n_i} input channels do not split into {factor} tiles")
    lead = a.shape[:-1]
    t = a.reshape(*lead, k2, factor, n_i // factor)
    t = np.moveaxis(t, -2, 0)
    return t.reshape(factor, *lead, k2 * (n_i // factor))


def layer_toggles(lt: LayerTrace, arch: ArchConfig, factor: int = 1) -> LayerToggles:
    """Toggle counts of one layer; ``factor`` 1 is the unrolled datapath.

    With ``factor`` f > 1 each window is replayed as f sub-cycles that feed
    input-channel tile j (features and weights) to a datapath 1/f as wide,
    cycling j = 0..f-1.
    """
    units = lt.active_stages * arch.word_trits
    w = lt.weights[:units].astype(np.int64)
    feats = lt.windows.astype(np.int64)
    if factor == 1:
        wt = w[None]
        ft = feats[None]
    else:
        wt = _channel_tiles(w, arch, factor)          # (f, U, m)
        ft = _channel_tiles(feats, arch, factor)      # (f, n, m)
    f, n, m = ft.shape
    seq = np.moveaxis(ft, 0, 1).reshape(n * f, m)     # sub-cycle order
    tile_of = np.tile(np.arange(f), n)
    transitions = n * f - 1

    sq = wt * wt
    nnz = sq.sum(axis=1)                              # (f, m)
    cur, prev = seq[1:], seq[:-1]
    j_cur, j_prev = tile_of[1:], tile_of[:-1]
    cur2, prev2 = cur * cur, prev * prev
    adder = 0
    mult_w = 0
    for jp in range(f):
        for jc in range(f):
            sel = (j_prev == jp) & (j_cur == jc)
            cnt = int(sel.sum())
            if not cnt:
                continue
            m1 = (wt[jc] * wt[jp]).sum(axis=0)
            m2 = (sq[jc] * sq[jp]).sum(axis=0)
            adder += int((cur2[sel] @ nnz[jc]).sum() + (prev2[sel] @ nnz[jp]).sum()
                         - ((cur2[sel] * prev2[sel]) @ m2).sum()
                         - ((cur[sel] * prev[sel]) @ m1).sum())
            if jp != jc:
                mult_w += cnt * int(twos_complement_distance(wt[jc], wt[jp]).sum())
    mult_f = int(twos_complement_distance(cur, prev).sum()) * units
    return LayerToggles(lt.index, units, m, max(transitions, 0), mult_f + mult_w, adder)


def count_toggles(trace: SimTrace, mode: str = "unrolled", factor: int = 2) -> ToggleStats:
    """Count toggles over a complete trace.

    ``mode`` is ``unrolled`` or ``iterative``; ``factor`` is the number of
    input-channel tiles of the iterative emulation. ``iterative(3)`` style
    strings are accepted too.
    """
    if "(" in mode:
        mode, factor = parse_mode(mode)
    elif mode not in ("unrolled", "iterative"):
        raise ValueError(f"unknown toggle mode {mode!r}")
    if not trace.layers or all(lt.n_windows == 0 for lt in trace.layers):
        raise EmptyTrace("trace holds no evaluated windows")
    f = 1 if mode == "unrolled" else int(factor)
    if f < 1:
        raise ValueError("decomposition factor must be at least 1")
    stats = ToggleStats(mode, f)
    for lt in trace.layers:
        if lt.n_windows:
            stats.layers.append(layer_toggles(lt, trace.arch, f))
    return stats


# -- energy -----------------------------------------------------------------------

@dataclass
class CostModel:
    """Energy constants in pJ. Calibrated, not first-principles."""
    dram_pj_per_bit: float = 20.0
    fm_mem_pj_per_bit: float = 0.0
    weight_mem_pj_per_bit: float = 0.0
    compute_pj_per_toggled_node: float = 0.0
    multiplier_pj_per_toggled_node: float = 0.0
    codec_pj_per_trit: float = 0.0
    static_pj_per_cycle: float = 0.0
    tiling_compute_pj_per_pixel: float = 0.0
    clock_mhz: float = 66.0

    def __post_init__(self):
        for f in fields(self):
            v = float(getattr(self, f.name))
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"cost constant {f.name} must be a non-negative number, got {v}")
            setattr(self, f.name, v)

    def scaled(self, **factors) -> "CostModel":
        kv = asdict(self)
        for k, s in factors.items():
            kv[k] *= s
        return CostModel(**kv)


COST_ENV = "CUTIE_COST_MODEL"
DEFAULT_COST_FILE = Path(__file__).with_name("data") / "default.cost"


def parse_cost_text(text: str) -> CostModel:
    known = {f.name for f in fields(CostModel)}
    kv = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ValueError(f"line {n}: unknown cost constant {key!r}")
        try:
            kv[key] = float(val)
        except ValueError:
            raise ValueError(f"line {n}: {val!r} is not a number") from None
    return CostModel(**kv)


def format_cost(cost: CostModel) -> str:
    return "".join(f"{k} = {v!r}\n" for k, v in asdict(cost).items())


def load_cost(path: Union[str, Path, None] = None) -> CostModel:
    """Load a cost file; falls back to $CUTIE_COST_MODEL, then the shipped file."""
    if path is None:
        path = os.environ.get(COST_ENV) or DEFAULT_COST_FILE
    return parse_cost_text(Path(path).read_text())


def save_cost(path, cost: CostModel) -> None:
    Path(path).write_text(format_cost(cost))


ITEMS = ("compute_multiplier", "compute_popcount", "fm_memory", "weight_memory",
         "codec", "io", "static")
MEMORY_ITEMS = ("fm_memory", "weight_memory")


@dataclass
class EnergyReport:
    """Per-layer energy items in pJ."""
    layers: list[dict] = field(default_factory=list)
    label: str = ""

    def layer_total(self, i: int) -> float:
        return sum(self.layers[i][k] for k in ITEMS)

    def item(self, name: str) -> float:
        return sum(row[name] for row in self.layers)

    @property
    def items(self) -> dict:
        return {k: self.item(k) for k in ITEMS}

    @property
    def total_pj(self) -> float:
        return sum(self.items[k] for k in ITEMS)

    @property
    def total_j(self) -> float:
        return self.total_pj * 1e-12

    def rows(self) -> list[dict]:
        out = []
        for i, row in enumerate(self.layers):
            out.append({"layer": row["layer"], **{k: row[k] for k in ITEMS},
                        "total": self.layer_total(i)})
        out.append({"layer": "total", **self.items, "total": self.total_pj})
        return out


def energy_estimate(trace: SimTrace, cost: CostModel, toggles: Optional[ToggleStats] = None,
                    include_io: bool = False) -> EnergyReport:
    """Itemised energy of a simulated run.

    Compute items are toggled bits times per-node constants (unrolled
    toggles unless ``toggles`` is given); memory items are accessed bits at
    1.6 bits per trit; ``io`` covers the network input and output crossing
    the chip boundary and is only counted with ``include_io``.
    """
    if toggles is None:
        toggles = count_toggles(trace, "unrolled")
    by_layer = {lt.layer: lt for lt in toggles.layers}
    arch = trace.arch
    report = EnergyReport(label=toggles.label)
    last = len(trace.layers) - 1
    for i, lt in enumerate(trace.layers):
        tg = by_layer.get(lt.index)
        mult = tg.multiplier_bits if tg else 0
        add = tg.adder_bits if tg else 0
        fm_trits = (int(lt.fm_read_words.sum()) + int(lt.fm_write_words.sum())) * arch.word_trits
        w_bits = lt.weight_load_bits
        io_bits = 0.0
        if include_io:
            io_bits = (trace.input_bits if i == 0 else 0.0) + (trace.output_bits if i == last else 0.0)
        report.layers.append({
            "layer": lt.index,
            "compute_multiplier": mult * cost.multiplier_pj_per_toggled_node,
            "compute_popcount": add * cost.compute_pj_per_toggled_node,
            "fm_memory": fm_trits * BITS_PER_TRIT * cost.fm_mem_pj_per_bit,
            "weight_memory": w_bits * cost.weight_mem_pj_per_bit,
            "codec": (fm_trits + w_bits / BITS_PER_TRIT) * cost.codec_pj_per_trit,
            "io": io_bits * cost.dram_pj_per_bit,
            "static": lt.exec_cycles * cost.static_pj_per_cycle,
        })
    return report


def binary_discount(report: EnergyReport) -> EnergyReport:
    """Binary-equivalent estimate of a run on ternary hardware.

    Memory items shrink by 1.6 (1 bit instead of 1.6 per value), popcount
    energy halves and the codec disappears.
    """
    out = EnergyReport(label=f"{report.label}+binary_discount" if report.label else "binary_discount")
    for row in report.layers:
        new = dict(row)
        for k in MEMORY_ITEMS:
            new[k] = row[k] / BITS_PER_TRIT
        new["compute_popcount"] = row["compute_popcount"] / 2
        new["codec"] = 0.0
        out.layers.append(new)
    return out


def efficiency_tops_per_w(ops: float, report: EnergyReport) -> float:
    """Op per pJ equals TOp/s/W."""
    return ops / report.total_pj if report.total_pj else math.inf


# -- synthetic workloads ------------------------------------------------------------

# Mean pixel-to-pixel distances (bits per 256-bit word) of real CIFAR-10 maps,
# and the zero fraction of ternary activations, used as calibration targets.
TERNARY_HAMMING = 33.0
BINARY_HAMMING = 44.0
TERNARY_ZERO_FRACTION = 0.663


def synthetic_layer_trace(rng: np.random.Generator, *, hamming: float, zero_fraction: float,
                          weight_sparsity: float, arch: Optional[ArchConfig] = None,
                          size: tuple[int, int] = (32, 32)) -> SimTrace:
    """Simulate one padded 3x3 N_I -> N_O layer on a calibrated synthetic map."""
    from .compiler import emit_program
    from .network import BatchNorm, LayerDesc, LayerKind, NetworkDesc, random_ternary
    from .simulator import run_program

    arch = arch or ArchConfig()
    k = arch.kernel
    c_in, c_out = arch.in_channels, arch.out_channels
    fm = synthetic_feature_map(rng, (*size, c_in), hamming, zero_fraction)
    w = random_ternary(rng, (c_out, k, k, c_in), weight_sparsity)
    bn = BatchNorm(np.ones(c_out), np.zeros(c_out), np.zeros(c_out),
                   np.full(c_out, max(1.0, k * k * c_in * (1 - weight_sparsity))), np.full(c_out, 1e-5))
    layer = LayerDesc(LayerKind.CONV, c_in, c_out, (k, k), (1, 1), True, w, bn, "Hardtanh")
    prog = emit_program(NetworkDesc((layer,), fm.shape), arch)
    _, trace = run_program(prog, fm)
    return trace
