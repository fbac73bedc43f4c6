"""Cycle-approximate model of the fully unrolled accelerator core.

Timing model (all constants are parameters of :class:`SimConfig`):

* A layer starts with one setup cycle (layer instruction pop).
* The tile buffer releases at most one window per cycle. Releasing a window
  needs every column that enters it to be loaded; one column load (up to K
  pixels, all words of a pixel in parallel across banks) takes one cycle. In
  steady state a window needs ``stride_w`` new columns, and the first window
  of each output row needs all of its valid columns (row priming). In
  ``"hide"`` mode row priming overlaps the previous row and costs nothing
  beyond the first row.
* Results leave the compute array ``stages + 1`` cycles after release (the
  broadcast pipeline plus the single-cycle unit), which is also the drain
  time at the end of a layer.
* Weights move into the idle bank of each unit at ``K * N_I`` trits per
  cycle. Layer ``k+1`` loads while layer ``k`` executes; only layer 0 pays
  its load time up front.

For the 32x32, 3x3, padded, stride-1 layer this gives 1024 windows + 31
row-priming stalls (the last row brings no new line) + 1 setup + 5 drain
(with 4 stages) = 1061 cycles, i.e. 3.6 % over the 1024 windows.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .compiler import POOL_AVG, POOL_MAX, POOL_NONE, CompiledProgram, LayerInstr
from .errors import CapacityError, ShapeError
from .network import ArchConfig
from .trits import BITS_PER_TRIT, PackedTritTensor, as_trits, pack_array, trit_mul


@dataclass(frozen=True)
class SimConfig:
    row_mode: str = "stall"
    weight_trits_per_cycle: Optional[int] = None

    def __post_init__(self):
        if self.row_mode not in ("stall", "hide"):
            raise ValueError("row_mode must be 'stall' or 'hide'")

    def latency(self, arch: ArchConfig) -> int:
        return arch.stages + 1

    def load_rate(self, arch: ArchConfig) -> int:
        return self.weight_trits_per_cycle or arch.kernel * arch.in_channels


# -- tile buffer --------------------------------------------------------------

@dataclass
class Window:
    trits: np.ndarray  # (K*K*N_I,) int8, order (kh, kw, ci)
    center: tuple[int, int]
    out_pos: tuple[int, int]
    column_loads: int
    pixels_read: int
    row_start: bool


class TileBuffer:
    """K-line sliding-window store over one layer's input feature map."""

    def __init__(self, arch: ArchConfig, instr: LayerInstr, fm: np.ndarray):
        k = arch.kernel
        self.arch = arch
        self.k = k
        if instr.dense:
            n = arch.window_trits
            flat = np.zeros(n, dtype=np.int8)
            src = np.asarray(fm, dtype=np.int8).reshape(-1)
            flat[: src.size] = src
            fm = flat.reshape(k, k, arch.in_channels)
            kernel, stride, padding = (k, k), (1, 1), False
        else:
            kernel, stride, padding = instr.kernel, instr.stride, instr.padding
        h, w, c = fm.shape
        if c > arch.in_channels:
            raise CapacityError(f"{c} input channels exceed {arch.in_channels}")
        self.fm = np.zeros((h, w, arch.in_channels), dtype=np.int8)
        self.fm[:, :, :c] = fm
        self.h, self.w = h, w
        self.stride = stride
        kh, kw = kernel
        if padding:
            r0, c0 = 0, 0
            self.rows = list(range(0, h, stride[0]))
            self.cols = list(range(0, w, stride[1]))
        else:
            r0, c0 = kh // 2, kw // 2
            self.rows = list(range(r0, h - kh // 2, stride[0]))
            self.cols = list(range(c0, w - kw // 2, stride[1]))
        self.lines: dict[int, np.ndarray] = {}
        self.loaded = np.zeros((h, w), dtype=bool)
        self._iter = ((i, j) for i in range(len(self.rows)) for j in range(len(self.cols)))
        self.words_per_pixel = -(-c // arch.word_trits) if c else 0

    @property
    def n_windows(self) -> int:
        return len(self.rows) * len(self.cols)

    def _span(self, center: int, limit: int) -> range:
        half = self.k // 2
        return range(max(center - half, 0), min(center + half + 1, limit))

    def next_window(self) -> Optional[Window]:
        """Release the next window in raster order, or None at the end of the layer."""
        try:
            i, j = next(self._iter)
        except StopIteration:
            return None
        r, c = self.rows[i], self.cols[j]
        rows = self._span(r, self.h)
        cols = self._span(c, self.w)
        for old in [x for x in self.lines if x not in rows]:
            del self.lines[old]
        for x in rows:
            self.lines.setdefault(x, np.zeros((self.w, self.arch.in_channels), dtype=np.int8))
        assert len(self.lines) <= self.k, "tile buffer holds at most K lines"
        loads = pixels = 0
        for cc in cols:
            need = [x for x in rows if not self.loaded[x, cc]]
            if need:
                loads += 1
                pixels += len(need)
                assert len(need) <= self.k
                for x in need:
                    self.lines[x][cc] = self.fm[x, cc]
                    self.loaded[x, cc] = True
        half = self.k // 2
        win = np.zeros((self.k, self.k, self.arch.in_channels), dtype=np.int8)
        for x in rows:
            line = self.lines[x]
            win[x - r + half, cols.start - c + half: cols.stop - c + half] = line[cols.start: cols.stop]
        return Window(win.reshape(-1), (r, c), (i, j), loads, pixels, j == 0)


# -- output channel compute units ------------------------------------------------

@dataclass
class OCUState:
    """One output channel compute unit: dual weight banks, thresholds, pooling."""

    banks: np.ndarray  # (2, K*K*N_I) int8
    active_bank: int = 0
    thresholds: tuple[int, int] = (0, 1)
    pool: Optional["PoolingUnit"] = None

    @classmethod
    def empty(cls, arch: ArchConfig) -> "OCUState":
        return cls(np.zeros((2, arch.window_trits), dtype=np.int8))

    @property
    def weights(self) -> np.ndarray:
        return self.banks[self.active_bank]

    @property
    def buffer_bits(self) -> int:
        return 2 * self.banks.size


def ocu_cycle(ocu: OCUState, window) -> tuple[int, Optional[int]]:
    """Evaluate one window on one unit, bit by bit through the product codes."""
    codes = [trit_mul(int(a), int(w)) for a, w in zip(window, ocu.weights)]
    msb = sum(p.msb for p in codes)
    lsb = sum(p.lsb for p in codes)
    value = msb - lsb
    if ocu.pool is not None:
        raise ValueError("pooling units are driven through pooling_update")
    lo, hi = ocu.thresholds
    return value, (1 if value >= hi else (-1 if value < lo else 0))


def popcount_planes(weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split ``(units, n)`` trit weights into +1 / -1 indicator planes."""
    return (weights == 1).astype(np.float32), (weights == -1).astype(np.float32)


def ocu_accumulate(planes, windows: np.ndarray) -> np.ndarray:
    """MSB-minus-LSB popcounts of every unit for a batch of windows.

    A product has its MSB set when activation and weight agree in sign and its
    LSB set when they differ; both counts are small integers, exact in float32.
    """
    wp, wn = planes
    ap = (windows == 1).astype(np.float32)
    an = (windows == -1).astype(np.float32)
    msb = ap @ wp.T + an @ wn.T
    lsb = an @ wp.T + ap @ wn.T
    return (np.rint(msb) - np.rint(lsb)).astype(np.int32)


def decide(values: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    return np.where(values >= thresholds[:, 1], 1, np.where(values < thresholds[:, 0], -1, 0)).astype(np.int8)


class PoolingUnit:
    """Register + FIFO + Add/Max ALU shared by the raster-ordered pooling windows.

    Vectorized over units: ``register`` and every FIFO entry are arrays.
    """

    def __init__(self, kind: str, size: tuple[int, int], fifo_depth: int, units: int = 1):
        if kind not in (POOL_MAX, POOL_AVG):
            raise ValueError(f"unknown pooling kind {kind!r}")
        self.kind = kind
        self.ph, self.pw = size
        self.fifo_depth = fifo_depth
        self.register = np.zeros(units, dtype=np.int64)
        self.fifo: deque = deque()
        self.max_fill = 0

    def _combine(self, a, b):
        return np.maximum(a, b) if self.kind == POOL_MAX else a + b

    def _push(self, v):
        if len(self.fifo) >= self.fifo_depth:
            raise CapacityError(f"pooling FIFO overflow (depth {self.fifo_depth})")
        self.fifo.append(v)
        self.max_fill = max(self.max_fill, len(self.fifo))


def pooling_update(pool: PoolingUnit, value, position: tuple[int, int]):
    """Feed one conv output at ``position`` = (row, col) of the conv map.

    Returns the completed pooled value when ``position`` is the last pixel of
    its pooling window, else None.
    """
    row, col = position
    band_row, win_col = row % pool.ph, col % pool.pw
    v = np.asarray(value, dtype=np.int64)
    pool.register = v.copy() if win_col == 0 else pool._combine(pool.register, v)
    if win_col != pool.pw - 1:
        return None
    if pool.ph == 1:
        return pool.register.copy()
    if band_row == 0:
        pool._push(pool.register.copy())
        return None
    partial = pool._combine(pool.fifo.popleft(), pool.register)
    if band_row < pool.ph - 1:
        pool._push(partial)
        return None
    return partial


# -- feature map memory ---------------------------------------------------------

class FeatureMapMemory:
    """Trit-only storage; writes are whole words of ``N_O / P`` trits."""

    def __init__(self, arch: ArchConfig, dims):
        self.arch = arch
        self.data = np.zeros(dims, dtype=np.int8)
        self.words_written = 0

    def write_pixel(self, pos, values: np.ndarray, words: int) -> None:
        if values.dtype != np.int8 or (values.size and (values.min() < -1 or values.max() > 1)):
            raise AssertionError("only trits may be written to feature-map memory")
        self.data[pos[0], pos[1], :] = values
        self.words_written += words


# -- trace ------------------------------------------------------------------------

@dataclass
class LayerTrace:
    index: int
    instr: LayerInstr
    weights: np.ndarray  # (N_O, K*K*N_I) int8, zero rows for unused units
    thresholds: np.ndarray
    active_stages: int
    load_start: int
    load_end: int
    exec_start: int
    exec_end: int
    release_cycles: np.ndarray
    windows: np.ndarray
    accumulators: np.ndarray
    emitted: np.ndarray
    pooled: np.ndarray
    outputs: np.ndarray
    write_cycles: np.ndarray
    fm_read_words: np.ndarray
    fm_write_words: np.ndarray
    weight_load_bits: float
    row_stalls: int
    fifo_peak: int = 0

    @property
    def n_windows(self) -> int:
        return len(self.release_cycles)

    @property
    def load_cycles(self) -> int:
        return self.load_end - self.load_start

    @property
    def exec_cycles(self) -> int:
        return self.exec_end - self.exec_start

    @property
    def last_write(self) -> int:
        return int(self.write_cycles.max())


@dataclass
class SimTrace:
    arch: ArchConfig
    config: SimConfig
    layers: list[LayerTrace] = field(default_factory=list)
    input_bits: float = 0.0
    output_bits: float = 0.0

    @property
    def total_cycles(self) -> int:
        return self.layers[-1].exec_end if self.layers else 0

    def exposed_load_cycles(self, k: int) -> int:
        """Weight-load cycles of layer ``k`` not hidden under layer ``k-1``."""
        lt = self.layers[k]
        if k == 0:
            return lt.load_cycles
        return max(0, lt.load_end - self.layers[k - 1].exec_end)

    def record_size(self) -> int:
        return trace_record_size(self.arch)


def trace_record_size(arch: ArchConfig) -> int:
    return 12 + -(-arch.window_trits // 5) + 4 * arch.out_channels + -(-arch.out_channels // 5)


# -- execution ------------------------------------------------------------------

def _check_capacity(prog: CompiledProgram, arch: ArchConfig) -> None:
    if len(prog.instrs) > arch.max_layers:
        raise CapacityError(f"{len(prog.instrs)} layers exceed the {arch.max_layers}-entry queue")
    pa = prog.arch
    if (pa.in_channels, pa.out_channels, pa.kernel) != (arch.in_channels, arch.out_channels, arch.kernel):
        raise CapacityError("program was compiled for a different datapath")
    for i, ins in enumerate(prog.instrs):
        h, w, c = ins.in_dims
        if not ins.dense and (h > arch.fm_height or w > arch.fm_width or c > arch.in_channels):
            raise CapacityError(f"layer {i} input {ins.in_dims} exceeds feature-map memory")
        if ins.out_ch > arch.out_channels:
            raise CapacityError(f"layer {i} needs {ins.out_ch} output channels")


def run_layer(arch: ArchConfig, config: SimConfig, ins: LayerInstr, weights: np.ndarray,
              thresholds: np.ndarray, fm: np.ndarray, exec_start: int, index: int = 0):
    """Execute one fused layer starting at ``exec_start`` (its setup cycle)."""
    n_o = arch.out_channels
    word = arch.word_trits
    stages = -(-ins.out_ch // word)
    units = stages * word

    bank = np.zeros((n_o, arch.window_trits), dtype=np.int8)
    bank[: ins.out_ch] = weights
    thr = np.zeros((n_o, 2), dtype=np.int64)
    thr[:, 1] = 1
    thr[: ins.out_ch] = thresholds

    tb = TileBuffer(arch, ins, fm)
    wins, cycles, reads, stalls = [], [], [], 0
    t = exec_start
    while (w := tb.next_window()) is not None:
        cost = max(1, w.column_loads)
        if config.row_mode == "hide" and w.row_start and w.out_pos[0] > 0:
            cost = 1
        stalls += cost - 1
        t += cost
        wins.append(w)
        cycles.append(t)
        reads.append(w.pixels_read * tb.words_per_pixel)
    windows = np.stack([w.trits for w in wins])

    acc = np.zeros((len(wins), n_o), dtype=np.int32)
    acc[:, :units] = ocu_accumulate(popcount_planes(bank[:units]), windows)

    latency = config.latency(arch)
    oh, ow = ins.conv_dims
    out = FeatureMapMemory(arch, ins.out_dims)
    emitted = np.zeros(len(wins), dtype=bool)
    pooled = np.zeros((len(wins), n_o), dtype=np.int64)
    outputs = np.zeros((len(wins), n_o), dtype=np.int8)
    write_cycles = np.full(len(wins), -1, dtype=np.int64)
    writes = np.zeros(len(wins), dtype=np.int64)
    pool = None
    if ins.pooling != POOL_NONE:
        pool = PoolingUnit(ins.pooling, ins.pool_size, -(-arch.fm_width // ins.pool_size[1]), n_o)
    for idx, w in enumerate(wins):
        value = acc[idx].astype(np.int64)
        pos = w.out_pos
        if pool is not None:
            value = pooling_update(pool, value, pos)
            if value is None:
                continue
            pos = (pos[0] // ins.pool_size[0], pos[1] // ins.pool_size[1])
        trits_out = decide(value, thr)
        trits_out[ins.out_ch:] = 0
        emitted[idx] = True
        pooled[idx] = value
        outputs[idx] = trits_out
        write_cycles[idx] = cycles[idx] + latency
        writes[idx] = stages
        out.write_pixel(pos, trits_out[: ins.out_ch], stages)
    exec_end = int(write_cycles.max()) + 1
    lt = LayerTrace(
        index=index, instr=ins, weights=bank, thresholds=thr, active_stages=stages,
        load_start=0, load_end=0, exec_start=exec_start, exec_end=exec_end,
        release_cycles=np.array(cycles, dtype=np.int64), windows=windows, accumulators=acc,
        emitted=emitted, pooled=pooled, outputs=outputs, write_cycles=write_cycles,
        fm_read_words=np.array(reads, dtype=np.int64), fm_write_words=writes,
        weight_load_bits=ins.out_ch * arch.window_trits * BITS_PER_TRIT, row_stalls=stalls,
        fifo_peak=pool.max_fill if pool is not None else 0,
    )
    return out.data, lt


def run_program(prog: CompiledProgram, x: Union[np.ndarray, PackedTritTensor],
                arch: Optional[ArchConfig] = None, config: Optional[SimConfig] = None):
    """Simulate ``prog`` on input ``x``; returns ``(output trits, SimTrace)``."""
    arch = arch or prog.arch
    config = config or SimConfig()
    _check_capacity(prog, arch)
    fm = x.to_array() if isinstance(x, PackedTritTensor) else as_trits(x)
    if fm.shape != tuple(prog.input_dims):
        raise ShapeError(f"program expects input {prog.input_dims}, got {fm.shape}")
    trace = SimTrace(arch, config, input_bits=fm.size * BITS_PER_TRIT)
    rate = config.load_rate(arch)
    load_start = 0
    prev_end = 0
    for i, ins in enumerate(prog.instrs):
        load_cycles = -(-ins.out_ch * arch.window_trits // rate)
        load_end = load_start + load_cycles
        exec_start = max(prev_end, load_end)
        fm, lt = run_layer(arch, config, ins, prog.layer_weights(i), prog.layer_thresholds(i),
                           fm, exec_start, i)
        lt.load_start, lt.load_end = load_start, load_end
        trace.layers.append(lt)
        load_start = exec_start  # the next layer fills the bank this one just released
        prev_end = lt.exec_end
    trace.output_bits = fm.size * BITS_PER_TRIT
    return fm, trace


def cycle_report(trace: SimTrace, layer: int) -> dict:
    lt = trace.layers[layer]
    arch = trace.arch
    ops = lt.instr.ops
    cycles = lt.exec_cycles
    peak = 2 * arch.window_trits * arch.out_channels
    return {
        "layer": layer,
        "windows": lt.n_windows,
        "cycles": cycles,
        "overhead": cycles - lt.n_windows,
        "row_stalls": lt.row_stalls,
        "load_cycles": lt.load_cycles,
        "exposed_load_cycles": trace.exposed_load_cycles(layer),
        "runtime": lt.last_write - lt.exec_start + 1,
        "ops": ops,
        "ops_per_cycle": ops / cycles,
        "utilization": ops / cycles / peak,
        "active_stages": lt.active_stages,
    }


# -- trace file -----------------------------------------------------------------

FLAG_WINDOW, FLAG_WRITE, FLAG_LOAD, FLAG_STALL = 1, 2, 4, 8


def encode_trace(trace: SimTrace) -> bytes:
    """One fixed-size little-endian record per simulated cycle.

    Record: u32 cycle, u8 layer (255 = none), u8 flags, u8 active stages, u8 0,
    u16 fm words read, u16 fm words written, packed window trits, N_O int32
    accumulators, packed output trits.
    """
    arch = trace.arch
    n = arch.window_trits
    n_o = arch.out_channels
    total = trace.total_cycles
    wbytes = -(-n // 5)
    obytes = -(-n_o // 5)
    dt = np.dtype([("cycle", "<u4"), ("layer", "u1"), ("flags", "u1"), ("stages", "u1"),
                   ("pad", "u1"), ("reads", "<u2"), ("writes", "<u2"),
                   ("window", "u1", (wbytes,)), ("acc", "<i4", (n_o,)), ("out", "u1", (obytes,))])
    assert dt.itemsize == trace_record_size(arch)
    rec = np.zeros(total, dtype=dt)
    rec["cycle"] = np.arange(total)
    rec["layer"] = 255
    zero_w = np.frombuffer(pack_array(np.zeros(n, np.int8)), np.uint8)
    zero_o = np.frombuffer(pack_array(np.zeros(n_o, np.int8)), np.uint8)
    rec["window"] = zero_w
    rec["out"] = zero_o
    for lt in trace.layers:
        sl = slice(lt.load_start, lt.load_end)
        rec["flags"][sl] |= FLAG_LOAD
        span = slice(lt.exec_start, lt.exec_end)
        rec["layer"][span] = lt.index
        rec["stages"][span] = lt.active_stages
        rec["flags"][span] |= FLAG_STALL
        rc = lt.release_cycles
        rec["flags"][rc] = (rec["flags"][rc] & (0xFF ^ FLAG_STALL)) | FLAG_WINDOW
        rec["reads"][rc] = lt.fm_read_words
        rec["acc"][rc] = lt.accumulators
        for c, win in zip(rc, lt.windows):
            rec["window"][c] = np.frombuffer(pack_array(win), np.uint8)
        for idx in np.flatnonzero(lt.emitted):
            c = lt.write_cycles[idx]
            rec["flags"][c] = (rec["flags"][c] & (0xFF ^ FLAG_STALL)) | FLAG_WRITE
            rec["writes"][c] = lt.fm_write_words[idx]
            rec["out"][c] = np.frombuffer(pack_array(lt.outputs[idx]), np.uint8)
        rec["flags"][lt.exec_start] &= 0xFF ^ FLAG_STALL
    return rec.tobytes()


def write_trace(path, trace: SimTrace) -> int:
    blob = encode_trace(trace)
    with open(path, "wb") as fh:
        fh.write(blob)
    return len(blob)
