"""Lower a :class:`NetworkDesc` to the accelerator's layer program.

Each conv (or dense) layer becomes one fused instruction: ternary weights,
an optional pooling stage, and a per-channel pair of integer thresholds that
replaces bias + batch norm + Hardtanh + ternarization.

Threshold decision rule for an integer pre-activation ``a``::

    +1  if a >= t_hi
    -1  if a <  t_lo
     0  otherwise

The float reference it reproduces is ``y = gamma * ((a + bias) - mean) /
sqrt(var + eps) + beta``, clipped to [-1, 1], mapped to +1 when ``y >= 0.5``,
-1 when ``y <= -0.5`` and 0 otherwise. For average pooling ``a`` is the mean
of the pooled accumulators, so the thresholds apply to the window sum.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .errors import (
    DegenerateChannel,
    FormatError,
    QueueOverflow,
    TruncatedPayload,
    UnsupportedGraph,
    ValidationError,
)
from .network import ArchConfig, BatchNorm, LayerDesc, LayerKind, NetworkDesc, op_count, validate
from .trits import PackedTritTensor, as_trits, unpack_array

POOL_NONE, POOL_MAX, POOL_AVG = "none", "max", "avg"
_POOL_CODES = {POOL_NONE: 0, POOL_MAX: 1, POOL_AVG: 2}


class ThresholdPair(NamedTuple):
    t_lo: int
    t_hi: int


@dataclass(frozen=True)
class LayerInstr:
    in_dims: tuple[int, int, int]
    out_ch: int
    kernel: tuple[int, int]
    stride: tuple[int, int] = (1, 1)
    padding: bool = False
    pooling: str = POOL_NONE
    pool_size: tuple[int, int] = (1, 1)
    dense: bool = False
    weight_base: int = 0
    threshold_base: int = 0

    @property
    def pool_area(self) -> int:
        return self.pool_size[0] * self.pool_size[1] if self.pooling != POOL_NONE else 1

    @property
    def conv_dims(self) -> tuple[int, int]:
        """Spatial extent of the convolution output (before pooling)."""
        if self.dense:
            return (1, 1)
        h, w, _ = self.in_dims
        kh, kw = self.kernel
        sh, sw = self.stride
        ph, pw = (kh // 2, kw // 2) if self.padding else (0, 0)
        return ((h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1)

    @property
    def out_dims(self) -> tuple[int, int, int]:
        oh, ow = self.conv_dims
        if self.pooling != POOL_NONE:
            oh, ow = oh // self.pool_size[0], ow // self.pool_size[1]
        return (oh, ow, self.out_ch)

    @property
    def ops(self) -> int:
        """Counted operations (2 per MAC) for the convolution or dense product."""
        if self.dense:
            h, w, c = self.in_dims
            return 2 * h * w * c * self.out_ch
        oh, ow = self.conv_dims
        return 2 * oh * ow * self.kernel[0] * self.kernel[1] * self.in_dims[2] * self.out_ch


@dataclass
class CompiledProgram:
    arch: ArchConfig
    instrs: tuple[LayerInstr, ...]
    thresholds: np.ndarray  # (n, 2) int64, rows are (t_lo, t_hi)
    weight_image: PackedTritTensor
    source_ops: tuple[int, ...] = ()

    @cached_property
    def _weights(self) -> np.ndarray:
        return self.weight_image.to_array().reshape(-1)

    def layer_weights(self, i: int) -> np.ndarray:
        """Weights of layer ``i`` as ``(out_ch, K*K*N_I)`` int8, window order (kh, kw, ci)."""
        ins = self.instrs[i]
        n = self.arch.window_trits
        w = self._weights[ins.weight_base: ins.weight_base + ins.out_ch * n]
        return w.reshape(ins.out_ch, n)

    def layer_thresholds(self, i: int) -> np.ndarray:
        ins = self.instrs[i]
        return self.thresholds[ins.threshold_base: ins.threshold_base + ins.out_ch]

    @property
    def input_dims(self) -> tuple[int, int, int]:
        return self.instrs[0].in_dims

    @property
    def output_dims(self) -> tuple[int, int, int]:
        return self.instrs[-1].out_dims

    @property
    def max_threshold_magnitude(self) -> int:
        return int(np.abs(self.thresholds).max()) if self.thresholds.size else 0


# -- threshold folding -------------------------------------------------------

def _bn_or_identity(layer: LayerDesc) -> BatchNorm:
    return layer.bn if layer.bn is not None else BatchNorm.identity(layer.out_ch)


def _bias(layer: LayerDesc) -> np.ndarray:
    return np.zeros(layer.out_ch) if layer.bias is None else np.asarray(layer.bias, dtype=np.float64)


def _decide(s: int, area: int, gamma: float, beta: float, mean: float, scale: float, bias: float) -> int:
    a = s / area
    y = gamma * ((a + bias) - mean) / scale + beta
    y = min(1.0, max(-1.0, y))
    if y >= 0.5:
        return 1
    if y <= -0.5:
        return -1
    return 0


def _first_at_least(target: int, guess: float, decide) -> int:
    """Smallest integer s with decide(s) >= target, searching from ``guess``."""
    s = math.ceil(guess) if math.isfinite(guess) else 0
    while decide(s) < target:
        s += 1
    while decide(s - 1) >= target:
        s -= 1
    return s


def threshold_boundaries(layer: LayerDesc) -> np.ndarray:
    """Real-valued pre-activation boundaries ``(x_lo, x_hi)`` per channel (gamma > 0)."""
    bn = _bn_or_identity(layer)
    off = bn.mean - _bias(layer)
    return np.stack([(-0.5 - bn.beta) * bn.scale / bn.gamma + off,
                     (0.5 - bn.beta) * bn.scale / bn.gamma + off], axis=1)


def fold_thresholds(layer: LayerDesc, pool_area: int = 1, acc_range: Optional[int] = None) -> list[ThresholdPair]:
    """Fold bias, batch norm, Hardtanh and ternarization into integer thresholds.

    ``pool_area`` > 1 yields thresholds on the sum of ``pool_area``
    accumulators (average pooling). ``acc_range`` bounds the reachable
    accumulator magnitude; thresholds beyond it are clamped, which does not
    change any reachable decision.
    """
    bn = _bn_or_identity(layer)
    bias = _bias(layer)
    if np.any(bn.gamma == 0):
        c = int(np.flatnonzero(bn.gamma == 0)[0])
        raise DegenerateChannel(f"channel {c} has gamma == 0; its output is constant")
    if np.any(bn.gamma < 0):
        raise ValueError("negative gamma; run normalize_gamma_sign first")
    bounds = threshold_boundaries(layer) * pool_area
    pairs = []
    for c in range(layer.out_ch):
        args = (pool_area, float(bn.gamma[c]), float(bn.beta[c]), float(bn.mean[c]),
                float(bn.scale[c]), float(bias[c]))

        def decide(s, args=args):
            return _decide(s, *args)

        t_lo = _first_at_least(0, bounds[c, 0], decide)
        t_hi = _first_at_least(1, bounds[c, 1], decide)
        if acc_range is not None:
            t_lo = min(max(t_lo, -acc_range), acc_range + 1)
            t_hi = min(max(t_hi, -acc_range), acc_range + 1)
        pairs.append(ThresholdPair(t_lo, t_hi))
    return pairs


def normalize_gamma_sign(layer: LayerDesc) -> LayerDesc:
    """Flip channels with negative gamma so every gamma is positive.

    Negating a channel's weights negates its accumulator; negating gamma,
    mean and bias alongside leaves the normalized output unchanged.
    """
    if layer.bn is None or not np.any(layer.bn.gamma < 0):
        return layer
    neg = layer.bn.gamma < 0
    sign = np.where(neg, -1.0, 1.0)
    bn = BatchNorm(layer.bn.gamma * sign, layer.bn.beta, layer.bn.mean * sign,
                   layer.bn.var, layer.bn.eps)
    w = np.array(layer.weights, copy=True)
    w[neg] = -w[neg]
    bias = None if layer.bias is None else np.asarray(layer.bias, dtype=np.float64) * sign
    return layer.replace(weights=w, bn=bn, bias=bias)


# -- graph lowering -----------------------------------------------------------

def fuse_pooling(instr: Optional[LayerInstr], pool: LayerDesc) -> LayerInstr:
    """Attach a pooling layer to the instruction of the conv it follows.

    Average-pooling thresholds must be folded with ``pool_area`` =
    ``instr.pool_area`` (see :func:`fold_thresholds`) since the pooling unit
    sums the window; max pooling leaves them unchanged.
    """
    if instr is None or instr.dense:
        raise UnsupportedGraph("pooling must directly follow a convolution")
    if instr.pooling != POOL_NONE:
        raise UnsupportedGraph("a convolution can absorb only one pooling layer")
    ph, pw = pool.kernel
    oh, ow = instr.conv_dims
    if ph > oh or pw > ow or oh % ph or ow % pw:
        raise UnsupportedGraph(f"{ph}x{pw} pooling does not tile a {oh}x{ow} map")
    kind = POOL_MAX if pool.kind is LayerKind.MAXPOOL else POOL_AVG
    return replace(instr, pooling=kind, pool_size=(ph, pw))


def lower_dense(fc: LayerDesc, arch: ArchConfig) -> LayerDesc:
    """Map a dense layer onto one full weight buffer.

    The flattened input (length ``n <= K*K*N_I``) is laid out as a
    ``K x K x N_I`` map and convolved once, without padding, by a full-size
    kernel; the result is a 1x1 map of ``out_ch`` channels.
    """
    cap = arch.window_trits
    if fc.in_ch > cap:
        raise UnsupportedGraph(f"dense input of {fc.in_ch} exceeds the {cap}-trit weight buffer")
    if fc.out_ch > arch.out_channels:
        raise UnsupportedGraph(f"dense output of {fc.out_ch} exceeds {arch.out_channels} channels")
    w = np.zeros((fc.out_ch, cap), dtype=np.int8)
    w[:, : fc.in_ch] = np.asarray(fc.weights)
    k = arch.kernel
    return fc.replace(kind=LayerKind.CONV, in_ch=arch.in_channels, kernel=(k, k), stride=(1, 1),
                      padding=False, weights=w.reshape(fc.out_ch, k, k, arch.in_channels))


def lower_depthwise(dw: LayerDesc) -> LayerDesc:
    """Expand a depthwise conv to a standard conv with one live channel per kernel."""
    if not dw.depthwise:
        return dw
    if dw.in_ch != dw.out_ch:
        raise UnsupportedGraph("depthwise lowering needs in_ch == out_ch")
    c = dw.out_ch
    src = np.asarray(dw.weights).reshape(c, *dw.kernel)
    w = np.zeros((c, *dw.kernel, c), dtype=np.int8)
    idx = np.arange(c)
    w[idx, :, :, idx] = src
    return dw.replace(weights=w, depthwise=False)


def embed_kernel(weights: np.ndarray, arch: ArchConfig) -> np.ndarray:
    """Place ``(out, kh, kw, ci)`` weights centered in ``(out, K, K, N_I)``, zero-filled."""
    out, kh, kw, ci = weights.shape
    k = arch.kernel
    full = np.zeros((out, k, k, arch.in_channels), dtype=np.int8)
    r0, c0 = (k - kh) // 2, (k - kw) // 2
    full[:, r0:r0 + kh, c0:c0 + kw, :ci] = weights
    return full


def emit_program(net: NetworkDesc, arch: ArchConfig) -> CompiledProgram:
    violations = validate(net, arch)
    if violations:
        raise ValidationError(violations)
    groups: list[tuple[LayerDesc, Optional[LayerDesc]]] = []
    for layer in net.layers:
        if layer.kind.is_pool:
            if not groups or groups[-1][1] is not None or groups[-1][0].kind is LayerKind.DENSE:
                raise UnsupportedGraph("pooling must directly follow a convolution")
            groups[-1] = (groups[-1][0], layer)
        else:
            groups.append((layer, None))
    if len(groups) > arch.max_layers:
        raise QueueOverflow(
            f"{len(groups)} fused layers exceed the {arch.max_layers}-entry layer queue; split the network"
        )

    instrs, thresholds, weights, ops = [], [], [], []
    dims = net.input_dims
    wbase = tbase = 0
    for layer, pool in groups:
        ops.append(op_count(layer, layer.output_dims(dims)))
        dense = layer.kind is LayerKind.DENSE
        lowered = lower_dense(layer, arch) if dense else lower_depthwise(layer)
        lowered = normalize_gamma_sign(lowered)
        instr = LayerInstr(
            in_dims=tuple(dims), out_ch=layer.out_ch, kernel=lowered.kernel,
            stride=lowered.stride, padding=lowered.padding, dense=dense,
            weight_base=wbase, threshold_base=tbase,
        )
        if pool is not None:
            instr = fuse_pooling(instr, pool)
        area = instr.pool_area if instr.pooling == POOL_AVG else 1
        thresholds += fold_thresholds(lowered, area, arch.window_trits * area)
        w = embed_kernel(as_trits(lowered.weights), arch).reshape(layer.out_ch, -1)
        weights.append(w.reshape(-1))
        instrs.append(instr)
        wbase += w.size
        tbase += layer.out_ch
        dims = instr.out_dims
    flat = np.concatenate(weights) if weights else np.zeros(0, dtype=np.int8)
    return CompiledProgram(
        arch=arch,
        instrs=tuple(instrs),
        thresholds=np.array(thresholds, dtype=np.int64).reshape(-1, 2),
        weight_image=PackedTritTensor.from_array(flat),
        source_ops=tuple(ops),
    )


# -- .ctprog container ----------------------------------------------------------

PROG_MAGIC = b"CTP1"
PROG_VERSION = 1
_HEADER = struct.Struct("<4sH8I3I")
_INSTR = struct.Struct("<4H9B3x2I")


def encode_program(prog: CompiledProgram) -> bytes:
    a = prog.arch
    n_w = prog.weight_image.count
    out = [_HEADER.pack(PROG_MAGIC, PROG_VERSION, a.in_channels, a.out_channels, a.kernel,
                        a.fm_width, a.fm_height, a.max_layers, a.stages, a.words_per_pixel,
                        len(prog.instrs), len(prog.thresholds), n_w)]
    for ins in prog.instrs:
        out.append(_INSTR.pack(*ins.in_dims, ins.out_ch, *ins.kernel, *ins.stride,
                               int(ins.padding), _POOL_CODES[ins.pooling], *ins.pool_size,
                               int(ins.dense), ins.weight_base, ins.threshold_base))
    t = prog.thresholds
    if t.size and (t.min() < -(2**31) or t.max() >= 2**31):
        raise FormatError("threshold does not fit int32")
    out.append(t.astype("<i4").tobytes())
    out.append(prog.weight_image.payload)
    return b"".join(out)


def decode_program(blob: bytes) -> CompiledProgram:
    if len(blob) < _HEADER.size or blob[:4] != PROG_MAGIC:
        raise FormatError("bad magic, not a .ctprog file")
    (_, version, n_i, n_o, k, fw, fh, ml, st, wpp, n_ins, n_thr, n_w) = _HEADER.unpack_from(blob)
    if version != PROG_VERSION:
        raise FormatError(f"unsupported program version {version}")
    arch = ArchConfig(n_i, n_o, k, fw, fh, ml, st, wpp)
    off = _HEADER.size
    need = off + n_ins * _INSTR.size + 8 * n_thr + -(-n_w // 5)
    if len(blob) < need:
        raise TruncatedPayload(f"program has {len(blob)} bytes, needs {need}")
    if len(blob) > need:
        raise FormatError("trailing bytes after program")
    codes = {v: k_ for k_, v in _POOL_CODES.items()}
    instrs = []
    for _ in range(n_ins):
        f = _INSTR.unpack_from(blob, off)
        off += _INSTR.size
        instrs.append(LayerInstr(in_dims=f[0:3], out_ch=f[3], kernel=f[4:6], stride=f[6:8],
                                 padding=bool(f[8]), pooling=codes[f[9]], pool_size=f[10:12],
                                 dense=bool(f[12]), weight_base=f[13], threshold_base=f[14]))
    thr = np.frombuffer(blob, dtype="<i4", count=2 * n_thr, offset=off).astype(np.int64).reshape(-1, 2)
    off += 8 * n_thr
    image = PackedTritTensor((n_w,), bytes(blob[off:]))
    unpack_array(image.payload, n_w)
    return CompiledProgram(arch, tuple(instrs), thr, image, tuple(i.ops for i in instrs))


def save_program(path, prog: CompiledProgram) -> None:
    Path(path).write_bytes(encode_program(prog))


def load_program(path) -> CompiledProgram:
    return decode_program(Path(path).read_bytes())
