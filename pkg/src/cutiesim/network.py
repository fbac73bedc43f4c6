"""Full-precision network descriptions and the accelerator parameters they target.

Two on-disk formats live here:

``.cttensor``
    ``b"CTT1"``, dtype code (u8: 0 packed trits, 1 float64, 2 int32), rank
    (u8), ``rank`` little-endian u32 extents, then the payload. Packed trits
    use the 5-per-byte codec from :mod:`cutiesim.trits`; scalars are
    little-endian. Data is row-major with channels innermost.

``.ctnet``
    Line-oriented ``key = value`` text. One ``[network]`` block followed by
    one ``[layer]`` block per layer. Tensor-valued fields name ``.cttensor``
    files relative to the manifest.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import trits
from .errors import (
    DimOverflow,
    FormatError,
    ManifestError,
    NotCounted,
    ShapeError,
    TruncatedPayload,
)
from .trits import PackedTritTensor


class LayerKind(str, Enum):
    CONV = "Conv2D"
    MAXPOOL = "MaxPool"
    AVGPOOL = "AvgPool"
    DENSE = "FullyConnected"

    @property
    def is_pool(self) -> bool:
        return self in (LayerKind.MAXPOOL, LayerKind.AVGPOOL)


ENCODERS = ("binary_thermometer", "ternary_thermometer", "raw_trits")


@dataclass(frozen=True)
class BatchNorm:
    """Per-output-channel batch-norm parameters (inference form)."""

    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: np.ndarray

    def __post_init__(self):
        n = np.atleast_1d(self.gamma).shape[0]
        for name in ("gamma", "beta", "mean", "var", "eps"):
            v = np.broadcast_to(np.asarray(getattr(self, name), dtype=np.float64), (n,))
            object.__setattr__(self, name, np.array(v))

    @classmethod
    def identity(cls, n: int) -> "BatchNorm":
        return cls(np.ones(n), np.zeros(n), np.zeros(n), np.ones(n), np.zeros(n))

    def __len__(self):
        return self.gamma.shape[0]

    @property
    def scale(self) -> np.ndarray:
        return np.sqrt(self.var + self.eps)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Normalize ``x`` whose last axis is the channel axis."""
        return self.gamma * (x - self.mean) / self.scale + self.beta

    def as_matrix(self) -> np.ndarray:
        return np.stack([self.gamma, self.beta, self.mean, self.var, self.eps])

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "BatchNorm":
        m = np.asarray(m, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != 5:
            raise ManifestError(f"batch-norm tensor must have shape (5, C), got {m.shape}")
        return cls(*m)


@dataclass(frozen=True)
class LayerDesc:
    """One layer of a full-precision network.

    Conv weights have shape ``(out_ch, kh, kw, in_ch)`` (``in_ch`` is 1 for
    depthwise layers); dense weights have shape ``(out_ch, in_ch)`` where
    ``in_ch`` is the flattened input size.
    """

    kind: LayerKind
    in_ch: int
    out_ch: int
    kernel: tuple[int, int] = (1, 1)
    stride: tuple[int, int] = (1, 1)
    padding: bool = False
    weights: Optional[np.ndarray] = None
    bn: Optional[BatchNorm] = None
    activation: Optional[str] = None
    bias: Optional[np.ndarray] = None
    depthwise: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind(self.kind))
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        object.__setattr__(self, "stride", tuple(int(s) for s in self.stride))
        if self.activation is not None and self.activation.lower() in ("none", ""):
            object.__setattr__(self, "activation", None)

    def replace(self, **changes) -> "LayerDesc":
        return replace(self, **changes)

    def output_dims(self, in_dims: Sequence[int]) -> tuple[int, int, int]:
        h, w, c = in_dims
        if self.kind is LayerKind.DENSE:
            return (1, 1, self.out_ch)
        kh, kw = self.kernel
        if self.kind.is_pool:
            if h % kh or w % kw:
                raise ShapeError(f"{h}x{w} map is not divisible by {kh}x{kw} pooling")
            return (h // kh, w // kw, c)
        sh, sw = self.stride
        ph, pw = (kh // 2, kw // 2) if self.padding else (0, 0)
        oh = (h + 2 * ph - kh) // sh + 1
        ow = (w + 2 * pw - kw) // sw + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"{kh}x{kw} kernel does not fit a {h}x{w} map without padding")
        return (oh, ow, self.out_ch)

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind is LayerKind.DENSE:
            return (self.out_ch, self.in_ch)
        return (self.out_ch, *self.kernel, 1 if self.depthwise else self.in_ch)


@dataclass(frozen=True)
class NetworkDesc:
    layers: tuple[LayerDesc, ...]
    input_dims: tuple[int, int, int]
    encoder: str = "raw_trits"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))

    def shapes(self) -> list[tuple[tuple[int, int, int], tuple[int, int, int]]]:
        """(input dims, output dims) of every layer; raises ShapeError on a break."""
        out = []
        dims = self.input_dims
        for i, layer in enumerate(self.layers):
            want = dims[0] * dims[1] * dims[2] if layer.kind is LayerKind.DENSE else dims[2]
            if not layer.kind.is_pool and layer.in_ch != want:
                raise ShapeError(f"layer {i}: expects {layer.in_ch} inputs, gets {want}")
            nxt = layer.output_dims(dims)
            out.append((dims, nxt))
            dims = nxt
        return out


@dataclass(frozen=True)
class ArchConfig:
    """Instantiation parameters of the accelerator.

    ``words_per_pixel`` defaults to the number of feature-map words needed for
    one full input pixel, i.e. ``ceil(in_channels / word_trits)``.
    """

    in_channels: int = 128
    out_channels: int = 128
    kernel: int = 3
    fm_width: int = 32
    fm_height: int = 32
    max_layers: int = 8
    stages: int = 4
    words_per_pixel: Optional[int] = None

    def __post_init__(self):
        if self.out_channels % self.stages:
            raise ValueError("out_channels must be divisible by the number of pipeline stages")
        if self.max_layers < 1:
            raise ValueError("max_layers must be at least 1")
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise ValueError("kernel must be a positive odd number")
        if self.words_per_pixel is None:
            object.__setattr__(self, "words_per_pixel", -(-self.in_channels // self.word_trits))

    @property
    def word_trits(self) -> int:
        return self.out_channels // self.stages

    @property
    def window_trits(self) -> int:
        return self.kernel * self.kernel * self.in_channels

    @property
    def weight_buffer_bits(self) -> int:
        """Per-compute-unit weight storage: two banks of 2-bit trits."""
        return 4 * self.window_trits


@dataclass(frozen=True)
class Violation:
    layer: Optional[int]
    constraint: str
    detail: str = ""

    def __str__(self):
        where = "network" if self.layer is None else f"layer {self.layer}"
        return f"{where}: {self.constraint}" + (f" ({self.detail})" if self.detail else "")


def validate(net: NetworkDesc, arch: ArchConfig) -> list[Violation]:
    """List every reason ``net`` cannot be mapped onto ``arch`` (empty if it can).

    Queue depth is not checked here; :func:`cutiesim.compiler.emit_program`
    raises QueueOverflow for that.
    """
    v: list[Violation] = []
    h, w, c = net.input_dims
    if net.encoder not in ENCODERS:
        v.append(Violation(None, "unknown encoder", net.encoder))
    if h > arch.fm_height or w > arch.fm_width:
        v.append(Violation(None, "input exceeds feature-map memory", f"{h}x{w}"))
    if c > arch.in_channels:
        v.append(Violation(None, "input channels exceed N_I", str(c)))
    dims = (h, w, c)
    prev_kind = None
    for i, layer in enumerate(net.layers):
        kh, kw = layer.kernel
        if layer.kind is LayerKind.CONV:
            if kh != kw or kh % 2 == 0:
                v.append(Violation(i, "kernel must be odd and square", f"{kh}x{kw}"))
            if max(kh, kw) > arch.kernel:
                v.append(Violation(i, "kernel exceeds K", f"{kh}x{kw} > {arch.kernel}"))
            if not all(1 <= s <= 3 for s in layer.stride):
                v.append(Violation(i, "stride outside [1, 3]", str(layer.stride)))
            if layer.depthwise and layer.in_ch != layer.out_ch:
                v.append(Violation(i, "depthwise layer needs in_ch == out_ch"))
        if layer.kind is LayerKind.DENSE:
            if layer.in_ch > arch.window_trits:
                v.append(Violation(i, "dense input exceeds weight buffer", f"{layer.in_ch} > {arch.window_trits}"))
        elif layer.in_ch > arch.in_channels and not layer.kind.is_pool:
            v.append(Violation(i, "in_ch exceeds N_I", f"{layer.in_ch} > {arch.in_channels}"))
        if layer.out_ch > arch.out_channels and not layer.kind.is_pool:
            v.append(Violation(i, "out_ch exceeds N_O", f"{layer.out_ch} > {arch.out_channels}"))
        if layer.kind.is_pool:
            if prev_kind is not LayerKind.CONV:
                v.append(Violation(i, "pooling must directly follow a convolution"))
        elif layer.weights is None:
            v.append(Violation(i, "missing weights"))
        else:
            if tuple(np.shape(layer.weights)) != layer.weight_shape:
                v.append(Violation(i, "weight shape mismatch", f"{np.shape(layer.weights)} != {layer.weight_shape}"))
            wv = np.asarray(layer.weights)
            if wv.size and not np.all(np.isin(wv, (-1, 0, 1))):
                v.append(Violation(i, "weights are not ternary"))
        if layer.bn is not None and len(layer.bn) != layer.out_ch:
            v.append(Violation(i, "batch-norm size mismatch"))
        want = dims[0] * dims[1] * dims[2] if layer.kind is LayerKind.DENSE else dims[2]
        if not layer.kind.is_pool and layer.in_ch != want:
            v.append(Violation(i, "channel chaining broken", f"expects {layer.in_ch}, gets {want}"))
        try:
            dims = layer.output_dims(dims)
        except ShapeError as exc:
            v.append(Violation(i, "spatial chaining broken", str(exc)))
            break
        if layer.kind is not LayerKind.DENSE and (dims[0] > arch.fm_height or dims[1] > arch.fm_width):
            v.append(Violation(i, "output exceeds feature-map memory"))
        prev_kind = layer.kind
    return v


def op_count(layer: LayerDesc, out_dims: Sequence[int]) -> int:
    """Multiply and add count of a conv or dense layer (2 per MAC)."""
    if layer.kind is LayerKind.DENSE:
        return 2 * layer.in_ch * layer.out_ch
    if layer.kind is not LayerKind.CONV:
        raise NotCounted(f"{layer.kind.value} layers carry no counted operations")
    oh, ow = out_dims[0], out_dims[1]
    kh, kw = layer.kernel
    fan_in = 1 if layer.depthwise else layer.in_ch
    return 2 * oh * ow * kh * kw * fan_in * layer.out_ch


# -- tensor container -------------------------------------------------------

MAGIC = b"CTT1"
DTYPE_PACKED, DTYPE_REAL64, DTYPE_INT32 = 0, 1, 2
_MAX_ELEMENTS = 1 << 40

Tensor = Union[PackedTritTensor, np.ndarray]


def encode_tensor(tensor: Tensor) -> bytes:
    if isinstance(tensor, PackedTritTensor):
        code, dims, payload = DTYPE_PACKED, tensor.dims, tensor.payload
    else:
        arr = np.asarray(tensor)
        dims = arr.shape
        if arr.dtype.kind == "f":
            code, payload = DTYPE_REAL64, arr.astype("<f8").tobytes()
        elif arr.dtype.kind in "iub":
            if arr.size and (arr.min() < -(2**31) or arr.max() >= 2**31):
                raise DimOverflow("integer values do not fit int32")
            code, payload = DTYPE_INT32, arr.astype("<i4").tobytes()
        else:
            raise FormatError(f"unsupported dtype {arr.dtype}")
    if len(dims) > 255:
        raise DimOverflow("rank above 255")
    if any(d >= 2**32 or d < 0 for d in dims):
        raise DimOverflow("extent does not fit u32")
    head = MAGIC + struct.pack("<BB", code, len(dims)) + struct.pack(f"<{len(dims)}I", *dims)
    return head + payload


def decode_tensor(blob: bytes) -> Tensor:
    if len(blob) < 6 or blob[:4] != MAGIC:
        raise FormatError("bad magic, not a .cttensor file")
    code, rank = struct.unpack_from("<BB", blob, 4)
    off = 6 + 4 * rank
    if len(blob) < off:
        raise TruncatedPayload("header truncated")
    dims = struct.unpack_from(f"<{rank}I", blob, 6)
    count = math.prod(dims)
    if count > _MAX_ELEMENTS:
        raise DimOverflow(f"tensor of {count} elements is too large")
    if code == DTYPE_PACKED:
        need = -(-count // trits.TRITS_PER_BYTE)
    elif code == DTYPE_REAL64:
        need = 8 * count
    elif code == DTYPE_INT32:
        need = 4 * count
    else:
        raise FormatError(f"unknown dtype code {code}")
    body = blob[off:]
    if len(body) < need:
        raise TruncatedPayload(f"payload has {len(body)} bytes, needs {need}")
    if len(body) > need:
        raise FormatError(f"{len(body) - need} trailing bytes after payload")
    if code == DTYPE_PACKED:
        t = PackedTritTensor(dims, bytes(body))
        t.to_array()  # rejects codewords >= 243
        return t
    dt = "<f8" if code == DTYPE_REAL64 else "<i4"
    arr = np.frombuffer(body, dtype=dt).reshape(dims)
    return arr.astype(np.float64 if code == DTYPE_REAL64 else np.int32)


def save_tensor(path, tensor: Tensor) -> None:
    Path(path).write_bytes(encode_tensor(tensor))


def load_tensor(path) -> Tensor:
    return decode_tensor(Path(path).read_bytes())


def load_trits(path) -> np.ndarray:
    """Load a tensor file and return its contents as an int8 trit array."""
    t = load_tensor(path)
    if isinstance(t, PackedTritTensor):
        return t.to_array()
    return trits.as_trits(t)


# -- network manifest -------------------------------------------------------

def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.replace("x", ",").split(",") if x.strip())


def _fmt(vals) -> str:
    return ", ".join(str(int(v)) for v in vals)


def save_network(net: NetworkDesc, path) -> None:
    """Write ``net`` as a manifest plus one tensor file per array next to it."""
    path = Path(path)
    stem = path.stem
    lines = ["[network]", f"input = {_fmt(net.input_dims)}", f"encoder = {net.encoder}", ""]
    for i, layer in enumerate(net.layers):
        lines += ["[layer]", f"kind = {layer.kind.value}", f"in_ch = {layer.in_ch}",
                  f"out_ch = {layer.out_ch}", f"kernel = {_fmt(layer.kernel)}",
                  f"stride = {_fmt(layer.stride)}",
                  f"padding = {'full' if layer.padding else 'none'}"]
        if layer.depthwise:
            lines.append("depthwise = true")
        if layer.weights is not None:
            name = f"{stem}.l{i:02d}.weights.cttensor"
            w = np.asarray(layer.weights)
            if np.all(np.isin(w, (-1, 0, 1))):
                save_tensor(path.parent / name, PackedTritTensor.from_array(w))
            else:
                save_tensor(path.parent / name, w.astype(np.float64))
            lines.append(f"weights = {name}")
        if layer.bn is not None:
            name = f"{stem}.l{i:02d}.bn.cttensor"
            save_tensor(path.parent / name, layer.bn.as_matrix())
            lines.append(f"bn = {name}")
        if layer.bias is not None:
            name = f"{stem}.l{i:02d}.bias.cttensor"
            save_tensor(path.parent / name, np.asarray(layer.bias, dtype=np.float64))
            lines.append(f"bias = {name}")
        lines.append(f"activation = {layer.activation or 'none'}")
        lines.append("")
    path.write_text("\n".join(lines))


def load_network(path) -> NetworkDesc:
    path = Path(path)
    blocks: list[tuple[str, dict[str, str], int]] = []
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            blocks.append((line[1:-1].strip().lower(), {}, lineno))
            continue
        if "=" not in line or not blocks:
            raise ManifestError(f"{path}:{lineno}: expected 'key = value' inside a block")
        key, value = (s.strip() for s in line.split("=", 1))
        blocks[-1][1][key.lower()] = value
    if not blocks or blocks[0][0] != "network":
        raise ManifestError(f"{path}: manifest must start with a [network] block")
    head = blocks[0][1]
    try:
        input_dims = _ints(head["input"])
    except KeyError:
        raise ManifestError(f"{path}: [network] block needs 'input'") from None
    layers = []
    for name, kv, lineno in blocks[1:]:
        if name != "layer":
            raise ManifestError(f"{path}:{lineno}: unknown block [{name}]")
        try:
            kind = LayerKind(kv["kind"])
            layer = LayerDesc(
                kind=kind,
                in_ch=int(kv.get("in_ch", 0)),
                out_ch=int(kv.get("out_ch", 0)),
                kernel=_ints(kv.get("kernel", "1,1")),
                stride=_ints(kv.get("stride", kv.get("kernel", "1,1") if kind.is_pool else "1,1")),
                padding=kv.get("padding", "none").lower() in ("full", "true", "1", "yes"),
                weights=_tensor_field(path, kv, "weights"),
                bn=_bn_field(path, kv),
                activation=kv.get("activation"),
                bias=_tensor_field(path, kv, "bias"),
                depthwise=kv.get("depthwise", "false").lower() in ("true", "1", "yes"),
            )
        except (KeyError, ValueError) as exc:
            if isinstance(exc, ManifestError):
                raise
            raise ManifestError(f"{path}:{lineno}: bad layer block ({exc})") from None
        layers.append(layer)
    return NetworkDesc(tuple(layers), input_dims, head.get("encoder", "raw_trits"))


def _tensor_field(path: Path, kv: dict, key: str):
    if key not in kv:
        return None
    t = load_tensor(path.parent / kv[key])
    if isinstance(t, PackedTritTensor):
        return t.to_array()
    return np.asarray(t)


def _bn_field(path: Path, kv: dict):
    m = _tensor_field(path, kv, "bn")
    return None if m is None else BatchNorm.from_matrix(m)


# -- reference network ------------------------------------------------------

CIFAR10_ARCH = ArchConfig(max_layers=9)


def _random_conv(rng, in_ch, out_ch, sparsity, padding=True, stride=(1, 1)):
    w = random_ternary(rng, (out_ch, 3, 3, in_ch), sparsity)
    fan_in = 9 * in_ch * (1 - sparsity)
    bn = BatchNorm(
        gamma=rng.uniform(0.5, 1.5, out_ch),
        beta=rng.normal(0.0, 0.1, out_ch),
        mean=rng.normal(0.0, 1.0, out_ch),
        var=np.full(out_ch, 0.5 * fan_in),
        eps=np.full(out_ch, 1e-5),
    )
    return LayerDesc(LayerKind.CONV, in_ch, out_ch, (3, 3), stride, padding, w, bn, "Hardtanh")


def random_ternary(rng, shape, sparsity: float) -> np.ndarray:
    """Uniform random trits with ``sparsity`` expected fraction of zeros."""
    nz = rng.random(shape) >= sparsity
    sign = np.where(rng.random(shape) < 0.5, -1, 1)
    return (nz * sign).astype(np.int8)


def cifar10_network(seed: int = 0, sparsity: float = 0.607, in_ch: int = 126, classes: int = 10) -> NetworkDesc:
    """The evaluated CIFAR-10 topology with random ternary weights.

    Eight 3x3 padded convolutions with batch norm and Hardtanh, max pooling
    after the third, fifth and seventh, 4x4 average pooling after the eighth,
    and a 128 -> ``classes`` dense classifier.
    """
    rng = np.random.default_rng(seed)
    pool2 = LayerDesc(LayerKind.MAXPOOL, 128, 128, (2, 2), (2, 2))
    layers = [
        _random_conv(rng, in_ch, 128, sparsity),
        _random_conv(rng, 128, 128, sparsity),
        _random_conv(rng, 128, 128, sparsity),
        pool2,
        _random_conv(rng, 128, 128, sparsity),
        _random_conv(rng, 128, 128, sparsity),
        pool2,
        _random_conv(rng, 128, 128, sparsity),
        _random_conv(rng, 128, 128, sparsity),
        pool2,
        _random_conv(rng, 128, 128, sparsity),
        LayerDesc(LayerKind.AVGPOOL, 128, 128, (4, 4), (4, 4)),
        LayerDesc(LayerKind.DENSE, 128, classes, weights=random_ternary(rng, (classes, 128), sparsity)),
    ]
    return NetworkDesc(tuple(layers), (32, 32, in_ch), "ternary_thermometer")
