"""Reference ternary inference used as the correctness oracle.

Nothing here touches the simulator's datapath: convolutions are plain
shift-and-multiply sums over kernel taps on unpacked integer arrays, so a bug
in window scheduling, popcount accumulation or the pooling FIFO cannot hide
behind a shared helper.
"""
from __future__ import annotations

from typing import Union

import numpy as np

from .compiler import POOL_AVG, POOL_MAX, CompiledProgram
from .errors import ShapeError
from .network import LayerDesc, LayerKind, NetworkDesc


def ref_conv(x: np.ndarray, kernels: np.ndarray, stride=(1, 1), padding=False) -> np.ndarray:
    """Direct convolution. ``x`` is (H, W, C), ``kernels`` is (O, kh, kw, C)."""
    x = np.asarray(x)
    kernels = np.asarray(kernels)
    if x.ndim != 3 or kernels.ndim != 4 or kernels.shape[3] != x.shape[2]:
        raise ShapeError(f"cannot convolve {x.shape} with kernels {kernels.shape}")
    _, kh, kw, _ = kernels.shape
    sh, sw = stride
    ph, pw = (kh // 2, kw // 2) if padding else (0, 0)
    xp = np.pad(x.astype(np.int64), ((ph, ph), (pw, pw), (0, 0)))
    oh = (xp.shape[0] - kh) // sh + 1
    ow = (xp.shape[1] - kw) // sw + 1
    if oh < 1 or ow < 1:
        raise ShapeError("kernel larger than the (padded) input")
    out = np.zeros((oh, ow, kernels.shape[0]), dtype=np.int64)
    k64 = kernels.astype(np.int64)
    for i in range(kh):
        for j in range(kw):
            patch = xp[i: i + sh * (oh - 1) + 1: sh, j: j + sw * (ow - 1) + 1: sw, :]
            out += patch @ k64[:, i, j, :].T
    return out


def ref_threshold(acc: np.ndarray, pairs) -> np.ndarray:
    pairs = np.asarray(pairs)
    lo, hi = pairs[:, 0], pairs[:, 1]
    return np.where(acc >= hi, 1, np.where(acc < lo, -1, 0)).astype(np.int8)


def ref_pool(t: np.ndarray, kind: str, window) -> np.ndarray:
    """Non-overlapping pooling: ``max`` over trits, ``sum`` over accumulators."""
    ph, pw = window
    h, w, c = t.shape
    if h % ph or w % pw:
        raise ShapeError(f"{h}x{w} map is not divisible by {ph}x{pw} pooling")
    blocks = t.reshape(h // ph, ph, w // pw, pw, c)
    if kind == "max":
        return blocks.max(axis=(1, 3))
    if kind == "sum":
        return blocks.astype(np.int64).sum(axis=(1, 3))
    raise ValueError(f"unknown pooling kind {kind!r}")


def ref_dense(x: np.ndarray, weights: np.ndarray) -> np.ndarray:
    flat = np.asarray(x, dtype=np.int64).reshape(-1)
    w = np.asarray(weights, dtype=np.int64)
    if w.shape[1] != flat.size:
        raise ShapeError(f"dense layer expects {w.shape[1]} inputs, got {flat.size}")
    return (w @ flat).reshape(1, 1, -1)


def _program_kernels(prog: CompiledProgram, i: int) -> np.ndarray:
    ins = prog.instrs[i]
    k = prog.arch.kernel
    full = prog.layer_weights(i).reshape(ins.out_ch, k, k, prog.arch.in_channels)
    kh, kw = ins.kernel
    r0, c0 = (k - kh) // 2, (k - kw) // 2
    return full[:, r0:r0 + kh, c0:c0 + kw, : ins.in_dims[2]]


def run_program(prog: CompiledProgram, x: np.ndarray, return_acc: bool = False):
    """Integer path: execute the compiled program layer by layer."""
    t = np.asarray(x, dtype=np.int8)
    acc = None
    for i, ins in enumerate(prog.instrs):
        if t.shape != tuple(ins.in_dims):
            raise ShapeError(f"layer {i} expects input {ins.in_dims}, got {t.shape}")
        pairs = prog.layer_thresholds(i)
        if ins.dense:
            n = int(np.prod(ins.in_dims))
            acc = ref_dense(t, prog.layer_weights(i)[:, :n])
        else:
            acc = ref_conv(t, _program_kernels(prog, i), ins.stride, ins.padding)
        if ins.pooling == POOL_MAX:
            t = ref_pool(ref_threshold(acc, pairs), "max", ins.pool_size)
        elif ins.pooling == POOL_AVG:
            acc = ref_pool(acc, "sum", ins.pool_size)
            t = ref_threshold(acc, pairs)
        else:
            t = ref_threshold(acc, pairs)
    return (t, acc) if return_acc else t


def _float_activation(a: np.ndarray, layer: LayerDesc) -> np.ndarray:
    if layer.bn is not None:
        g, b, m = layer.bn.gamma, layer.bn.beta, layer.bn.mean
        s = layer.bn.scale
    else:
        g, b, m, s = 1.0, 0.0, 0.0, 1.0
    bias = 0.0 if layer.bias is None else np.asarray(layer.bias, dtype=np.float64)
    y = g * ((a + bias) - m) / s + b
    if layer.activation is not None and layer.activation.lower() == "hardtanh":
        y = np.clip(y, -1.0, 1.0)
    return np.where(y >= 0.5, 1, np.where(y <= -0.5, -1, 0)).astype(np.int8)


def _float_conv(x: np.ndarray, layer: LayerDesc) -> np.ndarray:
    w = np.asarray(layer.weights, dtype=np.float64)
    xf = np.asarray(x, dtype=np.float64)
    if layer.depthwise:
        out = [ref_conv(xf[:, :, c: c + 1].astype(np.int64), w[c: c + 1].astype(np.int64),
                        layer.stride, layer.padding)
               for c in range(layer.out_ch)]
        return np.concatenate(out, axis=2).astype(np.float64)
    return ref_conv(xf.astype(np.int64), w.astype(np.int64), layer.stride, layer.padding).astype(np.float64)


def run_network(net: NetworkDesc, x: np.ndarray) -> np.ndarray:
    """Float path: conv, bias, batch norm, Hardtanh, +-0.5 ternarization, pooling.

    Max pooling acts on the ternarized map; average pooling averages the
    pre-activations of each window before normalization.
    """
    t = np.asarray(x, dtype=np.int8)
    if t.shape != tuple(net.input_dims):
        raise ShapeError(f"network expects input {net.input_dims}, got {t.shape}")
    layers = net.layers
    i = 0
    while i < len(layers):
        layer = layers[i]
        pool = layers[i + 1] if i + 1 < len(layers) and layers[i + 1].kind.is_pool else None
        if layer.kind is LayerKind.DENSE:
            a = ref_dense(t, np.asarray(layer.weights)).astype(np.float64)
        elif layer.kind is LayerKind.CONV:
            a = _float_conv(t, layer)
        else:
            raise ShapeError(f"layer {i}: pooling without a preceding convolution")
        if pool is not None and pool.kind is LayerKind.AVGPOOL:
            area = pool.kernel[0] * pool.kernel[1]
            a = ref_pool(a.astype(np.int64), "sum", pool.kernel) / area
        t = _float_activation(a, layer)
        if pool is not None and pool.kind is LayerKind.MAXPOOL:
            t = ref_pool(t, "max", pool.kernel)
        i += 2 if pool is not None else 1
    return t


def ref_run(model: Union[CompiledProgram, NetworkDesc], x: np.ndarray) -> np.ndarray:
    if isinstance(model, CompiledProgram):
        return run_program(model, x)
    return run_network(model, x)
