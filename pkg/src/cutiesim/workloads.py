"""Reproducible workloads: synthetic images and ternary vs binary network runs."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .compiler import CompiledProgram, emit_program
from .network import CIFAR10_ARCH, ArchConfig, cifar10_network
from .simulator import SimTrace, run_program
from .trits import encode_pixels

THERMOMETER_M = 42  # 3 colour channels x 42 = 126 input channels


def smooth_image(rng: np.random.Generator, size=(32, 32), channels: int = 3,
                 octaves: int = 3) -> np.ndarray:
    """8-bit (H, W, C) image built from upsampled noise at a few scales.

    Neighbouring pixels are strongly correlated, like natural images.
    """
    h, w = size
    img = np.zeros((h, w, channels))
    for o in range(octaves):
        cells = 2 ** (o + 2)
        coarse = rng.normal(size=(cells + 1, cells + 1, channels))
        ys = np.linspace(0, cells, h)
        xs = np.linspace(0, cells, w)
        y0 = np.minimum(ys.astype(int), cells - 1)
        x0 = np.minimum(xs.astype(int), cells - 1)
        fy = (ys - y0)[:, None, None]
        fx = (xs - x0)[None, :, None]
        c00 = coarse[y0][:, x0]
        c01 = coarse[y0][:, x0 + 1]
        c10 = coarse[y0 + 1][:, x0]
        c11 = coarse[y0 + 1][:, x0 + 1]
        layer = (c00 * (1 - fy) * (1 - fx) + c01 * (1 - fy) * fx
                 + c10 * fy * (1 - fx) + c11 * fy * fx)
        img += layer / (2 ** o)
    img -= img.min()
    img /= max(img.max(), 1e-12)
    return np.round(img * 255).astype(np.int64)


def encode_image(img: np.ndarray, kind: str, m: int = THERMOMETER_M,
                 channels: int | None = None) -> np.ndarray:
    """Thermometer-encode an 8-bit image; zero-fill up to ``channels``.

    The ternary code has 2m+1 levels, the binary code m+1, so the 8-bit
    range is rescaled accordingly.
    """
    levels = 2 * m if kind == "ternary" else m
    x = np.round(np.asarray(img, dtype=np.float64) * levels / 255).astype(np.int64)
    t = encode_pixels(x, m, kind)
    if channels is not None and channels > t.shape[2]:
        t = np.concatenate([t, np.zeros((*t.shape[:2], channels - t.shape[2]), dtype=np.int8)], axis=2)
    return t


def binary_variant(prog: CompiledProgram) -> CompiledProgram:
    """Same program with a single threshold per channel (outputs never 0)."""
    thr = prog.thresholds.copy()
    mid = np.floor((thr[:, 0] + thr[:, 1]) / 2).astype(thr.dtype)
    thr[:, 0] = mid
    thr[:, 1] = mid
    return replace(prog, thresholds=thr)


@dataclass
class PairedRun:
    ternary: SimTrace
    binary: SimTrace
    ternary_program: CompiledProgram
    binary_program: CompiledProgram


def ternary_binary_pair(seed: int = 0, sparsity: float = 0.607,
                        arch: ArchConfig = CIFAR10_ARCH) -> PairedRun:
    """Simulate the CIFAR-10 topology twice on one image.

    Ternary: ``sparsity`` zero weights, ternary thermometer input, ternary
    activations. Binary: dense +-1 weights, binary thermometer input, single
    thresholds.
    """
    rng = np.random.default_rng(seed)
    img = smooth_image(rng)
    in_ch = 3 * THERMOMETER_M
    tprog = emit_program(cifar10_network(seed, sparsity=sparsity, in_ch=in_ch), arch)
    bprog = binary_variant(emit_program(cifar10_network(seed, sparsity=0.0, in_ch=in_ch), arch))
    xt = encode_image(img, "ternary")
    xb = encode_image(img, "binary")
    _, tt = run_program(tprog, xt)
    _, tb = run_program(bprog, xb)
    return PairedRun(tt, tb, tprog, bprog)
