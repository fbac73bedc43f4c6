"""Incremental weight-quantization scheduling.

Weights are quantized in growing subsets. The order in which weights enter
those subsets is the quantization strategy; how many enter at each step is
the schedule. Retraining between steps is abstracted as a refinement hook.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

import numpy as np

from .errors import Undefined
from .trits import PackedTritTensor


class QuantStrategy(str, Enum):
    MAGNITUDE = "magnitude"
    MAGNITUDE_INVERSE = "magnitude_inverse"
    ZIGZAG = "zigzag"

    @classmethod
    def parse(cls, name: str) -> "QuantStrategy":
        key = name.strip().lower().replace("-", "_")
        for s in cls:
            if s.value == key or s.name.lower() == key:
                return s
        raise ValueError(f"unknown quantization strategy {name!r}; choose from "
                         + ", ".join(s.value for s in cls))


@dataclass(frozen=True)
class QuantSchedule:
    fractions: tuple[float, ...]

    def __post_init__(self):
        f = tuple(float(x) for x in self.fractions)
        object.__setattr__(self, "fractions", f)
        if not f:
            raise ValueError("schedule is empty")
        if any(b <= a for a, b in zip(f, f[1:])):
            raise ValueError("schedule fractions must be strictly increasing")
        if f[0] <= 0 or f[-1] != 1.0:
            raise ValueError("schedule fractions must lie in (0, 1] and end at 1.0")

    @classmethod
    def parse(cls, text: str) -> "QuantSchedule":
        return cls(tuple(float(x) for x in text.split(",") if x.strip()))

    def counts(self, n: int) -> list[int]:
        """Cumulative number of quantized weights after each step."""
        # the epsilon keeps 0.7 * 10 == 7.000000000000001 from rounding up to 8
        return [min(n, math.ceil(f * n - 1e-9)) for f in self.fractions]


# Step sizes of 20 %, then 10 %, then 5 % of all weights.
DEFAULT_SCHEDULE = QuantSchedule((0.2, 0.4, 0.6, 0.7, 0.8, 0.9, 0.95, 1.0))

DEFAULT_DELTA = 0.33


def order_weights(w, strategy: QuantStrategy) -> np.ndarray:
    """Flat indices of ``w`` in quantization order; ties go to the lower index."""
    mag = np.abs(np.asarray(w, dtype=np.float64)).reshape(-1)
    idx = np.arange(mag.size)
    strategy = QuantStrategy(strategy)
    if strategy is QuantStrategy.MAGNITUDE:
        return np.lexsort((idx, -mag))
    ascending = np.lexsort((idx, mag))
    if strategy is QuantStrategy.MAGNITUDE_INVERSE:
        return ascending
    # Zig-zag: smallest, largest, next smallest, next largest, ...
    descending = np.lexsort((idx, -mag))
    out = np.empty(mag.size, dtype=np.int64)
    taken = np.zeros(mag.size, dtype=bool)
    lo = hi = 0
    for k in range(mag.size):
        src, pos = (ascending, lo) if k % 2 == 0 else (descending, hi)
        while taken[src[pos]]:
            pos += 1
        out[k] = src[pos]
        taken[src[pos]] = True
        if k % 2 == 0:
            lo = pos + 1
        else:
            hi = pos + 1
    return out


def partition_steps(w, strategy: QuantStrategy, schedule: QuantSchedule) -> list[np.ndarray]:
    order = order_weights(w, strategy)
    bounds = [0] + schedule.counts(order.size)
    return [order[a:b] for a, b in zip(bounds, bounds[1:])]


def project_ternary(w, delta: float = DEFAULT_DELTA, scale: Optional[float] = None) -> np.ndarray:
    """Map weights to trits: sign(w) where |w| >= delta * max|w|, else 0.

    ``scale`` overrides max|w| (used when projecting a subset of a tensor).
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    arr = np.asarray(w, dtype=np.float64)
    ref = np.abs(arr).max(initial=0.0) if scale is None else scale
    if ref == 0:
        return np.zeros(arr.shape, dtype=np.int8)
    keep = np.abs(arr) >= delta * ref
    return (np.sign(arr) * keep).astype(np.int8)


def sparsity(t) -> float:
    arr = t.to_array() if isinstance(t, PackedTritTensor) else np.asarray(t)
    if arr.size == 0:
        raise Undefined("sparsity of an empty tensor is undefined")
    return float(np.count_nonzero(arr == 0)) / arr.size


RefineHook = Callable[[np.ndarray, np.ndarray], np.ndarray]


def identity_refine(w: np.ndarray, frozen: np.ndarray) -> np.ndarray:
    return w


@dataclass
class QuantStep:
    step: int
    indices: np.ndarray
    trits: np.ndarray
    sparsity: float


def quantize_incremental(w, strategy: QuantStrategy, schedule: QuantSchedule = DEFAULT_SCHEDULE,
                         delta: float = DEFAULT_DELTA,
                         refine: RefineHook = identity_refine) -> tuple[np.ndarray, list[QuantStep]]:
    """Quantize ``w`` subset by subset; returns the ternary tensor and per-step records.

    After each step ``refine(weights, frozen_mask)`` may update the still-float
    weights (the retraining phase). Frozen weights are restored afterwards so
    a hook cannot move them.
    """
    arr = np.asarray(w, dtype=np.float64)
    shape = arr.shape
    flat = arr.reshape(-1).copy()
    scale = np.abs(flat).max(initial=0.0)
    out = np.zeros(flat.size, dtype=np.int8)
    frozen = np.zeros(flat.size, dtype=bool)
    steps = []
    static = partition_steps(flat, strategy, schedule) if refine is identity_refine else None
    bounds = [0] + schedule.counts(flat.size)
    for k, (a, b) in enumerate(zip(bounds, bounds[1:]), 1):
        if static is not None:
            idx = static[k - 1]
        else:
            # refined weights are ranked afresh among the ones still in float
            rem = np.flatnonzero(~frozen)
            idx = rem[order_weights(flat[rem], strategy)[: b - a]]
        trits = project_ternary(flat[idx], delta, scale=scale)
        out[idx] = trits
        frozen[idx] = True
        steps.append(QuantStep(k, idx, trits, sparsity(trits) if trits.size else 0.0))
        if static is None and b < flat.size:
            snapshot = flat[frozen].copy()
            flat = np.asarray(refine(flat.copy(), frozen.copy()), dtype=np.float64).reshape(-1)
            flat[frozen] = snapshot
    return out.reshape(shape), steps
