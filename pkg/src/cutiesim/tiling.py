"""External-memory traffic of tiled execution for maps larger than the on-chip memory.

Both schedules cut the output map into square cores; a core plus its halo
must fit the feature-map memory.

layer_first
    every layer sweeps all tiles; a tile reads its haloed input region and
    writes its core, so intermediate maps round-trip through DRAM. Weights
    are loaded once per layer.
depth_first
    layers are fused in groups of depth g; a tile is pushed through a whole
    group before the next tile starts. Each group reads its input once, with
    a halo that grows by one halo per fused layer, and only group outputs
    leave the chip. Overlapping halos are recomputed and every tile reloads
    the weights of a multi-layer group. g is chosen to minimise external
    feature traffic (ties go to the cheaper total), so small tiles fall back
    to shallow fusion; g = 1 is exactly the layer-first schedule.

The final network output is not counted as external traffic, and a map that
fits on chip keeps every intermediate on chip. Feature values cost 1.6 bits.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .activity import CostModel
from .errors import CapacityError
from .network import ArchConfig
from .trits import BITS_PER_TRIT

LAYER_FIRST = "layer_first"
DEPTH_FIRST = "depth_first"
STRATEGIES = (LAYER_FIRST, DEPTH_FIRST)


@dataclass(frozen=True)
class TilingPlan:
    fm: tuple[int, int]
    tile: tuple[int, int]
    layers: int
    strategy: str = DEPTH_FIRST
    halo: Optional[int] = None      # per layer and tile edge; K // 2 when None
    channels: Optional[int] = None  # N_I when None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown tiling strategy {self.strategy!r}")
        if self.layers < 1:
            raise ValueError("a plan needs at least one layer")
        if min(self.fm) < 1 or min(self.tile) < 1:
            raise ValueError("map and tile dims must be positive")


@dataclass
class TilingResult:
    plan: TilingPlan
    tiles: int
    bits_external: float
    bits_weights: float
    pixel_layers: int
    feature_energy_pj: float
    weight_energy_pj: float
    compute_energy_pj: float
    fused: int = 1          # layers per fused group

    @property
    def total_pj(self) -> float:
        return self.feature_energy_pj + self.weight_energy_pj + self.compute_energy_pj

    def as_dict(self) -> dict:
        return {
            "strategy": self.plan.strategy,
            "fm": f"{self.plan.fm[0]}x{self.plan.fm[1]}",
            "layers": self.plan.layers,
            "tiles": self.tiles,
            "fused": self.fused,
            "bits_external": self.bits_external,
            "bits_weights": self.bits_weights,
            "feature_energy_uj": self.feature_energy_pj * 1e-6,
            "weight_energy_uj": self.weight_energy_pj * 1e-6,
            "compute_energy_uj": self.compute_energy_pj * 1e-6,
            "total_energy_uj": self.total_pj * 1e-6,
        }


def _spans(length: int, core: int) -> list[tuple[int, int]]:
    return [(a, min(a + core, length)) for a in range(0, length, core)]


def _grown(span: tuple[int, int], by: int, length: int) -> int:
    """Extent of ``span`` widened by ``by`` on both sides, clipped to the map."""
    return min(span[1] + by, length) - max(span[0] - by, 0)


def tiling_transfer(plan: TilingPlan, arch: ArchConfig, cost: CostModel) -> TilingResult:
    th, tw = plan.tile
    if th > arch.fm_height or tw > arch.fm_width:
        raise CapacityError(f"{th}x{tw} tile exceeds the {arch.fm_height}x{arch.fm_width} feature-map memory")
    h, w = plan.fm
    halo = arch.kernel // 2 if plan.halo is None else plan.halo
    ch = arch.in_channels if plan.channels is None else plan.channels
    L = plan.layers
    layer_weight_bits = arch.out_channels * arch.window_trits * BITS_PER_TRIT
    px_bits = ch * BITS_PER_TRIT

    if h <= th and w <= tw:
        # everything stays on chip; both schedules coincide
        return TilingResult(plan, 1, h * w * px_bits, L * layer_weight_bits, L * h * w,
                            h * w * px_bits * cost.dram_pj_per_bit,
                            L * layer_weight_bits * cost.weight_mem_pj_per_bit,
                            L * h * w * cost.tiling_compute_pj_per_pixel, L)

    def group(depth: int):
        """(tiles, pixels moved, pixel-layers, weight bits) of one fused group."""
        grow = depth * halo
        core_h, core_w = th - 2 * grow, tw - 2 * grow
        if core_h < 1 or core_w < 1:
            return None
        rows, cols = _spans(h, core_h), _spans(w, core_w)
        tiles = len(rows) * len(cols)
        read = sum(_grown(r, grow, h) * _grown(c, grow, w) for r in rows for c in cols)
        # layer l (1-based) must produce the core widened by (depth - l) halos
        work = sum(_grown(r, (depth - l) * halo, h) * _grown(c, (depth - l) * halo, w)
                   for r in rows for c in cols for l in range(1, depth + 1))
        loads = tiles if depth > 1 else 1
        return tiles, read, work, loads * depth * layer_weight_bits

    def schedule(depth: int):
        sizes = [depth] * (L // depth) + ([L % depth] if L % depth else [])
        parts = [group(d) for d in sizes]
        if any(p is None for p in parts):
            return None
        tiles = max(p[0] for p in parts)
        pixels = sum(p[1] for p in parts) + (len(sizes) - 1) * h * w  # group outputs spill
        bits = pixels * px_bits
        work = sum(p[2] for p in parts)
        wbits = sum(p[3] for p in parts)
        return TilingResult(plan, tiles, bits, wbits, work,
                            bits * cost.dram_pj_per_bit,
                            wbits * cost.weight_mem_pj_per_bit,
                            work * cost.tiling_compute_pj_per_pixel, depth)

    depths = [1] if plan.strategy == LAYER_FIRST else range(1, L + 1)
    options = [r for r in (schedule(d) for d in depths) if r is not None]
    if not options:
        raise CapacityError(f"{th}x{tw} tile leaves no core after a {halo}-pixel halo")
    return min(options, key=lambda r: (r.bits_external, r.total_pj))
