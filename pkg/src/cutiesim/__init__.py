"""Simulation and energy modelling of a fully unrolled ternary CNN accelerator."""
from .errors import CutieError
from .trits import PackedTritTensor, pack5, unpack5, binary_thermometer, ternary_thermometer
from .network import ArchConfig, BatchNorm, LayerDesc, LayerKind, NetworkDesc, validate, op_count
from .compiler import CompiledProgram, emit_program, fold_thresholds
from .quantizer import QuantSchedule, QuantStrategy, order_weights, quantize_incremental
from .simulator import SimConfig, SimTrace, run_program
from .golden import ref_run
from .activity import CostModel, ToggleStats, binary_discount, count_toggles, energy_estimate, hamming_stats
from .tiling import TilingPlan, tiling_transfer

__version__ = "0.1.0"

__all__ = [
    "CutieError", "PackedTritTensor", "pack5", "unpack5", "binary_thermometer", "ternary_thermometer",
    "ArchConfig", "BatchNorm", "LayerDesc", "LayerKind", "NetworkDesc", "validate", "op_count",
    "CompiledProgram", "emit_program", "fold_thresholds",
    "QuantSchedule", "QuantStrategy", "order_weights", "quantize_incremental",
    "SimConfig", "SimTrace", "run_program", "ref_run",
    "CostModel", "ToggleStats", "binary_discount", "count_toggles", "energy_estimate", "hamming_stats",
    "TilingPlan", "tiling_transfer",
]
