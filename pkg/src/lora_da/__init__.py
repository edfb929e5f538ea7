"""Data-aware low-rank adapter initialization and its validation harnesses."""

from .bundle import BundleError, TensorBundle, TensorEntry, read_bundle, write_bundle
from .guidance import (
    DeltaEstimate,
    EigPath,
    GuidanceConfig,
    GuidanceOperator,
    InitMode,
    InitResult,
    bias_residual,
    build_omega,
    compute_init,
    estimate_delta,
)
from .stats import LayerStats, StatsAccumulator, accumulate, bundle_to_stats, finalize, merge, stats_to_bundle

__all__ = [
    "BundleError",
    "TensorBundle",
    "TensorEntry",
    "read_bundle",
    "write_bundle",
    "DeltaEstimate",
    "EigPath",
    "GuidanceConfig",
    "GuidanceOperator",
    "InitMode",
    "InitResult",
    "bias_residual",
    "build_omega",
    "compute_init",
    "estimate_delta",
    "LayerStats",
    "StatsAccumulator",
    "accumulate",
    "bundle_to_stats",
    "finalize",
    "merge",
    "stats_to_bundle",
]

__version__ = "0.1.0"
