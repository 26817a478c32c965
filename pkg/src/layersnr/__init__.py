"""Marchenko-Pastur thresholded SNR scans of transformer checkpoints and
top-fraction freeze plans built from them."""

__version__ = "0.1.0"

from .checkpoint import (
    CheckpointError,
    CheckpointManifest,
    TensorLoadError,
    TensorRecord,
    load_tensor,
    open_checkpoint,
    write_fixture,
)
from .scan import ModuleGroup, ScanReport, discover_groups, read_report, scan, write_report
from .selection import PRESETS, SelectionPlan, coverage_stats, emit_plan, select
from .spectral import MpBounds, SnrResult, SvdResult, analyze_matrix, estimate_sigma, mp_bounds, singular_values, snr

__all__ = [
    "CheckpointError",
    "CheckpointManifest",
    "TensorLoadError",
    "TensorRecord",
    "load_tensor",
    "open_checkpoint",
    "write_fixture",
    "ModuleGroup",
    "ScanReport",
    "discover_groups",
    "read_report",
    "scan",
    "write_report",
    "PRESETS",
    "SelectionPlan",
    "coverage_stats",
    "emit_plan",
    "select",
    "MpBounds",
    "SnrResult",
    "SvdResult",
    "analyze_matrix",
    "estimate_sigma",
    "mp_bounds",
    "singular_values",
    "snr",
]
