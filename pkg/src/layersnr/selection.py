"""Top-fraction layer selection per module group, and the freeze plan file."""

from __future__ import annotations

import logging
import math
import os
import re
from dataclasses import dataclass
from pathlib import Path

import yaml

from .scan import ScanReport

__all__ = [
    "PRESETS",
    "SelectionPlan",
    "CoverageStats",
    "group_quota",
    "select",
    "anchored_pattern",
    "plan_yaml",
    "emit_plan",
    "coverage_stats",
]

log = logging.getLogger(__name__)

PRESETS = {"top25": 0.25, "top45": 0.45, "top50": 0.50}
DEFAULT_TOP_FRACTION = PRESETS["top25"]


@dataclass(frozen=True)
class SelectionPlan:
    top_fraction: float
    # group key -> unfrozen tensor names, in ranking order
    selected: dict[str, list[str]]
    patterns: list[str]

    def selected_names(self) -> set[str]:
        return {n for names in self.selected.values() for n in names}


@dataclass(frozen=True)
class CoverageStats:
    total_tensors: int
    selected_tensors: int
    total_params: int
    selected_params: int

    @property
    def param_fraction(self) -> float:
        return self.selected_params / self.total_params if self.total_params else 0.0


def _check_fraction(top_fraction: float) -> None:
    if not (0.0 < top_fraction <= 1.0) or math.isnan(top_fraction):
        raise ValueError(f"top_fraction must be in (0, 1], got {top_fraction}")


def group_quota(size: int, top_fraction: float) -> int:
    """Members to keep from a group: round half up, at least 1, at most ``size``.

    >>> [group_quota(g, 0.25) for g in (1, 2, 3, 6, 32)]
    [1, 1, 1, 2, 8]
    """
    _check_fraction(top_fraction)
    if size <= 0:
        return 0
    return min(size, max(1, math.floor(size * top_fraction + 0.5)))


def anchored_pattern(name: str) -> str:
    return "^" + re.escape(name) + "$"


def select(report: ScanReport, top_fraction: float = DEFAULT_TOP_FRACTION) -> SelectionPlan:
    """Keep the top ``top_fraction`` of each group by normalized SNR.

    Relies on the report's within-group order (SNR descending, inf first,
    ties to the lower layer index). Skipped tensors are never candidates.
    """
    _check_fraction(top_fraction)
    groups = report.groups()
    if not groups:
        raise ValueError("scan report has no scanned tensors")
    selected = {}
    for key, members in groups.items():
        k = group_quota(len(members), top_fraction)
        selected[key] = [res.tensor_name for _, res in members[:k]]
    patterns = sorted({anchored_pattern(n) for names in selected.values() for n in names})
    return SelectionPlan(top_fraction, selected, patterns)


def plan_yaml(plan: SelectionPlan) -> str:
    return yaml.safe_dump(
        {"unfrozen_parameters": list(plan.patterns)},
        default_flow_style=False,
        sort_keys=True,
        width=10_000,
    )


def emit_plan(plan: SelectionPlan, path: str | os.PathLike) -> None:
    if not plan.patterns:
        log.warning("selection plan is empty; nothing will be unfrozen")
    Path(path).write_text(plan_yaml(plan), encoding="utf-8")


def coverage_stats(plan: SelectionPlan, report: ScanReport) -> CoverageStats:
    results = {res.tensor_name: res for _, _, res in report.scanned}
    chosen = plan.selected_names()
    unknown = chosen - results.keys()
    if unknown:
        raise ValueError(f"plan selects tensors absent from the report: {sorted(unknown)[:3]}")
    return CoverageStats(
        total_tensors=len(results),
        selected_tensors=len(chosen),
        total_params=sum(r.num_params for r in results.values()),
        selected_params=sum(results[n].num_params for n in chosen),
    )
