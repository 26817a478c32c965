"""Whole-checkpoint scan: group weight matrices by module and compute SNRs."""

from __future__ import annotations

import json
import logging
import math
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

from .checkpoint import CheckpointManifest, TensorLoadError, load_tensor
from .spectral import MpBounds, SnrResult, analyze_matrix, mp_bounds

__all__ = [
    "DEFAULT_EXCLUDES",
    "DEFAULT_BATCH_SIZE",
    "EXCLUDED_BY_DEFAULT",
    "EXCLUDED",
    "ModuleGroup",
    "Skipped",
    "ScanReport",
    "ReportError",
    "group_key",
    "discover",
    "discover_groups",
    "scan",
    "snr_sort_key",
    "report_to_dict",
    "report_from_dict",
    "dumps_report",
    "write_report",
    "read_report",
]

log = logging.getLogger(__name__)

# Embedding and output-head matrices; searched anywhere in the name.
DEFAULT_EXCLUDES = (r"(^|\.)embed_tokens\.", r"(^|\.)lm_head\.", r"(^|\.)wte\.", r"(^|\.)wpe\.")
DEFAULT_BATCH_SIZE = 8

EXCLUDED_BY_DEFAULT = "excluded-by-default"
EXCLUDED = "excluded"


class ReportError(ValueError):
    """A scan report file is unreadable or structurally invalid."""


@dataclass(frozen=True)
class ModuleGroup:
    group_key: str
    # (tensor name, layer index or None), ordered by layer
    members: tuple[tuple[str, int | None], ...]


@dataclass(frozen=True)
class Skipped:
    name: str
    reason: str


@dataclass
class ScanReport:
    model_id: str
    # sorted by (group_key, normalized SNR descending, layer ascending)
    scanned: list[tuple[str, int | None, SnrResult]] = field(default_factory=list)
    skipped: list[Skipped] = field(default_factory=list)
    config: dict[str, Any] = field(default_factory=dict)

    def groups(self) -> dict[str, list[tuple[int | None, SnrResult]]]:
        out: dict[str, list[tuple[int | None, SnrResult]]] = {}
        for key, layer, res in self.scanned:
            out.setdefault(key, []).append((layer, res))
        return out

    def result(self, name: str) -> SnrResult:
        for _, _, res in self.scanned:
            if res.tensor_name == name:
                return res
        raise KeyError(name)


# --------------------------------------------------------------------------
# grouping
# --------------------------------------------------------------------------


def group_key(name: str) -> tuple[str, int | None, str]:
    """Split a parameter name into (group key, layer index, wildcard pattern).

    The first all-numeric dotted segment is the layer index; the group key
    is what follows it, without a trailing ``weight``. Names without an index
    form their own group.

    >>> group_key("model.layers.3.self_attn.q_proj.weight")
    ('self_attn.q_proj', 3, 'model.layers.*.self_attn.q_proj.weight')
    >>> group_key("lm_head.weight")
    ('lm_head', None, 'lm_head.weight')
    """
    parts = name.split(".")
    for i, part in enumerate(parts):
        if part.isdigit():
            tail = parts[i + 1 :]
            if tail and tail[-1] == "weight":
                tail = tail[:-1]
            key = ".".join(tail) or ".".join(parts[:i])
            wildcard = ".".join(parts[:i] + ["*"] + parts[i + 1 :])
            return key, int(part), wildcard
    stem = parts[:-1] if len(parts) > 1 and parts[-1] == "weight" else parts
    return ".".join(stem), None, name


def _compile(patterns: Iterable[str]) -> list[re.Pattern]:
    compiled = []
    for p in patterns:
        try:
            compiled.append(re.compile(p))
        except re.error as exc:
            raise ValueError(f"invalid pattern {p!r}: {exc}") from exc
    return compiled


def discover(
    manifest: CheckpointManifest,
    include: Sequence[str] = (),
    exclude: Sequence[str] = (),
    default_excludes: Sequence[str] = DEFAULT_EXCLUDES,
) -> tuple[list[ModuleGroup], list[Skipped]]:
    """Find the 2-D tensors to scan and group them by module.

    Patterns are regular expressions searched within the full name. An empty
    ``include`` matches everything. Every 2-D tensor that matches ``include``
    ends up either in a group or in the returned skipped list.
    """
    inc = _compile(include)
    exc = _compile(exclude)
    dflt = _compile(default_excludes)

    picked: dict[str, list[tuple[str, int | None, str]]] = {}
    skipped = []
    for name in manifest.names():
        if manifest.tensors[name].ndim != 2:
            continue
        if inc and not any(p.search(name) for p in inc):
            continue
        if any(p.search(name) for p in exc):
            skipped.append(Skipped(name, EXCLUDED))
            continue
        if any(p.search(name) for p in dflt):
            skipped.append(Skipped(name, EXCLUDED_BY_DEFAULT))
            continue
        key, layer, wildcard = group_key(name)
        picked.setdefault(key, []).append((name, layer, wildcard))

    groups = []
    for key, members in picked.items():
        layers = [layer for _, layer, _ in members]
        if len(set(layers)) != len(layers):
            # same module suffix under different prefixes (e.g. encoder and
            # decoder stacks): fall back to the full wildcard path
            by_wildcard: dict[str, list] = {}
            for m in members:
                by_wildcard.setdefault(m[2], []).append(m)
            for wildcard, sub in by_wildcard.items():
                groups.append(_make_group(wildcard, sub))
        else:
            groups.append(_make_group(key, members))
    groups.sort(key=lambda g: g.group_key)
    return groups, skipped


def _make_group(key: str, members) -> ModuleGroup:
    ordered = sorted(members, key=lambda m: (m[1] is not None, m[1] or 0, m[0]))
    return ModuleGroup(key, tuple((name, layer) for name, layer, _ in ordered))


def discover_groups(
    manifest: CheckpointManifest,
    include: Sequence[str] = (),
    exclude: Sequence[str] = (),
) -> list[ModuleGroup]:
    return discover(manifest, include, exclude)[0]


# --------------------------------------------------------------------------
# scanning
# --------------------------------------------------------------------------


def snr_sort_key(normalized_snr: float, layer: int | None) -> tuple:
    """Descending SNR (inf first), then ascending layer index."""
    return (-normalized_snr, -1 if layer is None else layer)


def _analyze(manifest: CheckpointManifest, name: str) -> SnrResult | Skipped:
    try:
        record = load_tensor(manifest, name)
    except (TensorLoadError, OSError) as exc:
        return Skipped(name, f"load-failed: {exc}")
    if record.flagged:
        return Skipped(name, f"non-finite: {record.nonfinite_count} non-finite values")
    try:
        return analyze_matrix(record)
    except ValueError as exc:
        return Skipped(name, f"unanalyzable: {exc}")


def scan(
    manifest: CheckpointManifest,
    groups: Sequence[ModuleGroup],
    batch_size: int = DEFAULT_BATCH_SIZE,
    *,
    skipped: Sequence[Skipped] = (),
    model_id: str | None = None,
    config: dict[str, Any] | None = None,
) -> ScanReport:
    """Compute the SNR of every group member, ``batch_size`` tensors at a time.

    Tensors are loaded and analyzed inside the worker, so at most
    ``batch_size`` decoded matrices are alive at once. Failures are recorded
    in ``skipped`` and never abort the scan. The report does not depend on
    ``batch_size`` or on completion order.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")

    todo = [(g.group_key, name, layer) for g in groups for name, layer in g.members]
    results: dict[str, SnrResult | Skipped] = {}
    with ThreadPoolExecutor(max_workers=batch_size) as pool:
        for start in range(0, len(todo), batch_size):
            batch = todo[start : start + batch_size]
            names = [name for _, name, _ in batch]
            for name, res in zip(names, pool.map(lambda n: _analyze(manifest, n), names)):
                results[name] = res
            log.info("scanned %d/%d tensors", min(start + batch_size, len(todo)), len(todo))

    scanned = []
    all_skipped = list(skipped)
    for key, name, layer in todo:
        res = results[name]
        if isinstance(res, Skipped):
            log.warning("skipping %s (%s)", name, res.reason)
            all_skipped.append(res)
        else:
            scanned.append((key, layer, res))
    scanned.sort(key=lambda t: (t[0], *snr_sort_key(t[2].normalized_snr, t[1])))
    all_skipped.sort(key=lambda s: s.name)

    if model_id is None:
        model_id = manifest.path.name
    return ScanReport(model_id, scanned, all_skipped, dict(config or {}))


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------


def _enc_float(x: float) -> float | str:
    return "inf" if x == math.inf else x


def _dec_float(x) -> float:
    if x == "inf":
        return math.inf
    if isinstance(x, (int, float)) and not isinstance(x, bool):
        return float(x)
    raise ReportError(f"expected a number or 'inf', got {x!r}")


def report_to_dict(report: ScanReport) -> dict[str, Any]:
    groups: dict[str, list] = {}
    for key, layer, r in report.scanned:
        groups.setdefault(key, []).append(
            {
                "name": r.tensor_name,
                "layer": layer,
                "rows": r.rows,
                "cols": r.cols,
                "snr_raw": _enc_float(r.raw_snr),
                "snr_normalized": _enc_float(r.normalized_snr),
                "sigma": r.bounds.sigma_estimate,
                "epsilon": r.bounds.epsilon,
                "signal_count": r.signal_count,
                "signal_sum": r.signal_sum,
                "noise_sum": r.noise_sum,
                "max_singular_value": r.max_singular_value,
            }
        )
    return {
        "model_id": report.model_id,
        "config": report.config,
        "groups": groups,
        "skipped": [{"name": s.name, "reason": s.reason} for s in report.skipped],
    }


def report_from_dict(doc: Any) -> ScanReport:
    try:
        scanned = []
        for key, entries in doc["groups"].items():
            for e in entries:
                rows, cols = int(e["rows"]), int(e["cols"])
                sigma = _dec_float(e["sigma"])
                bounds = mp_bounds(sigma, rows, cols)
                # keep the stored epsilon bit-exact rather than recomputing
                bounds = MpBounds(sigma, bounds.beta, _dec_float(e["epsilon"]), bounds.lambda_plus, bounds.lambda_minus)
                res = SnrResult(
                    tensor_name=str(e["name"]),
                    rows=rows,
                    cols=cols,
                    signal_sum=_dec_float(e["signal_sum"]),
                    noise_sum=_dec_float(e["noise_sum"]),
                    raw_snr=_dec_float(e["snr_raw"]),
                    normalized_snr=_dec_float(e["snr_normalized"]),
                    max_singular_value=_dec_float(e["max_singular_value"]),
                    bounds=bounds,
                    signal_count=int(e["signal_count"]),
                )
                layer = e["layer"]
                scanned.append((str(key), None if layer is None else int(layer), res))
        skipped = [Skipped(str(s["name"]), str(s["reason"])) for s in doc["skipped"]]
        return ScanReport(str(doc["model_id"]), scanned, skipped, dict(doc["config"]))
    except ReportError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise ReportError(f"malformed scan report: {exc!r}") from exc


def _dump(obj: Any, indent: int = 0) -> str:
    # json.dumps cannot format floats; this emits them with 17 significant
    # digits and otherwise matches json.dumps(sort_keys=True, indent=2)
    pad = "  " * (indent + 1)
    end = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_dump(v, indent + 1)}" for k, v in sorted(obj.items())]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        return "[\n" + ",\n".join(pad + _dump(v, indent + 1) for v in obj) + "\n" + end + "]"
    if isinstance(obj, float) and not isinstance(obj, bool):
        if not math.isfinite(obj):
            raise ValueError(f"cannot serialize {obj!r}")
        text = f"{obj:.17g}"
        return text if any(c in text for c in ".en") else text + ".0"
    return json.dumps(obj)


def dumps_report(report: ScanReport) -> str:
    return _dump(report_to_dict(report)) + "\n"


def write_report(report: ScanReport, path: str | os.PathLike) -> None:
    Path(path).write_text(dumps_report(report), encoding="utf-8")


def read_report(path: str | os.PathLike) -> ScanReport:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ReportError(f"{path}: not valid JSON ({exc})") from exc
    return report_from_dict(doc)
