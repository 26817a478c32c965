"""layersnr command-line interface.

Usage:
    layersnr scan   --model PATH --out DIR [--batch-size N] [--include RE]... [--exclude RE]...
    layersnr select --model PATH --out DIR -p FRACTION
    layersnr report --out DIR [--format table|json]

Exit codes: 0 ok, 2 unreadable checkpoint, 3 nothing to scan, 4 malformed
or missing report, 64 usage error. Progress goes to stderr; results go to
files (scan, select) or stdout (report).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

from . import __version__
from .checkpoint import CheckpointError, open_checkpoint
from .scan import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_EXCLUDES,
    ReportError,
    ScanReport,
    discover,
    dumps_report,
    read_report,
    scan,
    write_report,
)
from .selection import PRESETS, coverage_stats, emit_plan, select

log = logging.getLogger("layersnr")

EXIT_OK = 0
EXIT_UNREADABLE = 2
EXIT_NOTHING_TO_SCAN = 3
EXIT_BAD_REPORT = 4
EXIT_USAGE = 64

REPORT_NAME = "snr_report.json"
PLAN_NAME = "unfrozen_parameters.yaml"
LOG_NAME = "snr_report.log"


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2, which is taken by "unreadable checkpoint"
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _fraction(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 < value <= 1.0:
        raise argparse.ArgumentTypeError(f"fraction must be in (0, 1], got {text}")
    return value


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="layersnr", description="Rank checkpoint weight matrices by SNR and plan which to train.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="debug output on stderr")
    parser.add_argument("-q", "--quiet", action="store_true", help="only errors on stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def scan_options(p: argparse.ArgumentParser) -> None:
        p.add_argument("--batch-size", type=_positive_int, default=DEFAULT_BATCH_SIZE,
                       help=f"tensors analyzed concurrently (default {DEFAULT_BATCH_SIZE})")
        p.add_argument("--include", action="append", default=[], metavar="RE",
                       help="only scan tensors whose name matches (repeatable)")
        p.add_argument("--exclude", action="append", default=[], metavar="RE",
                       help="skip tensors whose name matches (repeatable)")
        p.add_argument("--no-default-excludes", action="store_true",
                       help="also scan embedding and output-head matrices")

    def out_options(p: argparse.ArgumentParser) -> None:
        p.add_argument("--out", required=True, type=Path, help="output directory")
        p.add_argument("--report", type=Path, help=f"report path (default <out>/{REPORT_NAME})")

    p = sub.add_parser("scan", help="compute per-matrix SNRs and write the report")
    p.add_argument("--model", required=True, type=Path, help="checkpoint file or sharded directory")
    out_options(p)
    scan_options(p)

    p = sub.add_parser("select", help="write the unfrozen-parameter plan from a report")
    p.add_argument("--model", type=Path, help="checkpoint to scan if no report exists yet")
    out_options(p)
    frac = p.add_mutually_exclusive_group()
    frac.add_argument("-p", "--top-fraction", type=_fraction, help="fraction of each group to unfreeze (default 0.25)")
    frac.add_argument("--preset", choices=sorted(PRESETS), help="named fraction")
    p.add_argument("--plan", type=Path, help=f"plan path (default <out>/{PLAN_NAME})")
    p.add_argument("--rescan", action="store_true", help="scan --model even if a report exists")
    scan_options(p)

    p = sub.add_parser("report", help="print a saved report")
    out_options(p)
    p.add_argument("--format", choices=("table", "json"), default="table")
    return parser


def _report_path(args) -> Path:
    return args.report if args.report is not None else args.out / REPORT_NAME


def _run_scan(args) -> tuple[int, ScanReport | None]:
    try:
        manifest = open_checkpoint(args.model)
    except (CheckpointError, OSError) as exc:
        log.error("cannot read checkpoint %s: %s", args.model, exc)
        return EXIT_UNREADABLE, None

    defaults = () if args.no_default_excludes else DEFAULT_EXCLUDES
    try:
        groups, skipped = discover(manifest, args.include, args.exclude, defaults)
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_USAGE, None
    if not groups:
        log.error("no scannable 2-D tensors in %s after include/exclude filtering", args.model)
        return EXIT_NOTHING_TO_SCAN, None

    config = {"include": list(args.include), "exclude": list(args.exclude), "default_excludes": list(defaults)}
    started = time.time()
    report = scan(manifest, groups, args.batch_size, skipped=skipped,
                  model_id=Path(args.model).resolve().name, config=config)
    elapsed = time.time() - started
    if not report.scanned:
        log.error("every candidate tensor was skipped; see the report's skipped list")
        return EXIT_NOTHING_TO_SCAN, None

    args.out.mkdir(parents=True, exist_ok=True)
    path = _report_path(args)
    write_report(report, path)
    # run metadata lives beside the report so the report itself stays byte-stable
    (path.parent / LOG_NAME).write_text(
        json.dumps({
            "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "model": str(args.model),
            "batch_size": args.batch_size,
            "seconds": round(elapsed, 3),
            "scanned": len(report.scanned),
            "skipped": len(report.skipped),
        }, indent=2) + "\n",
        encoding="utf-8",
    )
    log.info("wrote %s (%d scanned, %d skipped)", path, len(report.scanned), len(report.skipped))
    return EXIT_OK, report


def cmd_scan(args) -> int:
    return _run_scan(args)[0]


def cmd_select(args) -> int:
    fraction = PRESETS[args.preset] if args.preset else (args.top_fraction or PRESETS["top25"])
    path = _report_path(args)

    if args.rescan or not path.exists():
        if args.model is None:
            log.error("no report at %s; pass --model to scan first", path)
            return EXIT_BAD_REPORT
        code, report = _run_scan(args)
        if code:
            return code
    else:
        try:
            report = read_report(path)
        except (ReportError, OSError) as exc:
            log.error("%s", exc)
            return EXIT_BAD_REPORT

    try:
        plan = select(report, fraction)
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_BAD_REPORT

    args.out.mkdir(parents=True, exist_ok=True)
    plan_path = args.plan if args.plan is not None else args.out / PLAN_NAME
    emit_plan(plan, plan_path)

    stats = coverage_stats(plan, report)
    groups = report.groups()
    for key in sorted(plan.selected):
        print(f"{key}: {len(plan.selected[key])}/{len(groups[key])}")
    print(f"unfrozen tensors: {stats.selected_tensors}/{stats.total_tensors}")
    print(f"unfrozen parameters: {stats.selected_params}/{stats.total_params} ({stats.param_fraction:.4f})")
    log.info("wrote %s", plan_path)
    return EXIT_OK


def _fmt_snr(x: float) -> str:
    return "inf" if x == float("inf") else f"{x:.6g}"


def format_table(report: ScanReport) -> str:
    lines = [f"model: {report.model_id}"]
    for key, members in report.groups().items():
        lines.append("")
        lines.append(f"[{key}]")
        lines.append(f"{'layer':>6}  {'snr_normalized':>14}  {'signal':>6}  shape")
        for layer, r in members:
            shown = "-" if layer is None else str(layer)
            lines.append(f"{shown:>6}  {_fmt_snr(r.normalized_snr):>14}  {r.signal_count:>6}  {r.rows}x{r.cols}")
    if report.skipped:
        lines.append("")
        lines.append("skipped:")
        for s in report.skipped:
            lines.append(f"  {s.name}: {s.reason}")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    path = _report_path(args)
    try:
        report = read_report(path)
    except (ReportError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_BAD_REPORT
    if args.format == "json":
        sys.stdout.write(dumps_report(report))
    else:
        sys.stdout.write(format_table(report))
    return EXIT_OK


def _setup_logging(verbose: int, quiet: bool) -> None:
    level = logging.ERROR if quiet else logging.DEBUG if verbose else logging.INFO
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    root = logging.getLogger("layersnr")
    root.handlers[:] = [handler]
    root.setLevel(level)
    root.propagate = False


COMMANDS = {"scan": cmd_scan, "select": cmd_select, "report": cmd_report}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose, args.quiet)
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
