"""commands.py – One function per subcommand.

Each command takes the resolved :class:`~app.config.RunConfig` plus the
parsed arguments and returns the process exit status.  Library errors
propagate; ``app.__main__`` maps them to exit codes.
"""

from __future__ import annotations

import json
import logging
import os
import sys
from argparse import Namespace

from anonymize import FileTable, bucket_sizes, bucket_skew, check_index_bytes, load_snapshot
from ground_truth import SUMMARY_NAME, read_ground_truth, verify_pipeline
from pipeline import collect_bucket_tables, run_pipeline, write_bucket_stats
from trace_stats import (
    DistributionBuilder,
    FitError,
    ReportKind,
    find_peaks,
    fit_as_dict,
    fit_piecewise_power_law,
    fit_power_law,
    size_peak_labels,
    write_json,
    write_report_tsv,
)
from workload_gen import default_workload_config, generate_workload, sidecar_paths
from xml_trace import TraceTruncatedError, open_trace_source, read_trace

from .config import ConfigError, RunConfig, parse_index_bytes

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_IO = 1
EXIT_CONFIG = 2
EXIT_VERIFY = 3


def _require(cfg: RunConfig, *keys: str) -> None:
    for key in keys:
        if not cfg.get(key):
            raise ConfigError(f"--{key.replace('_', '-')} is required for this command")


def _print_json(obj) -> None:
    json.dump(obj, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


# ── generate ──────────────────────────────────────────────────────────────────


def cmd_generate(cfg: RunConfig, args: Namespace) -> int:
    _require(cfg, "out")
    overrides = cfg.workload
    for key in ("seed", "num_clients", "num_files", "duration"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    overrides.setdefault("server_port", cfg.port)
    try:
        workload = default_workload_config(**overrides)
        workload.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid workload: {exc}") from exc

    paths = sidecar_paths(cfg.out)
    truth = generate_workload(
        workload, cfg.out,
        truth_path=cfg.truth or paths.truth_path,
        drops_path=cfg.drops or paths.drops_path,
    )
    _print_json({k: truth.expected[k] for k in sorted(truth.expected)})
    return EXIT_OK


# ── run ───────────────────────────────────────────────────────────────────────


def cmd_run(cfg: RunConfig, args: Namespace) -> int:
    _require(cfg, "input", "out")
    report = run_pipeline(
        cfg.input, cfg.out,
        server_port=cfg.port,
        index_bytes=cfg.index_bytes,
        client_bits=cfg.client_bits,
        drops_path=cfg.drops,
        horizon=cfg.fragment_horizon,
        client_snapshot=cfg.client_snapshot,
        file_snapshot=cfg.file_snapshot,
        resume=cfg.resume,
        report_dir=cfg.reports,
        loss_bucket=cfg.loss_bucket,
    )
    _print_json(report.as_dict())
    return EXIT_OK


# ── analyze ───────────────────────────────────────────────────────────────────


def write_analysis(builder: DistributionBuilder, cfg: RunConfig, report_dir: str) -> dict:
    """Write the five reports, fits, peaks and summary; return the summary."""
    os.makedirs(report_dir, exist_ok=True)
    reports = builder.reports()
    fits, peaks = {}, {}
    for kind, report in reports.items():
        write_report_tsv(report, os.path.join(report_dir, f"{kind.value}.tsv"))
        try:
            fits[kind.value] = fit_as_dict(fit_power_law(report, cfg.fit_range))
        except FitError as exc:
            fits[kind.value] = {"error": str(exc)}
        breakpoints = cfg.fit_breakpoints.get(kind.value)
        if breakpoints:
            try:
                fits[f"{kind.value}.piecewise"] = [
                    fit_as_dict(fit) for fit in fit_piecewise_power_law(report, breakpoints)
                ]
            except ValueError as exc:
                fits[f"{kind.value}.piecewise"] = {"error": str(exc)}
        found = find_peaks(report, cfg.peak_window, cfg.peak_prominence)
        if kind is ReportKind.FILE_SIZE_KB:
            peaks[kind.value] = [
                {"x": x, "y": y, "label": label} for x, y, label in size_peak_labels(found)
            ]
        else:
            peaks[kind.value] = [{"x": x, "y": y} for x, y in found]
    summary = builder.summary().as_dict()
    write_json(fits, os.path.join(report_dir, "fits.json"))
    write_json(peaks, os.path.join(report_dir, "peaks.json"))
    write_json(summary, os.path.join(report_dir, SUMMARY_NAME))
    return summary


def cmd_analyze(cfg: RunConfig, args: Namespace) -> int:
    _require(cfg, "input", "reports")
    builder = DistributionBuilder()
    status = EXIT_OK
    with open_trace_source(cfg.input) as fh:
        try:
            for event in read_trace(fh):
                builder.add(event)
        except TraceTruncatedError as exc:
            log.warning("writing partial reports: %s", exc)
            status = EXIT_IO
    summary = write_analysis(builder, cfg, cfg.reports)
    _print_json(summary)
    return status


# ── verify ────────────────────────────────────────────────────────────────────


def cmd_verify(cfg: RunConfig, args: Namespace) -> int:
    _require(cfg, "out", "reports")
    truth_path = cfg.truth or (sidecar_paths(cfg.input).truth_path if cfg.input else None)
    if not truth_path:
        raise ConfigError("--truth (or --input with a .truth sidecar) is required for verify")
    truth = read_ground_truth(truth_path)
    verdict = verify_pipeline(truth, cfg.out, cfg.reports, cfg.client_snapshot, cfg.file_snapshot)
    _print_json(verdict.as_dict())
    return EXIT_OK if verdict.passed else EXIT_VERIFY


# ── bucket-stats ──────────────────────────────────────────────────────────────


def _bucket_summary(table: FileTable) -> dict:
    sizes = bucket_sizes(table)
    return {
        "index_bytes": list(table.index_bytes),
        "files": len(table),
        "max_bucket": int(sizes.max()),
        "largest_buckets": [int(b) for b in sizes.argsort()[::-1][:4]],
        "skew": round(bucket_skew(table), 6),
    }


def cmd_bucket_stats(cfg: RunConfig, args: Namespace) -> int:
    if cfg.input:
        try:
            extra = [check_index_bytes(parse_index_bytes(p)) for p in (args.compare or [])]
        except ValueError as exc:
            raise ConfigError(f"--compare: {exc}") from exc
        pairs = [cfg.index_bytes, *extra]
        tables = list(collect_bucket_tables(cfg.input, pairs, cfg.port).values())
    elif cfg.file_snapshot:
        table = load_snapshot(cfg.file_snapshot)
        if not isinstance(table, FileTable):
            raise ConfigError(f"{cfg.file_snapshot!r} is not a file table snapshot")
        tables = [table]
    else:
        raise ConfigError("bucket-stats needs --input or --file-snapshot")

    if cfg.reports:
        os.makedirs(cfg.reports, exist_ok=True)
        for table in tables:
            i, j = table.index_bytes
            write_bucket_stats(table, os.path.join(cfg.reports, f"buckets_{i}_{j}.tsv"))
    _print_json([_bucket_summary(t) for t in tables])
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "run": cmd_run,
    "analyze": cmd_analyze,
    "verify": cmd_verify,
    "bucket-stats": cmd_bucket_stats,
}
