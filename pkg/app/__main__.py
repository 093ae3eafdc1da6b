"""__main__.py – Command-line entry point.

Usage::

    python -m app generate --out corpus.pcap --seed 7
    python -m app run --input corpus.pcap --out trace.xml.gz --reports reports/
    python -m app analyze --input trace.xml.gz --reports reports/
    python -m app verify --input corpus.pcap --out trace.xml.gz --reports reports/
    python -m app bucket-stats --input corpus.pcap --index-bytes 0,1 --compare 2,3

Exit codes: 0 success, 1 I/O error, 2 configuration error, 3 verification
failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

from anonymize import SnapshotError
from ground_truth import SidecarError
from pcap_ingest import DropSidecarError, PcapFormatError
from pipeline import ResumeError
from xml_trace import TraceParseError

from . import __version__
from .commands import COMMANDS, EXIT_CONFIG, EXIT_IO
from .config import ConfigError, RunConfig, parse_index_bytes

log = logging.getLogger("app")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ed2k-trace",
        description="eDonkey server traffic: capture to anonymized XML trace, analysis and synthetic workloads.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", help="JSON config file (flags override it)")
        cmd.add_argument("--input", help="pcap capture (run, generate, bucket-stats) or trace (analyze)")
        cmd.add_argument("--port", type=int, help="server UDP port (default 4661)")
        cmd.add_argument("--out", help="trace path (run, verify) or pcap path (generate)")
        cmd.add_argument("--index-bytes", type=parse_index_bytes, help="fileID bytes selecting the bucket, e.g. 2,3")
        cmd.add_argument("--client-bits", type=int, help="width of the dense clientID table")
        cmd.add_argument("--reports", help="report directory")
        cmd.add_argument("--client-snapshot", help="client table snapshot path")
        cmd.add_argument("--file-snapshot", help="file table snapshot path")
        cmd.add_argument("--resume", action="store_true", default=None, help="start from the snapshots")
        cmd.add_argument("--drops", help="drop sidecar path")
        cmd.add_argument("--truth", help="ground-truth sidecar path")
        cmd.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR")
        if name == "generate":
            cmd.add_argument("--seed", type=int)
            cmd.add_argument("--clients", dest="num_clients", type=int)
            cmd.add_argument("--files", dest="num_files", type=int)
            cmd.add_argument("--duration", type=float)
        if name == "bucket-stats":
            cmd.add_argument("--compare", action="append", help="extra byte pair to compare, e.g. 0,1")
    return parser


_FLAG_KEYS = (
    "input", "port", "out", "index_bytes", "client_bits", "reports", "client_snapshot",
    "file_snapshot", "resume", "drops", "truth", "log_level",
)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig(args.config)
    cfg.update({key: getattr(args, key) for key in _FLAG_KEYS})
    cfg.validate()
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        logging.basicConfig(level=logging.INFO, format=LOG_FORMAT)
        log.error("%s", exc)
        return EXIT_CONFIG
    logging.basicConfig(level=getattr(logging, cfg.log_level), format=LOG_FORMAT)

    try:
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, ResumeError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except TraceParseError as exc:
        log.error("%s: %s", cfg.input, exc)
        return EXIT_IO
    except (OSError, PcapFormatError, DropSidecarError, SnapshotError, SidecarError) as exc:
        log.error("%s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
