"""pipeline.py – From pcap capture to anonymized XML trace.

ingest → decode → anonymize → trace, one datagram at a time.  Decode
failures are counted per kind and never stop the run.  The run report
gathers the ingest counters, decode success rate, per-family message
counts and anonymization table statistics.
"""

from __future__ import annotations

import logging
import os
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional

from anonymize import (
    DEFAULT_CLIENT_BITS,
    DEFAULT_INDEX_BYTES,
    Anonymizer,
    ClientTable,
    FileTable,
    bucket_size_distribution,
    bucket_skew,
    check_index_bytes,
    load_snapshot,
    save_snapshot,
)
from ed2k_wire import (
    Announce,
    DecodeError,
    DecodeErrorKind,
    EdonkeyMessage,
    FileSearchAnswer,
    SourceSearchAnswer,
    SourceSearchQuery,
    client_id_from_ip,
    decode_message,
    family_of,
)
from ground_truth import LOSSES_NAME, RUN_REPORT_NAME
from pcap_ingest import (
    DEFAULT_FRAGMENT_HORIZON,
    DEFAULT_SERVER_PORT,
    IngestStats,
    cumulative_losses,
    loss_timeseries,
    read_pcap,
)
from trace_stats import write_json
from xml_trace import TraceEvent, TraceWriter, open_trace_sink

log = logging.getLogger(__name__)

DEFAULT_LOSS_BUCKET = 1.0  # seconds


@dataclass
class RunReport:
    ingest: IngestStats
    decoded: int = 0
    failures: Counter = field(default_factory=Counter)
    per_family: Counter = field(default_factory=Counter)
    distinct_clients: int = 0
    distinct_files: int = 0
    low_id_clients: int = 0
    high_id_clients: int = 0
    overflow_clients: int = 0
    clock_skew: int = 0
    bucket_skew: float = 0.0
    elapsed: float = 0.0  # wall-clock seconds of the decode loop

    @property
    def undecoded(self) -> int:
        return sum(self.failures.values())

    @property
    def messages_per_second(self) -> float:
        total = self.decoded + self.undecoded
        return total / self.elapsed if self.elapsed > 0 else 0.0

    @property
    def undecoded_percent(self) -> float:
        total = self.decoded + self.undecoded
        return 100.0 * self.undecoded / total if total else 0.0

    def as_dict(self) -> dict:
        return {
            "ingest": self.ingest.as_dict(),
            "decoded": self.decoded,
            "undecoded": self.undecoded,
            "undecoded_percent": round(self.undecoded_percent, 6),
            "failures": {kind.value: self.failures.get(kind.value, 0) for kind in DecodeErrorKind},
            "per_family": dict(sorted(self.per_family.items())),
            "distinct_clients": self.distinct_clients,
            "distinct_files": self.distinct_files,
            "low_id_clients": self.low_id_clients,
            "high_id_clients": self.high_id_clients,
            "overflow_clients": self.overflow_clients,
            "clock_skew": self.clock_skew,
            "bucket_skew": round(self.bucket_skew, 6),
            "elapsed_seconds": round(self.elapsed, 6),
            "messages_per_second": round(self.messages_per_second, 1),
        }


def file_ids_of(m: EdonkeyMessage) -> list:
    if isinstance(m, Announce):
        return [e.file_id for e in m.files]
    if isinstance(m, SourceSearchQuery):
        return list(m.file_ids)
    if isinstance(m, SourceSearchAnswer):
        return [m.file_id]
    if isinstance(m, FileSearchAnswer):
        return [e.file_id for e in m.results]
    return []


# ── Table persistence ─────────────────────────────────────────────────────────


class ResumeError(ValueError):
    """Snapshot tables that do not fit the requested run."""


def build_anonymizer(
    client_bits: int = DEFAULT_CLIENT_BITS,
    index_bytes: tuple[int, int] = DEFAULT_INDEX_BYTES,
    client_snapshot: Optional[str] = None,
    file_snapshot: Optional[str] = None,
    resume: bool = False,
) -> Anonymizer:
    """Fresh tables, or the snapshotted ones when resuming."""
    index_bytes = check_index_bytes(index_bytes)
    clients = files = None
    if resume and client_snapshot and os.path.isfile(client_snapshot):
        clients = load_snapshot(client_snapshot)
        if not isinstance(clients, ClientTable):
            raise ResumeError(f"{client_snapshot!r} is not a client table snapshot")
        log.info("resuming with %d clients from %s", len(clients), client_snapshot)
    if resume and file_snapshot and os.path.isfile(file_snapshot):
        files = load_snapshot(file_snapshot)
        if not isinstance(files, FileTable):
            raise ResumeError(f"{file_snapshot!r} is not a file table snapshot")
        if files.index_bytes != index_bytes:
            raise ResumeError(
                f"snapshot indexes buckets by bytes {files.index_bytes!r}, run uses {index_bytes!r}"
            )
        log.info("resuming with %d files from %s", len(files), file_snapshot)
    return Anonymizer(client_bits=client_bits, index_bytes=index_bytes, clients=clients, files=files)


# ── Run ───────────────────────────────────────────────────────────────────────


def write_losses(stats: IngestStats, path: str, bucket: float = DEFAULT_LOSS_BUCKET) -> None:
    series = loss_timeseries(stats, bucket)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# start\tlosses\tcumulative\n")
        for (start, n), (_, total) in zip(series, cumulative_losses(series)):
            fh.write(f"{start:.6f}\t{n}\t{total}\n")


def run_pipeline(
    input_path: str,
    out_path: str,
    server_port: int = DEFAULT_SERVER_PORT,
    index_bytes: tuple[int, int] = DEFAULT_INDEX_BYTES,
    client_bits: int = DEFAULT_CLIENT_BITS,
    drops_path: Optional[str] = None,
    horizon: float = DEFAULT_FRAGMENT_HORIZON,
    client_snapshot: Optional[str] = None,
    file_snapshot: Optional[str] = None,
    resume: bool = False,
    report_dir: Optional[str] = None,
    loss_bucket: float = DEFAULT_LOSS_BUCKET,
) -> RunReport:
    """Turn the capture at *input_path* into the trace at *out_path*.

    Raises ``FileNotFoundError``/``OSError`` on I/O problems and
    :class:`pcap_ingest.PcapFormatError` on a bad pcap header; the trace
    is then left without its closing tag.
    """
    anonymizer = build_anonymizer(client_bits, index_bytes, client_snapshot, file_snapshot, resume)
    reader = read_pcap(input_path, server_port, drops_path, horizon)
    report = RunReport(ingest=reader.stats)
    seq = 0

    log.info("reading %s (server port %d)", input_path, server_port)
    started = time.perf_counter()
    with open_trace_sink(out_path) as sink:
        writer = TraceWriter(sink)
        for datagram in reader:
            if anonymizer.t0 is None:
                anonymizer.t0 = reader.stats.first_timestamp
            try:
                message = decode_message(datagram.payload)
            except DecodeError as exc:
                report.failures[exc.kind.value] += 1
                log.debug("undecoded datagram at %.6f: %s", datagram.timestamp, exc)
                continue
            report.decoded += 1
            report.per_family[family_of(message)] += 1
            peer = client_id_from_ip(datagram.client_ip(server_port))
            anon = anonymizer.anonymize(message, datagram.timestamp, peer, datagram.to_server(server_port))
            writer.write(TraceEvent(seq, anon.rebased_us, anon.body, anon.peer, anon.to_server))
            seq += 1
        writer.close()
    report.elapsed = time.perf_counter() - started

    clients, files = anonymizer.clients, anonymizer.files
    report.distinct_clients = len(clients)
    report.distinct_files = len(files)
    report.low_id_clients = clients.low_ids
    report.high_id_clients = clients.high_ids
    report.overflow_clients = len(clients.overflow)
    report.clock_skew = anonymizer.stats.skewed
    report.bucket_skew = bucket_skew(files)
    if report.clock_skew:
        log.warning("%d timestamps preceded the capture start and were clamped", report.clock_skew)

    if client_snapshot:
        save_snapshot(clients, client_snapshot)
    if file_snapshot:
        save_snapshot(files, file_snapshot)
    if report_dir:
        os.makedirs(report_dir, exist_ok=True)
        write_json(report.as_dict(), os.path.join(report_dir, RUN_REPORT_NAME))
        write_losses(reader.stats, os.path.join(report_dir, LOSSES_NAME), loss_bucket)

    log.info(
        "%d messages decoded, %d undecoded (%.2f%%), %d clients, %d files, %.0f messages/s",
        report.decoded, report.undecoded, report.undecoded_percent,
        report.distinct_clients, report.distinct_files, report.messages_per_second,
    )
    return report


# ── Bucket diagnostics ────────────────────────────────────────────────────────


def collect_bucket_tables(
    input_path: str,
    index_pairs: Iterable[tuple[int, int]],
    server_port: int = DEFAULT_SERVER_PORT,
) -> dict[tuple[int, int], FileTable]:
    """Feed every decoded fileID of a capture into one FileTable per byte pair."""
    tables = {check_index_bytes(pair): FileTable(pair) for pair in index_pairs}
    for datagram in read_pcap(input_path, server_port):
        try:
            message = decode_message(datagram.payload)
        except DecodeError:
            continue
        for fid in file_ids_of(message):
            for table in tables.values():
                table.anon(fid)
    return tables


def write_bucket_stats(table: FileTable, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# index_bytes {table.index_bytes[0]},{table.index_bytes[1]} skew {bucket_skew(table):.3f}\n")
        for size, count in bucket_size_distribution(table):
            fh.write(f"{size}\t{count}\n")
