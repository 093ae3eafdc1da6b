"""ground_truth.py – Ground-truth sidecar of a synthetic workload and pipeline verification.

The generator records, for every datagram that will decode, the peer and
message in capture order.  From that it knows the exact anonymization
mapping (first appearance order, peer before body), the provide/ask
relations and the expected reports.  :func:`verify_pipeline` compares a
run's artifacts against it.

Sidecar layout: ``#`` comments, ``[section]`` headers, whitespace-separated
fields::

    [expected]      key value
    [provides]      client_key fid_hex
    [asks]          client_key fid_hex
    [clients]       client_key anon_index
    [files]         fid_hex anon_index size_kb|-
    [distributions] Kind x y
    [secrets]       pattern_hex
"""

from __future__ import annotations

import json
import logging
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Optional

import numpy as np

from anonymize import ClientTable, FileTable, load_snapshot
from ed2k_wire import (
    Announce,
    EdonkeyMessage,
    FileSearchAnswer,
    SourceSearchAnswer,
    SourceSearchQuery,
    TagKind,
    message_type,
)
from trace_stats import DistributionReport, ReportKind, read_report_tsv, report_from_values
from xml_trace import open_trace_source

log = logging.getLogger(__name__)

SIDECAR_HEADER = "# ed2k workload ground truth v1"
SECTIONS = ("expected", "provides", "asks", "clients", "files", "distributions", "secrets")

RUN_REPORT_NAME = "run_report.json"
LOSSES_NAME = "losses.tsv"
SUMMARY_NAME = "summary.json"


class SidecarError(ValueError):
    """Unreadable ground-truth sidecar."""


# ── Ground truth ──────────────────────────────────────────────────────────────


@dataclass
class GroundTruth:
    provides: set[tuple[int, bytes]] = field(default_factory=set)
    asks: set[tuple[int, bytes]] = field(default_factory=set)
    clients: dict[int, int] = field(default_factory=dict)
    files: dict[bytes, int] = field(default_factory=dict)
    sizes_kb: dict[bytes, int] = field(default_factory=dict)
    secrets: list[bytes] = field(default_factory=list)
    expected: dict[str, float] = field(default_factory=dict)
    distributions: dict[ReportKind, DistributionReport] = field(default_factory=dict)

    # ── recording ──

    def _client(self, key: int) -> None:
        if key not in self.clients:
            self.clients[key] = len(self.clients)

    def _file(self, fid: bytes) -> None:
        if fid not in self.files:
            self.files[fid] = len(self.files)

    def _entry(self, entry) -> None:
        self._file(entry.file_id)
        if entry.file_id in self.sizes_kb:
            return
        for tag in entry.tags:
            if tag.kind == TagKind.SIZE:
                self.sizes_kb[entry.file_id] = tag.value // 1024
                return

    def observe(self, peer: int, m: EdonkeyMessage) -> None:
        """Record a message that the pipeline will decode, in capture order."""
        self._client(peer)
        if isinstance(m, Announce):
            self._client(m.client_id)
            for entry in m.files:
                self._entry(entry)
                self.provides.add((m.client_id, entry.file_id))
        elif isinstance(m, SourceSearchQuery):
            for fid in m.file_ids:
                self._file(fid)
                self.asks.add((peer, fid))
        elif isinstance(m, SourceSearchAnswer):
            self._file(m.file_id)
            for source in m.sources:
                self._client(source.client_id)
        elif isinstance(m, FileSearchAnswer):
            for entry in m.results:
                self._entry(entry)

    def derive_distributions(self) -> dict[ReportKind, DistributionReport]:
        """The five reports, recomputed from the relations and sizes."""
        def per(pairs, column, kind):
            return report_from_values(list(Counter(p[column] for p in pairs).values()), kind)

        return {
            ReportKind.PROVIDERS_PER_FILE: per(self.provides, 1, ReportKind.PROVIDERS_PER_FILE),
            ReportKind.ASKERS_PER_FILE: per(self.asks, 1, ReportKind.ASKERS_PER_FILE),
            ReportKind.FILES_PER_PROVIDER: per(self.provides, 0, ReportKind.FILES_PER_PROVIDER),
            ReportKind.FILES_ASKED_PER_CLIENT: per(self.asks, 0, ReportKind.FILES_ASKED_PER_CLIENT),
            ReportKind.FILE_SIZE_KB: report_from_values(
                list(self.sizes_kb.values()), ReportKind.FILE_SIZE_KB),
        }

    def finish(self) -> None:
        self.distributions = self.derive_distributions()
        self.expected["distinct_clients"] = len(self.clients)
        self.expected["distinct_files"] = len(self.files)


def count_message(truth: GroundTruth, m: EdonkeyMessage) -> None:
    exp = truth.expected
    exp["messages"] = exp.get("messages", 0) + 1
    key = f"type.{message_type(m)}"
    exp[key] = exp.get(key, 0) + 1


# ── Sidecar I/O ───────────────────────────────────────────────────────────────


def _format_value(value) -> str:
    if isinstance(value, float) and not value.is_integer():
        return f"{value:.6f}"
    return str(int(value))


def write_ground_truth(truth: GroundTruth, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(SIDECAR_HEADER + "\n")
        fh.write("[expected]\n")
        for key in sorted(truth.expected):
            fh.write(f"{key} {_format_value(truth.expected[key])}\n")
        fh.write("[provides]\n")
        for client, fid in sorted(truth.provides):
            fh.write(f"{client} {fid.hex()}\n")
        fh.write("[asks]\n")
        for client, fid in sorted(truth.asks):
            fh.write(f"{client} {fid.hex()}\n")
        fh.write("[clients]\n")
        for key, index in truth.clients.items():
            fh.write(f"{key} {index}\n")
        fh.write("[files]\n")
        for fid, index in truth.files.items():
            size = truth.sizes_kb.get(fid)
            fh.write(f"{fid.hex()} {index} {'-' if size is None else size}\n")
        fh.write("[distributions]\n")
        for kind in ReportKind:
            report = truth.distributions.get(kind)
            for x, y in (report.points if report else ()):
                fh.write(f"{kind.value} {x} {y}\n")
        fh.write("[secrets]\n")
        for secret in truth.secrets:
            fh.write(secret.hex() + "\n")


def read_ground_truth(path: str) -> GroundTruth:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"ground-truth sidecar not found: {path!r}")
    truth = GroundTruth()
    points: dict[ReportKind, dict[int, int]] = {kind: {} for kind in ReportKind}
    section: Optional[str] = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1]
                if section not in SECTIONS:
                    raise SidecarError(f"{path}:{lineno}: unknown section {section!r}")
                continue
            parts = line.split()
            try:
                if section == "expected":
                    key, value = parts
                    truth.expected[key] = float(value) if "." in value else int(value)
                elif section in ("provides", "asks"):
                    client, fid = parts
                    rel = truth.provides if section == "provides" else truth.asks
                    rel.add((int(client), bytes.fromhex(fid)))
                elif section == "clients":
                    key, index = parts
                    truth.clients[int(key)] = int(index)
                elif section == "files":
                    fid_hex, index, size = parts
                    fid = bytes.fromhex(fid_hex)
                    truth.files[fid] = int(index)
                    if size != "-":
                        truth.sizes_kb[fid] = int(size)
                elif section == "distributions":
                    kind, x, y = parts
                    points[ReportKind(kind)][int(x)] = int(y)
                elif section == "secrets":
                    (secret,) = parts
                    truth.secrets.append(bytes.fromhex(secret))
                else:
                    raise SidecarError(f"{path}:{lineno}: data outside a section")
            except ValueError as exc:
                if isinstance(exc, SidecarError):
                    raise
                raise SidecarError(f"{path}:{lineno}: cannot parse {line!r} in [{section}]") from exc
    for kind, counts in points.items():
        pts = tuple(sorted(counts.items()))
        truth.distributions[kind] = DistributionReport(kind, pts, sum(y for _, y in pts))
    return truth


# ── Leak scanning ─────────────────────────────────────────────────────────────

_PREFIX = 8


def _window_values(arr: np.ndarray, width: int) -> np.ndarray:
    """Big-endian integer value of every *width*-byte window of *arr*."""
    n = arr.size - width + 1
    if n <= 0:
        return np.zeros(0, dtype=np.uint64)
    values = np.zeros(n, dtype=np.uint64)
    for k in range(width):
        values = (values << np.uint64(8)) | arr[k:k + n].astype(np.uint64)
    return values


class LeakScanner:
    """Finds any of many byte patterns in a byte stream.

    Patterns shorter than 8 bytes are matched by their exact window value,
    longer ones by their 8-byte prefix and then compared in full.
    """

    def __init__(self, secrets: Iterable[bytes]) -> None:
        self.secrets = sorted({bytes(s) for s in secrets if s})
        self.max_len = max((len(s) for s in self.secrets), default=0)
        self._short: dict[int, dict[int, bytes]] = {}
        self._long: dict[int, list[bytes]] = {}
        for s in self.secrets:
            if len(s) < _PREFIX:
                self._short.setdefault(len(s), {})[int.from_bytes(s, "big")] = s
            else:
                self._long.setdefault(int.from_bytes(s[:_PREFIX], "big"), []).append(s)
        self._short_keys = {
            width: np.fromiter(table, dtype=np.uint64, count=len(table))
            for width, table in self._short.items()
        }
        self._long_keys = np.fromiter(self._long, dtype=np.uint64, count=len(self._long))

    def scan(self, data: bytes) -> set[bytes]:
        found: set[bytes] = set()
        if not self.secrets or not data:
            return found
        arr = np.frombuffer(data, dtype=np.uint8)
        for width, keys in self._short_keys.items():
            values = _window_values(arr, width)
            for v in np.unique(values[np.isin(values, keys)]):
                found.add(self._short[width][int(v)])
        if self._long:
            values = _window_values(arr, _PREFIX)
            for pos in np.nonzero(np.isin(values, self._long_keys))[0]:
                pos = int(pos)
                for s in self._long[int(values[pos])]:
                    if data[pos:pos + len(s)] == s:
                        found.add(s)
        return found

    def scan_stream(self, source: BinaryIO, chunk_size: int = 1 << 20) -> set[bytes]:
        found: set[bytes] = set()
        overlap = max(self.max_len - 1, 0)
        tail = b""
        while True:
            chunk = source.read(chunk_size)
            if not chunk:
                break
            buf = tail + chunk
            found |= self.scan(buf)
            tail = buf[-overlap:] if overlap else b""
        return found


def scan_for_leaks(data: bytes, secrets: Iterable[bytes]) -> set[bytes]:
    """Secrets occurring anywhere in *data*."""
    return LeakScanner(secrets).scan(data)


# ── Verification ──────────────────────────────────────────────────────────────


@dataclass
class CheckResult:
    name: str
    status: str  # "pass", "fail" or "missing"
    detail: str = ""

    @property
    def passed(self) -> bool:
        return self.status == "pass"


@dataclass
class VerifyReport:
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def as_dict(self) -> dict:
        return {
            "passed": self.passed,
            "checks": {c.name: {"status": c.status, "detail": c.detail} for c in self.checks},
        }


def _missing(name: str, *paths: Optional[str]) -> Optional[CheckResult]:
    absent = [p for p in paths if not p or not os.path.isfile(p)]
    if absent:
        return CheckResult(name, "missing", f"artifact not found: {absent[0]!r}")
    return None


def _result(name: str, problems: list[str]) -> CheckResult:
    if problems:
        return CheckResult(name, "fail", "; ".join(problems[:5]))
    return CheckResult(name, "pass")


def check_decode_counts(truth: GroundTruth, run_report: dict) -> CheckResult:
    exp = truth.expected
    problems = []
    if run_report.get("decoded") != exp.get("messages", 0):
        problems.append(f"decoded {run_report.get('decoded')!r}, expected {exp.get('messages', 0)!r}")
    failures = run_report.get("failures", {})
    for key, value in exp.items():
        if key.startswith("failures."):
            kind = key.split(".", 1)[1]
            if failures.get(kind, 0) != value:
                problems.append(f"{kind} failures {failures.get(kind, 0)!r}, expected {value!r}")
    ingest = run_report.get("ingest", {})
    for key in ("packets_seen", "fragments", "fragment_groups", "malformed", "datagrams"):
        if key in exp and ingest.get(key) != exp[key]:
            problems.append(f"ingest {key} {ingest.get(key)!r}, expected {exp[key]!r}")
    return _result("decode", problems)


def check_tables(truth: GroundTruth, clients: ClientTable, files: FileTable) -> CheckResult:
    problems = []
    if len(clients) != len(truth.clients):
        problems.append(f"{len(clients)} clients anonymized, expected {len(truth.clients)}")
    if len(files) != len(truth.files):
        problems.append(f"{len(files)} files anonymized, expected {len(truth.files)}")
    for key, index in truth.clients.items():
        got = clients.lookup(key)
        if got != index:
            problems.append(f"client {key} -> {got!r}, expected {index}")
            break
    for fid, index in truth.files.items():
        got = files.lookup(fid)
        if got != index:
            problems.append(f"file {fid.hex()} -> {got!r}, expected {index}")
            break
    return _result("tables", problems)


def check_distributions(truth: GroundTruth, report_dir: str) -> CheckResult:
    problems = []
    for kind in ReportKind:
        path = os.path.join(report_dir, f"{kind.value}.tsv")
        if not os.path.isfile(path):
            return CheckResult("distributions", "missing", f"artifact not found: {path!r}")
        got = read_report_tsv(path, kind)
        want = truth.distributions.get(kind, DistributionReport(kind))
        if got.points != want.points:
            problems.append(f"{kind.value} differs from the expected distribution")
    summary_path = os.path.join(report_dir, SUMMARY_NAME)
    if os.path.isfile(summary_path):
        with open(summary_path, "r", encoding="utf-8") as fh:
            summary = json.load(fh)
        for key in ("messages", "distinct_clients", "distinct_files"):
            if key in truth.expected and summary.get(key) != truth.expected[key]:
                problems.append(f"summary {key} {summary.get(key)!r}, expected {truth.expected[key]!r}")
    return _result("distributions", problems)


def check_leaks(truth: GroundTruth, trace_path: str) -> CheckResult:
    with open_trace_source(trace_path) as fh:
        leaked = LeakScanner(truth.secrets).scan_stream(fh)
    if leaked:
        sample = sorted(leaked)[0]
        return CheckResult("leaks", "fail", f"{len(leaked)} secret patterns found, e.g. {sample!r}")
    return CheckResult("leaks", "pass")


def check_losses(truth: GroundTruth, run_report: dict, losses_path: str) -> CheckResult:
    expected = truth.expected.get("drops", 0)
    problems = []
    total = 0
    with open(losses_path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip() and not line.startswith("#"):
                total = int(line.split("\t")[2])
    if total != expected:
        problems.append(f"cumulative losses end at {total}, expected {expected}")
    reported = run_report.get("ingest", {}).get("drops")
    if reported != expected:
        problems.append(f"run report counts {reported!r} drops, expected {expected}")
    return _result("losses", problems)


def verify_pipeline(
    truth: GroundTruth,
    trace_path: str,
    report_dir: str,
    client_snapshot: Optional[str] = None,
    file_snapshot: Optional[str] = None,
) -> VerifyReport:
    """Compare a run's artifacts with the ground truth, one check per stage."""
    report = VerifyReport()
    run_report_path = os.path.join(report_dir, RUN_REPORT_NAME)
    run_report: Optional[dict] = None
    if os.path.isfile(run_report_path):
        with open(run_report_path, "r", encoding="utf-8") as fh:
            run_report = json.load(fh)

    report.checks.append(
        _missing("decode", run_report_path) or check_decode_counts(truth, run_report)
    )

    missing = _missing("tables", client_snapshot, file_snapshot)
    if missing:
        report.checks.append(missing)
    else:
        clients, files = load_snapshot(client_snapshot), load_snapshot(file_snapshot)
        if not isinstance(clients, ClientTable) or not isinstance(files, FileTable):
            report.checks.append(CheckResult("tables", "fail", "snapshot kinds do not match"))
        else:
            report.checks.append(check_tables(truth, clients, files))

    report.checks.append(
        _missing("distributions", os.path.join(report_dir, f"{ReportKind.PROVIDERS_PER_FILE.value}.tsv"))
        or check_distributions(truth, report_dir)
    )
    report.checks.append(_missing("leaks", trace_path) or check_leaks(truth, trace_path))

    losses_path = os.path.join(report_dir, LOSSES_NAME)
    report.checks.append(
        _missing("losses", run_report_path, losses_path) or check_losses(truth, run_report, losses_path)
    )

    for check in report.checks:
        log.info("check %-13s %s %s", check.name, check.status, check.detail)
    return report
