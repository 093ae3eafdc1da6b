"""trace_stats.py – Distributions, power-law fits and peaks over a trace.

The analyzer consumes :class:`xml_trace.TraceEvent` streams in one pass:

* *provides*: distinct (client, file) pairs from Announce bodies,
* *asks*: distinct (client, file) pairs from source searches, the client
  being the message's peer,
* file sizes (KB) from the first Size tag seen for each file, in Announce
  and FileSearch answers.

Anonymized IDs are dense (0..N-1), so per-entity counts are plain
``numpy.bincount`` arrays.
"""

from __future__ import annotations

import enum
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from ed2k_wire import (
    Announce,
    FileSearchAnswer,
    SourceSearchAnswer,
    SourceSearchQuery,
    TagKind,
    message_type,
)
from xml_trace import TraceEvent

log = logging.getLogger(__name__)

DEFAULT_FIT_RANGE = (1, 100)
DEFAULT_PEAK_WINDOW = 10
DEFAULT_PEAK_PROMINENCE = 3.0

# KB sizes of the usual CD-ROM splits and 1 GB.
KNOWN_SIZES_KB = {
    716_800: "700 MB (CD-ROM)",
    358_400: "350 MB (1/2 CD-ROM)",
    238_933: "233 MB (1/3 CD-ROM)",
    179_200: "175 MB (1/4 CD-ROM)",
    1_433_600: "1400 MB (2 CD-ROMs)",
    1_048_576: "1 GB",
}


class ReportKind(enum.Enum):
    PROVIDERS_PER_FILE = "ProvidersPerFile"
    ASKERS_PER_FILE = "AskersPerFile"
    FILES_PER_PROVIDER = "FilesPerProvider"
    FILES_ASKED_PER_CLIENT = "FilesAskedPerClient"
    FILE_SIZE_KB = "FileSizeKB"


class FitError(ValueError):
    """Not enough points in the fit range."""


@dataclass(frozen=True)
class DistributionReport:
    """``points`` are ``(x, y)`` with x strictly increasing and y ≥ 1."""

    kind: ReportKind
    points: tuple[tuple[int, int], ...] = ()
    total_entities: int = 0

    def as_dict(self) -> dict[int, int]:
        return dict(self.points)


@dataclass(frozen=True)
class PowerLawFit:
    exponent: float
    prefactor: float
    fit_range: tuple[float, float]
    residual: float
    num_points: int = 0

    def predict(self, x: float) -> float:
        return self.prefactor * x ** self.exponent


# ── Reports ───────────────────────────────────────────────────────────────────


def report_from_values(values: Iterable[int], kind: ReportKind) -> DistributionReport:
    """Histogram of *values*: how many entities have each value."""
    arr = np.asarray(values if isinstance(values, np.ndarray) else list(values), dtype=np.int64)
    if arr.size == 0:
        return DistributionReport(kind)
    xs, ys = np.unique(arr, return_counts=True)
    points = tuple((int(x), int(y)) for x, y in zip(xs, ys))
    return DistributionReport(kind, points, int(arr.size))


def report_from_counter(counts: dict[int, int], kind: ReportKind) -> DistributionReport:
    """Report from an ``{x: y}`` mapping; zero counts are left out."""
    points = tuple(sorted((int(x), int(y)) for x, y in counts.items() if y > 0))
    return DistributionReport(kind, points, sum(y for _, y in points))


def _per_entity(pairs: np.ndarray, column: int) -> np.ndarray:
    if pairs.size == 0:
        return np.zeros(0, dtype=np.int64)
    counts = np.bincount(pairs[:, column])
    return counts[counts > 0]


def _pairs_array(pairs: set[tuple[int, int]]) -> np.ndarray:
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64)
    return np.fromiter((v for p in pairs for v in p), dtype=np.int64, count=2 * len(pairs)).reshape(-1, 2)


@dataclass
class TraceSummary:
    messages: int = 0
    distinct_clients: int = 0
    distinct_files: int = 0
    span: float = 0.0
    per_type: dict[str, int] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "messages": self.messages,
            "distinct_clients": self.distinct_clients,
            "distinct_files": self.distinct_files,
            "span": round(self.span, 6),
            "per_type": dict(sorted(self.per_type.items())),
        }


class DistributionBuilder:
    """Single-pass accumulator; feed events with :meth:`add`."""

    def __init__(self) -> None:
        self.provides: set[tuple[int, int]] = set()
        self.asks: set[tuple[int, int]] = set()
        self.sizes: dict[int, int] = {}
        self.clients: set[int] = set()
        self.files: set[int] = set()
        self.per_type: Counter = Counter()
        self.messages = 0
        self.first_us: Optional[int] = None
        self.last_us: Optional[int] = None

    def add(self, event: TraceEvent) -> None:
        body = event.body
        self.messages += 1
        self.per_type[message_type(body)] += 1
        t = event.rebased_us
        self.first_us = t if self.first_us is None else min(self.first_us, t)
        self.last_us = t if self.last_us is None else max(self.last_us, t)
        if event.peer is not None:
            self.clients.add(event.peer)

        if isinstance(body, Announce):
            self.clients.add(body.client_id)
            for entry in body.files:
                self.files.add(entry.file_id)
                self.provides.add((body.client_id, entry.file_id))
                self._note_size(entry)
        elif isinstance(body, SourceSearchQuery):
            self.files.update(body.file_ids)
            if event.peer is not None:
                self.asks.update((event.peer, f) for f in body.file_ids)
        elif isinstance(body, FileSearchAnswer):
            for entry in body.results:
                self.files.add(entry.file_id)
                self._note_size(entry)
        elif isinstance(body, SourceSearchAnswer):
            self.files.add(body.file_id)
            self.clients.update(s.client_id for s in body.sources)

    def _note_size(self, entry) -> None:
        if entry.file_id in self.sizes:
            return
        for tag in entry.tags:
            if tag.kind == TagKind.SIZE:
                self.sizes[entry.file_id] = tag.value
                return

    def reports(self) -> dict[ReportKind, DistributionReport]:
        provides = _pairs_array(self.provides)
        asks = _pairs_array(self.asks)
        return {
            ReportKind.PROVIDERS_PER_FILE: report_from_values(
                _per_entity(provides, 1), ReportKind.PROVIDERS_PER_FILE),
            ReportKind.ASKERS_PER_FILE: report_from_values(
                _per_entity(asks, 1), ReportKind.ASKERS_PER_FILE),
            ReportKind.FILES_PER_PROVIDER: report_from_values(
                _per_entity(provides, 0), ReportKind.FILES_PER_PROVIDER),
            ReportKind.FILES_ASKED_PER_CLIENT: report_from_values(
                _per_entity(asks, 0), ReportKind.FILES_ASKED_PER_CLIENT),
            ReportKind.FILE_SIZE_KB: report_from_values(
                list(self.sizes.values()), ReportKind.FILE_SIZE_KB),
        }

    def summary(self) -> TraceSummary:
        span = 0.0
        if self.first_us is not None:
            span = (self.last_us - self.first_us) / 1_000_000
        return TraceSummary(
            messages=self.messages,
            distinct_clients=len(self.clients),
            distinct_files=len(self.files),
            span=span,
            per_type=dict(self.per_type),
        )


def build_distributions(events: Iterable[TraceEvent]) -> dict[ReportKind, DistributionReport]:
    builder = DistributionBuilder()
    for event in events:
        builder.add(event)
    return builder.reports()


def summary(events: Iterable[TraceEvent]) -> TraceSummary:
    builder = DistributionBuilder()
    for event in events:
        builder.add(event)
    return builder.summary()


# ── Power-law fits ────────────────────────────────────────────────────────────


def _fit_points(report: DistributionReport, fit_range) -> tuple[np.ndarray, np.ndarray]:
    x_min, x_max = fit_range
    pts = [(x, y) for x, y in report.points if x > 0 and y > 0 and x_min <= x <= x_max]
    if len(pts) < 2:
        raise FitError(
            f"{report.kind.value}: need at least 2 points in range {tuple(fit_range)!r}, got {len(pts)}"
        )
    xs, ys = zip(*pts)
    return np.log(np.asarray(xs, dtype=float)), np.log(np.asarray(ys, dtype=float))


def fit_power_law(report: DistributionReport, fit_range=DEFAULT_FIT_RANGE) -> PowerLawFit:
    """Least-squares line through ``(log x, log y)``; the slope is the exponent.

    y = 1000·x^-2 gives ``exponent == -2`` and ``prefactor == 1000``.
    """
    lx, ly = _fit_points(report, fit_range)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    return PowerLawFit(
        exponent=float(slope),
        prefactor=float(math.exp(intercept)),
        fit_range=(float(fit_range[0]), float(fit_range[1])),
        residual=float(np.sqrt(np.mean(resid ** 2))),
        num_points=int(lx.size),
    )


def fit_piecewise_power_law(
    report: DistributionReport,
    breakpoints: Sequence[float],
) -> list[PowerLawFit]:
    """One fit per regime between consecutive breakpoints.

    Regimes are ``[x_first, b1]``, ``[b1, b2]`` … ``[bn, x_last]`` with both
    ends included.
    """
    if not report.points:
        raise FitError(f"{report.kind.value}: empty report")
    edges = [report.points[0][0], *sorted(breakpoints), report.points[-1][0]]
    if any(lo >= hi for lo, hi in zip(edges, edges[1:])):
        raise ValueError(f"breakpoints must lie strictly inside the report's x range, got {list(breakpoints)!r}")
    return [fit_power_law(report, (lo, hi)) for lo, hi in zip(edges, edges[1:])]


# ── Peaks ─────────────────────────────────────────────────────────────────────


def find_peaks(
    report: DistributionReport,
    window: int = DEFAULT_PEAK_WINDOW,
    prominence: float = DEFAULT_PEAK_PROMINENCE,
) -> list[tuple[int, int]]:
    """Points standing out of their ±*window* neighbourhood.

    A point is a peak when its y is strictly above every other listed point
    in ``[x - window, x + window]`` and above ``prominence × max(m, 1)``,
    where ``m`` is the median y of those listed neighbours (0 when there are
    none).  The smallest listed x is never a peak; the largest may be.
    """
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window!r}")
    points = report.points
    if len(points) < 2:
        return []
    xs = np.fromiter((x for x, _ in points), dtype=np.int64, count=len(points))
    ys = np.fromiter((y for _, y in points), dtype=np.int64, count=len(points))
    peaks = []
    for k in range(1, len(points)):
        x, y = int(xs[k]), int(ys[k])
        lo = np.searchsorted(xs, x - window, side="left")
        hi = np.searchsorted(xs, x + window, side="right")
        listed = np.concatenate((ys[lo:k], ys[k + 1:hi]))
        if listed.size and y <= listed.max():
            continue
        baseline = float(np.median(listed)) if listed.size else 0.0
        if y > prominence * max(baseline, 1.0):
            peaks.append((x, y))
    return peaks


def size_peak_labels(peaks: Iterable[tuple[int, int]], tolerance: int = 1) -> list[tuple[int, int, str]]:
    """Attach a name to size peaks close to a CD-ROM split or 1 GB."""
    labelled = []
    for x, y in peaks:
        label = ""
        for size, name in KNOWN_SIZES_KB.items():
            if abs(x - size) <= tolerance:
                label = name
                break
        labelled.append((x, y, label))
    return labelled


# ── Output ────────────────────────────────────────────────────────────────────


def write_report_tsv(report: DistributionReport, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for x, y in report.points:
            fh.write(f"{x}\t{y}\n")


def read_report_tsv(path: str, kind: ReportKind) -> DistributionReport:
    counts: dict[int, int] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                x, y = (int(v) for v in line.split("\t"))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: expected 'x<TAB>y', got {line!r}") from exc
            counts[x] = y
    return report_from_counter(counts, kind)


def fit_as_dict(fit: PowerLawFit) -> dict:
    return {
        "exponent": fit.exponent,
        "prefactor": fit.prefactor,
        "fit_range": list(fit.fit_range),
        "residual": fit.residual,
        "num_points": fit.num_points,
    }


def write_json(obj, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
