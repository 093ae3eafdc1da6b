"""Tests for trace_stats – distributions, power-law fits and peaks."""

import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import trace_stats
from ed2k_wire import (
    Announce,
    FileEntry,
    FileSearchAnswer,
    MetaTag,
    ServerListQuery,
    Source,
    SourceSearchAnswer,
    SourceSearchQuery,
    TagKind,
)
from trace_stats import DistributionReport, FitError, ReportKind
from xml_trace import TraceEvent

DIGEST = "d41d8cd98f00b204e9800998ecf8427e"


def entry(fid, kb):
    return FileEntry(fid, (MetaTag(TagKind.NAME, DIGEST), MetaTag(TagKind.SIZE, kb)))


def report(kind, counts):
    return trace_stats.report_from_counter(counts, kind)


def zipf_report(rng, a, n=100_000):
    return trace_stats.report_from_values(rng.zipf(a, n), ReportKind.PROVIDERS_PER_FILE)


def sample_trace():
    return [
        TraceEvent(0, 0, Announce(0, 4662, (entry(0, 716800), entry(1, 10))), peer=0),
        TraceEvent(1, 10, Announce(1, 4662, (entry(1, 99),)), peer=1),
        TraceEvent(2, 20, SourceSearchQuery((0, 1)), peer=2),
        TraceEvent(3, 30, SourceSearchQuery((1, 1)), peer=3),
        TraceEvent(4, 40, SourceSearchAnswer(1, (Source(0, 4662), Source(1, 4662))), peer=3, to_server=False),
        TraceEvent(5, 50, FileSearchAnswer((entry(2, 358400),)), peer=2, to_server=False),
        TraceEvent(6, 2_000_050, ServerListQuery(), peer=4),
    ]


# ── Reports ──────────────────────────────────────────────────────────────────


class TestReports:
    def test_from_values(self):
        r = trace_stats.report_from_values([1, 1, 2, 5], ReportKind.FILES_PER_PROVIDER)
        assert r.points == ((1, 2), (2, 1), (5, 1))
        assert r.total_entities == 4

    def test_empty(self):
        r = trace_stats.report_from_values([], ReportKind.FILE_SIZE_KB)
        assert r.points == ()
        assert r.total_entities == 0

    def test_counter_drops_zero_counts(self):
        r = report(ReportKind.ASKERS_PER_FILE, {3: 0, 1: 4, 2: 1})
        assert r.points == ((1, 4), (2, 1))

    @given(st.lists(st.integers(0, 500), max_size=200))
    def test_points_are_sorted_and_complete(self, values):
        r = trace_stats.report_from_values(values, ReportKind.FILES_PER_PROVIDER)
        xs = [x for x, _ in r.points]
        assert xs == sorted(set(values))
        assert sum(y for _, y in r.points) == len(values)


# ── Building from a trace ────────────────────────────────────────────────────


class TestDistributionBuilder:
    def test_sample_trace(self):
        reports = trace_stats.build_distributions(sample_trace())
        assert reports[ReportKind.PROVIDERS_PER_FILE].as_dict() == {1: 1, 2: 1}
        assert reports[ReportKind.FILES_PER_PROVIDER].as_dict() == {1: 1, 2: 1}
        assert reports[ReportKind.ASKERS_PER_FILE].as_dict() == {1: 1, 2: 1}
        assert reports[ReportKind.FILES_ASKED_PER_CLIENT].as_dict() == {1: 1, 2: 1}

    def test_first_size_wins(self):
        sizes = trace_stats.build_distributions(sample_trace())[ReportKind.FILE_SIZE_KB]
        assert sizes.as_dict() == {10: 1, 358400: 1, 716800: 1}

    def test_single_announce(self):
        events = [TraceEvent(0, 0, Announce(0, 4662, (entry(0, 1), entry(1, 2))), peer=0)]
        reports = trace_stats.build_distributions(events)
        assert reports[ReportKind.FILES_PER_PROVIDER].as_dict() == {2: 1}
        assert reports[ReportKind.PROVIDERS_PER_FILE].as_dict() == {1: 2}
        assert reports[ReportKind.ASKERS_PER_FILE].points == ()

    def test_empty_trace(self):
        reports = trace_stats.build_distributions([])
        assert all(r.points == () for r in reports.values())
        assert trace_stats.summary([]).messages == 0

    def test_summary(self):
        s = trace_stats.summary(sample_trace())
        assert s.messages == 7
        assert s.distinct_clients == 5
        assert s.distinct_files == 3
        assert s.span == pytest.approx(2.00005)
        assert s.per_type["announce"] == 2
        assert s.as_dict()["per_type"]["source-search-query"] == 2


# ── Power-law fits ───────────────────────────────────────────────────────────


class TestPowerLawFit:
    def test_exact_curve(self):
        r = report(ReportKind.PROVIDERS_PER_FILE, {x: round(1000 * x ** -2) for x in range(1, 11)})
        fit = trace_stats.fit_power_law(r, (1, 3))
        assert math.isclose(fit.exponent, -2.0, abs_tol=0.01)
        assert math.isclose(fit.prefactor, 1000.0, rel_tol=0.01)
        assert fit.num_points == 3

    @pytest.mark.parametrize("a, fit_range", [(1.5, (1, 100)), (2.0, (1, 30)), (2.5, (1, 20))])
    def test_recovers_zipf_exponent(self, a, fit_range):
        rng = np.random.default_rng(11)
        fit = trace_stats.fit_power_law(zipf_report(rng, a), fit_range)
        assert math.isclose(fit.exponent, -a, abs_tol=0.1)

    def test_predict(self):
        fit = trace_stats.PowerLawFit(-2.0, 1000.0, (1, 10), 0.0)
        assert fit.predict(10) == pytest.approx(10.0)

    def test_too_few_points(self):
        r = report(ReportKind.PROVIDERS_PER_FILE, {1: 10, 500: 1})
        with pytest.raises(FitError):
            trace_stats.fit_power_law(r, (1, 100))

    def test_piecewise(self):
        counts = {x: 1_000_000 // x for x in range(1, 11)}
        counts.update({x: 10_000_000 // (x * x) for x in range(10, 101)})
        fits = trace_stats.fit_piecewise_power_law(report(ReportKind.FILES_ASKED_PER_CLIENT, counts), [10])
        assert len(fits) == 2
        assert math.isclose(fits[0].exponent, -1.0, abs_tol=0.02)
        assert math.isclose(fits[1].exponent, -2.0, abs_tol=0.02)

    def test_piecewise_breakpoint_outside(self):
        r = report(ReportKind.FILES_ASKED_PER_CLIENT, {1: 5, 2: 3, 3: 1})
        with pytest.raises(ValueError):
            trace_stats.fit_piecewise_power_law(r, [50])

    def test_fit_as_dict(self):
        fit = trace_stats.PowerLawFit(-2.0, 1000.0, (1.0, 10.0), 0.5, 4)
        assert trace_stats.fit_as_dict(fit)["fit_range"] == [1.0, 10.0]


# ── Peaks ────────────────────────────────────────────────────────────────────


class TestPeaks:
    def test_cd_rom_spike(self):
        counts = {x: 5 for x in range(716780, 716821)}
        counts[716800] = 500
        peaks = trace_stats.find_peaks(report(ReportKind.FILE_SIZE_KB, counts))
        assert peaks == [(716800, 500)]
        assert trace_stats.size_peak_labels(peaks) == [(716800, 500, "700 MB (CD-ROM)")]

    def test_not_prominent_enough(self):
        counts = {x: 5 for x in range(100, 141)}
        counts[120] = 8
        assert trace_stats.find_peaks(report(ReportKind.FILE_SIZE_KB, counts)) == []

    def test_smallest_x_is_never_a_peak(self):
        counts = {1: 1000, 2: 1, 3: 1, 4: 1}
        assert trace_stats.find_peaks(report(ReportKind.FILE_SIZE_KB, counts)) == []

    def test_largest_x_can_be_a_peak(self):
        counts = {x: 1000 // x for x in range(1, 13)}
        counts[52] = 5
        assert trace_stats.find_peaks(report(ReportKind.FILES_ASKED_PER_CLIENT, counts)) == [(52, 5)]

    def test_monotone_report(self):
        counts = {x: 100_000 // (x * x) for x in range(1, 200)}
        assert trace_stats.find_peaks(report(ReportKind.PROVIDERS_PER_FILE, counts)) == []

    def test_isolated_point_against_empty_window(self):
        counts = {10: 5, 100: 6, 200: 3}
        assert trace_stats.find_peaks(report(ReportKind.FILE_SIZE_KB, counts)) == [(100, 6)]

    def test_baseline_uses_listed_neighbours_only(self):
        counts = {x: 2 for x in range(130, 160, 3)}
        counts[144] = 4
        assert trace_stats.find_peaks(report(ReportKind.FILE_SIZE_KB, counts)) == []

    def test_body_mode_is_not_a_peak(self):
        counts = {1: 10, 2: 40, 3: 80, 4: 100, 5: 90, 6: 70, 7: 50, 8: 30, 9: 20, 10: 10, 11: 5}
        assert trace_stats.find_peaks(report(ReportKind.FILES_PER_PROVIDER, counts)) == []

    def test_plateau_is_not_a_peak(self):
        counts = {x: 5 for x in range(1, 50)}
        counts[20] = counts[21] = 400
        assert trace_stats.find_peaks(report(ReportKind.FILE_SIZE_KB, counts)) == []

    def test_bad_window(self):
        with pytest.raises(ValueError):
            trace_stats.find_peaks(DistributionReport(ReportKind.FILE_SIZE_KB), window=0)

    def test_unlabelled_peak(self):
        assert trace_stats.size_peak_labels([(5000, 40)]) == [(5000, 40, "")]


# ── Output files ─────────────────────────────────────────────────────────────


class TestOutput:
    def test_tsv_round_trip(self, tmp_path):
        r = report(ReportKind.PROVIDERS_PER_FILE, {1: 40, 2: 10, 9: 1})
        path = str(tmp_path / "ProvidersPerFile.tsv")
        trace_stats.write_report_tsv(r, path)
        with open(path, encoding="utf-8") as fh:
            assert fh.read() == "1\t40\n2\t10\n9\t1\n"
        assert trace_stats.read_report_tsv(path, ReportKind.PROVIDERS_PER_FILE) == r

    def test_tsv_bad_line(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("1 40\n")
        with pytest.raises(ValueError):
            trace_stats.read_report_tsv(str(path), ReportKind.PROVIDERS_PER_FILE)

    def test_write_json(self, tmp_path):
        path = tmp_path / "summary.json"
        trace_stats.write_json({"b": 1, "a": 2}, str(path))
        text = path.read_text()
        assert text.endswith("}\n")
        assert text.index('"a"') < text.index('"b"')
        assert json.loads(text) == {"a": 2, "b": 1}
