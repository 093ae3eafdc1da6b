"""Tests for pipeline – capture to trace, run report, snapshots and verification."""

import json
import os

import pytest

import pipeline
import workload_gen
from anonymize import bucket_skew, load_snapshot
from app.commands import write_analysis
from app.config import RunConfig
from ed2k_wire import SourceSearchQuery, encode_message
from ground_truth import check_leaks, read_ground_truth, verify_pipeline
from pcap_ingest import PcapFormatError
from trace_stats import DistributionBuilder, ReportKind, read_report_tsv
from workload_gen import WorkloadConfig
from xml_trace import open_trace_source, read_trace

NOISY = dict(
    seed=17,
    num_clients=300,
    num_files=600,
    duration=60.0,
    forged_fraction=0.05,
    malformed_rate=0.03,
    fragment_rate=0.05,
    broken_frame_rate=0.01,
    drop_schedule=[(1.0, 250000), (30.0, 266)],
    cohort_52=20,
    size_peaks=[(716800, 0.1)],
    low_id_fraction=0.1,
    search_rate=0.5,
    server_list_rate=0.2,
    corruption_mix={"truncate": 0.7, "opcode": 0.1, "magic": 0.1, "trailing": 0.1},
)


@pytest.fixture(scope="module")
def noisy_run(tmp_path_factory):
    """Generate a noisy workload, run it and analyze the trace."""
    root = tmp_path_factory.mktemp("noisy")
    pcap = str(root / "noisy.pcap")
    workload_gen.generate_workload(WorkloadConfig(**NOISY), pcap)
    paths = {
        "pcap": pcap,
        "trace": str(root / "trace.xml.gz"),
        "reports": str(root / "reports"),
        "clients": str(root / "clients.dktb"),
        "files": str(root / "files.dktb"),
    }
    report = pipeline.run_pipeline(
        pcap, paths["trace"], client_bits=16,
        client_snapshot=paths["clients"], file_snapshot=paths["files"],
        report_dir=paths["reports"],
    )
    builder = DistributionBuilder()
    with open_trace_source(paths["trace"]) as fh:
        for event in read_trace(fh):
            builder.add(event)
    write_analysis(builder, RunConfig(), paths["reports"])
    return paths, report, read_ground_truth(pcap + ".truth")


# ── End to end ───────────────────────────────────────────────────────────────


class TestEndToEnd:
    def test_decode_counts_match(self, noisy_run):
        _, report, truth = noisy_run
        exp = truth.expected
        assert report.decoded == exp["messages"]
        assert report.undecoded == exp["undecoded"] > 0
        for kind, count in report.failures.items():
            assert count == exp[f"failures.{kind}"]
        assert report.ingest.datagrams == exp["datagrams"]
        assert report.ingest.malformed == exp["malformed"]

    def test_drops_reported(self, noisy_run):
        paths, report, _ = noisy_run
        assert report.ingest.total_drops == 250266
        with open(os.path.join(paths["reports"], "losses.tsv")) as fh:
            last = fh.read().strip().splitlines()[-1]
        assert last.split("\t")[2] == "250266"

    def test_distributions_recovered(self, noisy_run):
        paths, _, truth = noisy_run
        for kind in ReportKind:
            got = read_report_tsv(os.path.join(paths["reports"], f"{kind.value}.tsv"), kind)
            assert got.points == truth.distributions[kind].points

    def test_cohort_visible(self, noisy_run):
        _, _, truth = noisy_run
        asked = truth.distributions[ReportKind.FILES_ASKED_PER_CLIENT].as_dict()
        assert asked.get(52, 0) >= 20

    def test_cohort_and_cd_rom_peaks(self, noisy_run):
        paths, _, _ = noisy_run
        with open(os.path.join(paths["reports"], "peaks.json")) as fh:
            peaks = json.load(fh)
        assert 52 in [p["x"] for p in peaks["FilesAskedPerClient"]]
        labelled = {p["x"]: p["label"] for p in peaks["FileSizeKB"]}
        assert labelled.get(716800) == "700 MB (CD-ROM)"

    def test_table_sizes(self, noisy_run):
        _, report, truth = noisy_run
        assert report.distinct_clients == len(truth.clients)
        assert report.distinct_files == len(truth.files)
        assert report.low_id_clients > 0

    def test_verify_passes(self, noisy_run):
        paths, _, truth = noisy_run
        verdict = verify_pipeline(truth, paths["trace"], paths["reports"], paths["clients"], paths["files"])
        assert verdict.passed, verdict.as_dict()

    def test_run_report_file(self, noisy_run):
        paths, report, _ = noisy_run
        with open(os.path.join(paths["reports"], "run_report.json")) as fh:
            stored = json.load(fh)
        assert stored == report.as_dict()
        assert stored["undecoded_percent"] == pytest.approx(
            100.0 * report.undecoded / (report.decoded + report.undecoded), abs=1e-6)

    def test_throughput_is_reported(self, noisy_run):
        _, report, _ = noisy_run
        assert report.elapsed > 0
        rate = (report.decoded + report.undecoded) / report.elapsed
        assert report.as_dict()["messages_per_second"] == pytest.approx(rate, abs=0.1)

    def test_piecewise_fits_written(self, noisy_run, tmp_path):
        paths, _, _ = noisy_run
        builder = DistributionBuilder()
        with open_trace_source(paths["trace"]) as fh:
            for event in read_trace(fh):
                builder.add(event)
        cfg = RunConfig()
        cfg.set("fit_breakpoints", {"FilesAskedPerClient": [10]})
        write_analysis(builder, cfg, str(tmp_path))
        with open(os.path.join(tmp_path, "fits.json")) as fh:
            fits = json.load(fh)
        regimes = fits["FilesAskedPerClient.piecewise"]
        assert len(regimes) == 2
        assert regimes[0]["fit_range"][1] == regimes[1]["fit_range"][0] == 10.0
        assert all(r["num_points"] >= 2 for r in regimes)

    def test_trace_starts_at_zero(self, noisy_run):
        paths, _, _ = noisy_run
        with open_trace_source(paths["trace"]) as fh:
            first = next(iter(read_trace(fh)))
        assert first.seq == 0
        assert first.rebased_us >= 0


# ── Single runs ──────────────────────────────────────────────────────────────


class TestRunPipeline:
    def test_minimal_capture(self, tmp_path):
        pcap, trace = str(tmp_path / "min.pcap"), str(tmp_path / "min.xml")
        workload_gen.generate_workload(WorkloadConfig(num_clients=1, num_files=2, asked_fraction=0.0), pcap)
        report = pipeline.run_pipeline(pcap, trace, client_bits=16)
        assert report.decoded == 1
        assert report.per_family == {"announce": 1}
        with open(trace, "rb") as fh:
            events = list(read_trace(fh))
        assert len(events) == 1
        assert events[0].rebased_us == 0
        assert events[0].peer == 0
        assert events[0].body.client_id == 0

    def test_resume_continues_numbering(self, tmp_path):
        first, second = str(tmp_path / "a.pcap"), str(tmp_path / "b.pcap")
        workload_gen.generate_workload(WorkloadConfig(seed=1, num_clients=5, num_files=5), first)
        workload_gen.generate_workload(WorkloadConfig(seed=2, num_clients=5, num_files=5), second)
        clients, files = str(tmp_path / "c.dktb"), str(tmp_path / "f.dktb")
        a = pipeline.run_pipeline(first, str(tmp_path / "a.xml"), client_bits=16,
                                  client_snapshot=clients, file_snapshot=files)
        b = pipeline.run_pipeline(second, str(tmp_path / "b.xml"), client_bits=16,
                                  client_snapshot=clients, file_snapshot=files, resume=True)
        assert b.distinct_files > a.distinct_files
        assert len(load_snapshot(files)) == b.distinct_files

    def test_resume_with_other_index_bytes(self, tmp_path):
        pcap = str(tmp_path / "a.pcap")
        workload_gen.generate_workload(WorkloadConfig(num_clients=2, num_files=2), pcap)
        files = str(tmp_path / "f.dktb")
        pipeline.run_pipeline(pcap, str(tmp_path / "a.xml"), client_bits=16, file_snapshot=files)
        with pytest.raises(ValueError):
            pipeline.run_pipeline(pcap, str(tmp_path / "b.xml"), index_bytes=(0, 1),
                                  client_bits=16, file_snapshot=files, resume=True)

    def test_bad_pcap(self, tmp_path):
        path = tmp_path / "junk.pcap"
        path.write_bytes(b"junk" * 10)
        with pytest.raises(PcapFormatError):
            pipeline.run_pipeline(str(path), str(tmp_path / "t.xml"))

    def test_file_ids_of(self):
        fids = (bytes(16), bytes([1]) * 16)
        assert pipeline.file_ids_of(SourceSearchQuery(fids)) == list(fids)
        assert encode_message(SourceSearchQuery(fids))[:3] == b"\xe3\x9a\x02"

    def test_truncations_dominate_failures(self, tmp_path):
        pcap = str(tmp_path / "broken.pcap")
        settings = dict(NOISY, malformed_rate=0.2, fragment_rate=0.0, broken_frame_rate=0.0,
                        corruption_mix={"truncate": 0.8, "opcode": 0.1, "magic": 0.07, "trailing": 0.03})
        workload_gen.generate_workload(WorkloadConfig(**settings), pcap)
        report = pipeline.run_pipeline(pcap, str(tmp_path / "t.xml"), client_bits=16)
        truth = read_ground_truth(pcap + ".truth")
        invalid = report.failures["StructurallyInvalid"]
        assert invalid == truth.expected["failures.StructurallyInvalid"]
        assert report.undecoded > 300
        assert invalid / report.undecoded >= 0.74


@pytest.mark.parametrize("seed", range(1, 11))
def test_trace_never_leaks_identifiers(tmp_path, seed):
    pcap, trace = str(tmp_path / "w.pcap"), str(tmp_path / "w.xml")
    workload_gen.generate_workload(WorkloadConfig(
        seed=seed, num_clients=40, num_files=120, duration=10.0, forged_fraction=0.1,
        malformed_rate=0.05, fragment_rate=0.1, low_id_fraction=0.2, search_rate=0.5,
        server_list_rate=0.2), pcap)
    pipeline.run_pipeline(pcap, trace, client_bits=16)
    result = check_leaks(read_ground_truth(pcap + ".truth"), trace)
    assert result.passed, result.detail


# ── Bucket diagnostics ───────────────────────────────────────────────────────


class TestBucketStats:
    def test_forged_prefixes_skew_leading_pair(self, tmp_path):
        pcap = str(tmp_path / "forged.pcap")
        workload_gen.generate_workload(
            WorkloadConfig(num_clients=50, num_files=600, forged_fraction=0.3), pcap)
        tables = pipeline.collect_bucket_tables(pcap, [(0, 1), (2, 3)])
        leading, middle = tables[(0, 1)], tables[(2, 3)]
        assert len(leading) == len(middle) == 600
        assert bucket_skew(leading) > 10 * bucket_skew(middle)

    def test_write_bucket_stats(self, tmp_path):
        pcap = str(tmp_path / "b.pcap")
        workload_gen.generate_workload(WorkloadConfig(num_clients=5, num_files=20), pcap)
        table = pipeline.collect_bucket_tables(pcap, [(2, 3)])[(2, 3)]
        out = str(tmp_path / "buckets_2_3.tsv")
        pipeline.write_bucket_stats(table, out)
        with open(out) as fh:
            lines = fh.read().splitlines()
        assert lines[0].startswith("# index_bytes 2,3")
        rows = [tuple(int(v) for v in line.split("\t")) for line in lines[1:]]
        assert sum(count for _, count in rows) == 65536
        assert sum(size * count for size, count in rows) == 20
