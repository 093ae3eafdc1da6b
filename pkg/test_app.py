"""Tests for the app package – configuration layers and subcommand exit codes."""

import json
import os

import pytest

from app.__main__ import build_parser, main
from app.commands import EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_VERIFY
from app.config import ConfigError, RunConfig, parse_index_bytes


@pytest.fixture
def workspace(tmp_path):
    paths = {
        "pcap": str(tmp_path / "w.pcap"),
        "trace": str(tmp_path / "trace.xml"),
        "reports": str(tmp_path / "reports"),
        "clients": str(tmp_path / "clients.dktb"),
        "files": str(tmp_path / "files.dktb"),
    }
    status = main([
        "generate", "--out", paths["pcap"], "--seed", "5",
        "--clients", "100", "--files", "200", "--duration", "10",
    ])
    assert status == EXIT_OK
    return paths


def run_args(p):
    return [
        "run", "--input", p["pcap"], "--out", p["trace"], "--reports", p["reports"],
        "--client-bits", "16", "--client-snapshot", p["clients"], "--file-snapshot", p["files"],
    ]


# ── Configuration ────────────────────────────────────────────────────────────


class TestRunConfig:
    def test_defaults(self):
        cfg = RunConfig()
        assert cfg.port == 4661
        assert cfg.index_bytes == (2, 3)
        assert cfg.client_bits == 24
        assert cfg.fit_range == (1.0, 100.0)
        assert cfg.log_level == "INFO"
        cfg.validate()

    def test_update_skips_missing_flags(self):
        cfg = RunConfig()
        cfg.update({"port": 5000, "out": None})
        assert cfg.port == 5000
        assert cfg.out is None

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            RunConfig().set("colour", "blue")

    def test_file_layer(self, tmp_path):
        path = str(tmp_path / "cfg.json")
        with open(path, "w") as fh:
            json.dump({"port": 4665, "index_bytes": [0, 1], "workload": {"seed": 9}}, fh)
        cfg = RunConfig(path)
        assert cfg.port == 4665
        assert cfg.index_bytes == (0, 1)
        assert cfg.workload == {"seed": 9}

    def test_save_and_reload(self, tmp_path):
        path = str(tmp_path / "saved.json")
        cfg = RunConfig()
        cfg.set("peak_window", 4)
        cfg.save(path)
        assert RunConfig(path).peak_window == 4

    @pytest.mark.parametrize("content", ["{not json", "[1, 2]", '{"colour": 1}'])
    def test_bad_file(self, tmp_path, content):
        path = tmp_path / "bad.json"
        path.write_text(content)
        with pytest.raises(ConfigError):
            RunConfig(str(path))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            RunConfig(str(tmp_path / "none.json"))

    @pytest.mark.parametrize("key, value", [
        ("index_bytes", [3, 2]),
        ("index_bytes", [0, 16]),
        ("client_bits", 40),
        ("port", 70000),
        ("fit_range", [10, 1]),
        ("peak_window", 0),
        ("log_level", "LOUD"),
        ("loss_bucket", 0),
        ("fit_breakpoints", [10]),
        ("fit_breakpoints", {"Nope": [10]}),
        ("fit_breakpoints", {"FileSizeKB": ["ten"]}),
    ])
    def test_invalid_values(self, key, value):
        cfg = RunConfig()
        cfg.set(key, value)
        with pytest.raises(ConfigError):
            cfg.validate()

    def test_paths_must_differ(self):
        cfg = RunConfig()
        cfg.update({"input": "cap.pcap", "out": "cap.pcap"})
        with pytest.raises(ConfigError):
            cfg.validate()

    def test_parse_index_bytes(self):
        assert parse_index_bytes("0,1") == [0, 1]
        with pytest.raises(ConfigError):
            parse_index_bytes("0-1")


# ── Command line ─────────────────────────────────────────────────────────────


class TestCommandLine:
    def test_generate_writes_sidecars(self, workspace):
        assert os.path.isfile(workspace["pcap"] + ".truth")
        assert os.path.isfile(workspace["pcap"] + ".drops")

    def test_full_round(self, workspace, capsys):
        p = workspace
        capsys.readouterr()
        assert main(run_args(p)) == EXIT_OK
        report = json.loads(capsys.readouterr().out)
        assert report["decoded"] > 0
        assert main(["analyze", "--input", p["trace"], "--reports", p["reports"]]) == EXIT_OK
        for name in ("ProvidersPerFile.tsv", "FileSizeKB.tsv", "fits.json", "peaks.json", "summary.json"):
            assert os.path.isfile(os.path.join(p["reports"], name))
        assert main([
            "verify", "--input", p["pcap"], "--out", p["trace"], "--reports", p["reports"],
            "--client-snapshot", p["clients"], "--file-snapshot", p["files"],
        ]) == EXIT_OK

    def test_verify_detects_tampering(self, workspace):
        p = workspace
        assert main(run_args(p)) == EXIT_OK
        assert main(["analyze", "--input", p["trace"], "--reports", p["reports"]]) == EXIT_OK
        with open(os.path.join(p["reports"], "ProvidersPerFile.tsv"), "a") as fh:
            fh.write("999\t1\n")
        assert main([
            "verify", "--input", p["pcap"], "--out", p["trace"], "--reports", p["reports"],
            "--client-snapshot", p["clients"], "--file-snapshot", p["files"],
        ]) == EXIT_VERIFY

    def test_truncated_trace_gives_partial_reports(self, workspace):
        p = workspace
        assert main(run_args(p)) == EXIT_OK
        with open(p["trace"], "rb") as fh:
            data = fh.read()
        cut = p["trace"] + ".cut.xml"
        with open(cut, "wb") as fh:
            fh.write(data[: len(data) // 2])
        reports = p["reports"] + "-cut"
        assert main(["analyze", "--input", cut, "--reports", reports]) == EXIT_IO
        with open(os.path.join(reports, "summary.json")) as fh:
            assert json.load(fh)["messages"] > 0

    def test_bucket_stats(self, workspace):
        p = workspace
        status = main([
            "bucket-stats", "--input", p["pcap"], "--index-bytes", "0,1",
            "--compare", "2,3", "--reports", p["reports"],
        ])
        assert status == EXIT_OK
        assert os.path.isfile(os.path.join(p["reports"], "buckets_0_1.tsv"))
        assert os.path.isfile(os.path.join(p["reports"], "buckets_2_3.tsv"))

    def test_missing_input_is_io_error(self, tmp_path):
        args = ["run", "--input", str(tmp_path / "none.pcap"), "--out", str(tmp_path / "t.xml")]
        assert main(args) == EXIT_IO

    def test_required_flag(self, tmp_path):
        assert main(["run", "--input", str(tmp_path / "x.pcap")]) == EXIT_CONFIG

    def test_bad_index_bytes(self, tmp_path):
        args = ["run", "--input", "a.pcap", "--out", "t.xml", "--index-bytes", "3,2"]
        assert main(args) == EXIT_CONFIG

    def test_malformed_index_bytes_flag(self):
        with pytest.raises(SystemExit) as info:
            build_parser().parse_args(["run", "--index-bytes", "x"])
        assert info.value.code == 2

    def test_bad_workload(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"workload": {"malformed_rate": 3.0}}))
        args = ["generate", "--config", str(cfg), "--out", str(tmp_path / "w.pcap")]
        assert main(args) == EXIT_CONFIG

    def test_bucket_stats_needs_a_source(self):
        assert main(["bucket-stats"]) == EXIT_CONFIG

    def test_bad_compare_pair(self, workspace):
        args = ["bucket-stats", "--input", workspace["pcap"], "--compare", "3,2"]
        assert main(args) == EXIT_CONFIG

    def test_resume_with_other_index_bytes(self, workspace):
        p = workspace
        assert main(run_args(p)) == EXIT_OK
        args = run_args(p) + ["--resume", "--index-bytes", "0,1"]
        args[args.index("--out") + 1] = p["trace"] + ".again.xml"
        assert main(args) == EXIT_CONFIG

    def test_malformed_drop_sidecar(self, workspace, tmp_path):
        drops = tmp_path / "bad.drops"
        drops.write_text("yesterday lots\n")
        args = ["run", "--input", workspace["pcap"], "--out", str(tmp_path / "t.xml"),
                "--client-bits", "16", "--drops", str(drops)]
        assert main(args) == EXIT_IO

    def test_corrupt_snapshot(self, tmp_path):
        snapshot = tmp_path / "files.dktb"
        snapshot.write_bytes(b"DKTB")
        assert main(["bucket-stats", "--file-snapshot", str(snapshot)]) == EXIT_IO

    def test_piecewise_fits_from_config(self, workspace):
        p = workspace
        assert main(run_args(p)) == EXIT_OK
        cfg = os.path.join(os.path.dirname(p["pcap"]), "analyze.json")
        with open(cfg, "w") as fh:
            json.dump({"fit_breakpoints": {"ProvidersPerFile": [1e9]}}, fh)
        assert main(["analyze", "--config", cfg, "--input", p["trace"], "--reports", p["reports"]]) == EXIT_OK
        with open(os.path.join(p["reports"], "fits.json")) as fh:
            fits = json.load(fh)
        assert "error" in fits["ProvidersPerFile.piecewise"]
        assert "AskersPerFile.piecewise" not in fits
