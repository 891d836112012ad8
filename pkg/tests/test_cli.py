import subprocess
import sys

import pytest

from streamcp.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main, outliers_path, truth_path
from streamcp.io import iter_stream, read_report, read_stream

SMALL = ["--slices", "5", "--dims", "8x6", "--rank", "2", "--seed", "3"]


@pytest.fixture
def small_stream(tmp_path):
    path = str(tmp_path / "s.bin")
    assert main(["synth", path, *SMALL, "--sample-frac", "0.6"]) == EXIT_OK
    return path


class TestSynth:
    def test_byte_identical(self, tmp_path):
        a, b = str(tmp_path / "a.bin"), str(tmp_path / "b.bin")
        assert main(["synth", a, *SMALL]) == EXIT_OK
        assert main(["synth", b, *SMALL]) == EXIT_OK
        for pa, pb in [(a, b), (truth_path(a), truth_path(b)), (outliers_path(a), outliers_path(b))]:
            with open(pa, "rb") as fa, open(pb, "rb") as fb:
                assert fa.read() == fb.read()

    @pytest.mark.parametrize("frac,count", [("1", 1600), ("0.15", 240)])
    def test_entry_counts(self, tmp_path, frac, count):
        path = str(tmp_path / "s.bin")
        assert main(["synth", path, "--slices", "3", "--sample-frac", frac]) == EXIT_OK
        header, slices = read_stream(path)
        assert header.dims == (40, 40) and header.num_slices == 3
        assert all(len(m) == count for _, m in slices)
        assert all(len(m) == 1600 for _, m in iter_stream(truth_path(path)))

    @pytest.mark.parametrize("args", [["--rank", "50"], ["--sample-frac", "0"], ["--dims", "0x3"],
                                      ["--slices", "abc"]])
    def test_usage_errors(self, tmp_path, args):
        assert main(["synth", str(tmp_path / "s.bin"), *args]) == EXIT_USAGE


class TestRun:
    def test_report_with_truth(self, tmp_path, small_stream):
        report = str(tmp_path / "r.csv")
        rc = main(["run", small_stream, "--rank-init", "3", "--window", "3",
                   "--truth", truth_path(small_stream), "--report", report])
        assert rc == EXIT_OK
        rows, footer = read_report(report)
        assert [r["time_index"] for r in rows] == [1, 2, 3, 4, 5]
        assert all(r["relative_error"] is not None and r["relative_error"] >= 0.0 for r in rows)
        assert footer["config"]["window"] == 3 and footer["seed"] == 0

    def test_stdout_without_truth(self, small_stream, capsys):
        assert main(["run", small_stream, "--rank-init", "2", "--window", "2"]) == EXIT_OK
        rows, _ = read_report(capsys.readouterr().out)
        assert len(rows) == 5 and all(r["relative_error"] is None for r in rows)

    def test_engine_flags(self, tmp_path, small_stream):
        report = str(tmp_path / "r.csv")
        rc = main(["run", small_stream, "--rank-init", "3", "--window", "20", "--forgetting", "0.98",
                   "--tau-mode", "exact", "--no-include-temporal-in-shape", "--prior", "a0_gamma=1",
                   "--report", report])
        assert rc == EXIT_OK
        cfg = read_report(report)[1]["config"]
        assert cfg["mu"] == 0.98 and cfg["tau_mode"] == "exact"
        assert cfg["include_temporal_in_shape"] is False and cfg["priors"]["a0_gamma"] == 1.0

    def test_resume_matches_uninterrupted(self, tmp_path, small_stream):
        common = ["--rank-init", "3", "--window", "3", "--truth", truth_path(small_stream)]
        full, first, second = (str(tmp_path / f"{n}.csv") for n in ("full", "first", "second"))
        ckpt = str(tmp_path / "c.npz")
        assert main(["run", small_stream, *common, "--report", full]) == EXIT_OK
        assert main(["run", small_stream, *common, "--stop", "2", "--report", first,
                     "--save-checkpoint", ckpt]) == EXIT_OK
        assert main(["run", small_stream, "--resume", ckpt, "--truth", truth_path(small_stream),
                     "--report", second]) == EXIT_OK
        strip = lambda rows: [{k: v for k, v in r.items() if k != "wall_time"} for r in rows]
        rows_full = read_report(full)[0]
        rows_split = read_report(first)[0] + read_report(second)[0]
        assert strip(rows_split) == strip(rows_full)

    def test_missing_file(self, tmp_path):
        assert main(["run", str(tmp_path / "nope.bin")]) == EXIT_RUNTIME

    def test_malformed_file(self, tmp_path):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"junk")
        assert main(["run", str(bad)]) == EXIT_RUNTIME

    def test_truth_dims_mismatch(self, tmp_path, small_stream):
        other = str(tmp_path / "o.bin")
        main(["synth", other, "--slices", "5", "--dims", "4x4", "--rank", "2"])
        assert main(["run", small_stream, "--truth", truth_path(other)]) == EXIT_RUNTIME

    def test_corrupt_checkpoint(self, tmp_path, small_stream):
        ckpt = tmp_path / "c.npz"
        ckpt.write_bytes(b"not a checkpoint")
        assert main(["run", small_stream, "--resume", str(ckpt)]) == EXIT_RUNTIME

    @pytest.mark.parametrize("args", [["--window", "0"], ["--forgetting", "2"], ["--tau-mode", "x"],
                                      ["--prior", "zeta=1"], ["--stop", "-1"]])
    def test_usage_errors(self, small_stream, args):
        assert main(["run", small_stream, *args]) == EXIT_USAGE

    def test_no_command(self):
        assert main([]) == EXIT_USAGE


class TestEntryPoint:
    def test_module_runs(self, tmp_path):
        path = str(tmp_path / "s.bin")
        proc = subprocess.run([sys.executable, "-m", "streamcp.cli", "synth", path, *SMALL],
                              capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        proc = subprocess.run([sys.executable, "-m", "streamcp.cli", "run", path, "--window", "0"],
                              capture_output=True, text=True)
        assert proc.returncode == 1 and "usage error" in proc.stderr
