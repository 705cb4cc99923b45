import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from mudicho import kernels
from mudicho.cli import run


def invoke(capsys, *argv):
    status = run(list(argv))
    out = capsys.readouterr().out
    return status, out


def report_of(capsys, *argv):
    status, out = invoke(capsys, *argv)
    assert status == 0, out
    doc = json.loads(out)
    assert set(doc) == {"report", "provenance"}
    return doc["report"]


def csv_of(capsys, *argv):
    status, out = invoke(capsys, *argv, "--format", "csv")
    assert status == 0, out
    rows = list(csv.reader(io.StringIO(out)))
    return rows[0], rows[1:]


class TestDichotomy:
    def test_declared_projection(self, capsys):
        rep = report_of(capsys, "dichotomy", "example42", "--window", "512")
        assert rep["verdict"] == "strong_dichotomy"
        assert rep["projection_source"] == "declared"
        assert rep["K"] == pytest.approx(1.0, abs=1e-9)
        assert rep["lambda"] == pytest.approx(1.0, abs=1e-9)
        assert "samples" not in rep

    def test_estimated_projection(self, capsys):
        rep = report_of(capsys, "dichotomy", "example42", "--projection", "estimated")
        assert rep["projection_source"] == "estimated"
        np.testing.assert_allclose(rep["projection"]["P0"], [[1, 0], [0, 0]], atol=1e-10)

    def test_samples_out(self, capsys):
        rep = report_of(capsys, "dichotomy", "example42", "--samples-out")
        assert len(rep["samples"]["n"]) == rep["fit"]["pair_count"]

    def test_csv(self, capsys):
        header, rows = csv_of(capsys, "dichotomy", "example42")
        assert header == ["n", "m", "log_mu_ratio", "y1", "y2", "y3", "y4"]
        assert all(int(r[1]) >= int(r[0]) for r in rows)

    def test_rate_override_loses_dichotomy(self, capsys):
        rep = report_of(capsys, "dichotomy", "example42", "--rate", "exponential")
        assert rep["verdict"] == "none"


class TestSpectrum:
    def test_example42(self, capsys):
        rep = report_of(capsys, "spectrum", "example42", "--window", "512")
        np.testing.assert_allclose(rep["intervals"], [[-1, -1], [1, 1]], atol=1e-2)
        assert rep["conditions"]["gap_ok"] is True

    def test_zero_in_spectrum_reported(self, capsys):
        with pytest.warns(UserWarning):
            rep = report_of(capsys, "spectrum", "identity", "--window", "64")
        assert rep["conditions"]["error"]["error"] == "not_hyperbolic"

    def test_csv(self, capsys):
        header, rows = csv_of(capsys, "spectrum", "example42", "--tau-min", "-0.5", "--tau-max", "0.5")
        assert header == ["tau", "verdict", "lambda_fit", "a_fit"]
        taus = [float(r[0]) for r in rows]
        assert taus == sorted(taus)


class TestRescale:
    def test_anchors(self, capsys):
        rep = report_of(capsys, "rescale", "example42", "--window", "512")
        assert rep["anchors"] == [0, 1, 2, 7, 20, 54, 148, 403]
        assert rep["required_window"] == 403
        assert len(rep["B"]) == rep["horizon"] == 7

    def test_csv(self, capsys):
        header, rows = csv_of(capsys, "rescale", "example42", "--horizon", "3")
        assert header == ["n", "k_n", "k_next", "B_00", "B_01", "B_10", "B_11"]
        assert [r[:3] for r in rows] == [["0", "0", "1"], ["1", "1", "2"], ["2", "2", "7"]]


class TestLinearize:
    def test_report(self, capsys):
        rep = report_of(capsys, "linearize", "example42", "--window", "32", "--samples", "40")
        assert rep["residual_ok"]
        assert rep["residual"]["samples"] == 40
        assert rep["field"]["anchors"] == [0, 1, 2, 7, 20]
        assert "conjugacy_samples" not in rep

    def test_samples_out(self, capsys):
        rep = report_of(capsys, "linearize", "example42", "--window", "32", "--samples", "10", "--samples-out")
        assert len(rep["conjugacy_samples"]) == 10
        assert set(rep["conjugacy_samples"][0]) == {"k", "x", "psi"}

    def test_csv(self, capsys):
        header, rows = csv_of(capsys, "linearize", "example42", "--window", "32", "--samples", "15")
        assert header == ["k", "x1", "x2", "residual"]
        assert len(rows) == 15


class TestVerify:
    def test_all_pass(self, capsys):
        rep = report_of(capsys, "verify", "example42")
        names = [c["check"] for c in rep["checks"]]
        assert names == ["rescale-identity", "equivalence", "conditions", "cocycle", "gronwall", "fn-series"]
        assert rep["passed"]
        assert rep["checks"][0]["passed"] is None

    def test_failed_check_exits_2(self, capsys):
        status, out = invoke(capsys, "verify", "band_only", "--check", "conditions")
        assert status == 2
        assert json.loads(out)["report"]["passed"] is False

    def test_csv(self, capsys):
        header, rows = csv_of(capsys, "verify", "example42", "--check", "cocycle")
        assert header == ["check", "passed", "value", "threshold", "condition"]
        assert rows[0][:2] == ["cocycle", "True"]


class TestFlow:
    def test_transfer(self, capsys):
        rep = report_of(capsys, "flow", "example55", "--t", "4", "--s", "2", "--window", "3")
        np.testing.assert_allclose(rep["transfer"], [[0.5, 0], [0, 2]], atol=1e-8)
        assert len(rep["unit_transfers"]) == 3

    def test_csv(self, capsys):
        header, rows = csv_of(capsys, "flow", "example55", "--window", "3")
        assert header == ["i", "t", "A_00", "A_01", "A_10", "A_11"]
        assert float(rows[2][2]) == pytest.approx(0.75, abs=1e-10)


class TestErrors:
    def error_of(self, capsys, expected_status, *argv):
        status, out = invoke(capsys, *argv)
        assert status == expected_status
        doc = json.loads(out)
        assert set(doc) == {"error", "provenance"}
        return doc["error"]

    def test_missing_file(self, capsys):
        err = self.error_of(capsys, 2, "dichotomy", "nowhere.json")
        assert err["error"] == "file_not_found"

    def test_schema_error(self, capsys, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"kind": "discrete", "dim": 1}))
        err = self.error_of(capsys, 2, "dichotomy", str(path))
        assert err["error"] == "schema"

    def test_bad_const(self, capsys):
        assert self.error_of(capsys, 2, "dichotomy", "example42", "--const", "bad")["error"] == "validation"

    def test_flow_needs_continuous(self, capsys):
        assert self.error_of(capsys, 2, "flow", "example42")["error"] == "configuration"

    def test_short_window_exits_3(self, capsys):
        err = self.error_of(capsys, 3, "dichotomy", "example42", "--window", "16", "--projection", "estimated")
        assert err["error"] == "window"

    def test_window_exhausted_exits_3(self, capsys):
        err = self.error_of(capsys, 3, "rescale", "example42", "--horizon", "9")
        assert err["error"] == "window_exhausted"
        assert err["witness"] == {"required_window": 2980}


class TestProvenance:
    def test_fields(self, capsys):
        status, out = invoke(capsys, "rescale", "example42", "--horizon", "2")
        prov = json.loads(out)["provenance"]
        assert prov["schema"] == "mudicho.report/1"
        assert prov["system"] == "example42"
        assert len(prov["system_sha256"]) == 64
        assert prov["config"]["horizon"] == 2
        assert prov["versions"]["backend"] == kernels.BACKEND

    def test_deterministic(self, capsys):
        argv = ("linearize", "example42", "--window", "32", "--samples", "20", "--seed", "4")
        first = invoke(capsys, *argv)[1]
        assert invoke(capsys, *argv)[1] == first

    def test_out_and_meta(self, capsys, tmp_path):
        out = tmp_path / "sub" / "rep.json"
        status, text = invoke(capsys, "rescale", "example42", "--horizon", "2", "--out", str(out))
        assert status == 0 and text == ""
        assert json.loads(out.read_text())["report"]["horizon"] == 2
        meta = json.loads((tmp_path / "sub" / "rep.json.meta.json").read_text())
        assert set(meta) == {"started", "elapsed_seconds"}

    def test_no_meta_without_out(self, capsys, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        invoke(capsys, "rescale", "example42", "--horizon", "2")
        assert list(tmp_path.iterdir()) == []


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mudicho", "rescale", "example42", "--horizon", "10"],
                          capture_output=True, text=True, cwd=tmp_path)
    assert proc.returncode == 3
    assert json.loads(proc.stdout)["error"]["error"] == "window_exhausted"
    assert proc.stderr.startswith("mudicho: ")


def test_closed_pipe_is_quiet(tmp_path):
    proc = subprocess.run(f"{sys.executable} -m mudicho dichotomy example42 --format csv | head -1",
                          shell=True, capture_output=True, text=True, cwd=tmp_path)
    assert proc.stdout.startswith("n,m,")
    assert "Traceback" not in proc.stderr
