import json

import numpy as np
import pytest

from softquant.cli import main
from softquant.io import load_matrix, load_report, save_matrix


def run(argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    code = run(["generate", "--d", 10, "--n", 8, "--k", 2, "--seed", 3,
                "--out-dir", out])
    assert code == 0
    return out


class TestGenerate:
    def test_writes_all_artifacts(self, dataset):
        X = load_matrix(dataset / "X.csv")
        assert X.shape == (10, 8)
        assert load_matrix(dataset / "true_u.csv").shape == (10, 2)
        assert load_matrix(dataset / "true_v.csv").shape == (2, 8)
        assert load_matrix(dataset / "true_quantiles.csv").shape == (10, 8)

    def test_deterministic(self, dataset, tmp_path):
        assert run(["generate", "--d", 10, "--n", 8, "--k", 2, "--seed", 3,
                    "--out-dir", tmp_path]) == 0
        np.testing.assert_array_equal(
            load_matrix(dataset / "X.csv"), load_matrix(tmp_path / "X.csv")
        )


class TestFactorize:
    def test_nmf_end_to_end(self, dataset, tmp_path):
        report_path = tmp_path / "nmf.json"
        code = run(["factorize", "--input", dataset / "X.csv", "--method", "nmf",
                    "--rank", 2, "--epochs", 100, "--out", report_path])
        assert code == 0
        report = load_report(report_path)
        assert np.isfinite(report["final_kl"])
        assert len(report["epoch_kl"]) == 100

    def test_qmf_and_eval(self, dataset, tmp_path):
        report_path = tmp_path / "qmf.json"
        code = run(["factorize", "--input", dataset / "X.csv", "--method", "qmf",
                    "--rank", 2, "--quantiles", 4, "--epochs", 4,
                    "--out", report_path])
        assert code == 0
        report = load_report(report_path)
        assert set(report["artifacts"]) >= {"weights", "quantiles", "u", "v", "ranges"}

        table_path = tmp_path / "table.csv"
        code = run(["eval", "--input", dataset / "X.csv", "--report", report_path,
                    "--out", table_path])
        assert code == 0
        table = load_matrix(table_path)
        levels, quants = table[:, 0::2], table[:, 1::2]
        assert (levels > 0).all() and (levels <= 1 + 1e-12).all()
        assert (np.diff(levels, axis=1) >= -1e-12).all()
        assert (np.diff(quants, axis=1) >= -1e-12).all()

    def test_qmfq_writes_deflate_tables(self, dataset, tmp_path):
        report_path = tmp_path / "qmfq.json"
        code = run(["factorize", "--input", dataset / "X.csv", "--method", "qmfq",
                    "--rank", 2, "--quantiles", 4, "--epochs", 2,
                    "--inner-iters", 10, "--out", report_path])
        assert code == 0
        report = load_report(report_path)
        assert "deflate_quantiles" in report["artifacts"]

    def test_missing_input_is_data_error(self, tmp_path):
        code = run(["factorize", "--input", tmp_path / "nope.csv",
                    "--method", "nmf", "--out", tmp_path / "r.json"])
        assert code == 3

    def test_malformed_input_is_data_error(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("not a header\n")
        code = run(["factorize", "--input", bad, "--method", "nmf",
                    "--out", tmp_path / "r.json"])
        assert code == 3


class TestUsageErrors:
    def test_unknown_method_exits_2(self, dataset, tmp_path):
        with pytest.raises(SystemExit) as exc:
            run(["factorize", "--input", dataset / "X.csv", "--method", "svd",
                 "--out", tmp_path / "r.json"])
        assert exc.value.code == 2

    def test_no_command_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            run([])
        assert exc.value.code == 2


class TestBench:
    def test_smoke(self, tmp_path, capsys):
        out = tmp_path / "bench.json"
        code = run(["bench", "--sizes", 32, "--quantiles", 6,
                    "--epsilon", 0.05, "--tol", 1e-6, "--out", out])
        assert code == 0
        rows = load_report(out)["rows"]
        assert rows[0]["n"] == 32
        assert rows[0]["gradient_gap"] < 1e-6


class TestGradcheckCommand:
    def test_exits_zero(self, monkeypatch, capsys):
        # thin the sweeps so the CLI check stays quick; the full-size suites
        # run in the acceptance tests
        import softquant.gradcheck as gc

        orig_plan, orig_params = gc.check_plan_vjps, gc.check_param_vjps
        monkeypatch.setitem(
            gc.run_all.__globals__, "check_plan_vjps",
            lambda seed, trials: orig_plan(seed, 4),
        )
        monkeypatch.setitem(
            gc.run_all.__globals__, "check_param_vjps",
            lambda seed, trials: orig_params(seed, 30),
        )
        assert run(["gradcheck", "--seed", 0]) == 0
        out = capsys.readouterr().out
        assert "plan/plan_x" in out and "FAIL" not in out
