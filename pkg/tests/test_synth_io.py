import numpy as np
import pytest

import softquant as sq
from softquant.exceptions import ParseError
from softquant.io import load_matrix, load_report, save_matrix, save_report
from softquant.synth import SynthConfig, poisson_inversion, synth_generate


class TestSynth:
    def test_same_seed_bit_identical(self):
        cfg = SynthConfig(d=12, n=10, k=3, seed=42)
        X1, t1 = synth_generate(cfg)
        X2, t2 = synth_generate(cfg)
        np.testing.assert_array_equal(X1, X2)
        np.testing.assert_array_equal(t1.quantiles, t2.quantiles)

    def test_different_seed_differs(self):
        X1, _ = synth_generate(SynthConfig(d=6, n=8, k=2, seed=1))
        X2, _ = synth_generate(SynthConfig(d=6, n=8, k=2, seed=2))
        assert not np.array_equal(X1, X2)

    def test_rows_are_permutations_of_quantiles(self):
        # noiseless, m_star = n: each row is exactly a permutation of its
        # ground-truth quantile vector
        X, truth = synth_generate(SynthConfig(d=10, n=12, k=3, noise_sigma=0.0, seed=5))
        for i in range(10):
            np.testing.assert_array_equal(np.sort(X[i]), truth.quantiles[i])

    def test_noise_is_nonnegative_additive(self):
        base, _ = synth_generate(SynthConfig(d=8, n=10, k=2, noise_sigma=0.0, seed=3))
        noisy, _ = synth_generate(SynthConfig(d=8, n=10, k=2, noise_sigma=10.0, seed=3))
        assert (noisy >= base - 1e-12).all()
        assert (noisy > base).any()

    def test_toy_instance_family_shapes(self):
        X, truth = synth_generate(SynthConfig(d=160, n=80, k=8, seed=7))
        assert X.shape == (160, 80)
        assert truth.U.shape == (160, 8) and truth.V.shape == (8, 80)
        assert truth.quantiles.shape == (160, 80)
        assert (X >= 0).all()

    def test_poisson_inversion_moments(self):
        rng = np.random.default_rng(0)
        draws = poisson_inversion(rng, 2.0, 200_000)
        assert abs(draws.mean() - 2.0) < 0.02
        assert abs(draws.var() - 2.0) < 0.05

    def test_dirichlet_columns_sum_to_one(self):
        _, truth = synth_generate(SynthConfig(d=6, n=9, k=4, seed=11))
        np.testing.assert_allclose(truth.V.sum(axis=0), 1.0, atol=1e-12)


class TestMatrixIo:
    def test_round_trip_bit_exact(self, rng, tmp_path):
        M = rng.standard_normal((3, 4)) * np.exp(rng.standard_normal((3, 4)) * 10)
        path = tmp_path / "m.csv"
        save_matrix(path, M)
        np.testing.assert_array_equal(load_matrix(path), M)

    def test_empty_matrix(self, tmp_path):
        path = tmp_path / "e.csv"
        save_matrix(path, np.zeros((0, 0)))
        out = load_matrix(path)
        assert out.shape == (0, 0)

    def test_header_mismatch(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("2,3\n1.0,2.0,3.0\n")
        with pytest.raises(ParseError) as err:
            load_matrix(path)
        assert err.value.line >= 2

    def test_bad_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("oops\n")
        with pytest.raises(ParseError) as err:
            load_matrix(path)
        assert err.value.line == 1

    def test_bad_value(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("1,2\n1.0,zebra\n")
        with pytest.raises(ParseError) as err:
            load_matrix(path)
        assert err.value.line == 2

    def test_wrong_column_count(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("1,3\n1.0,2.0\n")
        with pytest.raises(ParseError):
            load_matrix(path)


class TestReportIo:
    def test_round_trip(self, tmp_path):
        report = {
            "config": {"rank": 4, "epsilon": 0.01},
            "final_kl": 12.5,
            "curve": np.array([3.0, 2.0, 1.0]),
            "nested": {"counts": np.arange(3)},
        }
        path = tmp_path / "r.json"
        save_report(path, report)
        back = load_report(path)
        assert back["config"] == {"rank": 4, "epsilon": 0.01}
        assert back["curve"] == [3.0, 2.0, 1.0]
        assert back["nested"]["counts"] == [0, 1, 2]
