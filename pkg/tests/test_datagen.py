"""Generator statistics and dataset file-format tests."""

import numpy as np
import pytest

from mssm.datagen import (
    DataFormatError,
    TimeSeriesDataset,
    gen_sir,
    gen_stuart_landau,
    read_dataset,
    sir_benchmark,
    stuart_landau_benchmark,
    write_dataset,
)
from mssm.diffcore import SeededRng
from mssm.ssm import SIRParams, StuartLandauParams, sir_drift, sl_step_mean


class TestStuartLandauGenerator:
    def test_zero_noise_second_observation(self):
        # A = C = 0, b = 0, start (1, 0) with cluster-3 dynamics: y_obs[2] = 0.2
        p = StuartLandauParams(
            a1=1.0, a2=1.0, b1=0.2, b2=0.0, A=np.zeros((2, 2)), b=0.0,
            mu_x=1.0, mu_y=0.0, C=np.zeros((2, 2)),
        )
        ds = gen_stuart_landau([p], 1, 4, seed=0)
        assert ds.values[0, 1, 0] == pytest.approx(0.2, abs=1e-15)

    def test_labels_in_blocks(self):
        ds = gen_stuart_landau(stuart_landau_benchmark(), 300, 3, seed=1)
        assert ds.n_series == 900
        assert np.array_equal(np.unique(ds.labels), [1, 2, 3])
        np.testing.assert_array_equal(ds.labels, np.repeat([1, 2, 3], 300))

    def test_seed_determinism(self):
        a = gen_stuart_landau(stuart_landau_benchmark(), 4, 10, seed=7)
        b = gen_stuart_landau(stuart_landau_benchmark(), 4, 10, seed=7)
        assert np.array_equal(a.values, b.values)
        c = gen_stuart_landau(stuart_landau_benchmark(), 4, 10, seed=8)
        assert not np.array_equal(a.values, c.values)

    def test_process_noise_covariance(self):
        # residuals (latent minus deterministic step) are N(0, AA^T)
        p = stuart_landau_benchmark()[0]
        ds, lat = gen_stuart_landau([p], 2000, 51, seed=3, return_latents=True)
        prev = lat[:, :-1, :].reshape(-1, 2)
        nxt = lat[:, 1:, :].reshape(-1, 2)
        mx, my = [], []
        resid = np.empty_like(prev)
        for i in range(len(prev)):
            resid[i] = nxt[i] - sl_step_mean(prev[i], p)
        n = len(resid)
        cov = resid.T @ resid / n
        target = p.A @ p.A.T
        tol = 3.0 * np.sqrt(2.0 / n) * 0.0025 + 3e-5
        np.testing.assert_allclose(cov, target, atol=tol)

    def test_observation_noise(self):
        p = stuart_landau_benchmark()[1]
        ds, lat = gen_stuart_landau([p], 400, 50, seed=5, return_latents=True)
        resid = ds.values[:, :, 0] - lat[:, :, 1]
        n = resid.size
        assert abs(resid.mean()) <= 4 * p.b / np.sqrt(n)
        assert resid.std() == pytest.approx(p.b, rel=0.05)


class TestSIRGenerator:
    def test_latents_on_simplex(self):
        # rho_S can underflow to exactly 0 once the epidemic consumes all
        # susceptibles (its Gamma shape crosses below the float floor), so
        # non-negativity rather than strict positivity is the invariant here
        ds, rho = gen_sir(sir_benchmark(), 5, 20, seed=2, return_latents=True)
        np.testing.assert_allclose(rho.sum(axis=2), 1.0, atol=1e-9)
        assert np.all(rho >= 0)

    def test_observations_in_unit_interval(self):
        ds = gen_sir(sir_benchmark(), 10, 30, seed=4)
        assert np.all(ds.values > 0) and np.all(ds.values < 1)

    def test_seed_determinism(self):
        a = gen_sir(sir_benchmark(), 3, 10, seed=9)
        b = gen_sir(sir_benchmark(), 3, 10, seed=9)
        assert np.array_equal(a.values, b.values)

    def test_large_concentration_tracks_drift(self):
        # with a = 8 the Dirichlet noise is tiny: next rho ~ drift(rho)
        p = SIRParams(beta=0.9, gamma=0.1, a=8.0, b=3.0, c=2.0,
                      rho_init=np.array([0.95, 0.04, 0.01]))
        ds, rho = gen_sir([p], 40, 25, seed=6, return_latents=True)
        errs = []
        for i in range(rho.shape[0]):
            for t in range(rho.shape[1] - 1):
                errs.append(np.abs(rho[i, t + 1] - sir_drift(rho[i, t], p)).max())
        errs = np.array(errs)
        assert np.quantile(errs, 0.99) <= 1e-2

    def test_beta_mean_identity(self):
        # E[I_obs | rho_I] = rho_I
        ds, rho = gen_sir(sir_benchmark(), 500, 10, seed=8, return_latents=True)
        resid = ds.values[:, :, 0] - rho[:, :, 1]
        # Var(Beta) <= 1/(4 * (10^b + 1)); bound the mean deviation at 4 sigma
        bound = 4.0 * np.sqrt(0.25 / 1001.0 / resid.size)
        assert abs(resid.mean()) <= bound

    def test_rejects_zero_rho_init(self):
        p = SIRParams(beta=0.5, gamma=0.1, a=3.0, b=3.0, c=2.0,
                      rho_init=np.array([0.99, 0.01, 0.0]))
        with pytest.raises(ValueError):
            gen_sir([p], 1, 5, seed=0)


class TestFileFormat:
    def test_roundtrip(self, tmp_path):
        ds = gen_stuart_landau(stuart_landau_benchmark(), 3, 7, seed=11)
        path = tmp_path / "ds.csv"
        write_dataset(ds, path)
        back = read_dataset(path)
        np.testing.assert_array_equal(back.values, ds.values)
        np.testing.assert_array_equal(back.labels, ds.labels)
        assert back.metadata == ds.metadata
        np.testing.assert_array_equal(back.ids, ds.ids)

    def test_write_is_byte_deterministic(self, tmp_path):
        ds = gen_sir(sir_benchmark(), 2, 6, seed=3)
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        write_dataset(ds, p1)
        write_dataset(ds, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_labels_optional(self, tmp_path):
        ds = TimeSeriesDataset(np.zeros((2, 3, 1)), None, {"model": "sir"})
        path = tmp_path / "nolabel.csv"
        write_dataset(ds, path)
        back = read_dataset(path)
        assert back.labels is None
        np.testing.assert_array_equal(back.values, ds.values)

    def test_inconsistent_length_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("#model=sir\n1,1,0.5\n1,2,0.5\n2,1,0.5\n")
        with pytest.raises(DataFormatError, match="inconsistent"):
            read_dataset(path)

    def test_malformed_line_number_reported(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("#model=sir\n1,1,0.5\n1,oops,0.5\n")
        with pytest.raises(DataFormatError, match="line 3"):
            read_dataset(path)

    def test_missing_time_step_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("#model=sir\n1,1,0.5\n1,3,0.5\n")
        with pytest.raises(DataFormatError):
            read_dataset(path)

    def test_values_roundtrip_17_digits(self, tmp_path):
        rng = SeededRng(0)
        values = rng.standard_normal((2, 4, 2)) * 1e-7
        ds = TimeSeriesDataset(values, np.array([1, 2]), {"model": "x"})
        path = tmp_path / "tiny.csv"
        write_dataset(ds, path)
        back = read_dataset(path)
        np.testing.assert_array_equal(back.values, values)
