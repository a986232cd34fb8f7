"""Model density, transform, and drift tests with independent oracles."""

import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal, norm

from mssm import ssm
from mssm.datagen import sir_benchmark, stuart_landau_benchmark
from mssm.diffcore import SeededRng
from mssm.ssm import (
    SIR,
    STUART_LANDAU,
    ClusterParams,
    MixtureParams,
    SIRParams,
    StuartLandauParams,
    constrain_block,
    gamma_normalize,
    log_joint,
    log_joint_terms,
    mixture_log_joint,
    sir_drift,
    sl_step_mean,
    unconstrain_block,
)


def sl_cluster3() -> StuartLandauParams:
    return stuart_landau_benchmark()[2]


class TestStepMean:
    def test_cluster3_hand_value(self):
        # a1=1, a2=1, b1=0.2, b2=0 at (1,0): x' = 1+1-0-1*(1-0) = 1; y' = 0.2
        out = sl_step_mean((1.0, 0.0), sl_cluster3())
        np.testing.assert_allclose(out, [1.0, 0.2], rtol=0, atol=1e-12)

    def test_origin_fixed_point(self):
        for p in stuart_landau_benchmark():
            np.testing.assert_allclose(sl_step_mean((0.0, 0.0), p), [0.0, 0.0], atol=0)

    @given(st.floats(-2, 2))
    @settings(max_examples=50, deadline=None)
    def test_pure_radial_simplification(self, x):
        # b1=b2=0, a1=a2=1 on the x axis: x' = 2x - x^3
        p = StuartLandauParams(
            a1=1.0, a2=1.0, b1=0.0, b2=0.0, A=np.eye(2), b=1.0,
            mu_x=0.0, mu_y=0.0, C=np.eye(2),
        )
        out = sl_step_mean((x, 0.0), p)
        assert out[0] == pytest.approx(2 * x - x**3, abs=1e-12)
        assert out[1] == pytest.approx(0.0, abs=1e-12)


class TestSirDrift:
    def test_disease_free_is_fixed(self):
        p = sir_benchmark()[0]
        np.testing.assert_allclose(sir_drift([1.0, 0.0, 0.0], p), [1.0, 0.0, 0.0])

    def test_cluster1_hand_value(self):
        p = sir_benchmark()[0]  # beta=0.9, gamma=0.1
        out = sir_drift([0.95, 0.04, 0.01], p)
        np.testing.assert_allclose(out, [0.9158, 0.0702, 0.0140], atol=1e-12)

    @given(st.lists(st.floats(0.01, 1.0), min_size=3, max_size=3))
    @settings(max_examples=100, deadline=None)
    def test_simplex_preserved(self, raw):
        rho = np.array(raw) / np.sum(raw)
        rho = rho / rho.sum()  # renormalize to kill float drift
        out = sir_drift(rho, sir_benchmark()[1])
        assert abs(out.sum() - 1.0) <= 1e-12

    def test_rejects_off_simplex(self):
        with pytest.raises(ValueError):
            sir_drift([0.7, 0.7, 0.1], sir_benchmark()[0])


class TestGammaNormalize:
    def test_trivial_values(self):
        np.testing.assert_allclose(gamma_normalize([1, 1, 1]), np.ones(3) / 3)
        np.testing.assert_allclose(gamma_normalize([2, 1, 1]), [0.5, 0.25, 0.25])

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            gamma_normalize([1.0, 0.0, 2.0])

    def test_matches_dirichlet_moments(self):
        # normalized independent Gamma(a_i, 1) is Dirichlet(a)
        a = np.array([2.0, 0.7, 1.5])
        n = 100_000
        rng = SeededRng(7)
        draws = rng.gamma(a, size=(n, 3))
        rho = draws / draws.sum(axis=1, keepdims=True)
        a0 = a.sum()
        mean = a / a0
        var = a * (a0 - a) / (a0**2 * (a0 + 1))
        cov01 = -a[0] * a[1] / (a0**2 * (a0 + 1))
        emp_mean = rho.mean(axis=0)
        emp_var = rho.var(axis=0)
        np.testing.assert_allclose(emp_mean, mean, atol=3 * np.sqrt(var / n).max())
        np.testing.assert_allclose(
            emp_var, var, atol=3 * np.sqrt(2.0 / n) * var.max() + 3e-5
        )
        emp_cov01 = np.cov(rho[:, 0], rho[:, 1])[0, 1]
        assert emp_cov01 == pytest.approx(cov01, abs=3e-4)


class TestTransforms:
    def test_positive_scale_roundtrip(self):
        u = unconstrain_block(np.array([0.05]), "positive")
        np.testing.assert_allclose(u, np.log(0.05))
        v = constrain_block(u, "positive")
        assert v[0] == pytest.approx(0.05, abs=1e-15)

    def test_simplex_roundtrip(self):
        rho = np.array([0.95, 0.04, 0.01])
        u = unconstrain_block(rho, "simplex")
        v = constrain_block(u, "simplex")
        np.testing.assert_allclose(v, rho, atol=1e-12)
        assert v.sum() == pytest.approx(1.0, abs=1e-12)

    def test_tril_roundtrip(self):
        tril = np.array([0.05, 0.0, 0.05])  # 0.05 * I as [L00, L10, L11]
        u = unconstrain_block(tril, "tril2")
        v = constrain_block(u, "tril2")
        np.testing.assert_allclose(v, tril, atol=1e-10)

    @pytest.mark.parametrize("model", [STUART_LANDAU, SIR])
    def test_random_roundtrips(self, model):
        rng = SeededRng(5)
        for _ in range(1000):
            blocks = model.init_blocks(rng)
            for b in model.blocks:
                raw = blocks[b.name] + rng.standard_normal(b.size) * 0.5
                v = constrain_block(raw, b.transform)
                raw2 = unconstrain_block(v, b.transform)
                np.testing.assert_allclose(raw2, raw, atol=1e-10)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            constrain_block(np.array([np.nan]), "positive")


class TestStuartLandauLogJoint:
    def test_t1_is_init_plus_obs(self):
        cp = sl_cluster3().to_cluster()
        X = np.array([[1.1, 0.2]])
        Y = np.array([[0.15]])
        init, trans, obs = log_joint_terms(cp, X, Y)
        assert trans == 0.0
        assert log_joint(cp, X, Y) == pytest.approx(init + obs, abs=1e-12)

    def test_matches_gaussian_oracle(self):
        # independent oracle: scipy multivariate normal / normal log-pdfs
        p = stuart_landau_benchmark()[0]
        cp = p.to_cluster()
        rng = SeededRng(9)
        T = 6
        X = rng.standard_normal((T, 2)) * 0.8 + np.array([1.0, 0.0])
        Y = rng.standard_normal((T, 1)) * 0.5
        expected = multivariate_normal.logpdf(
            X[0], mean=[p.mu_x, p.mu_y], cov=p.C @ p.C.T
        )
        for t in range(1, T):
            mean = sl_step_mean(X[t - 1], p)
            expected += multivariate_normal.logpdf(X[t], mean=mean, cov=p.A @ p.A.T)
        expected += norm.logpdf(Y[:, 0], loc=X[:, 1], scale=p.b).sum()
        assert log_joint(cp, X, Y) == pytest.approx(expected, rel=1e-10)

    def test_zero_noise_limit_concentrates(self):
        # density at an exactly-mean path grows as the noise scale shrinks
        base = sl_cluster3()
        X = np.empty((5, 2))
        X[0] = [1.0, 0.0]
        for t in range(1, 5):
            X[t] = sl_step_mean(X[t - 1], base)
        X[0] = [base.mu_x, base.mu_y]
        Y = X[:, 1:2].copy()
        vals = []
        for scale in [0.1, 0.03, 0.01]:
            p = StuartLandauParams(
                a1=base.a1, a2=base.a2, b1=base.b1, b2=base.b2,
                A=scale * np.eye(2), b=scale, mu_x=1.0, mu_y=0.0,
                C=scale * np.eye(2),
            )
            vals.append(log_joint(p.to_cluster(), X, Y))
        assert vals[0] < vals[1] < vals[2]

    def test_term_decomposition(self):
        # theta_P0 blocks move only the initial term; theta_R only observation
        cp = stuart_landau_benchmark()[1].to_cluster()
        rng = SeededRng(3)
        X = rng.standard_normal((8, 2))
        Y = rng.standard_normal((8, 1))
        init0, trans0, obs0 = log_joint_terms(cp, X, Y)

        bumped = cp.copy()
        bumped.blocks["init_mean"] = bumped.blocks["init_mean"] + 1.0
        bumped.blocks["init_tril"] = bumped.blocks["init_tril"] + 0.5
        init1, trans1, obs1 = log_joint_terms(bumped, X, Y)
        assert init1 != init0 and trans1 == trans0 and obs1 == obs0

        bumped = cp.copy()
        bumped.blocks["obs_scale"] = bumped.blocks["obs_scale"] + 0.7
        init2, trans2, obs2 = log_joint_terms(bumped, X, Y)
        assert obs2 != obs0 and init2 == init0 and trans2 == trans0


class TestSIRLogJoint:
    def test_matches_special_function_oracle(self):
        # oracle: mpmath log Gamma/Beta pdfs, fully independent of the tape
        p = sir_benchmark()[0]
        cp = p.to_cluster()
        G = np.array([[90.0, 4.0, 1.0], [800.0, 50.0, 20.0], [700.0, 90.0, 60.0]])
        Y = np.array([[0.05], [0.06], [0.11]])

        def gamma_logpdf(x, shape):
            x, shape = mpmath.mpf(x), mpmath.mpf(shape)
            return (shape - 1) * mpmath.log(x) - x - mpmath.loggamma(shape)

        def beta_logpdf(y, a, b):
            y, a, b = mpmath.mpf(y), mpmath.mpf(a), mpmath.mpf(b)
            return (
                (a - 1) * mpmath.log(y)
                + (b - 1) * mpmath.log(1 - y)
                - (mpmath.loggamma(a) + mpmath.loggamma(b) - mpmath.loggamma(a + b))
            )

        rho = G / G.sum(axis=1, keepdims=True)
        expected = mpmath.mpf(0)
        for c in range(3):
            expected += gamma_logpdf(G[0, c], 10.0**p.c * p.rho_init[c])
        for t in range(1, 3):
            f = sir_drift(rho[t - 1], p)
            for c in range(3):
                expected += gamma_logpdf(G[t, c], 10.0**p.a * f[c])
        for t in range(3):
            conc = 10.0**p.b
            expected += beta_logpdf(Y[t, 0], conc * rho[t, 1], conc * (1 - rho[t, 1]))
        assert log_joint(cp, G, Y) == pytest.approx(float(expected), abs=1e-8)

    def test_rejects_latents_off_support(self):
        cp = sir_benchmark()[0].to_cluster()
        G = np.array([[1.0, -2.0, 1.0]])
        with pytest.raises(ValueError, match="support"):
            log_joint(cp, G, np.array([[0.5]]))


class TestMixture:
    def test_single_cluster_reduces_to_log_joint(self):
        cp = sl_cluster3().to_cluster()
        theta = MixtureParams(STUART_LANDAU, [cp], np.zeros(0))
        X = np.array([[1.0, 0.0], [1.0, 0.2]])
        Y = np.array([[0.0], [0.2]])
        assert mixture_log_joint(theta, 1, X, Y) == pytest.approx(
            log_joint(cp, X, Y), abs=1e-12
        )

    def test_uniform_weights(self):
        clusters = [p.to_cluster() for p in stuart_landau_benchmark()]
        theta = MixtureParams(STUART_LANDAU, clusters, np.zeros(2))
        X = np.array([[0.9, 0.1], [1.0, 0.3]])
        Y = np.array([[0.1], [0.25]])
        for k in range(1, 4):
            assert mixture_log_joint(theta, k, X, Y) == pytest.approx(
                log_joint(clusters[k - 1], X, Y) - math.log(3), abs=1e-12
            )

    def test_logit_softmax_arithmetic(self):
        # softmax([1, 2]) equals softmax([0, 1]); the first logit is pinned to 0
        clusters = [p.to_cluster() for p in sir_benchmark()]
        theta = MixtureParams(SIR, clusters, np.array([1.0]))
        w = theta.weights()
        ref = np.exp([1.0, 2.0]) / np.exp([1.0, 2.0]).sum()
        np.testing.assert_allclose(w, ref, atol=1e-15)
        G = np.abs(SeededRng(1).standard_normal((4, 3))) + 0.5
        Y = np.full((4, 1), 0.2)
        for k in (1, 2):
            assert mixture_log_joint(theta, k, G, Y) == pytest.approx(
                math.log(ref[k - 1]) + log_joint(clusters[k - 1], G, Y), abs=1e-10
            )

    def test_cluster_index_out_of_range(self):
        theta = MixtureParams(STUART_LANDAU, [sl_cluster3().to_cluster()], np.zeros(0))
        with pytest.raises(ValueError):
            mixture_log_joint(theta, 2, np.zeros((1, 2)), np.zeros((1, 1)))


def test_count_free_dims_match_paper_counts():
    # per-cluster totals behind the BIC parameter counts
    assert sum(b.size for b in STUART_LANDAU.blocks) == 12
    assert sum(b.size for b in SIR.blocks) == 7
