import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plumeinv.bayes import (
    DEFAULT_PRIOR_DELTA,
    DEFAULT_PRIOR_GAMMA,
    BaeStats,
    InverseProblem,
    LaplacePosterior,
    NoiseModel,
    build_prior,
    calibrate_prior,
    compute_map,
    estimate_bae,
    lanczos,
    laplace_eig,
    mahalanobis,
    neumann_laplacian,
    posterior_factor,
    posterior_sample,
    prior_statistics,
)
from plumeinv.errors import NonFinite
from plumeinv.observe import LinearForward


class TestPrior:
    def test_mean_and_zero_omega(self):
        p = build_prior(120, 60.0)
        np.testing.assert_array_equal(p.sample(0, omega=np.zeros(120)), p.mean)
        assert p.mean[0] == 10000.0
        # mean line reaches 2000 at t = 60
        slope = (p.mean[1] - p.mean[0]) / 0.5
        assert p.mean[0] + slope * 60.0 == pytest.approx(2000.0)

    def test_gamma_zero_iid(self):
        p = build_prior(30, 60.0, np.zeros(30), 0.0, 0.01)
        np.testing.assert_allclose(p.dense_covariance(), np.eye(30) * 1e4, rtol=1e-12)

    def test_factor_roundtrip(self, rng):
        p = build_prior(50, 60.0)
        v = rng.normal(size=50)
        np.testing.assert_allclose(p.solve_E(p.apply_E(v)), v, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(p.solve_Et(p.apply_Et(v)), v, rtol=1e-12, atol=1e-12)
        P = p.E @ p.E.T
        assert np.all(np.linalg.eigvalsh(P) > 0)

    def test_neumann_rows_sum_to_zero(self):
        K = neumann_laplacian(10, 0.5)
        np.testing.assert_allclose(K.sum(axis=1), 0.0, atol=1e-12)
        np.testing.assert_array_equal(K, K.T)

    def test_calibrated_std(self):
        p = build_prior(120, 60.0)
        S = p.sample(4, count=10_000)
        rms = math.sqrt(np.mean(np.var(S, axis=0)))
        assert rms == pytest.approx(3000.0, rel=0.1)
        std, corr = prior_statistics(p, 0.5)
        assert std == pytest.approx(3000.0, rel=1e-6)
        assert corr == pytest.approx(15.0, rel=1e-6)

    def test_calibration_reproduces_constants(self):
        g, d = calibrate_prior(120, 60.0)
        assert g == pytest.approx(DEFAULT_PRIOR_GAMMA, rel=1e-6)
        assert d == pytest.approx(DEFAULT_PRIOR_DELTA, rel=1e-6)

    def test_invalid(self):
        with pytest.raises(ValueError):
            build_prior(10, 60.0, None, 1.0, 0.0)


class _Fwd:
    """Batched affine forward map with a wind-dependent offset."""

    def __init__(self, A):
        self.A = A

    def evaluate(self, Z, W):
        return Z @ self.A.T + W.reshape(W.shape[0], -1)[:, :1] * np.ones(self.A.shape[0])


class TestBae:
    def test_wind_at_mean_gives_zero(self, rng):
        prior = build_prior(8, 60.0)
        A = rng.normal(size=(12, 8))
        wbar = np.full((8, 1), 0.3)
        s = estimate_bae(prior, lambda k: wbar, _Fwd(A), wbar, 10, 0, 5.0)
        assert not np.any(s.mean_error) and not np.any(s.cov_error)
        np.testing.assert_allclose(s.gamma_bae, 25.0 * np.eye(12))

    def test_two_sample_formula(self):
        e = np.array([1.0, -2.0, 0.5])

        class F:
            def evaluate(self, Z, W):
                return W[:, 0, 0][:, None] * e

        prior = build_prior(4, 60.0)
        winds = [np.full((4, 1), 1.0), np.full((4, 1), -1.0)]
        s = estimate_bae(prior, lambda k: winds[k], F(), np.zeros((4, 1)), 2, 0, 1.0)
        np.testing.assert_allclose(s.mean_error, 0.0, atol=1e-15)
        np.testing.assert_allclose(s.cov_error, 2 * np.outer(e, e), rtol=1e-14)

    def test_matches_sample_formula(self, rng):
        prior = build_prior(6, 60.0)
        A = rng.normal(size=(9, 6))
        winds = rng.normal(size=(20, 6, 1))
        s = estimate_bae(prior, lambda k: winds[k], _Fwd(A), np.zeros((6, 1)), 20, 3, 2.0)
        Z = prior.sample(np.random.SeedSequence([3, 0]), count=20)
        E = _Fwd(A).evaluate(Z, winds) - _Fwd(A).evaluate(Z, np.zeros_like(winds))
        np.testing.assert_allclose(s.mean_error, E.mean(0), rtol=1e-12)
        np.testing.assert_allclose(s.cov_error, np.cov(E.T), rtol=1e-10, atol=1e-12)

    def test_loosens_weighting(self, rng):
        B = rng.normal(size=(7, 3))
        s = BaeStats(np.zeros(7), B @ B.T, 2.0, 10)
        for _ in range(10):
            rho = rng.normal(size=7)
            assert rho @ s.solve(rho) <= rho @ rho / 4.0 + 1e-12

    def test_jitter_path(self):
        # slightly indefinite: sigma^2 I + cov has an eigenvalue of -1e-12
        v = np.array([1.0, 2.0, 3.0])
        s = BaeStats(np.zeros(3), np.outer(v, v) - (4.0 + 1e-12) * np.eye(3), 2.0, 5)
        assert s.jitter > 0
        assert np.all(np.isfinite(s.solve(np.ones(3))))


def _linear_problem(rng, N=40, L=5, noise=5.0, scale=0.01):
    A = rng.normal(size=(N * L, N)) * scale
    prior = build_prior(N, 60.0, None, *calibrate_prior(N, 60.0))
    z_true = prior.sample(1)
    d = A @ z_true + noise * rng.normal(size=N * L)
    return A, prior, d


def _dense(A, prior, sigma, ebar=None):
    G = np.eye(A.shape[0]) / sigma**2
    Pp = prior.E @ prior.E.T
    return A.T @ G @ A + Pp, G, Pp


class TestObjective:
    def test_zero_at_consistent_data(self, rng):
        A, prior, _ = _linear_problem(rng)
        ebar = rng.normal(size=A.shape[0])
        stats = BaeStats(ebar, np.zeros((A.shape[0], A.shape[0])), 1.0, 2)
        pb = InverseProblem(LinearForward(A), A @ prior.mean + ebar, prior, stats)
        assert pb.objective(prior.mean) == pytest.approx(0.0, abs=1e-12)
        assert np.abs(pb.gradient(prior.mean)).max() < 1e-10

    def test_quadratic_growth(self, rng):
        A, prior, d = _linear_problem(rng)
        pb = InverseProblem(LinearForward(A), d, prior, NoiseModel(5.0))
        v = rng.normal(size=prior.N) * 100
        al = np.array([-1.0, 0.0, 0.5, 1.0, 2.0])
        J = np.array([pb.objective(prior.mean + a * v) for a in al])
        coef = np.polyfit(al[[0, 1, 4]], J[[0, 1, 4]], 2)
        assert np.max(np.abs(np.polyval(coef, al) - J)) <= 1e-10 * np.abs(J).max()

    def test_identity_weight_misfit(self, rng):
        A, prior, d = _linear_problem(rng)
        pb = InverseProblem(LinearForward(A), d, prior, NoiseModel(1.0))
        z = prior.sample(2)
        assert pb.misfit(z) == pytest.approx(0.5 * np.sum((A @ z - d) ** 2), rel=1e-12)

    def test_gradient_fd(self, rng):
        A, prior, d = _linear_problem(rng)
        B = rng.normal(size=(A.shape[0], 4))
        stats = BaeStats(rng.normal(size=A.shape[0]), B @ B.T, 5.0, 10)
        pb = InverseProblem(LinearForward(A), d, prior, stats)
        z = prior.sample(5)
        g = pb.gradient(z)
        h = 1e-2
        for k in rng.choice(prior.N, 10, replace=False):
            e = np.zeros(prior.N)
            e[k] = h
            fd = (pb.objective(z + e) - pb.objective(z - e)) / (2 * h)
            assert fd == pytest.approx(g[k], rel=1e-6, abs=1e-6 * np.abs(g).max())

    def test_prior_only_gradient(self, rng):
        A, prior, d = _linear_problem(rng)
        pb = InverseProblem(LinearForward(A), d, prior, NoiseModel(5.0), data_weight=0.0)
        z = prior.sample(3)
        np.testing.assert_array_equal(pb.gradient(z), prior.precision(z - prior.mean))

    def test_gn_hessian_properties(self, rng):
        A, prior, d = _linear_problem(rng)
        pb = InverseProblem(LinearForward(A), d, prior, NoiseModel(5.0))
        z = prior.sample(7)
        u, v = rng.normal(size=prior.N), rng.normal(size=prior.N)
        Hu, Hv = pb.gn_hessian_vp(z, u), pb.gn_hessian_vp(z, v)
        assert Hv @ u == pytest.approx(v @ Hu, rel=1e-10)
        assert v @ Hv > 0
        H, _, _ = _dense(A, prior, 5.0)
        np.testing.assert_allclose(Hv, H @ v, rtol=1e-10)

    def test_non_finite(self, rng):
        A, prior, d = _linear_problem(rng)
        pb = InverseProblem(LinearForward(A), d, prior, NoiseModel(5.0))
        with pytest.raises(NonFinite), np.errstate(invalid="ignore"):
            pb.objective(np.full(prior.N, np.inf))


class TestMap:
    def test_linear_oracle(self, rng):
        A, prior, d = _linear_problem(rng)
        pb = InverseProblem(LinearForward(A), d, prior, NoiseModel(5.0))
        res = compute_map(pb, tol=1e-10, max_iters=50)
        H, G, Pp = _dense(A, prior, 5.0)
        zc = np.linalg.solve(H, A.T @ G @ d + Pp @ prior.mean)
        assert res.converged
        assert np.linalg.norm(res.z - zc) <= 1e-8 * np.linalg.norm(zc)
        assert np.all(np.diff(res.history) <= 1e-9 * abs(res.history[0]))

    def test_starts_at_optimum(self, rng):
        A, prior, _ = _linear_problem(rng)
        pb = InverseProblem(LinearForward(A), A @ prior.mean, prior, NoiseModel(5.0))
        res = compute_map(pb, prior.mean, tol=1e-6)
        assert res.converged and res.iterations <= 2


class TestLanczos:
    def test_known_spectrum(self, rng):
        Q, _ = np.linalg.qr(rng.normal(size=(30, 30)))
        lam = np.zeros(30)
        lam[:4] = [10, 5, 1, 0.001]
        M = Q @ np.diag(lam) @ Q.T
        vals, vecs = lanczos(lambda v: M @ v, 30, 30, seed=0)
        np.testing.assert_allclose(vals[:4], lam[:4], atol=1e-8)
        np.testing.assert_allclose(vecs.T @ vecs, np.eye(30), atol=1e-10)

    def test_breakdown_restart(self):
        # rank-1 operator exhausts its Krylov space after one step
        e = np.zeros(12)
        e[3] = 1.0
        vals, vecs = lanczos(lambda v: 2.0 * e * (e @ v), 12, 12, seed=1)
        np.testing.assert_allclose(vals[0], 2.0, atol=1e-12)
        np.testing.assert_allclose(vals[1:], 0.0, atol=1e-12)


class _DiagProblem:
    """Minimal context with a prescribed prior-preconditioned spectrum (E = I)."""

    def __init__(self, M, N):
        self.M = M
        self.prior = build_prior(N, 60.0, np.zeros(N), 0.0, 1.0)

    def misfit_hessian_vp(self, z, v):
        return self.M @ v


class TestLaplace:
    def test_truncation_spectrum(self, rng):
        N = 30
        Q, _ = np.linalg.qr(rng.normal(size=(N, N)))
        lam = np.zeros(N)
        lam[:4] = [10, 5, 1, 0.001]
        lp = laplace_eig(np.zeros(N), _DiagProblem(Q @ np.diag(lam) @ Q.T, N), k_max=20, tol=0.01)
        assert lp.k == 3
        np.testing.assert_allclose(lp.eigenvalues, [10, 5, 1], atol=1e-8)
        np.testing.assert_allclose(np.abs(lp.V.T @ Q[:, :3]), np.eye(3), atol=1e-8)

    def test_zero_weight(self, rng):
        A, prior, d = _linear_problem(rng, N=20)
        pb = InverseProblem(LinearForward(A), d, prior, NoiseModel(5.0), data_weight=0.0)
        lp = laplace_eig(prior.mean, pb)
        assert lp.k == 0

    def test_smw_identities(self, rng):
        lp = LaplacePosterior(np.zeros(5), np.eye(5)[:, :4], np.array([50.0, 3.0, 0.2, 0.0]))
        np.testing.assert_allclose(2 * lp.p + lp.p**2, -lp.d, atol=1e-12)
        np.testing.assert_allclose(lp.d, lp.eigenvalues / (1 + lp.eigenvalues), atol=1e-12)

    def test_dense_inverse_hessian(self, rng):
        A, prior, d = _linear_problem(rng)
        pb = InverseProblem(LinearForward(A), d, prior, NoiseModel(5.0))
        res = compute_map(pb, tol=1e-10)
        lp = laplace_eig(res.z, pb, k_max=prior.N, tol=0.0)
        assert np.all(lp.eigenvalues >= 0)
        Lf = posterior_factor(lp, prior)
        H, _, _ = _dense(A, prior, 5.0)
        Hinv = np.linalg.inv(H)
        assert np.linalg.norm(Lf @ Lf.T - Hinv) <= 1e-8 * np.linalg.norm(Hinv)
        # matrix-free Mahalanobis against dense
        x = prior.sample(9)
        dense = math.sqrt((res.z - x) @ H @ (res.z - x))
        assert mahalanobis(x, lp, prior) == pytest.approx(dense, rel=1e-10)

    def test_sampling(self, rng):
        N = 10
        prior = build_prior(N, 60.0, np.zeros(N), 0.05, 0.01)
        lp0 = LaplacePosterior(np.full(N, 3.0), np.zeros((N, 0)), np.zeros(0))
        np.testing.assert_array_equal(posterior_sample(lp0, prior, 0, omega=np.zeros((1, N)))[0], lp0.z_map)
        S = posterior_sample(lp0, prior, 1, count=10_000)
        C = prior.dense_covariance()
        assert np.linalg.norm(np.cov(S.T) - C) <= 0.05 * np.linalg.norm(C)
        se = np.sqrt(np.diag(C) / 10_000)
        assert np.all(np.abs(S.mean(0) - lp0.z_map) <= 3 * se + 1e-12) or np.mean(np.abs(S.mean(0) - lp0.z_map) <= 3 * se) > 0.9
        np.testing.assert_array_equal(posterior_sample(lp0, prior, 5, count=3), posterior_sample(lp0, prior, 5, count=3))

    def test_mahalanobis_simple(self):
        prior = build_prior(5, 60.0, np.zeros(5), 0.0, 1.0)
        lp = LaplacePosterior(np.zeros(5), np.zeros((5, 0)), np.zeros(0))
        assert mahalanobis(np.array([3.0, 4, 0, 0, 0]), lp, prior) == pytest.approx(5.0)
        assert mahalanobis(lp.z_map, lp, prior) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.0, 1e6), min_size=1, max_size=8))
def test_smw_identity_property(lams):
    lam = np.sort(np.array(lams))[::-1]
    lp = LaplacePosterior(np.zeros(lam.size), np.eye(lam.size), lam)
    np.testing.assert_allclose(2 * lp.p + lp.p**2, -lp.d, atol=1e-12)
