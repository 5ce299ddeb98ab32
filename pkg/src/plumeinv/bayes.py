"""Gaussian prior, approximation-error noise model, MAP estimation and Laplace sampling.

Forward models are duck-typed: anything with ``evaluate(z) -> F`` (stacked
observables) and ``linearize(z) -> cache`` where the cache exposes ``F``,
``jvp(v)`` and ``vjp(y)``. :class:`~plumeinv.observe.SurrogateForward` and
:class:`~plumeinv.observe.LinearForward` both qualify.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.optimize import brentq

from .errors import DimensionMismatch, LanczosBreakdown, NonFinite

log = logging.getLogger(__name__)

# Prior operator constants for N=120, T=60: pointwise std ~3000, correlation
# length ~15 min (lag where correlation drops to 1/e). See calibrate_prior.
DEFAULT_PRIOR_GAMMA = 0.002431999470990781
DEFAULT_PRIOR_DELTA = 4.944226350810681e-05


def prior_mean_curve(t, start: float = 10000.0, end: float = 2000.0, T: float = 60.0):
    """Linearly decreasing prior mean ``start - (start - end) t / T``."""
    return start - (start - end) / T * np.asarray(t, float)


def neumann_laplacian(N: int, dt: float) -> np.ndarray:
    """Symmetric 1-D second-difference matrix with zero-flux ends, scaled by ``1/dt^2``."""
    K = 2.0 * np.eye(N) - np.eye(N, k=1) - np.eye(N, k=-1)
    K[0, 0] = K[-1, -1] = 1.0
    if N == 1:
        K[0, 0] = 0.0
    return K / dt**2


@dataclass
class GaussianPrior:
    """Gaussian prior with precision ``E E^T`` for a dense invertible ``E``."""

    mean: np.ndarray
    E: np.ndarray
    gamma: float = 0.0
    delta: float = 1.0
    _lu: tuple = field(init=False, repr=False)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, float)
        self.E = np.asarray(self.E, float)
        if self.E.shape != (self.N, self.N):
            raise DimensionMismatch("prior factor must be N x N")
        self._lu = sla.lu_factor(self.E)

    @property
    def N(self) -> int:
        return self.mean.size

    def apply_E(self, v):
        return self.E @ v

    def apply_Et(self, v):
        return self.E.T @ v

    def solve_E(self, v):
        return sla.lu_solve(self._lu, v)

    def solve_Et(self, v):
        return sla.lu_solve(self._lu, v, trans=1)

    def precision(self, v):
        """``Gamma_prior^{-1} v = E E^T v``."""
        return self.E @ (self.E.T @ v)

    def covariance(self, v):
        """``Gamma_prior v = E^{-T} E^{-1} v``."""
        return self.solve_Et(self.solve_E(v))

    def dense_covariance(self) -> np.ndarray:
        Einv = self.solve_E(np.eye(self.N))
        return Einv.T @ Einv

    def sample(self, seed, count: int | None = None, omega=None) -> np.ndarray:
        """``mean + E^{-T} omega`` with standard normal ``omega``."""
        if omega is None:
            rng = np.random.default_rng(seed)
            omega = rng.standard_normal((self.N,) if count is None else (count, self.N))
        omega = np.asarray(omega, float)
        return self.mean + self.solve_Et(omega.T).T


def build_prior(N: int, T: float, mean_spec=None, gamma: float = DEFAULT_PRIOR_GAMMA, delta: float = DEFAULT_PRIOR_DELTA) -> GaussianPrior:
    """Prior with ``E = gamma K + delta I`` on the interval start times.

    ``mean_spec`` is an array of length ``N``, a callable of time, or ``None``
    for the default linearly decreasing mean.
    """
    if gamma < 0 or delta <= 0:
        raise ValueError("need gamma >= 0 and delta > 0")
    dt = T / N
    t = dt * np.arange(N)
    if mean_spec is None:
        mean = prior_mean_curve(t, T=T)
    elif callable(mean_spec):
        mean = np.asarray(mean_spec(t), float)
    else:
        mean = np.asarray(mean_spec, float)
    E = gamma * neumann_laplacian(N, dt) + delta * np.eye(N)
    return GaussianPrior(mean, E, gamma, delta)


def _corr_length(C: np.ndarray, dt: float, level: float = math.exp(-1.0)) -> float:
    mid = C.shape[0] // 2
    row = C[mid, mid:] / math.sqrt(C[mid, mid])
    row = row / np.sqrt(np.diag(C)[mid:])
    below = np.nonzero(row < level)[0]
    if below.size == 0:
        return dt * (row.size - 1)
    k = below[0]
    # linear interpolation between lags k-1 and k
    f = (row[k - 1] - level) / (row[k - 1] - row[k])
    return dt * (k - 1 + f)


def prior_statistics(prior: GaussianPrior, dt: float) -> tuple[float, float]:
    """RMS pointwise standard deviation and 1/e correlation length of a prior."""
    C = prior.dense_covariance()
    return float(np.sqrt(np.mean(np.diag(C)))), _corr_length(C, dt)


def calibrate_prior(N: int = 120, T: float = 60.0, target_std: float = 3000.0, corr_length: float = 15.0):
    """Solve for ``(gamma, delta)`` matching a pointwise std and correlation length.

    Correlation depends only on ``rho^2 = gamma / delta`` and the std scales as
    ``1 / delta``, so this is a scalar root find followed by a rescale.
    """
    dt = T / N

    def length(log_rho):
        rho2 = math.exp(2 * log_rho)
        p = build_prior(N, T, np.zeros(N), rho2, 1.0)
        return prior_statistics(p, dt)[1] - corr_length

    log_rho = brentq(length, math.log(dt * 1e-2), math.log(T * 10), xtol=1e-12)
    rho2 = math.exp(2 * log_rho)
    unit_std = prior_statistics(build_prior(N, T, np.zeros(N), rho2, 1.0), dt)[0]
    delta = unit_std / target_std
    return rho2 * delta, delta


# ---------------------------------------------------------------------------
# noise models


@dataclass(frozen=True)
class NoiseModel:
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")


@dataclass
class BaeStats:
    """Empirical approximation-error mean and covariance plus the data noise."""

    mean_error: np.ndarray
    cov_error: np.ndarray
    sigma: float
    b: int
    jitter: float = 0.0
    _chol: tuple = field(init=False, repr=False)

    def __post_init__(self):
        self.mean_error = np.asarray(self.mean_error, float)
        self.cov_error = np.asarray(self.cov_error, float)
        G = self.gamma_bae
        try:
            self._chol = sla.cho_factor(G, lower=True)
            return
        except np.linalg.LinAlgError:
            pass
        # escalate a diagonal shift until the factorization succeeds
        base = 1e-8 * abs(np.trace(G)) / G.shape[0] or 1e-12
        for k in range(8):
            self.jitter = base * 10.0**k
            try:
                self._chol = sla.cho_factor(self.gamma_bae, lower=True)
                log.warning("approximation-error covariance regularised with jitter %.3e", self.jitter)
                return
            except np.linalg.LinAlgError:
                continue
        raise NonFinite("approximation-error covariance is not positive definite")

    @property
    def gamma_bae(self) -> np.ndarray:
        return self.sigma**2 * np.eye(self.mean_error.size) + self.cov_error + self.jitter * np.eye(self.mean_error.size)

    def solve(self, rho):
        """``Gamma_BAE^{-1} rho``."""
        return sla.cho_solve(self._chol, rho)


@dataclass(frozen=True)
class _DiagonalNoise:
    """Noise-only likelihood weights: zero mean shift, ``sigma^2 I`` covariance."""

    sigma: float
    size: int

    @property
    def mean_error(self):
        return np.zeros(self.size)

    def solve(self, rho):
        return np.asarray(rho, float) / self.sigma**2


def estimate_bae(prior: GaussianPrior, wind_sampler, forward, wbar_reduced, b: int, seed, sigma: float) -> BaeStats:
    """Approximation-error statistics from ``b`` paired prior/wind draws.

    ``wind_sampler(k)`` returns the reduced wind ``(N, r_w)`` for draw ``k``;
    ``forward.evaluate(Z, W)`` evaluates a batch of sources under a batch of
    winds. Errors are ``e_k = F(z_k, w_k) - F(z_k, wbar)``.
    """
    if b < 2:
        raise ValueError("need at least two samples")
    Z = prior.sample(np.random.SeedSequence([seed, 0]), count=b)
    W = np.array([wind_sampler(k) for k in range(b)])
    Wbar = np.broadcast_to(np.asarray(wbar_reduced, float), W.shape)
    e = forward.evaluate(Z, W) - forward.evaluate(Z, Wbar)
    ebar = e.mean(axis=0)
    dev = e - ebar
    cov = dev.T @ dev / (b - 1)
    cov = 0.5 * (cov + cov.T)
    return BaeStats(ebar, cov, sigma, b)


# ---------------------------------------------------------------------------
# objective and derivatives


class InverseProblem:
    """Negative log posterior for ``z`` given stacked data ``d``.

    ``noise`` is a :class:`BaeStats` (approximation-error mode) or a
    :class:`NoiseModel` (traditional mode: zero mean shift, ``sigma^2 I``).
    ``data_weight`` scales the misfit term; zero gives the prior alone.
    """

    def __init__(self, forward, data, prior: GaussianPrior, noise, data_weight: float = 1.0):
        self.forward = forward
        self.d = np.asarray(data, float).ravel()
        self.prior = prior
        if isinstance(noise, NoiseModel):
            noise = _DiagonalNoise(noise.sigma, self.d.size)
        self.noise = noise
        self.data_weight = float(data_weight)
        self._cache = None
        self.evaluations = 0

    @property
    def mode(self) -> str:
        return "bae" if isinstance(self.noise, BaeStats) else "traditional"

    def _linearize(self, z):
        z = np.asarray(z, float)
        if self._cache is None or not np.array_equal(self._cache.z, z):
            self._cache = self.forward.linearize(z)
            self.evaluations += 1
        return self._cache

    def residual(self, z) -> np.ndarray:
        return self._linearize(z).F + self.noise.mean_error - self.d

    def misfit(self, z) -> float:
        rho = self.residual(z)
        return 0.5 * self.data_weight * float(rho @ self.noise.solve(rho))

    def regularization(self, z) -> float:
        y = self.prior.apply_Et(np.asarray(z, float) - self.prior.mean)
        return 0.5 * float(y @ y)

    def objective(self, z) -> float:
        J = self.misfit(z) + self.regularization(z)
        if not math.isfinite(J):
            raise NonFinite("objective is not finite")
        return J

    def gradient(self, z) -> np.ndarray:
        cache = self._linearize(z)
        rho = cache.F + self.noise.mean_error - self.d
        g = self.data_weight * cache.vjp(self.noise.solve(rho))
        return g + self.prior.precision(np.asarray(z, float) - self.prior.mean)

    def misfit_hessian_vp(self, z, v) -> np.ndarray:
        """Gauss-Newton misfit Hessian action ``J^T Gamma^{-1} J v``."""
        cache = self._linearize(z)
        return self.data_weight * cache.vjp(self.noise.solve(cache.jvp(np.asarray(v, float))))

    def gn_hessian_vp(self, z, v) -> np.ndarray:
        return self.misfit_hessian_vp(z, v) + self.prior.precision(np.asarray(v, float))


# ---------------------------------------------------------------------------
# MAP estimation


@dataclass
class MapResult:
    z: np.ndarray
    objective: float
    grad_norm: float
    grad_norm0: float
    iterations: int
    converged: bool
    line_search_failed: bool = False
    history: list = field(default_factory=list)  # objective per accepted iterate


def _pcg(apply_A, b, apply_Minv, rtol: float, maxiter: int):
    """Preconditioned CG for ``A x = b`` from ``x = 0``."""
    x = np.zeros_like(b)
    r = b.copy()
    z = apply_Minv(r)
    p = z.copy()
    rz = r @ z
    target = rtol * math.sqrt(max(rz, 0.0))
    for it in range(maxiter):
        if math.sqrt(max(rz, 0.0)) <= target:
            return x, it
        Ap = apply_A(p)
        pAp = p @ Ap
        if pAp <= 0:
            return (x if it else p), it
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        z = apply_Minv(r)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, maxiter


def compute_map(
    problem: InverseProblem,
    z_init=None,
    tol: float = 1e-6,
    max_iters: int = 50,
    *,
    armijo: float = 1e-4,
    max_backtracks: int = 30,
) -> MapResult:
    """Inexact Newton-CG with Armijo backtracking on the Gauss-Newton Hessian.

    CG is preconditioned with the prior covariance and stopped at relative
    residual ``0.5 * min(1, sqrt(|g| / |g0|))``. Stops when
    ``|g| <= tol * |g0|`` or after ``max_iters`` Newton steps.
    """
    z = np.array(problem.prior.mean if z_init is None else z_init, float)
    J = problem.objective(z)
    g = problem.gradient(z)
    g0 = float(np.linalg.norm(g))
    history = [J]
    if g0 == 0.0:
        return MapResult(z, J, 0.0, 0.0, 0, True, False, history)
    gn = g0
    N = z.size
    for it in range(1, max_iters + 1):
        if gn <= tol * g0:
            return MapResult(z, J, gn, g0, it - 1, True, False, history)
        eta = 0.5 * min(1.0, math.sqrt(gn / g0))
        zc = z
        step, _ = _pcg(lambda v: problem.gn_hessian_vp(zc, v), -g, problem.prior.covariance, eta, 2 * N)
        slope = float(g @ step)
        if slope >= 0:
            step, slope = -g, -gn * gn
        alpha = 1.0
        for _ in range(max_backtracks):
            z_try = z + alpha * step
            J_try = problem.objective(z_try)
            if J_try <= J + armijo * alpha * slope:
                break
            alpha *= 0.5
        else:
            log.warning("line search failed at iteration %d", it)
            return MapResult(z, J, gn, g0, it - 1, False, True, history)
        z, J = z_try, J_try
        g = problem.gradient(z)
        gn = float(np.linalg.norm(g))
        history.append(J)
    return MapResult(z, J, gn, g0, max_iters, gn <= tol * g0, False, history)


# ---------------------------------------------------------------------------
# Laplace approximation


def lanczos(apply_A, n: int, steps: int, seed=0):
    """Symmetric Lanczos with full reorthogonalisation.

    Returns Ritz values (descending) and vectors. An exhausted Krylov space is
    restarted from a fresh random vector orthogonal to the current basis.
    """
    rng = np.random.default_rng(seed)
    steps = min(steps, n)
    Q = np.zeros((n, steps))
    alpha = np.zeros(steps)
    beta = np.zeros(steps)
    q = rng.standard_normal(n)
    q /= np.linalg.norm(q)
    scale = 0.0
    for j in range(steps):
        Q[:, j] = q
        w = apply_A(q)
        alpha[j] = q @ w
        w -= Q[:, : j + 1] @ (Q[:, : j + 1].T @ w)
        w -= Q[:, : j + 1] @ (Q[:, : j + 1].T @ w)
        b = np.linalg.norm(w)
        scale = max(scale, abs(alpha[j]), b)
        if j + 1 == steps:
            break
        if b <= 1e-12 * max(scale, 1e-300):
            for _ in range(10):
                w = rng.standard_normal(n)
                w -= Q[:, : j + 1] @ (Q[:, : j + 1].T @ w)
                w -= Q[:, : j + 1] @ (Q[:, : j + 1].T @ w)
                nw = np.linalg.norm(w)
                if nw > 1e-8:
                    break
            else:
                raise LanczosBreakdown("could not extend the Krylov basis")
            beta[j] = 0.0
            q = w / nw
        else:
            beta[j] = b
            q = w / b
    T = np.diag(alpha) + np.diag(beta[: steps - 1], 1) + np.diag(beta[: steps - 1], -1)
    theta, S = np.linalg.eigh(T)
    order = np.argsort(theta)[::-1]
    return theta[order], Q @ S[:, order]


@dataclass
class LaplacePosterior:
    z_map: np.ndarray
    V: np.ndarray  # (N, k)
    eigenvalues: np.ndarray  # (k,)

    @property
    def k(self) -> int:
        return self.eigenvalues.size

    @property
    def d(self) -> np.ndarray:
        lam = self.eigenvalues
        return lam / (1.0 + lam)

    @property
    def p(self) -> np.ndarray:
        return -1.0 + 1.0 / np.sqrt(1.0 + self.eigenvalues)


def laplace_eig(
    z_map,
    problem: InverseProblem,
    k_max: int = 60,
    tol: float = 0.01,
    *,
    oversample: int = 20,
    seed=0,
) -> LaplacePosterior:
    """Low-rank eigendecomposition of the prior-preconditioned misfit GN Hessian.

    Keeps the leading eigenpairs with ``lambda >= tol`` (at most ``k_max``).
    """
    z_map = np.asarray(z_map, float)
    prior = problem.prior
    N = z_map.size

    def op(v):
        return prior.solve_E(problem.misfit_hessian_vp(z_map, prior.solve_Et(v)))

    lam, V = lanczos(op, N, min(N, k_max + oversample), seed=seed)
    lam = np.clip(lam, 0.0, None)
    limit = min(k_max, lam.size)
    keep = limit if tol <= 0 else int(np.count_nonzero(lam[:limit] >= tol))
    return LaplacePosterior(z_map, V[:, :keep].copy(), lam[:keep].copy())


def posterior_sample(lp: LaplacePosterior, prior: GaussianPrior, seed, count: int = 1, omega=None) -> np.ndarray:
    """Draws ``z_map + E^{-T} (I + V P V^T) omega``, shape ``(count, N)``."""
    if omega is None:
        omega = np.random.default_rng(seed).standard_normal((count, lp.z_map.size))
    omega = np.atleast_2d(np.asarray(omega, float))
    y = omega + (omega @ lp.V) * lp.p @ lp.V.T
    return lp.z_map + prior.solve_Et(y.T).T


def posterior_factor(lp: LaplacePosterior, prior: GaussianPrior) -> np.ndarray:
    """Dense sampling factor ``L`` with ``L L^T`` the Laplace covariance."""
    N = lp.z_map.size
    inner = np.eye(N) + (lp.V * lp.p) @ lp.V.T
    return prior.solve_Et(inner)


def mahalanobis(x, lp: LaplacePosterior, prior: GaussianPrior) -> float:
    """Distance of ``x`` from the Laplace posterior using ``E (I + V Lambda V^T) E^T``."""
    y = prior.apply_Et(lp.z_map - np.asarray(x, float))
    proj = lp.V.T @ y
    return math.sqrt(float(y @ y + np.sum(lp.eigenvalues * proj**2)))
