"""Sensors and the parameter-to-observable map built on the surrogate.

Observations are stacked time-major: entry ``(n - 1) * L + l`` of the
stacked vector is sensor ``l`` at time ``t_n``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dispersion import LX, LY, GridSpec, PhysicalParams, solve_pde
from .errors import DimensionMismatch, NonFinite, StaleCache
from .flownet import FlowNetParams, rollout, step_with_jacobians
from .reduction import PcaBasis, project

DEFAULT_SENSOR_X = tuple(float(x) for x in range(10, 200, 20))
DEFAULT_SENSOR_Y = (5.0, 10.0, 15.0)


def default_sensors() -> np.ndarray:
    """Ten sensors along the plume path at alternating altitudes."""
    xs = DEFAULT_SENSOR_X
    ys = [DEFAULT_SENSOR_Y[k % 3] for k in range(len(xs))]
    return np.column_stack([xs, ys])


@dataclass(frozen=True)
class ObservationOperator:
    locations: np.ndarray
    selection: np.ndarray  # (L, m), rows are interpolation weights

    @property
    def L(self) -> int:
        return self.selection.shape[0]


def bilinear_weights(grid: GridSpec, x: float, y: float) -> np.ndarray:
    """Interpolation row for the point ``(x, y)``."""
    if not (0.0 <= x <= LX and 0.0 <= y <= LY):
        raise ValueError(f"sensor ({x}, {y}) lies outside the domain")
    fx, fy = x / grid.dx, y / grid.dy
    i = min(int(np.floor(fx)), grid.nx - 2)
    j = min(int(np.floor(fy)), grid.ny - 2)
    ax, ay = fx - i, fy - j
    row = np.zeros(grid.m)
    for dj, wy in ((0, 1 - ay), (1, ay)):
        for di, wx in ((0, 1 - ax), (1, ax)):
            row[(j + dj) * grid.nx + i + di] += wx * wy
    return row


def nearest_weights(grid: GridSpec, x: float, y: float) -> np.ndarray:
    row = np.zeros(grid.m)
    i = int(round(x / grid.dx))
    j = int(round(y / grid.dy))
    row[j * grid.nx + i] = 1.0
    return row


def make_operator(grid: GridSpec, locations=None, method: str = "bilinear") -> ObservationOperator:
    locs = default_sensors() if locations is None else np.asarray(locations, float).reshape(-1, 2)
    fn = {"bilinear": bilinear_weights, "nearest": nearest_weights}[method]
    sel = np.array([fn(grid, x, y) for x, y in locs])
    return ObservationOperator(locs, sel)


def observe(u, op: ObservationOperator) -> np.ndarray:
    """Sensor readings of a physical state ``(m,)`` or a batch ``(..., m)``."""
    u = np.asarray(u, float)
    if u.shape[-1] != op.selection.shape[1]:
        raise DimensionMismatch(f"state length {u.shape[-1]} != {op.selection.shape[1]}")
    return u @ op.selection.T


@dataclass
class ObservationSet:
    values: np.ndarray  # (L, N): column n-1 holds d_n

    @property
    def stacked(self) -> np.ndarray:
        return np.asarray(self.values, float).T.ravel()

    @classmethod
    def from_stacked(cls, d, L: int) -> "ObservationSet":
        return cls(np.asarray(d, float).reshape(-1, L).T.copy())


@dataclass
class ForwardCache:
    """Per-step reduced states and network Jacobians along one trajectory."""

    z: np.ndarray
    states: np.ndarray  # (N+1, r)
    jac_c: np.ndarray  # (N, r, r)
    jac_z: np.ndarray  # (N, r)
    obs_basis: np.ndarray  # (L, r) = O U_r
    F: np.ndarray  # stacked observables at z
    valid: bool = True

    def check(self, z=None):
        if not self.valid:
            raise StaleCache("forward cache was invalidated")
        if z is not None and not np.array_equal(np.asarray(z, float), self.z):
            raise StaleCache("forward cache was built for a different source magnitude")

    def jvp(self, v):
        return apply_jacobian(self, v)

    def vjp(self, y):
        return apply_jacobian_transpose(self, y)


def apply_jacobian(cache: ForwardCache, v, *, at=None) -> np.ndarray:
    """``(dF/dz) v`` by the tangent recursion over cached step Jacobians."""
    cache.check(at)
    v = np.asarray(v, float)
    N, r = cache.jac_z.shape
    if v.shape != (N,):
        raise DimensionMismatch(f"direction must have length {N}")
    dc = np.zeros(r)
    out = np.empty((N, cache.obs_basis.shape[0]))
    for n in range(N):
        dc = cache.jac_c[n] @ dc + cache.jac_z[n] * v[n]
        out[n] = cache.obs_basis @ dc
    return out.ravel()


def apply_jacobian_transpose(cache: ForwardCache, y, *, at=None) -> np.ndarray:
    """``(dF/dz)^T y`` by the reverse sweep; exact adjoint of :func:`apply_jacobian`."""
    cache.check(at)
    N, r = cache.jac_z.shape
    L = cache.obs_basis.shape[0]
    y = np.asarray(y, float)
    if y.size != N * L:
        raise DimensionMismatch(f"adjoint input must have length {N * L}")
    y = y.reshape(N, L)
    lam = np.zeros(r)
    g = np.empty(N)
    for n in range(N - 1, -1, -1):
        lam = lam + cache.obs_basis.T @ y[n]
        g[n] = cache.jac_z[n] @ lam
        lam = cache.jac_c[n].T @ lam
    return g


@dataclass
class SurrogateForward:
    """Parameter-to-observable map ``z -> F(z, w)`` for one fixed reduced wind.

    ``wind`` holds the reduced wind per step, shape ``(N, r_w)``.
    """

    params: FlowNetParams
    basis: PcaBasis
    op: ObservationOperator
    wind: np.ndarray
    u0: np.ndarray | None = None
    _obs_basis: np.ndarray = field(init=False, repr=False)
    _obs_mean: np.ndarray = field(init=False, repr=False)
    _c0: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.wind = np.asarray(self.wind, float)
        if self.wind.ndim != 2 or self.wind.shape[1] != self.params.r_w:
            raise DimensionMismatch("wind must be (N, r_w)")
        u0 = np.zeros(self.basis.dim) if self.u0 is None else np.asarray(self.u0, float)
        self._c0 = project(u0, self.basis)
        self._obs_basis = self.op.selection @ self.basis.basis
        self._obs_mean = self.op.selection @ self.basis.mean

    @property
    def N(self) -> int:
        return self.wind.shape[0]

    @property
    def L(self) -> int:
        return self.op.L

    def _check_z(self, z):
        z = np.asarray(z, float)
        if z.shape[-1] != self.N:
            raise DimensionMismatch(f"source magnitude must have length {self.N}")
        return z

    def evaluate(self, z, wind=None) -> np.ndarray:
        """Stacked observables; ``z`` may be a batch ``(B, N)`` with ``wind (B, N, r_w)``."""
        z = self._check_z(z)
        w = self.wind if wind is None else np.asarray(wind, float)
        c0 = np.broadcast_to(self._c0, z.shape[:-1] + self._c0.shape)
        if w.ndim == 2 and z.ndim == 2:
            w = np.broadcast_to(w, z.shape + w.shape[-1:])
        C = rollout(c0, z, w, self.params)[..., 1:, :]
        F = C @ self._obs_basis.T + self._obs_mean
        if not np.all(np.isfinite(F)):
            raise NonFinite("surrogate produced non-finite observables")
        return F.reshape(z.shape[:-1] + (-1,))

    def linearize(self, z) -> ForwardCache:
        z = self._check_z(z).copy()
        N, r = self.N, self.params.r
        states = np.empty((N + 1, r))
        jac_c = np.empty((N, r, r))
        jac_z = np.empty((N, r))
        c = self._c0
        states[0] = c
        for n in range(N):
            c, jac_c[n], jac_z[n] = step_with_jacobians(c, z[n], self.wind[n], self.params)
            states[n + 1] = c
        F = states[1:] @ self._obs_basis.T + self._obs_mean
        if not np.all(np.isfinite(F)):
            raise NonFinite("surrogate produced non-finite observables")
        return ForwardCache(z, states, jac_c, jac_z, self._obs_basis, F.ravel())


def predict_observables(z, w_reduced, params: FlowNetParams, basis: PcaBasis, op: ObservationOperator, u0=None) -> ObservationSet:
    """``F_n(z, w)`` for ``n = 1..N`` from ``n``-fold composition of the surrogate."""
    fwd = SurrogateForward(params, basis, op, w_reduced, u0)
    return ObservationSet.from_stacked(fwd.evaluate(z), op.L)


@dataclass
class LinearForward:
    """Fixed affine map ``z -> A z + b``; a drop-in for the surrogate in tests."""

    A: np.ndarray
    b: np.ndarray | None = None

    def __post_init__(self):
        self.A = np.asarray(self.A, float)
        self.b = np.zeros(self.A.shape[0]) if self.b is None else np.asarray(self.b, float)

    @property
    def N(self) -> int:
        return self.A.shape[1]

    def evaluate(self, z, wind=None):
        return np.asarray(z, float) @ self.A.T + self.b

    def linearize(self, z):
        return _LinearCache(self, np.asarray(z, float).copy(), self.evaluate(z))


@dataclass
class _LinearCache:
    fwd: LinearForward
    z: np.ndarray
    F: np.ndarray

    def jvp(self, v):
        return self.fwd.A @ v

    def vjp(self, y):
        return self.fwd.A.T @ y


@dataclass
class PdeForward:
    """Observables of the full dispersion model at a fixed wind field."""

    wind: np.ndarray  # (N, m)
    op: ObservationOperator
    grid: GridSpec
    params: PhysicalParams = field(default_factory=PhysicalParams)

    def evaluate(self, z):
        u = solve_pde(z, None, self.grid, self.params, wind=self.wind)
        return observe(u[1:], self.op).ravel()


def make_test_observations(truth, op: ObservationOperator, noise_rel: float, seed) -> ObservationSet:
    """Observe ``u_1 .. u_N`` and apply multiplicative noise ``1 + noise_rel * N(0, 1)``."""
    u = np.asarray(truth, float)
    clean = observe(u[1:], op)  # (N, L)
    rng = np.random.default_rng(seed)
    noisy = clean * (1.0 + noise_rel * rng.standard_normal(clean.shape))
    return ObservationSet(noisy.T.copy())
