"""SO2 advection-diffusion-reaction model used to generate ground truth data.

The state lives on a uniform node-centred grid over
``[0, 200] km x [0, 20] km`` and is stored row-major with altitude as the
slow index, so node ``(j, i)`` maps to flat index ``j * nx + i``.

Time is split into ``N`` output intervals ``[t_n, t_{n+1})``. Source
magnitude and wind are held fixed on each interval (evaluated at ``t_n``),
which makes the discrete solution an exact flow map
``u_{n+1} = F(u_n, z_n, w_n)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import NonFinite, StabilityViolation, ZeroReference

LX = 200.0
LY = 20.0

# Uniform sampling intervals for the nine wind hyperparameters (greater
# variability case). The lesser case shrinks each interval about its midpoint.
THETA_MIN = np.array([0.0, 0.95, 0.0, 0.95, -0.1, -0.05, -0.05, -0.05, -0.05])
THETA_MAX = np.array([0.2, 1.05, 0.2, 1.05, 0.1, 0.15, 0.15, 0.15, 0.15])

LESSER_SCALE = 0.35
GREATER_SCALE = 1.0

STABILITY_SAFETY = 0.4


@dataclass(frozen=True)
class GridSpec:
    """Space-time discretization.

    ``substeps_per_node=None`` lets the solver pick the smallest substep count
    satisfying the explicit stability bound for the wind it is given.
    """

    nx: int = 201
    ny: int = 41
    N: int = 120
    T: float = 60.0
    substeps_per_node: int | None = None

    def __post_init__(self):
        if self.nx < 3 or self.ny < 3:
            raise ValueError("grid needs at least 3 nodes per axis")
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.T <= 0:
            raise ValueError("T must be positive")
        if self.substeps_per_node is not None and self.substeps_per_node < 1:
            raise ValueError("substeps_per_node must be >= 1")

    @property
    def dx(self) -> float:
        return LX / (self.nx - 1)

    @property
    def dy(self) -> float:
        return LY / (self.ny - 1)

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def m(self) -> int:
        return self.nx * self.ny

    @property
    def x(self) -> np.ndarray:
        return np.linspace(0.0, LX, self.nx)

    @property
    def y(self) -> np.ndarray:
        return np.linspace(0.0, LY, self.ny)

    @property
    def times(self) -> np.ndarray:
        """Output times ``t_0 .. t_N``."""
        return self.dt * np.arange(self.N + 1)

    @property
    def step_times(self) -> np.ndarray:
        """Interval start times ``t_0 .. t_{N-1}``."""
        return self.dt * np.arange(self.N)

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """Flattened node coordinates ``(x, y)``, each of length ``m``."""
        X, Y = np.meshgrid(self.x, self.y)
        return X.ravel(), Y.ravel()

    def quadrature_weights(self) -> np.ndarray:
        """Trapezoidal cell areas (km^2) per node, shape ``(m,)``."""
        wx = np.full(self.nx, self.dx)
        wx[[0, -1]] *= 0.5
        wy = np.full(self.ny, self.dy)
        wy[[0, -1]] *= 0.5
        return np.outer(wy, wx).ravel()


@dataclass(frozen=True)
class PhysicalParams:
    kappa: float = 1e-1
    S_terminal: float = 1.705e-4
    rho_so2: float = 2.92
    rho_atmo: float = 1.28
    g: float = 35.316
    C_s: float = 0.38
    particle_radius: float = 5e-11
    k_efold: float = 1.0 / 44640.0

    def __post_init__(self):
        for name, value in vars(self).items():
            if not (value > 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be positive and finite, got {value}")


@dataclass(frozen=True)
class WindParams:
    theta: np.ndarray = field(default_factory=lambda: np.zeros(9))
    variability_scale: float = GREATER_SCALE

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float)
        if theta.shape != (9,):
            raise ValueError("theta must have 9 components")
        if not 0.0 < self.variability_scale <= 1.0:
            raise ValueError("variability_scale must lie in (0, 1]")
        object.__setattr__(self, "theta", theta)


def theta_bounds(variability_scale: float) -> tuple[np.ndarray, np.ndarray]:
    """Sampling interval for each theta component at the given scale."""
    mid = 0.5 * (THETA_MIN + THETA_MAX)
    half = 0.5 * (THETA_MAX - THETA_MIN) * variability_scale
    return mid - half, mid + half


def mean_wind_params(variability_scale: float = GREATER_SCALE) -> WindParams:
    lo, hi = theta_bounds(variability_scale)
    return WindParams(0.5 * (lo + hi), variability_scale)


def sample_wind_params(seed, variability_scale: float = GREATER_SCALE) -> WindParams:
    """Draw theta uniformly from the scaled intervals; deterministic in ``seed``."""
    lo, hi = theta_bounds(variability_scale)
    rng = np.random.default_rng(seed)
    return WindParams(rng.uniform(lo, hi), variability_scale)


def _wind_factors(theta, x, y, t):
    th = np.asarray(theta.theta if isinstance(theta, WindParams) else theta, dtype=float)
    T1 = 0.9 + th[0] * np.cos(2 * np.pi * th[1] * t / 60.0)
    T2 = 0.9 + th[2] * np.cos(4 * np.pi * th[3] * t / 60.0)
    T3 = 0.9 + 0.1 * th[4] * np.cos(2 * np.pi * t / 60.0)
    a1 = 4 * np.pi * T1 * x / 200.0
    a2 = 6 * np.pi * T2 * x / 200.0
    X = 1.0 + th[5] * np.sin(a1) + th[6] * np.cos(a1) + th[7] * np.sin(a2) + th[8] * np.cos(a2)
    Y = 0.25 + 3.75 * T3 * np.sin(np.pi * y / 20.0)
    return X, Y


def evaluate_wind(theta, x, y, t):
    """Longitudinal wind speed (km/min) at ``(x, y, t)``; broadcasts."""
    X, Y = _wind_factors(theta, np.asarray(x, float), np.asarray(y, float), np.asarray(t, float))
    return X * Y


def wind_field(theta, grid: GridSpec) -> np.ndarray:
    """Wind on the grid at the interval start times, shape ``(N, m)``."""
    t = grid.step_times[:, None]
    X, _ = _wind_factors(theta, grid.x[None, :], 0.0, t)
    _, Y = _wind_factors(theta, 0.0, grid.y[None, :], t)
    return (Y[:, :, None] * X[:, None, :]).reshape(grid.N, grid.m)


def source_profile(x, y):
    return np.exp(-100.0 * (np.asarray(x) - 5.0) ** 2) * np.exp(-0.1 * (np.asarray(y) - 9.0) ** 2)


def terminal_speed(p: PhysicalParams | None = None, *, particle_radius=None) -> float:
    """Stokes-drag terminal fall speed from the physical constants (km/min)."""
    p = p or PhysicalParams()
    r = p.particle_radius if particle_radius is None else particle_radius
    return math.sqrt((8.0 / 3.0) * (p.rho_so2 / p.rho_atmo) * (p.g / p.C_s) * r)


def source_magnitude_curve(eta1: float, eta2: float, t) -> np.ndarray:
    return 3e3 * eta1 * np.exp(-0.015 * eta2 * np.asarray(t, float))


def sample_source_magnitude(eta1: float, eta2: float, grid: GridSpec) -> np.ndarray:
    """Source magnitude on each output interval, evaluated at ``t_n``; shape ``(N,)``."""
    if eta1 <= 0 or eta2 <= 0:
        raise ValueError("eta1 and eta2 must be positive")
    return source_magnitude_curve(eta1, eta2, grid.step_times)


def required_substeps(grid: GridSpec, kappa: float, max_wind: float, fall_speed: float) -> int:
    """Smallest substep count with ``dt_sub <= 0.4 * min(h^2/4k, dx/|w|, dy/S)``."""
    limits = []
    if kappa > 0:
        limits.append(min(grid.dx, grid.dy) ** 2 / (4.0 * kappa))
    if max_wind > 0:
        limits.append(grid.dx / max_wind)
    if fall_speed > 0:
        limits.append(grid.dy / fall_speed)
    if not limits:
        return 1
    dt_max = STABILITY_SAFETY * min(limits)
    return max(1, math.ceil(grid.dt / dt_max - 1e-12))


def _rhs(u, w, z_n, profile, grid, kappa, fall_speed, decay):
    # ghost nodes mirror the first interior node: zero normal derivative
    up = np.pad(u, 1, mode="reflect")
    c = up[1:-1, 1:-1]
    west, east = up[1:-1, :-2], up[1:-1, 2:]
    south, north = up[:-2, 1:-1], up[2:, 1:-1]
    out = kappa * ((east - 2 * c + west) / grid.dx**2 + (north - 2 * c + south) / grid.dy**2)
    if w is not None:
        out -= np.where(w >= 0, w * (c - west), w * (east - c)) / grid.dx
    if fall_speed:
        # settling moves mass downward, so the upwind neighbour is above
        out += fall_speed * (north - c) / grid.dy
    if decay:
        out -= decay * c
    if z_n:
        out += z_n * profile
    return out


def integrate(
    z,
    wind,
    grid: GridSpec,
    *,
    kappa: float,
    fall_speed: float,
    decay: float,
    profile=None,
    u0=None,
) -> np.ndarray:
    """Method-of-lines integration with Heun (SSP-RK2) substeps.

    ``wind`` is an ``(N, m)`` array or ``None`` for no advection. ``u0``
    defaults to the zero field. Returns the ``(N+1, m)`` trajectory.
    """
    z = np.asarray(z, dtype=float)
    if z.shape != (grid.N,):
        raise ValueError(f"source magnitude must have length N={grid.N}")
    if profile is None:
        xs, ys = grid.mesh()
        profile = source_profile(xs, ys)
    profile = np.asarray(profile, float).reshape(grid.ny, grid.nx)
    if wind is not None:
        wind = np.asarray(wind, float)
        if wind.shape != (grid.N, grid.m):
            raise ValueError("wind must have shape (N, m)")
    max_wind = 0.0 if wind is None else float(np.abs(wind).max())
    needed = required_substeps(grid, kappa, max_wind, fall_speed)
    substeps = grid.substeps_per_node or needed
    if substeps < needed:
        raise StabilityViolation(
            f"{substeps} substeps per output interval violate the stability bound; need {needed}"
        )
    h = grid.dt / substeps

    out = np.empty((grid.N + 1, grid.m))
    u = np.zeros((grid.ny, grid.nx)) if u0 is None else np.array(u0, float).reshape(grid.ny, grid.nx)
    out[0] = u.ravel()
    for n in range(grid.N):
        w = None if wind is None else wind[n].reshape(grid.ny, grid.nx)
        args = (w, z[n], profile, grid, kappa, fall_speed, decay)
        for _ in range(substeps):
            k1 = _rhs(u, *args)
            u1 = u + h * k1
            k2 = _rhs(u1, *args)
            u = 0.5 * (u + u1 + h * k2)
        if not np.all(np.isfinite(u)):
            raise NonFinite(f"non-finite state after output step {n + 1}")
        out[n + 1] = u.ravel()
    return out


def solve_pde(
    z,
    theta: WindParams,
    grid: GridSpec | None = None,
    params: PhysicalParams | None = None,
    *,
    wind=None,
) -> np.ndarray:
    """Solve the dispersion model for one (source, wind) pair.

    Returns the ``(N+1, m)`` state trajectory with snapshot 0 equal to zero.
    A precomputed ``wind`` array may be passed to skip re-evaluating ``theta``.
    """
    grid = grid or GridSpec()
    params = params or PhysicalParams()
    if wind is None:
        wind = wind_field(theta, grid)
    return integrate(
        z,
        wind,
        grid,
        kappa=params.kappa,
        fall_speed=params.S_terminal,
        decay=params.k_efold,
    )


def relative_wind_distance(w, wbar) -> float:
    """Squared-norm ratio ``||w - wbar||^2 / ||wbar||^2``."""
    w = np.asarray(w, float)
    wbar = np.asarray(wbar, float)
    if w.shape != wbar.shape:
        raise ValueError("wind fields differ in shape")
    ref = float(np.vdot(wbar, wbar))
    if ref == 0.0:
        raise ZeroReference("reference wind has zero norm")
    d = w - wbar
    return float(np.vdot(d, d)) / ref


def select_extreme_winds(candidates: Iterable, wbar, count: int) -> list[int]:
    """Indices of the ``count`` candidates farthest from ``wbar``.

    Ordered by distance descending, ties broken by lower index. Candidates
    may be a lazy iterable; only the distances are kept.
    """
    dist = [relative_wind_distance(w, wbar) for w in candidates]
    if count > len(dist):
        raise ValueError("count exceeds the number of candidates")
    order = sorted(range(len(dist)), key=lambda i: (-dist[i], i))
    return order[:count]


def select_test_wind(candidates: Iterable, training_winds: Sequence) -> int:
    """Index of the candidate with the largest mean l2 distance to the training winds."""
    training = [np.asarray(w, float) for w in training_winds]
    if not training:
        raise ValueError("need at least one training wind")
    best, best_score = -1, -np.inf
    for i, w in enumerate(candidates):
        w = np.asarray(w, float)
        score = float(np.mean([np.linalg.norm(w - t) for t in training]))
        if score > best_score:
            best, best_score = i, score
    if best < 0:
        raise ValueError("no candidates given")
    return best
