"""End-to-end studies: ensemble generation, P sweeps, inversions and restarts."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .bayes import (
    DEFAULT_PRIOR_DELTA,
    DEFAULT_PRIOR_GAMMA,
    BaeStats,
    GaussianPrior,
    InverseProblem,
    LaplacePosterior,
    MapResult,
    NoiseModel,
    build_prior,
    calibrate_prior,
    compute_map,
    estimate_bae,
    laplace_eig,
    mahalanobis,
    posterior_sample,
    prior_mean_curve,
)
from .config import RunConfig
from .dispersion import (
    GridSpec,
    PhysicalParams,
    WindParams,
    mean_wind_params,
    relative_wind_distance,
    sample_source_magnitude,
    sample_wind_params,
    select_extreme_winds,
    select_test_wind,
    solve_pde,
    wind_field,
)
from .flownet import (
    FlowNetParams,
    ReducedDataset,
    TrainConfig,
    TrainResult,
    ValidationSet,
    train,
    validation_error,
)
from .observe import ObservationOperator, ObservationSet, SurrogateForward, make_operator, make_test_observations
from .reduction import PcaBasis, fit_pca, project, reconstruction_error, select_rank

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# plan and report types


@dataclass(frozen=True)
class ExperimentPlan:
    """What to run for one wind-variability case."""

    config: RunConfig
    out: Path | None = None
    workers: int = 1

    def __post_init__(self):
        if any(p < 1 for p in self.P_values):
            raise ValueError("P values must be >= 1")
        if self.restarts < 1:
            raise ValueError("restart count must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @property
    def case(self) -> str:
        return self.config.case

    @property
    def seeds(self) -> list[int]:
        return list(self.config.study.sweep_seeds)

    @property
    def P_values(self) -> list[int]:
        return list(self.config.study.P_values)

    @property
    def widths(self) -> list[int]:
        return list(self.config.study.widths)

    @property
    def depths(self) -> list[int]:
        return list(self.config.study.depths)

    @property
    def restarts(self) -> int:
        return self.config.study.restarts


@dataclass
class SweepRow:
    label: str
    value: int
    errors: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.errors))

    @property
    def min(self) -> float:
        return float(np.min(self.errors))

    @property
    def max(self) -> float:
        return float(np.max(self.errors))


@dataclass
class MetricsReport:
    case: str
    map_rel_l2: float  # approximation-error posterior
    map_rel_l2_traditional: float
    mahalanobis_bae: float
    mahalanobis_traditional: float
    restart_J: np.ndarray = field(default_factory=lambda: np.zeros(0))
    restart_curves: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    sweep: list[SweepRow] = field(default_factory=list)

    def __post_init__(self):
        for name in ("map_rel_l2", "map_rel_l2_traditional", "mahalanobis_bae", "mahalanobis_traditional"):
            v = getattr(self, name)
            if not v >= 0:
                raise ValueError(f"{name} must be nonnegative, got {v}")

    def rows(self) -> list[dict]:
        """One row per inversion mode."""
        return [
            {"case": self.case, "mode": "bae", "map_rel_l2": self.map_rel_l2, "mahalanobis": self.mahalanobis_bae},
            {
                "case": self.case,
                "mode": "traditional",
                "map_rel_l2": self.map_rel_l2_traditional,
                "mahalanobis": self.mahalanobis_traditional,
            },
        ]


# ---------------------------------------------------------------------------
# configuration helpers


def grid_of(cfg: RunConfig) -> GridSpec:
    return cfg.grid.build()


def physics_of(cfg: RunConfig) -> PhysicalParams:
    return cfg.physics.build()


def sensors_of(cfg: RunConfig, grid: GridSpec) -> ObservationOperator:
    return make_operator(grid, cfg.sensors.locations, cfg.sensors.method)


def prior_of(cfg: RunConfig) -> GaussianPrior:
    g = cfg.grid
    gamma, delta = cfg.prior.gamma, cfg.prior.delta
    if gamma is None or delta is None:
        if (g.N, g.T) == (120, 60.0):
            cg, cd = DEFAULT_PRIOR_GAMMA, DEFAULT_PRIOR_DELTA
        else:
            cg, cd = calibrate_prior(g.N, g.T)
        gamma = cg if gamma is None else gamma
        delta = cd if delta is None else delta
    mean = prior_mean_curve(g.T / g.N * np.arange(g.N), cfg.prior.mean_start, cfg.prior.mean_end, g.T)
    return build_prior(g.N, g.T, mean, gamma, delta)


def wind_pool(seed: int, scale: float, count: int, grid: GridSpec) -> Iterator[np.ndarray]:
    """Lazily evaluated candidate wind fields ``(N, m)``."""
    for k in range(count):
        yield wind_field(sample_wind_params([seed, k], scale), grid)


def pool_theta(seed: int, scale: float, k: int) -> WindParams:
    return sample_wind_params([seed, k], scale)


# ---------------------------------------------------------------------------
# ensemble


@dataclass
class Ensemble:
    """Training trajectories ``U[s, w]`` plus the held-out test pair."""

    grid: GridSpec
    params: PhysicalParams
    scale: float
    sources: np.ndarray  # (S, N)
    wind_theta: np.ndarray  # (W, 9)
    U: np.ndarray  # (S, W, N+1, m)
    validation_wind: int
    test_source: np.ndarray  # (N,)
    test_theta: np.ndarray  # (9,)
    test_U: np.ndarray  # (N+1, m)
    test_obs: ObservationSet
    op: ObservationOperator
    wind_distances: np.ndarray  # (W,) squared-norm ratio to the mean wind
    test_distances: np.ndarray = field(default_factory=lambda: np.zeros(0))  # l2 ratio to each training wind

    @property
    def train_winds(self) -> list[int]:
        return [j for j in range(self.wind_theta.shape[0]) if j != self.validation_wind]

    def wind(self, j: int) -> np.ndarray:
        return wind_field(self.wind_theta[j], self.grid)

    @property
    def test_wind(self) -> np.ndarray:
        return wind_field(self.test_theta, self.grid)

    @property
    def mean_wind(self) -> np.ndarray:
        return wind_field(mean_wind_params(self.scale), self.grid)


def build_ensemble(plan: ExperimentPlan) -> Ensemble:
    """Simulate every (source, extreme wind) pair and the test observations."""
    cfg = plan.config
    grid, params, scale = grid_of(cfg), physics_of(cfg), cfg.scale
    ens_cfg = cfg.ensemble
    wbar = wind_field(mean_wind_params(scale), grid)

    picked = select_extreme_winds(wind_pool(cfg.seeds.wind_pool, scale, ens_cfg.candidate_pool, grid), wbar, ens_cfg.winds)
    thetas = np.array([pool_theta(cfg.seeds.wind_pool, scale, k).theta for k in picked])
    winds = [wind_field(th, grid) for th in thetas]
    dists = np.array([relative_wind_distance(w, wbar) for w in winds])
    log.info("training wind distances to mean (squared ratio): %s", np.array2string(dists, precision=5))
    log.info("training wind distances to mean (l2 ratio): %s", np.array2string(np.sqrt(dists), precision=5))

    sources = np.array([sample_source_magnitude(a, b, grid) for a, b in ens_cfg.sources])
    U = np.empty((len(sources), len(winds), grid.N + 1, grid.m))
    for s, z in enumerate(sources):
        for j, w in enumerate(winds):
            U[s, j] = solve_pde(z, None, grid, params, wind=w)

    k_test = select_test_wind(wind_pool(cfg.seeds.test_pool, scale, ens_cfg.test_pool, grid), winds)
    test_theta = pool_theta(cfg.seeds.test_pool, scale, k_test).theta
    test_wind = wind_field(test_theta, grid)
    test_dist = np.array([np.linalg.norm(test_wind - w) / np.linalg.norm(w) for w in winds])
    log.info("test wind l2 ratio to mean %.4f, to training winds %s",
             math.sqrt(relative_wind_distance(test_wind, wbar)), np.array2string(test_dist, precision=4))
    z_test = sample_source_magnitude(*ens_cfg.test_source, grid)
    test_U = solve_pde(z_test, None, grid, params, wind=test_wind)
    op = sensors_of(cfg, grid)
    obs = make_test_observations(test_U, op, ens_cfg.observation_noise, cfg.seeds.noise)
    return Ensemble(grid, params, scale, sources, thetas, U, ens_cfg.validation_wind, z_test, test_theta, test_U,
                    obs, op, dists, test_dist)


# ---------------------------------------------------------------------------
# reduction and datasets


@dataclass
class Reduction:
    state: PcaBasis
    wind: PcaBasis
    errors: dict


def reduce_ensemble(ens: Ensemble, cfg: RunConfig) -> Reduction:
    """Fit state and wind bases on the training split; report validation errors."""
    tw, vw = ens.train_winds, ens.validation_wind
    Y = ens.U[:, tw].reshape(-1, ens.grid.m).T
    Yw = np.concatenate([ens.wind(j) for j in tw]).T
    pc = cfg.pca
    state = fit_pca(Y, pc.state_rank) if pc.state_rank else select_rank(Y, pc.state_target, max_rank=min(400, *Y.shape))
    wind = fit_pca(Yw, pc.wind_rank) if pc.wind_rank else select_rank(Yw, pc.wind_target, max_rank=min(100, *Yw.shape))
    errors = {
        "state_rank": state.rank,
        "wind_rank": wind.rank,
        "state_train": reconstruction_error(Y.T, state),
        "wind_train": reconstruction_error(Yw.T, wind),
        "state_validation": reconstruction_error(ens.U[:, vw].reshape(-1, ens.grid.m), state),
        "wind_validation": reconstruction_error(ens.wind(vw), wind),
    }
    log.info("PCA: %s", errors)
    return Reduction(state, wind, errors)


def reduced_winds(ens: Ensemble, red: Reduction) -> np.ndarray:
    return np.array([project(ens.wind(j), red.wind) for j in range(ens.wind_theta.shape[0])])


def datasets(ens: Ensemble, red: Reduction, winds: list[int]) -> ReducedDataset:
    Wr = reduced_winds(ens, red)
    pairs = [(s, j) for s in range(len(ens.sources)) for j in winds]
    C = np.array([project(ens.U[s, j], red.state) for s, j in pairs])
    Z = np.array([ens.sources[s] for s, _ in pairs])
    W = np.array([Wr[j] for _, j in pairs])
    return ReducedDataset(C, Z, W)


def validation_set(ens: Ensemble, red: Reduction) -> ValidationSet:
    vw = ens.validation_wind
    Wr = reduced_winds(ens, red)
    S = len(ens.sources)
    return ValidationSet(ens.U[:, vw].copy(), ens.sources.copy(), np.repeat(Wr[vw][None], S, axis=0), red.state)


def train_final(ens: Ensemble, red: Reduction, cfg: RunConfig, seed: int | None = None) -> TrainResult:
    """Surrogate for inversion, trained on every ensemble trajectory."""
    data = datasets(ens, red, list(range(ens.wind_theta.shape[0])))
    tc = cfg.train.build(cfg.seeds.train if seed is None else seed)
    return train(data, tc, None, dt=ens.grid.dt)


# ---------------------------------------------------------------------------
# sweeps


def _train_job(args):
    data, val, tc, dt = args
    res = train(data, tc, val, dt=dt)
    return validation_error(val, res.params)


def _run_jobs(fn: Callable, jobs: list, workers: int) -> list:
    """Run independent jobs, returning results in submission order."""
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def _sweep(plan, ens, red, label, values, make_cfg) -> list[SweepRow]:
    data = datasets(ens, red, ens.train_winds)
    val = validation_set(ens, red)
    jobs = [(data, val, make_cfg(v, s), ens.grid.dt) for v in values for s in plan.seeds]
    errs = _run_jobs(_train_job, jobs, plan.workers)
    k = len(plan.seeds)
    rows = [SweepRow(label, int(v), [float(e) for e in errs[i * k : (i + 1) * k]]) for i, v in enumerate(values)]
    for row in rows:
        log.info("%s=%d: mean %.4e min %.4e max %.4e", label, row.value, row.mean, row.min, row.max)
    return rows


def sweep_P(plan: ExperimentPlan, ens: Ensemble, red: Reduction) -> list[SweepRow]:
    """Validation error statistics over seeds for each composition horizon."""
    tr = plan.config.train
    return _sweep(plan, ens, red, "P", plan.P_values, lambda P, s: tr.build(s, P=P))


def sweep_width(plan: ExperimentPlan, ens: Ensemble, red: Reduction) -> list[SweepRow]:
    tr = plan.config.train
    return _sweep(plan, ens, red, "width", plan.widths, lambda w, s: tr.build(s, width=w))


def sweep_depth(plan: ExperimentPlan, ens: Ensemble, red: Reduction) -> list[SweepRow]:
    tr = plan.config.train
    return _sweep(plan, ens, red, "depth", plan.depths, lambda d, s: tr.build(s, depth=d))


# ---------------------------------------------------------------------------
# inversion


@dataclass
class InversionContext:
    forward: SurrogateForward
    prior: GaussianPrior
    data: np.ndarray  # stacked observations
    truth: np.ndarray  # (N,) true source
    sigma: float
    bae: BaeStats

    def problem(self, mode: str) -> InverseProblem:
        if mode == "bae":
            return InverseProblem(self.forward, self.data, self.prior, self.bae)
        if mode == "traditional":
            return InverseProblem(self.forward, self.data, self.prior, NoiseModel(self.sigma))
        raise ValueError(f"unknown mode {mode!r}")


def surrogate_at_mean(ens: Ensemble, red: Reduction, params: FlowNetParams) -> SurrogateForward:
    wbar = project(ens.mean_wind, red.wind)
    return SurrogateForward(params, red.state, ens.op, wbar)


def bae_statistics(ens: Ensemble, red: Reduction, params: FlowNetParams, cfg: RunConfig, prior=None) -> BaeStats:
    """Approximation-error statistics from fresh wind draws at the case's variability."""
    prior = prior_of(cfg) if prior is None else prior
    fwd = surrogate_at_mean(ens, red, params)

    def sampler(k):
        th = sample_wind_params([cfg.seeds.bae, 1, k], ens.scale)
        return project(wind_field(th, ens.grid), red.wind)

    return estimate_bae(prior, sampler, fwd, fwd.wind, cfg.inversion.bae_samples, cfg.seeds.bae, cfg.sigma)


def inversion_context(ens: Ensemble, red: Reduction, params: FlowNetParams, cfg: RunConfig, bae=None) -> InversionContext:
    prior = prior_of(cfg)
    bae = bae_statistics(ens, red, params, cfg, prior) if bae is None else bae
    fwd = surrogate_at_mean(ens, red, params)
    return InversionContext(fwd, prior, ens.test_obs.stacked, ens.test_source.copy(), cfg.sigma, bae)


@dataclass
class InversionResult:
    mode: str
    map: MapResult
    laplace: LaplacePosterior
    samples: np.ndarray
    map_rel_l2: float
    mahalanobis: float


def invert(ctx: InversionContext, cfg: RunConfig, mode: str) -> InversionResult:
    inv = cfg.inversion
    problem = ctx.problem(mode)
    res = compute_map(problem, tol=inv.tol, max_iters=inv.max_iters)
    log.info("%s MAP: J=%.6e |g|/|g0|=%.2e iters=%d", mode, res.objective, res.grad_norm / max(res.grad_norm0, 1e-300),
             res.iterations)
    lp = laplace_eig(res.z, problem, inv.eig_max, inv.eig_tol, seed=cfg.seeds.lanczos)
    samples = posterior_sample(lp, ctx.prior, [cfg.seeds.posterior, 0 if mode == "bae" else 1], inv.posterior_samples)
    rel = float(np.linalg.norm(res.z - ctx.truth) / np.linalg.norm(ctx.truth))
    dist = mahalanobis(ctx.truth, lp, ctx.prior)
    log.info("%s: map_rel_l2=%.4f mahalanobis=%.3f k=%d", mode, rel, dist, lp.k)
    return InversionResult(mode, res, lp, samples, rel, dist)


def run_inversion_study(plan: ExperimentPlan, ctx: InversionContext) -> tuple[MetricsReport, dict[str, InversionResult]]:
    """Approximation-error and traditional inversions for the plan's case."""
    results = {mode: invert(ctx, plan.config, mode) for mode in ("bae", "traditional")}
    report = MetricsReport(
        plan.case,
        results["bae"].map_rel_l2,
        results["traditional"].map_rel_l2,
        results["bae"].mahalanobis,
        results["traditional"].mahalanobis,
    )
    return report, results


# ---------------------------------------------------------------------------
# multi-start


@dataclass
class RestartResult:
    Z: np.ndarray  # (count, N) MAP points
    J: np.ndarray  # (count,)
    labels: np.ndarray  # cluster id per restart
    converged: np.ndarray

    @property
    def clusters(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    @property
    def within(self) -> float:
        """Largest relative objective excess over the best restart."""
        best = float(self.J.min())
        return float(np.max((self.J - best) / abs(best)))


def cluster_curves(Z, J, tol: float = 0.01) -> np.ndarray:
    """Greedy clustering in order of increasing ``J``: a curve joins the first
    representative within relative l2 distance ``tol``."""
    Z = np.asarray(Z, float)
    order = np.argsort(J, kind="stable")
    reps: list[int] = []
    labels = np.full(len(Z), -1)
    for i in order:
        for c, rep in enumerate(reps):
            if np.linalg.norm(Z[i] - Z[rep]) <= tol * np.linalg.norm(Z[rep]):
                labels[i] = c
                break
        else:
            labels[i] = len(reps)
            reps.append(i)
    return labels


def multi_start_map(plan: ExperimentPlan, ctx: InversionContext, count: int | None = None, mode: str = "bae") -> RestartResult:
    """MAP estimates from ``mean + scale * (prior draw - mean)`` starting points."""
    cfg = plan.config
    count = plan.restarts if count is None else count
    draws = ctx.prior.sample([cfg.seeds.restarts, 0], count=count)
    starts = ctx.prior.mean + cfg.study.restart_scale * (draws - ctx.prior.mean)
    Z, J, conv = [], [], []
    for z0 in starts:
        res = compute_map(ctx.problem(mode), z0, tol=cfg.inversion.tol, max_iters=cfg.inversion.max_iters)
        Z.append(res.z)
        J.append(res.objective)
        conv.append(res.converged)
    Z, J = np.array(Z), np.array(J)
    labels = cluster_curves(Z, J, cfg.study.cluster_tol)
    out = RestartResult(Z, J, labels, np.array(conv))
    log.info("%s restarts: %d clusters, max J excess %.3e", plan.case, out.clusters, out.within)
    return out
