"""Command-line pipeline.

Every subcommand runs one stage against a run directory, reading the
containers earlier stages wrote and recording a manifest of its inputs,
outputs, seeds and resolved configuration under ``manifests/``.

Exit status: 0 success, 1 other failure (missing or corrupt inputs),
2 configuration or usage error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bayes import BaeStats, LaplacePosterior, mahalanobis, posterior_sample
from .config import RunConfig, dump_config, load_config, parse_config
from .dispersion import GridSpec
from .errors import ConfigError, NumericalError, PlumeInvError
from .experiments import (
    Ensemble,
    ExperimentPlan,
    InversionContext,
    Reduction,
    build_ensemble,
    inversion_context,
    multi_start_map,
    reduce_ensemble,
    run_inversion_study,
    surrogate_at_mean,
    sweep_depth,
    sweep_P,
    sweep_width,
    train_final,
    bae_statistics,
    prior_of,
    sensors_of,
)
from .flownet import FlowNetParams, init_params
from .io import StageWriter, read_json
from .observe import ObservationSet
from .plotting import emit_bars, emit_plot
from .reduction import PcaBasis

log = logging.getLogger("plumeinv")

ENV_OUT = "PLUMEINV_OUT"
STAGES = ("generate", "reduce", "train", "bae", "invert", "sample", "study", "report")
MODES = ("bae", "traditional")
STAGE_HELP = {
    "generate": "simulate the training ensemble and the test observations",
    "reduce": "fit state and wind PCA bases",
    "train": "train the flow-map surrogate on the full ensemble",
    "bae": "estimate approximation-error statistics",
    "invert": "MAP estimate and Laplace posterior in both noise models",
    "sample": "draw posterior samples",
    "study": "composition-horizon and architecture sweeps plus multi-start MAP",
    "report": "metrics table and figures for one or more run directories",
}


# ---------------------------------------------------------------------------
# container <-> object helpers


def _traj(s: int, j: int) -> str:
    return f"ensemble/traj_s{s}_w{j}.arr"


def load_ensemble(w: StageWriter, cfg: RunConfig, trajectories: bool = True) -> Ensemble:
    grid = cfg.grid.build()
    sources = w.read("ensemble/sources.arr")
    thetas = w.read("ensemble/wind_theta.arr")
    meta = w.read_json("ensemble/meta.json")
    S, W = sources.shape[0], thetas.shape[0]
    if trajectories:
        U = np.empty((S, W, grid.N + 1, grid.m))
        for s in range(S):
            for j in range(W):
                U[s, j] = w.read(_traj(s, j))
    else:
        U = np.zeros((S, W, 0, grid.m))
    op = sensors_of(cfg, grid)
    return Ensemble(
        grid,
        cfg.physics.build(),
        cfg.scale,
        sources,
        thetas,
        U,
        int(meta["validation_wind"]),
        w.read("ensemble/test_source.arr"),
        w.read("ensemble/test_theta.arr"),
        np.zeros((0, grid.m)),
        ObservationSet(w.read("ensemble/test_obs.arr")),
        op,
        w.read("ensemble/wind_distances.arr"),
    )


def _save_basis(w: StageWriter, name: str, b: PcaBasis):
    w.array(f"reduce/{name}_mean.arr", b.mean)
    w.array(f"reduce/{name}_basis.arr", b.basis)
    w.array(f"reduce/{name}_sv.arr", b.singular_values)


def _load_basis(w: StageWriter, name: str) -> PcaBasis:
    return PcaBasis(
        w.read(f"reduce/{name}_mean.arr"), w.read(f"reduce/{name}_basis.arr"), w.read(f"reduce/{name}_sv.arr")
    )


def load_reduction(w: StageWriter) -> Reduction:
    return Reduction(_load_basis(w, "state"), _load_basis(w, "wind"), w.read_json("reduce/errors.json"))


def save_params(w: StageWriter, p: FlowNetParams):
    w.array("train/params.arr", p.flat())
    w.array("train/in_shift.arr", p.in_shift)
    w.array("train/in_scale.arr", p.in_scale)
    w.array("train/out_scale.arr", p.out_scale)
    w.json("train/arch.json", {"r": p.r, "r_w": p.r_w, "width": p.width, "depth": p.depth, "dt": p.dt,
                               "activation": p.activation})


def load_params(w: StageWriter) -> FlowNetParams:
    arch = w.read_json("train/arch.json")
    scaling = (w.read("train/in_shift.arr"), w.read("train/in_scale.arr"), w.read("train/out_scale.arr"))
    tmpl = init_params(arch["r"], arch["r_w"], width=arch["width"], depth=arch["depth"], dt=arch["dt"],
                       scaling=scaling, activation=arch["activation"])
    return tmpl.with_flat(w.read("train/params.arr"))


def load_bae(w: StageWriter, cfg: RunConfig) -> BaeStats:
    return BaeStats(w.read("bae/mean_error.arr"), w.read("bae/cov_error.arr"), cfg.sigma, cfg.inversion.bae_samples)


def load_context(w: StageWriter, cfg: RunConfig) -> tuple[Ensemble, Reduction, InversionContext]:
    ens = load_ensemble(w, cfg, trajectories=False)
    red = load_reduction(w)
    params = load_params(w)
    ctx = inversion_context(ens, red, params, cfg, bae=load_bae(w, cfg))
    return ens, red, ctx


# ---------------------------------------------------------------------------
# stages


def stage_generate(cfg: RunConfig, w: StageWriter, args):
    ens = build_ensemble(ExperimentPlan(cfg))
    w.array("ensemble/sources.arr", ens.sources)
    w.array("ensemble/wind_theta.arr", ens.wind_theta)
    w.array("ensemble/wind_distances.arr", ens.wind_distances)
    for s in range(ens.sources.shape[0]):
        for j in range(ens.wind_theta.shape[0]):
            w.array(_traj(s, j), ens.U[s, j])
    w.array("ensemble/test_source.arr", ens.test_source)
    w.array("ensemble/test_theta.arr", ens.test_theta)
    w.array("ensemble/test_truth.arr", ens.test_U)
    w.array("ensemble/test_obs.arr", ens.test_obs.values)
    w.array("ensemble/test_distances.arr", ens.test_distances)
    w.array("ensemble/sensors.arr", ens.op.locations)
    w.json("ensemble/meta.json", {"validation_wind": ens.validation_wind, "trajectories": int(ens.U.shape[0] * ens.U.shape[1])})


def stage_reduce(cfg: RunConfig, w: StageWriter, args):
    ens = load_ensemble(w, cfg)
    red = reduce_ensemble(ens, cfg)
    _save_basis(w, "state", red.state)
    _save_basis(w, "wind", red.wind)
    w.json("reduce/errors.json", red.errors)
    w.info["pca"] = red.errors


def stage_train(cfg: RunConfig, w: StageWriter, args):
    ens = load_ensemble(w, cfg)
    red = load_reduction(w)
    res = train_final(ens, red, cfg)
    save_params(w, res.params)
    w.array("train/history.arr", res.history)
    w.info["final_loss"] = float(res.history[-1, 1]) if len(res.history) else None


def stage_bae(cfg: RunConfig, w: StageWriter, args):
    ens = load_ensemble(w, cfg, trajectories=False)
    red = load_reduction(w)
    stats = bae_statistics(ens, red, load_params(w), cfg)
    w.array("bae/mean_error.arr", stats.mean_error)
    w.array("bae/cov_error.arr", stats.cov_error)
    w.info["mean_gamma_e_diagonal"] = float(np.mean(np.diag(stats.cov_error)))


def stage_invert(cfg: RunConfig, w: StageWriter, args):
    _, _, ctx = load_context(w, cfg)
    report, results = run_inversion_study(ExperimentPlan(cfg), ctx)
    for mode, r in results.items():
        w.array(f"invert/{mode}_map.arr", r.map.z)
        w.array(f"invert/{mode}_eigenvalues.arr", r.laplace.eigenvalues)
        w.array(f"invert/{mode}_eigenvectors.arr", r.laplace.V)
        w.array(f"invert/{mode}_objective.arr", np.array(r.map.history))
    w.json("invert/metrics.json", {"case": cfg.case, "config_hash": cfg.digest(), "rows": report.rows(),
                                   "converged": {m: bool(r.map.converged) for m, r in results.items()}})


def _laplace(w: StageWriter, mode: str) -> LaplacePosterior:
    return LaplacePosterior(
        w.read(f"invert/{mode}_map.arr"), w.read(f"invert/{mode}_eigenvectors.arr"), w.read(f"invert/{mode}_eigenvalues.arr")
    )


def stage_sample(cfg: RunConfig, w: StageWriter, args):
    prior = prior_of(cfg)
    for k, mode in enumerate(MODES):
        lp = _laplace(w, mode)
        Z = posterior_sample(lp, prior, [cfg.seeds.posterior, k], cfg.inversion.posterior_samples)
        w.array(f"sample/{mode}_samples.arr", Z)


def stage_study(cfg: RunConfig, w: StageWriter, args):
    root = w.root
    for stage in STAGES[:6]:
        if not (root / "manifests" / f"{stage}.json").exists():
            log.info("study: running missing stage %s", stage)
            run_stage(stage, cfg, root, args)
    plan = ExperimentPlan(cfg, root, workers=getattr(args, "workers", 1) or 1)
    ens, red, ctx = load_context(w, cfg)
    rows = []
    if plan.P_values or plan.widths or plan.depths:
        full = load_ensemble(w, cfg)
        if plan.P_values:
            rows += sweep_P(plan, full, red)
        if plan.widths:
            rows += sweep_width(plan, full, red)
        if plan.depths:
            rows += sweep_depth(plan, full, red)
    table = np.array([[r.value, r.mean, r.min, r.max] for r in rows]).reshape(-1, 4)
    w.array("study/sweep.arr", table)
    w.json("study/sweep.json", [{"label": r.label, "value": r.value, "errors": r.errors} for r in rows])
    rs = multi_start_map(plan, ctx)
    w.array("study/restart_Z.arr", rs.Z)
    w.array("study/restart_J.arr", rs.J)
    w.array("study/restart_labels.arr", rs.labels.astype(float))
    w.json("study/summary.json", {"case": cfg.case, "config_hash": cfg.digest(), "clusters": rs.clusters,
                                  "max_relative_J_excess": rs.within, "all_converged": bool(rs.converged.all())})


def stage_report(cfg: RunConfig, w: StageWriter, args):
    runs = [Path(r) for r in (args.runs or [w.input_root])]
    rows = []
    t = cfg.grid.build().step_times
    for run in runs:
        sub = StageWriter(run, "report", cfg.digest())
        metrics = sub.read_json("invert/metrics.json")
        case, chash = metrics["case"], metrics["config_hash"]
        for row in metrics["rows"]:
            rows.append({**row, "config_hash": chash})
        truth = sub.read("ensemble/test_source.arr")
        for mode in MODES:
            if (run / f"sample/{mode}_samples.arr").exists():
                Z = sub.read(f"sample/{mode}_samples.arr")
                series = {f"sample{k}": z for k, z in enumerate(Z)}
                series["map"] = sub.read(f"invert/{mode}_map.arr")
                _plot(w, f"report/posterior_{case}_{mode}.svg", series, x=t, truth=truth,
                      title=f"{case} wind variability, {mode} posterior", xlabel="t (min)",
                      ylabel="source magnitude", note=f"config_hash={chash}")
        if (run / "study/sweep.json").exists():
            sweep = sub.read_json("study/sweep.json")
            P_rows = [r for r in sweep if r["label"] == "P"]
            if P_rows:
                errs = [np.array(r["errors"]) for r in P_rows]
                _bars(w, f"report/sweep_P_{case}.svg", [str(r["value"]) for r in P_rows], [e.mean() for e in errs],
                      low=[e.min() for e in errs], high=[e.max() for e in errs], title=f"{case}: validation error vs P",
                      ylabel="validation error", log=True, note=f"config_hash={chash}")
        if (run / "study/restart_Z.arr").exists():
            Z = sub.read("study/restart_Z.arr")
            _plot(w, f"report/restarts_{case}.svg", {f"restart{k}": z for k, z in enumerate(Z)}, x=t, truth=truth,
                  title=f"{case}: multi-start MAP points", xlabel="t (min)", ylabel="source magnitude",
                  note=f"config_hash={chash}")
        for rel, h in sub.inputs.items():
            w.inputs[os.path.relpath(run / rel, w.root)] = h
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["case", "mode", "map_rel_l2", "mahalanobis", "config_hash"])
    for r in rows:
        wr.writerow([r["case"], r["mode"], repr(float(r["map_rel_l2"])), repr(float(r["mahalanobis"])), r["config_hash"]])
    w.text("report/metrics.csv", buf.getvalue())
    w.info["runs"] = [str(r.resolve()) for r in runs]


def _plot(w: StageWriter, rel, series, **kw):
    svg, csvp = emit_plot(series, w.path(rel), **kw)
    w.record(rel)
    w.record(str(Path(rel).with_suffix(".csv")))


def _bars(w: StageWriter, rel, labels, values, **kw):
    emit_bars(labels, values, w.path(rel), **kw)
    w.record(rel)
    w.record(str(Path(rel).with_suffix(".csv")))


STAGE_FUNCS = {
    "generate": stage_generate,
    "reduce": stage_reduce,
    "train": stage_train,
    "bae": stage_bae,
    "invert": stage_invert,
    "sample": stage_sample,
    "study": stage_study,
    "report": stage_report,
}


def _seeds(cfg: RunConfig, stage: str) -> dict:
    s = cfg.seeds
    table = {
        "generate": {"wind_pool": s.wind_pool, "test_pool": s.test_pool, "noise": s.noise},
        "train": {"train": s.train},
        "bae": {"bae": s.bae},
        "invert": {"lanczos": s.lanczos, "posterior": s.posterior},
        "sample": {"posterior": s.posterior},
        "study": {"sweep": list(cfg.study.sweep_seeds), "restarts": s.restarts},
    }
    return table.get(stage, {})


def run_stage(stage: str, cfg: RunConfig, root, args=None, input_root=None) -> Path:
    """Run one stage and write its manifest; returns the manifest path."""
    root = Path(root)
    w = StageWriter(root, stage, cfg.digest(), _seeds(cfg, stage), input_root=input_root)
    root.mkdir(parents=True, exist_ok=True)
    config_text = dump_config(cfg)
    if input_root is None:
        w.text("config.yaml", config_text)
    STAGE_FUNCS[stage](cfg, w, args or argparse.Namespace(runs=None, workers=1))
    return w.finish(config=cfg.model_dump(mode="json"), argv={"runs": getattr(args, "runs", None)})


def replay(manifest_path, out) -> dict[str, tuple[str, str]]:
    """Rerun a stage from its manifest into ``out``; returns mismatching outputs."""
    man = read_json(manifest_path)
    cfg = parse_config(man["config"])
    args = argparse.Namespace(runs=man.get("argv", {}).get("runs"), workers=1)
    if man["stage"] == "study":
        raise ConfigError("replay the study's component stages individually")
    path = run_stage(man["stage"], cfg, out, args, input_root=man["input_root"])
    new = read_json(path)
    diffs = {}
    for rel, h in man["outputs"].items():
        if rel.endswith(".arr") and new["outputs"].get(rel) != h:
            diffs[rel] = (h, new["outputs"].get(rel))
    return diffs


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plumeinv", description="Plume source inversion pipeline.")
    parser.add_argument("--version", action="version", version=f"plumeinv {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration (defaults when omitted)")
    common.add_argument("--seed", type=int, default=0, help="offset added to every stage seed")
    common.add_argument("--out", help=f"run directory (default ${ENV_OUT} or ./plumeinv-out)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        p = sub.add_parser(name, parents=[common], help=STAGE_HELP[name], description=STAGE_HELP[name])
        if name == "study":
            p.add_argument("--workers", type=int, default=1, help="parallel training jobs")
        if name == "report":
            p.add_argument("runs", nargs="*", help="run directories to summarise (default: --out)")
    p = sub.add_parser("replay", help="rerun a stage from its manifest and compare outputs")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "replay":
            diffs = replay(args.manifest, args.out)
            for rel, (a, b) in diffs.items():
                print(f"MISMATCH {rel}: {a} != {b}")
            print("identical" if not diffs else f"{len(diffs)} outputs differ")
            return 0 if not diffs else 1
        cfg = load_config(args.config).with_seed(args.seed)
        out = Path(args.out or os.environ.get(ENV_OUT) or "plumeinv-out")
        manifest = run_stage(args.command, cfg, out, args)
        print(manifest)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    except (PlumeInvError, FileNotFoundError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
