"""Command-line entry point.

Subcommands: identify | synth | bench | pendulum | theory.  Every command
reads an INI config (see :mod:`drlqr.config`), honors ``--seed`` and
``--out`` overrides, writes only inside the output directory, and echoes the
resolved configuration to ``effective.cfg`` there.  Exit codes: 0 success,
2 configuration error, 3 rank-deficient identification, 4 no stabilizing
solution.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np

from drlqr.bench import (
    SweepConfig,
    emit_plot,
    export_summary,
    export_trials,
    load_trials,
    run_sweep,
    summarize,
)
from drlqr.config import ConfigError, RunConfig, load_config, write_effective
from drlqr.lqr import (
    CostModel,
    NotStabilizableError,
    flatten_params,
    spectral_radius,
)
from drlqr.pendulum import PendulumParams, collect_pendulum_data, identify_pendulum, run_episode
from drlqr.rng import stream
from drlqr.synthesis import (
    NoStabilizingCandidateError,
    save_report_csv,
    synth_ce,
    synth_dr,
    synth_rc,
)
from drlqr.sysid import (
    RankDeficientError,
    collect_dataset,
    confidence_ellipsoid,
    fisher_estimate,
    least_squares,
    load_dataset_bin,
    load_dataset_csv,
)
from drlqr.theory import (
    inequality_suite,
    leading_terms,
    model_task_hessian,
    population_fisher,
    save_suite_csv,
)

EXIT_CONFIG = 2
EXIT_RANK = 3
EXIT_NO_STABILIZER = 4


def _write_matrix_csv(m: np.ndarray, path: Path) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        for row in np.atleast_2d(m):
            writer.writerow([repr(float(v)) for v in row])


def _prepare(args) -> tuple[RunConfig, Path]:
    overrides: dict[str, dict[str, object]] = {}
    if args.seed is not None:
        overrides.setdefault("run", {})["seed"] = args.seed
    if args.out is not None:
        overrides.setdefault("run", {})["out"] = args.out
    if args.threads is not None:
        overrides.setdefault("run", {})["threads"] = args.threads
    if getattr(args, "seeds", None) is not None:
        overrides.setdefault("bench", {})["seeds"] = args.seeds
        overrides.setdefault("pendulum", {})["seeds"] = args.seeds
    cfg = load_config(args.config, overrides)
    out = Path(cfg["run"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_effective(cfg, out / "effective.cfg")
    return cfg, out


def _identify_pipeline(cfg: RunConfig, out: Path):
    theta_star = cfg.system()
    cm = cfg.cost_model()
    seed = int(cfg["run"]["seed"])
    dataset_path = str(cfg["data"]["dataset"])
    if dataset_path:
        loader = load_dataset_bin if dataset_path.endswith(".bin") else load_dataset_csv
        ds = loader(dataset_path)
    else:
        ds = collect_dataset(
            theta_star, cm, int(cfg["data"]["n_traj"]), int(cfg["data"]["horizon"]),
            cfg.sigma_u(), stream(seed, 0),
        )
    theta_hat = least_squares(ds)
    fi = fisher_estimate(ds, cm)
    ellipsoid = confidence_ellipsoid(theta_hat, fi, ds.n, float(cfg["ellipsoid"]["delta"]))
    return theta_star, cm, ds, theta_hat, fi, ellipsoid


def cmd_identify(args) -> int:
    cfg, out = _prepare(args)
    theta_star, cm, ds, theta_hat, fi, ellipsoid = _identify_pipeline(cfg, out)
    _write_matrix_csv(theta_hat.a, out / "a_hat.csv")
    _write_matrix_csv(theta_hat.b, out / "b_hat.csv")
    _write_matrix_csv(fi.matrix, out / "fisher.csv")
    with (out / "ellipsoid.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rho2", repr(ellipsoid.rho2)])
        writer.writerow(["center"] + [repr(float(v)) for v in ellipsoid.center])
        for row in ellipsoid.shape:
            writer.writerow(["shape"] + [repr(float(v)) for v in row])
    err = float(np.linalg.norm(flatten_params(theta_hat) - flatten_params(theta_star)))
    print(f"identified from {ds.n} trajectories of length {ds.horizon}")
    print(f"parameter error |theta_hat - theta_star| = {err:.3e}")
    print(f"ellipsoid radius^2 = {ellipsoid.rho2:.6g}")
    return 0


def cmd_synth(args) -> int:
    cfg, out = _prepare(args)
    theta_star, cm, ds, theta_hat, fi, ellipsoid = _identify_pipeline(cfg, out)
    seed = int(cfg["run"]["seed"])
    method = args.method
    if method == "ce":
        gain = synth_ce(theta_hat, cm)
        report = None
    elif method == "dr":
        opts = cfg.dr_options()
        print(f"dr options: scenarios={opts.n_scenarios} max_iters={opts.max_iters} "
              f"step_size={opts.step_size} grad_tol={opts.grad_tol}")
        report = synth_dr(ellipsoid, cm, opts, stream(seed, 1))
        gain = report.gain
    else:
        opts = cfg.rc_options()
        print(f"rc options: scenarios={opts.n_scenarios} max_iters={opts.max_iters} "
              f"step_size={opts.step_size} restarts={opts.restarts}")
        report = synth_rc(ellipsoid, cm, opts, stream(seed, 1))
        gain = report.gain
    _write_matrix_csv(gain.k, out / "gain.csv")
    if report is not None:
        save_report_csv(report, out / "report.csv")
    rho = spectral_radius(theta_star.a + theta_star.b @ gain.k)
    print(f"{method} gain written; closed-loop spectral radius on the true system: {rho:.6g}")
    return 0


def cmd_bench(args) -> int:
    cfg, out = _prepare(args)
    sweep = SweepConfig(
        theta_star=cfg.system(),
        cm=cfg.cost_model(),
        n_grid=tuple(cfg["bench"]["n_grid"]),
        horizon=int(cfg["data"]["horizon"]),
        sigma_u=cfg.sigma_u(),
        delta=float(cfg["ellipsoid"]["delta"]),
        methods=cfg.bench_methods(),
        seeds=int(cfg["bench"]["seeds"]),
        dr_opts=cfg.dr_options(),
        rc_opts=cfg.rc_options(),
        master_seed=int(cfg["run"]["seed"]),
    )
    trials_path = out / "trials.csv"
    existing = []
    if args.resume and trials_path.exists():
        existing = load_trials(trials_path)
        print(f"resuming: {len(existing)} trials already present")
    skip = {(r.seed, r.n, r.method) for r in existing}
    threads = int(cfg["run"]["threads"]) or os.cpu_count() or 1
    fresh = run_sweep(sweep, n_jobs=threads, skip=skip, progress=True)
    table = sorted(existing + fresh, key=lambda r: (r.n, r.method, r.seed))
    export_trials(table, trials_path)
    rows = summarize(table)
    export_summary(rows, out / "summary.csv")
    emit_plot(rows, out / "plot.svg")
    print(f"{len(table)} trials -> {trials_path}")
    return 0


def cmd_pendulum(args) -> int:
    cfg, out = _prepare(args)
    sec = cfg["pendulum"]
    opts = cfg.cem_options()
    seed = int(cfg["run"]["seed"])
    budgets = [int(b) for b in sec["budgets"]]
    n_seeds = int(sec["seeds"])
    episode_len = int(sec["episode_len"])
    dt = float(sec["dt"])
    truth = PendulumParams(1.0, 1.0, 9.81)
    rows = []
    for budget in budgets:
        for trial in range(n_seeds):
            ds = collect_pendulum_data(
                truth, budget, int(sec["traj_horizon"]), stream(seed, budget, trial, 0), dt=dt
            )
            fit = identify_pendulum(ds, dt=dt)
            radius = float(sec["radius_scale"]) / budget
            for method in ("ce", "dr"):
                total = run_episode(
                    method, truth, fit.params, radius, episode_len, opts,
                    stream(seed, budget, trial, 1), dt=dt,
                )
                rows.append((budget, trial, method, total))
        print(f"budget {budget}: done ({n_seeds} seeds x 2 methods)", flush=True)
    with (out / "episodes.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["budget", "seed", "method", "total_cost"])
        for budget, trial, method, total in rows:
            writer.writerow([budget, trial, method, repr(float(total))])
    with (out / "summary.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["budget", "method", "mean_cost", "stderr"])
        for budget in budgets:
            for method in ("ce", "dr"):
                vals = np.array([r[3] for r in rows if r[0] == budget and r[2] == method])
                writer.writerow([
                    budget, method, repr(float(vals.mean())),
                    repr(float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0),
                ])
    print(f"{len(rows)} episodes -> {out / 'episodes.csv'}")
    return 0


def cmd_theory(args) -> int:
    cfg, out = _prepare(args)
    theta_star = cfg.system()
    cm = cfg.cost_model()
    seed = int(cfg["run"]["seed"])
    h_an = model_task_hessian(theta_star, cm, method="analytic")
    h_fd = model_task_hessian(theta_star, cm, method="finite-difference")
    deviation = float(np.linalg.norm(h_an.h - h_fd.h) / max(np.linalg.norm(h_fd.h), 1e-300))
    _write_matrix_csv(h_an.h, out / "hessian.csv")
    fi = population_fisher(
        theta_star, cm, int(cfg["data"]["horizon"]), cfg.sigma_u(),
        int(cfg["theory"]["mc_trajectories"]), stream(seed, 2),
    )
    lt = leading_terms(h_an, fi, n=1)
    with (out / "leading_terms.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["term", "value"])
        writer.writerow(["trace_weighted", repr(lt.ce_dr_term)])
        writer.writerow(["opnorm_weighted", repr(lt.rc_term)])
    # The inequality suite needs Q >= I; rescale the state weight if needed.
    q = cm.q
    lam_min = float(np.linalg.eigvalsh(q)[0])
    suite_cm = cm if lam_min >= 1.0 else CostModel(q / lam_min, cm.r, cm.sigma_w)
    report = inequality_suite(theta_star, suite_cm, rng=stream(seed, 3))
    save_suite_csv(report, out / "suite.csv")
    print(f"analytic-vs-finite-difference curvature deviation: {deviation:.3e}")
    print(f"trace-weighted term {lt.ce_dr_term:.6g} <= dim * opnorm term {lt.rc_term:.6g}: "
          f"{lt.ce_dr_term <= lt.rc_term * (1 + 1e-10)}")
    print(f"inequality suite: {sum(c.passed for c in report.checks)}/{len(report.checks)} passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="drlqr",
        description="Data-driven LQR synthesis benchmark (identification, synthesis, "
                    "sweeps, pendulum control, sensitivity reports).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="INI config file")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--out", default=None, help="output directory override")
        p.add_argument("--threads", type=int, default=None, help="worker cap (0 = auto)")

    p_id = sub.add_parser("identify", help="simulate/load data, fit [A B], build the ellipsoid")
    common(p_id)
    p_id.set_defaults(func=cmd_identify)

    p_sy = sub.add_parser("synth", help="synthesize a gain from identified data")
    common(p_sy)
    p_sy.add_argument("--method", choices=("ce", "dr", "rc"), required=True)
    p_sy.set_defaults(func=cmd_synth)

    p_be = sub.add_parser("bench", help="excess-cost sweep over N x methods x seeds")
    common(p_be)
    p_be.add_argument("--seeds", type=int, default=None, help="seed count override")
    p_be.add_argument("--resume", action="store_true", help="skip trials already in trials.csv")
    p_be.set_defaults(func=cmd_bench)

    p_pe = sub.add_parser("pendulum", help="receding-horizon pendulum comparison")
    common(p_pe)
    p_pe.add_argument("--seeds", type=int, default=None, help="seed count override")
    p_pe.set_defaults(func=cmd_pendulum)

    p_th = sub.add_parser("theory", help="curvature, efficiency terms, inequality suite")
    common(p_th)
    p_th.set_defaults(func=cmd_theory)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except RankDeficientError as err:
        print(f"identification failed: {err}", file=sys.stderr)
        return EXIT_RANK
    except (NoStabilizingCandidateError, NotStabilizableError) as err:
        print(f"no stabilizing solution: {err}", file=sys.stderr)
        return EXIT_NO_STABILIZER


if __name__ == "__main__":
    sys.exit(main())
