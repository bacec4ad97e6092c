"""Monte Carlo benchmark: excess cost vs number of experiments, per method.

One trial = identify from ``N`` fresh trajectories, synthesize with one of
the three methods, evaluate the excess cost on the true system.  For each
(seed, N) cell all methods consume the same dataset, so comparisons are
paired; only the synthesis stage sees method-specific randomness.  The whole
sweep is a pure function of its configuration (including the master seed):
each trial owns the stream keyed by (master_seed, seed, N[, method]) and
rows are keyed and sorted, so any execution order gives the same table.
"""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from drlqr.lqr import (
    INFINITE_COST,
    CostModel,
    NotStabilizableError,
    SystemParams,
    excess_cost,
)
from drlqr.rng import stream
from drlqr.synthesis import (
    AllScenariosUnstableError,
    DrOptions,
    NoStabilizingCandidateError,
    RcOptions,
    synth_ce,
    synth_dr,
    synth_rc,
)
from drlqr.sysid import (
    RankDeficientError,
    SingularFisherError,
    collect_dataset,
    confidence_ellipsoid,
    fisher_estimate,
    least_squares,
)

__all__ = [
    "METHODS",
    "SweepConfig",
    "TrialResult",
    "SummaryRow",
    "run_trial",
    "run_sweep",
    "summarize",
    "export_trials",
    "load_trials",
    "export_summary",
    "emit_plot",
]

METHODS = ("ce", "dr", "rc")
_METHOD_ID = {"ce": 1, "dr": 2, "rc": 3}


@dataclass(frozen=True)
class SweepConfig:
    """Full description of one benchmark sweep."""

    theta_star: SystemParams
    cm: CostModel
    n_grid: tuple[int, ...] = (10, 22, 46, 100, 215, 464)
    horizon: int = 10
    sigma_u: np.ndarray | None = None
    delta: float = 0.1
    methods: tuple[str, ...] = METHODS
    seeds: int = 100
    dr_opts: DrOptions = field(default_factory=DrOptions)
    rc_opts: RcOptions = field(default_factory=RcOptions)
    master_seed: int = 0

    def __post_init__(self):
        if list(self.n_grid) != sorted(set(self.n_grid)):
            raise ValueError("n_grid must be strictly increasing")
        if self.seeds < 1:
            raise ValueError("seeds must be >= 1")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods: {sorted(unknown)}")
        sigma_u = self.sigma_u if self.sigma_u is not None else np.eye(self.theta_star.du)
        object.__setattr__(self, "sigma_u", np.atleast_2d(np.asarray(sigma_u, dtype=float)))
        object.__setattr__(self, "n_grid", tuple(int(n) for n in self.n_grid))
        object.__setattr__(self, "methods", tuple(self.methods))


@dataclass(frozen=True)
class TrialResult:
    """Outcome of a single (seed, N, method) trial.

    ``stable`` is exactly "the excess cost is finite"; ``wall_time`` is
    measurement metadata and excluded from equality.
    """

    seed: int
    n: int
    method: str
    excess: float
    stable: bool
    wall_time: float = field(compare=False, default=0.0)

    def __post_init__(self):
        if self.stable != (self.excess < INFINITE_COST):
            raise ValueError("stable flag must match finiteness of the excess cost")


@dataclass(frozen=True)
class SummaryRow:
    n: int
    method: str
    median: float
    q25: float
    q75: float
    unstable_fraction: float

    def __post_init__(self):
        if not (self.q25 <= self.median <= self.q75):
            raise ValueError("quantiles must be ordered q25 <= median <= q75")


def run_trial(cfg: SweepConfig, seed: int, n: int, method: str) -> TrialResult:
    """Identify, synthesize, evaluate; failures count as unstable trials.

    The dataset stream is keyed without the method so that per-seed
    comparisons across methods are paired.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    t0 = time.perf_counter()
    data_rng = stream(cfg.master_seed, seed, n, 0)
    synth_rng = stream(cfg.master_seed, seed, n, _METHOD_ID[method])
    excess = INFINITE_COST
    try:
        ds = collect_dataset(cfg.theta_star, cfg.cm, n, cfg.horizon, cfg.sigma_u, data_rng)
        theta_hat = least_squares(ds)
        if method == "ce":
            gain = synth_ce(theta_hat, cfg.cm)
        else:
            fi = fisher_estimate(ds, cfg.cm)
            ellipsoid = confidence_ellipsoid(theta_hat, fi, n, cfg.delta)
            if method == "dr":
                gain = synth_dr(ellipsoid, cfg.cm, cfg.dr_opts, synth_rng).gain
            else:
                gain = synth_rc(ellipsoid, cfg.cm, cfg.rc_opts, synth_rng).gain
        excess = excess_cost(gain, cfg.theta_star, cfg.cm)
    except (
        RankDeficientError,
        SingularFisherError,
        NotStabilizableError,
        AllScenariosUnstableError,
        NoStabilizingCandidateError,
    ):
        excess = INFINITE_COST
    wall = time.perf_counter() - t0
    return TrialResult(
        seed=seed, n=n, method=method, excess=excess,
        stable=excess < INFINITE_COST, wall_time=wall,
    )


def _run_keyed(args: tuple[SweepConfig, int, int, str]) -> TrialResult:
    return run_trial(*args)


def run_sweep(
    cfg: SweepConfig,
    n_jobs: int = 1,
    skip: set[tuple[int, int, str]] | None = None,
    progress: bool = False,
) -> list[TrialResult]:
    """Run the full (n_grid x methods x seeds) grid.

    ``skip`` holds (seed, N, method) keys already computed (resume support).
    Trials are independent; with ``n_jobs > 1`` they run in a process pool,
    and the keyed, sorted result is identical to sequential execution.
    """
    skip = skip or set()
    tasks = [
        (cfg, seed, n, method)
        for n in cfg.n_grid
        for method in cfg.methods
        for seed in range(cfg.seeds)
        if (seed, n, method) not in skip
    ]
    results: list[TrialResult] = []
    if n_jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            for i, res in enumerate(pool.map(_run_keyed, tasks, chunksize=4)):
                results.append(res)
                if progress and (i + 1) % 50 == 0:
                    print(f"  {i + 1}/{len(tasks)} trials done", flush=True)
    else:
        for i, task in enumerate(tasks):
            results.append(_run_keyed(task))
            if progress and (i + 1) % 50 == 0:
                print(f"  {i + 1}/{len(tasks)} trials done", flush=True)
    results.sort(key=lambda r: (r.n, r.method, r.seed))
    return results


def _nearest_rank(sorted_vals: np.ndarray, q: float) -> float:
    rank = max(1, math.ceil(q * len(sorted_vals)))
    return float(sorted_vals[rank - 1])


def summarize(table: list[TrialResult]) -> list[SummaryRow]:
    """Nearest-rank quantiles per (N, method) cell; infinite sorts last.

    A majority-unstable cell therefore reports an infinite median, and
    ``unstable_fraction`` is the share of infinite excess costs.
    """
    cells: dict[tuple[int, str], list[float]] = {}
    for row in table:
        cells.setdefault((row.n, row.method), []).append(row.excess)
    if not cells:
        raise ValueError("empty trial table: no (N, method) cell to summarize")
    out = []
    for (n, method), vals in sorted(cells.items()):
        if not vals:
            raise ValueError(f"empty cell (N={n}, method={method})")
        vals_sorted = np.sort(np.asarray(vals))  # +inf sorts after all finite
        out.append(
            SummaryRow(
                n=n,
                method=method,
                median=_nearest_rank(vals_sorted, 0.5),
                q25=_nearest_rank(vals_sorted, 0.25),
                q75=_nearest_rank(vals_sorted, 0.75),
                unstable_fraction=float(np.mean(np.isinf(vals_sorted))),
            )
        )
    return out


def _fmt(x: float) -> str:
    return "inf" if x == INFINITE_COST else repr(float(x))


def export_trials(table: list[TrialResult], path: str | Path) -> None:
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["seed", "N", "method", "excess_cost", "stable", "wall_time"])
            for r in table:
                writer.writerow(
                    [r.seed, r.n, r.method, _fmt(r.excess),
                     "true" if r.stable else "false", repr(float(r.wall_time))]
                )
    except OSError as err:
        raise OSError(f"cannot write trial table to {path}: {err}") from err


def load_trials(path: str | Path) -> list[TrialResult]:
    path = Path(path)
    out = []
    try:
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                out.append(
                    TrialResult(
                        seed=int(row["seed"]),
                        n=int(row["N"]),
                        method=row["method"],
                        excess=float(row["excess_cost"]),
                        stable=row["stable"] == "true",
                        wall_time=float(row["wall_time"]),
                    )
                )
    except OSError as err:
        raise OSError(f"cannot read trial table from {path}: {err}") from err
    return out


def export_summary(rows: list[SummaryRow], path: str | Path) -> None:
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["N", "method", "median", "q25", "q75", "unstable_fraction"])
            for r in rows:
                writer.writerow(
                    [r.n, r.method, _fmt(r.median), _fmt(r.q25), _fmt(r.q75),
                     repr(float(r.unstable_fraction))]
                )
    except OSError as err:
        raise OSError(f"cannot write summary to {path}: {err}") from err


def emit_plot(rows: list[SummaryRow], path: str | Path) -> None:
    """Render the excess-cost comparison as a standalone SVG.

    Log-log axes, one series per method with a shaded interquartile band;
    infinite cells are omitted from their series.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for method in sorted({r.method for r in rows}):
        series = sorted((r for r in rows if r.method == method), key=lambda r: r.n)
        ns = [r.n for r in series if r.median < INFINITE_COST]
        med = [r.median for r in series if r.median < INFINITE_COST]
        if not ns:
            continue
        (line,) = ax.loglog(ns, med, marker="o", label=method.upper())
        band_ns = [r.n for r in series if r.q75 < INFINITE_COST]
        lo = [max(r.q25, 1e-300) for r in series if r.q75 < INFINITE_COST]
        hi = [r.q75 for r in series if r.q75 < INFINITE_COST]
        if band_ns:
            ax.fill_between(band_ns, lo, hi, color=line.get_color(), alpha=0.2, linewidth=0)
    ax.set_xlabel("number of experiments N")
    ax.set_ylabel("excess cost")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    try:
        fig.savefig(path, format="svg")
    except OSError as err:
        raise OSError(f"cannot write plot to {path}: {err}") from err
    finally:
        plt.close(fig)
