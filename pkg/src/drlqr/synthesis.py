"""Controller synthesis: certainty equivalence, domain randomization, robust control.

Three ways to turn an identified model (point estimate plus confidence
ellipsoid) into a feedback gain:

* ``synth_ce``       -- solve the Riccati equation at the point estimate,
* ``synth_dr``       -- gradient descent on the average cost over scenarios
                        sampled once from the ellipsoid, masking scenarios the
                        current iterate does not stabilize,
* ``synth_rc``       -- subgradient descent on the worst-case suboptimality
                        gap over the sampled scenarios, warm-started from the
                        best certainty-equivalent candidate.

Both iterative solvers return the best iterate seen on their monitored
objective, so the reported gain is never worse than the initialization.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from drlqr.lqr import (
    INFINITE_COST,
    STABILITY_MARGIN,
    CostModel,
    Gain,
    SystemParams,
    _dlyap_batch,
    _spectral_radius_batch,
    dare_solve,
    excess_cost,
    lqr_cost,
)
from drlqr.sysid import ConfidenceEllipsoid, sample_uniform

__all__ = [
    "AllScenariosUnstableError",
    "NoStabilizingCandidateError",
    "DrOptions",
    "RcOptions",
    "SynthesisReport",
    "synth_ce",
    "dr_objective",
    "synth_dr",
    "synth_dr_scenarios",
    "rc_objective",
    "synth_rc",
    "synth_rc_scenarios",
    "save_report_csv",
]

_DIVERGENCE_PATIENCE = 50


class AllScenariosUnstableError(RuntimeError):
    """No iterate of the scenario descent ever stabilized a single scenario."""


class NoStabilizingCandidateError(RuntimeError):
    """No initialization candidate stabilizes every scenario."""


@dataclass(frozen=True)
class DrOptions:
    """Options for the domain-randomization descent.

    ``max_iters`` and ``step_size`` default to the benchmark settings
    (10000 iterations, constant step 0.0005); ``grad_tol`` stops early once
    the summed masked gradient is negligible.
    """

    n_scenarios: int = 30
    max_iters: int = 10000
    step_size: float = 0.0005
    grad_tol: float = 1e-7

    def __post_init__(self):
        if self.n_scenarios < 1 or self.max_iters < 1 or self.step_size <= 0:
            raise ValueError("DrOptions fields must be positive")


@dataclass(frozen=True)
class RcOptions:
    """Options for the scenario worst-case descent.

    ``max_iters`` is the total iteration budget, split evenly across
    ``restarts + 1`` segments; each segment halves the base step size and
    resumes from the best iterate so far.
    """

    n_scenarios: int = 30
    max_iters: int = 600
    step_size: float = 0.5
    restarts: int = 2

    def __post_init__(self):
        if self.n_scenarios < 1 or self.max_iters < 1 or self.step_size <= 0 or self.restarts < 0:
            raise ValueError("RcOptions fields must be positive")


@dataclass(frozen=True)
class SynthesisReport:
    """Result of an iterative synthesis run.

    ``objective_trace[i]`` and ``stabilized_fraction_trace[i]`` are recorded
    at the i-th evaluated iterate; traces never exceed ``max_iters`` entries.
    """

    gain: Gain
    objective_trace: tuple[float, ...] = field(repr=False)
    stabilized_fraction_trace: tuple[float, ...] = field(repr=False)
    converged: bool = False

    @property
    def objective(self) -> float:
        """Monitored objective at the returned gain."""
        return min(self.objective_trace) if self.objective_trace else INFINITE_COST


def synth_ce(theta_hat: SystemParams, cm: CostModel) -> Gain:
    """Certainty equivalence: the Riccati-optimal gain for the point estimate."""
    return dare_solve(theta_hat, cm).gain


def dr_objective(gain: Gain, scenarios: list[SystemParams], cm: CostModel) -> float:
    """Average cost over scenarios; infinite if any scenario is destabilized."""
    if not scenarios:
        raise ValueError("dr_objective needs at least one scenario")
    total = 0.0
    for theta in scenarios:
        c = lqr_cost(gain, theta, cm)
        if c == INFINITE_COST:
            return INFINITE_COST
        total += c
    return total / len(scenarios)


def rc_objective(gain: Gain, scenarios: list[SystemParams], cm: CostModel) -> float:
    """Worst-case suboptimality gap over scenarios (sampled minimax objective)."""
    if not scenarios:
        raise ValueError("rc_objective needs at least one scenario")
    return max(excess_cost(gain, theta, cm) for theta in scenarios)


def _stack(scenarios: list[SystemParams]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.a for s in scenarios]), np.stack([s.b for s in scenarios])


def _batch_costs_grads(
    k: np.ndarray,
    a_stack: np.ndarray,
    b_stack: np.ndarray,
    cm: CostModel,
    need_grads: bool,
) -> tuple[np.ndarray, np.ndarray | None, np.ndarray]:
    """Per-scenario cost, policy gradient, and stability mask at one gain.

    Destabilized scenarios get infinite cost and (when requested) a zero
    gradient, matching the indicator masking of the descent update.
    """
    n = a_stack.shape[0]
    acl = a_stack + b_stack @ k
    mask = _spectral_radius_batch(acl) < 1.0 - STABILITY_MARGIN
    costs = np.full(n, INFINITE_COST)
    grads = np.zeros((n, k.shape[0], k.shape[1])) if need_grads else None
    if np.any(mask):
        acl_s = acl[mask]
        pk = _dlyap_batch(acl_s, cm.q + k.T @ cm.r @ k)
        costs[mask] = np.einsum("nij,ji->n", pk, cm.sigma_w)
        if need_grads:
            sig = _dlyap_batch(np.swapaxes(acl_s, 1, 2), cm.sigma_w)
            b_s = b_stack[mask]
            btp = np.einsum("nji,njk->nik", b_s, pk)
            term = (cm.r + btp @ b_s) @ k + btp @ a_stack[mask]
            grads[mask] = 2.0 * (term @ sig)
    return costs, grads, mask


def _mean_or_inf(costs: np.ndarray) -> float:
    return float(np.mean(costs)) if np.all(np.isfinite(costs)) else INFINITE_COST


def synth_dr_scenarios(
    init: Gain,
    scenarios: list[SystemParams],
    cm: CostModel,
    opts: DrOptions = DrOptions(),
) -> SynthesisReport:
    """Gradient descent on the summed cost of the scenarios the iterate stabilizes.

    Update: ``K <- K - eta * sum_j grad C(K, theta_j) * 1(stable_j)``; a
    scenario contributes nothing while destabilized and re-enters
    automatically once re-stabilized.  If the average objective stays
    infinite for 50 consecutive iterations, the step size is halved and the
    iteration restarts from the best iterate so far.  Returns the best
    iterate on the average-cost objective, breaking ties toward higher
    stabilized fraction.
    """
    if not scenarios:
        raise ValueError("synth_dr needs at least one scenario")
    a_stack, b_stack = _stack(scenarios)
    k = np.array(init.k, dtype=float)
    eta = opts.step_size

    obj_trace: list[float] = []
    frac_trace: list[float] = []
    best = (INFINITE_COST, -0.0)
    best_k = k.copy()
    any_stable = False
    converged = False
    inf_run = 0

    for _ in range(opts.max_iters):
        costs, grads, mask = _batch_costs_grads(k, a_stack, b_stack, cm, need_grads=True)
        obj = _mean_or_inf(costs)
        frac = float(np.mean(mask))
        obj_trace.append(obj)
        frac_trace.append(frac)
        any_stable = any_stable or bool(np.any(mask))

        if (obj, -frac) < best:
            best = (obj, -frac)
            best_k = k.copy()
            inf_run = 0
        elif obj == INFINITE_COST:
            # No progress while some scenario is destabilized: after 50 such
            # iterations, halve the step and resume from the best iterate.
            # Once the step has collapsed by 2^20 the iterate is frozen and
            # further iterations cannot help, so give up early.
            inf_run += 1
            if inf_run >= _DIVERGENCE_PATIENCE:
                eta *= 0.5
                if eta < opts.step_size * 2.0**-20:
                    break
                k = best_k.copy()
                inf_run = 0
                continue
        else:
            inf_run = 0

        g = np.sum(grads, axis=0)
        if frac == 1.0 and np.linalg.norm(g) <= opts.grad_tol:
            # Stationarity only counts once every scenario is stabilized; a
            # zero masked gradient with unstable scenarios is a stall, not
            # convergence.
            converged = True
            break
        k_next = k - eta * g
        if not np.all(np.isfinite(k_next)):
            eta *= 0.5
            k = best_k.copy()
            continue
        k = k_next

    if not any_stable:
        raise AllScenariosUnstableError(
            "no iterate stabilized any scenario; the sampled set may be too wide"
        )
    return SynthesisReport(
        gain=Gain(best_k),
        objective_trace=tuple(obj_trace),
        stabilized_fraction_trace=tuple(frac_trace),
        converged=converged,
    )


def synth_dr(
    ellipsoid: ConfidenceEllipsoid,
    cm: CostModel,
    opts: DrOptions,
    rng: np.random.Generator,
) -> SynthesisReport:
    """Domain randomization over the confidence ellipsoid.

    Scenarios are drawn uniformly from the ellipsoid once, up front; the
    descent starts from the certainty-equivalent gain of the center.
    """
    theta_hat = ellipsoid.center_params()
    init = synth_ce(theta_hat, cm)  # NotStabilizableError propagates
    scenarios = sample_uniform(ellipsoid, opts.n_scenarios, rng)
    return synth_dr_scenarios(init, scenarios, cm, opts)


def _radius_subgradient(acl: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Gradient of ``rho(A + BK)`` in ``K`` via eigenvalue sensitivity."""
    vals, right = np.linalg.eig(acl)
    i = int(np.argmax(np.abs(vals)))
    lam, v = vals[i], right[:, i]
    vals_t, left_raw = np.linalg.eig(acl.T)
    j = int(np.argmin(np.abs(vals_t - lam)))
    u = np.conj(left_raw[:, j])
    denom = np.vdot(u, v)
    if abs(denom) < 1e-14 or abs(lam) < 1e-14:
        return np.zeros((b.shape[1], acl.shape[0]))
    dlam_dm = np.outer(np.conj(u), v) / denom
    dabs_dm = np.real(np.conj(lam) / abs(lam) * dlam_dm)
    return b.T @ dabs_dm


def _stabilize_all(
    k0: np.ndarray,
    a_stack: np.ndarray,
    b_stack: np.ndarray,
    max_iters: int = 500,
) -> np.ndarray | None:
    """Drive ``max_j rho(A_j + B_j K)`` below one by normalized subgradient steps."""
    k = k0.copy()
    best_k, best_cover = k.copy(), float(np.max(_spectral_radius_batch(a_stack + b_stack @ k)))
    for t in range(max_iters):
        radii = _spectral_radius_batch(a_stack + b_stack @ k)
        cover = float(np.max(radii))
        if cover < best_cover:
            best_cover, best_k = cover, k.copy()
        if cover < 0.995:
            return k
        j = int(np.argmax(radii))
        g = _radius_subgradient(a_stack[j] + b_stack[j] @ k, b_stack[j])
        g_norm = np.linalg.norm(g)
        if g_norm < 1e-14:
            break
        k = k - (0.2 / np.sqrt(t + 1.0)) * g / g_norm
    if best_cover < 1.0 - STABILITY_MARGIN:
        return best_k
    return None


def synth_rc_scenarios(
    scenarios: list[SystemParams],
    cm: CostModel,
    opts: RcOptions = RcOptions(),
    extra_candidates: tuple[Gain, ...] = (),
) -> SynthesisReport:
    """Minimize the worst-case suboptimality gap over the given scenarios.

    Every scenario must be stabilizable (its own optimal cost enters the
    objective).  Initialization sweeps the certainty-equivalent gains of all
    scenarios plus any extra candidates; when the set is wide and none of
    those stabilizes every scenario, a feasibility phase minimizes the worst
    closed-loop spectral radius first, and only if that fails does the solver
    raise :class:`NoStabilizingCandidateError`.  The descent then takes
    normalized diminishing subgradient steps along the active worst-case
    scenario (ties broken toward the lowest index) and rejects steps that
    destabilize a scenario, so the monitored objective stays finite and the
    returned best iterate stabilizes everything.
    """
    if not scenarios:
        raise ValueError("synth_rc needs at least one scenario")
    a_stack, b_stack = _stack(scenarios)
    solutions = [dare_solve(theta, cm) for theta in scenarios]  # NotStabilizable propagates
    opt_costs = np.array([np.trace(sol.p @ cm.sigma_w) for sol in solutions])

    def worst_gap(k: np.ndarray) -> tuple[float, int]:
        costs, _, _ = _batch_costs_grads(k, a_stack, b_stack, cm, need_grads=False)
        gaps = costs - opt_costs
        j = int(np.argmax(gaps))  # first maximizer wins ties
        return float(gaps[j]), j

    candidates = [sol.k for sol in solutions] + [np.array(g.k, dtype=float) for g in extra_candidates]
    # Aggressive fallback candidates: pseudo-inverse state cancellation is a
    # strong stabilizer whenever the input map has full row rank.
    a_mean = np.mean(a_stack, axis=0)
    b_mean = np.mean(b_stack, axis=0)
    candidates.append(-np.linalg.pinv(b_mean) @ a_mean)
    best_obj = INFINITE_COST
    best_k = None
    for cand in candidates:
        obj, _ = worst_gap(cand)
        if obj < best_obj:
            best_obj = obj
            best_k = cand.copy()
    if best_k is None:
        # Feasibility phase: start from the candidate with the smallest worst
        # closed-loop radius and push the whole set inside the unit circle.
        covers = [
            float(np.max(_spectral_radius_batch(a_stack + b_stack @ cand)))
            for cand in candidates
        ]
        seed_k = candidates[int(np.argmin(covers))]
        stabilized = _stabilize_all(seed_k, a_stack, b_stack)
        if stabilized is not None:
            best_k = stabilized
            best_obj, _ = worst_gap(best_k)
    if best_k is None:
        raise NoStabilizingCandidateError(
            f"no candidate stabilizes all {len(scenarios)} scenarios, "
            "and the feasibility phase found no stabilizing gain"
        )

    obj_trace: list[float] = []
    frac_trace: list[float] = []
    converged = False
    segments = opts.restarts + 1
    seg_len = max(opts.max_iters // segments, 1)

    for segment in range(segments):
        if len(obj_trace) >= opts.max_iters:
            break
        k = best_k.copy()
        eta = opts.step_size / 2.0**segment
        for t in range(seg_len):
            if len(obj_trace) >= opts.max_iters:
                break
            obj, j = worst_gap(k)
            obj_trace.append(obj)
            frac_trace.append(1.0)
            if obj < best_obj:
                best_obj = obj
                best_k = k.copy()
            if obj <= 1e-14:
                converged = True
                break
            theta_j = scenarios[j]
            _, grads, _ = _batch_costs_grads(
                k, theta_j.a[None], theta_j.b[None], cm, need_grads=True
            )
            g = grads[0]
            g_norm = np.linalg.norm(g)
            if g_norm <= 1e-14:
                converged = True
                break
            step = eta / np.sqrt(t + 1.0)
            direction = g / g_norm
            # Subgradient steps may increase the objective; only steps that
            # destabilize a scenario are rejected (with local halving).
            moved = False
            for _ in range(20):
                k_try = k - step * direction
                acl = a_stack + b_stack @ k_try
                if np.all(_spectral_radius_batch(acl) < 1.0 - STABILITY_MARGIN):
                    k = k_try
                    moved = True
                    break
                step *= 0.5
            if not moved:
                break
        if converged:
            break

    final_obj, _ = worst_gap(best_k)
    assert final_obj < INFINITE_COST
    return SynthesisReport(
        gain=Gain(best_k),
        objective_trace=tuple(obj_trace),
        stabilized_fraction_trace=tuple(frac_trace),
        converged=converged,
    )


def synth_rc(
    ellipsoid: ConfidenceEllipsoid,
    cm: CostModel,
    opts: RcOptions,
    rng: np.random.Generator,
) -> SynthesisReport:
    """Scenario robust control over the confidence ellipsoid.

    Samples ``opts.n_scenarios`` points uniformly from the ellipsoid and adds
    the center's certainty-equivalent gain to the initialization sweep.
    """
    scenarios = sample_uniform(ellipsoid, opts.n_scenarios, rng)
    extra: tuple[Gain, ...] = ()
    try:
        extra = (synth_ce(ellipsoid.center_params(), cm),)
    except Exception:
        pass  # center may be unstabilizable; scenario candidates remain
    return synth_rc_scenarios(scenarios, cm, opts, extra_candidates=extra)


def save_report_csv(report: SynthesisReport, path: str | Path) -> None:
    """Write the iteration trace as (iter, objective, stabilized_fraction)."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "objective", "stabilized_fraction"])
        rows = zip(report.objective_trace, report.stabilized_fraction_trace)
        for i, (obj, frac) in enumerate(rows, start=1):
            writer.writerow([i, "inf" if obj == INFINITE_COST else repr(float(obj)), repr(float(frac))])
