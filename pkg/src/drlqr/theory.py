"""Sensitivity theory made executable.

The central object is the model-task curvature ``H(theta)``: the quadratic
coefficient of the excess cost incurred by certainty equivalence at a
perturbed model,

    C(K(theta + d), theta) - C(K(theta), theta) = d' H(theta) d + O(|d|^3).

Via the gain Jacobian ``J = D vec K`` it factors as
``H = J' (Sigma (x) Psi) J`` with ``Sigma`` the closed-loop state covariance
at the optimum and ``Psi = B'PB + R``.  The Kronecker order is pinned by the
column-stacking identity ``trace(M S M' P) = vec(M)' (S (x) P) vec(M)``, and
a finite-difference path over the full perturbation must agree with the
factored form.

The module also computes the two per-experiment efficiency scalings
``trace(H FI^-1) / N`` and ``d_theta |H FI^-1| / N`` (average-case vs
worst-case uncertainty weighting), a Monte Carlo estimate of the population
Fisher information, and an executable suite of closed-loop perturbation
inequalities with per-check margins.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from drlqr.lqr import (
    CostModel,
    NotStabilizableError,
    SystemParams,
    dare_solve,
    dlyap,
    flatten_params,
    lqr_cost,
    spectral_radius,
    state_covariance,
    unflatten_params,
)
from drlqr.sysid import FisherEstimate, SingularFisherError, collect_dataset, fisher_estimate

__all__ = [
    "PreconditionViolatedError",
    "ModelTaskHessian",
    "LeadingTerms",
    "InequalityCheck",
    "InequalityReport",
    "gain_jacobian",
    "model_task_hessian",
    "population_fisher",
    "leading_terms",
    "inequality_suite",
    "save_suite_csv",
]


class PreconditionViolatedError(ValueError):
    """The inequality suite requires Q >= I, R = I, Sigma_w = I."""


@dataclass(frozen=True)
class ModelTaskHessian:
    """Symmetric PSD curvature of the certainty-equivalent excess cost.

    The analytic path is PSD to 1e-8 relative by construction; the
    finite-difference path carries second-difference noise, so its PSD check
    runs at the 1e-5 noise floor instead.
    """

    h: np.ndarray
    method: str  # "analytic" | "finite-difference"

    def __post_init__(self):
        h = np.asarray(self.h, dtype=float)
        scale = max(1.0, float(np.linalg.norm(h, 2)))
        tol = 1e-8 if self.method == "analytic" else 1e-5
        if np.max(np.abs(h - h.T)) > tol * scale:
            raise ValueError("model-task curvature must be symmetric")
        if np.linalg.eigvalsh(0.5 * (h + h.T))[0] < -tol * scale:
            raise ValueError("model-task curvature must be PSD")
        object.__setattr__(self, "h", 0.5 * (h + h.T))


@dataclass(frozen=True)
class LeadingTerms:
    """Per-experiment efficiency scalings of the three synthesis methods.

    ``ce_dr_term = trace(H FI^-1) / N`` (average-case, shared by certainty
    equivalence and domain randomization) and
    ``rc_term = d_theta |H FI^-1| / N`` (worst-case).  For PSD ``H`` and PD
    ``FI`` the trace never exceeds dimension times the operator norm, so
    ``ce_dr_term <= rc_term`` up to roundoff.
    """

    ce_dr_term: float
    rc_term: float
    n: int
    d_theta: int

    def __post_init__(self):
        if self.ce_dr_term > self.rc_term * (1 + 1e-10):
            raise ValueError("trace term exceeds dimension * operator-norm term")


def gain_jacobian(theta: SystemParams, cm: CostModel, step: float | None = None) -> np.ndarray:
    """Jacobian ``D vec K(theta)`` of the Riccati gain in the flat parameter.

    Central differences per coordinate with one Richardson extrapolation
    level; the base step is ``1e-6 * max(1, |theta|)``.  If a perturbed
    parameter is not stabilizable the step for that coordinate is reduced
    once (h/10) before giving up.
    """
    flat = flatten_params(theta)
    d_theta = flat.size
    base = step if step is not None else 1e-6 * max(1.0, float(np.linalg.norm(flat)))
    dare_solve(theta, cm)  # fail fast if theta itself is not stabilizable
    k_dim = theta.du * theta.dx
    jac = np.empty((k_dim, d_theta))

    def vec_k(v: np.ndarray) -> np.ndarray:
        sol = dare_solve(unflatten_params(v, theta.dx, theta.du), cm)
        return sol.k.flatten(order="F")

    def central(i: int, h: float) -> np.ndarray:
        e = np.zeros(d_theta)
        e[i] = h
        return (vec_k(flat + e) - vec_k(flat - e)) / (2.0 * h)

    for i in range(d_theta):
        h = base
        try:
            d_h = central(i, h)
            d_half = central(i, h / 2.0)
        except NotStabilizableError:
            h = base / 10.0
            d_h = central(i, h)
            d_half = central(i, h / 2.0)
        jac[:, i] = (4.0 * d_half - d_h) / 3.0
    return jac


def _middle_factor(theta: SystemParams, cm: CostModel) -> np.ndarray:
    """``Sigma^{K(theta)}(theta) (x) Psi(theta)`` under column stacking."""
    sol = dare_solve(theta, cm)
    sigma = state_covariance(sol.gain, theta, cm)
    psi = theta.b.T @ sol.p @ theta.b + cm.r
    return np.kron(sigma, psi)


def _fd_quadratic_coefficient(theta: SystemParams, cm: CostModel, step: float) -> np.ndarray:
    # Half the second-difference Hessian of g(v) = C(K(v), theta), i.e. the
    # matrix Hq with g(flat + d) - g(flat) = d' Hq d + O(|d|^3).
    flat = flatten_params(theta)
    d_theta = flat.size

    def g(v: np.ndarray) -> float:
        gain = dare_solve(unflatten_params(v, theta.dx, theta.du), cm).gain
        return lqr_cost(gain, theta, cm)

    g0 = g(flat)
    hess = np.empty((d_theta, d_theta))
    shifted = {}

    def g_shift(i: int, s: float) -> float:
        key = (i, s)
        if key not in shifted:
            e = np.zeros(d_theta)
            e[i] = s
            shifted[key] = g(flat + e)
        return shifted[key]

    for i in range(d_theta):
        hess[i, i] = (g_shift(i, step) - 2.0 * g0 + g_shift(i, -step)) / step**2
    for i in range(d_theta):
        for j in range(i + 1, d_theta):
            ei = np.zeros(d_theta)
            ej = np.zeros(d_theta)
            ei[i] = step
            ej[j] = step
            val = (
                g(flat + ei + ej) - g(flat + ei - ej) - g(flat - ei + ej) + g(flat - ei - ej)
            ) / (4.0 * step**2)
            hess[i, j] = val
            hess[j, i] = val
    return 0.5 * hess


def model_task_hessian(
    theta: SystemParams,
    cm: CostModel,
    method: str = "analytic",
    fd_step: float = 1e-4,
) -> ModelTaskHessian:
    """Model-task curvature ``H(theta)`` by either path.

    ``analytic`` builds ``J' (Sigma (x) Psi) J`` from the gain Jacobian;
    ``finite-difference`` measures the quadratic coefficient of
    ``v -> C(K(v), theta)`` directly with second differences (step ``fd_step``
    with one Richardson level).  The two must agree to about 1e-3 relative.
    """
    if method == "analytic":
        jac = gain_jacobian(theta, cm)
        h = jac.T @ _middle_factor(theta, cm) @ jac
    elif method == "finite-difference":
        coarse = _fd_quadratic_coefficient(theta, cm, fd_step)
        fine = _fd_quadratic_coefficient(theta, cm, fd_step / 2.0)
        h = (4.0 * fine - coarse) / 3.0
    else:
        raise ValueError(f"unknown method {method!r}")
    return ModelTaskHessian(h=0.5 * (h + h.T), method=method)


def population_fisher(
    theta_star: SystemParams,
    cm: CostModel,
    horizon: int,
    sigma_u: np.ndarray,
    mc_trajectories: int,
    rng: np.random.Generator,
    chunk: int = 20000,
) -> FisherEstimate:
    """Monte Carlo estimate of the population Fisher information.

    Averages the per-trajectory information of ``mc_trajectories`` fresh
    rollouts; shares the estimator code path with
    :func:`drlqr.sysid.fisher_estimate` so the two agree exactly on the same
    data.  ``stderr`` reports the Frobenius-norm standard error of the mean.
    """
    if mc_trajectories < 1:
        raise ValueError("need at least one Monte Carlo trajectory")
    chunks: list[tuple[int, np.ndarray]] = []
    gram_sum = None
    gram_sq_sum = None
    done = 0
    while done < mc_trajectories:
        n = min(chunk, mc_trajectories - done)
        ds = collect_dataset(theta_star, cm, n, horizon, sigma_u, rng)
        chunks.append((n, fisher_estimate(ds, cm).matrix))
        for tr in ds.trajectories:
            z = np.hstack([tr.states[:-1], tr.inputs])
            gram = z.T @ z
            if gram_sum is None:
                gram_sum = np.zeros_like(gram)
                gram_sq_sum = np.zeros_like(gram)
            gram_sum += gram
            gram_sq_sum += gram**2
        done += n
    if len(chunks) == 1:
        mean = chunks[0][1]  # bitwise-identical to fisher_estimate on these rollouts
    else:
        mean = sum(n * m for n, m in chunks) / mc_trajectories
        mean = 0.5 * (mean + mean.T)
    # Frobenius standard error of the mean; the noise-whitening factor is
    # deterministic, so it only rescales the per-entry variances.
    gram_var = np.maximum(gram_sq_sum / mc_trajectories - (gram_sum / mc_trajectories) ** 2, 0.0)
    w_fro2 = float(np.sum(np.linalg.inv(cm.sigma_w) ** 2))
    stderr = float(np.sqrt(w_fro2 * np.sum(gram_var) / mc_trajectories))
    return FisherEstimate(matrix=mean, stderr=stderr)


def leading_terms(h: ModelTaskHessian | np.ndarray, fi: FisherEstimate | np.ndarray, n: int) -> LeadingTerms:
    """Efficiency scalings ``trace(H FI^-1)/N`` and ``d |H FI^-1|/N``.

    Solves ``FI X = H`` instead of inverting the information matrix.
    """
    h_mat = h.h if isinstance(h, ModelTaskHessian) else np.asarray(h, dtype=float)
    fi_mat = fi.matrix if isinstance(fi, FisherEstimate) else np.asarray(fi, dtype=float)
    d_theta = h_mat.shape[0]
    vals = np.linalg.eigvalsh(fi_mat)
    if vals[0] <= 1e-12 * max(1.0, vals[-1]):
        raise SingularFisherError("population Fisher information is singular")
    x = np.linalg.solve(fi_mat, h_mat)
    return LeadingTerms(
        ce_dr_term=float(np.trace(x)) / n,
        rc_term=d_theta * float(np.linalg.norm(x, 2)) / n,
        n=n,
        d_theta=d_theta,
    )


@dataclass(frozen=True)
class InequalityCheck:
    name: str
    value: float
    bound: float
    margin: float
    passed: bool


@dataclass(frozen=True)
class InequalityReport:
    checks: tuple[InequalityCheck, ...]

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failed(self) -> list[InequalityCheck]:
        return [c for c in self.checks if not c.passed]


def _check(name: str, value: float, bound: float) -> InequalityCheck:
    margin = bound - value
    return InequalityCheck(name=name, value=float(value), bound=float(bound), margin=float(margin), passed=bool(value <= bound))


def inequality_suite(
    theta: SystemParams,
    cm: CostModel,
    rng: np.random.Generator | None = None,
    n_directions: int = 2,
) -> InequalityReport:
    """Evaluate the closed-loop perturbation inequalities at one instance.

    Requires the standing normalization ``Q >= I``, ``R = I``,
    ``Sigma_w = I`` (raises :class:`PreconditionViolatedError` otherwise).
    Checks the norm inequalities at ``theta`` itself, then perturbs by
    ``(1/16) |P|^-2`` (Riccati perturbation bounds) and ``(1/256) |P|^-5``
    (certainty-equivalent stabilization bound) along sampled directions,
    exactly at the boundary radii.  Failures are reported with their margins,
    never raised: a failed check is a finding.
    """
    dx, du = theta.dx, theta.du
    if np.linalg.eigvalsh(cm.q - np.eye(dx))[0] < -1e-10:
        raise PreconditionViolatedError("suite requires Q >= I")
    if not np.allclose(cm.r, np.eye(du), atol=1e-12):
        raise PreconditionViolatedError("suite requires R = I")
    if not np.allclose(cm.sigma_w, np.eye(dx), atol=1e-12):
        raise PreconditionViolatedError("suite requires Sigma_w = I")
    if rng is None:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(0x5EED)))

    sol = dare_solve(theta, cm)
    p_norm = float(np.linalg.norm(sol.p, 2))
    acl = theta.a + theta.b @ sol.k
    sigma = state_covariance(sol.gain, theta, cm)
    psi = theta.b.T @ sol.p @ theta.b + cm.r
    tau_b = max(1.0, float(np.linalg.norm(theta.b, 2)))

    checks = [
        _check("state_cov_leq_value_norm", np.linalg.norm(sigma, 2), p_norm),
        _check("closed_loop_leq_sqrt_value", np.linalg.norm(acl, 2), np.sqrt(p_norm)),
        _check("gain_leq_sqrt_value", np.linalg.norm(sol.k, 2), np.sqrt(p_norm)),
        _check("psi_leq_2tau2_value", np.linalg.norm(psi, 2), 2.0 * tau_b**2 * p_norm),
        _check(
            "psi_kron_cov_leq_2tau2_value_sq",
            np.linalg.norm(np.kron(psi, sigma), 2),
            2.0 * tau_b**2 * p_norm**2,
        ),
    ]

    flat = flatten_params(theta)

    def perturbed(radius: float, idx: int) -> SystemParams:
        direction = rng.standard_normal(flat.size)
        direction /= np.linalg.norm(direction)
        return unflatten_params(flat + radius * direction, dx, du)

    # Riccati perturbation bounds at radius (1/16) |P|^-2.
    r_ricc = p_norm**-2 / 16.0
    for i in range(n_directions):
        theta2 = perturbed(r_ricc, i)
        try:
            sol2 = dare_solve(theta2, cm)
        except NotStabilizableError:
            checks.append(_check(f"riccati_perturb_stabilizable[{i}]", 1.0, 0.0))
            continue
        dist = float(np.linalg.norm(flatten_params(theta2) - flat))
        checks.append(
            _check(f"riccati_perturb_value_norm[{i}]", np.linalg.norm(sol2.p, 2), np.sqrt(2.0) * p_norm)
        )
        checks.append(
            _check(
                f"riccati_perturb_gain_shift[{i}]",
                max(
                    np.linalg.norm(sol2.k - sol.k, 2),
                    np.linalg.norm(theta.b @ (sol2.k - sol.k), 2),
                ),
                32.0 * p_norm**3.5 * dist,
            )
        )
        checks.append(
            _check(
                f"riccati_perturb_value_shift[{i}]",
                np.linalg.norm(sol2.p - sol.p, 2),
                8.0 * np.sqrt(2.0) * p_norm**3 * dist,
            )
        )

    # Certainty-equivalent stabilization at the boundary radius (1/256) |P|^-5.
    r_ce = p_norm**-5 / 256.0
    for i in range(n_directions):
        theta2 = perturbed(r_ce, n_directions + i)
        try:
            gain2 = dare_solve(theta2, cm).gain
            cross_rho = spectral_radius(theta.a + theta.b @ gain2.k)
            if cross_rho >= 1.0:
                checks.append(_check(f"ce_stabilization_cross_stable[{i}]", cross_rho, 1.0))
                continue
            cross_cov = dlyap((theta.a + theta.b @ gain2.k).T, cm.sigma_w)
            checks.append(
                _check(
                    f"ce_stabilization_cross_cov[{i}]",
                    np.linalg.norm(cross_cov, 2),
                    2.0 * p_norm,
                )
            )
        except NotStabilizableError:
            checks.append(_check(f"ce_stabilization_stabilizable[{i}]", 1.0, 0.0))

    return InequalityReport(checks=tuple(checks))


def save_suite_csv(report: InequalityReport, path: str | Path) -> None:
    """Write the suite report as (check_name, margin, pass)."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["check_name", "margin", "pass"])
        for c in report.checks:
            writer.writerow([c.name, repr(c.margin), "true" if c.passed else "false"])
