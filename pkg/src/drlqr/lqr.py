"""Exact infinite-horizon discrete-time LQR machinery.

Conventions used throughout the package:

* dynamics ``x' = A x + B u + w``, feedback ``u = K x`` (note the plus sign),
* the parameter vector stacks the columns of the block ``[A B]``
  (column-major), so ``len(theta) = dx * (dx + du)``,
* "stable" always means spectral radius below ``1 - STABILITY_MARGIN``,
* the average cost of a destabilizing gain is the value ``INFINITE_COST``,
  which orders above every finite cost; solvers raise instead of silently
  overflowing, so ``inf`` never leaks out of a numerical accident.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "INFINITE_COST",
    "STABILITY_MARGIN",
    "UnstableError",
    "NotStabilizableError",
    "SystemParams",
    "CostModel",
    "Gain",
    "RiccatiSolution",
    "flatten_params",
    "unflatten_params",
    "spectral_radius",
    "dlyap",
    "dare_solve",
    "state_covariance",
    "lqr_cost",
    "excess_cost",
    "performance_difference",
    "policy_gradient",
]

#: Distinguished cost of a destabilizing gain.  Compares above all finite
#: costs and serializes as the literal token ``inf``.
INFINITE_COST = math.inf

#: A closed loop counts as stable only if its spectral radius is below
#: ``1 - STABILITY_MARGIN``.
STABILITY_MARGIN = 1e-9

_SYM_TOL = 1e-10
_DARE_TOL = 1e-12
_DARE_MAX_ITER = 500
# Value matrices beyond this scale are numerically meaningless (the defect
# tolerance is relative); treat them as a stabilizability failure.
_DARE_OVERFLOW = 1e12
_DEFECT_TOL = 1e-8
#: Dimension threshold above which dlyap switches from the direct Kronecker
#: solve to the Smith squaring iteration.
_DLYAP_KRON_MAX_DIM = 30


class UnstableError(ValueError):
    """A closed-loop matrix that must be stable is not.

    Carries the offending spectral radius in ``rho``.
    """

    def __init__(self, rho: float, what: str = "matrix"):
        self.rho = float(rho)
        super().__init__(f"{what} is not stable: spectral radius {rho:.6g} >= 1 - {STABILITY_MARGIN:g}")


class NotStabilizableError(ValueError):
    """The Riccati iteration failed to produce a stabilizing solution."""


def _check_symmetric(name: str, m: np.ndarray, tol: float = _SYM_TOL) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"{name} must be square, got shape {m.shape}")
    if np.max(np.abs(m - m.T)) > tol * (1.0 + np.max(np.abs(m))):
        raise ValueError(f"{name} must be symmetric")
    return 0.5 * (m + m.T)


def _min_eig(m: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(m)[0])


def _sym(m: np.ndarray) -> np.ndarray:
    # Iterative solvers drift off the symmetric manifold; re-project before
    # any invariant check.
    return 0.5 * (m + m.T)


@dataclass(frozen=True)
class SystemParams:
    """Pair ``(A, B)`` of state-transition and input matrices.

    ``A`` is ``dx x dx``, ``B`` is ``dx x du``.  The flat view of the
    parameter is ``flatten_params(self)``.
    """

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.a, dtype=float))
        b = np.atleast_2d(np.asarray(self.b, dtype=float))
        if a.shape[0] != a.shape[1]:
            raise ValueError(f"A must be square, got shape {a.shape}")
        if b.shape[0] != a.shape[0]:
            raise ValueError(f"B must have {a.shape[0]} rows, got shape {b.shape}")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def dx(self) -> int:
        return self.a.shape[0]

    @property
    def du(self) -> int:
        return self.b.shape[1]

    @property
    def dim(self) -> int:
        """Length of the flat parameter vector, ``dx * (dx + du)``."""
        return self.dx * (self.dx + self.du)

    def flat(self) -> np.ndarray:
        return flatten_params(self)


@dataclass(frozen=True)
class CostModel:
    """LQR weights and process-noise covariance.

    ``q`` must be symmetric PSD, ``r`` and ``sigma_w`` symmetric PD
    (checked at construction with eigenvalue tolerance 1e-10).
    """

    q: np.ndarray
    r: np.ndarray
    sigma_w: np.ndarray

    def __post_init__(self):
        q = _check_symmetric("Q", self.q)
        r = _check_symmetric("R", self.r)
        sigma_w = _check_symmetric("Sigma_w", self.sigma_w)
        if _min_eig(q) < -_SYM_TOL:
            raise ValueError("Q must be positive semidefinite")
        if _min_eig(r) <= _SYM_TOL:
            raise ValueError("R must be positive definite")
        if _min_eig(sigma_w) <= _SYM_TOL:
            raise ValueError("Sigma_w must be positive definite")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "sigma_w", sigma_w)

    @classmethod
    def identity(cls, dx: int, du: int, q_scale: float = 1.0) -> "CostModel":
        """Default experiment regime: ``Sigma_w = I``, ``R = I``, ``Q = q_scale * I``."""
        return cls(q_scale * np.eye(dx), np.eye(du), np.eye(dx))


@dataclass(frozen=True)
class Gain:
    """Static state feedback ``u = K x`` with ``K`` of shape ``du x dx``."""

    k: np.ndarray

    def __post_init__(self):
        k = np.atleast_2d(np.asarray(self.k, dtype=float))
        object.__setattr__(self, "k", k)

    @property
    def du(self) -> int:
        return self.k.shape[0]

    @property
    def dx(self) -> int:
        return self.k.shape[1]


@dataclass(frozen=True)
class RiccatiSolution:
    """Stabilizing Riccati solution: value matrix, optimal gain, defect norm."""

    p: np.ndarray
    k: np.ndarray
    residual: float

    @property
    def gain(self) -> Gain:
        return Gain(self.k)


def flatten_params(theta: SystemParams) -> np.ndarray:
    """Column-major stacking of the block matrix ``[A B]``."""
    return np.concatenate([theta.a.flatten(order="F"), theta.b.flatten(order="F")])


def unflatten_params(v: np.ndarray, dx: int, du: int) -> SystemParams:
    """Exact inverse of :func:`flatten_params`."""
    v = np.asarray(v, dtype=float).ravel()
    if v.size != dx * (dx + du):
        raise ValueError(f"flat parameter has length {v.size}, expected {dx * (dx + du)}")
    a = v[: dx * dx].reshape((dx, dx), order="F")
    b = v[dx * dx:].reshape((dx, du), order="F")
    return SystemParams(a, b)


def spectral_radius(m: np.ndarray) -> float:
    """Largest eigenvalue magnitude of a (possibly non-symmetric) square matrix.

    Raises ``numpy.linalg.LinAlgError`` if the eigensolver does not converge;
    a partial value is never returned.
    """
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if m.shape[0] != m.shape[1]:
        raise ValueError(f"spectral radius needs a square matrix, got shape {m.shape}")
    return float(np.max(np.abs(np.linalg.eigvals(m))))


def _spectral_radius_batch(ms: np.ndarray) -> np.ndarray:
    return np.max(np.abs(np.linalg.eigvals(ms)), axis=-1)


def _unvec(v: np.ndarray, d: int) -> np.ndarray:
    return v.reshape((d, d), order="F")


def dlyap(acl: np.ndarray, qrhs: np.ndarray) -> np.ndarray:
    """Solve the discrete Lyapunov equation ``P = Acl' P Acl + Qrhs``.

    Direct Kronecker solve (``I - Acl' (x) Acl'`` as a ``d^2 x d^2`` system)
    for ``d <= 30``, Smith squaring iteration above.  ``Acl`` must be stable;
    the result is symmetrized and its defect is checked against
    ``1e-8 * (1 + ||P||)``.
    """
    acl = np.atleast_2d(np.asarray(acl, dtype=float))
    qrhs = np.atleast_2d(np.asarray(qrhs, dtype=float))
    d = acl.shape[0]
    if acl.shape != (d, d) or qrhs.shape != (d, d):
        raise ValueError(f"dimension mismatch: Acl {acl.shape}, Qrhs {qrhs.shape}")
    rho = spectral_radius(acl)
    if rho >= 1.0 - STABILITY_MARGIN:
        raise UnstableError(rho, "dlyap coefficient")

    if d <= _DLYAP_KRON_MAX_DIM:
        at = acl.T
        lhs = np.eye(d * d) - np.kron(at, at)
        p = _unvec(np.linalg.solve(lhs, qrhs.flatten(order="F")), d)
    else:
        p = _dlyap_smith(acl, qrhs)

    p = _sym(p)
    defect = np.linalg.norm(p - acl.T @ p @ acl - qrhs, 2)
    if not np.isfinite(defect) or defect > _DEFECT_TOL * (1.0 + np.linalg.norm(p, 2)):
        raise np.linalg.LinAlgError(f"dlyap defect {defect:.3g} exceeds tolerance")
    return p


def _dlyap_smith(acl: np.ndarray, qrhs: np.ndarray, max_iter: int = 200) -> np.ndarray:
    # Squared-argument accumulation of sum_t (A^t)' Q A^t; doubles the horizon
    # per step, so convergence is quadratic for rho(A) < 1.
    p = qrhs.copy()
    m = acl.copy()
    for _ in range(max_iter):
        update = m.T @ p @ m
        p = p + update
        if np.max(np.abs(update)) <= 1e-16 * (1.0 + np.max(np.abs(p))):
            return p
        m = m @ m
    raise np.linalg.LinAlgError("Smith iteration for dlyap did not converge")


def _dlyap_batch(acls: np.ndarray, qrhs: np.ndarray) -> np.ndarray:
    """Vectorized Kronecker dlyap for a stack of stable coefficients.

    ``acls`` has shape ``(n, d, d)``; ``qrhs`` is broadcast if 2-D.  Callers
    are responsible for masking unstable members beforehand.
    """
    n, d, _ = acls.shape
    at = np.swapaxes(acls, 1, 2)
    lhs = np.eye(d * d) - np.einsum("nij,nkl->nikjl", at, at).reshape(n, d * d, d * d)
    if qrhs.ndim == 2:
        qrhs = np.broadcast_to(qrhs, (n, d, d))
    rhs = np.swapaxes(qrhs, 1, 2).reshape(n, d * d, 1)  # column-major vec
    sol = np.linalg.solve(lhs, rhs).reshape(n, d, d)
    p = np.swapaxes(sol, 1, 2)  # column-major unvec
    return 0.5 * (p + np.swapaxes(p, 1, 2))


def _dare_residual(a, b, q, r, p) -> float:
    s = r + b.T @ p @ b
    step = a.T @ p @ a - a.T @ p @ b @ np.linalg.solve(s, b.T @ p @ a) + q
    return float(np.linalg.norm(p - step, 2))


def _dare_doubling(a, b, q, r) -> np.ndarray | None:
    # Structure-preserving doubling iteration; H_k converges quadratically to
    # the stabilizing solution when (A, B) is stabilizable and (A, Q) detectable.
    ak = a.copy()
    gk = b @ np.linalg.solve(r, b.T)
    hk = q.copy()
    eye = np.eye(a.shape[0])
    for _ in range(_DARE_MAX_ITER):
        try:
            w = eye + gk @ hk
            w_inv_ak = np.linalg.solve(w, ak)
            w_inv_gk = np.linalg.solve(w, gk)
        except np.linalg.LinAlgError:
            return None
        h_next = _sym(hk + ak.T @ hk @ w_inv_ak)
        g_next = _sym(gk + ak @ w_inv_gk @ ak.T)
        a_next = ak @ w_inv_ak
        if not np.all(np.isfinite(h_next)) or np.trace(h_next) > _DARE_OVERFLOW:
            return None
        delta = np.linalg.norm(h_next - hk, 2)
        ak, gk, hk = a_next, g_next, h_next
        if delta <= _DARE_TOL * (1.0 + np.linalg.norm(hk, 2)):
            return hk
    return None


def _dare_fixed_point(a, b, q, r, damping: float = 1.0) -> np.ndarray | None:
    # Damped Riccati value recursion; linear convergence, used only when the
    # doubling iteration fails.
    p = q.copy()
    for _ in range(_DARE_MAX_ITER):
        s = r + b.T @ p @ b
        step = _sym(a.T @ p @ a - a.T @ p @ b @ np.linalg.solve(s, b.T @ p @ a) + q)
        p_next = (1.0 - damping) * p + damping * step
        if not np.all(np.isfinite(p_next)) or np.trace(p_next) > _DARE_OVERFLOW:
            return None
        delta = np.linalg.norm(p_next - p, 2)
        p = p_next
        if delta <= _DARE_TOL * (1.0 + np.linalg.norm(p, 2)):
            return p
    return None


def dare_solve(theta: SystemParams, cm: CostModel) -> RiccatiSolution:
    """Stabilizing solution of ``P = A'PA - A'PB (R + B'PB)^-1 B'PA + Q``.

    Returns the value matrix, the optimal gain
    ``K = -(R + B'PB)^-1 B'PA``, and the operator norm of the equation
    defect.  Stabilizability is detected, not assumed: divergence or
    max-iteration exhaustion raises :class:`NotStabilizableError`.
    """
    a, b = theta.a, theta.b
    q, r = cm.q, cm.r
    if q.shape[0] != theta.dx or r.shape[0] != theta.du:
        raise ValueError(
            f"cost model dims (q {q.shape}, r {r.shape}) do not match system (dx={theta.dx}, du={theta.du})"
        )

    p = _dare_doubling(a, b, q, r)
    if p is None:
        p = _dare_fixed_point(a, b, q, r, damping=0.5)
    if p is None:
        raise NotStabilizableError("Riccati iteration diverged or exhausted its iteration budget")

    p = _sym(p)
    k = -np.linalg.solve(r + b.T @ p @ b, b.T @ p @ a)
    rho = spectral_radius(a + b @ k)
    if rho >= 1.0 - STABILITY_MARGIN:
        raise NotStabilizableError(f"Riccati gain does not stabilize: closed-loop radius {rho:.6g}")
    residual = _dare_residual(a, b, q, r, p)
    p_norm = float(np.linalg.norm(p, 2))
    if residual > _DEFECT_TOL * (1.0 + p_norm):
        raise NotStabilizableError(f"Riccati defect {residual:.3g} exceeds tolerance")
    if _min_eig(p - q) < -_DEFECT_TOL * (1.0 + p_norm):
        raise NotStabilizableError("Riccati solution lost positivity")
    return RiccatiSolution(p=p, k=k, residual=residual)


def state_covariance(gain: Gain, theta: SystemParams, cm: CostModel) -> np.ndarray:
    """Stationary state covariance ``dlyap((A + BK)', Sigma_w)`` under ``u = Kx``."""
    acl = theta.a + theta.b @ gain.k
    return dlyap(acl.T, cm.sigma_w)


def _cost_from_acl(acl: np.ndarray, k: np.ndarray, cm: CostModel) -> float:
    pk = dlyap(acl, cm.q + k.T @ cm.r @ k)
    return float(np.trace(pk @ cm.sigma_w))


def lqr_cost(gain: Gain, theta: SystemParams, cm: CostModel) -> float:
    """Average infinite-horizon cost of ``u = Kx``; ``INFINITE_COST`` if unstable.

    For a stable closed loop the cost is ``trace(P_K Sigma_w)`` with
    ``P_K = dlyap(A + BK, Q + K'RK)``.  Instability is a valid input, not an
    error.
    """
    acl = theta.a + theta.b @ gain.k
    if spectral_radius(acl) >= 1.0 - STABILITY_MARGIN:
        return INFINITE_COST
    return _cost_from_acl(acl, gain.k, cm)


def excess_cost(gain: Gain, theta: SystemParams, cm: CostModel) -> float:
    """Suboptimality gap ``C(K, theta) - C(K(theta), theta)``, clamped at zero.

    Optimality of the Riccati gain makes the true value nonnegative; tiny
    negatives are solver noise and are clamped.
    """
    opt = dare_solve(theta, cm)
    value = lqr_cost(gain, theta, cm)
    if value == INFINITE_COST:
        return INFINITE_COST
    return max(value - float(np.trace(opt.p @ cm.sigma_w)), 0.0)


def performance_difference(gain: Gain, theta: SystemParams, cm: CostModel) -> float:
    """Exact excess-cost identity ``trace((K - K*) Sigma^K (K - K*)' Psi)``.

    ``Sigma^K`` is the state covariance under the *candidate* gain and
    ``Psi = B'P B + R`` at the optimum.  Serves as the independent oracle for
    :func:`excess_cost`.
    """
    opt = dare_solve(theta, cm)
    sigma_k = state_covariance(gain, theta, cm)
    psi = theta.b.T @ opt.p @ theta.b + cm.r
    dk = gain.k - opt.k
    return float(np.trace(dk @ sigma_k @ dk.T @ psi))


def policy_gradient(gain: Gain, theta: SystemParams, cm: CostModel) -> np.ndarray:
    """Closed-form gradient of :func:`lqr_cost` with respect to the gain.

    ``2 ((R + B'P_K B) K + B'P_K A) Sigma^K`` with
    ``P_K = dlyap(A + BK, Q + K'RK)``.  Raises for unstable closed loops.
    """
    a, b, k = theta.a, theta.b, gain.k
    acl = a + b @ k
    rho = spectral_radius(acl)
    if rho >= 1.0 - STABILITY_MARGIN:
        raise UnstableError(rho, "closed loop")
    pk = dlyap(acl, cm.q + k.T @ cm.r @ k)
    sigma_k = dlyap(acl.T, cm.sigma_w)
    return 2.0 * ((cm.r + b.T @ pk @ b) @ k + b.T @ pk @ a) @ sigma_k
