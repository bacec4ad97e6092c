import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drlqr.lqr import (
    INFINITE_COST,
    CostModel,
    Gain,
    NotStabilizableError,
    SystemParams,
    UnstableError,
    _dlyap_batch,
    dare_solve,
    dlyap,
    excess_cost,
    flatten_params,
    lqr_cost,
    performance_difference,
    policy_gradient,
    spectral_radius,
    state_covariance,
    unflatten_params,
)
from drlqr.rng import stream

from conftest import random_instance


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------

def scalar_dare_oracle(a, b, q, r):
    """Positive root of b^2 p^2 + p (r - a^2 r - q b^2) - q r = 0."""
    ca = b * b
    cb = r - a * a * r - q * b * b
    cc = -q * r
    return (-cb + math.sqrt(cb * cb - 4 * ca * cc)) / (2 * ca)


def dlyap_series_oracle(acl, qrhs, tol=1e-14, max_terms=100000):
    """Truncated power series sum_t (A^t)' Q A^t."""
    p = qrhs.copy()
    m = acl.copy()
    for _ in range(max_terms):
        term = m.T @ qrhs @ m
        p = p + term
        if np.max(np.abs(term)) < tol:
            return p
        m = m @ acl
    raise RuntimeError("series oracle did not converge")


def fd_cost_gradient(gain, theta, cm, h=1e-6):
    """Central finite differences of lqr_cost in each gain entry."""
    g = np.zeros_like(gain.k)
    for i in range(gain.du):
        for j in range(gain.dx):
            kp = gain.k.copy()
            km = gain.k.copy()
            kp[i, j] += h
            km[i, j] -= h
            g[i, j] = (lqr_cost(Gain(kp), theta, cm) - lqr_cost(Gain(km), theta, cm)) / (2 * h)
    return g


# ---------------------------------------------------------------------------
# Flat parameter view
# ---------------------------------------------------------------------------

def test_flatten_column_major_example():
    theta = SystemParams([[1.0, 3.0], [2.0, 4.0]], [[5.0], [6.0]])
    assert np.array_equal(flatten_params(theta), [1, 2, 3, 4, 5, 6])


def test_flatten_of_three_state_benchmark_has_length_18():
    a = np.array([[1.01, 0.01, 0.0], [0.01, 1.01, 0.01], [0.0, 0.01, 1.01]])
    theta = SystemParams(a, np.eye(3))
    assert flatten_params(theta).size == 3 * (3 + 3)


@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_flatten_round_trip(dx, du, seed):
    rng = stream(seed + 1)
    theta = SystemParams(rng.standard_normal((dx, dx)), rng.standard_normal((dx, du)))
    back = unflatten_params(flatten_params(theta), dx, du)
    assert np.array_equal(back.a, theta.a)
    assert np.array_equal(back.b, theta.b)


def test_unflatten_dimension_mismatch():
    with pytest.raises(ValueError):
        unflatten_params(np.zeros(5), 2, 1)


# ---------------------------------------------------------------------------
# Spectral radius
# ---------------------------------------------------------------------------

def test_spectral_radius_examples():
    assert spectral_radius(np.eye(3)) == pytest.approx(1.0)
    assert spectral_radius([[1.05 - 0.0424]]) == pytest.approx(1.0076)
    assert spectral_radius([[1.05 - 0.0424]]) > 1.0
    assert spectral_radius([[0.0, 1.0], [0.0, 0.0]]) == 0.0


def test_spectral_radius_rejects_non_square():
    with pytest.raises(ValueError):
        spectral_radius(np.zeros((2, 3)))


# ---------------------------------------------------------------------------
# dlyap
# ---------------------------------------------------------------------------

def test_dlyap_zero_coefficient_returns_rhs():
    q = np.array([[2.0, 0.5], [0.5, 1.0]])
    assert np.allclose(dlyap(np.zeros((2, 2)), q), q)


def test_dlyap_scalar_geometric_series():
    assert dlyap([[0.9]], [[1.0]])[0, 0] == pytest.approx(1.0 / (1.0 - 0.81), abs=1e-12)


def test_dlyap_matches_series_oracle_on_random_stable_systems():
    rng = stream(7)
    for _ in range(25):
        d = int(rng.integers(1, 6))
        a = rng.standard_normal((d, d))
        a *= rng.uniform(0.2, 0.95) / max(np.max(np.abs(np.linalg.eigvals(a))), 1e-12)
        p = dlyap(a, np.eye(d))
        oracle = dlyap_series_oracle(a, np.eye(d))
        assert np.linalg.norm(p - oracle, 2) <= 1e-8 * (1 + np.linalg.norm(p, 2))
        defect = np.linalg.norm(p - a.T @ p @ a - np.eye(d), 2)
        assert defect <= 1e-10 * (1 + np.linalg.norm(p, 2))


def test_dlyap_unstable_raises_with_radius():
    with pytest.raises(UnstableError) as err:
        dlyap([[1.01]], [[1.0]])
    assert err.value.rho == pytest.approx(1.01)


def test_dlyap_batch_matches_single():
    rng = stream(8)
    acls = []
    for _ in range(6):
        a = rng.standard_normal((3, 3))
        a *= 0.8 / max(np.max(np.abs(np.linalg.eigvals(a))), 1e-12)
        acls.append(a)
    acls = np.array(acls)
    q = np.array([[2.0, 0.1, 0.0], [0.1, 1.0, 0.2], [0.0, 0.2, 3.0]])
    batch = _dlyap_batch(acls, q)
    for i, a in enumerate(acls):
        assert np.allclose(batch[i], dlyap(a, q), atol=1e-10)


# ---------------------------------------------------------------------------
# dare_solve
# ---------------------------------------------------------------------------

def test_dare_one_step_problem():
    theta = SystemParams(np.zeros((3, 3)), np.eye(3))
    sol = dare_solve(theta, CostModel.identity(3, 3))
    assert np.allclose(sol.p, np.eye(3), atol=1e-12)
    assert np.allclose(sol.k, 0.0, atol=1e-12)


def test_dare_scalar_closed_form():
    # Expensive-input scalar instance; oracle is the quadratic formula.
    p_expected = scalar_dare_oracle(1.01, 1.0, 1.0, 1000.0)
    assert p_expected == pytest.approx(43.886, abs=5e-3)
    sol = dare_solve(SystemParams([[1.01]], [[1.0]]), CostModel([[1.0]], [[1000.0]], [[1.0]]))
    assert sol.p[0, 0] == pytest.approx(p_expected, rel=1e-10)
    sol2 = dare_solve(SystemParams([[1.05]], [[1.0]]), CostModel([[1.0]], [[1000.0]], [[1.0]]))
    assert sol2.p[0, 0] == pytest.approx(scalar_dare_oracle(1.05, 1.0, 1.0, 1000.0), rel=1e-10)


def test_dare_worked_scalar_gain():
    sol = dare_solve(SystemParams([[1.01]], [[1.0]]), CostModel([[1.0]], [[1000.0]], [[1.0]]))
    assert sol.k[0, 0] == pytest.approx(-0.0424, abs=5e-4)
    # That gain fails on the true parameter 1.05.
    assert spectral_radius([[1.05 + sol.k[0, 0]]]) > 1.0


def test_dare_residual_and_gradient_stationarity_random():
    rng = stream(9)
    for _ in range(25):
        theta, cm = random_instance(rng)
        sol = dare_solve(theta, cm)
        assert sol.residual <= 1e-8 * (1 + np.linalg.norm(sol.p, 2))
        g = policy_gradient(sol.gain, theta, cm)
        assert np.linalg.norm(g) <= 1e-6 * (1 + np.linalg.norm(sol.k))
        assert spectral_radius(theta.a + theta.b @ sol.k) < 1.0


def test_dare_not_stabilizable():
    theta = SystemParams([[2.0]], [[0.0]])
    with pytest.raises(NotStabilizableError):
        dare_solve(theta, CostModel([[1.0]], [[1.0]], [[1.0]]))


# ---------------------------------------------------------------------------
# Costs, covariance, performance difference, gradient
# ---------------------------------------------------------------------------

def test_state_covariance_examples():
    theta = SystemParams(np.zeros((2, 2)), np.eye(2))
    cm = CostModel.identity(2, 2)
    assert np.allclose(state_covariance(Gain(np.zeros((2, 2))), theta, cm), np.eye(2))
    scalar = SystemParams([[0.5]], [[1.0]])
    cov = state_covariance(Gain([[0.0]]), scalar, CostModel.identity(1, 1))
    assert cov[0, 0] == pytest.approx(4.0 / 3.0, abs=1e-12)


def test_state_covariance_dominates_noise_floor():
    rng = stream(10)
    for _ in range(10):
        theta, cm = random_instance(rng)
        sol = dare_solve(theta, cm)
        cov = state_covariance(sol.gain, theta, cm)
        assert np.linalg.eigvalsh(cov - cm.sigma_w)[0] >= -1e-9


def test_lqr_cost_examples():
    theta = SystemParams(np.zeros((3, 3)), np.eye(3))
    cm = CostModel.identity(3, 3)
    assert lqr_cost(Gain(np.zeros((3, 3))), theta, cm) == pytest.approx(3.0)
    scalar = SystemParams([[0.5]], [[1.0]])
    assert lqr_cost(Gain([[0.0]]), scalar, CostModel.identity(1, 1)) == pytest.approx(4.0 / 3.0)
    # Destabilizing gain has the distinguished infinite cost.
    assert lqr_cost(Gain([[1.0]]), scalar, CostModel.identity(1, 1)) == INFINITE_COST
    assert lqr_cost(Gain([[1.0]]), scalar, CostModel.identity(1, 1)) > 1e300


def test_excess_cost_at_optimum_is_zero():
    rng = stream(11)
    theta, cm = random_instance(rng)
    sol = dare_solve(theta, cm)
    assert excess_cost(sol.gain, theta, cm) <= 1e-8
    assert excess_cost(sol.gain, theta, cm) >= 0.0


def test_excess_cost_unstable_is_infinite():
    scalar = SystemParams([[0.5]], [[1.0]])
    assert excess_cost(Gain([[2.0]]), scalar, CostModel.identity(1, 1)) == INFINITE_COST


def test_excess_cost_matches_performance_difference():
    # The two paths are computed independently: cost difference vs the
    # weighted quadratic identity.
    rng = stream(12)
    for _ in range(100):
        theta, cm = random_instance(rng, dx_max=4, du_max=4)
        sol = dare_solve(theta, cm)
        k = sol.k + 0.05 * rng.standard_normal(sol.k.shape)
        if spectral_radius(theta.a + theta.b @ k) >= 1.0 - 1e-6:
            continue
        gap = excess_cost(Gain(k), theta, cm)
        oracle = performance_difference(Gain(k), theta, cm)
        assert gap == pytest.approx(oracle, rel=1e-8, abs=1e-10)


def test_performance_difference_scalar_case():
    theta = SystemParams([[0.9]], [[1.0]])
    cm = CostModel.identity(1, 1)
    sol = dare_solve(theta, cm)
    k = Gain(sol.k + 0.01)
    assert performance_difference(k, theta, cm) == pytest.approx(
        excess_cost(k, theta, cm), rel=1e-10
    )
    psi = theta.b.T @ sol.p @ theta.b + cm.r
    assert psi[0, 0] >= cm.r[0, 0]


def test_policy_gradient_zero_at_optimum():
    rng = stream(13)
    theta, cm = random_instance(rng)
    sol = dare_solve(theta, cm)
    assert np.linalg.norm(policy_gradient(sol.gain, theta, cm)) <= 1e-8


def test_policy_gradient_scalar_frozen_value():
    # a=0, b=1, q=1, r=1, k=0.1: p_k = 1.01/0.99, sigma = 1/0.99, so the
    # closed form gives 2 (1 + p_k) k sigma = 4000/9801.
    theta = SystemParams([[0.0]], [[1.0]])
    cm = CostModel.identity(1, 1)
    g = policy_gradient(Gain([[0.1]]), theta, cm)
    assert g[0, 0] == pytest.approx(4000.0 / 9801.0, rel=1e-12)
    fd = fd_cost_gradient(Gain([[0.1]]), theta, cm)
    assert g[0, 0] == pytest.approx(fd[0, 0], rel=1e-7)


def test_policy_gradient_matches_finite_differences():
    rng = stream(14)
    checked = 0
    while checked < 40:
        theta, cm = random_instance(rng, dx_max=4, du_max=4)
        sol = dare_solve(theta, cm)
        k = sol.k + 0.02 * rng.standard_normal(sol.k.shape)
        if spectral_radius(theta.a + theta.b @ k) >= 0.98:
            continue
        g = policy_gradient(Gain(k), theta, cm)
        fd = fd_cost_gradient(Gain(k), theta, cm)
        assert np.linalg.norm(g - fd) <= 1e-5 * (1 + np.linalg.norm(fd))
        checked += 1


def test_policy_gradient_unstable_raises():
    scalar = SystemParams([[0.5]], [[1.0]])
    with pytest.raises(UnstableError):
        policy_gradient(Gain([[1.0]]), scalar, CostModel.identity(1, 1))


# ---------------------------------------------------------------------------
# Validation of type invariants
# ---------------------------------------------------------------------------

def test_cost_model_rejects_asymmetric_and_indefinite():
    with pytest.raises(ValueError):
        CostModel([[1.0, 0.5], [0.0, 1.0]], np.eye(2), np.eye(2))
    with pytest.raises(ValueError):
        CostModel(-np.eye(2), np.eye(2), np.eye(2))
    with pytest.raises(ValueError):
        CostModel(np.eye(2), np.zeros((2, 2)), np.eye(2))


def test_system_params_dimension_checks():
    with pytest.raises(ValueError):
        SystemParams(np.zeros((2, 3)), np.zeros((2, 1)))
    with pytest.raises(ValueError):
        SystemParams(np.zeros((2, 2)), np.zeros((3, 1)))
