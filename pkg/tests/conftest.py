import numpy as np
import pytest

from drlqr.lqr import CostModel, SystemParams, dare_solve, NotStabilizableError
from drlqr.rng import stream


def random_instance(
    rng: np.random.Generator,
    dx_max: int = 5,
    du_max: int = 5,
    q_geq_identity: bool = False,
    rho_max: float = 1.2,
) -> tuple[SystemParams, CostModel]:
    """Random stabilizable instance; resamples until the DARE solves."""
    for _ in range(100):
        dx = int(rng.integers(1, dx_max + 1))
        du = int(rng.integers(1, du_max + 1))
        a = rng.standard_normal((dx, dx))
        radius = np.max(np.abs(np.linalg.eigvals(a)))
        if radius > 0:
            a *= rng.uniform(0.3, rho_max) / radius
        b = rng.standard_normal((dx, du))
        if q_geq_identity:
            w = rng.standard_normal((dx, dx))
            q = np.eye(dx) + 0.5 * (w @ w.T) / dx
            r = np.eye(du)
        else:
            w = rng.standard_normal((dx, dx))
            q = (w @ w.T) / dx + 1e-3 * np.eye(dx)
            w = rng.standard_normal((du, du))
            r = (w @ w.T) / du + 0.1 * np.eye(du)
        theta = SystemParams(a, b)
        cm = CostModel(q, r, np.eye(dx))
        try:
            dare_solve(theta, cm)
        except NotStabilizableError:
            continue
        return theta, cm
    raise RuntimeError("failed to sample a stabilizable instance")


@pytest.fixture
def rng():
    return stream(20240901)
