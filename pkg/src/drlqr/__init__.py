"""Data-driven LQR synthesis benchmark.

Library + CLI for comparing certainty-equivalent, domain-randomized, and
scenario robust controller synthesis on identified linear systems, with a
nonlinear pendulum extension.
"""

from drlqr.lqr import (
    INFINITE_COST,
    CostModel,
    Gain,
    NotStabilizableError,
    RiccatiSolution,
    SystemParams,
    UnstableError,
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

__version__ = "0.1.0"
