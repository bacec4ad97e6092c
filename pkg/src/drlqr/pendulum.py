"""Torque-controlled pendulum: nonlinear identification and CEM planning.

The plant is a unit pendulum with angle ``psi`` measured from the upright
position, integrated with a semi-implicit Euler step:

    psi_dot' = psi_dot + dt * ((g/l) sin(psi) + tau / (m l^2))
    psi'     = psi + dt * psi_dot'

The applied torque is corrupted by additive Gaussian noise before it reaches
the plant.  Identification fits the physical triple (m, l, g) by
Gauss-Newton on the one-step prediction residual.  Note that the dynamics
depend on the triple only through the two combinations ``g/l`` and
``1/(m l^2)``; those are what the data can pin down, and the fitted triple is
the (deterministic, reproducible) Gauss-Newton limit from a fixed starting
point on the ridge of equivalent triples.

Control is receding-horizon planning with the cross-entropy method: sample
torque sequences, score them on noise-free rollouts of one or more models,
refit the sampling distribution to the elites.  Certainty-equivalent
planning scores on the single fitted model; the randomized variant scores on
several models drawn from a ball around the fit and therefore hedges against
estimation error.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from drlqr.sysid import Dataset, Trajectory

__all__ = [
    "TRUE_PARAMS",
    "IdentifiabilityError",
    "PendulumParams",
    "PendulumState",
    "CemOptions",
    "PendulumFit",
    "pendulum_step",
    "wrap_angle",
    "stage_cost",
    "collect_pendulum_data",
    "identify_pendulum",
    "lumped_constants",
    "sample_models",
    "cem_plan",
    "run_episode",
]


class IdentifiabilityError(RuntimeError):
    """The data do not pin down the dynamics (rank-deficient sensitivity)."""


@dataclass(frozen=True)
class PendulumParams:
    """Physical parameters: mass (kg), pole length (m), gravity (m/s^2)."""

    m: float
    l: float
    g: float

    def __post_init__(self):
        if self.m <= 0 or self.l <= 0 or self.g <= 0:
            raise ValueError(f"parameters must be positive, got ({self.m}, {self.l}, {self.g})")

    def as_array(self) -> np.ndarray:
        return np.array([self.m, self.l, self.g])


TRUE_PARAMS = PendulumParams(1.0, 1.0, 9.81)


@dataclass(frozen=True)
class PendulumState:
    psi: float
    psi_dot: float

    def __post_init__(self):
        if not (math.isfinite(self.psi) and math.isfinite(self.psi_dot)):
            raise ValueError("state must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.psi, self.psi_dot])


@dataclass(frozen=True)
class CemOptions:
    horizon: int = 20
    population: int = 64
    elites: int = 8
    iterations: int = 12
    init_std: float = 1.0
    model_samples: int = 15
    torque_max: float = 3.0

    def __post_init__(self):
        if self.elites > self.population:
            raise ValueError("elites must not exceed the population size")
        if min(self.horizon, self.population, self.elites, self.iterations, self.model_samples) < 1:
            raise ValueError("CemOptions fields must be positive")


@dataclass(frozen=True)
class PendulumFit:
    params: PendulumParams
    residual: float
    iterations: int


def wrap_angle(psi):
    """Wrap to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(psi), 2.0 * np.pi)


def _step_arrays(psi, psi_dot, tau, m, l, g, dt):
    psi_dot_next = psi_dot + dt * ((g / l) * np.sin(psi) + tau / (m * l * l))
    psi_next = psi + dt * psi_dot_next
    return psi_next, psi_dot_next


def pendulum_step(
    state: PendulumState, torque: float, params: PendulumParams, dt: float = 0.05
) -> PendulumState:
    """One semi-implicit Euler step; ``torque`` includes any actuation noise."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    psi, psi_dot = _step_arrays(state.psi, state.psi_dot, torque, params.m, params.l, params.g, dt)
    return PendulumState(float(psi), float(psi_dot))


def _stage_cost_arrays(psi, psi_dot, tau):
    wrapped = wrap_angle(psi)
    in_band = np.abs(wrapped) <= np.pi / 4.0
    quad = wrapped**2 + 0.1 * np.asarray(psi_dot) ** 2 + 2.0 * np.asarray(tau) ** 2
    return np.where(in_band, quad, 50.0)


def stage_cost(state: PendulumState, torque: float) -> float:
    """Upright-keeping cost: quadratic inside +-pi/4, flat 50 outside."""
    return float(_stage_cost_arrays(state.psi, state.psi_dot, torque))


def collect_pendulum_data(
    theta_star: PendulumParams,
    n_traj: int,
    horizon: int,
    rng: np.random.Generator,
    dt: float = 0.05,
    torque_noise: float = 1.0,
) -> Dataset:
    """Excitation rollouts from the downward rest state (psi = pi).

    Commanded torques are N(0, 1); the plant sees the command plus
    N(0, torque_noise^2) actuation noise, which the recorded inputs do not
    include.
    """
    trajs = []
    for stream in rng.spawn(n_traj):
        inputs = stream.standard_normal((horizon, 1))
        noise = torque_noise * stream.standard_normal(horizon)
        states = np.empty((horizon + 1, 2))
        states[0] = (np.pi, 0.0)
        psi, psi_dot = np.pi, 0.0
        for t in range(horizon):
            psi, psi_dot = _step_arrays(
                psi, psi_dot, inputs[t, 0] + noise[t],
                theta_star.m, theta_star.l, theta_star.g, dt,
            )
            states[t + 1] = (psi, psi_dot)
        trajs.append(Trajectory(states=states, inputs=inputs))
    return Dataset(trajectories=tuple(trajs), sigma_u=np.eye(1))


def _residuals(log_params: np.ndarray, ds: Dataset, dt: float) -> np.ndarray:
    m, l, g = np.exp(log_params)
    out = []
    for tr in ds.trajectories:
        psi = tr.states[:-1, 0]
        psi_dot = tr.states[:-1, 1]
        tau = tr.inputs[:, 0]
        pred_psi, pred_psi_dot = _step_arrays(psi, psi_dot, tau, m, l, g, dt)
        out.append(tr.states[1:, 0] - pred_psi)
        out.append(tr.states[1:, 1] - pred_psi_dot)
    return np.concatenate(out)


def identify_pendulum(
    ds: Dataset,
    dt: float = 0.05,
    max_iters: int = 200,
    tol: float = 1e-12,
) -> PendulumFit:
    """Gauss-Newton fit of (m, l, g) to one-step prediction residuals.

    Positivity is enforced by optimizing the log-parameters from the fixed
    start (1.5, 1.5, 5.0); steps are minimum-norm least-squares solutions, so
    the ridge of dynamically equivalent triples is never an obstacle.  Raises
    :class:`IdentifiabilityError` when the residual sensitivity has rank
    below the two lumped constants the dynamics expose, and ``RuntimeError``
    (carrying the last iterate) when the step norm has not converged after
    ``max_iters`` sweeps.
    """
    if sum(tr.horizon for tr in ds.trajectories) < 3:
        raise ValueError("need at least three transitions to fit three parameters")
    phi = np.log(np.array([1.5, 1.5, 5.0]))
    fd = 1e-6
    res = _residuals(phi, ds, dt)
    res_norm = float(np.linalg.norm(res))
    for it in range(max_iters):
        jac = np.empty((res.size, 3))
        for i in range(3):
            e = np.zeros(3)
            e[i] = fd
            jac[:, i] = (_residuals(phi + e, ds, dt) - _residuals(phi - e, ds, dt)) / (2 * fd)
        svals = np.linalg.svd(jac, compute_uv=False)
        rank = int(np.sum(svals > 1e-6 * max(svals[0], 1e-30)))
        if rank < 2:
            raise IdentifiabilityError(
                f"residual sensitivity has rank {rank}; the data do not excite the dynamics"
            )
        # Truncated minimum-norm step: directions with relative sensitivity
        # below 1e-6 are the ridge of dynamically equivalent triples plus
        # noise, and following them only drives the iterate to overflow.
        solved, *_ = np.linalg.lstsq(jac, res, rcond=1e-6)
        delta = -solved
        delta_norm = float(np.linalg.norm(delta))
        if delta_norm > 5.0:
            delta *= 5.0 / delta_norm
        if np.linalg.norm(delta) <= tol * (1.0 + np.linalg.norm(phi)):
            m, l, g = np.exp(phi)
            return PendulumFit(
                params=PendulumParams(float(m), float(l), float(g)),
                residual=res_norm,
                iterations=it + 1,
            )
        # Damped step: backtrack until the residual norm actually decreases;
        # the full Gauss-Newton step routinely overshoots in log-parameters.
        scale = 1.0
        accepted = False
        while scale >= 2.0**-40:
            phi_try = phi + scale * delta
            res_try = _residuals(phi_try, ds, dt)
            norm_try = float(np.linalg.norm(res_try))
            if np.isfinite(norm_try) and norm_try <= res_norm * (1.0 - 1e-4 * scale):
                phi, res, res_norm = phi_try, res_try, norm_try
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            # Stationary for the line search but with a non-tiny step: the
            # quadratic model no longer improves the fit (noise floor).
            m, l, g = np.exp(phi)
            return PendulumFit(
                params=PendulumParams(float(m), float(l), float(g)),
                residual=res_norm,
                iterations=it + 1,
            )
    m, l, g = np.exp(phi)
    raise RuntimeError(
        f"Gauss-Newton did not converge in {max_iters} iterations; "
        f"last iterate (m, l, g) = ({m:.6g}, {l:.6g}, {g:.6g})"
    )


def lumped_constants(params: PendulumParams) -> tuple[float, float]:
    """The two combinations the dynamics actually depend on: (g/l, 1/(m l^2))."""
    return params.g / params.l, 1.0 / (params.m * params.l**2)


def sample_models(
    center: PendulumParams,
    radius: float,
    count: int,
    rng: np.random.Generator,
    max_tries: int = 1000,
) -> list[PendulumParams]:
    """Uniform draws from the solid ball of the given radius in (m, l, g).

    Non-positive draws are rejected and resampled.
    """
    if radius < 0:
        raise ValueError("radius must be nonnegative")
    c = center.as_array()
    out = []
    for _ in range(count):
        for _ in range(max_tries):
            direction = rng.standard_normal(3)
            direction /= np.linalg.norm(direction)
            point = c + radius * rng.uniform() ** (1.0 / 3.0) * direction
            if np.all(point > 0):
                out.append(PendulumParams(*point))
                break
        else:
            raise RuntimeError("could not draw positive parameters; radius too large")
    return out


def _score_sequences(
    actions: np.ndarray,
    state: PendulumState,
    models: list[PendulumParams],
    dt: float,
) -> np.ndarray:
    """Mean noise-free rollout cost of each torque sequence over the models."""
    pop, horizon = actions.shape
    m = np.array([p.m for p in models])
    l = np.array([p.l for p in models])
    g = np.array([p.g for p in models])
    psi = np.full((pop, len(models)), state.psi)
    psi_dot = np.full((pop, len(models)), state.psi_dot)
    total = np.zeros((pop, len(models)))
    for t in range(horizon):
        tau = actions[:, t][:, None]
        total += _stage_cost_arrays(psi, psi_dot, tau)
        psi, psi_dot = _step_arrays(psi, psi_dot, tau, m, l, g, dt)
    return total.mean(axis=1)


def cem_plan(
    state: PendulumState,
    models: list[PendulumParams],
    opts: CemOptions,
    rng: np.random.Generator,
    dt: float = 0.05,
    return_trace: bool = False,
):
    """Cross-entropy search over torque sequences.

    Scores are averaged over the supplied models, so a singleton list is
    certainty-equivalent planning and identical models reproduce it exactly.
    Elites survive into the next iteration's pool, which makes the best elite
    cost non-increasing across iterations.  Returns the final mean sequence
    (and the per-iteration best elite cost when ``return_trace`` is set).
    """
    if not models:
        raise ValueError("cem_plan needs at least one model")
    mean = np.zeros(opts.horizon)
    std = np.full(opts.horizon, opts.init_std)
    elite_actions = None
    elite_costs = None
    trace = []
    for _ in range(opts.iterations):
        draws = rng.standard_normal((opts.population, opts.horizon)) * std + mean
        np.clip(draws, -opts.torque_max, opts.torque_max, out=draws)
        costs = _score_sequences(draws, state, models, dt)
        if elite_actions is not None:
            draws = np.vstack([draws, elite_actions])
            costs = np.concatenate([costs, elite_costs])
        order = np.argsort(costs, kind="stable")[: min(opts.elites, costs.size)]
        elite_actions = draws[order]
        elite_costs = costs[order]
        mean = elite_actions.mean(axis=0)
        std = np.maximum(elite_actions.std(axis=0), 1e-6)
        trace.append(float(elite_costs[0]))
    if return_trace:
        return mean, trace
    return mean


def run_episode(
    method: str,
    theta_star: PendulumParams,
    theta_hat: PendulumParams,
    radius: float,
    episode_len: int,
    opts: CemOptions,
    rng: np.random.Generator,
    dt: float = 0.05,
    log_path: str | Path | None = None,
) -> float:
    """Receding-horizon control episode from the upright state.

    Each step plans with the cross-entropy method, applies the first planned
    torque corrupted by N(0, 1) actuation noise, and re-plans.  ``method``
    "ce" plans on the fitted model alone; "dr" plans on ``opts.model_samples``
    models drawn once per episode from the ball of the given radius around
    the fit.  Returns the accumulated stage cost of the commanded torques.
    """
    if method not in ("ce", "dr"):
        raise ValueError(f"unknown method {method!r}")
    if episode_len < 1:
        raise ValueError("episode length must be positive")
    model_rng, noise_rng, plan_root = rng.spawn(3)
    if method == "dr":
        models = sample_models(theta_hat, radius, opts.model_samples, model_rng)
    else:
        models = [theta_hat]
    plan_streams = plan_root.spawn(episode_len)
    state = PendulumState(0.0, 0.0)
    total = 0.0
    rows = []
    for t in range(episode_len):
        plan = cem_plan(state, models, opts, plan_streams[t], dt=dt)
        tau = float(np.clip(plan[0], -opts.torque_max, opts.torque_max))
        cost = stage_cost(state, tau)
        total += cost
        rows.append((t, state.psi, state.psi_dot, tau, cost))
        noise = float(noise_rng.standard_normal())
        state = pendulum_step(state, tau + noise, theta_star, dt)
    if log_path is not None:
        with Path(log_path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "psi", "psi_dot", "tau", "cost"])
            for row in rows:
                writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
    return total
