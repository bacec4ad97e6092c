"""Data generation, least-squares identification, and uncertainty quantification.

Experiments excite the system with i.i.d. Gaussian inputs from a zero initial
state, fit ``[A B]`` by least squares, estimate the Fisher information of the
experiment, and build the high-confidence ellipsoid

    G = { theta : (theta - theta_hat)' (N FI_hat) (theta - theta_hat)
                   <= 16 (d_theta + log(2/delta)) }

used by the robust and domain-randomized synthesis paths.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from drlqr.lqr import CostModel, SystemParams, flatten_params, unflatten_params

__all__ = [
    "RankDeficientError",
    "SingularFisherError",
    "InvalidDeltaError",
    "Trajectory",
    "Dataset",
    "FisherEstimate",
    "ConfidenceEllipsoid",
    "simulate",
    "collect_dataset",
    "least_squares",
    "fisher_estimate",
    "confidence_ellipsoid",
    "sample_uniform",
    "save_dataset_csv",
    "load_dataset_csv",
    "save_dataset_bin",
    "load_dataset_bin",
]

_COND_LIMIT = 1e12
_BIN_MAGIC = b"DRLQRDSET\x00\x00\x00"  # 12 bytes; 4-byte version follows


class RankDeficientError(ValueError):
    """The regressor Gram matrix is (numerically) rank deficient."""

    def __init__(self, rank: int, needed: int, cond: float):
        self.rank = rank
        self.needed = needed
        super().__init__(
            f"regressor rank {rank} < {needed} (condition number {cond:.3g} exceeds {_COND_LIMIT:g})"
        )


class SingularFisherError(ValueError):
    """The Fisher estimate is not positive definite."""


class InvalidDeltaError(ValueError):
    """Confidence level outside (0, 1)."""


@dataclass(frozen=True)
class Trajectory:
    """One rollout: ``states`` is ``(T+1) x dx``, ``inputs`` is ``T x du``."""

    states: np.ndarray
    inputs: np.ndarray

    def __post_init__(self):
        states = np.atleast_2d(np.asarray(self.states, dtype=float))
        inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        if states.shape[0] != inputs.shape[0] + 1:
            raise ValueError(
                f"states must have one more row than inputs, got {states.shape[0]} vs {inputs.shape[0]}"
            )
        if not (np.all(np.isfinite(states)) and np.all(np.isfinite(inputs))):
            raise ValueError("trajectory contains non-finite entries")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "inputs", inputs)

    @property
    def horizon(self) -> int:
        return self.inputs.shape[0]


@dataclass(frozen=True)
class Dataset:
    """N trajectories of equal length from one system."""

    trajectories: tuple[Trajectory, ...]
    sigma_u: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        trajs = tuple(self.trajectories)
        if not trajs:
            raise ValueError("dataset needs at least one trajectory")
        t0 = trajs[0]
        for tr in trajs[1:]:
            if tr.states.shape != t0.states.shape or tr.inputs.shape != t0.inputs.shape:
                raise ValueError("all trajectories must share T, dx, du")
        object.__setattr__(self, "trajectories", trajs)
        object.__setattr__(self, "sigma_u", np.atleast_2d(np.asarray(self.sigma_u, dtype=float)))

    @property
    def n(self) -> int:
        return len(self.trajectories)

    @property
    def horizon(self) -> int:
        return self.trajectories[0].horizon

    @property
    def dx(self) -> int:
        return self.trajectories[0].states.shape[1]

    @property
    def du(self) -> int:
        return self.trajectories[0].inputs.shape[1]


@dataclass(frozen=True)
class FisherEstimate:
    """Per-trajectory average Fisher information, ``G_hat (x) Sigma_w^-1``."""

    matrix: np.ndarray
    stderr: float | None = field(default=None, compare=False)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class ConfidenceEllipsoid:
    """High-confidence set ``{theta : (theta-center)' S (theta-center) <= rho2}``.

    ``gamma`` satisfies ``gamma @ gamma.T = rho2 * inv(S)`` so that the set is
    also ``{center + gamma w : |w| <= 1}``; it is the symmetric PSD square
    root, which makes it unique and reproducible.
    """

    center: np.ndarray
    shape: np.ndarray
    rho2: float
    gamma: np.ndarray
    dx: int
    du: int

    def contains(self, theta_flat: np.ndarray, rtol: float = 1e-10) -> bool:
        d = np.asarray(theta_flat, dtype=float).ravel() - self.center
        return float(d @ self.shape @ d) <= self.rho2 * (1.0 + rtol)

    def center_params(self) -> SystemParams:
        return unflatten_params(self.center, self.dx, self.du)


def simulate(
    theta_star: SystemParams,
    cm: CostModel,
    horizon: int,
    sigma_u: np.ndarray,
    rng: np.random.Generator,
) -> Trajectory:
    """Roll out ``x' = A x + B u + w`` from ``x_1 = 0``.

    Inputs are ``u_t ~ N(0, Sigma_u)`` and noise ``w_t ~ N(0, Sigma_w)``,
    both i.i.d.; the trajectory is a deterministic function of the stream.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    dx, du = theta_star.dx, theta_star.du
    sigma_u = np.atleast_2d(np.asarray(sigma_u, dtype=float))
    # Half-precision-free square roots once per call; PSD inputs allowed.
    lu = _psd_sqrt(sigma_u)
    lw = _psd_sqrt(cm.sigma_w)
    inputs = rng.standard_normal((horizon, du)) @ lu.T
    noise = rng.standard_normal((horizon, dx)) @ lw.T
    states = np.zeros((horizon + 1, dx))
    for t in range(horizon):
        states[t + 1] = theta_star.a @ states[t] + theta_star.b @ inputs[t] + noise[t]
    return Trajectory(states=states, inputs=inputs)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    if vals[0] < -1e-10 * max(1.0, vals[-1]):
        raise ValueError("covariance must be positive semidefinite")
    return vecs @ np.diag(np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def collect_dataset(
    theta_star: SystemParams,
    cm: CostModel,
    n: int,
    horizon: int,
    sigma_u: np.ndarray,
    rng: np.random.Generator,
) -> Dataset:
    """Run ``n`` independent experiments with split per-trajectory sub-streams."""
    if n < 1:
        raise ValueError("need at least one trajectory")
    streams = rng.spawn(n)
    trajs = tuple(simulate(theta_star, cm, horizon, sigma_u, s) for s in streams)
    return Dataset(trajectories=trajs, sigma_u=np.atleast_2d(np.asarray(sigma_u, dtype=float)))


def _regressors(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    # Stacked rows z_t = (x_t; u_t), targets y_t = x_{t+1}.
    zs = []
    ys = []
    for tr in ds.trajectories:
        zs.append(np.hstack([tr.states[:-1], tr.inputs]))
        ys.append(tr.states[1:])
    return np.vstack(zs), np.vstack(ys)


def least_squares(ds: Dataset) -> SystemParams:
    """Least-squares fit of ``[A B]`` from all transitions in the dataset.

    Solved via QR on the stacked regressor for conditioning (never via the
    normal equations).  Rejects condition numbers above 1e12 with
    :class:`RankDeficientError` naming the deficient rank.
    """
    z, y = _regressors(ds)
    needed = z.shape[1]
    svals = np.linalg.svd(z, compute_uv=False)
    rank = int(np.sum(svals > svals[0] / _COND_LIMIT)) if svals.size and svals[0] > 0 else 0
    if z.shape[0] < needed or rank < needed:
        cond = float(svals[0] / svals[-1]) if svals.size and svals[-1] > 0 else np.inf
        raise RankDeficientError(rank, needed, cond)
    qm, rm = np.linalg.qr(z)
    w = np.linalg.solve(rm, qm.T @ y)  # (dx+du) x dx
    ab = w.T
    return SystemParams(ab[:, : ds.dx], ab[:, ds.dx:])


def fisher_estimate(ds: Dataset, cm: CostModel) -> FisherEstimate:
    """Per-trajectory average ``(1/N) sum_t z_t z_t' (x) Sigma_w^-1``."""
    z, _ = _regressors(ds)
    gram = (z.T @ z) / ds.n
    sw_inv = np.linalg.inv(cm.sigma_w)
    m = np.kron(0.5 * (gram + gram.T), 0.5 * (sw_inv + sw_inv.T))
    return FisherEstimate(matrix=0.5 * (m + m.T))


def confidence_ellipsoid(
    theta_hat: SystemParams | np.ndarray,
    fi_hat: FisherEstimate,
    n: int,
    delta: float,
    dx: int | None = None,
    du: int | None = None,
) -> ConfidenceEllipsoid:
    """Ellipsoid ``S = N FI_hat``, ``rho2 = 16 (d_theta + log(2/delta))``."""
    if not 0.0 < delta < 1.0:
        raise InvalidDeltaError(f"delta must lie in (0, 1), got {delta}")
    if isinstance(theta_hat, SystemParams):
        center = flatten_params(theta_hat)
        dx, du = theta_hat.dx, theta_hat.du
    else:
        center = np.asarray(theta_hat, dtype=float).ravel()
        if dx is None or du is None:
            raise ValueError("dx and du are required when the center is a flat vector")
    d_theta = center.size
    if fi_hat.dim != d_theta:
        raise ValueError(f"Fisher dimension {fi_hat.dim} does not match d_theta {d_theta}")
    vals, vecs = np.linalg.eigh(fi_hat.matrix)
    if vals[0] <= 1e-12 * max(1.0, vals[-1]):
        raise SingularFisherError("Fisher estimate is singular; cannot build an ellipsoid")
    shape = n * fi_hat.matrix
    rho2 = 16.0 * (d_theta + np.log(2.0 / delta))
    # Symmetric PSD square root of rho2 * S^-1 via the same eigenbasis.
    gamma = vecs @ np.diag(np.sqrt(rho2 / (n * vals))) @ vecs.T
    return ConfidenceEllipsoid(
        center=center, shape=0.5 * (shape + shape.T), rho2=float(rho2), gamma=gamma, dx=dx, du=du
    )


def sample_uniform(
    ellipsoid: ConfidenceEllipsoid, count: int, rng: np.random.Generator
) -> list[SystemParams]:
    """Uniform draws from the solid ellipsoid via ``center + gamma w``.

    ``w`` is uniform on the unit ball: direction uniform on the sphere,
    radius ``u^(1/d)`` with ``u`` uniform on [0, 1].
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    d = ellipsoid.center.size
    out = []
    for _ in range(count):
        direction = rng.standard_normal(d)
        direction /= np.linalg.norm(direction)
        radius = rng.uniform() ** (1.0 / d)
        flat = ellipsoid.center + ellipsoid.gamma @ (radius * direction)
        out.append(unflatten_params(flat, ellipsoid.dx, ellipsoid.du))
    return out


# ---------------------------------------------------------------------------
# Dataset import/export.
#
# CSV: header (traj, t, x_0..x_{dx-1}, u_0..u_{du-1}); one row per time index
# t = 1..T+1 with 1-based trajectory ids; the final state row of each
# trajectory leaves the input cells empty.
#
# Binary: 16-byte header (12-byte magic + uint32 version), then
# uint32 (n, T, dx, du), int64 seed (-1 when unknown), Sigma_u as float64
# row-major, then per trajectory the states and inputs as float64 row-major.
# All integers and floats are little-endian.
# ---------------------------------------------------------------------------


def save_dataset_csv(ds: Dataset, path: str | Path) -> None:
    path = Path(path)
    header = ["traj", "t"] + [f"x_{i}" for i in range(ds.dx)] + [f"u_{i}" for i in range(ds.du)]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for idx, tr in enumerate(ds.trajectories, start=1):
            for t in range(tr.horizon):
                writer.writerow(
                    [idx, t + 1]
                    + [repr(float(v)) for v in tr.states[t]]
                    + [repr(float(v)) for v in tr.inputs[t]]
                )
            writer.writerow(
                [idx, tr.horizon + 1] + [repr(float(v)) for v in tr.states[-1]] + [""] * ds.du
            )


def load_dataset_csv(path: str | Path, sigma_u: np.ndarray | None = None) -> Dataset:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        dx = sum(1 for h in header if h.startswith("x_"))
        du = sum(1 for h in header if h.startswith("u_"))
        rows: dict[int, list[tuple[int, list[str]]]] = {}
        for row in reader:
            rows.setdefault(int(row[0]), []).append((int(row[1]), row[2:]))
    trajs = []
    for idx in sorted(rows):
        entries = sorted(rows[idx])
        states = np.array([[float(v) for v in vals[:dx]] for _, vals in entries])
        inputs = np.array([[float(v) for v in vals[dx:]] for _, vals in entries[:-1]])
        trajs.append(Trajectory(states=states, inputs=inputs.reshape(len(entries) - 1, du)))
    if sigma_u is None:
        sigma_u = np.eye(du)
    return Dataset(trajectories=tuple(trajs), sigma_u=sigma_u)


def save_dataset_bin(ds: Dataset, path: str | Path) -> None:
    path = Path(path)
    seed = -1 if ds.seed is None else int(ds.seed)
    with path.open("wb") as fh:
        fh.write(_BIN_MAGIC)
        fh.write(struct.pack("<I", 1))
        fh.write(struct.pack("<4I", ds.n, ds.horizon, ds.dx, ds.du))
        fh.write(struct.pack("<q", seed))
        fh.write(ds.sigma_u.astype("<f8").tobytes())
        for tr in ds.trajectories:
            fh.write(tr.states.astype("<f8").tobytes())
            fh.write(tr.inputs.astype("<f8").tobytes())


def load_dataset_bin(path: str | Path) -> Dataset:
    path = Path(path)
    with path.open("rb") as fh:
        magic = fh.read(12)
        if magic != _BIN_MAGIC:
            raise ValueError(f"{path}: not a dataset container (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != 1:
            raise ValueError(f"{path}: unsupported container version {version}")
        n, horizon, dx, du = struct.unpack("<4I", fh.read(16))
        (seed,) = struct.unpack("<q", fh.read(8))
        sigma_u = np.frombuffer(fh.read(8 * du * du), dtype="<f8").reshape(du, du).copy()
        trajs = []
        for _ in range(n):
            states = np.frombuffer(fh.read(8 * (horizon + 1) * dx), dtype="<f8")
            inputs = np.frombuffer(fh.read(8 * horizon * du), dtype="<f8")
            trajs.append(
                Trajectory(
                    states=states.reshape(horizon + 1, dx).copy(),
                    inputs=inputs.reshape(horizon, du).copy(),
                )
            )
    return Dataset(trajectories=tuple(trajs), sigma_u=sigma_u, seed=None if seed < 0 else seed)
