"""Trajectory simulation and dataset assembly.

Trajectories are excited by multisine inputs and integrated with classical
RK4.  The input is evaluated as a continuous function at the RK4 stage times.
Every trajectory draws from its own random stream keyed by
``(seed, trajectory index)``, so datasets of different sizes built from the
same seed share their leading rows.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import SystemSpec, dissipation_rate, hamiltonian, ph_output, ph_rhs, rhs_and_power
from .errors import DatasetError, DivergedTrajectoryError, InvalidArgumentError

TRAJECTORY_SECONDS = 10.0
DT = 0.01
POINTS_PER_TRAJECTORY = 1000

DATASET_MAGIC = b"NSLD"
DATASET_VERSION = 1


@dataclass(frozen=True)
class SignalTemplate:
    """Sweep-wide multisine parameters; phases are drawn per trajectory."""

    amplitude: float = 0.5
    base_frequency: float = 0.1
    harmonics: int = 10

    def __post_init__(self):
        if self.amplitude <= 0 or self.base_frequency <= 0 or self.harmonics < 1:
            raise InvalidArgumentError("multisine needs amplitude > 0, base_frequency > 0, harmonics >= 1")

    def draw(self, rng: np.random.Generator) -> "InputSignalSpec":
        phases = rng.uniform(0.0, 2 * np.pi, size=self.harmonics)
        return InputSignalSpec(self.amplitude, self.base_frequency, self.harmonics, phases)


@dataclass(frozen=True)
class InputSignalSpec:
    a: float
    f0: float
    N: int
    phases: np.ndarray = field(repr=False)

    def __post_init__(self):
        phases = np.asarray(self.phases, dtype=float)
        if phases.shape != (self.N,):
            raise InvalidArgumentError(f"expected {self.N} phases, got shape {phases.shape}")
        object.__setattr__(self, "phases", phases)


def multisine(sig: InputSignalSpec, t):
    """``sum_k a sin(2 pi k f0 t + phi_k)``; ``t`` may be a scalar or an array."""
    t = np.asarray(t, dtype=float)
    k = np.arange(1, sig.N + 1)
    arg = 2 * np.pi * sig.f0 * np.multiply.outer(t, k) + sig.phases
    return sig.a * np.sin(arg).sum(axis=-1)


def _input_fn(sigs):
    """Vectorised input over a batch of trajectories.

    ``sigs`` is a nested sequence ``[trajectory][channel]``; the returned
    callable maps a time to an array of shape ``(n_traj, m)``.
    """
    a = np.array([[s.a for s in row] for row in sigs])
    f0 = np.array([[s.f0 for s in row] for row in sigs])
    phases = np.array([[s.phases for s in row] for row in sigs])
    k = np.arange(1, phases.shape[-1] + 1)
    w = 2 * np.pi * f0[..., None] * k

    def u(t):
        return a * np.sin(w * t + phases).sum(axis=-1)

    return u


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    derivs: np.ndarray
    outputs: np.ndarray
    # cumulative supplied energy, integrated by the same RK4 stages as the states
    supplied: np.ndarray | None = None

    def head(self, k: int) -> "Trajectory":
        sup = None if self.supplied is None else self.supplied[:k]
        return Trajectory(self.times[:k], self.states[:k], self.inputs[:k], self.derivs[:k], self.outputs[:k], sup)


def _rk4_batch(spec: SystemSpec, x0: np.ndarray, u_fn, n_pts: int, dt: float):
    """Integrate a batch of initial states.

    Returns states, inputs and cumulative supplied energy at the grid points.
    Between grid points ``spec.substeps`` RK4 steps are taken.
    """
    n_traj = x0.shape[0]
    states = np.empty((n_pts, n_traj, spec.n))
    inputs = np.empty((n_pts, n_traj, spec.m))
    supplied = np.empty((n_pts, n_traj))
    h = dt / spec.substeps
    x = x0.copy()
    z = np.zeros(n_traj)
    with np.errstate(over="ignore", invalid="ignore"):
        _rk4_loop(spec, x, z, u_fn, states, inputs, supplied, dt, h)
    return states, inputs, supplied


def _rk4_loop(spec, x, z, u_fn, states, inputs, supplied, dt, h):
    n_pts = states.shape[0]
    for i in range(n_pts):
        if not np.all(np.isfinite(x)):
            raise DivergedTrajectoryError(i)
        t = i * dt
        states[i] = x
        inputs[i] = u_fn(t)
        supplied[i] = z
        if i == n_pts - 1:
            break
        for s in range(spec.substeps):
            ts = t + s * h
            u0 = u_fn(ts)
            u_mid = u_fn(ts + 0.5 * h)
            k1, p1 = rhs_and_power(spec, x, u0)
            k2, p2 = rhs_and_power(spec, x + 0.5 * h * k1, u_mid)
            k3, p3 = rhs_and_power(spec, x + 0.5 * h * k2, u_mid)
            k4, p4 = rhs_and_power(spec, x + h * k3, u_fn(ts + h))
            x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            z = z + (h / 6.0) * (p1 + 2 * p2 + 2 * p3 + p4)


def _grid_points(horizon: float, dt: float) -> int:
    if horizon <= 0 or dt <= 0:
        raise InvalidArgumentError("horizon and dt must be positive")
    n_pts = int(round(horizon / dt))
    if n_pts < 1:
        raise InvalidArgumentError("horizon shorter than one time step")
    return n_pts


def integrate(spec: SystemSpec, x0, sigs, horizon: float = TRAJECTORY_SECONDS, dt: float = DT) -> Trajectory:
    """Simulate one trajectory, recording ``round(horizon / dt)`` grid points.

    ``sigs`` holds one :class:`InputSignalSpec` per input channel.  Derivatives
    and outputs are the exact vector field evaluated at the recorded states.
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (spec.n,):
        raise InvalidArgumentError(f"x0 must have shape ({spec.n},)")
    if len(sigs) != spec.m:
        raise InvalidArgumentError(f"expected {spec.m} input signals, got {len(sigs)}")
    n_pts = _grid_points(horizon, dt)
    states, inputs, supplied = _rk4_batch(spec, x0[None], _input_fn([list(sigs)]), n_pts, dt)
    states, inputs = states[:, 0], inputs[:, 0]
    return Trajectory(
        times=np.arange(n_pts) * dt,
        states=states,
        inputs=inputs,
        derivs=ph_rhs(spec, states, inputs),
        outputs=ph_output(spec, states),
        supplied=supplied[:, 0],
    )


def sample_initial_state(spec: SystemSpec, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(spec.x_min, spec.x_max)


def trajectory_rng(seed, index: int) -> np.random.Generator:
    """Random stream owned by trajectory ``index`` of the dataset keyed by ``seed``."""
    entropy = list(seed) if isinstance(seed, (tuple, list)) else seed
    return np.random.default_rng(np.random.SeedSequence(entropy, spawn_key=(index,)))


def simulate_trajectories(
    spec: SystemSpec,
    count: int,
    seed,
    template: SignalTemplate = SignalTemplate(),
    horizon: float = TRAJECTORY_SECONDS,
    dt: float = DT,
    start: int = 0,
) -> list[Trajectory]:
    """Simulate trajectories ``start .. start + count - 1`` of the stream ``seed``.

    Each trajectory draws its initial state first, then one phase vector per
    input channel.  The batch is integrated jointly; the result does not
    depend on ``count`` because RK4 acts row-wise.
    """
    n_pts = _grid_points(horizon, dt)
    x0 = np.empty((count, spec.n))
    sigs = []
    for j in range(count):
        rng = trajectory_rng(seed, start + j)
        x0[j] = sample_initial_state(spec, rng)
        sigs.append([template.draw(rng) for _ in range(spec.m)])
    states, inputs, supplied = _rk4_batch(spec, x0, _input_fn(sigs), n_pts, dt)
    times = np.arange(n_pts) * dt
    out = []
    for j in range(count):
        s, u = states[:, j], inputs[:, j]
        out.append(Trajectory(times, s, u, ph_rhs(spec, s, u), ph_output(spec, s), supplied[:, j]))
    return out


@dataclass
class Dataset:
    X: np.ndarray
    U: np.ndarray
    Xdot: np.ndarray
    Y: np.ndarray
    sigma: np.ndarray
    dt: float = DT
    meta: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return self.X.shape[0]

    @property
    def n(self) -> int:
        return self.X.shape[1]

    @property
    def m(self) -> int:
        return self.U.shape[1]

    @property
    def data_seconds(self) -> float:
        return self.K * self.dt

    @classmethod
    def from_arrays(cls, X, U, Xdot, Y, dt: float = DT, meta=None) -> "Dataset":
        X, U, Xdot, Y = (np.ascontiguousarray(a, dtype=float) for a in (X, U, Xdot, Y))
        K = X.shape[0]
        if K < 1 or any(a.shape[0] != K for a in (U, Xdot, Y)):
            raise DatasetError("dataset matrices must share a nonzero row count")
        sigma = Xdot.std(axis=0)
        if not np.all(sigma > 0):
            raise DatasetError(f"degenerate dataset: derivative std {sigma}")
        return cls(X, U, Xdot, Y, sigma, dt, dict(meta or {}))

    def rows(self, idx) -> "Dataset":
        """Row subset sharing this dataset's sigma (used for mini-batches)."""
        return Dataset(self.X[idx], self.U[idx], self.Xdot[idx], self.Y[idx], self.sigma, self.dt, self.meta)


def split_trajectory_count(n_t: float, points: int = POINTS_PER_TRAJECTORY) -> tuple[int, int]:
    """Split ``n_t`` into full trajectories and a row count of the partial one.

    Returns ``(a, b_tilde)`` with ``a = floor(n_t)`` and
    ``b_tilde = floor((n_t - a) * points)``.
    """
    if not n_t > 0:
        raise InvalidArgumentError("n_t must be positive")
    a = int(math.floor(n_t))
    frac = n_t - a
    # guard against 0.35 * 1000 = 349.99999999999994
    b_tilde = int(math.floor(frac * points + 1e-9))
    if a == 0 and b_tilde == 0:
        raise InvalidArgumentError(f"n_t={n_t} yields an empty dataset")
    return a, b_tilde


def build_dataset(
    spec: SystemSpec,
    n_t: float,
    seed,
    template: SignalTemplate = SignalTemplate(),
    horizon: float = TRAJECTORY_SECONDS,
    dt: float = DT,
) -> Dataset:
    """Assemble ``n_t`` (possibly fractional) trajectories into a dataset.

    ``floor(n_t)`` full trajectories are kept plus the first
    ``floor(frac(n_t) * points)`` rows of one more trajectory.
    """
    points = _grid_points(horizon, dt)
    a, b_tilde = split_trajectory_count(n_t, points)
    count = a + (1 if b_tilde > 0 else 0)
    trajs = simulate_trajectories(spec, count, seed, template, horizon, dt)
    if b_tilde > 0:
        trajs[-1] = trajs[-1].head(b_tilde)
    meta = {
        "system": spec.name,
        "params": dict(spec.params),
        "n_t": n_t,
        "seed": list(seed) if isinstance(seed, (tuple, list)) else seed,
        "signal": {"a": template.amplitude, "f0": template.base_frequency, "N": template.harmonics},
        "horizon": horizon,
    }
    return Dataset.from_arrays(
        np.concatenate([t.states for t in trajs]),
        np.concatenate([t.inputs for t in trajs]),
        np.concatenate([t.derivs for t in trajs]),
        np.concatenate([t.outputs for t in trajs]),
        dt=dt,
        meta=meta,
    )


def power_balance_residual(spec: SystemSpec, traj: Trajectory, method: str = "rk4") -> float:
    """``|H(x_end) - H(x_0) - integral of (y^T u - grad H^T R grad H) dt|``.

    ``method="rk4"`` uses the supplied energy integrated alongside the states;
    ``method="trapezoid"`` applies trapezoidal quadrature to the recorded grid.
    """
    dH = hamiltonian(spec, traj.states[-1]) - hamiltonian(spec, traj.states[0])
    if method == "rk4":
        if traj.supplied is None:
            raise InvalidArgumentError("trajectory carries no integrated supply; use method='trapezoid'")
        supplied = traj.supplied[-1] - traj.supplied[0]
    elif method == "trapezoid":
        dt = traj.times[1] - traj.times[0]
        power = np.einsum("ij,ij->i", traj.outputs, traj.inputs) - dissipation_rate(spec, traj.states)
        supplied = dt * (power.sum() - 0.5 * (power[0] + power[-1]))
    else:
        raise InvalidArgumentError(f"unknown quadrature {method!r}")
    return float(abs(dH - supplied))


# ---------------------------------------------------------------------------
# persistence: little-endian binary blob plus a JSON sidecar

_HEADER = struct.Struct("<4sIIIQ")


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def save_dataset(ds: Dataset, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, ds.n, ds.m, ds.K))
        for block in (ds.X, ds.U, ds.Xdot, ds.Y, ds.sigma):
            fh.write(np.ascontiguousarray(block, dtype="<f8").tobytes())
    side = dict(ds.meta, dt=ds.dt, K=ds.K, data_seconds=ds.data_seconds, sigma=ds.sigma.tolist())
    _sidecar(path).write_text(json.dumps(side, indent=2, sort_keys=True))
    return path


def load_dataset(path) -> Dataset:
    path = Path(path)
    raw = path.read_bytes()
    magic, version, n, m, K = _HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC:
        raise DatasetError(f"{path}: not a dataset file")
    if version != DATASET_VERSION:
        raise DatasetError(f"{path}: unsupported version {version}")
    offset = _HEADER.size
    blocks = []
    for shape in ((K, n), (K, m), (K, n), (K, m), (n,)):
        count = int(np.prod(shape))
        blocks.append(np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).astype(float))
        offset += 8 * count
    meta = {}
    side = _sidecar(path)
    if side.exists():
        meta = json.loads(side.read_text())
    dt = meta.pop("dt", DT)
    for key in ("K", "data_seconds", "sigma"):
        meta.pop(key, None)
    X, U, Xdot, Y, sigma = blocks
    return Dataset(X, U, Xdot, Y, sigma, dt, meta)
