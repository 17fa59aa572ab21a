"""Port-Hamiltonian benchmark systems.

Each system is described by closed-form structure maps ``J(x)``, ``R(x)``,
``B(x)`` and a Hamiltonian ``H(x)`` with its analytic gradient.  All maps
accept a single state of shape ``(n,)`` or a batch of shape ``(..., n)`` and
broadcast over the leading axes.

    xdot = (J(x) - R(x)) grad H(x) + B(x) u
    y    = B(x)^T grad H(x)
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Callable, Mapping

import numpy as np

from .errors import InvalidArgumentError

ArrayFn = Callable[[np.ndarray], np.ndarray]

SYSTEM_NAMES = ("spring", "ball", "motor")


@dataclass(frozen=True)
class SystemSpec:
    """Immutable description of one pH system.

    ``params`` holds the physical constants by their table symbol so they can
    be overridden from config files (see :func:`get_system`).
    """

    name: str
    n: int
    m: int
    params: Mapping[str, float]
    J: ArrayFn = field(repr=False)
    R: ArrayFn = field(repr=False)
    B: ArrayFn = field(repr=False)
    H: ArrayFn = field(repr=False)
    grad_H: ArrayFn = field(repr=False)
    x_min: np.ndarray = field(repr=False)
    x_max: np.ndarray = field(repr=False)
    # RK4 steps per recorded sample; >1 for systems with time constants near dt
    substeps: int = 1

    def with_bounds(self, x_min, x_max) -> "SystemSpec":
        x_min = np.asarray(x_min, dtype=float)
        x_max = np.asarray(x_max, dtype=float)
        if x_min.shape != (self.n,) or x_max.shape != (self.n,):
            raise InvalidArgumentError(f"bounds must have shape ({self.n},)")
        if np.any(x_min > x_max):
            raise InvalidArgumentError("x_min must not exceed x_max")
        return replace(self, x_min=x_min, x_max=x_max)


def _check_state(spec: SystemSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0 or x.shape[-1] != spec.n:
        raise InvalidArgumentError(
            f"{spec.name}: state must have trailing dimension {spec.n}, got shape {x.shape}"
        )
    return x


def _check_input(spec: SystemSpec, u, batch_shape) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.ndim == 0 or u.shape[-1] != spec.m:
        raise InvalidArgumentError(
            f"{spec.name}: input must have trailing dimension {spec.m}, got shape {u.shape}"
        )
    if u.shape[:-1] != batch_shape:
        raise InvalidArgumentError("state and input batch shapes differ")
    return u


def hamiltonian(spec: SystemSpec, x) -> np.ndarray:
    """Stored energy ``H(x)`` (scalar for a single state)."""
    return spec.H(_check_state(spec, x))


def gradient_hamiltonian(spec: SystemSpec, x) -> np.ndarray:
    return spec.grad_H(_check_state(spec, x))


def ph_rhs(spec: SystemSpec, x, u) -> np.ndarray:
    """Vector field ``(J - R) grad H + B u``."""
    x = _check_state(spec, x)
    u = _check_input(spec, u, x.shape[:-1])
    g = spec.grad_H(x)
    JR = spec.J(x) - spec.R(x)
    return np.einsum("...ij,...j->...i", JR, g) + np.einsum("...ij,...j->...i", spec.B(x), u)


def ph_output(spec: SystemSpec, x) -> np.ndarray:
    """Collocated output ``B(x)^T grad H(x)``."""
    x = _check_state(spec, x)
    return np.einsum("...ji,...j->...i", spec.B(x), spec.grad_H(x))


def rhs_and_power(spec: SystemSpec, x: np.ndarray, u: np.ndarray):
    """Vector field and supplied power ``y^T u - grad H^T R grad H`` in one pass.

    No shape checks; this is the integrator's inner loop.
    """
    g = spec.grad_H(x)
    R = spec.R(x)
    B = spec.B(x)
    Rg = np.einsum("...ij,...j->...i", R, g)
    xdot = np.einsum("...ij,...j->...i", spec.J(x), g) - Rg + np.einsum("...ij,...j->...i", B, u)
    y = np.einsum("...ji,...j->...i", B, g)
    power = np.einsum("...i,...i->...", y, u) - np.einsum("...i,...i->...", g, Rg)
    return xdot, power


def dissipation_rate(spec: SystemSpec, x) -> np.ndarray:
    """``grad H^T R grad H``, the power dissipated at state ``x``."""
    x = _check_state(spec, x)
    g = spec.grad_H(x)
    return np.einsum("...i,...ij,...j->...", g, spec.R(x), g)


# ---------------------------------------------------------------------------
# spring: two nonlinearly damped mass-spring systems, x = (q1, p1, q2, p2)

SPRING_PARAMS = {"m1": 1.0, "m2": 1.5, "b1": 2.0, "b2": 2.0, "k1": 1.0, "k2": 0.1}


def _spring(p, x_min, x_max) -> SystemSpec:
    m1, m2, b1, b2, k1, k2 = (p[k] for k in ("m1", "m2", "b1", "b2", "k1", "k2"))
    J_const = np.array(
        [[0.0, 1.0, 0.0, 0.0], [-1.0, 0.0, 1.0, 0.0], [0.0, -1.0, 0.0, 1.0], [0.0, 0.0, -1.0, 0.0]]
    )
    B_const = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])

    def H(x):
        q1, p1, q2, p2 = np.moveaxis(x, -1, 0)
        return 0.5 * k1 * q1**2 + 0.5 * k2 * q2**2 + p1**2 / (2 * m1) + p2**2 / (2 * m2)

    def grad_H(x):
        q1, p1, q2, p2 = np.moveaxis(x, -1, 0)
        return np.stack([k1 * q1, p1 / m1, k2 * q2, p2 / m2], axis=-1)

    def R(x):
        out = np.zeros(x.shape[:-1] + (4, 4))
        out[..., 1, 1] = b1 * x[..., 1] ** 2 / m1**2
        out[..., 3, 3] = b2 * x[..., 3] ** 2 / m2**2
        return out

    return SystemSpec(
        name="spring",
        n=4,
        m=2,
        params=MappingProxyType(dict(p)),
        J=lambda x: np.broadcast_to(J_const, x.shape[:-1] + (4, 4)),
        R=R,
        B=lambda x: np.broadcast_to(B_const, x.shape[:-1] + (4, 2)),
        H=H,
        grad_H=grad_H,
        x_min=x_min,
        x_max=x_max,
    )


# ---------------------------------------------------------------------------
# ball: magnetically levitated iron ball, x = (position, momentum, flux)

BALL_PARAMS = {"m": 0.1, "R": 0.1, "c": 1.0}


def ball_inductance(x1):
    return 1.0 / (0.1 + x1**2)


def _ball(p, x_min, x_max) -> SystemSpec:
    m, Rres, c = p["m"], p["R"], p["c"]
    J_const = np.array([[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    B_const = np.array([[0.0], [0.0], [1.0]])

    # 1 / L(x1) = 0.1 + x1^2, kept in closed form instead of inverting L
    def H(x):
        x1, x2, x3 = np.moveaxis(x, -1, 0)
        return x2**2 / (2 * m) + 0.5 * x3**2 * (0.1 + x1**2)

    def grad_H(x):
        x1, x2, x3 = np.moveaxis(x, -1, 0)
        return np.stack([x1 * x3**2, x2 / m, x3 * (0.1 + x1**2)], axis=-1)

    def R(x):
        out = np.zeros(x.shape[:-1] + (3, 3))
        out[..., 1, 1] = c * np.abs(x[..., 1])
        out[..., 2, 2] = 1.0 / Rres
        return out

    return SystemSpec(
        name="ball",
        n=3,
        m=1,
        params=MappingProxyType(dict(p)),
        J=lambda x: np.broadcast_to(J_const, x.shape[:-1] + (3, 3)),
        R=R,
        B=lambda x: np.broadcast_to(B_const, x.shape[:-1] + (3, 1)),
        H=H,
        grad_H=grad_H,
        x_min=x_min,
        x_max=x_max,
    )


# ---------------------------------------------------------------------------
# motor: permanent magnet synchronous motor, x = (phi_d, phi_q, p)

MOTOR_PARAMS = {"J_m": 0.012, "L": 3.8e-3, "beta": 0.0026, "r": 0.225, "Phi": 0.17}


def _motor(p, x_min, x_max) -> SystemSpec:
    Jm, L, beta, r, Phi = (p[k] for k in ("J_m", "L", "beta", "r", "Phi"))
    R_const = np.diag([r, r, beta])
    B_const = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])

    def H(x):
        pd, pq, mom = np.moveaxis(x, -1, 0)
        return pd**2 / (2 * L) + pq**2 / (2 * L) + mom**2 / (2 * Jm)

    def grad_H(x):
        pd, pq, mom = np.moveaxis(x, -1, 0)
        return np.stack([pd / L, pq / L, mom / Jm], axis=-1)

    def J(x):
        out = np.zeros(x.shape[:-1] + (3, 3))
        pd, pq = x[..., 0], x[..., 1]
        out[..., 0, 2] = pq
        out[..., 2, 0] = -pq
        out[..., 1, 2] = -pd - Phi
        out[..., 2, 1] = pd + Phi
        return out

    return SystemSpec(
        name="motor",
        n=3,
        m=2,
        params=MappingProxyType(dict(p)),
        J=J,
        R=lambda x: np.broadcast_to(R_const, x.shape[:-1] + (3, 3)),
        B=lambda x: np.broadcast_to(B_const, x.shape[:-1] + (3, 2)),
        H=H,
        grad_H=grad_H,
        x_min=x_min,
        x_max=x_max,
        # electrical time constant L / r is below two samples at dt = 0.01
        substeps=4,
    )


_BUILDERS = {
    "spring": (_spring, SPRING_PARAMS, (-1.0, 1.0), 4),
    "ball": (_ball, BALL_PARAMS, (-0.5, 0.5), 3),
    "motor": (_motor, MOTOR_PARAMS, (-0.5, 0.5), 3),
}


def default_bounds(name: str) -> tuple[np.ndarray, np.ndarray]:
    _, _, (lo, hi), n = _BUILDERS[name]
    return np.full(n, lo), np.full(n, hi)


def get_system(name: str, overrides: Mapping[str, float] | None = None, x_min=None, x_max=None) -> SystemSpec:
    """Build a benchmark system by name.

    ``overrides`` replaces physical constants by symbol (e.g. ``{"k2": 0.2}``);
    unknown symbols are rejected.
    """
    if name not in _BUILDERS:
        raise InvalidArgumentError(f"unknown system {name!r}; expected one of {SYSTEM_NAMES}")
    builder, defaults, _, n = _BUILDERS[name]
    params = dict(defaults)
    for key, value in (overrides or {}).items():
        if key not in params:
            raise InvalidArgumentError(f"{name}: unknown parameter {key!r}")
        params[key] = float(value)
    lo, hi = default_bounds(name)
    spec = builder(params, lo, hi)
    if x_min is not None or x_max is not None:
        spec = spec.with_bounds(lo if x_min is None else x_min, hi if x_max is None else x_max)
    return spec


def linear_test_system(n: int = 1, m: int = 1, damping: float = 1.0, input_gain: float = 0.0) -> SystemSpec:
    """``xdot = -damping * x + input_gain * u`` as a pH system with ``H = |x|^2 / 2``.

    With ``input_gain = 0`` this is the analytic test problem ``x(t) = exp(-t) x0``.
    """
    R_const = damping * np.eye(n)
    B_const = input_gain * np.eye(n, m)
    return SystemSpec(
        name="linear",
        n=n,
        m=m,
        params=MappingProxyType({"damping": damping, "input_gain": input_gain}),
        J=lambda x: np.zeros(x.shape[:-1] + (n, n)),
        R=lambda x: np.broadcast_to(R_const, x.shape[:-1] + (n, n)),
        B=lambda x: np.broadcast_to(B_const, x.shape[:-1] + (n, m)),
        H=lambda x: 0.5 * np.sum(x**2, axis=-1),
        grad_H=lambda x: np.array(x, dtype=float, copy=True),
        x_min=np.full(n, -1.0),
        x_max=np.full(n, 1.0),
    )
