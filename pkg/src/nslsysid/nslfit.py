"""Broken power-law scaling laws fitted to the lower envelope of outcomes.

    L(r) = alpha + beta * r**delta0 * prod_i [1 + (r / sigma_i)**(1 / phi_i)]**(delta_i * phi_i)

The envelope of a set of ``(resource, error)`` outcomes is the running
minimum of the error over increasing resource.  It is sampled on a
log-equidistant grid and the law is fitted by minimising the mean squared
log-residual (the *margin*) with Adam over log-space parameters.
"""
from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import DomainError, FitFailureError, InsufficientDataError, InvalidArgumentError

log = logging.getLogger(__name__)

PHI_MIN = 0.2
DEFAULT_GRID_SIZE = 100
DEFAULT_ITERATIONS = 5000
DEFAULT_LR = 0.02


# ---------------------------------------------------------------------------
# envelope and grid


def _sorted_outcomes(r, e):
    r = np.asarray(r, dtype=float).ravel()
    e = np.asarray(e, dtype=float).ravel()
    if r.shape != e.shape or r.size == 0:
        raise InvalidArgumentError("resources and errors must be nonempty and of equal length")
    order = np.argsort(r, kind="stable")
    return r[order], e[order]


def lower_envelope(r_points, e_points, r):
    """Smallest error among outcomes whose resource does not exceed ``r``.

    ``r_points`` need not be sorted.  ``r`` may be a scalar or an array; every
    query must lie at or above the smallest resource.
    """
    rs, es = _sorted_outcomes(r_points, e_points)
    prefix_min = np.minimum.accumulate(es)
    q = np.asarray(r, dtype=float)
    if np.any(q < rs[0]):
        raise DomainError(f"envelope undefined below the smallest resource {rs[0]}")
    idx = np.searchsorted(rs, q, side="right") - 1
    out = prefix_min[idx]
    return float(out) if out.ndim == 0 else out


def interpolation_grid(r_first: float, r_last: float, K: int = DEFAULT_GRID_SIZE) -> np.ndarray:
    """``K + 1`` points ``r_first**(1 - k/K) * r_last**(k/K)``, equidistant in log."""
    if K < 1:
        raise InvalidArgumentError("K must be >= 1")
    if not (0 < r_first < r_last):
        raise InvalidArgumentError(f"need 0 < r_first < r_last, got {r_first}, {r_last}")
    k = np.arange(K + 1) / K
    grid = r_first ** (1 - k) * r_last**k
    grid[0], grid[-1] = r_first, r_last
    return grid


@dataclass
class EnvelopeSamples:
    r_tilde: np.ndarray
    e_tilde: np.ndarray
    r_points: np.ndarray | None = field(default=None, repr=False)
    e_points: np.ndarray | None = field(default=None, repr=False)

    @property
    def K(self) -> int:
        return len(self.r_tilde) - 1

    def to_csv(self, path) -> Path:
        path = Path(path)
        lines = ["k,r_tilde,e_tilde"] + [f"{k},{float(r)!r},{float(e)!r}" for k, (r, e) in enumerate(zip(self.r_tilde, self.e_tilde))]
        path.write_text("\n".join(lines) + "\n")
        return path


def envelope_samples(r_points, e_points, K: int = DEFAULT_GRID_SIZE) -> EnvelopeSamples:
    """Sample the lower envelope on the log grid spanning the observed resources.

    The grid starts at the smallest observed resource.
    """
    rs, es = _sorted_outcomes(r_points, e_points)
    grid = interpolation_grid(rs[0], rs[-1], K)
    return EnvelopeSamples(grid, lower_envelope(rs, es, grid), rs, es)


# ---------------------------------------------------------------------------
# the broken law


@dataclass
class NSLParams:
    """Parameters in the representation the fitter optimises.

    ``log_alpha = -inf`` encodes ``alpha = 0``.  ``phi`` is stored raw and
    capped at :data:`PHI_MIN` on every evaluation.
    """

    log_beta: float
    delta0: float
    log_sigma: np.ndarray = field(default_factory=lambda: np.zeros(0))
    phi: np.ndarray = field(default_factory=lambda: np.zeros(0))
    delta: np.ndarray = field(default_factory=lambda: np.zeros(0))
    log_alpha: float = -math.inf

    def __post_init__(self):
        self.log_sigma = np.atleast_1d(np.asarray(self.log_sigma, dtype=float))
        self.phi = np.atleast_1d(np.asarray(self.phi, dtype=float))
        self.delta = np.atleast_1d(np.asarray(self.delta, dtype=float))
        if not (self.log_sigma.shape == self.phi.shape == self.delta.shape):
            raise InvalidArgumentError("per-break arrays must have equal length")

    @property
    def b(self) -> int:
        return len(self.delta)

    @property
    def alpha(self) -> float:
        return math.exp(self.log_alpha)

    @property
    def beta(self) -> float:
        return math.exp(self.log_beta)

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)

    @property
    def phi_eff(self) -> np.ndarray:
        return np.maximum(self.phi, PHI_MIN)

    @classmethod
    def from_natural(cls, alpha, beta, delta0, breaks=()) -> "NSLParams":
        """Build from ``alpha, beta, delta0`` and ``(sigma, phi, delta)`` triples."""
        breaks = list(breaks)
        return cls(
            log_beta=math.log(beta),
            delta0=delta0,
            log_sigma=[math.log(s) for s, _, _ in breaks],
            phi=[p for _, p, _ in breaks],
            delta=[d for _, _, d in breaks],
            log_alpha=math.log(alpha) if alpha > 0 else -math.inf,
        )

    def constraint_violations(self) -> list[str]:
        out = []
        if self.delta0 > 0:
            out.append(f"delta0={self.delta0:.3g} > 0")
        for i, d in enumerate(self.delta, start=1):
            if d > 0:
                out.append(f"delta_{i}={d:.3g} > 0")
        return out

    def to_dict(self) -> dict:
        return {
            "b": self.b,
            "alpha": self.alpha,
            "log_alpha": None if math.isinf(self.log_alpha) else self.log_alpha,
            "log_beta": self.log_beta,
            "beta": self.beta,
            "delta0": self.delta0,
            "log_sigma": self.log_sigma.tolist(),
            "sigma": self.sigma.tolist(),
            "phi": self.phi.tolist(),
            "delta": self.delta.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "NSLParams":
        la = d.get("log_alpha")
        return cls(d["log_beta"], d["delta0"], d["log_sigma"], d["phi"], d["delta"], -math.inf if la is None else la)


def _log_power_part(params: NSLParams, log_r):
    phi = params.phi_eff
    z = (log_r[..., None] - params.log_sigma) / phi
    return params.log_beta + params.delta0 * log_r + np.sum(params.delta * phi * np.logaddexp(0.0, z), axis=-1)


def eval_nsl(params: NSLParams, r):
    """Evaluate the law; computed in log space so large ``r`` cannot overflow."""
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0):
        raise DomainError("scaling law is defined for r > 0 only")
    out = np.exp(np.logaddexp(params.log_alpha, _log_power_part(params, np.log(r))))
    return float(out) if out.ndim == 0 else out


def margin(params: NSLParams, env: EnvelopeSamples) -> float:
    """Mean squared log-residual over grid points ``k = 1..K`` (the first point is excluded)."""
    e_hat = eval_nsl(params, env.r_tilde[1:])
    e_tilde = env.e_tilde[1:]
    if np.any(e_hat <= 0) or np.any(e_tilde <= 0):
        raise DomainError("margin needs positive law values and envelope values")
    return float(np.mean((np.log(e_hat) - np.log(e_tilde)) ** 2))


# ---------------------------------------------------------------------------
# initial guess: segmented least squares in log-log coordinates


@dataclass
class PiecewiseAffineGuess:
    """Continuous-or-not polyline in ``(log r, log e)``.

    Segment ``i`` has slope ``slopes[i]``; segment ``i + 1`` starts at
    ``log_breaks[i]``.  ``intercept`` is the first segment's value at
    ``log r = 0``.  ``alpha > 0`` requests a fitted additive plateau.
    """

    slopes: np.ndarray
    log_breaks: np.ndarray
    intercept: float
    alpha: float = 0.0

    def __post_init__(self):
        self.slopes = np.atleast_1d(np.asarray(self.slopes, dtype=float))
        self.log_breaks = np.atleast_1d(np.asarray(self.log_breaks, dtype=float))
        if len(self.slopes) != len(self.log_breaks) + 1:
            raise InvalidArgumentError("need exactly one more slope than breaks")

    @property
    def b(self) -> int:
        return len(self.log_breaks)

    @classmethod
    def from_vertices(cls, vertices, alpha: float = 0.0) -> "PiecewiseAffineGuess":
        """Polyline through ``(r, e)`` vertices, breaking at the interior ones."""
        v = np.asarray(vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or len(v) < 2:
            raise InvalidArgumentError("vertices must be a list of at least two (r, e) pairs")
        if np.any(v <= 0):
            raise InvalidArgumentError("vertices must be positive")
        lr, le = np.log(v[:, 0]), np.log(v[:, 1])
        if np.any(np.diff(lr) <= 0):
            raise InvalidArgumentError("vertex resources must increase")
        slopes = np.diff(le) / np.diff(lr)
        return cls(slopes, lr[1:-1], le[0] - slopes[0] * lr[0], alpha)

    @classmethod
    def from_json(cls, path) -> "PiecewiseAffineGuess":
        d = json.loads(Path(path).read_text())
        if "vertices" in d:
            return cls.from_vertices(d["vertices"], d.get("alpha", 0.0))
        return cls(d["slopes"], np.log(np.asarray(d["breaks"], dtype=float)), d["intercept"], d.get("alpha", 0.0))

    def to_dict(self) -> dict:
        return {
            "slopes": self.slopes.tolist(),
            "breaks": np.exp(self.log_breaks).tolist(),
            "intercept": self.intercept,
            "alpha": self.alpha,
        }

    def to_params(self, log_r0: float = 0.0) -> NSLParams:
        """Translate slopes into exponents and breakpoints into ``sigma``.

        ``delta0`` is clipped to be nonpositive; ``log_beta`` is then chosen so
        the law matches the first segment at ``log_r0``.
        """
        delta0 = min(self.slopes[0], 0.0)
        y0 = self.intercept + self.slopes[0] * log_r0
        return NSLParams(
            log_beta=y0 - delta0 * log_r0,
            delta0=delta0,
            log_sigma=self.log_breaks.copy(),
            phi=np.full(self.b, PHI_MIN),
            delta=np.diff(self.slopes),
            log_alpha=math.log(self.alpha) if self.alpha > 0 else -math.inf,
        )


def _segment_costs(t, y):
    """SSE and line coefficients of least-squares fits over every index range ``[i, j]``."""
    def csum(a):
        return np.concatenate([[0.0], np.cumsum(a)])

    St, Sy, Stt, Sty, Syy = csum(t), csum(y), csum(t * t), csum(t * y), csum(y * y)
    n = len(t)
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    cnt = (j - i + 1).astype(float)
    with np.errstate(divide="ignore", invalid="ignore"):
        st = St[j + 1] - St[i]
        sy = Sy[j + 1] - Sy[i]
        ctt = Stt[j + 1] - Stt[i] - st * st / cnt
        cty = Sty[j + 1] - Sty[i] - st * sy / cnt
        cyy = Syy[j + 1] - Syy[i] - sy * sy / cnt
        slope = cty / ctt
        sse = np.maximum(cyy - slope * cty, 0.0)
        intercept = (sy - slope * st) / cnt
    invalid = j <= i
    sse[invalid] = np.inf
    return sse, slope, intercept


def auto_init(env: EnvelopeSamples, b: int) -> PiecewiseAffineGuess:
    """Segmented least squares with ``b + 1`` segments on the log-log envelope.

    Segments are fitted independently and share their boundary grid point,
    so a polyline whose kinks sit on grid points is recovered exactly.
    """
    if b < 0:
        raise InvalidArgumentError("b must be >= 0")
    t = np.log(env.r_tilde)
    if np.any(env.e_tilde <= 0):
        raise DomainError("envelope must be positive for a log-log fit")
    y = np.log(env.e_tilde)
    n = len(t)
    if n < 2 * (b + 1):
        raise InsufficientDataError(f"{n} grid points cannot support {b} breaks")
    sse, slope, intercept = _segment_costs(t, y)
    # best[s, j]: cost of s + 1 segments covering points 0..j
    best = np.full((b + 1, n), np.inf)
    arg = np.zeros((b + 1, n), dtype=int)
    best[0] = sse[0]
    for s in range(1, b + 1):
        total = best[s - 1][:, None] + sse
        arg[s] = np.argmin(total, axis=0)
        best[s] = total[arg[s], np.arange(n)]
    bounds = [n - 1]
    for s in range(b, 0, -1):
        bounds.append(arg[s, bounds[-1]])
    bounds.append(0)
    bounds = bounds[::-1]
    slopes = np.array([slope[bounds[s], bounds[s + 1]] for s in range(b + 1)])
    return PiecewiseAffineGuess(
        slopes=slopes,
        log_breaks=t[np.array(bounds[1:-1], dtype=int)],
        intercept=float(intercept[bounds[0], bounds[1]]),
    )


# ---------------------------------------------------------------------------
# gradient-based fit


def _pack(params: NSLParams, fit_alpha: bool) -> np.ndarray:
    head = [params.log_alpha] if fit_alpha else []
    body = np.column_stack([params.log_sigma, params.phi, params.delta]).ravel()
    return np.concatenate([head, [params.log_beta, params.delta0], body])


def _unpack(vec, b: int, fit_alpha: bool) -> NSLParams:
    vec = np.asarray(vec, dtype=float)
    log_alpha = vec[0] if fit_alpha else -math.inf
    rest = vec[1:] if fit_alpha else vec
    per = rest[2:].reshape(b, 3)
    return NSLParams(float(rest[0]), float(rest[1]), per[:, 0], per[:, 1], per[:, 2], float(log_alpha))


def _torch_log_law(vec: torch.Tensor, log_r: torch.Tensor, b: int, fit_alpha: bool) -> torch.Tensor:
    rest = vec[1:] if fit_alpha else vec
    out = rest[0] + rest[1] * log_r
    if b:
        per = rest[2:].reshape(b, 3)
        phi = torch.clamp(per[:, 1], min=PHI_MIN)
        z = (log_r[:, None] - per[:, 0]) / phi
        out = out + (per[:, 2] * phi * torch.nn.functional.softplus(z, beta=1.0, threshold=50.0)).sum(dim=1)
    if fit_alpha:
        out = torch.logaddexp(vec[0], out)
    return out


def _torch_margin(vec, log_r, log_e, b, fit_alpha):
    return torch.mean((_torch_log_law(vec, log_r, b, fit_alpha) - log_e) ** 2)


def margin_and_grad(params: NSLParams, env: EnvelopeSamples, fit_alpha: bool | None = None):
    """Margin and its reverse-mode gradient with respect to the packed parameters.

    Packing order: ``[log_alpha]`` (only when fitted), ``log_beta``,
    ``delta0``, then ``(log_sigma_i, phi_i, delta_i)`` per break.
    """
    if fit_alpha is None:
        fit_alpha = not math.isinf(params.log_alpha)
    vec = torch.tensor(_pack(params, fit_alpha), requires_grad=True)
    log_r = torch.from_numpy(np.log(env.r_tilde[1:]))
    log_e = torch.from_numpy(np.log(env.e_tilde[1:]))
    m = _torch_margin(vec, log_r, log_e, params.b, fit_alpha)
    m.backward()
    return float(m.detach()), vec.grad.numpy().copy()


@dataclass
class FitResult:
    params: NSLParams
    margin: float
    iterations: int
    init: PiecewiseAffineGuess | None
    history: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))
    violations: list[str] = field(default_factory=list)

    def formula(self, var: str = "r", digits: int | None = None) -> str:
        return format_formula(self.params, var, digits)

    def to_dict(self, var: str = "r") -> dict:
        return {
            "params": self.params.to_dict(),
            "margin": self.margin,
            "iterations": self.iterations,
            "init": None if self.init is None else self.init.to_dict(),
            "violations": self.violations,
            "formula": self.formula(var),
            "formula_compact": self.formula(var, digits=2),
        }

    def save(self, path, **extra) -> Path:
        path = Path(path)
        d = self.to_dict(extra.pop("var", "r"))
        d.update(extra)
        path.write_text(json.dumps(d, indent=2))
        return path

    @classmethod
    def load(cls, path) -> "FitResult":
        d = json.loads(Path(path).read_text())
        init = None
        if d.get("init"):
            i = d["init"]
            init = PiecewiseAffineGuess(i["slopes"], np.log(np.asarray(i["breaks"], dtype=float)), i["intercept"], i["alpha"])
        return cls(NSLParams.from_dict(d["params"]), d["margin"], d["iterations"], init, violations=d.get("violations", []))


def envelope_levels(env: EnvelopeSamples) -> int:
    """Number of distinct error values the sampled envelope takes."""
    return len(np.unique(env.e_tilde))


def fit_nsl(
    env: EnvelopeSamples,
    b: int,
    init: PiecewiseAffineGuess | NSLParams | None = None,
    n_iter: int = DEFAULT_ITERATIONS,
    lr: float = DEFAULT_LR,
) -> FitResult:
    """Fit a law with ``b`` breaks by Adam on the margin, returning the best iterate.

    ``init`` defaults to :func:`auto_init`.  The additive constant is fitted
    only when the initial guess carries a positive ``alpha``.
    """
    levels = envelope_levels(env)
    if levels < 2 * (b + 1):
        raise InsufficientDataError(f"envelope has {levels} distinct levels, too few for {b} breaks")
    guess = None
    if init is None:
        init = auto_init(env, b)
    if isinstance(init, PiecewiseAffineGuess):
        guess = init
        start = init.to_params(log_r0=float(np.log(env.r_tilde[0])))
    else:
        start = init
    if start.b != b:
        raise InvalidArgumentError(f"initial guess has {start.b} breaks, expected {b}")
    fit_alpha = not math.isinf(start.log_alpha)
    if np.any(env.e_tilde <= 0):
        raise DomainError("envelope must be positive")

    log_r = torch.from_numpy(np.log(env.r_tilde[1:]))
    log_e = torch.from_numpy(np.log(env.e_tilde[1:]))
    vec = torch.tensor(_pack(start, fit_alpha), requires_grad=True)
    opt = torch.optim.Adam([vec], lr=lr)

    best_m = math.inf
    best_vec = vec.detach().clone()
    history = np.empty(n_iter + 1)
    last_finite = best_vec
    for it in range(n_iter + 1):
        m = _torch_margin(vec, log_r, log_e, b, fit_alpha)
        value = float(m.detach())
        if not math.isfinite(value):
            raise FitFailureError(f"margin became non-finite at iteration {it}", _unpack(last_finite.numpy(), b, fit_alpha))
        last_finite = vec.detach().clone()
        if value < best_m:
            best_m = value
            best_vec = last_finite
        history[it] = best_m
        if it == n_iter:
            break
        opt.zero_grad(set_to_none=True)
        m.backward()
        opt.step()

    params = _unpack(best_vec.numpy(), b, fit_alpha)
    violations = params.constraint_violations()
    if violations:
        log.info("fitted law violates sign constraints: %s", ", ".join(violations))
    return FitResult(params, margin(params, env), n_iter, guess, history, violations)


# ---------------------------------------------------------------------------
# formula strings


def _num(v: float, digits: int | None) -> str:
    return repr(float(v)) if digits is None else f"{v:.{digits}g}"


def format_formula(params: NSLParams, var: str = "r", digits: int | None = None) -> str:
    """Human-readable law, e.g. ``L(c) = 0.74 c^{-0.039} [1 + (c/1200000.0)^{1/0.2}]^{-1.1*0.2}``.

    With ``digits=None`` every number round-trips exactly through
    :func:`parse_formula`.
    """
    head = f"L({var}) = "
    if not math.isinf(params.log_alpha):
        head += f"{_num(params.alpha, digits)} + "
    s = head + f"{_num(params.beta, digits)} {var}^{{{_num(params.delta0, digits)}}}"
    for sig, phi, d in zip(params.sigma, params.phi_eff, params.delta):
        p = _num(phi, digits)
        s += f" [1 + ({var}/{_num(sig, digits)})^{{1/{p}}}]^{{{_num(d, digits)}*{p}}}"
    return s


_NUM = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
_HEAD = re.compile(rf"^L\((\w+)\) = (?:({_NUM}) \+ )?({_NUM}) (\w+)\^\{{({_NUM})\}}")
_BREAK = re.compile(rf" \[1 \+ \((\w+)/({_NUM})\)\^\{{1/({_NUM})\}}\]\^\{{({_NUM})\*({_NUM})\}}")


def parse_formula(text: str) -> NSLParams:
    """Inverse of :func:`format_formula`."""
    text = text.strip()
    m = _HEAD.match(text)
    if not m:
        raise InvalidArgumentError(f"cannot parse formula head: {text!r}")
    alpha = float(m.group(2)) if m.group(2) is not None else 0.0
    beta, delta0 = float(m.group(3)), float(m.group(5))
    rest = text[m.end():]
    breaks = []
    pos = 0
    while pos < len(rest):
        bm = _BREAK.match(rest, pos)
        if not bm:
            raise InvalidArgumentError(f"cannot parse formula tail: {rest[pos:]!r}")
        breaks.append((float(bm.group(2)), float(bm.group(3)), float(bm.group(4))))
        pos = bm.end()
    return NSLParams.from_natural(alpha, beta, delta0, breaks)
