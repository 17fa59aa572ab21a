"""Randomised resource sweeps and the append-only outcome registry.

The sweep walks ``architecture x system x seed x epochs x data slot x hidden
slot x depth slot``.  Inside every slot the actual data amount, hidden width
and depth are drawn at random.  Each run derives all of its randomness from a
hash of its identifiers, so results do not depend on scheduling or on which
other runs are in the sweep.
"""
from __future__ import annotations

import hashlib
import json
import math
import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np

from .datagen import DT, TRAJECTORY_SECONDS, Dataset, SignalTemplate, build_dataset
from .dynamics import SYSTEM_NAMES, SystemSpec, get_system
from .errors import EmptySelectionError, InvalidArgumentError, NSLError
from .models import ARCHITECTURES, NormStats, build_model
from .trainer import TrainConfig, evaluate, train

SCHEMA_VERSION = 1
REGISTRY_ENV = "NSL_REGISTRY"

RESOURCE_FIELDS = {"compute": "c", "data": "d", "model": "p"}
ERROR_FIELDS = ("nmae", "nmse")

_TRAIN_STREAM = 0x545241
_VAL_STREAM = 0x56414C


def _pow2_grid(lo_exp: int, hi_exp: int) -> list[int]:
    return [2**k for k in range(lo_exp, hi_exp + 1)]


@dataclass
class SweepConfig:
    systems: list[str] = field(default_factory=lambda: list(SYSTEM_NAMES))
    architectures: list[str] = field(default_factory=lambda: list(ARCHITECTURES))
    seeds: list[int] = field(default_factory=lambda: list(range(7)))
    epoch_grid: list[int] = field(default_factory=lambda: _pow2_grid(1, 14))
    data_grid: list[int] = field(default_factory=lambda: _pow2_grid(1, 9))
    hidden_grid: list[int] = field(default_factory=lambda: [2, 4, 8, 16])
    depth_grid: list[int] = field(default_factory=lambda: [2, 4])
    # desk-scale caps applied on top of the grids
    max_epochs: int | None = None
    max_data: int | None = None
    max_hidden: int | None = None
    max_depth: int | None = None
    signal: SignalTemplate = field(default_factory=SignalTemplate)
    n_val_trajectories: int = 10
    lr: float = 1e-3
    batch_size: int = 256
    system_params: dict[str, dict[str, float]] = field(default_factory=dict)
    system_bounds: dict[str, dict[str, list[float]]] = field(default_factory=dict)

    def __post_init__(self):
        for name in self.systems:
            if name not in SYSTEM_NAMES:
                raise InvalidArgumentError(f"unknown system {name!r}")
        for arch in self.architectures:
            if arch not in ARCHITECTURES:
                raise InvalidArgumentError(f"unknown architecture {arch!r}")
        if len(set(self.seeds)) != len(self.seeds):
            raise InvalidArgumentError("seeds must be distinct")
        for name in ("systems", "architectures", "seeds"):
            if not getattr(self, name):
                raise InvalidArgumentError(f"{name} must be nonempty")
        for name in ("epoch_grid", "data_grid", "hidden_grid", "depth_grid"):
            if not self.grid(name):
                raise InvalidArgumentError(f"{name} is empty after applying caps")
        for name in ("data_grid", "hidden_grid", "depth_grid"):
            if min(getattr(self, name)) < 2:
                raise InvalidArgumentError(f"{name} values must be >= 2")

    def grid(self, name: str) -> list[int]:
        cap = {
            "epoch_grid": self.max_epochs,
            "data_grid": self.max_data,
            "hidden_grid": self.max_hidden,
            "depth_grid": self.max_depth,
        }[name]
        values = sorted(int(v) for v in getattr(self, name))
        return [v for v in values if cap is None or v <= cap]

    @classmethod
    def desk(cls, **overrides) -> "SweepConfig":
        """Scaled-down grid that finishes on a workstation."""
        base = dict(
            seeds=[0, 1],
            epoch_grid=_pow2_grid(1, 8),
            data_grid=_pow2_grid(1, 5),
            hidden_grid=[2, 4, 8],
            depth_grid=[2],
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "SweepConfig":
        d = dict(d)
        preset = d.pop("preset", None)
        sig = d.pop("signal", None)
        if sig is not None:
            d["signal"] = SignalTemplate(
                amplitude=sig.get("a", SignalTemplate.amplitude),
                base_frequency=sig.get("f0", SignalTemplate.base_frequency),
                harmonics=sig.get("N", SignalTemplate.harmonics),
            )
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InvalidArgumentError(f"unknown sweep config keys: {sorted(unknown)}")
        if preset == "desk":
            return cls.desk(**d)
        if preset not in (None, "full"):
            raise InvalidArgumentError(f"unknown preset {preset!r}")
        return cls(**d)

    @classmethod
    def from_toml(cls, path) -> "SweepConfig":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        with open(path, "rb") as fh:
            return cls.from_dict(tomllib.load(fh))

    def system(self, name: str) -> SystemSpec:
        bounds = self.system_bounds.get(name, {})
        return get_system(name, self.system_params.get(name), bounds.get("x_min"), bounds.get("x_max"))

    def fingerprint(self, system: str) -> dict:
        """Settings that change a run's result besides its identifiers."""
        spec = self.system(system)
        return {
            "params": dict(spec.params),
            "x_min": spec.x_min.tolist(),
            "x_max": spec.x_max.tolist(),
            "signal": [self.signal.amplitude, self.signal.base_frequency, self.signal.harmonics],
            "n_val": self.n_val_trajectories,
            "lr": self.lr,
            "batch_size": self.batch_size,
        }

    def n_runs(self) -> int:
        per = math.prod(len(self.grid(g)) for g in ("epoch_grid", "data_grid", "hidden_grid", "depth_grid"))
        return per * len(self.systems) * len(self.architectures) * len(self.seeds)


@dataclass(frozen=True)
class RunDraw:
    d: float
    n_t: float
    n_h: int
    n_d: int


def sample_run_config(d_tilde: int, nh_tilde: int, nd_tilde: int, rng: np.random.Generator) -> RunDraw:
    """Draw data seconds in ``[d~/2, d~]`` and integer width/depth in ``[ceil(x~/2), x~]``."""
    if min(d_tilde, nh_tilde, nd_tilde) < 2:
        raise InvalidArgumentError("grid values must be >= 2")
    d = float(rng.uniform(d_tilde / 2, d_tilde))
    n_h = int(rng.integers(math.ceil(nh_tilde / 2), nh_tilde + 1))
    n_d = int(rng.integers(math.ceil(nd_tilde / 2), nd_tilde + 1))
    return RunDraw(d=d, n_t=d / TRAJECTORY_SECONDS, n_h=n_h, n_d=n_d)


@dataclass(frozen=True)
class RunTask:
    system: str
    arch: str
    seed: int
    n_e: int
    d_tilde: int
    nh_tilde: int
    nd_tilde: int
    fingerprint: str

    @property
    def key(self) -> str:
        ident = [self.system, self.arch, self.seed, self.n_e, self.d_tilde, self.nh_tilde, self.nd_tilde, self.fingerprint]
        return hashlib.sha256(json.dumps(ident).encode()).hexdigest()[:24]

    def entropy(self) -> list[int]:
        k = int(self.key, 16)
        return [_TRAIN_STREAM, k & 0xFFFFFFFF, (k >> 32) & 0xFFFFFFFF, (k >> 64) & 0xFFFFFFFF]


@dataclass
class Outcome:
    key: str
    status: str
    system: str
    arch: str
    seed: int
    n_e: int
    d_tilde: int
    nh_tilde: int
    nd_tilde: int
    d: float | None = None
    n_t: float | None = None
    n_h: int | None = None
    n_d: int | None = None
    K: int | None = None
    p: int | None = None
    c: float | None = None
    nmae: float | None = None
    nmse: float | None = None
    sigma_source: str = "validation"
    error: str | None = None
    v: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Outcome":
        if d.get("v") != SCHEMA_VERSION:
            raise InvalidArgumentError(f"unsupported registry schema version {d.get('v')!r}")
        return cls(**{k: d.get(k) for k in cls.__dataclass_fields__ if k in d})

    def resource(self, name: str) -> float:
        return getattr(self, RESOURCE_FIELDS[name])


# ---------------------------------------------------------------------------
# running


def validation_dataset(cfg: SweepConfig, system: str, seed: int) -> Dataset:
    sys_id = SYSTEM_NAMES.index(system)
    return build_dataset(cfg.system(system), cfg.n_val_trajectories, (_VAL_STREAM, seed, sys_id), cfg.signal)


_VAL_CACHE: dict = {}


def _cached_validation(cfg: SweepConfig, system: str, seed: int) -> Dataset:
    key = (system, seed, json.dumps(cfg.fingerprint(system), sort_keys=True))
    if key not in _VAL_CACHE:
        if len(_VAL_CACHE) > 16:
            _VAL_CACHE.clear()
        _VAL_CACHE[key] = validation_dataset(cfg, system, seed)
    return _VAL_CACHE[key]


def execute_run(cfg: SweepConfig, task: RunTask, val: Dataset | None = None) -> Outcome:
    """Sample, simulate, train and evaluate one configuration."""
    import torch

    torch.set_num_threads(1)
    entropy = task.entropy()
    draw = sample_run_config(task.d_tilde, task.nh_tilde, task.nd_tilde, np.random.default_rng(entropy + [0]))
    base = dict(
        key=task.key, system=task.system, arch=task.arch, seed=task.seed, n_e=task.n_e,
        d_tilde=task.d_tilde, nh_tilde=task.nh_tilde, nd_tilde=task.nd_tilde,
        d=draw.d, n_t=draw.n_t, n_h=draw.n_h, n_d=draw.n_d,
    )
    try:
        if val is None:
            val = _cached_validation(cfg, task.system, task.seed)
        spec = cfg.system(task.system)
        data = build_dataset(spec, draw.n_t, tuple(entropy + [1]), cfg.signal)
        norm = NormStats.from_data(data.X, data.U, data.Xdot, data.Y)
        model = build_model(task.arch, spec.n, spec.m, draw.n_h, draw.n_d, norm, np.random.default_rng(entropy + [2]))
        tcfg = TrainConfig(n_e=task.n_e, batch_size=cfg.batch_size, lr=cfg.lr, seed=entropy + [3])
        trained = train(model, data, tcfg)
        report = evaluate(trained, val, task.n_e, draw.n_t)
        if not (math.isfinite(report.nmae) and math.isfinite(report.nmse)):
            raise NSLError("non-finite validation error")
    except NSLError as exc:
        return Outcome(status="failed", error=f"{type(exc).__name__}: {exc}", **base)
    return Outcome(
        status="ok", K=data.K, p=report.param_count, c=report.compute_flops,
        nmae=report.nmae, nmse=report.nmse, **base,
    )


def plan_sweep(cfg: SweepConfig) -> list[RunTask]:
    tasks = []
    for arch in cfg.architectures:
        for system in cfg.systems:
            fp = json.dumps(cfg.fingerprint(system), sort_keys=True)
            for seed in cfg.seeds:
                for n_e in cfg.grid("epoch_grid"):
                    for d_tilde in cfg.grid("data_grid"):
                        for nh in cfg.grid("hidden_grid"):
                            for nd in cfg.grid("depth_grid"):
                                tasks.append(RunTask(system, arch, seed, n_e, d_tilde, nh, nd, fp))
    return tasks


class Registry:
    """JSON-lines file of :class:`Outcome` records; only ever appended to."""

    def __init__(self, path):
        self.path = Path(path)

    @classmethod
    def from_env(cls, default=None) -> "Registry":
        path = os.environ.get(REGISTRY_ENV, default)
        if path is None:
            raise InvalidArgumentError(f"no registry given and {REGISTRY_ENV} is unset")
        return cls(path)

    def __iter__(self) -> Iterator[Outcome]:
        if not self.path.exists():
            return
        with open(self.path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    yield Outcome.from_dict(json.loads(line))

    def records(self) -> list[Outcome]:
        return list(self)

    def keys(self) -> set[str]:
        return {o.key for o in self}

    def append(self, outcome: Outcome) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a") as fh:
            fh.write(json.dumps(outcome.to_dict(), sort_keys=True) + "\n")
            fh.flush()


@dataclass
class SweepSummary:
    planned: int
    skipped: int
    new: int
    ok: int
    failed: int

    @property
    def failure_fraction(self) -> float:
        return self.failed / self.new if self.new else 0.0


def _pool_run(args):
    cfg, task = args
    return execute_run(cfg, task)


def run_sweep(
    cfg: SweepConfig,
    registry: Registry,
    workers: int = 1,
    progress: Callable[[int, int, Outcome], None] | None = None,
) -> SweepSummary:
    """Execute every planned run not yet present in ``registry``.

    Results are appended by this process only, in completion order.
    """
    tasks = plan_sweep(cfg)
    done = registry.keys()
    todo = [t for t in tasks if t.key not in done]
    ok = failed = 0

    def record(i, outcome):
        nonlocal ok, failed
        registry.append(outcome)
        if outcome.status == "ok":
            ok += 1
        else:
            failed += 1
        if progress is not None:
            progress(i, len(todo), outcome)

    if workers <= 1 or len(todo) <= 1:
        for i, task in enumerate(todo, start=1):
            record(i, execute_run(cfg, task))
    else:
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            futures = [pool.submit(_pool_run, (cfg, t)) for t in todo]
            for i, fut in enumerate(as_completed(futures), start=1):
                record(i, fut.result())
    return SweepSummary(len(tasks), len(tasks) - len(todo), len(todo), ok, failed)


# ---------------------------------------------------------------------------
# selection


def filter_outcomes(records: Iterable[Outcome], **filters) -> list[Outcome]:
    """Keep ``ok`` records matching every non-None ``field=value`` filter."""
    active = {k: v for k, v in filters.items() if v is not None}
    return [o for o in records if o.status == "ok" and all(getattr(o, k) == v for k, v in active.items())]


def collect(records: Iterable[Outcome], resource: str, error: str, **filters) -> list[tuple[float, float]]:
    """``(resource, error)`` pairs of matching ok records, sorted by resource (stable)."""
    if resource not in RESOURCE_FIELDS:
        raise InvalidArgumentError(f"resource must be one of {sorted(RESOURCE_FIELDS)}")
    if error not in ERROR_FIELDS:
        raise InvalidArgumentError(f"error must be one of {ERROR_FIELDS}")
    chosen = filter_outcomes(records, **filters)
    if not chosen:
        raise EmptySelectionError(f"no ok outcomes match {filters}")
    pairs = [(float(o.resource(resource)), float(getattr(o, error))) for o in chosen]
    return sorted(pairs, key=lambda pe: pe[0])
