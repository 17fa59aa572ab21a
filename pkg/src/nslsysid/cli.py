"""Command-line driver: ``nslsysid {generate,train,sweep,fit,plot}``.

Exit codes: 0 ok, 2 usage or config, 3 I/O or numerics, 4 empty selection,
5 fit infeasible.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from .errors import (
    DatasetError,
    DivergedTrajectoryError,
    DomainError,
    EmptySelectionError,
    FitFailureError,
    InsufficientDataError,
    InvalidArgumentError,
    NumericalFailureError,
)
from .dynamics import SYSTEM_NAMES
from .models import ARCHITECTURES

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_EMPTY, EXIT_FIT = 0, 2, 3, 4, 5



def _load_config(path):
    from .outcomes import SweepConfig

    if path is None:
        return SweepConfig.desk()
    try:
        return SweepConfig.from_toml(path)
    except OSError:
        raise
    except Exception as exc:  # TOML syntax errors carry no common base here
        raise InvalidArgumentError(f"cannot parse config {path}: {exc}") from exc


def _registry(args):
    from .outcomes import Registry

    if args.registry:
        return Registry(args.registry)
    return Registry.from_env()


def cmd_generate(args) -> int:
    from .datagen import build_dataset, save_dataset

    cfg = _load_config(args.config)
    ds = build_dataset(cfg.system(args.system), args.traj, args.seed, cfg.signal)
    out = save_dataset(ds, args.out or f"{args.system}_seed{args.seed}.nsld")
    print(f"K={ds.K}")
    print("sigma=" + " ".join(f"{s:.6g}" for s in ds.sigma))
    print(f"wrote {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .datagen import build_dataset
    from .models import NormStats, build_model, save_checkpoint
    from .outcomes import validation_dataset
    from .trainer import TrainConfig, evaluate, train

    cfg = _load_config(args.config)
    spec = cfg.system(args.system)
    data = build_dataset(spec, args.traj, args.seed, cfg.signal)
    rng = np.random.default_rng(args.seed)
    norm = NormStats.from_data(data.X, data.U, data.Xdot, data.Y)
    model = build_model(args.arch, spec.n, spec.m, args.hidden, args.depth, norm, rng)
    model = train(model, data, TrainConfig(n_e=args.epochs, batch_size=cfg.batch_size, lr=cfg.lr, seed=args.seed))
    report = evaluate(model, validation_dataset(cfg, args.system, args.seed), args.epochs, args.traj)
    if args.out:
        save_checkpoint(model, args.out, extra={"system": args.system, **report.to_dict()})
    print(json.dumps(report.to_dict()))
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .outcomes import run_sweep

    cfg = _load_config(args.config)
    reg = _registry(args)

    def progress(i, n, outcome):
        if args.verbose:
            print(f"[{i}/{n}] {outcome.status} {outcome.system} {outcome.arch} n_e={outcome.n_e}", file=sys.stderr)

    summary = run_sweep(cfg, reg, workers=args.workers, progress=progress)
    print(f"{summary.new} new runs ({summary.skipped} already in registry): {summary.ok} ok, {summary.failed} failed")
    return EXIT_OK


def _load_init(path):
    from .nslfit import PiecewiseAffineGuess

    return PiecewiseAffineGuess.from_json(path) if path else None


def cmd_fit(args) -> int:
    from .nslfit import envelope_samples, fit_nsl
    from .outcomes import collect

    pairs = collect(_registry(args), args.resource, args.error, system=args.system, arch=args.arch, seed=args.seed)
    r, e = (np.array(v, dtype=float) for v in zip(*pairs))
    env = envelope_samples(r, e)
    result = fit_nsl(env, args.breaks, _load_init(args.init))
    var = {"compute": "c", "data": "d", "model": "p"}[args.resource]
    print(result.formula(var, digits=2))
    print(f"M={result.margin:.4g}")
    if result.violations:
        print("constraint violations: " + ", ".join(result.violations))
    if args.out:
        result.save(args.out, var=var, resource=args.resource, error=args.error, system=args.system, arch=args.arch)
    if args.csv:
        env.to_csv(args.csv)
    return EXIT_OK


def cmd_plot(args) -> int:
    from .nslfit import FitResult
    from .svgplot import PlotSpec, render_svg, write_svg

    spec = PlotSpec(args.resource, args.error, args.system, args.arch)
    nsl = formula = None
    if args.fit:
        fit = FitResult.load(args.fit)
        nsl = fit.params
        formula = fit.formula({"compute": "c", "data": "d", "model": "p"}[args.resource], digits=2)
    svg = render_svg(_registry(args).records(), spec, envelope=args.envelope, nsl=nsl, formula=formula)
    out = write_svg(args.out or "plot.svg", svg)
    print(f"wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nslsysid", description="Scaling-law experiments for neural system identification.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, registry=False, selection=False):
        sp.add_argument("--config", help="TOML sweep/system config")
        sp.add_argument("--out")
        if registry:
            sp.add_argument("--registry", help="JSON-lines registry (default: $NSL_REGISTRY)")
        if selection:
            sp.add_argument("--resource", choices=["compute", "data", "model"], default="compute")
            sp.add_argument("--error", choices=["nmae", "nmse"], default="nmae")
            sp.add_argument("--system", choices=SYSTEM_NAMES)
            sp.add_argument("--arch", choices=ARCHITECTURES)

    g = sub.add_parser("generate", help="simulate a dataset")
    common(g)
    g.add_argument("--system", choices=SYSTEM_NAMES, required=True)
    g.add_argument("--traj", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train and evaluate one model")
    common(t)
    t.add_argument("--system", choices=SYSTEM_NAMES, required=True)
    t.add_argument("--arch", choices=ARCHITECTURES, default="ph")
    t.add_argument("--traj", type=float, default=1.0)
    t.add_argument("--epochs", type=int, default=64)
    t.add_argument("--hidden", type=int, default=8)
    t.add_argument("--depth", type=int, default=2)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="run a resource sweep into a registry")
    common(s, registry=True)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    f = sub.add_parser("fit", help="fit a broken power law to a registry envelope")
    common(f, registry=True, selection=True)
    f.add_argument("--seed", type=int)
    f.add_argument("--breaks", type=int, default=0)
    f.add_argument("--init", help="JSON piecewise-affine initial guess")
    f.add_argument("--csv", help="write envelope samples as CSV")
    f.set_defaults(func=cmd_fit)

    pl = sub.add_parser("plot", help="log-log scatter plot as SVG")
    common(pl, registry=True, selection=True)
    pl.add_argument("--fit", help="FitResult JSON to overlay")
    pl.add_argument("--envelope", action="store_true")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except EmptySelectionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except (InsufficientDataError, FitFailureError) as exc:
        print(f"error: fit infeasible: {exc}", file=sys.stderr)
        return EXIT_FIT
    except (OSError, DivergedTrajectoryError, NumericalFailureError, DatasetError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except InvalidArgumentError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
