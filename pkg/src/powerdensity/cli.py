"""Command line entry point: ``powerdensity <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiment as ex
from .diagnostics import diagnose, residual_manifest
from .elliptic import coercivity_probe, estimate_PW_norm
from .field_grid import Grid, ScalarField, export_csv, save_field
from .forward import DataBundle, check_positivity, corrupt, perturb, solve_conductivity
from .phantoms import make_phantom
from .report import _jsonable

logger = logging.getLogger(__name__)

# flag -> config key; flags left unset keep the config file (or default) value
FLAG_KEYS = {
    "phantom": "phantom", "grid": "grid", "alpha": "alpha", "method": "method",
    "illuminations": "illuminations", "t_method": "t_method", "seed": "seed",
    "noise_level": "noise_level", "smooth_radius": "smooth_radius", "seed_error": "seed_error",
    "elliptic_tol": "elliptic_tol", "elliptic_max_iter": "elliptic_max_iter",
    "grids": "grids", "noise_levels": "noise_levels", "seed_errors": "seed_errors", "output": "output",
}


def _float_list(s: str) -> list[float]:
    return [float(v) for v in s.split(",") if v.strip()]


def _int_list(s: str) -> list[int]:
    return [int(v) for v in s.split(",") if v.strip()]


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON experiment configuration")
    p.add_argument("--phantom")
    p.add_argument("--grid", type=int, help="cells per side")
    p.add_argument("--alpha", type=float)
    p.add_argument("--method", choices=ex.METHODS)
    p.add_argument("--illuminations", choices=ex.ILLUMINATIONS)
    p.add_argument("--t-method", dest="t_method", choices=ex.T_METHODS)
    p.add_argument("--seed", type=int)
    p.add_argument("--noise-level", dest="noise_level", type=float)
    p.add_argument("--smooth-radius", dest="smooth_radius", type=float)
    p.add_argument("--seed-error", dest="seed_error", type=float)
    p.add_argument("--elliptic-tol", dest="elliptic_tol", type=float)
    p.add_argument("--elliptic-max-iter", dest="elliptic_max_iter", type=int)
    p.add_argument("--output", help="output directory")
    p.add_argument("--emit-gnuplot", action="store_true", help="write gnuplot scripts next to CSV files")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="powerdensity",
                                     description="Conductivity reconstruction from power density data.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [("phantom", "write a phantom conductivity"),
                        ("forward", "solve the conductivity equation for each illumination"),
                        ("synthesize", "write a power density bundle"),
                        ("reconstruct", "reconstruct sigma and report errors"),
                        ("diagnose", "residuals of the compatibility conditions"),
                        ("converge", "grid refinement study"),
                        ("stability", "noise stability sweep")]:
        p = sub.add_parser(name, help=help_)
        _common(p)
        if name in ("reconstruct", "diagnose"):
            p.add_argument("--data", type=Path, help="load a saved bundle instead of synthesizing")
        if name == "diagnose":
            p.add_argument("--corrupt", type=float, default=0.0,
                           help="multiply H_11 by (1 + amount x2) before diagnosing")
            p.add_argument("--coarse", action="store_true",
                           help="also run at half resolution and report observed orders")
        if name == "converge":
            p.add_argument("--grids", type=_int_list, help="comma separated cell counts")
            p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
        if name == "stability":
            p.add_argument("--noise-levels", dest="noise_levels", type=_float_list)
            p.add_argument("--seed-errors", dest="seed_errors", type=_float_list)
    return parser


def config_from_args(args: argparse.Namespace) -> ex.ExperimentConfig:
    base = json.loads(args.config.read_text()) if args.config else {}
    for flag, key in FLAG_KEYS.items():
        v = getattr(args, flag, None)
        if v is not None:
            base[key] = v
    return ex.ExperimentConfig.from_dict(base)


def _out(config: ex.ExperimentConfig, command: str) -> Path:
    return Path(config.output or f"runs/{command}-{config.hash()}")


def _print(obj) -> None:
    print(json.dumps(_jsonable(obj), indent=2))


def cmd_phantom(config, args) -> int:
    grid = Grid.from_cells(config.grid)
    ph = make_phantom(config.phantom, grid)
    out = _out(config, "phantom")
    save_field(ph.sigma, out / "sigma")
    export_csv(ScalarField(grid, ph.sigma.values, name="sigma"), out / "sigma.csv")
    _print({"phantom": ph.name, "cells": grid.cells, "sigma_min": float(np.min(ph.sigma.values)),
            "sigma_max": float(np.max(ph.sigma.values)), "output": str(out)})
    return 0


def cmd_forward(config, args) -> int:
    grid = Grid.from_cells(config.grid)
    ph = make_phantom(config.phantom, grid)
    out = _out(config, "forward")
    stats = []
    for name, g in zip(ph.illuminations.names, ph.illuminations.values):
        u, st = ex._stage("forward", solve_conductivity, ph, g, config.elliptic_tol)
        save_field(ScalarField(grid, u.values, name=name), out / f"u_{name}")
        stats.append({"illumination": name, **st})
    _print({"phantom": ph.name, "solves": stats, "output": str(out)})
    return 0


def cmd_synthesize(config, args) -> int:
    data = ex._stage("synthesize", ex.build_bundle, config)
    if config.noise_level > 0:
        data = ex._stage("perturb", perturb, data, config.noise_level, config.smooth_radius, config.seed)
    out = _out(config, "synthesize")
    data.save(out)
    _print({"phantom": config.phantom, "alpha": config.alpha, "c0": data.c0_measured,
            "positivity": check_positivity(data, 0.0), "output": str(out)})
    return 0


def _bundle(config, args) -> DataBundle:
    if getattr(args, "data", None):
        return ex._stage("load", DataBundle.load, args.data)
    data = ex._stage("synthesize", ex.build_bundle, config)
    if config.noise_level > 0:
        data = ex._stage("perturb", perturb, data, config.noise_level, config.smooth_radius, config.seed)
    return data


def cmd_reconstruct(config, args) -> int:
    out = _out(config, "reconstruct")
    if args.data:
        data = _bundle(config, args)
        rep = ex._stage("reconstruct", ex.reconstruct, data, config)
        rep.meta["config_hash"] = config.hash()
        ex.write_run(rep, config, out)
    else:
        rep = ex.run_experiment(config, out)
    _print({"output": str(out), **rep.summary()})
    return 0


def cmd_diagnose(config, args) -> int:
    out = _out(config, "diagnose")

    def run(cfg):
        data = _bundle(cfg, args)
        if args.corrupt:
            data = corrupt(data, args.corrupt)
        derived = data.derived(cfg.t_method)
        fields = ex._stage("diagnose", diagnose, data, cfg.t_method)
        return data, derived, fields

    data, derived, fields = run(config)
    coarse = coarse_grid = None
    if args.coarse and not args.data:
        cfg_c = config.replace(grid=config.grid // 2)
        _, dc, coarse = run(cfg_c)
        coarse_grid = dc.grid
    manifest = residual_manifest(fields, data.grid, coarse, coarse_grid)
    extra = {"coercivity": ex._stage("coercivity", coercivity_probe, derived)}
    if data.truth is not None:
        extra["PW"] = ex._stage("PW estimate", estimate_PW_norm, data, derived, seed=config.seed)
    out.mkdir(parents=True, exist_ok=True)
    for name, r in fields.items():
        save_field(ScalarField(data.grid, np.asarray(r), name=name), out / name)
    result = {"config_hash": config.hash(), "corrupt": args.corrupt, "residuals": manifest, **extra}
    (out / "diagnostics.json").write_text(json.dumps(_jsonable(result), indent=2))
    _print(result)
    return 0


def cmd_converge(config, args) -> int:
    grids = config.grids or [32, 64, 128]
    rows = ex.convergence_study(config, grids, jobs=args.jobs)
    out = _out(config, "converge")
    path = ex.write_csv(rows, out / "convergence.csv")
    if args.emit_gnuplot:
        ex.emit_gnuplot(path, "h", list(ex.CONVERGENCE_METRICS))
    _print({"csv": str(path), "rows": [{k: r[k] for k in r if k.startswith(("cells", "err_", "order_", "status_"))}
                                       for r in rows]})
    return 0


def cmd_stability(config, args) -> int:
    levels = config.noise_levels or [1e-4, 1e-3, 1e-2]
    rows = ex.stability_sweep(config, levels)
    out = _out(config, "stability")
    path = ex.write_csv(rows, out / "stability.csv")
    if args.emit_gnuplot:
        ex.emit_gnuplot(path, "delta", ["ratio_logsigma", "ratio_sigma_pow"])
    _print({"csv": str(path),
            "variation_logsigma": ex.ratio_variation(rows, "ratio_logsigma"),
            "variation_sigma_pow": ex.ratio_variation(rows, "ratio_sigma_pow", 0.0),
            "rows": rows})
    return 0


COMMANDS = {"phantom": cmd_phantom, "forward": cmd_forward, "synthesize": cmd_synthesize,
            "reconstruct": cmd_reconstruct, "diagnose": cmd_diagnose, "converge": cmd_converge,
            "stability": cmd_stability}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = config_from_args(args)
        return COMMANDS[args.command](config, args)
    except ex.ConfigError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return 2
    except ex.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - top-level guard, still names the command
        print(f"error: stage '{args.command}' failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

