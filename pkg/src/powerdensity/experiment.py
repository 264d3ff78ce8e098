"""Configuration-driven experiments: single runs, refinement studies and noise sweeps."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .algebraic2d import reconstruct_sigma_2d
from .elliptic import reconstruct_sigma_elliptic
from .field_grid import Grid, ScalarField, norm
from .forward import DataBundle, perturb, synthesize
from .frames import cF
from .ode import reconstruct_sigma_ode, truth_seed
from .phantoms import PHANTOMS, IlluminationSet, make_phantom
from .report import ReconReport, _jsonable

logger = logging.getLogger(__name__)

METHODS = ("ode_s", "ode_r", "elliptic", "theta2d", "algebraic2d")
T_METHODS = ("inv_sqrt", "gram_schmidt")
ILLUMINATIONS = ("default", "linear")
FLOOR = 1e-11


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"stage '{stage}' failed: {exc}")
        self.stage = stage


@dataclass
class ExperimentConfig:
    """Experiment description; ``grid`` counts cells per side (``grid + 1`` nodes).

    ``grids`` lists the refinement levels of a convergence study and
    ``noise_levels`` the ``W^{1,inf}`` perturbation sizes of a stability
    sweep. ``seed_error`` is the Frobenius distance of the ODE seed frame from
    the exact one (the ``epsilon_0`` of the stability estimate).
    """

    phantom: str = "constant"
    grid: int = 64
    alpha: float = 0.5
    method: str = "elliptic"
    illuminations: str = "default"
    closed_form: bool | None = None
    t_method: str = "inv_sqrt"
    noise_level: float = 0.0
    noise_levels: list = field(default_factory=list)
    smooth_radius: float = 0.1
    seed: int = 0
    seed_error: float = 0.0
    seed_errors: list = field(default_factory=lambda: [0.0])
    grids: list = field(default_factory=list)
    elliptic_tol: float = 1e-10
    elliptic_max_iter: int | None = None
    output: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.phantom not in PHANTOMS:
            raise ConfigError(f"unknown phantom {self.phantom!r}; known: {sorted(PHANTOMS)}")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; known: {list(METHODS)}")
        if self.t_method not in T_METHODS:
            raise ConfigError(f"unknown t_method {self.t_method!r}")
        if self.illuminations not in ILLUMINATIONS:
            raise ConfigError(f"unknown illuminations {self.illuminations!r}")
        if int(self.grid) < 2:
            raise ConfigError("grid needs at least 2 cells per side")
        try:
            cF(2, self.alpha)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.method == "algebraic2d" and self.alpha == 0.5:
            raise ConfigError("algebraic2d requires alpha != 1/2")
        if self.noise_level < 0 or any(v < 0 for v in self.noise_levels):
            raise ConfigError("noise levels must be non-negative")

    # -- serialisation -------------------------------------------------------

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("output")
        blob = json.dumps(d, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


# ---------------------------------------------------------------------------
# pipeline stages


def build_bundle(config: ExperimentConfig) -> DataBundle:
    grid = Grid.from_cells(int(config.grid))
    phantom = make_phantom(config.phantom, grid)
    ill = None
    if config.illuminations == "linear":
        ill = IlluminationSet.from_functions(grid, [lambda a, b: a + 0 * b, lambda a, b: b + 0 * a],
                                             names=["x1", "x2"])
    data = synthesize(phantom, config.alpha, ill, closed_form=config.closed_form)
    data.meta["config_hash"] = config.hash()
    return data


def reconstruct(data: DataBundle, config: ExperimentConfig, seed_error: float | None = None) -> ReconReport:
    method = config.method
    rot = config.seed_error if seed_error is None else seed_error
    if method in ("ode_s", "ode_r"):
        conv = "S" if method == "ode_s" else "R"
        seed = truth_seed(data, conv, t_method=config.t_method, epsilon0=rot)
        rep = reconstruct_sigma_ode(data, seed, conv, config.t_method)
        rep.meta["epsilon0"] = rot
        return rep
    if method == "elliptic":
        return reconstruct_sigma_elliptic(data, config.t_method, config.elliptic_tol, config.elliptic_max_iter)
    if method == "theta2d":
        return reconstruct_sigma_2d(data, "theta", config.t_method)
    return reconstruct_sigma_2d(data, "algebraic", config.t_method)


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except (ConfigError, StageError):
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
        raise StageError(name, exc) from exc


def run_experiment(config: ExperimentConfig, output: str | Path | None = None) -> ReconReport:
    """Phantom, synthesis, optional perturbation, reconstruction; artifacts written when ``output`` is set."""
    data = _stage("synthesize", build_bundle, config)
    if config.noise_level > 0:
        data = _stage("perturb", perturb, data, config.noise_level, config.smooth_radius, config.seed)
    rep = _stage("reconstruct", reconstruct, data, config)
    rep.meta["config_hash"] = config.hash()
    rep.meta["noise"] = {"model": "gaussian-smoothed white noise", "level": config.noise_level,
                         "smooth_radius": config.smooth_radius, "seed": config.seed}
    out = output or config.output
    if out:
        write_run(rep, config, Path(out))
    return rep


def metrics_row(rep: ReconReport, config: ExperimentConfig, **extra) -> dict:
    row = {"config_hash": config.hash(), "phantom": config.phantom, "method": rep.method,
           "alpha": rep.alpha, "cells": rep.grid.cells, "h": rep.grid.h}
    row.update(extra)
    row.update({k: v for k, v in rep.metrics.items() if isinstance(v, (int, float))})
    return row


def write_csv(rows: list[dict], path: Path) -> Path:
    keys = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: _jsonable(r.get(k, "")) for k in keys})
    return path


def write_run(rep: ReconReport, config: ExperimentConfig, out: Path) -> None:
    rep.save(out / "fields")
    manifest = {"config": config.to_dict(), "config_hash": config.hash(), "report": rep.summary()}
    (out / "manifest.json").write_text(json.dumps(_jsonable(manifest), indent=2))
    write_csv([metrics_row(rep, config)], out / "metrics.csv")


# ---------------------------------------------------------------------------
# sweeps


def observed_orders(errors: list[float], hs: list[float]) -> list[tuple[float, str]]:
    """``log(e_k/e_{k+1}) / log(h_k/h_{k+1})`` with a status flag per refinement step."""
    out = []
    for (e0, h0), (e1, h1) in zip(zip(errors, hs), zip(errors[1:], hs[1:])):
        if not (math.isfinite(e0) and math.isfinite(e1)):
            out.append((math.nan, "failed"))
        elif e0 < FLOOR and e1 < FLOOR:
            out.append((math.nan, "floor"))
        elif e1 <= 0 or e1 >= e0:
            out.append((math.log(e0 / e1) / math.log(h0 / h1) if e1 > 0 else math.nan, "unreliable"))
        else:
            out.append((math.log(e0 / e1) / math.log(h0 / h1), "ok"))
    return out


CONVERGENCE_METRICS = ("err_logsigma_Linf", "err_logsigma_W1inf", "err_sigma_H1")


def _run_quiet(config: ExperimentConfig) -> ReconReport:
    return run_experiment(config)


def convergence_study(config: ExperimentConfig, grids: list[int] | None = None,
                      metrics: tuple[str, ...] = CONVERGENCE_METRICS, jobs: int = 1) -> list[dict]:
    """One row per grid with errors and the observed order against the previous grid.

    ``jobs > 1`` runs the grids in separate processes; each run is
    deterministic, so the table does not depend on ``jobs``.
    """
    grids = list(grids or config.grids)
    if len(grids) < 3:
        raise ConfigError("a convergence study needs at least 3 grid sizes")
    grids = sorted(int(g) for g in grids)
    configs = [config.replace(grid=g, output=None) for g in grids]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reps = list(pool.map(_run_quiet, configs))
    else:
        reps = [_run_quiet(c) for c in configs]
    hs = [r.grid.h for r in reps]
    rows = [metrics_row(r, config) for r in reps]
    for m in metrics:
        orders = observed_orders([r.metrics.get(m, math.nan) for r in reps], hs)
        rows[0][f"order_{m}"], rows[0][f"status_{m}"] = math.nan, ""
        for row, (p, status) in zip(rows[1:], orders):
            row[f"order_{m}"], row[f"status_{m}"] = p, status
    return rows


def stability_sweep(config: ExperimentConfig, levels: list[float] | None = None,
                    seed_errors: list[float] | None = None) -> list[dict]:
    """Reconstruction from ``H`` versus from perturbed ``H'`` at each noise level.

    Reports ``|log sigma - log sigma'|_{W^{1,inf}} / (eps0 + delta)`` and
    ``|sigma^{-2 alpha} - sigma'^{-2 alpha}|_{H^1} / delta``.
    """
    levels = list(levels or config.noise_levels)
    rots = list(seed_errors if seed_errors is not None else config.seed_errors)
    if config.method not in ("ode_s", "ode_r"):
        rots = [0.0]  # no seed to perturb
    data = build_bundle(config.replace(noise_level=0.0))
    ref = reconstruct(data, config, seed_error=0.0)
    a = config.alpha
    g = data.grid
    rows = []
    for eps0 in rots:
        for delta in levels:
            dp = perturb(data, delta, config.smooth_radius, config.seed)
            rep = reconstruct(dp, config, seed_error=eps0)
            dlog = norm(ScalarField(g, rep.log_sigma - ref.log_sigma), "W1inf")
            if a != 0:
                dpow = norm(ScalarField(g, rep.sigma ** (-2 * a) - ref.sigma ** (-2 * a)), "H1")
            else:
                dpow = norm(ScalarField(g, rep.log_sigma - ref.log_sigma), "H1")
            rows.append({"config_hash": config.hash(), "method": rep.method, "alpha": a,
                         "cells": g.cells, "delta": delta, "measured_delta": dp.meta.get("measured_level", 0.0),
                         "epsilon0": eps0, "dlogsigma_W1inf": dlog, "ratio_logsigma": dlog / (eps0 + delta),
                         "dsigma_pow_H1": dpow, "ratio_sigma_pow": dpow / delta})
    return rows


def ratio_variation(rows: list[dict], key: str, epsilon0: float | None = None) -> float:
    vals = [r[key] for r in rows if epsilon0 is None or r["epsilon0"] == epsilon0]
    vals = [v for v in vals if math.isfinite(v) and v > 0]
    return max(vals) / min(vals) if vals else math.nan


def emit_gnuplot(csv_path: Path, x: str, ys: list[str], logscale: bool = True) -> Path:
    """Plot script next to a CSV (columns addressed by header name)."""
    script = csv_path.with_suffix(".gp")
    lines = ["set datafile separator ','", "set key autotitle columnhead", "set grid",
             f"set xlabel '{x}'", f"set output '{csv_path.with_suffix('.png').name}'",
             "set terminal pngcairo size 800,600"]
    if logscale:
        lines.append("set logscale xy")
    plots = [f"'{csv_path.name}' using (column('{x}')):(column('{y}')) with linespoints title '{y}'" for y in ys]
    lines.append("plot " + ", \\\n     ".join(plots))
    script.write_text("\n".join(lines) + "\n")
    return script


__all__ = ["ExperimentConfig", "ConfigError", "StageError", "run_experiment", "convergence_study",
           "stability_sweep", "observed_orders", "ratio_variation", "build_bundle", "reconstruct",
           "emit_gnuplot", "write_csv"]
