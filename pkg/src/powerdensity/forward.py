"""Forward solves of the conductivity equation and synthesis of power-density data."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import sparse_ops
from .field_grid import Grid, MatrixField, ScalarField, VectorField, gradient, load_field, save_field
from .frames import DerivedFields, cF, derived_fields
from .phantoms import IlluminationSet, Phantom

logger = logging.getLogger(__name__)


class PerturbationError(ValueError):
    """A perturbation destroyed the positivity of the data."""


@dataclass
class Truth:
    """Ground truth behind a synthetic bundle; used for seeds, boundary data and errors."""

    sigma: np.ndarray
    grad_log_sigma: np.ndarray
    S: np.ndarray
    u: np.ndarray
    grad_u: np.ndarray
    phantom: str = ""

    def sigma_power(self, alpha: float) -> np.ndarray:
        return self.sigma ** (-2.0 * alpha)


@dataclass
class DataBundle:
    """Power-density measurements ``H_ij = sigma^{2 alpha} grad u_i . grad u_j``."""

    alpha: float
    H: MatrixField
    c0_measured: float
    meta: dict = field(default_factory=dict)
    truth: Truth | None = None
    c0_threshold: float | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def grid(self) -> Grid:
        return self.H.grid

    @property
    def m(self) -> int:
        return self.H.dim

    @property
    def grid_dim(self) -> int:
        return 2

    def derived(self, t_method: str = "inv_sqrt") -> DerivedFields:
        if t_method not in self._cache:
            self._cache[t_method] = derived_fields(self, t_method)
        return self._cache[t_method]

    def with_H(self, H: np.ndarray, **meta) -> "DataBundle":
        return replace(self, H=MatrixField(self.grid, H, name="H"), c0_measured=_c0(H),
                       meta={**self.meta, **meta}, _cache={})

    def save(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_field(self.H, directory / "H")
        manifest = {"alpha": self.alpha, "m": self.m, "c0_measured": self.c0_measured,
                    "meta": self.meta, "fields": ["H"]}
        if self.truth is not None:
            g = self.grid
            save_field(ScalarField(g, self.truth.sigma, name="sigma_true"), directory / "sigma_true")
            save_field(MatrixField(g, self.truth.S, name="S_true"), directory / "S_true")
            u = np.moveaxis(self.truth.u, 0, -1)
            save_field(VectorField(g, u, name="u_true"), directory / "u_true")
            manifest["fields"] += ["sigma_true", "S_true", "u_true"]
            manifest["truth_phantom"] = self.truth.phantom
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, default=float))
        return directory

    @classmethod
    def load(cls, directory: str | Path) -> "DataBundle":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        H = load_field(directory / "H")
        H = MatrixField(H.grid, H.values, name="H")
        truth = None
        if "sigma_true" in manifest["fields"]:
            sig = load_field(directory / "sigma_true").values
            S = load_field(directory / "S_true").values
            u = np.moveaxis(load_field(directory / "u_true").values, -1, 0)
            g = H.grid
            grad_u = np.stack([gradient(ui, g.h) for ui in u])
            truth = Truth(sig, gradient(np.log(sig), g.h), S, u, grad_u, manifest.get("truth_phantom", ""))
        return cls(manifest["alpha"], H, manifest["c0_measured"], manifest.get("meta", {}), truth)


def _c0(H: np.ndarray) -> float:
    n = 2
    det = np.linalg.det(H[..., :n, :n])
    return float(np.sqrt(max(np.min(det), 0.0)))


def solve_conductivity(phantom: Phantom, g: np.ndarray, tol: float = 1e-10,
                       maxiter: int | None = None) -> tuple[ScalarField, dict]:
    """Solve ``div(sigma grad u) = 0`` with ``u = g`` on the boundary.

    Conservative 5-point scheme with harmonic-mean edge conductivities;
    Dirichlet rows are eliminated and the SPD interior system goes to CG.
    """
    grid = phantom.grid
    sigma = phantom.sigma.values
    if np.min(sigma) <= 0:
        raise ValueError("conductivity must be positive")
    ax, ay = sparse_ops.scalar_edge_coefficients(sigma, "harmonic")
    K = sparse_ops.edge_operator(grid, ax, ay)
    u, stats = sparse_ops.dirichlet_solve(grid, K, np.asarray(g, dtype=float), tol=tol,
                                          maxiter=maxiter, what="conductivity equation")
    return ScalarField(grid, u, name="u"), stats


def synthesize(phantom: Phantom, alpha: float, illuminations: IlluminationSet | None = None,
               closed_form: bool | None = None, tol: float = 1e-10) -> DataBundle:
    """Build ``H_ij = sigma^{2 alpha} grad u_i . grad u_j`` on the phantom grid.

    With ``closed_form`` (default: whenever the phantom has closed-form
    solutions and its own illuminations are used) gradients are evaluated
    exactly; otherwise each ``u_i`` comes from :func:`solve_conductivity` and
    is differenced on the grid. The choice is recorded in ``meta``.
    """
    n = 2
    cF(n, alpha)
    grid = phantom.grid
    own = illuminations is None
    ill = phantom.illuminations if own else illuminations
    if closed_form is None:
        closed_form = phantom.analytic and own
    if closed_form and not (phantom.analytic and own):
        raise ValueError("closed-form gradients need an analytic phantom with its own illuminations")

    x1, x2 = grid.coords()
    solver_stats = []
    if closed_form:
        u = np.stack([s.u(x1, x2) for s in phantom.solutions])
        grad_u = np.stack([s.grad(x1, x2) for s in phantom.solutions])
    else:
        us = []
        for g in ill.values:
            ui, stats = solve_conductivity(phantom, g, tol=tol)
            us.append(ui.values)
            solver_stats.append(stats)
        u = np.stack(us)
        grad_u = np.stack([gradient(ui, grid.h) for ui in u])

    sig_a = phantom.sigma.values ** alpha
    S = sig_a[..., None, None] * np.moveaxis(grad_u, 0, -1)  # (nx, ny, n, m): columns S_i
    H = np.swapaxes(S, -1, -2) @ S
    H = 0.5 * (H + np.swapaxes(H, -1, -2))
    truth = Truth(phantom.sigma.values.copy(), phantom.grad_log_sigma(), S, u, grad_u, phantom.name)
    meta = {
        "phantom": phantom.name,
        "alpha": alpha,
        "cells": grid.cells,
        "analytic_gradients": bool(closed_form),
        "illuminations": ill.names,
        "solver": solver_stats,
    }
    return DataBundle(float(alpha), MatrixField(grid, H, name="H"), _c0(H), meta, truth)


def check_positivity(data: DataBundle, c0: float) -> dict:
    """Smallest ``det`` of the leading ``n x n`` block against ``c0^2``."""
    n = data.grid_dim
    det = np.linalg.det(data.H.values[..., :n, :n])
    k = np.unravel_index(int(np.argmin(det)), det.shape)
    min_det = float(det[k])
    return {"min_det": min_det, "argmin": tuple(int(a) for a in k), "c0": c0,
            "pass": bool(min_det >= c0 ** 2)}


def _w1inf_matrix(E: np.ndarray, h: float) -> float:
    return max(float(np.max(np.abs(E))), float(np.max(np.abs(gradient(E, h)))))


def smooth_noise(grid: Grid, m: int, smooth_radius: float, rng: np.random.Generator) -> np.ndarray:
    """Symmetric matrix field of Gaussian-smoothed white noise (unscaled)."""
    E = np.zeros(grid.shape + (m, m))
    width = smooth_radius / grid.h
    for i in range(m):
        for j in range(i, m):
            w = gaussian_filter(rng.standard_normal(grid.shape), sigma=width, mode="reflect")
            E[..., i, j] = E[..., j, i] = w
    return E


def perturb(data: DataBundle, level: float, smooth_radius: float = 0.1,
            rng_seed: int = 0) -> DataBundle:
    """Add smoothed noise scaled so ``|H' - H|_{W^{1,inf}} = level``."""
    if level < 0:
        raise ValueError("perturbation level must be non-negative")
    if level == 0:
        return replace(data, H=MatrixField(data.grid, data.H.values.copy(), name="H"),
                       meta={**data.meta}, _cache={})
    rng = np.random.default_rng(rng_seed)
    E = smooth_noise(data.grid, data.m, smooth_radius, rng)
    E *= level / _w1inf_matrix(E, data.grid.h)
    Hp = data.H.values + E
    Hp = 0.5 * (Hp + np.swapaxes(Hp, -1, -2))
    before = check_positivity(data, 0.0)["min_det"]
    out = data.with_H(Hp, noise={"model": "gaussian-smoothed white noise", "norm": "W1inf",
                                 "level": level, "smooth_radius": smooth_radius, "seed": rng_seed})
    after = check_positivity(out, 0.0)
    if after["min_det"] < 0.5 * before:
        raise PerturbationError(
            f"perturbation level {level} drops min det H from {before:.3e} to {after['min_det']:.3e} "
            f"at node {after['argmin']}")
    out.meta["measured_level"] = _w1inf_matrix(Hp - data.H.values, data.grid.h)
    return out


def corrupt(data: DataBundle, amount: float = 0.1, entry: tuple[int, int] = (0, 0)) -> DataBundle:
    """Multiply one entry of ``H`` by ``(1 + amount * x2)``: data outside the range of the forward map."""
    x1, x2 = data.grid.coords()
    H = data.H.values.copy()
    i, j = entry
    H[..., i, j] *= 1.0 + amount * x2
    if i != j:
        H[..., j, i] *= 1.0 + amount * x2
    return data.with_H(H, corruption={"entry": [i, j], "factor": f"1 + {amount}*x2"})
