"""Conductivity phantoms with default illuminations.

``harmonic_sq`` uses the identity ``div(phi^2 grad(v/phi)) = phi Lap v - v Lap phi``:
with ``phi`` and ``v`` harmonic, ``u = v/phi`` solves the conductivity
equation for ``sigma = phi^2`` in any dimension. That gives closed-form
rotating frames for checking the frame calculus.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .field_grid import Grid, ScalarField

Fn = Callable[..., np.ndarray]


@dataclass
class Solution:
    """Closed-form solution ``u`` and its gradient (returned with a trailing axis)."""

    u: Fn
    grad: Fn


@dataclass
class IlluminationSet:
    """Dirichlet data ``g_i``; ``values[i]`` is a full-grid array read on boundary nodes."""

    grid: Grid
    values: np.ndarray
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape[1:] != self.grid.shape:
            raise ValueError("illumination arrays must match the grid")
        if self.m < 2:
            raise ValueError("need at least n = 2 illuminations")

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @classmethod
    def from_functions(cls, grid: Grid, funcs: list[Fn], names: list[str] | None = None):
        x1, x2 = grid.coords()
        vals = np.stack([np.broadcast_to(f(x1, x2), grid.shape) for f in funcs])
        return cls(grid, vals, names or [f"g{i + 1}" for i in range(len(funcs))])


@dataclass
class Phantom:
    name: str
    grid: Grid
    sigma: ScalarField
    sigma0: float
    sigma_fn: Fn
    grad_log_sigma_fn: Fn
    illuminations: IlluminationSet
    solutions: list[Solution] | None = None

    @property
    def analytic(self) -> bool:
        return self.solutions is not None

    def log_sigma(self) -> np.ndarray:
        return np.log(self.sigma.values)

    def grad_log_sigma(self) -> np.ndarray:
        x1, x2 = self.grid.coords()
        return self.grad_log_sigma_fn(x1, x2)


def _stack(*comps):
    comps = np.broadcast_arrays(*comps)
    return np.stack(comps, axis=-1)


def _bump(x1, x2, c, amp, width):
    return amp * np.exp(-((x1 - c[0]) ** 2 + (x2 - c[1]) ** 2) / width)


def _bump_grad(x1, x2, c, amp, width):
    b = _bump(x1, x2, c, amp, width)
    return _stack(-2 * (x1 - c[0]) / width * b, -2 * (x2 - c[1]) / width * b)


def _sum_of_bumps(bumps):
    def sigma(x1, x2):
        return 1.0 + sum(_bump(x1, x2, *b) for b in bumps)

    def grad_log(x1, x2):
        return sum(_bump_grad(x1, x2, *b) for b in bumps) / sigma(x1, x2)[..., None]

    return sigma, grad_log


BUMP = [((0.5, 0.5), 0.5, 0.02)]
TWO_BUMPS = [((0.35, 0.4), 0.4, 0.015), ((0.68, 0.62), -0.3, 0.02)]

HARMONIC_AMPLITUDE = 0.4


def harmonic_sq_nd(coords: list[np.ndarray], alpha: float, amplitude: float = HARMONIC_AMPLITUDE):
    """Closed-form data for ``sigma = phi^2``, ``phi = 1 + a (x1^2 - x2^2)``, ``u_i = x_i/phi``.

    Works for 2 or 3 coordinates. Returns ``sigma``, ``grad log sigma`` and the
    frame ``S`` (columns ``sigma^alpha grad u_i``).
    """
    x = np.stack(np.broadcast_arrays(*coords), axis=-1)
    n = x.shape[-1]
    phi = 1.0 + amplitude * (x[..., 0] ** 2 - x[..., 1] ** 2)
    dphi = np.zeros_like(x)
    dphi[..., 0] = 2 * amplitude * x[..., 0]
    dphi[..., 1] = -2 * amplitude * x[..., 1]
    sigma = phi ** 2
    grad_log_sigma = 2.0 * dphi / phi[..., None]
    # grad u_i = e_i/phi - x_i grad(phi)/phi^2 ; column i
    eye = np.broadcast_to(np.eye(n), x.shape[:-1] + (n, n))
    grad_u = eye / phi[..., None, None] - dphi[..., :, None] * x[..., None, :] / (phi ** 2)[..., None, None]
    S = (sigma ** alpha)[..., None, None] * grad_u
    return sigma, grad_log_sigma, S


def _constant(grid):
    sol = [Solution(lambda x1, x2: x1 + 0 * x2, lambda x1, x2: _stack(np.ones_like(x1), 0 * x2)),
           Solution(lambda x1, x2: x2 + 0 * x1, lambda x1, x2: _stack(0 * x1, np.ones_like(x2)))]
    return dict(sigma_fn=lambda x1, x2: np.ones(np.broadcast(x1, x2).shape),
                grad_log_sigma_fn=lambda x1, x2: _stack(0 * x1, 0 * x2),
                solutions=sol, sigma0=1.0)


def _layered_exp(grid):
    sol = [Solution(lambda x1, x2: 0.5 * (1 - np.exp(-2 * x1)) + 0 * x2,
                    lambda x1, x2: _stack(np.exp(-2 * x1), 0 * x2)),
           Solution(lambda x1, x2: x2 + 0 * x1, lambda x1, x2: _stack(0 * x1, np.ones_like(x2)))]
    return dict(sigma_fn=lambda x1, x2: np.exp(2 * x1) + 0 * x2,
                grad_log_sigma_fn=lambda x1, x2: _stack(2 + 0 * x1, 0 * x2),
                solutions=sol, sigma0=1.0)


def _harmonic_sq(grid):
    a = HARMONIC_AMPLITUDE

    def phi(x1, x2):
        return 1 + a * (x1 ** 2 - x2 ** 2)

    def dphi(x1, x2):
        return _stack(2 * a * x1, -2 * a * x2)

    def sol(k):
        def u(x1, x2):
            return (x1, x2)[k] / phi(x1, x2)

        def grad(x1, x2):
            p = phi(x1, x2)[..., None]
            e = np.zeros(np.broadcast(x1, x2).shape + (2,))
            e[..., k] = 1.0
            return e / p - (x1, x2)[k][..., None] * dphi(x1, x2) / p ** 2

        return Solution(u, grad)

    return dict(sigma_fn=lambda x1, x2: phi(x1, x2) ** 2,
                grad_log_sigma_fn=lambda x1, x2: 2 * dphi(x1, x2) / phi(x1, x2)[..., None],
                solutions=[sol(0), sol(1)], sigma0=(1 - a) ** 2)


def _bumps(bumps, sigma0):
    def make(grid):
        s, gl = _sum_of_bumps(bumps)
        return dict(sigma_fn=s, grad_log_sigma_fn=gl, solutions=None, sigma0=sigma0)
    return make


PHANTOMS = {
    "constant": _constant,
    "layered_exp": _layered_exp,
    "bump": _bumps(BUMP, 1.0),
    "two_bumps": _bumps(TWO_BUMPS, 0.7),
    "harmonic_sq": _harmonic_sq,
}


def make_phantom(name: str, grid: Grid) -> Phantom:
    """Phantom from the registry; analytic ones illuminate with their closed-form traces."""
    try:
        spec = PHANTOMS[name](grid)
    except KeyError:
        raise ValueError(f"unknown phantom {name!r}; known: {sorted(PHANTOMS)}") from None
    x1, x2 = grid.coords()
    sigma = spec["sigma_fn"](x1, x2)
    if np.min(sigma) < spec["sigma0"] - 1e-12:
        raise ValueError(f"phantom {name} violates its lower bound sigma0={spec['sigma0']}")
    solutions = spec["solutions"]
    if solutions is not None:
        ill = IlluminationSet.from_functions(grid, [s.u for s in solutions])
    else:
        ill = IlluminationSet.from_functions(grid, [lambda a, b: a + 0 * b, lambda a, b: b + 0 * a],
                                             names=["x1", "x2"])
    return Phantom(name, grid, ScalarField(grid, sigma, name="sigma"), spec["sigma0"],
                   spec["sigma_fn"], spec["grad_log_sigma_fn"], ill, solutions)
