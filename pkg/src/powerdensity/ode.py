"""Frame reconstruction by integrating the closed gradient systems for ``S`` and ``R``.

Derivative arrays follow ``dS[..., a, i, l] = d_l (S_i)_a``: the frame
layout with a trailing derivative axis.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from .field_grid import FrameField, Grid, ScalarField, VectorField
from .frames import (DerivedFields, F_from_R_kernel, F_from_S_kernel, S_to_R, R_to_S, build_T, frame_defect,
                     orthonormality_defect, polar_rotation)
from .report import ReconReport

logger = logging.getLogger(__name__)

CONVENTIONS = ("S", "R")


class BlowUpError(RuntimeError):
    """The integrated frame left the a-priori bound set by the data."""


# ---------------------------------------------------------------------------
# right-hand sides


def grad_S_rhs(cF: float, alpha: float, gradLogD: np.ndarray, U: np.ndarray, dHinv: np.ndarray,
               S: np.ndarray, F: np.ndarray | None = None) -> np.ndarray:
    """All partial derivatives of the frame ``S`` implied by the data.

    ``F`` defaults to its data expression in terms of ``S``, which closes the
    system. With ``alpha = 0`` the ``F`` terms are skipped entirely.
    """
    c = np.einsum("...jkp,...pi->...jki", dHinv, S)
    dS = 0.5 * (np.einsum("...ika,...lk->...ail", U, S)
                + np.einsum("...ak,...ikl->...ail", S, U)
                + np.einsum("...jki,...aj,...lk->...ail", c, S, S))
    if alpha != 0:
        if F is None:
            F = F_from_S_kernel(cF, gradLogD, dHinv, S)
        dS += _F_terms(alpha, F, S)
    return dS


def grad_R_rhs(cF: float, alpha: float, gradLogD: np.ndarray, V: np.ndarray, R: np.ndarray,
               F: np.ndarray | None = None) -> np.ndarray:
    """All partial derivatives of the orthonormal frame ``R``."""
    Vt = np.swapaxes(V, -3, -2)
    Vs, Va = 0.5 * (V + Vt), 0.5 * (V - Vt)
    c = np.einsum("...jkp,...pi->...jki", Vs, R)
    dR = (np.einsum("...ak,...ikl->...ail", R, Va)
          - np.einsum("...ika,...lk->...ail", Vs, R)
          + np.einsum("...jki,...aj,...lk->...ail", c, R, R))
    if alpha != 0:
        if F is None:
            F = F_from_R_kernel(cF, gradLogD, V, R)
        dR += _F_terms(alpha, F, R)
    return dR


def _F_terms(alpha, F, S):
    n = S.shape[-1]
    FS = np.einsum("...a,...ai->...i", F, S)
    eye = np.eye(n)
    return alpha * (FS[..., None, :, None] * eye[:, None, :]
                    - np.einsum("...a,...li->...ail", F, S))


def skewness_defect(R: np.ndarray, dR: np.ndarray) -> float:
    """Distance of each ``d_l R`` from the tangent space of rotations at ``R``."""
    A = np.einsum("...ai,...ajl->...ijl", R, dR)
    return float(np.max(np.abs(A + np.swapaxes(A, -3, -2)), initial=0.0))


# ---------------------------------------------------------------------------
# seeds and paths


@dataclass
class SeedData:
    """Known values at the seed node ``x0``: ``log sigma`` and a frame (``S`` or ``R``)."""

    x0: tuple[int, int]
    logsigma0: float
    frame0: np.ndarray
    convention: str = "S"

    def __post_init__(self):
        if self.convention not in CONVENTIONS:
            raise ValueError(f"unknown frame convention {self.convention!r}")
        self.frame0 = np.asarray(self.frame0, dtype=float)
        self.x0 = tuple(int(i) for i in self.x0)

    def validate(self, derived: DerivedFields, tol: float = 1e-6) -> None:
        i, j = self.x0
        H0 = derived.H[i, j]
        if self.convention == "S":
            defect = frame_defect(self.frame0, H0)
        else:
            defect = orthonormality_defect(self.frame0)
        if defect > tol * max(1.0, float(np.max(np.abs(H0)))):
            raise ValueError(f"seed frame inconsistent with the data at {self.x0} (defect {defect:.3e})")


def truth_seed(data, convention: str = "S", x0: tuple[int, int] | None = None,
               t_method: str = "inv_sqrt", rotate: float = 0.0, epsilon0: float = 0.0) -> SeedData:
    """Seed read off the synthetic truth, optionally with a controlled seed error.

    The orthonormal frame at ``x0`` is taken from the true ``S`` there. An
    ``S`` seed is then rebuilt with the bundle's own ``T``, so it stays
    consistent with perturbed data (``S^T S = H'`` at ``x0``).

    ``rotate`` turns the frame by that angle (radians). ``epsilon0`` instead
    sets the Frobenius distance between the returned and the exact seed frame;
    rotations preserve the frame norm, so the angle is
    ``2 arcsin(epsilon0 / (2 |frame|))``.
    """
    if data.truth is None:
        raise ValueError("bundle carries no ground truth to seed from")
    g = data.grid
    x0 = g.centre_index() if x0 is None else tuple(x0)
    S0 = data.truth.S[x0]
    R0 = S_to_R(S0, build_T(S0.T @ S0, t_method))
    if epsilon0:
        if rotate:
            raise ValueError("give either rotate or epsilon0, not both")
        size = np.linalg.norm(R0 if convention == "R" else S0)
        rotate = 2.0 * np.arcsin(min(1.0, epsilon0 / (2.0 * size)))
    if rotate:
        c, s = np.cos(rotate), np.sin(rotate)
        R0 = np.array([[c, -s], [s, c]]) @ R0
    frame0 = R0 if convention == "R" else R_to_S(R0, data.derived(t_method).T[x0])
    return SeedData(x0, float(np.log(data.truth.sigma[x0])), frame0, convention)


@dataclass(frozen=True)
class PathFamily:
    """Axis-aligned sweep: along the seed row in ``x1``, then every column in ``x2``.

    ``order="columns_first"`` swaps the roles; it is used only to measure
    path dependence.
    """

    grid: Grid
    x0: tuple[int, int]
    order: str = "row_first"

    def segments(self):
        """``(axis, start_index, stop_index)`` triples, in integration order."""
        i0, j0 = self.x0
        g = self.grid
        first, second = (0, 1) if self.order == "row_first" else (1, 0)
        starts = (i0, j0)
        ends = (g.nx - 1, g.ny - 1)
        out = []
        for ax in (first, second):
            out.append((ax, starts[ax], ends[ax]))
            out.append((ax, starts[ax], 0))
        return out


class _Coefficients:
    """Data entering a right-hand side, sliced and interpolated along grid lines."""

    def __init__(self, derived: DerivedFields, convention: str):
        self.cF, self.alpha = derived.cF, derived.alpha
        self.convention = convention
        if convention == "S":
            self.arrays = {"gradLogD": derived.gradLogD, "U": derived.U, "dHinv": derived.dHinv}
        else:
            self.arrays = {"gradLogD": derived.gradLogD, "V": derived.V}

    def at(self, idx):
        return {k: v[idx] for k, v in self.arrays.items()}

    @staticmethod
    def mid(a, b):
        # linear interpolation at an edge midpoint (bilinear on axis-aligned steps)
        return {k: 0.5 * (a[k] + b[k]) for k in a}

    def rhs(self, c, Y, axis):
        if self.convention == "S":
            d = grad_S_rhs(self.cF, self.alpha, c["gradLogD"], c["U"], c["dHinv"], Y)
        else:
            d = grad_R_rhs(self.cF, self.alpha, c["gradLogD"], c["V"], Y)
        return d[..., axis]


def _rk4_sweep(coef: _Coefficients, Y0, line_of, axis, start, stop, h, store, stats, bound2):
    """March ``Y`` from index ``start`` to ``stop`` along ``axis``; ``store(p, Y)`` records each node."""
    step = 1 if stop > start else -1
    s = step * h
    Y = Y0
    c_prev = coef.at(line_of(start))
    for p in range(start, stop, step):
        c_next = coef.at(line_of(p + step))
        c_mid = coef.mid(c_prev, c_next)
        k1 = coef.rhs(c_prev, Y, axis)
        k2 = coef.rhs(c_mid, Y + 0.5 * s * k1, axis)
        k3 = coef.rhs(c_mid, Y + 0.5 * s * k2, axis)
        k4 = coef.rhs(c_next, Y + s * k3, axis)
        Y = Y + s / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if coef.convention == "R":
            P = polar_rotation(Y)
            corr = float(np.max(np.abs(P - Y)))
            stats["reprojection_total"] += corr
            stats["reprojection_max"] = max(stats["reprojection_max"], corr)
            Y = P
        size2 = float(np.max(np.sum(Y ** 2, axis=(-2, -1))))
        if not np.isfinite(size2) or size2 > bound2:
            raise BlowUpError(f"frame norm {np.sqrt(size2):.3e} exceeds the a-priori bound "
                              f"{np.sqrt(bound2):.3e} near index {p + step} on axis {axis}")
        store(p + step, Y)
        c_prev = c_next
    return Y


def integrate_frame(derived: DerivedFields, seed: SeedData, paths: PathFamily | None = None,
                    stepper: str = "rk4", slack: float = 2.0) -> tuple[np.ndarray, dict]:
    """Integrate the gradient system for the seed's convention over the whole grid.

    Returns the frame array ``(nx, ny, n, n)`` in the seed convention and a
    stats dict (re-projection corrections for ``R``).
    """
    if stepper != "rk4":
        raise ValueError(f"unknown stepper {stepper!r}")
    grid = derived.grid
    seed.validate(derived)
    paths = paths or PathFamily(grid, seed.x0)
    conv = seed.convention
    coef = _Coefficients(derived, conv)
    n = derived.n
    m = n
    bound = slack * np.sqrt(m * float(np.max(np.abs(derived.H))))
    bound2 = bound ** 2 if conv == "S" else (slack ** 2) * n
    stats = {"reprojection_total": 0.0, "reprojection_max": 0.0, "bound": float(bound)}
    out = np.full(grid.shape + (n, n), np.nan)
    i0, j0 = seed.x0
    out[i0, j0] = seed.frame0

    segs = paths.segments()
    first_axis = segs[0][0]
    # first two segments: a single line through the seed
    for ax, start, stop in segs[:2]:
        if ax == 0:
            line_of = lambda p: (p, j0)  # noqa: E731

            def store(p, Y):
                out[p, j0] = Y
        else:
            line_of = lambda p: (i0, p)  # noqa: E731

            def store(p, Y):
                out[i0, p] = Y
        _rk4_sweep(coef, seed.frame0.copy(), line_of, ax, start, stop, grid.h, store, stats, bound2)
    # remaining segments: all transverse lines at once
    for ax, start, stop in segs[2:]:
        if ax == 1:
            Y0 = out[:, j0].copy()
            line_of = lambda p: (slice(None), p)  # noqa: E731

            def store(p, Y):
                out[:, p] = Y
        else:
            Y0 = out[i0, :].copy()
            line_of = lambda p: (p, slice(None))  # noqa: E731

            def store(p, Y):
                out[p, :] = Y
        _rk4_sweep(coef, Y0, line_of, ax, start, stop, grid.h, store, stats, bound2)
    stats["first_axis"] = first_axis
    return out, stats


def integrate_gradient(F: np.ndarray, grid: Grid, x0: tuple[int, int], value0: float,
                       order: str = "row_first") -> np.ndarray:
    """Trapezoidal line integral of ``F`` along the path family, pinned to ``value0`` at ``x0``."""
    F = np.asarray(F, dtype=float)
    h = grid.h
    i0, j0 = x0
    phi = np.empty(grid.shape)

    def cum(f, start):
        # cumulative trapezoid from index ``start`` along axis 0
        inc = 0.5 * h * (f[1:] + f[:-1])
        c = np.concatenate([np.zeros((1,) + f.shape[1:]), np.cumsum(inc, axis=0)])
        return c - c[start]

    if order == "row_first":
        phi[:, j0] = value0 + cum(F[:, j0, 0], i0)
        phi[:, :] = phi[:, j0][:, None] + cum(F[:, :, 1].T, j0).T
    elif order == "columns_first":
        phi[i0, :] = value0 + cum(F[i0, :, 1], j0)
        phi[:, :] = phi[i0, :][None, :] + cum(F[:, :, 0], i0)
    else:
        raise ValueError(f"unknown path order {order!r}")
    return phi


def path_dependence(F: np.ndarray, grid: Grid, x0: tuple[int, int]) -> float:
    """Sup difference between the row-first and column-first integrals of ``F``."""
    a = integrate_gradient(F, grid, x0, 0.0, "row_first")
    b = integrate_gradient(F, grid, x0, 0.0, "columns_first")
    return float(np.max(np.abs(a - b)))


def reconstruct_sigma_ode(data, seed: SeedData | None = None, convention: str = "S",
                          t_method: str = "inv_sqrt") -> ReconReport:
    """Frame integration, then ``F`` from the frame, then ``log sigma`` by path integration."""
    t_start = time.perf_counter()
    derived = data.derived(t_method)
    grid = data.grid
    seed = seed or truth_seed(data, convention, t_method=t_method)
    frame, stats = integrate_frame(derived, seed)
    if seed.convention == "S":
        S = frame
        F = F_from_S_kernel(derived.cF, derived.gradLogD, derived.dHinv, S)
        R = None
    else:
        R = frame
        S = R_to_S(R, derived.T)
        F = F_from_R_kernel(derived.cF, derived.gradLogD, derived.V, R)
    log_sigma = integrate_gradient(F, grid, seed.x0, seed.logsigma0)
    sigma = np.exp(log_sigma)
    rep = ReconReport(f"ode_{seed.convention.lower()}", data.alpha, grid, sigma, log_sigma,
                      fields={"F": VectorField(grid, F, name="F"),
                              "S": FrameField(grid, S, name="S"),
                              "log_sigma": ScalarField(grid, log_sigma, name="log_sigma")})
    rep.metrics["path_dependence"] = path_dependence(F, grid, seed.x0)
    rep.metrics["frame_defect"] = frame_defect(S, derived.H)
    rep.metrics["min_det"] = float(np.min(derived.D) ** 2)
    if R is not None:
        rep.metrics["reprojection_total"] = stats["reprojection_total"]
        rep.metrics["reprojection_max"] = stats["reprojection_max"]
    rep.meta.update({"seed": list(seed.x0), "t_method": t_method, "convention": seed.convention})
    if data.truth is not None:
        rep.add_errors(data.truth.sigma)
        rep.metrics["err_frame_Linf"] = float(np.max(np.abs(S - data.truth.S)))
    rep.metrics["runtime"] = time.perf_counter() - t_start
    return rep
