"""Two-dimensional reconstruction through the rotation angle ``theta`` of the ``R`` frame.

``R_1 = (cos theta, sin theta)``, ``R_2 = J R_1``. Two routes are provided:
a Poisson problem for ``theta`` (any alpha), and, for ``alpha != 1/2``, a
pointwise algebraic inversion for ``(cos 2theta, sin 2theta)`` from the
compatibility conditions.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from . import sparse_ops
from .field_grid import Grid, ScalarField, VectorField, divergence
from .frames import J2, DerivedFields, F_from_R_kernel, S_to_R
from .ode import integrate_gradient, path_dependence
from .report import ReconReport

logger = logging.getLogger(__name__)

UREFL = np.diag([1.0, -1.0])
DEGENERATE_REL = 1e-8
DEGENERATE_FRACTION_LIMIT = 0.1
F_FORMS_FACTOR = 100.0


class WrapError(ValueError):
    """Boundary angle cannot be made single-valued."""


def _apply(M, v):
    return v @ M.T


@dataclass
class ThetaData:
    """Data-only fields of the 2D angle formulation; ``theta``, ``c2`` and ``s2`` are filled on demand."""

    Fc: np.ndarray
    G: np.ndarray
    f: np.ndarray
    g: np.ndarray
    h: np.ndarray | None
    theta: np.ndarray | None = None
    c2: np.ndarray | None = None
    s2: np.ndarray | None = None


def theta_data(derived: DerivedFields) -> ThetaData:
    """``F_c``, ``G``, ``f``, ``g`` and (for ``alpha != 1/2``) ``h``."""
    if derived.n != 2:
        raise ValueError("the angle formulation is two-dimensional")
    V = derived.V
    hstep = derived.h
    Fc = _apply(UREFL, V[..., 0, 0, :] - V[..., 1, 1, :]) + _apply(J2 @ UREFL, V[..., 0, 1, :] + V[..., 1, 0, :])
    G = derived.Va[..., 0, 1, :] - 0.5 * _apply(J2, derived.gradLogD)
    JFc = _apply(J2, Fc)
    f = divergence(JFc, hstep) - 2.0 * np.sum(Fc * G, axis=-1)
    g = divergence(Fc, hstep) + 2.0 * np.sum(JFc * G, axis=-1)
    a = derived.alpha - 0.5
    h = None
    if a != 0:
        h = divergence(_apply(J2, G), hstep) / a - 2.0 * a * np.sum(Fc ** 2, axis=-1)
    return ThetaData(Fc, G, f, g, h)


def rotation_from_theta(theta: np.ndarray) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    R = np.empty(np.shape(theta) + (2, 2))
    R[..., 0, 0], R[..., 1, 0] = c, s
    R[..., 0, 1], R[..., 1, 1] = -s, c
    return R


def frame_angle(R: np.ndarray) -> np.ndarray:
    return np.arctan2(R[..., 1, 0], R[..., 0, 0])


def boundary_theta(grid: Grid, R: np.ndarray) -> np.ndarray:
    """Angle of ``R_1`` on the boundary, unwrapped counter-clockwise from the corner ``(0, 0)``.

    Returns a full-grid array holding the boundary values (interior
    entries are zero). Raises :class:`WrapError` if ``R_1`` winds around
    the circle along the boundary loop, in which case no continuous
    ``theta`` exists.
    """
    ii, jj = grid.boundary_loop()
    raw = frame_angle(R[ii, jj])
    th = np.unwrap(raw)
    closing = raw[0] - th[-1]
    winding = np.round((closing - np.angle(np.exp(1j * closing))) / (2 * np.pi))
    if winding != 0:
        raise WrapError(f"R_1 winds {int(winding)} times along the boundary; theta is not single-valued")
    out = np.zeros(grid.shape)
    out[ii, jj] = th
    return out


def truth_theta_boundary(data, derived: DerivedFields) -> np.ndarray:
    """Boundary angle from the synthetic truth: ``arg(t_11 S_1 + t_12 S_2)``."""
    if data.truth is None:
        raise ValueError("bundle carries no ground truth for the boundary angle")
    return boundary_theta(data.grid, S_to_R(data.truth.S, derived.T))


def solve_theta(derived: DerivedFields, theta_boundary: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """``Lap theta = div V_12^a`` with Dirichlet values from ``theta_boundary``."""
    grid = derived.grid
    rhs = divergence(derived.Va[..., 0, 1, :], derived.h)
    theta, _ = sparse_ops.poisson_dirichlet(grid, rhs, theta_boundary, tol=tol, what="theta Poisson problem")
    return theta


def F_from_theta(derived: DerivedFields, theta: np.ndarray, td: ThetaData | None = None,
                 report: dict | None = None) -> np.ndarray:
    """``F = cos(2 theta) F_c + sin(2 theta) J F_c``.

    The unsimplified expression ``grad log D + 2 sum Phi_ij V_ij^s`` is
    evaluated alongside; their difference is stored in ``report``.
    """
    td = td or theta_data(derived)
    c2, s2 = np.cos(2 * theta)[..., None], np.sin(2 * theta)[..., None]
    F = c2 * td.Fc + s2 * _apply(J2, td.Fc)
    direct = F_from_R_kernel(1.0, derived.gradLogD, derived.V, rotation_from_theta(theta))
    # the two agree only up to grad log D = -(V_11 + V_22), which holds to O(h^2)
    defect = float(np.max(np.abs(F - direct)))
    ok = defect <= F_FORMS_FACTOR * derived.h ** 2 * max(1.0, float(np.max(np.abs(F)))) ** 2
    if report is not None:
        report["F_forms_defect"] = defect
        report["F_forms_ok"] = ok
    if not ok:
        logger.warning("compact and unsimplified F disagree by %.3e", defect)
    return F


def algebraic_invert(derived: DerivedFields, td: ThetaData | None = None,
                     eps_rel: float = DEGENERATE_REL) -> dict:
    """Pointwise ``(cos 2theta, sin 2theta)`` and ``F`` from the compatibility conditions.

    ``F`` uses ``h/(f^2+g^2) (g F_c + f J F_c)``. Two expanded forms are
    returned for comparison: ``F_printed`` with ``+2|F_c|^2 G`` and
    ``F_rederived`` with ``-2|F_c|^2 J G``. Nodes with
    ``f^2 + g^2 < eps_rel * max(f^2 + g^2)`` are degenerate: they are masked
    and get ``F = 0`` (there ``|F| = |F_c|`` is itself negligible).
    """
    if derived.alpha == 0.5:
        raise ValueError("the algebraic inversion is undefined for alpha = 1/2")
    td = td or theta_data(derived)
    f, g, h = td.f, td.g, td.h
    q = f ** 2 + g ** 2
    qmax = float(np.max(q))
    valid = q >= eps_rel * qmax if qmax > 0 else np.zeros_like(q, dtype=bool)
    safe = np.where(valid, q, 1.0)
    c2 = np.where(valid, g * h / safe, 1.0)
    s2 = np.where(valid, f * h / safe, 0.0)
    ratio = np.where(valid, h / safe, 0.0)[..., None]
    Fc, G = td.Fc, td.G
    JFc = _apply(J2, Fc)
    F = ratio * (g[..., None] * Fc + f[..., None] * JFc)
    hs = derived.h
    base = divergence(Fc, hs)[..., None] * Fc + divergence(JFc, hs)[..., None] * JFc
    Fc2 = np.sum(Fc ** 2, axis=-1)[..., None]
    F_printed = ratio * (base + 2 * Fc2 * G)
    F_rederived = ratio * (base - 2 * Fc2 * _apply(J2, G))
    frac = 1.0 - float(np.mean(valid))
    out = {"c2": c2, "s2": s2, "F": F, "F_printed": F_printed, "F_rederived": F_rederived,
           "residual": q - h ** 2, "mask": valid, "degenerate_fraction": frac,
           "partial": frac > DEGENERATE_FRACTION_LIMIT, "unit_defect": np.where(valid, c2 ** 2 + s2 ** 2 - 1, 0.0)}
    if out["partial"]:
        logger.warning("algebraic inversion degenerate on %.1f%% of nodes; result is partial", 100 * frac)
    td.c2, td.s2 = c2, s2
    return out


def alpha_half_constraints(derived: DerivedFields, td: ThetaData | None = None,
                           eps_rel: float = DEGENERATE_REL) -> dict:
    """Data-only constraint at ``alpha = 1/2`` and the two sign candidates for ``(c2, s2)``.

    ``constraint_residual`` is ``div(J G) = div(J V_12^a) + 1/2 Lap log D``;
    ``constraint_printed`` keeps the opposite sign in front of the Laplacian.
    The candidate pairs solve ``f c2 - g s2 = 0`` (``±(g, f)``, consistent
    with the chain-rule derivation) and ``f c2 + g s2 = 0`` (``±(-g, f)``).
    """
    td = td or theta_data(derived)
    hs = derived.h
    JVa = _apply(J2, derived.Va[..., 0, 1, :])
    lapLogD = divergence(derived.gradLogD, hs)
    res = divergence(JVa, hs) + 0.5 * lapLogD
    printed = divergence(JVa, hs) - 0.5 * lapLogD
    q = td.f ** 2 + td.g ** 2
    qmax = float(np.max(q))
    valid = q >= eps_rel * qmax if qmax > 0 else np.zeros_like(q, dtype=bool)
    r = np.where(valid, 1.0 / np.sqrt(np.where(valid, q, 1.0)), 0.0)
    pair = np.stack([td.g * r, td.f * r], axis=-1)
    pair_printed = np.stack([-td.g * r, td.f * r], axis=-1)
    return {"constraint_residual": res, "constraint_printed": printed,
            "sign_pair": (pair, -pair), "sign_pair_printed": (pair_printed, -pair_printed), "mask": valid}


def _potential_from_F(grid: Grid, F: np.ndarray, log_boundary: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    logs, _ = sparse_ops.poisson_dirichlet(grid, divergence(F, grid.h), log_boundary, tol=tol,
                                           what="log-sigma Poisson problem")
    return logs


def reconstruct_sigma_2d(data, mode: str = "theta", t_method: str = "inv_sqrt",
                         eps_rel: float = DEGENERATE_REL) -> ReconReport:
    """``log sigma`` from ``F`` obtained either by the ``theta`` Poisson route or algebraically.

    The Poisson problem for ``log sigma`` takes its boundary values from the
    synthetic truth; a path integral from the centre is kept as a
    cross-check.
    """
    t_start = time.perf_counter()
    if mode not in ("theta", "algebraic"):
        raise ValueError(f"unknown 2D mode {mode!r}")
    if data.truth is None:
        raise ValueError("the 2D reconstruction needs boundary values of sigma")
    derived = data.derived(t_method)
    grid = data.grid
    td = theta_data(derived)
    extra = {}
    fields = {}
    mask = None
    if mode == "theta":
        theta = solve_theta(derived, truth_theta_boundary(data, derived))
        F = F_from_theta(derived, theta, td, report=extra)
        extra["F_forms_ok"] = float(extra["F_forms_ok"])
        fields["theta"] = ScalarField(grid, theta, name="theta")
    else:
        inv = algebraic_invert(derived, td, eps_rel)
        F = inv["F"]
        mask = inv["mask"]
        extra.update(consistency_residual=float(np.max(np.abs(inv["residual"]))),
                     degenerate_fraction=inv["degenerate_fraction"],
                     F_printed_vs_compact=float(np.max(np.abs(inv["F_printed"] - F))),
                     F_rederived_vs_compact=float(np.max(np.abs(inv["F_rederived"] - F))))
        fields["mask"] = ScalarField(grid, mask.astype(float), name="mask")
        fields["residual"] = ScalarField(grid, inv["residual"], name="residual")
    log_b = np.log(data.truth.sigma)
    log_sigma = _potential_from_F(grid, F, log_b)
    x0 = grid.centre_index()
    path = integrate_gradient(F, grid, x0, float(log_sigma[x0]))
    rep = ReconReport("theta2d" if mode == "theta" else "algebraic2d", data.alpha, grid,
                      np.exp(log_sigma), log_sigma, fields={**fields, "F": VectorField(grid, F, name="F")})
    rep.metrics.update(extra)
    rep.metrics["path_dependence"] = path_dependence(F, grid, x0)
    rep.metrics["route_difference"] = float(np.max(np.abs(path - log_sigma)))
    rep.metrics["min_det"] = float(np.min(derived.D) ** 2)
    rep.add_errors(data.truth.sigma)
    dF = np.abs(F - data.truth.grad_log_sigma)
    rep.metrics["err_F_Linf"] = float(np.max(dF))
    if mask is not None:
        err = np.abs(log_sigma - log_b)
        some = bool(np.any(mask))
        rep.metrics["err_logsigma_Linf_masked"] = float(np.max(err[mask])) if some else 0.0
        rep.metrics["err_F_Linf_masked"] = float(np.max(dF[mask])) if some else 0.0
    rep.meta["t_method"] = t_method
    rep.metrics["runtime"] = time.perf_counter() - t_start
    return rep
