"""Compatibility conditions of the data evaluated as residual fields.

On data generated by a genuine conductivity every residual here vanishes up
to discretisation error; on data outside the range of the measurement map
some of them do not. That makes the module a range test.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .algebraic2d import (F_from_theta, _apply, alpha_half_constraints, rotation_from_theta, solve_theta,
                          theta_data, truth_theta_boundary)
from .field_grid import Grid, curl2, curl3, divergence, gradient, trapezoid_weights
from .frames import J2, DerivedFields

logger = logging.getLogger(__name__)

FLOOR = 1e-11


def curl_F_residual(F: np.ndarray, h: float) -> np.ndarray:
    """``d F = 0`` residual: scalar curl for ``n = 2``, the three components for ``n = 3``."""
    n = F.shape[-1]
    if n == 2:
        return curl2(F, h)
    if n == 3:
        return curl3(F, h)
    raise ValueError(f"curl residual implemented for n in {{2, 3}}, got {n}")


@dataclass
class ChristoffelField:
    """``Gamma[..., i, j, k]`` is ``Gamma_ij^k``; ``fd`` holds the finite-difference definition if requested."""

    Gamma: np.ndarray
    fd: np.ndarray | None = None

    @property
    def fd_defect(self) -> float:
        if self.fd is None:
            return math.nan
        return float(np.max(np.abs(self.Gamma - self.fd)))


def christoffel_kernel(Vs: np.ndarray, Va: np.ndarray, F: np.ndarray, R: np.ndarray, alpha: float) -> np.ndarray:
    """``V^a_jk.R_i + V^s_ik.R_j - V^s_ij.R_k + alpha (F.R_j) d_ik - alpha (F.R_k) d_ij``."""
    n = R.shape[-1]
    eye = np.eye(n)
    G = (np.einsum("...jkd,...di->...ijk", Va, R)
         + np.einsum("...ikd,...dj->...ijk", Vs, R)
         - np.einsum("...ijd,...dk->...ijk", Vs, R))
    FR = np.einsum("...d,...di->...i", F, R)
    G += alpha * (FR[..., None, :, None] * eye[:, None, :] - FR[..., None, None, :] * eye[:, :, None])
    return G


def christoffel_fd(R: np.ndarray, h: float) -> np.ndarray:
    """``(grad_{R_i} R_j) . R_k`` from grid derivatives of ``R``."""
    ndim = R.shape[-1]
    dR = gradient(R, h, ndim)  # [..., d, j, l] = d_l (R_j)_d
    return np.einsum("...li,...djl,...dk->...ijk", R, dR, R)


def christoffel(derived: DerivedFields, R: np.ndarray, F: np.ndarray, fd: bool = False) -> ChristoffelField:
    G = christoffel_kernel(derived.Vs, derived.Va, F, R, derived.alpha)
    return ChristoffelField(G, christoffel_fd(R, derived.h) if fd else None)


def curvature_residual(chris: ChristoffelField, R: np.ndarray, h: float) -> dict:
    """Zero sectional curvature residuals, one field per pair ``i < j``.

    ``grad_{R_i} Gamma_jj^i + grad_{R_j} Gamma_ii^j + Gamma_ji^l Gamma_ij^l
    - Gamma_ii^l Gamma_jj^l + (Gamma_ij^l - Gamma_ji^l) Gamma_li^j``.
    """
    G = chris.Gamma
    n = R.shape[-1]
    dG = gradient(G, h, n)
    out = {}
    for i in range(n):
        for j in range(i + 1, n):
            lhs = (np.einsum("...l,...l->...", dG[..., j, j, i, :], R[..., :, i])
                   + np.einsum("...l,...l->...", dG[..., i, i, j, :], R[..., :, j]))
            rhs = (-np.einsum("...l,...l->...", G[..., j, i, :], G[..., i, j, :])
                   + np.einsum("...l,...l->...", G[..., i, i, :], G[..., j, j, :])
                   - np.einsum("...l,...l->...", G[..., i, j, :] - G[..., j, i, :], G[..., :, i, j]))
            out[(i, j)] = lhs - rhs
    return out


def gradtheta_residual(theta: np.ndarray, derived: DerivedFields, F: np.ndarray) -> dict:
    """``|grad theta - (V_12^a - J grad log D / 2 + (alpha - 1/2) J F)|`` and the two scalar conditions."""
    h = derived.h
    a = derived.alpha - 0.5
    G = derived.Va[..., 0, 1, :] - 0.5 * _apply(J2, derived.gradLogD)
    rhs = G + a * _apply(J2, F)
    return {
        "gradtheta": np.linalg.norm(gradient(theta, h) - rhs, axis=-1),
        "compat_G": divergence(_apply(J2, G), h) - a * divergence(F, h),
        "compat_F": divergence(_apply(J2, F), h),
    }


def diagnose(data, t_method: str = "inv_sqrt") -> dict:
    """All 2D residual fields for a bundle.

    ``theta`` comes from its Poisson problem (boundary values from the
    synthetic truth), ``R`` and ``F`` from ``theta``. Returns a dict of
    residual arrays; the ``alpha = 1/2`` data constraint is included when it
    applies.
    """
    derived = data.derived(t_method)
    h = derived.h
    td = theta_data(derived)
    theta = solve_theta(derived, truth_theta_boundary(data, derived))
    R = rotation_from_theta(theta)
    F = F_from_theta(derived, theta, td)
    chris = christoffel(derived, R, F)
    fields = {"curl_F": curl_F_residual(F, h)}
    for (i, j), r in curvature_residual(chris, R, h).items():
        fields[f"curvature_{i + 1}{j + 1}"] = r
    fields.update(gradtheta_residual(theta, derived, F))
    if derived.alpha == 0.5:
        c = alpha_half_constraints(derived, td)
        fields["alpha_half"] = c["constraint_residual"]
        fields["alpha_half_printed"] = c["constraint_printed"]
    return fields


def residual_manifest(fields: dict, grid: Grid, coarse: dict | None = None,
                      coarse_grid: Grid | None = None) -> dict:
    """Sup and L2 norms per residual; observed order when a coarser run is supplied."""
    w = trapezoid_weights(grid)
    out = {}
    for name, r in fields.items():
        a = np.abs(np.asarray(r))
        if a.ndim > 2:
            a = np.sqrt(np.sum(a ** 2, axis=tuple(range(2, a.ndim))))
        entry = {"sup": float(np.max(a)), "L2": float(np.sqrt(np.sum(w * a ** 2)))}
        if coarse is not None and name in coarse:
            sup_c = float(np.max(np.abs(coarse[name])))
            ratio = (coarse_grid.h / grid.h) if coarse_grid is not None else 2.0
            if entry["sup"] < FLOOR and sup_c < FLOOR:
                entry["order"], entry["order_status"] = math.nan, "floor"
            elif entry["sup"] >= sup_c:
                entry["order"], entry["order_status"] = math.log(sup_c / entry["sup"]) / math.log(ratio), "unreliable"
            else:
                entry["order"], entry["order_status"] = math.log(sup_c / entry["sup"]) / math.log(ratio), "ok"
        out[name] = entry
    return out
