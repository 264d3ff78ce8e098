"""Pointwise algebra linking the power-density matrix ``H`` to frames.

Array conventions used throughout the package:

* a frame is an ``(..., n, n)`` array whose *columns* are the vectors, so
  ``S[..., :, i]`` is ``S_i``;
* a gradient adds a trailing derivative axis: ``dHinv[..., i, j, l]`` is
  ``d_l H^{ij}``;
* families of vector fields such as ``U_jk`` or ``V_ik`` are stored as
  ``(..., n, n, d)`` with the vector in the last axis.

The kernels never look at the spatial layout, so they run on 2D grids, on
3D synthetic grids and on flat batches of nodes alike.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .field_grid import Grid, MatrixField, ScalarField, VectorField, gradient

logger = logging.getLogger(__name__)

J2 = np.array([[0.0, -1.0], [1.0, 0.0]])

ALGEBRAIC_TOL = 1e-10
ORTHONORMAL_TOL = 1e-8


class PositivityError(ValueError):
    """Raised when ``det H`` drops below the positivity threshold."""


def cF(n: int, alpha: float) -> float:
    """``((n-2) alpha + 1)^{-1}``; the excluded value ``(n-2) alpha = -1`` raises."""
    denom = (n - 2) * alpha + 1.0
    if abs(denom) < 1e-14:
        raise ValueError(f"alpha={alpha} is excluded in dimension n={n}: (n-2)*alpha + 1 = 0")
    return 1.0 / denom


# ---------------------------------------------------------------------------
# square roots and orthonormalisation


def inv_sqrt_spd(H: np.ndarray) -> np.ndarray:
    """Positive inverse square root of SPD matrices.

    2x2 blocks use the closed form ``sqrt(M) = (M + s I)/t`` with
    ``s = sqrt(det M)`` and ``t = sqrt(tr M + 2 s)``; larger blocks go through
    ``eigh``.
    """
    n = H.shape[-1]
    if n == 2:
        s = np.sqrt(np.linalg.det(H))
        t = np.sqrt(H[..., 0, 0] + H[..., 1, 1] + 2.0 * s)
        M = H + s[..., None, None] * np.eye(2)
        return t[..., None, None] * np.linalg.inv(M)
    w, Q = np.linalg.eigh(H)
    return np.einsum("...ik,...k,...jk->...ij", Q, 1.0 / np.sqrt(w), Q)


def gram_schmidt_T(H: np.ndarray) -> np.ndarray:
    """Lower-triangular ``T`` with ``T^T T = H^{-1}``: Gram-Schmidt on the columns 1..n.

    If ``S^T S = H = L L^T`` (Cholesky), ``S = Q L^T`` is the QR/Gram-Schmidt
    factorisation of ``S``, so ``R = S T^T`` with ``T = L^{-1}``.
    """
    L = np.linalg.cholesky(H)
    return np.linalg.inv(L)


def build_T(H: np.ndarray, t_method: str) -> np.ndarray:
    if t_method == "inv_sqrt":
        return inv_sqrt_spd(H)
    if t_method == "gram_schmidt":
        return gram_schmidt_T(H)
    raise ValueError(f"unknown t_method {t_method!r}")


def polar_rotation(A: np.ndarray) -> np.ndarray:
    """Closest rotation (orthogonal polar factor) to each matrix in ``A``."""
    U, _, Vt = np.linalg.svd(A)
    R = U @ Vt
    neg = np.linalg.det(R) < 0
    if np.any(neg):
        U = U.copy()
        U[neg, :, -1] *= -1
        R = U @ Vt
    return R


# ---------------------------------------------------------------------------
# cofactor frame


def cofactor_frame(S: np.ndarray) -> np.ndarray:
    """Vectors ``X_j`` with ``X_j . V = det(S_1, .., V (slot j), .., S_n)``.

    Built from the cofactor expansion of the determinant, so ``X_j . S_k``
    equals ``det S`` on the diagonal and vanishes off it. Only ``n`` in
    ``{2, 3}``.
    """
    S = np.asarray(S, dtype=float)
    n = S.shape[-1]
    X = np.empty_like(S)
    if n == 2:
        a, b = S[..., 0, 0], S[..., 0, 1]
        c, d = S[..., 1, 0], S[..., 1, 1]
        X[..., 0, 0], X[..., 1, 0] = d, -b
        X[..., 0, 1], X[..., 1, 1] = -c, a
    elif n == 3:
        s1, s2, s3 = S[..., :, 0], S[..., :, 1], S[..., :, 2]
        X[..., :, 0] = np.cross(s2, s3)
        X[..., :, 1] = np.cross(s3, s1)
        X[..., :, 2] = np.cross(s1, s2)
    else:
        raise ValueError(f"cofactor frame implemented for n in {{2, 3}}, got {n}")
    return X


# ---------------------------------------------------------------------------
# derived fields


@dataclass
class DerivedFields:
    """Data-only quantities computed from ``H``; arrays follow the module conventions."""

    h: float
    alpha: float
    cF: float
    t_method: str
    H: np.ndarray
    D: np.ndarray
    Hinv: np.ndarray
    gradLogD: np.ndarray
    dH: np.ndarray
    dHinv: np.ndarray
    U: np.ndarray
    T: np.ndarray
    Tinv: np.ndarray
    dT: np.ndarray
    V: np.ndarray
    Vs: np.ndarray
    Va: np.ndarray
    grid: Grid | None = None
    checks: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.H.shape[-1]

    @property
    def ndim(self) -> int:
        return self.H.ndim - 2

    def node(self, idx) -> "DerivedFields":
        """View restricted to the nodes selected by ``idx`` (any numpy index)."""
        take = lambda a: a[idx]  # noqa: E731
        return DerivedFields(
            self.h, self.alpha, self.cF, self.t_method,
            *(take(getattr(self, k)) for k in _ARRAY_KEYS),
            grid=None, checks=self.checks,
        )

    def to_fields(self) -> dict:
        """Grid fields for export (2D grids only)."""
        if self.grid is None:
            raise ValueError("derived fields are not attached to a 2D grid")
        g = self.grid
        out = {
            "D": ScalarField(g, self.D, name="D"),
            "Hinv": MatrixField(g, self.Hinv, name="Hinv"),
            "gradLogD": VectorField(g, self.gradLogD, name="gradLogD"),
            "T": MatrixField(g, self.T, name="T"),
        }
        n = self.n
        for i in range(n):
            for k in range(n):
                out[f"U_{i + 1}{k + 1}"] = VectorField(g, self.U[..., i, k, :], name=f"U_{i + 1}{k + 1}")
                out[f"V_{i + 1}{k + 1}"] = VectorField(g, self.V[..., i, k, :], name=f"V_{i + 1}{k + 1}")
        return out


_ARRAY_KEYS = ("H", "D", "Hinv", "gradLogD", "dH", "dHinv", "U", "T", "Tinv", "dT", "V", "Vs", "Va")


def derive(H: np.ndarray, h: float, alpha: float, t_method: str = "inv_sqrt",
           c0: float | None = None, grid: Grid | None = None) -> DerivedFields:
    """Compute every data-derived field from a sampled ``H``.

    ``H`` has shape ``spatial + (n, n)`` with ``len(spatial) == n``.
    Derivatives of ``H^{-1}`` and ``T`` are taken by differencing the
    inverted/factored fields themselves.
    """
    H = np.asarray(H, dtype=float)
    n = H.shape[-1]
    ndim = H.ndim - 2
    if ndim != n:
        raise ValueError(f"H has {ndim} spatial axes but {n}x{n} blocks")
    c = cF(n, alpha)
    det = np.linalg.det(H)
    threshold = 0.0 if c0 is None else c0 ** 2
    bad = ~(det > threshold)
    if np.any(bad):
        node = tuple(int(a[0]) for a in np.nonzero(bad))
        raise PositivityError(f"det H = {det[node]:.3e} <= {threshold:.3e} at node {node}")
    D = np.sqrt(det)
    Hinv = np.linalg.inv(H)
    gradLogD = gradient(np.log(D), h, ndim)
    dH = gradient(H, h, ndim)
    dHinv = gradient(Hinv, h, ndim)
    U = np.einsum("...jpl,...pk->...jkl", dH, Hinv)
    T = build_T(H, t_method)
    Tinv = np.linalg.inv(T)
    dT = gradient(T, h, ndim)
    V = np.einsum("...ijl,...jk->...ikl", dT, Tinv)
    Vt = np.swapaxes(V, -3, -2)
    Vs = 0.5 * (V + Vt)
    Va = 0.5 * (V - Vt)

    eye = np.eye(n)
    checks = {
        "inverse_defect": float(np.max(np.abs(Hinv @ H - eye))),
        "T_defect": float(np.max(np.abs(np.swapaxes(T, -1, -2) @ T - Hinv)) / max(1.0, float(np.max(np.abs(Hinv))))),
        "min_det_T": float(np.min(np.linalg.det(T))),
        "min_D": float(np.min(D)),
        # d(H^{-1}) = -H^{-1} dH H^{-1}: agrees with the differenced inverse to O(h^2)
        "dHinv_identity_defect": float(np.max(np.abs(
            dHinv + np.einsum("...ip,...pql,...qj->...ijl", Hinv, dH, Hinv)))),
    }
    if checks["inverse_defect"] > ALGEBRAIC_TOL * max(1.0, float(np.max(np.abs(Hinv)) * np.max(np.abs(H)))):
        logger.warning("H^{-1} H deviates from identity by %.2e", checks["inverse_defect"])
    return DerivedFields(h, float(alpha), c, t_method, H, D, Hinv, gradLogD, dH, dHinv, U,
                         T, Tinv, dT, V, Vs, Va, grid=grid, checks=checks)


def derived_fields(data, t_method: str = "inv_sqrt") -> DerivedFields:
    """Derived fields of a :class:`~powerdensity.forward.DataBundle` (2D, ``m = n``)."""
    H = data.H.values
    n = data.grid_dim
    if data.m != n:
        raise ValueError(f"single-chart reconstruction needs m = n, got m={data.m}")
    return derive(H[..., :n, :n], data.grid.h, data.alpha, t_method,
                  c0=data.c0_threshold, grid=data.grid)


# ---------------------------------------------------------------------------
# F formulas


def F_from_S_kernel(cF_value: float, gradLogD: np.ndarray, dHinv: np.ndarray, S: np.ndarray) -> np.ndarray:
    """``cF (grad log D + sum_ij (grad H^{ij} . S_i) S_j)``."""
    coef = np.einsum("...ijl,...li->...ij", dHinv, S)
    return cF_value * (gradLogD + np.einsum("...ij,...aj->...a", coef, S))


def F_from_R_kernel(cF_value: float, gradLogD: np.ndarray, V: np.ndarray, R: np.ndarray) -> np.ndarray:
    """``cF (grad log D + sum_ij ((V_ij + V_ji) . R_i) R_j)``."""
    Vsym = V + np.swapaxes(V, -3, -2)
    coef = np.einsum("...ijl,...li->...ij", Vsym, R)
    return cF_value * (gradLogD + np.einsum("...ij,...aj->...a", coef, R))


def frame_defect(S: np.ndarray, H: np.ndarray) -> float:
    """Largest entry of ``S^T S - H``."""
    return float(np.max(np.abs(np.swapaxes(S, -1, -2) @ S - H), initial=0.0))


def orthonormality_defect(R: np.ndarray) -> float:
    n = R.shape[-1]
    return float(np.max(np.abs(np.swapaxes(R, -1, -2) @ R - np.eye(n)), initial=0.0))


def F_from_S(derived: DerivedFields, S, tol: float = 1e-6, report: dict | None = None) -> np.ndarray:
    """``F = grad log sigma`` from an ``S`` frame consistent with ``H``.

    A mismatch ``|S^T S - H| > tol`` is logged and recorded in ``report``
    but not fatal: iterative callers feed frames that are only approximately
    consistent.
    """
    S = S.values if hasattr(S, "values") else np.asarray(S, dtype=float)
    defect = frame_defect(S, derived.H)
    if report is not None:
        report["frame_defect"] = defect
    if defect > tol * max(1.0, float(np.max(np.abs(derived.H)))):
        logger.warning("frame inconsistent with data: max |S^T S - H| = %.3e", defect)
        if report is not None:
            report.setdefault("warnings", []).append(f"S^T S - H mismatch {defect:.3e}")
    return F_from_S_kernel(derived.cF, derived.gradLogD, derived.dHinv, S)


def F_from_R(derived: DerivedFields, R, tol: float = ORTHONORMAL_TOL) -> np.ndarray:
    R = R.values if hasattr(R, "values") else np.asarray(R, dtype=float)
    defect = orthonormality_defect(R)
    if defect > tol:
        raise ValueError(f"R frame is not orthonormal (defect {defect:.3e})")
    return F_from_R_kernel(derived.cF, derived.gradLogD, derived.V, R)


def S_to_R(S: np.ndarray, T: np.ndarray) -> np.ndarray:
    """``R = S T^T``, i.e. ``R_i = t_ij S_j``."""
    return S @ np.swapaxes(T, -1, -2)


def R_to_S(R: np.ndarray, T: np.ndarray) -> np.ndarray:
    """``S_i = t^{ij} R_j``."""
    return R @ np.swapaxes(np.linalg.inv(T), -1, -2)
