"""Coupled elliptic reconstruction: drift fields, the system for ``u_i``, and ``sigma`` from the solutions."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import sparse_ops
from .field_grid import Grid, ScalarField, VectorField, divergence, gradient
from .frames import DerivedFields
from .ode import integrate_gradient, path_dependence
from .report import ReconReport

logger = logging.getLogger(__name__)

NEGATIVE_FRACTION_LIMIT = 1e-3


class ReconstructionError(RuntimeError):
    """Data inconsistent with the reconstruction formula (e.g. wrong alpha)."""


@dataclass
class DriftFields:
    """``W[..., i, k, :]`` is the vector field ``W_ik``; ``W_first`` is the cross-check form."""

    W: np.ndarray
    W_first: np.ndarray

    @property
    def forms_defect(self) -> float:
        return float(np.max(np.abs(self.W - self.W_first)))

    @property
    def sup_norm(self) -> float:
        """``sup_x (sum_ik |W_ik(x)|^2)^{1/2}``."""
        return float(np.sqrt(np.max(np.sum(self.W ** 2, axis=(-3, -2, -1)))))


def build_W(derived: DerivedFields) -> DriftFields:
    """``W_ik = grad log D delta_ik + H_il grad H^{kl}``, with ``(H_il/D) grad(D H^{lk})`` alongside."""
    n = derived.n
    eye = np.eye(n)
    W = (eye[:, :, None] * derived.gradLogD[..., None, None, :]
         + np.einsum("...il,...kld->...ikd", derived.H, derived.dHinv))
    DHinv = derived.D[..., None, None] * derived.Hinv
    dDHinv = gradient(DHinv, derived.h, derived.ndim)
    W1 = np.einsum("...il,...lkd->...ikd", derived.H / derived.D[..., None, None], dDHinv)
    return DriftFields(W, W1)


def divergence_operator(derived: DerivedFields) -> sp.csr_matrix:
    """Flux-form assembly of ``-div(D H^{-1} grad u)`` with arithmetic edge means (block SPD)."""
    A = derived.D[..., None, None] * derived.Hinv
    ax, ay = sparse_ops.matrix_edge_coefficients(A)
    return sparse_ops.edge_operator(derived.grid, ax, ay)


def _central_difference_ops(grid: Grid) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    # rows are only used at interior nodes, where no wrap-around occurs
    N = grid.nx * grid.ny
    c = 1.0 / (2.0 * grid.h)
    Dx = sp.diags([-c * np.ones(N - grid.ny), c * np.ones(N - grid.ny)], [-grid.ny, grid.ny], shape=(N, N))
    Dy = sp.diags([-c * np.ones(N - 1), c * np.ones(N - 1)], [-1, 1], shape=(N, N))
    return Dx.tocsr(), Dy.tocsr()


def drift_operator(grid: Grid, W: np.ndarray) -> sp.csr_matrix:
    """``B v = (sum_k W_ik . grad v_k)_i`` with central differences, component-major."""
    Dx, Dy = _central_difference_ops(grid)
    n = W.shape[-2]
    blocks = [[sp.diags(W[..., i, k, 0].ravel()) @ Dx + sp.diags(W[..., i, k, 1].ravel()) @ Dy
               for k in range(n)] for i in range(n)]
    return sp.bmat(blocks).tocsr()


def nondivergence_operator(derived: DerivedFields, drift: DriftFields) -> sp.csr_matrix:
    """``-h^2 (Lap u_i + cF W_ik . grad u_k)``."""
    grid = derived.grid
    L = sparse_ops.laplacian_operator(grid)
    n = derived.n
    K = sp.block_diag([L] * n) - grid.h ** 2 * derived.cF * drift_operator(grid, drift.W)
    return K.tocsr()


def solve_coupled(data, derived: DerivedFields, boundary: np.ndarray, tol: float = 1e-10,
                  max_iter: int | None = None, cross_check: bool = True) -> tuple[np.ndarray, dict]:
    """Solve for ``u_1..u_n`` with Dirichlet data ``boundary`` (shape ``(n, nx, ny)``).

    The divergence form is primary; ``cF = 1`` in two dimensions makes it
    block SPD, so CG applies. The nondivergence form is solved by GMRES as a
    cross-check when ``cross_check`` is set.
    """
    grid = data.grid
    n = derived.n
    if abs(derived.cF - 1.0) > 1e-14:
        raise ValueError("the divergence form is symmetric only for cF = 1")
    boundary = np.asarray(boundary, dtype=float)[:n]
    max_iter = max_iter or 20 * grid.nx
    K = divergence_operator(derived)
    info = {}
    try:
        u, stats = sparse_ops.dirichlet_solve(grid, K, boundary, tol=tol, maxiter=max_iter * n,
                                              what="divergence-form coupled system")
    except sparse_ops.SolverError as exc:
        raise sparse_ops.SolverError(
            f"{exc}; min det H = {float(np.min(derived.D) ** 2):.3e} (Fredholm failure suspect)",
            exc.residual, exc.iterations) from exc
    info["divergence"] = stats
    if cross_check:
        drift = build_W(derived)
        Kn = nondivergence_operator(derived, drift)
        un, st = sparse_ops.dirichlet_solve(grid, Kn, boundary, tol=tol, maxiter=max_iter,
                                            symmetric=False, what="nondivergence coupled system")
        info["nondivergence"] = st
        info["forms_difference"] = float(np.max(np.abs(u - un)))
        info["W_forms_defect"] = drift.forms_defect
    return u, info


def potential_gradient(u: np.ndarray, derived: DerivedFields) -> np.ndarray:
    """Right-hand side of the gradient equation for ``sigma^{-2 alpha}`` (or ``log sigma`` at ``alpha = 0``)."""
    grad_u = np.stack([gradient(ui, derived.h) for ui in u], axis=-2)  # (..., i, d)
    DHinv = derived.D[..., None, None] * derived.Hinv
    dDHinv = gradient(DHinv, derived.h)
    coef = np.einsum("...ijd,...id->...ij", dDHinv, grad_u)
    Q = np.einsum("...ij,...jd->...d", coef, grad_u) / derived.D[..., None]
    if derived.alpha == 0:
        return Q
    return -2.0 * derived.alpha * derived.cF * Q


def sigma_from_solutions(u: np.ndarray, derived: DerivedFields, sigma_boundary: np.ndarray,
                         x0: tuple[int, int] | None = None, tol: float = 1e-12) -> dict:
    """Recover ``sigma`` from reconstructed solutions.

    The potential (``sigma^{-2 alpha}``, or ``log sigma`` for ``alpha = 0``)
    is obtained from a Poisson problem with boundary values taken from
    ``sigma_boundary``, and by path integration from ``x0`` as a cross-check.
    """
    grid = derived.grid
    alpha = derived.alpha
    G = potential_gradient(u, derived)
    sb = np.asarray(sigma_boundary, dtype=float)
    pot_b = np.log(sb) if alpha == 0 else sb ** (-2 * alpha)
    psi, stats = sparse_ops.poisson_dirichlet(grid, divergence(G, grid.h), pot_b, tol=tol,
                                              what="potential Poisson problem")
    x0 = grid.centre_index() if x0 is None else x0
    psi_path = integrate_gradient(G, grid, x0, float(psi[x0]))
    out = {"potential": psi, "potential_path": psi_path, "G": G, "poisson": stats,
           "route_difference": float(np.max(np.abs(psi - psi_path))),
           "path_dependence": path_dependence(G, grid, x0),
           "curl_residual": float(np.max(np.abs(gradient(G[..., 1], grid.h)[..., 0]
                                                - gradient(G[..., 0], grid.h)[..., 1])))}
    if alpha == 0:
        out["sigma"] = np.exp(psi)
        out["clamped_fraction"] = 0.0
        return out
    bad = psi <= 0
    frac = float(np.mean(bad))
    if frac > NEGATIVE_FRACTION_LIMIT:
        raise ReconstructionError(f"sigma^(-2 alpha) <= 0 on {100 * frac:.2f}% of nodes "
                                  "(inconsistent data or wrong alpha)")
    if np.any(bad):
        logger.warning("clamping %d non-positive values of sigma^(-2 alpha)", int(bad.sum()))
        psi = np.where(bad, np.min(psi[~bad]), psi)
    out["sigma"] = psi ** (-1.0 / (2 * alpha))
    out["clamped_fraction"] = frac
    return out


# ---------------------------------------------------------------------------
# operator diagnostics


def _interior_laplacian(grid: Grid):
    inner, _ = sparse_ops.interior_split(grid, 1)
    L = sparse_ops.laplacian_operator(grid)
    return L[inner][:, inner].tocsc(), inner


def dirichlet_eigenvalue(grid: Grid) -> float:
    """Smallest eigenvalue of the discrete 5-point Dirichlet Laplacian on the unit square."""
    h = grid.h
    return 8.0 / h ** 2 * np.sin(np.pi * h / 2) ** 2


def estimate_PW_norm(data, derived: DerivedFields, iterations: int = 50, rtol: float = 1e-6,
                     seed: int = 0, fredholm_eigs: int = 6) -> dict:
    """Power iteration for the norm of ``P_W v = Lap_D^{-1}(W_ij . grad v_j) e_i`` on ``H_0^1``.

    Returns the estimate, the bound ``sqrt(m) |Lap_D^{-1}| |W|_inf`` and the
    smallest ``|1 + cF lambda|`` over the leading eigenvalues of ``P_W``.
    """
    grid = data.grid
    n = derived.n
    drift = build_W(derived)
    Wsup = drift.sup_norm
    lam = dirichlet_eigenvalue(grid)
    bound = np.sqrt(n) * Wsup / np.sqrt(lam)
    out = {"bound": float(bound), "W_sup": Wsup, "lambda_min": float(lam)}
    if Wsup == 0.0:
        out.update(estimate=0.0, iterations=0, fredholm_margin=1.0, eigenvalues=[])
        return out
    L, inner = _interior_laplacian(grid)
    lu = spla.splu(L)
    nin = len(inner)
    B_full = drift_operator(grid, drift.W)
    idx = np.concatenate([c * grid.nx * grid.ny + inner for c in range(n)])
    B = B_full[idx][:, idx]
    h2 = grid.h ** 2

    def solveK(x):
        return np.concatenate([lu.solve(x[c * nin:(c + 1) * nin]) for c in range(n)])

    def applyK(x):
        return np.concatenate([L @ x[c * nin:(c + 1) * nin] for c in range(n)])

    def P(x):
        return h2 * solveK(B @ x)

    def PstarP(x):
        # adjoint in the K inner product: K^{-1} P^T K
        return h2 * solveK(B.T @ applyK(P(x)))

    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n * nin)
    x /= np.sqrt(x @ applyK(x))
    est, it = 0.0, 0
    for it in range(1, iterations + 1):
        y = PstarP(x)
        new = float(np.sqrt(max(x @ applyK(y), 0.0)))
        x = y / np.sqrt(y @ applyK(y))
        if abs(new - est) <= rtol * new:
            est = new
            break
        est = new
    out.update(estimate=est, iterations=it)
    op = spla.LinearOperator((n * nin, n * nin), matvec=P, dtype=float)
    try:
        k = min(fredholm_eigs, n * nin - 2)
        ev = spla.eigs(op, k=k, which="LM", return_eigenvectors=False,
                       v0=rng.standard_normal(n * nin))
        out["eigenvalues"] = [complex(e) for e in ev]
        out["fredholm_margin"] = float(np.min(np.abs(1.0 + derived.cF * ev)))
    except spla.ArpackError as exc:
        logger.warning("eigenvalue estimate for P_W failed: %s", exc)
        out["eigenvalues"], out["fredholm_margin"] = [], float("nan")
    return out


def spd_probe(derived: DerivedFields) -> dict:
    """Dense Cholesky of the interior divergence-form matrix (small grids only)."""
    grid = derived.grid
    K = divergence_operator(derived)
    inner, _ = sparse_ops.interior_split(grid, derived.n)
    A = K[inner][:, inner].toarray()
    sym = float(np.max(np.abs(A - A.T)))
    try:
        Lc = sla.cholesky(A, lower=True)
        pivots = np.diag(Lc) ** 2
        return {"spd": bool(sym < 1e-12), "symmetry_defect": sym, "min_pivot": float(pivots.min()),
                "negative_pivots": 0}
    except sla.LinAlgError:
        _, Dm, _ = sla.ldl(A)
        neg = int(np.sum(np.linalg.eigvalsh(Dm) < 0))
        return {"spd": False, "symmetry_defect": sym, "min_pivot": float("nan"), "negative_pivots": neg}


def coercivity_probe(derived: DerivedFields) -> dict:
    """Smallest eigenvalue of the divergence-form matrix against ``c0/(n |H|_inf)`` times the Laplacian's."""
    grid = derived.grid
    n = derived.n
    K = divergence_operator(derived)
    inner, _ = sparse_ops.interior_split(grid, n)
    A = K[inner][:, inner].tocsc()
    lam_div = float(spla.eigsh(A, k=1, sigma=0, which="LM", return_eigenvectors=False)[0])
    lam_lap = grid.h ** 2 * dirichlet_eigenvalue(grid)
    c0 = float(np.min(derived.D))
    Hsup = float(np.max(np.abs(derived.H)))
    lower = c0 / (n * Hsup) * lam_lap
    return {"lambda_min": lam_div, "lower_bound": lower, "pass": bool(lam_div >= lower * (1 - 1e-8))}


def reconstruct_sigma_elliptic(data, t_method: str = "inv_sqrt", tol: float = 1e-10,
                               max_iter: int | None = None) -> ReconReport:
    """Solve the coupled system with the synthetic illuminations, then recover ``sigma``."""
    t_start = time.perf_counter()
    if data.truth is None or data.truth.u.shape[0] == 0:
        raise ValueError("elliptic reconstruction needs the illumination boundary data")
    derived = data.derived(t_method)
    grid = data.grid
    u, info = solve_coupled(data, derived, data.truth.u, tol=tol, max_iter=max_iter)
    rec = sigma_from_solutions(u, derived, data.truth.sigma)
    sigma = rec["sigma"]
    rep = ReconReport("elliptic", data.alpha, grid, sigma, np.log(sigma),
                      fields={"potential": ScalarField(grid, rec["potential"], name="potential"),
                              "G": VectorField(grid, rec["G"], name="G")})
    rep.metrics.update({
        "path_dependence": rec["path_dependence"],
        "route_difference": rec["route_difference"],
        "curl_residual": rec["curl_residual"],
        "forms_difference": info.get("forms_difference", float("nan")),
        "W_forms_defect": info.get("W_forms_defect", float("nan")),
        "err_u_Linf": float(np.max(np.abs(u - data.truth.u[:derived.n]))),
        "clamped_fraction": rec["clamped_fraction"],
        "min_det": float(np.min(derived.D) ** 2),
    })
    rep.meta["solver"] = {k: v for k, v in info.items() if isinstance(v, dict)}
    rep.fields.update({f"u{i + 1}": ScalarField(grid, u[i], name=f"u{i + 1}") for i in range(derived.n)})
    rep.add_errors(data.truth.sigma)
    rep.metrics["runtime"] = time.perf_counter() - t_start
    return rep
