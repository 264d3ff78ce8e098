"""Conservative 5-point operators on the unit-square grid and Krylov wrappers."""

from __future__ import annotations

import logging

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .field_grid import Grid

logger = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """Krylov iteration failed to reach its tolerance."""

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(f"{message} (relative residual {residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


def node_index(grid: Grid) -> np.ndarray:
    return np.arange(grid.nx * grid.ny).reshape(grid.shape)


def edge_operator(grid: Grid, ax: np.ndarray, ay: np.ndarray) -> sp.csr_matrix:
    """Assemble ``sum_e G_e^T A_e G_e`` over grid edges.

    ``ax`` holds the ``m x m`` coefficient of each x1-edge, shape
    ``(nx-1, ny, m, m)``; ``ay`` the x2-edges, shape ``(nx, ny-1, m, m)``.
    Unknowns are ordered component-major: index ``c*N + i*ny + j``. With SPD
    edge blocks the result is symmetric positive semi-definite; it is the
    (negative) flux-form discretisation of ``div(A grad u)`` without the
    ``1/h^2`` factor.
    """
    idx = node_index(grid)
    N = grid.nx * grid.ny
    m = ax.shape[-1]
    rows, cols, vals = [], [], []
    for a_nodes, b_nodes, coef in ((idx[:-1, :], idx[1:, :], ax), (idx[:, :-1], idx[:, 1:], ay)):
        a = a_nodes.ravel()
        b = b_nodes.ravel()
        coef = coef.reshape(-1, m, m)
        for c in range(m):
            for d in range(m):
                w = coef[:, c, d]
                if not np.any(w):
                    continue
                ra, rb = c * N + a, c * N + b
                ca, cb = d * N + a, d * N + b
                rows += [ra, rb, ra, rb]
                cols += [ca, cb, cb, ca]
                vals += [w, w, -w, -w]
    K = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(m * N, m * N))
    return K.tocsr()


def scalar_edge_coefficients(sigma: np.ndarray, mean: str = "harmonic") -> tuple[np.ndarray, np.ndarray]:
    if mean == "harmonic":
        f = lambda p, q: 2.0 * p * q / (p + q)  # noqa: E731
    elif mean == "arithmetic":
        f = lambda p, q: 0.5 * (p + q)  # noqa: E731
    else:
        raise ValueError(f"unknown edge mean {mean!r}")
    ax = f(sigma[:-1, :], sigma[1:, :])[..., None, None]
    ay = f(sigma[:, :-1], sigma[:, 1:])[..., None, None]
    return ax, ay


def matrix_edge_coefficients(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Arithmetic edge means of a nodal field of ``m x m`` matrices (keeps SPD)."""
    return 0.5 * (A[:-1, :] + A[1:, :]), 0.5 * (A[:, :-1] + A[:, 1:])


def interior_split(grid: Grid, m: int = 1) -> tuple[np.ndarray, np.ndarray]:
    inner = ~grid.boundary_mask().ravel()
    full = np.tile(inner, m)
    return np.nonzero(full)[0], np.nonzero(~full)[0]


def cg_solve(A, b: np.ndarray, tol: float = 1e-10, maxiter: int | None = None,
             x0: np.ndarray | None = None, what: str = "linear system") -> tuple[np.ndarray, dict]:
    """Jacobi-preconditioned conjugate gradients to relative residual ``tol``."""
    A = sp.csr_matrix(A)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros_like(b), {"iterations": 0, "residual": 0.0}
    diag = A.diagonal()
    M = sp.diags(1.0 / diag)
    count = [0]

    def _cb(_):
        count[0] += 1

    maxiter = maxiter or max(1000, 10 * A.shape[0])
    x, info = spla.cg(A, b, x0=x0, rtol=tol, atol=0.0, maxiter=maxiter, M=M, callback=_cb)
    res = float(np.linalg.norm(b - A @ x)) / bnorm
    stats = {"iterations": count[0], "residual": res}
    if info != 0 or res > 10 * tol:
        raise SolverError(f"CG did not converge on {what}", res, count[0])
    return x, stats


def gmres_solve(A, b: np.ndarray, tol: float = 1e-10, maxiter: int | None = None,
                what: str = "linear system") -> tuple[np.ndarray, dict]:
    """ILU-preconditioned restarted GMRES for the non-symmetric cross-check systems."""
    A = sp.csc_matrix(A)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros_like(b), {"iterations": 0, "residual": 0.0}
    ilu = spla.spilu(A, drop_tol=1e-5, fill_factor=20)
    M = spla.LinearOperator(A.shape, ilu.solve)
    count = [0]

    def _cb(_):
        count[0] += 1

    x, info = spla.gmres(A, b, rtol=tol, atol=0.0, restart=50, maxiter=maxiter or 200, M=M,
                         callback=_cb, callback_type="pr_norm")
    res = float(np.linalg.norm(b - A @ x)) / bnorm
    stats = {"iterations": count[0], "residual": res}
    if info != 0 and res > 10 * tol:
        raise SolverError(f"GMRES did not converge on {what}", res, count[0])
    return x, stats


def dirichlet_solve(grid: Grid, K: sp.spmatrix, boundary: np.ndarray, rhs: np.ndarray | None = None,
                    tol: float = 1e-10, maxiter: int | None = None, symmetric: bool = True,
                    what: str = "Dirichlet problem") -> tuple[np.ndarray, dict]:
    """Solve ``K u = rhs`` on interior nodes with ``u = boundary`` on the boundary.

    ``boundary`` and ``rhs`` are component-stacked node arrays of shape
    ``(m, nx, ny)`` (or ``(nx, ny)`` for a single component); only boundary
    entries of ``boundary`` are read.
    """
    single = boundary.ndim == 2
    bvals = boundary[None] if single else boundary
    m = bvals.shape[0]
    inner, outer = interior_split(grid, m)
    u = bvals.reshape(-1).astype(float).copy()
    K = sp.csr_matrix(K)
    b = -K[inner][:, outer] @ u[outer]
    if rhs is not None:
        b = b + (rhs[None] if single else rhs).reshape(-1)[inner]
    A = K[inner][:, inner]
    # start from the mean boundary value so constant solutions are exact
    x0 = np.repeat([bvals[c][grid.boundary_mask()].mean() for c in range(m)],
                   len(inner) // m)
    r0 = b - A @ x0
    bn, rn = float(np.linalg.norm(b)), float(np.linalg.norm(r0))
    if rn == 0.0 or rn <= tol * bn:
        x, stats = x0, {"iterations": 0, "residual": rn / bn if bn else 0.0}
    else:
        # correction solve; tolerance rescaled so the residual target stays tol * |b|
        local_tol = tol * bn / rn if bn else tol
        solver = cg_solve if symmetric else gmres_solve
        dx, stats = solver(A, r0, tol=local_tol, maxiter=maxiter, what=what)
        x = x0 + dx
    u[inner] = x
    out = u.reshape((m,) + grid.shape)
    return (out[0] if single else out), stats


def laplacian_operator(grid: Grid) -> sp.csr_matrix:
    ones = np.ones(grid.shape)
    ax, ay = scalar_edge_coefficients(ones, "arithmetic")
    return edge_operator(grid, ax, ay)


def poisson_dirichlet(grid: Grid, rhs: np.ndarray, boundary: np.ndarray, tol: float = 1e-12,
                      what: str = "Poisson problem") -> tuple[np.ndarray, dict]:
    """5-point solve of ``Laplace(u) = rhs`` with Dirichlet values ``boundary``."""
    K = laplacian_operator(grid)
    return dirichlet_solve(grid, K, boundary, rhs=-grid.h ** 2 * rhs, tol=tol, what=what)
