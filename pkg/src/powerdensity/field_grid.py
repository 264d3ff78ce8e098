"""Node-centred uniform grids on the unit square and finite-difference calculus.

Fields keep their values as numpy arrays whose leading axes are the spatial
node axes (``values[i, j]`` sits at ``(i*h, j*h)``) followed by component axes.
The differencing kernels only assume "the first ``ndim`` axes are spatial",
so the same code serves 2D grid fields and the 3D synthetic frames used to
check the pointwise algebra.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class Grid:
    """Uniform node-centred grid on ``[0, 1]^2`` with ``nx*ny`` nodes."""

    nx: int
    ny: int

    def __post_init__(self):
        if self.nx < 3 or self.ny < 3:
            raise ValueError(f"grid needs at least 3 nodes per axis, got {self.nx}x{self.ny}")
        if self.nx != self.ny:
            # a single spacing h = 1/(nx-1) only covers the unit square if nx == ny
            raise ValueError(f"unit-square grid must be square, got {self.nx}x{self.ny}")

    @classmethod
    def from_cells(cls, cells: int) -> "Grid":
        """Grid with ``cells`` intervals per axis, i.e. ``cells + 1`` nodes."""
        return cls(cells + 1, cells + 1)

    @property
    def h(self) -> float:
        return 1.0 / (self.nx - 1)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def cells(self) -> int:
        return self.nx - 1

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Node coordinates ``(x1, x2)`` as ``(nx, ny)`` arrays (ij indexing)."""
        i = np.arange(self.nx)
        j = np.arange(self.ny)
        return np.meshgrid(i * self.h, j * self.h, indexing="ij")

    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        mask[0, :] = mask[-1, :] = mask[:, 0] = mask[:, -1] = True
        return mask

    def boundary_loop(self) -> tuple[np.ndarray, np.ndarray]:
        """Boundary node indices walked counter-clockwise from the corner (0, 0)."""
        n, m = self.nx - 1, self.ny - 1
        ii = np.concatenate([np.arange(0, n), np.full(m, n), np.arange(n, 0, -1), np.zeros(m, int)])
        jj = np.concatenate([np.zeros(n, int), np.arange(0, m), np.full(n, m), np.arange(m, 0, -1)])
        return ii, jj

    def centre_index(self) -> tuple[int, int]:
        return (self.nx // 2, self.ny // 2)


@dataclass
class Field:
    """Grid-sampled quantity. ``values`` has shape ``grid.shape + component_shape``."""

    grid: Grid
    values: np.ndarray
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape[:2] != self.grid.shape:
            raise ValueError(f"values shape {self.values.shape} does not match grid {self.grid.shape}")

    @property
    def component_shape(self) -> tuple[int, ...]:
        return self.values.shape[2:]

    @property
    def components(self) -> int:
        return int(np.prod(self.component_shape, dtype=int))


class ScalarField(Field):
    def __post_init__(self):
        super().__post_init__()
        if self.values.ndim != 2:
            raise ValueError("scalar field needs one value per node")


class VectorField(Field):
    def __post_init__(self):
        super().__post_init__()
        if self.values.ndim != 3:
            raise ValueError("vector field needs an n-vector per node")

    @property
    def n(self) -> int:
        return self.values.shape[-1]


class FrameField(Field):
    """``m`` n-vectors per node, stored as the columns of an ``(n, m)`` matrix."""

    def __post_init__(self):
        super().__post_init__()
        if self.values.ndim != 4:
            raise ValueError("frame field needs an (n, m) matrix per node")
        n, m = self.values.shape[2:]
        if m < n:
            raise ValueError(f"frame needs m >= n vectors, got m={m}, n={n}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("frame field has non-finite entries")

    @property
    def n(self) -> int:
        return self.values.shape[2]

    @property
    def m(self) -> int:
        return self.values.shape[3]

    def vector(self, i: int) -> VectorField:
        return VectorField(self.grid, self.values[..., :, i], name=f"{self.name}_{i + 1}")


class MatrixField(Field):
    def __post_init__(self):
        super().__post_init__()
        if self.values.ndim != 4 or self.values.shape[2] != self.values.shape[3]:
            raise ValueError("matrix field needs a square matrix per node")

    @property
    def dim(self) -> int:
        return self.values.shape[-1]

    def symmetry_defect(self) -> float:
        return float(np.max(np.abs(self.values - np.swapaxes(self.values, -1, -2)), initial=0.0))


# ---------------------------------------------------------------------------
# difference kernels on raw arrays


def _derivative_axis(f: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Second-order derivative along ``axis``.

    Central differences inside. At each end the stencil is the central one
    applied with a ghost value obtained by cubic extrapolation, which gives
    ``(-4 f0 + 7 f1 - 4 f2 + f3) / 2h``. That stencil is second order and its
    leading error term equals the interior one (``h^2 f'''/6``), so the
    discretisation error stays smooth up to the boundary and nested
    derivatives keep second order there as well.
    """
    f = np.moveaxis(f, axis, 0)
    if f.shape[0] < 4:
        out = np.gradient(f, h, axis=0, edge_order=2)
        return np.moveaxis(out, 0, axis)
    out = np.empty_like(f)
    out[1:-1] = (f[2:] - f[:-2]) / (2.0 * h)
    out[0] = (-4.0 * f[0] + 7.0 * f[1] - 4.0 * f[2] + f[3]) / (2.0 * h)
    out[-1] = (4.0 * f[-1] - 7.0 * f[-2] + 4.0 * f[-3] - f[-4]) / (2.0 * h)
    return np.moveaxis(out, 0, axis)


def gradient(values: np.ndarray, h: float, ndim: int = 2) -> np.ndarray:
    """Gradient of an array whose first ``ndim`` axes are spatial.

    The derivative index is appended as the last axis, so a field of shape
    ``(nx, ny, a, b)`` yields ``(nx, ny, a, b, ndim)``.
    """
    values = np.asarray(values, dtype=float)
    return np.stack([_derivative_axis(values, h, k) for k in range(ndim)], axis=-1)


def divergence(values: np.ndarray, h: float, ndim: int = 2) -> np.ndarray:
    """Divergence over the last axis of an array of vectors (any extra axes kept)."""
    values = np.asarray(values, dtype=float)
    if values.shape[-1] != ndim:
        raise ValueError(f"divergence needs {ndim}-vectors, got last axis {values.shape[-1]}")
    return sum(_derivative_axis(values[..., k], h, k) for k in range(ndim))


def curl2(values: np.ndarray, h: float) -> np.ndarray:
    """Scalar curl ``d1 V2 - d2 V1`` of a planar vector array."""
    values = np.asarray(values, dtype=float)
    if values.shape[-1] != 2:
        raise ValueError("curl2 is only defined for 2-vector fields")
    return _derivative_axis(values[..., 1], h, 0) - _derivative_axis(values[..., 0], h, 1)


def curl3(values: np.ndarray, h: float) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if values.shape[-1] != 3:
        raise ValueError("curl3 needs 3-vector fields")
    d = lambda c, k: _derivative_axis(values[..., c], h, k)  # noqa: E731
    return np.stack([d(2, 1) - d(1, 2), d(0, 2) - d(2, 0), d(1, 0) - d(0, 1)], axis=-1)


def diff(f: Field, kind: str) -> Field:
    """Finite-difference ``grad``, ``div`` or ``curl2`` of a grid field."""
    h = f.grid.h
    if kind == "grad":
        if not isinstance(f, ScalarField):
            raise ValueError("grad is defined for scalar fields")
        return VectorField(f.grid, gradient(f.values, h), name=f"grad_{f.name}")
    if kind == "div":
        if f.values.ndim != 3:
            raise ValueError("div is defined for vector fields")
        return ScalarField(f.grid, divergence(f.values, h), name=f"div_{f.name}")
    if kind == "curl2":
        if f.values.ndim != 3:
            raise ValueError("curl2 is defined for vector fields")
        return ScalarField(f.grid, curl2(f.values, h), name=f"curl_{f.name}")
    raise ValueError(f"unknown derivative kind {kind!r}")


# ---------------------------------------------------------------------------
# norms


def trapezoid_weights(grid: Grid) -> np.ndarray:
    w1 = np.full(grid.nx, grid.h)
    w1[[0, -1]] *= 0.5
    w2 = np.full(grid.ny, grid.h)
    w2[[0, -1]] *= 0.5
    return np.outer(w1, w2)


def _pointwise_sq(values: np.ndarray, spatial: int = 2) -> np.ndarray:
    return np.sum(values.reshape(values.shape[:spatial] + (-1,)) ** 2, axis=-1)


def norm(f: Field | np.ndarray, kind: str, grid: Grid | None = None) -> float:
    """Discrete ``Linf``, ``L2``, ``W1inf`` or ``H1`` norm.

    Vector/matrix fields are measured with the pointwise Euclidean (Frobenius)
    norm for ``L2``/``H1`` and the largest component magnitude for ``Linf``
    and ``W1inf``. ``L2`` uses trapezoidal weights.
    """
    if isinstance(f, Field):
        grid, values = f.grid, f.values
    else:
        values = np.asarray(f, dtype=float)
        if grid is None:
            raise ValueError("raw arrays need an explicit grid")
    if not np.all(np.isfinite(values)):
        raise ValueError("norm of a non-finite field")
    if kind == "Linf":
        return float(np.max(np.abs(values), initial=0.0))
    if kind == "L2":
        return float(np.sqrt(np.sum(trapezoid_weights(grid) * _pointwise_sq(values))))
    grad = gradient(values, grid.h)
    if kind == "W1inf":
        return max(float(np.max(np.abs(values), initial=0.0)), float(np.max(np.abs(grad), initial=0.0)))
    if kind == "H1":
        w = trapezoid_weights(grid)
        return float(np.sqrt(np.sum(w * _pointwise_sq(values)) + np.sum(w * _pointwise_sq(grad))))
    raise ValueError(f"unknown norm {kind!r}")


def norms(f: Field | np.ndarray, kind: str, grid: Grid | None = None) -> float:
    return norm(f, kind, grid)


# ---------------------------------------------------------------------------
# bilinear sampling


def bilinear(values: np.ndarray, grid: Grid, x1: np.ndarray | float, x2: np.ndarray | float) -> np.ndarray:
    """Bilinear interpolation of node values at physical points inside the square."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    s = np.clip(x1 / grid.h, 0, grid.nx - 1)
    t = np.clip(x2 / grid.h, 0, grid.ny - 1)
    i0 = np.minimum(np.floor(s).astype(int), grid.nx - 2)
    j0 = np.minimum(np.floor(t).astype(int), grid.ny - 2)
    a = s - i0
    b = t - j0
    extra = (None,) * (values.ndim - 2)
    a = a[(...,) + extra]
    b = b[(...,) + extra]
    return ((1 - a) * (1 - b) * values[i0, j0] + a * (1 - b) * values[i0 + 1, j0]
            + (1 - a) * b * values[i0, j0 + 1] + a * b * values[i0 + 1, j0 + 1])


# ---------------------------------------------------------------------------
# file formats


def _field_class(component_shape: tuple[int, ...]):
    if component_shape == ():
        return ScalarField
    if len(component_shape) == 1:
        return VectorField
    if len(component_shape) == 2 and component_shape[0] == component_shape[1]:
        return MatrixField
    return FrameField


def save_field(f: Field, path: str | Path) -> Path:
    """Write ``<path>.json`` metadata and ``<path>.bin`` little-endian float64 values.

    The binary is component-major: all nodes of component 0, then component 1,
    and so on. Within a component nodes are row-major over ``(i, j)``, i.e.
    offset ``i*ny + j``.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    comp = f.component_shape
    data = np.moveaxis(f.values.reshape(f.grid.shape + (-1,)), -1, 0)
    data.astype("<f8").tofile(path.with_suffix(".bin"))
    meta = {
        "nx": f.grid.nx,
        "ny": f.grid.ny,
        "h": f.grid.h,
        "components": f.components,
        "component_shape": list(comp),
        "name": f.name,
    }
    if f.meta:
        meta["meta"] = f.meta
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2))
    return path


def load_field(path: str | Path) -> Field:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    grid = Grid(meta["nx"], meta["ny"])
    comp = tuple(meta.get("component_shape", [] if meta["components"] == 1 else [meta["components"]]))
    raw = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
    expected = meta["components"] * grid.nx * grid.ny
    if raw.size != expected:
        raise ValueError(f"{path}: expected {expected} values, found {raw.size}")
    values = np.moveaxis(raw.reshape((meta["components"],) + grid.shape), 0, -1).reshape(grid.shape + comp)
    return _field_class(comp)(grid, values, name=meta.get("name", ""), meta=meta.get("meta", {}))


def export_csv(f: Field, path: str | Path) -> Path:
    """One node per line: ``x1,x2,c0,c1,...``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    x1, x2 = f.grid.coords()
    flat = f.values.reshape(f.grid.shape + (-1,))
    cols = [f"c{k}" for k in range(flat.shape[-1])]
    table = np.column_stack([x1.ravel(), x2.ravel(), flat.reshape(-1, flat.shape[-1])])
    np.savetxt(path, table, delimiter=",", header=",".join(["x1", "x2"] + cols), comments="")
    return path
