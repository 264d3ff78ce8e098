import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import observed_order
from powerdensity.field_grid import (FrameField, Grid, MatrixField, ScalarField, VectorField, curl2, diff,
                                     divergence, export_csv, gradient, load_field, norm, norms, save_field)


def test_grid_geometry():
    g = Grid.from_cells(4)
    assert g.shape == (5, 5) and g.h == 0.25
    x1, x2 = g.coords()
    assert x1[3, 1] == 0.75 and x2[3, 1] == 0.25
    ii, jj = g.boundary_loop()
    assert (ii[0], jj[0]) == (0, 0)
    assert len(ii) == 4 * g.cells
    assert len(set(zip(ii.tolist(), jj.tolist()))) == int(g.boundary_mask().sum())


@pytest.mark.parametrize("nx,ny", [(2, 2), (5, 2), (4, 6)])
def test_grid_rejects_bad_sizes(nx, ny):
    with pytest.raises(ValueError):
        Grid(nx, ny)


def test_field_shape_checks():
    g = Grid.from_cells(4)
    with pytest.raises(ValueError):
        ScalarField(g, np.zeros((4, 4)))
    with pytest.raises(ValueError):
        VectorField(g, np.zeros(g.shape))
    with pytest.raises(ValueError):
        FrameField(g, np.zeros(g.shape + (2, 1)))


def test_grad_of_linear_is_exact():
    g = Grid.from_cells(16)
    x1, x2 = g.coords()
    gr = diff(ScalarField(g, x1), "grad").values
    assert np.max(np.abs(gr[..., 0] - 1)) < 1e-12
    assert np.max(np.abs(gr[..., 1])) < 1e-12


def test_div_of_identity_field_is_two():
    g = Grid.from_cells(16)
    x1, x2 = g.coords()
    d = diff(VectorField(g, np.stack([x1, x2], -1)), "div").values
    assert np.max(np.abs(d - 2)) < 1e-12


def test_grad_exponential_second_order():
    errs = []
    for cells in (32, 64):
        g = Grid.from_cells(cells)
        x1, _ = g.coords()
        gr = gradient(np.exp(2 * x1), g.h)
        errs.append(np.max(np.abs(gr[..., 0] - 2 * np.exp(2 * x1))))
    # leading error h^2 f'''/6 with f''' <= 8 e^2
    assert errs[1] <= (1 / 64) ** 2 * 8 * np.e ** 2 / 6 * 1.05
    assert observed_order(*errs) >= 1.9


@pytest.mark.parametrize("kind", ["grad", "div"])
def test_smooth_derivatives_converge(kind):
    errs = []
    for cells in (32, 64):
        g = Grid.from_cells(cells)
        x1, x2 = g.coords()
        u = np.sin(2 * x1) * np.cos(3 * x2)
        if kind == "grad":
            exact = np.stack([2 * np.cos(2 * x1) * np.cos(3 * x2), -3 * np.sin(2 * x1) * np.sin(3 * x2)], -1)
            got = diff(ScalarField(g, u), "grad").values
        else:
            V = np.stack([u, x1 * x2 ** 2], -1)
            exact = 2 * np.cos(2 * x1) * np.cos(3 * x2) + 2 * x1 * x2
            got = divergence(V, g.h)
        errs.append(np.max(np.abs(got - exact)))
    assert observed_order(*errs) >= 1.9


def test_div_of_grad_converges():
    errs = []
    for cells in (32, 64):
        g = Grid.from_cells(cells)
        x1, x2 = g.coords()
        u = np.exp(x1) * np.sin(x2)
        lap = divergence(gradient(u, g.h), g.h)
        errs.append(np.max(np.abs(lap)))  # u is harmonic
    assert observed_order(*errs) >= 1.9


@pytest.mark.parametrize("cells", [16, 32, 64])
def test_curl_of_gradient_is_small(cells):
    # axis stencils commute, so the discrete curl of a discrete gradient is round-off
    g = Grid.from_cells(cells)
    x1, x2 = g.coords()
    u = np.exp(x1 * x2) + np.sin(3 * x1)
    assert np.max(np.abs(curl2(gradient(u, g.h), g.h))) <= 1e-9 * np.max(np.abs(u)) / g.h


def test_curl2_rejects_3_vectors():
    g = Grid.from_cells(4)
    with pytest.raises(ValueError):
        diff(VectorField(g, np.zeros(g.shape + (3,))), "curl2")


@pytest.mark.parametrize("kind,expected", [("Linf", 3.0), ("W1inf", 3.0), ("L2", 3.0), ("H1", 3.0)])
def test_norms_of_constant(kind, expected):
    g = Grid.from_cells(8)
    assert norms(ScalarField(g, np.full(g.shape, 3.0)), kind) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("kind", ["Linf", "L2", "W1inf", "H1"])
def test_norms_of_zero(kind):
    g = Grid.from_cells(8)
    assert norm(ScalarField(g, np.zeros(g.shape)), kind) == 0.0


@pytest.mark.parametrize("cells", [8, 32, 128])
def test_h1_of_x1(cells):
    # the trapezoid rule overestimates int x^2 by exactly h^2/6
    g = Grid.from_cells(cells)
    x1, _ = g.coords()
    val = norm(ScalarField(g, x1), "H1") ** 2
    assert val == pytest.approx(1 / 3 + 1 + g.h ** 2 / 6, abs=1e-12)
    assert abs(val - 4 / 3) <= g.h ** 2


def test_norm_rejects_nonfinite():
    g = Grid.from_cells(4)
    v = np.zeros(g.shape)
    v[1, 1] = np.nan
    with pytest.raises(ValueError):
        norm(ScalarField(g, v), "Linf")


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 31 - 1))
def test_operations_are_pure(seed):
    g = Grid.from_cells(12)
    v = np.random.default_rng(seed).standard_normal(g.shape)
    f = ScalarField(g, v.copy())
    a = (diff(f, "grad").values, norm(f, "H1"), norm(f, "W1inf"))
    b = (diff(f, "grad").values, norm(f, "H1"), norm(f, "W1inf"))
    assert np.array_equal(a[0], b[0]) and a[1:] == b[1:]
    assert np.array_equal(f.values, v)


@pytest.mark.parametrize("shape", [(), (2,), (2, 2)])
def test_field_file_roundtrip(tmp_path, shape):
    g = Grid.from_cells(6)
    v = np.random.default_rng(0).standard_normal(g.shape + shape)
    cls = {(): ScalarField, (2,): VectorField, (2, 2): MatrixField}[shape]
    f = cls(g, v, name="x")
    save_field(f, tmp_path / "x")
    meta = json.loads((tmp_path / "x.json").read_text())
    assert {"nx", "ny", "h", "components", "name"} <= set(meta)
    assert (tmp_path / "x.bin").stat().st_size == v.size * 8
    back = load_field(tmp_path / "x")
    assert type(back) is cls and np.array_equal(back.values, v)


def test_csv_export(tmp_path):
    g = Grid.from_cells(3)
    path = export_csv(VectorField(g, np.ones(g.shape + (2,)), name="v"), tmp_path / "v.csv")
    lines = path.read_text().strip().splitlines()
    assert len(lines) == 1 + g.nx * g.ny
