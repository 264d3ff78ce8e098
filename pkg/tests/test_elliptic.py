import numpy as np
import pytest

from conftest import observed_order
from powerdensity.elliptic import (ReconstructionError, build_W, coercivity_probe, estimate_PW_norm,
                                   potential_gradient, reconstruct_sigma_elliptic, sigma_from_solutions,
                                   solve_coupled, spd_probe)
from powerdensity.field_grid import ScalarField, norm
from powerdensity.forward import perturb

O2 = 50.0


def test_W_identity(bundle):
    assert np.max(np.abs(build_W(bundle("constant", 8, 0.5).derived()).W)) < 1e-12


@pytest.mark.parametrize("alpha", [0.5, 1.0])
def test_W_layered(bundle, alpha):
    d = bundle("layered_exp", 64, alpha).derived()
    W = build_W(d).W
    tol = O2 * d.h ** 2
    assert np.max(np.abs(W[..., 0, 0, :] - [2, 0])) < tol
    assert np.max(np.abs(W[..., 1, 1, :] - [-2, 0])) < tol
    assert np.max(np.abs(W[..., 0, 1, :])) < 1e-12 and np.max(np.abs(W[..., 1, 0, :])) < 1e-12


@pytest.mark.parametrize("name", ["bump", "harmonic_sq"])
def test_W_forms_agree(bundle, name):
    errs = [build_W(bundle(name, c, 1.0).derived()).forms_defect for c in (32, 64)]
    assert observed_order(*errs) >= 1.8


def test_coupled_identity(bundle):
    data = bundle("constant", 16, 0.5)
    u, info = solve_coupled(data, data.derived(), data.truth.u)
    x1, x2 = data.grid.coords()
    assert np.max(np.abs(u[0] - x1)) < 1e-9 and np.max(np.abs(u[1] - x2)) < 1e-9


def test_coupled_layered(bundle):
    errs = []
    for cells in (32, 64):
        data = bundle("layered_exp", cells, 1.0)
        u, _ = solve_coupled(data, data.derived(), data.truth.u)
        x1, x2 = data.grid.coords()
        errs.append(max(np.max(np.abs(u[0] - 0.5 * (1 - np.exp(-2 * x1)))), np.max(np.abs(u[1] - x2))))
    assert errs[1] < 1e-3


@pytest.mark.parametrize("name", ["bump", "harmonic_sq"])
def test_forms_agree(bundle, name):
    diffs = []
    for cells in (32, 64):
        data = bundle(name, cells, 0.5)
        _, info = solve_coupled(data, data.derived(), data.truth.u)
        diffs.append(info["forms_difference"])
    assert observed_order(*diffs) >= 1.8


def test_coupled_solution_lipschitz(bundle):
    data = bundle("bump", 32, 1.0)
    u, _ = solve_coupled(data, data.derived(), data.truth.u, cross_check=False)
    ratios = []
    for delta in (1e-4, 1e-3, 1e-2):
        p = perturb(data, delta, rng_seed=5)
        up, _ = solve_coupled(p, p.derived(), data.truth.u, cross_check=False)
        ratios.append(sum(norm(ScalarField(data.grid, up[i] - u[i]), "H1") for i in range(2)) / delta)
    assert max(ratios) / min(ratios) <= 3.0


def test_potential_gradient_layered(bundle):
    data = bundle("layered_exp", 64, 1.0)
    d = data.derived()
    G = potential_gradient(data.truth.u, d)
    x1, _ = data.grid.coords()
    assert np.max(np.abs(G[..., 0] + 4 * np.exp(-4 * x1))) < O2 * d.h ** 2
    assert np.max(np.abs(G[..., 1])) < 1e-10


@pytest.mark.parametrize("alpha", [0.0, 0.5, 1.0])
def test_sigma_identity(bundle, alpha):
    data = bundle("constant", 16, alpha)
    rec = sigma_from_solutions(data.truth.u, data.derived(), data.truth.sigma)
    assert np.max(np.abs(rec["sigma"] - 1)) < 1e-10


def test_sigma_layered_with_exact_u(bundle):
    data = bundle("layered_exp", 64, 1.0)
    rec = sigma_from_solutions(data.truth.u, data.derived(), data.truth.sigma)
    assert np.max(np.abs(np.log(rec["sigma"]) - np.log(data.truth.sigma))) < 1e-3
    assert rec["route_difference"] < 1e-3


def test_negative_potential_rejected(bundle):
    data = bundle("layered_exp", 32, 1.0)
    with pytest.raises(ReconstructionError):
        sigma_from_solutions(10 * data.truth.u, data.derived(), data.truth.sigma)


def test_bump_sigma_power_H1(bundle):
    rep = reconstruct_sigma_elliptic(bundle("bump", 128, 0.5))
    scale = norm(ScalarField(rep.grid, bundle("bump", 128, 0.5).truth.sigma ** -1.0), "H1")
    assert rep.metrics["err_sigma_H1"] <= 5e-2 * scale


@pytest.mark.parametrize("alpha", [0.0, 0.5, 1.0])
def test_layered_recovery(bundle, alpha):
    errs = [reconstruct_sigma_elliptic(bundle("layered_exp", c, alpha)).metrics["err_logsigma_Linf"]
            for c in (32, 64, 128)]
    assert errs[-1] / 2.0 <= 1e-2
    assert observed_order(errs[1], errs[2]) >= 1.8


def test_curl_residual_vanishes(bundle):
    res = [reconstruct_sigma_elliptic(bundle("bump", c, 1.0)).metrics["curl_residual"] for c in (32, 64, 128)]
    assert res[2] < res[1] < res[0]


@pytest.mark.parametrize("name,alpha", [("bump", 0.5), ("layered_exp", 1.0), ("two_bumps", 1.0)])
def test_spd_probe(bundle, name, alpha):
    rep = spd_probe(bundle(name, 32, alpha).derived())
    assert rep["spd"] and rep["negative_pivots"] == 0 and rep["min_pivot"] > 0


@pytest.mark.parametrize("name,alpha", [("bump", 0.5), ("layered_exp", 1.0), ("harmonic_sq", 0.0)])
def test_coercivity(bundle, name, alpha):
    rep = coercivity_probe(bundle(name, 16, alpha).derived())
    assert rep["pass"] and rep["lambda_min"] >= rep["lower_bound"]


def test_PW_zero_drift(bundle):
    data = bundle("constant", 16, 0.5)
    assert estimate_PW_norm(data, data.derived())["estimate"] == 0.0


@pytest.mark.parametrize("name,alpha", [("layered_exp", 1.0), ("bump", 0.5), ("harmonic_sq", 1.0)])
def test_PW_bound(bundle, name, alpha):
    data = bundle(name, 24, alpha)
    rep = estimate_PW_norm(data, data.derived())
    assert 0 < rep["estimate"] <= rep["bound"]
    assert rep["fredholm_margin"] > 0.1


def test_PW_seeded(bundle):
    data = bundle("bump", 16, 1.0)
    a = estimate_PW_norm(data, data.derived(), seed=3)
    b = estimate_PW_norm(data, data.derived(), seed=3)
    assert a["estimate"] == b["estimate"]
