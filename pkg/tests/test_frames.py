import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import converges, observed_order
from oracles import harmonic_frame, layered_frame, random_spd
from powerdensity.field_grid import Grid, divergence, gradient, norm
from powerdensity.forward import perturb
from powerdensity.frames import (F_from_R, F_from_S, PositivityError, R_to_S, S_to_R, build_T, cF,
                                 cofactor_frame, derive, gram_schmidt_T, inv_sqrt_spd)

O2 = 50.0  # O(h^2) tolerance factor


@pytest.mark.parametrize("n,alpha,expected", [(2, 0.0, 1.0), (2, 0.5, 1.0), (2, 1.0, 1.0), (2, -3.0, 1.0),
                                              (3, 0.5, 2 / 3), (3, 1.0, 0.5)])
def test_cF_values(n, alpha, expected):
    assert cF(n, alpha) == expected


@pytest.mark.parametrize("n,alpha", [(4, -0.5), (3, -1.0)])
def test_cF_excluded(n, alpha):
    with pytest.raises(ValueError):
        cF(n, alpha)


def test_identity_data(bundle):
    d = bundle("constant", 16, 0.5).derived("inv_sqrt")
    assert np.max(np.abs(d.T - np.eye(2))) < 1e-14
    assert np.max(np.abs(d.U)) < 1e-12 and np.max(np.abs(d.V)) < 1e-12
    assert np.max(np.abs(d.D - 1)) < 1e-14


def test_layered_half_derived(bundle):
    d = bundle("layered_exp", 64, 0.5).derived()
    tol = O2 * d.h ** 2
    assert np.max(np.abs(d.D - 1)) < 1e-12
    assert np.max(np.abs(d.gradLogD)) < 1e-10
    assert np.max(np.abs(d.U[..., 0, 0, :] - [-2, 0])) < tol
    assert np.max(np.abs(d.U[..., 1, 1, :] - [2, 0])) < tol
    assert np.max(np.abs(d.U[..., 0, 1, :])) < 1e-12 and np.max(np.abs(d.U[..., 1, 0, :])) < 1e-12
    assert np.max(np.abs(d.V[..., 0, 0, :] - [1, 0])) < tol
    assert np.max(np.abs(d.V[..., 1, 1, :] - [-1, 0])) < tol


def test_layered_one_derived(bundle):
    d = bundle("layered_exp", 64, 1.0).derived("inv_sqrt")
    x1, _ = d.grid.coords()
    assert np.max(np.abs(d.T[..., 0, 0] - 1)) < 1e-12
    assert np.max(np.abs(d.T[..., 1, 1] - np.exp(-2 * x1))) < 1e-12
    assert np.max(np.abs(d.V[..., 0, 0, :])) < 1e-12
    assert np.max(np.abs(d.V[..., 1, 1, :] - [-2, 0])) < O2 * d.h ** 2
    assert np.max(np.abs(d.V[..., 0, 1, :])) < 1e-12


@pytest.mark.parametrize("name", ["layered_exp", "bump", "harmonic_sq"])
@pytest.mark.parametrize("t_method", ["inv_sqrt", "gram_schmidt"])
def test_derived_invariants(bundle, name, t_method):
    d = bundle(name, 32, 1.0).derived(t_method)
    eye = np.eye(2)
    assert np.max(np.abs(d.Hinv @ d.H - eye)) < 1e-10
    assert np.max(np.abs(np.swapaxes(d.T, -1, -2) @ d.T - d.Hinv)) < 1e-10
    assert np.min(np.linalg.det(d.T)) > 0
    assert np.array_equal(d.Vs + d.Va, d.V) or np.max(np.abs(d.Vs + d.Va - d.V)) < 1e-15
    assert np.array_equal(d.Vs, np.swapaxes(d.Vs, -3, -2))
    assert np.array_equal(d.Va, -np.swapaxes(d.Va, -3, -2))


def test_inverse_derivative_identity_second_order(bundle):
    errs = [bundle("bump", c, 1.0).derived().checks["dHinv_identity_defect"] for c in (32, 64)]
    assert observed_order(*errs) >= 1.8


def test_positivity_failure_names_node():
    H = np.broadcast_to(np.eye(2), (5, 5, 2, 2)).copy()
    H[2, 3] = [[1.0, 1.0], [1.0, 1.0]]
    with pytest.raises(PositivityError, match=r"\(2, 3\)"):
        derive(H, 0.25, 1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.sampled_from([2, 3]), st.sampled_from(["inv_sqrt", "gram_schmidt"]))
def test_T_factorizes_inverse(seed, n, t_method):
    H = random_spd(np.random.default_rng(seed), n, (4,))
    T = build_T(H, t_method)
    scale = np.max(np.abs(np.linalg.inv(H)))
    assert np.max(np.abs(np.swapaxes(T, -1, -2) @ T - np.linalg.inv(H))) <= 1e-10 * scale
    assert np.all(np.linalg.det(T) > 0)


def test_gram_schmidt_is_lower_triangular(rng):
    T = gram_schmidt_T(random_spd(rng, 3, (5,)))
    assert np.max(np.abs(np.triu(T, 1))) == 0.0


def test_inv_sqrt_symmetric(rng):
    T = inv_sqrt_spd(random_spd(rng, 2, (6,)))
    assert np.max(np.abs(T - np.swapaxes(T, -1, -2))) < 1e-12


@pytest.mark.parametrize("S,X", [
    (np.eye(2), np.eye(2)),
    (np.diag([2.0, 5.0]), np.diag([5.0, 2.0])),
    (np.eye(3), np.eye(3)),
])
def test_cofactor_examples(S, X):
    assert np.allclose(cofactor_frame(S), X, atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.sampled_from([2, 3]), arrays(np.float64, (3, 3), elements=st.floats(-3, 3)))
def test_cofactor_duality(n, A):
    S = A[:n, :n].copy()
    if np.linalg.det(S) < 0:
        S[:, 0] *= -1
    assume(np.linalg.det(S) > 1e-3)
    X = cofactor_frame(S)
    D = np.sqrt(np.linalg.det(S.T @ S))
    assert np.max(np.abs(X.T @ S - D * np.eye(n))) <= 1e-12 * max(1.0, D) * 10


@pytest.mark.parametrize("n", [2, 3])
@pytest.mark.parametrize("alpha", [0.5, 1.0])
def test_cofactor_divergence_identity(n, alpha):
    errs = []
    for cells in ((16, 32) if n == 3 else (32, 64)):
        sigma, F, S, h = harmonic_frame(cells, n, alpha)
        X = cofactor_frame(S)
        res = [divergence(X[..., :, j], h, n) - (n - 1) * alpha * np.einsum("...a,...a->...", F, X[..., :, j])
               for j in range(n)]
        errs.append(max(float(np.max(np.abs(r))) for r in res))
    assert converges(errs, 1.5)


@pytest.mark.parametrize("alpha", [0.5, 1.0])
def test_F_layered_examples(bundle, alpha):
    data = bundle("layered_exp", 64, alpha)
    d = data.derived()
    S = layered_frame(data.grid, alpha)
    F = F_from_S(d, S)
    assert np.max(np.abs(F - [2, 0])) < O2 * d.h ** 2
    R = S_to_R(S, d.T)
    assert np.max(np.abs(R - np.eye(2))) < 1e-12
    assert np.max(np.abs(F_from_R(d, R) - [2, 0])) < O2 * d.h ** 2


def test_F_identity_data(bundle):
    d = bundle("constant", 16, 0.5).derived()
    I2 = np.broadcast_to(np.eye(2), d.H.shape)
    assert np.max(np.abs(F_from_S(d, I2))) < 1e-12
    assert np.max(np.abs(F_from_R(d, I2))) < 1e-12


def test_F_from_R_rejects_non_orthonormal(bundle):
    d = bundle("constant", 8, 0.5).derived()
    with pytest.raises(ValueError):
        F_from_R(d, np.broadcast_to(2 * np.eye(2), d.H.shape))


def test_F_from_S_reports_mismatch(bundle):
    d = bundle("constant", 8, 0.5).derived()
    rep = {}
    F_from_S(d, np.broadcast_to(2 * np.eye(2), d.H.shape), report=rep)
    assert rep["frame_defect"] == pytest.approx(3.0) and rep["warnings"]


@pytest.mark.parametrize("name", ["bump", "harmonic_sq", "two_bumps"])
@pytest.mark.parametrize("t_method", ["inv_sqrt", "gram_schmidt"])
def test_F_S_and_R_agree(bundle, name, t_method):
    diffs = []
    for cells in (32, 64):
        data = bundle(name, cells, 1.0)
        d = data.derived(t_method)
        R = S_to_R(data.truth.S, d.T)
        diffs.append(np.max(np.abs(F_from_S(d, data.truth.S) - F_from_R(d, R))))
    assert observed_order(*diffs) >= 1.8


@pytest.mark.parametrize("name", ["layered_exp", "bump", "harmonic_sq"])
@pytest.mark.parametrize("t_method", ["inv_sqrt", "gram_schmidt"])
def test_R_is_rotation(bundle, name, t_method):
    data = bundle(name, 32, 0.5)
    d = data.derived(t_method)
    R = S_to_R(data.truth.S, d.T)
    assert np.max(np.abs(np.swapaxes(R, -1, -2) @ R - np.eye(2))) < 1e-8
    assert np.max(np.abs(np.linalg.det(R) - 1)) < 1e-8
    assert np.max(np.abs(R_to_S(R, d.T) - data.truth.S)) < 1e-10


@pytest.mark.parametrize("t_method", ["inv_sqrt", "gram_schmidt"])
def test_T_stability(bundle, t_method):
    data = bundle("layered_exp", 64, 1.0)
    g = data.grid
    T = data.derived(t_method).T
    ratios = []
    for delta in (1e-4, 1e-3, 1e-2):
        Tp = perturb(data, delta, rng_seed=7).derived(t_method).T
        E = Tp - T
        w1 = max(np.max(np.abs(E)), np.max(np.abs(gradient(E, g.h))))
        ratios.append(w1 / delta)
    assert max(ratios) / min(ratios) <= 3.0


def test_derived_export(bundle):
    fields = bundle("bump", 8, 1.0).derived().to_fields()
    assert {"D", "T", "U_12", "V_21"} <= set(fields)
    assert norm(fields["D"], "Linf") > 0
