"""Acceptance criteria, one test per criterion; each prints a PASS/FAIL line."""

import time

import numpy as np
import pytest

from conftest import converges, observed_order
from oracles import harmonic_frame
from powerdensity.algebraic2d import algebraic_invert, theta_data
from powerdensity.diagnostics import diagnose
from powerdensity.elliptic import estimate_PW_norm, spd_probe
from powerdensity.experiment import (ConfigError, ExperimentConfig, convergence_study, ratio_variation,
                                     run_experiment, stability_sweep)
from powerdensity.field_grid import divergence, gradient
from powerdensity.forward import corrupt
from powerdensity.frames import F_from_S, S_to_R, cF, cofactor_frame
from powerdensity.ode import grad_R_rhs, grad_S_rhs

ALPHAS = (0.0, 0.5, 1.0)


@pytest.fixture
def verdict(capsys):
    def report(number, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
        assert ok, detail
    return report


def test_criterion_01_identity_recovery(verdict):
    worst_err, worst_time, bad = 0.0, 0.0, []
    for method in ("ode_s", "ode_r", "elliptic", "theta2d", "algebraic2d"):
        for alpha in ALPHAS:
            kw = dict(phantom="constant", grid=64, method=method, alpha=alpha)
            if method == "algebraic2d" and alpha == 0.5:
                # the pointwise inversion is singular here; the configuration is refused up front
                with pytest.raises(ConfigError):
                    ExperimentConfig(**kw)
                continue
            t0 = time.perf_counter()
            rep = run_experiment(ExperimentConfig(**kw))
            dt = time.perf_counter() - t0
            err = rep.metrics["err_logsigma_Linf"]
            worst_err, worst_time = max(worst_err, err), max(worst_time, dt)
            if not (err <= 1e-9 and dt <= 5.0):
                bad.append((method, alpha, err, dt))
    verdict(1, not bad, f"max err_logsigma_Linf {worst_err:.2e}, slowest run {worst_time:.2f}s, "
                        f"algebraic2d at alpha=1/2 refused; failures {bad}")


def test_criterion_02_closed_form_recovery(verdict):
    t0 = time.perf_counter()
    bad, worst_rel, worst_order = [], 0.0, np.inf
    for method in ("ode_s", "ode_r", "elliptic"):
        for alpha in ALPHAS:
            rows = convergence_study(ExperimentConfig(phantom="layered_exp", method=method, alpha=alpha),
                                     [32, 64, 128])
            rel = rows[-1]["err_logsigma_rel"]
            steps = [(r["order_err_logsigma_Linf"], r["status_err_logsigma_Linf"]) for r in rows[1:]]
            ok_order = all(s == "floor" or (s == "ok" and p >= 1.8) for p, s in steps)
            worst_rel = max(worst_rel, rel)
            worst_order = min([worst_order] + [p for p, s in steps if s == "ok"])
            if not (rel <= 1e-2 and ok_order):
                bad.append((method, alpha, rel, steps))
    total = time.perf_counter() - t0
    verdict(2, not bad and total <= 60.0,
            f"max rel err {worst_rel:.2e} at 128, min order {worst_order:.2f}, total {total:.1f}s; failures {bad}")


def test_criterion_03_algebraic_inversion(bundle, verdict):
    errs = {"f": [], "g": [], "h": [], "F": []}
    for cells in (64, 128):
        d = bundle("layered_exp", cells, 1.0).derived()
        td, inv = theta_data(d), algebraic_invert(d)
        errs["f"].append(np.max(np.abs(td.f)))
        errs["g"].append(np.max(np.abs(td.g + 4)))
        errs["h"].append(np.max(np.abs(td.h + 4)))
        errs["F"].append(np.max(np.abs(inv["F"] - [2.0, 0.0])))
    residual = np.max(np.abs(inv["residual"]))
    h = d.h
    ok = all(e[-1] <= 200 * h ** 2 and converges(e, 1.8) for e in errs.values()) and residual <= 1e-2
    verdict(3, ok, ", ".join(f"{k} err {v[-1]:.1e}" for k, v in errs.items())
            + f", consistency residual sup {residual:.1e} at 128")


def test_criterion_04_Ffinal_forms(bundle, verdict):
    e_compact, e_rederived = [], []
    for cells in (64, 128):
        d = bundle("layered_exp", cells, 1.0).derived()
        inv = algebraic_invert(d)
        e_compact.append(np.max(np.abs(inv["F"] - [2.0, 0.0])))
        e_rederived.append(np.max(np.abs(inv["F_rederived"] - [2.0, 0.0])))
    printed = np.max(np.abs(inv["F_printed"] - [2.0, 0.0]))
    ok = converges(e_compact, 1.8) and converges(e_rederived, 1.8) and printed >= 1.0
    verdict(4, ok, f"compact {e_compact[-1]:.1e}, re-derived sign {e_rederived[-1]:.1e}, "
                   f"printed sign differs by {printed:.2f}")


def test_criterion_05_F_from_S(bundle, verdict):
    bad = []
    for name in ("layered_exp", "bump"):
        for alpha in ALPHAS:
            errs = []
            for cells in (32, 64, 128):
                data = bundle(name, cells, alpha)
                errs.append(np.max(np.abs(F_from_S(data.derived(), data.truth.S) - data.truth.grad_log_sigma)))
            if not converges(errs, 1.8):
                bad.append((name, alpha, errs))
    consts = [cF(2, a) == 1.0 for a in ALPHAS] + [cF(3, 0.5) == 2.0 / 3.0]
    verdict(5, not bad and all(consts), f"F_from_S second order on layered_exp/bump for all alpha, "
                                        f"cF exact {all(consts)}; failures {bad}")


def test_criterion_06_cofactor(rng, verdict):
    worst = 0.0
    for n in (2, 3):
        S = rng.normal(size=(2000, n, n))
        S[np.linalg.det(S) < 0, :, 0] *= -1
        S = S[np.linalg.det(S) > 1e-2]
        X = cofactor_frame(S)
        D = np.linalg.det(S)
        worst = max(worst, np.max(np.abs(np.swapaxes(X, -1, -2) @ S - D[:, None, None] * np.eye(n))))
    orders = {}
    for n in (2, 3):
        for alpha in (0.5, 1.0):
            errs = []
            for cells in ((16, 32) if n == 3 else (32, 64)):
                sigma, F, Sf, h = harmonic_frame(cells, n, alpha)
                X = cofactor_frame(Sf)
                errs.append(max(np.max(np.abs(divergence(X[..., :, j], h, n)
                                              - (n - 1) * alpha * np.einsum("...a,...a->...", F, X[..., :, j])))
                                for j in range(n)))
            # a polynomial cofactor field is differentiated exactly: residual at round-off
            orders[(n, alpha)] = "floor" if max(errs) < 1e-10 else round(observed_order(*errs), 2)
    verdict(6, worst <= 1e-12 and all(p == "floor" or p >= 1.5 for p in orders.values()),
            f"X_j.S_k defect {worst:.1e}, divergence identity orders {orders}")


def test_criterion_07_rhs_oracles(bundle, verdict):
    orders = {}
    for conv in ("S", "R"):
        for alpha in (0.5, 1.0):
            errs = []
            for cells in (32, 64, 128):
                data = bundle("layered_exp", cells, alpha)
                d = data.derived()
                if conv == "S":
                    frame = data.truth.S
                    rhs = grad_S_rhs(d.cF, d.alpha, d.gradLogD, d.U, d.dHinv, frame)
                else:
                    frame = S_to_R(data.truth.S, d.T)
                    rhs = grad_R_rhs(d.cF, d.alpha, d.gradLogD, d.V, frame)
                errs.append(np.max(np.abs(rhs - gradient(frame, d.h))))
            orders[(conv, alpha)] = "floor" if max(errs[-2:]) < 1e-10 else round(observed_order(*errs[-2:]), 2)
    ok = all(p == "floor" or p >= 1.9 for p in orders.values())
    verdict(7, ok, f"observed orders 64->128 {orders}")


def test_criterion_08_elliptic_solvability(bundle, verdict):
    cases = [(name, alpha) for name in ("constant", "layered_exp", "bump", "harmonic_sq", "two_bumps")
             for alpha in ALPHAS]
    spd_bad, pw_bad, worst = [], [], 0.0
    for name, alpha in cases:
        d32 = bundle(name, 32, alpha).derived()
        probe = spd_probe(d32)
        if not (probe["spd"] and probe["negative_pivots"] == 0):
            spd_bad.append((name, alpha))
        data = bundle(name, 24, alpha)
        pw = estimate_PW_norm(data, data.derived())
        if not pw["estimate"] <= pw["bound"]:
            pw_bad.append((name, alpha, pw["estimate"], pw["bound"]))
        if pw["bound"] > 0:
            worst = max(worst, pw["estimate"] / pw["bound"])
    verdict(8, not spd_bad and not pw_bad, f"{len(cases)} bundles: SPD failures {spd_bad}, "
                                           f"P_W bound failures {pw_bad}, max estimate/bound {worst:.2f}")


def test_criterion_09_stability(verdict):
    levels = [1e-4, 1e-3, 1e-2]
    cfg = ExperimentConfig(phantom="layered_exp", grid=64, alpha=1.0, method="ode_s")
    rows = stability_sweep(cfg, levels, [0.0, 1e-3])
    var_log = {e: ratio_variation(rows, "ratio_logsigma", e) for e in (0.0, 1e-3)}
    var_joint = ratio_variation(rows, "ratio_logsigma")
    rows_e = stability_sweep(cfg.replace(method="elliptic"), levels)
    var_pow = ratio_variation(rows_e, "ratio_sigma_pow")
    ok = max(var_log.values()) <= 3.0 and var_joint <= 3.0 and var_pow <= 3.0
    verdict(9, ok, f"W1inf/(eps0+delta) variation per eps0 {var_log}, pooled {var_joint:.2f}; "
                   f"H1/delta variation {var_pow:.2f}")


def test_criterion_10_range_test(bundle, verdict):
    fields = ("curl_F", "curvature_12", "gradtheta", "alpha_half")
    sups = {f: [] for f in fields}
    corrupt_min = {f: np.inf for f in fields}
    for cells in (32, 64, 128):
        data = bundle("harmonic_sq", cells, 0.5)
        res = diagnose(data)
        bad = diagnose(corrupt(data, 0.1))
        for f in fields:
            sups[f].append(float(np.max(np.abs(res[f]))))
            corrupt_min[f] = min(corrupt_min[f], float(np.max(np.abs(bad[f]))))
    orders = {f: round(observed_order(*s[-2:]), 2) for f, s in sups.items()}
    ok = all(converges(s, 1.0) for s in sups.values()) and min(corrupt_min.values()) >= 0.1
    verdict(10, ok, f"consistent orders {orders}, corrupted sup minimum "
                    + ", ".join(f"{k} {v:.2f}" for k, v in corrupt_min.items()))
