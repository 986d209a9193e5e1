"""Acceptance suite: one test per numbered criterion, each printing PASS/FAIL in the summary."""
import time
from math import comb

import numpy as np
import pytest

from conftest import ACCEPTANCE
from gamcov import logm, mcd
from gamcov.accumulate import BufferMeter, accumulate, accumulate_parsimonious, naive_assembly, plan_blocks
from gamcov.bench import bench_hessians, bench_paths
from gamcov.cli import scenario_fit_config
from gamcov.families import FixedCovarianceFamily, make_family
from gamcov.fitting import (Problem, beta_lambda_sensitivity, c_trace, efs_update, fit, fitted_moments, laml,
                            laml_terms, newton_map)
from gamcov.layout import build_theta_layout
from gamcov.model import ModelSpec, PenaltyBlock, build_model_spec, eta_from_beta, parse_config
from gamcov.oracles import fd_derivs, fd_jacobian, gaussian_ridge_evidence, naive_c_term

from helpers import random_source, random_spec


def record(k, ok, detail, elapsed, limit):
    ok = bool(ok) and elapsed < limit
    ACCEPTANCE[k] = (ok, f"{detail}; {elapsed:.1f}s (limit {limit:.0f}s)")
    print(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {ACCEPTANCE[k][1]}")
    assert ok, ACCEPTANCE[k][1]


def rel_err(a, ref):
    return float(np.max(np.abs(np.asarray(a) - ref) / (1 + np.abs(ref)))) if np.size(ref) else 0.0


def random_row(rng, d):
    q = build_theta_layout(d).q
    return rng.normal(size=q) * 0.5, rng.normal(size=d)


# --------------------------------------------------------------------------- 1: derivatives vs finite differences


def test_criterion_1_derivatives():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = {"g": 0.0, "h": 0.0, "t": 0.0}
    for d in (1, 2, 3, 5, 8):
        layout = build_theta_layout(d)
        q = layout.q
        sp = mcd.mcd_sparsity(d)
        for _ in range(50):
            eta, y = random_row(rng, d)
            # MCD: gradient vs FD of loglik, Hessian vs FD of gradient, third vs FD of Hessian
            _, g, h, t = mcd.mcd_derivs(layout, eta, y, 3, sp)
            worst["g"] = max(worst["g"], rel_err(g, fd_derivs(lambda e: mcd.mcd_loglik(layout, e, y), eta)))
            H = mcd.dense_hessian(sp.hess_pairs, h, q)
            worst["h"] = max(worst["h"], rel_err(H, fd_jacobian(lambda e: mcd.mcd_grad(layout, e, y), eta)))
            T = mcd.dense_third(sp.third_triples, t, q)
            fdT = fd_jacobian(lambda e: mcd.dense_hessian(sp.hess_pairs, mcd.mcd_hess(layout, e, y, sp), q), eta)
            worst["t"] = max(worst["t"], rel_err(T, fdT))
            # logM: gradient and Hessian
            g = logm.logm_grad(layout, eta, y)
            worst["g"] = max(worst["g"], rel_err(g, fd_derivs(lambda e: logm.logm_loglik(layout, e, y), eta)))
            H = logm.logm_hess_dense(layout, eta, y)
            worst["h"] = max(worst["h"], rel_err(H, fd_jacobian(lambda e: logm.logm_grad(layout, e, y), eta)))
    ok = worst["g"] < 1e-6 and worst["h"] < 1e-6 and worst["t"] < 1e-5
    detail = f"max rel err grad {worst['g']:.1e}, hess {worst['h']:.1e}, third {worst['t']:.1e}"
    record(1, ok, detail, time.perf_counter() - t0, 120)


# --------------------------------------------------------------------------- 2: sparsity counts


def closed_forms(d):
    """Non-zero and total entry counts of the MCD Hessian and third-derivative tensor."""
    q = d * (d + 3) // 2
    h_nz = d * (d * d + 15 * d + 2 + 2 * (d - 1) * (d - 2) * (d > 2)) // 6
    t_nz = d * (4 * d * d + 3 * d + 2) // 3
    return h_nz, comb(q + 1, 2), t_nz, comb(q + 2, 3)


def test_criterion_2_sparsity():
    t0 = time.perf_counter()
    ok = True
    bad = []
    for d in range(1, 31):
        sp = mcd.mcd_sparsity(d)
        h_nz, h_tot, t_nz, t_tot = closed_forms(d)
        got = (sp.n_pairs, mcd.hess_total_count(d), sp.n_triples, mcd.third_total_count(d))
        if got != (h_nz, h_tot, t_nz, t_tot):
            ok = False
            bad.append((d, got, (h_nz, h_tot, t_nz, t_tot)))
    # every entry outside the enumerated pattern is zero by finite differences
    rng = np.random.default_rng(202)
    max_off = 0.0
    for d in range(1, 6):
        layout = build_theta_layout(d)
        q = layout.q
        sp = mcd.mcd_sparsity(d)
        hmask = np.ones((q, q), bool)
        hmask[sp.hess_pairs[:, 0], sp.hess_pairs[:, 1]] = False
        hmask[sp.hess_pairs[:, 1], sp.hess_pairs[:, 0]] = False
        tmask = mcd.dense_third(sp.third_triples, np.ones(sp.n_triples), q) == 0
        for _ in range(5):
            eta, y = random_row(rng, d)
            fdH = fd_jacobian(lambda e: mcd.mcd_grad(layout, e, y), eta)
            # nested differences of the gradient, independent of the Hessian pattern
            fdT = fd_jacobian(lambda e: fd_jacobian(lambda e2: mcd.mcd_grad(layout, e2, y), e, h=1e-4), eta, h=1e-4)
            max_off = max(max_off, np.abs(fdH[hmask]).max(initial=0), np.abs(fdT[tmask]).max(initial=0))
    ok = ok and max_off < 1e-6
    detail = f"counts match for d=1..30 ({'ok' if not bad else bad[:2]}); max |FD| off-pattern {max_off:.1e}"
    record(2, ok, detail, time.perf_counter() - t0, 60)


# --------------------------------------------------------------------------- 3: identities and positive definiteness


def test_criterion_3_identities():
    t0 = time.perf_counter()
    rng = np.random.default_rng(303)
    det_err = 0.0
    for d in range(1, 9):
        layout = build_theta_layout(d)
        eta = rng.normal(size=(200, layout.q)) * 0.5
        S_m = mcd.mcd_sigma(layout, eta)
        det_err = max(det_err, np.abs(np.linalg.slogdet(S_m)[1] - eta[:, d:2 * d].sum(axis=1)).max())
        S_l = logm.logm_sigma(layout, eta)
        det_err = max(det_err, np.abs(np.linalg.slogdet(S_l)[1] - eta[:, d:2 * d].sum(axis=1)).max())
    min_eig = np.inf
    for d in (2, 5):
        layout = build_theta_layout(d)
        eta = rng.normal(size=(10_000, layout.q))
        for S in (mcd.mcd_sigma(layout, eta), logm.logm_sigma(layout, eta)):
            # relative to the largest eigenvalue, so large-scale rows are judged fairly
            ev = np.linalg.eigvalsh(S)
            min_eig = min(min_eig, (ev[:, 0] / ev[:, -1]).min())
    layout = build_theta_layout(1)
    d1_err = 0.0
    for _ in range(100):
        eta, y = random_row(rng, 1)
        ll_m, g_m, h_m, _ = mcd.mcd_derivs(layout, eta, y, 2)
        ll_l, g_l, h_l, _ = logm.logm_derivs(layout, eta, y, 2)
        H_m = mcd.dense_hessian(mcd.mcd_sparsity(1).hess_pairs, h_m, 2)
        H_l = mcd.dense_hessian(logm.dense_pairs(2), h_l, 2)
        d1_err = max(d1_err, abs(ll_m - ll_l), np.abs(g_m - g_l).max(), np.abs(H_m - H_l).max())
    ok = det_err < 1e-10 and min_eig > 0 and d1_err < 1e-12
    detail = f"log-det err {det_err:.1e}, min eig ratio {min_eig:.1e}, d=1 bundle diff {d1_err:.1e}"
    record(3, ok, detail, time.perf_counter() - t0, 60)


# --------------------------------------------------------------------------- 4: block assembly


def rel_mat(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300)


def test_criterion_4_blocks():
    t0 = time.perf_counter()
    rng = np.random.default_rng(404)
    worst, over = 0.0, 0
    cases = [(1, 500), (2, 500), (3, 300), (4, 200), (5, 100), (6, 60)]
    for family in ("mcd", "logm"):
        for d, n in cases:
            spec = random_spec(rng, d, n)
            src, fam, *_ = random_source(rng, spec, family)
            ll0, g0, H0 = naive_assembly(spec, src)
            for path, fn in (("standard", accumulate), ("parsimonious", accumulate_parsimonious)):
                for B in (1, 3, 7, 16):
                    base = plan_blocks(spec, fam, path=path, blocks=B)
                    budget = base.overhead_bytes + base.bytes_per_row * -(-n // B)
                    plan = plan_blocks(spec, fam, budget, path=path, blocks=B)
                    meter = BufferMeter()
                    acc = fn(spec, src, plan, meter)
                    worst = max(worst, rel_mat(acc.hess, H0), rel_mat(acc.grad, g0), abs(acc.loglik - ll0) / abs(ll0))
                    over += meter.peak > budget
    ok = worst < 1e-12 and over == 0
    detail = f"max rel diff {worst:.1e} over 96 assemblies, budget exceeded {over} times"
    record(4, ok, detail, time.perf_counter() - t0, 120)


# --------------------------------------------------------------------------- 5: efficient c-trace


def naive_c(prob, nr, dbeta):
    spec, fam = prob.spec, prob.family
    _, _, _, t = fam.derivs(eta_from_beta(spec, nr.beta), prob.y, 3)
    T = mcd.dense_third(fam.triples, t, spec.q)
    designs = [spec.dense_design(j) for j in range(spec.q)]
    return naive_c_term(designs, np.linalg.inv(nr.H), T, eta_from_beta(spec, dbeta))


def test_criterion_5_c_trace():
    t0 = time.perf_counter()
    rng = np.random.default_rng(505)
    worst, models = 0.0, 0
    while models < 20:
        d = int(rng.integers(1, 5))
        n = int(rng.integers(20, 51))
        spec = random_spec(rng, d, n, p_range=(2, 4))
        if not spec.penalties:
            continue
        layout = spec.layout
        fam = make_family("mcd", layout)
        y = rng.normal(size=(n, d))
        prob = Problem(spec, fam, y)
        lam = np.exp(rng.uniform(-1, 1, size=len(spec.penalties)))
        nr = newton_map(prob, lam, np.zeros(spec.p))
        dbetas = [beta_lambda_sensitivity(prob, nr, u) for u in range(len(lam))] + [rng.normal(size=spec.p)]
        raw = c_trace(prob, nr, dbetas)
        for r, db in zip(raw, dbetas):
            ref = naive_c(prob, nr, db)
            worst = max(worst, abs(r - ref) / max(abs(ref), 1e-300))
        models += 1
    record(5, worst < 1e-10, f"max rel diff {worst:.1e} on 20 models", time.perf_counter() - t0, 60)


# --------------------------------------------------------------------------- 6: LAML machinery


def test_criterion_6_laml():
    t0 = time.perf_counter()
    rng = np.random.default_rng(606)
    grad_err, sign_bad, states = 0.0, 0, 0
    while states < 10:
        d = int(rng.integers(1, 4))
        spec = random_spec(rng, d, 80, p_range=(3, 5))
        if not spec.penalties:
            continue
        fam = make_family("mcd", spec.layout)
        y = rng.normal(size=(80, d)) @ np.diag(np.linspace(1, 1.5, d))
        from gamcov.fitting import FitOptions
        prob = Problem(spec, fam, y, FitOptions(grad_tol=1e-12))
        lam = np.exp(rng.uniform(-2, 2, size=len(spec.penalties)))
        nr = newton_map(prob, lam, np.zeros(spec.p))
        terms = laml_terms(prob, lam, nr)
        for u in range(len(lam)):
            h = 1e-4 * lam[u]
            lp, lm = lam.copy(), lam.copy()
            lp[u] += h
            lm[u] -= h
            fd = (laml(prob, lp, newton_map(prob, lp, nr.beta)) - laml(prob, lm, newton_map(prob, lm, nr.beta))) / (2 * h)
            grad_err = max(grad_err, abs(terms.gradient[u] - fd) / abs(fd))
            step = np.log(efs_update(lam[u], terms.a[u], terms.b[u], terms.c[u])) - np.log(lam[u])
            sign_bad += np.sign(step) != np.sign(fd)
        states += 1
    ridge_err = 0.0
    for seed in range(5):
        r = np.random.default_rng(seed)
        n, p, s2 = 40, 5, 0.7
        X = r.normal(size=(n, p))
        A = r.normal(size=(p, p))
        S = A @ A.T + 0.1 * np.eye(p)
        yv = X @ r.normal(size=p) + r.normal(size=n) * np.sqrt(s2)
        spec = ModelSpec(build_theta_layout(1), [X], [PenaltyBlock(S, 0, p, p, "ridge")], n=n, mean_only=True)
        prob = Problem(spec, FixedCovarianceFamily([[s2]]), yv[:, None])
        for lam in (1e-2, 1.0, 30.0):
            ref = gaussian_ridge_evidence(X, yv, s2, lam, S)
            v = laml(prob, [lam], newton_map(prob, [lam], np.zeros(p)))
            ridge_err = max(ridge_err, abs(v - ref) / (1 + abs(ref)))
    ok = grad_err < 1e-3 and ridge_err < 1e-8 and sign_bad == 0
    detail = f"gradient rel err {grad_err:.1e}, ridge evidence err {ridge_err:.1e}, efs sign mismatches {sign_bad}"
    record(6, ok, detail, time.perf_counter() - t0, 300)


# --------------------------------------------------------------------------- 7: FS vs EFS on smooth scenarios


def smooth_problem(n, seed=1):
    from gamcov.simulate import ScenarioConfig, gen_smooth_scenario
    X, y, eta, _ = gen_smooth_scenario(ScenarioConfig(d=3, n=n, seed=seed))
    data = {"x1": X[:, 0], "x2": X[:, 1], "x3": X[:, 2], **{f"y{k + 1}": y[:, k] for k in range(3)}}
    spec = build_model_spec(parse_config(scenario_fit_config("smooth", 3, "mcd")), data)
    fam = make_family("mcd", spec.layout)
    return spec, fam, y, fam.sigma(eta)


def sigma_rmse(spec, fam, beta, true_S):
    return float(np.sqrt(np.mean((fitted_moments(spec, fam, beta)[1] - true_S) ** 2)))


def test_criterion_7_fs_efs():
    t0 = time.perf_counter()
    spec, fam, y, _ = smooth_problem(2000)
    fs, efs = fit(spec, fam, y, "fs"), fit(spec, fam, y, "efs")
    gap = abs(fs.laml - efs.laml) / abs(efs.laml)
    rmse = []
    for n in (500, 2000, 8000):
        spec, fam, y, S = smooth_problem(n)
        st = efs if n == 2000 else fit(spec, fam, y, "efs")
        rmse.append(sigma_rmse(spec, fam, st.beta, S))
    ok = fs.converged and efs.converged and gap < 1e-5 and rmse[0] > rmse[1] > rmse[2]
    detail = f"LAML rel gap {gap:.1e}; Sigma RMSE " + ", ".join(f"{r:.3f}" for r in rmse)
    record(7, ok, detail, time.perf_counter() - t0, 1200)


# --------------------------------------------------------------------------- 8: scaling


def test_criterion_8_scaling():
    t0 = time.perf_counter()
    rows = bench_hessians((10, 20, 40), n_rows=8, reps=5)
    med = {(r[1], r[2]): r[5] for r in rows}
    ratios = [med[(d, "logm")] / med[(d, "mcd")] for d in (10, 20, 40)]
    speed = []
    for d, kernel, n in ((40, "mcd", 2000), (60, "mcd", 2000), (40, "logm", 60)):
        r = bench_paths((d,), n=n, kernel=kernel, reps=3, budget=1 << 30)
        speed.append((d, kernel, r[0][5] / r[1][5]))
    ok = ratios[0] < ratios[1] < ratios[2] and all(s > 1 for *_, s in speed)
    detail = ("logM/MCD Hessian ratio " + ", ".join(f"{x:.0f}" for x in ratios) + "; standard/parsimonious "
              + ", ".join(f"{k} d={d} {s:.2f}x" for d, k, s in speed))
    record(8, ok, detail, time.perf_counter() - t0, 900)
