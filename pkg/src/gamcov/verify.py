"""Self-checks runnable from the command line, reported in TAP format."""
from __future__ import annotations

import sys
from dataclasses import dataclass

import numpy as np

from . import logm, mcd
from .accumulate import BufferMeter, accumulate, accumulate_parsimonious, naive_assembly, plan_blocks
from .families import DerivSource, FixedCovarianceFamily, make_family
from .layout import build_theta_layout
from .model import ModelSpec, PenaltyBlock
from .oracles import fd_jacobian, gaussian_ridge_evidence

SUITES = ("derivs", "sparsity", "blocks", "laml", "all")


@dataclass
class Check:
    name: str
    ok: bool
    detail: str = ""


def rel_err(a, b) -> float:
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / (1.0 + np.abs(a))))


def random_eta(rng, layout, scale=0.5):
    eta = rng.normal(size=layout.q) * scale
    return eta


def check_sparsity(dmax: int = 30):
    out = []
    for d in range(1, dmax + 1):
        sp = mcd.mcd_sparsity(d)
        okh = sp.n_pairs == mcd.hess_nonzero_count(d)
        okt = sp.n_triples == mcd.third_nonzero_count(d)
        q = build_theta_layout(d).q
        okE = (sum(v[1] for v in sp.hess_blocks.values()) == mcd.hess_total_count(d) == q * (q + 1) // 2)
        out.append(Check(f"MCD pattern sizes d={d}", okh and okt and okE,
                         f"hess {sp.n_pairs} third {sp.n_triples}"))
    return out


def _kernel_checks(d, rng, tol12=1e-6, tol3=1e-5):
    layout = build_theta_layout(d)
    eta = random_eta(rng, layout)
    y = rng.normal(size=d)
    sp = mcd.mcd_sparsity(d)
    res = []
    f = lambda e: mcd.mcd_loglik(layout, e, y)
    g = mcd.mcd_grad(layout, eta, y)
    res.append(("MCD gradient", rel_err(g, fd_jacobian(f, eta)), tol12))
    Hd = mcd.dense_hessian(sp.hess_pairs, mcd.mcd_hess(layout, eta, y, sp), layout.q)
    res.append(("MCD Hessian", rel_err(Hd, fd_jacobian(lambda e: mcd.mcd_grad(layout, e, y), eta)), tol12))
    Td = mcd.dense_third(sp.third_triples, mcd.mcd_third(layout, eta, y, sp), layout.q)
    fdT = fd_jacobian(lambda e: mcd.dense_hessian(sp.hess_pairs, mcd.mcd_hess(layout, e, y, sp), layout.q), eta)
    res.append(("MCD third derivatives", rel_err(Td, fdT), tol3))
    f = lambda e: logm.logm_loglik(layout, e, y)
    res.append(("logM gradient", rel_err(logm.logm_grad(layout, eta, y), fd_jacobian(f, eta)), tol12))
    res.append(("logM Hessian", rel_err(logm.logm_hess_dense(layout, eta, y),
                                        fd_jacobian(lambda e: logm.logm_grad(layout, e, y), eta)), tol12))
    return res


def check_derivs(d: int = 4, reps: int = 3, seed: int = 0):
    rng = np.random.default_rng(seed)
    worst = {}
    for _ in range(reps):
        for name, err, tol in _kernel_checks(d, rng):
            e, t = worst.get(name, (0.0, tol))
            worst[name] = (max(e, err), tol)
    return [Check(f"{name} vs finite differences d={d}", err < tol, f"max rel err {err:.2e}")
            for name, (err, tol) in worst.items()]


def _random_block_spec(rng, d, n):
    layout = build_theta_layout(d)
    fixed = rng.random(layout.q) < 0.5
    designs = [None if f else np.column_stack([np.ones(n), rng.normal(size=(n, int(rng.integers(1, 4))))])
               for f in fixed]
    return ModelSpec(layout, designs, n=n)


def check_blocks(seed: int = 0):
    rng = np.random.default_rng(seed)
    out = []
    for fam_name in ("mcd", "logm"):
        for d in (2, 4):
            spec = _random_block_spec(rng, d, 120)
            fam = make_family(fam_name, spec.layout)
            src = DerivSource(spec, fam, rng.normal(size=(spec.n, d)), beta=rng.normal(size=spec.p) * 0.2)
            _, g0, H0 = naive_assembly(spec, src)
            worst = 0.0
            within = True
            for path in ("standard", "parsimonious"):
                for B in (1, 3, 7, 16):
                    plan = plan_blocks(spec, fam, path=path, blocks=B)
                    meter = BufferMeter()
                    acc = (accumulate if path == "standard" else accumulate_parsimonious)(spec, src, plan, meter)
                    worst = max(worst, np.max(np.abs(acc.hess - H0)) / np.max(np.abs(H0)),
                                np.max(np.abs(acc.grad - g0)) / max(np.max(np.abs(g0)), 1e-300))
                    within &= meter.peak <= plan.budget
            out.append(Check(f"{fam_name} block paths agree d={d}", worst < 1e-12 and within, f"max rel diff {worst:.1e}"))
    return out


def check_laml(seed: int = 0):
    from .fitting import FitOptions, Problem, laml, newton_map
    rng = np.random.default_rng(seed)
    n, p = 40, 5
    X = rng.normal(size=(n, p))
    sigma2 = 0.7
    y = X @ rng.normal(size=p) + rng.normal(size=n) * np.sqrt(sigma2)
    layout = build_theta_layout(1)
    spec = ModelSpec(layout, [X], [PenaltyBlock(np.eye(p), 0, p, p, "ridge")], n=n, mean_only=True)
    fam = FixedCovarianceFamily([[sigma2]])
    out = []
    for lam in (0.1, 1.0, 10.0):
        prob = Problem(spec, fam, y[:, None], FitOptions())
        nr = newton_map(prob, [lam], np.zeros(p))
        v = laml(prob, [lam], nr)
        ref = gaussian_ridge_evidence(X, y, sigma2, lam, np.eye(p))
        out.append(Check(f"Laplace evidence exact on ridge model lambda={lam:g}", abs(v - ref) < 1e-8 * (1 + abs(ref)),
                         f"diff {abs(v - ref):.1e}"))
    return out


def run_suite(suite: str = "all", d: int = 4, stream=None) -> int:
    stream = stream or sys.stdout
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; expected one of {SUITES}")
    checks = []
    if suite in ("sparsity", "all"):
        checks += check_sparsity()
    if suite in ("derivs", "all"):
        checks += check_derivs(d)
    if suite in ("blocks", "all"):
        checks += check_blocks()
    if suite in ("laml", "all"):
        checks += check_laml()
    print(f"1..{len(checks)}", file=stream)
    for i, c in enumerate(checks, 1):
        status = "ok" if c.ok else "not ok"
        detail = f" # {c.detail}" if c.detail else ""
        print(f"{status} {i} - {c.name}{detail}", file=stream)
    return 0 if all(c.ok for c in checks) else 1
