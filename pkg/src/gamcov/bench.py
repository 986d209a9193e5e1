"""Timing harness for kernel and accumulation scaling (TSV output, no plotting)."""
from __future__ import annotations

import time

import numpy as np

from . import logm, mcd
from .accumulate import DEFAULT_BUDGET, accumulate, accumulate_parsimonious, plan_blocks
from .families import DerivSource, make_family
from .layout import build_theta_layout
from .simulate import ScenarioConfig, gen_parsimonious_scenario, parsimonious_spec

TSV_HEADER = ("task", "d", "kernel", "path", "reps", "median_s", "p10_s", "p90_s")


def _timeit(fn, reps: int):
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return np.array(times)


def bench_hessians(grid=(5, 10, 20), kernels=("mcd", "logm"), n_rows: int = 8, reps: int = 5, seed: int = 0):
    """Per-row wall time of the eta-Hessian for each kernel."""
    rng = np.random.default_rng(seed)
    rows = []
    for d in grid:
        layout = build_theta_layout(d)
        eta = rng.normal(size=(n_rows, layout.q)) * 0.1
        y = rng.normal(size=(n_rows, d))
        sp = mcd.mcd_sparsity(d)
        for kernel in kernels:
            if kernel == "mcd":
                fn = lambda: mcd.mcd_derivs(layout, eta, y, 2, sp)
            else:
                fn = lambda: logm.logm_derivs(layout, eta, y, 2)
            fn()
            t = _timeit(fn, reps) / n_rows
            rows.append(("hessian", d, kernel, "-", reps, *np.percentile(t, [50, 10, 90])))
    return rows


def bench_paths(grid=(10, 20, 40), n: int = 2000, budget: int = DEFAULT_BUDGET, kernel: str = "logm",
                s: int = 2, reps: int = 3, seed: int = 0):
    """Wall time of the standard and parsimonious Hessian assembly on scenario-``s`` models."""
    rows = []
    for d in grid:
        X, y, fixed, _ = gen_parsimonious_scenario(ScenarioConfig(d=d, n=n, seed=seed, kind="parsimonious", s=s,
                                                                  parametrisation=kernel))
        spec = parsimonious_spec(X, fixed, d)
        fam = make_family(kernel, spec.layout)
        beta = np.zeros(spec.p)
        src = DerivSource(spec, fam, y, beta=beta)
        for path, fn in (("standard", accumulate), ("parsimonious", accumulate_parsimonious)):
            plan = plan_blocks(spec, fam, budget, path)
            t = _timeit(lambda: fn(spec, src, plan), reps)
            rows.append(("assembly", d, kernel, path, reps, *np.percentile(t, [50, 10, 90])))
    return rows


def write_tsv(rows, path_or_stream):
    lines = ["\t".join(TSV_HEADER)]
    for r in rows:
        lines.append("\t".join(str(v) if not isinstance(v, float) else f"{v:.6g}" for v in r))
    text = "\n".join(lines) + "\n"
    if hasattr(path_or_stream, "write"):
        path_or_stream.write(text)
    else:
        with open(path_or_stream, "w") as fh:
            fh.write(text)
    return text
