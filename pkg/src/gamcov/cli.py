"""Command-line interface: fit, predict, simulate, verify and bench."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from .exceptions import (ConfigurationError, DataError, GamcovError, InitializationError, LineSearchError,
                         NumericError, ParameterRangeError, UnsupportedOperationError)

log = logging.getLogger("gamcov")

EXIT_OK, EXIT_CONFIG, EXIT_NONCONV, EXIT_NUMERIC = 0, 1, 2, 3


# --------------------------------------------------------------------------- manifest


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def file_digest(path) -> str:
    with open(path, "rb") as fh:
        return sha256_bytes(fh.read())


def _strip_timings(obj):
    if isinstance(obj, dict):
        return {k: _strip_timings(v) for k, v in obj.items() if k != "timings"}
    if isinstance(obj, list):
        return [_strip_timings(v) for v in obj]
    return obj


def content_digest(path) -> str:
    """Digest of a file; JSON files are canonicalized with timing fields removed."""
    if str(path).endswith(".json"):
        with open(path) as fh:
            return sha256_bytes(canonical_json(_strip_timings(json.load(fh))).encode())
    return file_digest(path)


class RunManifest:
    """Record of one command invocation.  ``digest`` excludes timings."""

    def __init__(self, command: str, seed=None, config_digest=None, data_digest=None, args=None):
        self.command = command
        self.seed = seed
        self.config_digest = config_digest
        self.data_digest = data_digest
        self.args = args or {}
        self.outputs = {}
        self.timings = {}

    def add_output(self, name: str, path) -> None:
        self.outputs[name] = {"path": os.path.basename(str(path)), "sha256": content_digest(path)}

    def body(self) -> dict:
        return {
            "command": self.command,
            "library_version": __version__,
            "seed": self.seed,
            "config_digest": self.config_digest,
            "data_digest": self.data_digest,
            "args": self.args,
            "outputs": self.outputs,
        }

    @property
    def digest(self) -> str:
        return sha256_bytes(canonical_json(self.body()).encode())

    def to_dict(self) -> dict:
        out = self.body()
        out["timings"] = {k: float(v) for k, v in self.timings.items()}
        out["digest"] = self.digest
        return out

    def write(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)


def _load_json(path, what: str):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigurationError(f"{what} file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise ConfigurationError(f"{what} file {path} is not valid JSON: {err}") from None


def sigma_columns(d: int) -> list:
    r, c = np.tril_indices(d)
    return [f"sigma_{i + 1}_{j + 1}" for i, j in zip(r, c)]


def moments_table(mu: np.ndarray, Sigma: np.ndarray) -> tuple[list, np.ndarray]:
    """Columns ``mu_*`` followed by Sigma in row-major lower-triangular order."""
    d = mu.shape[1]
    r, c = np.tril_indices(d)
    cols = [f"mu_{k + 1}" for k in range(d)] + sigma_columns(d)
    return cols, np.hstack([mu, Sigma[:, r, c]])


# --------------------------------------------------------------------------- commands


def _blocks_arg(value: str):
    if value == "auto":
        return None
    try:
        k = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError("--blocks expects 'auto' or a positive integer") from None
    if k < 1:
        raise argparse.ArgumentTypeError("--blocks expects 'auto' or a positive integer")
    return k


def cmd_fit(config_path, data_path, out_dir, method=None, param=None, memory_budget=None, threads=1,
            seed=0, blocks=None, path="standard") -> int:
    from .families import make_family
    from .fitting import FitOptions, fit, fitted_moments
    from .model import bases_to_json, build_model_spec, parse_config, read_csv, response_matrix

    t0 = time.perf_counter()
    raw = _load_json(config_path, "config")
    if isinstance(raw, dict):
        raw = dict(raw)
        if param is not None:
            raw["parametrisation"] = param
        if method is not None:
            raw["method"] = method
    config = parse_config(raw)
    data = read_csv(data_path)
    y = response_matrix(config, data)
    spec = build_model_spec(config, data)
    family = make_family(config.parametrisation, spec.layout)
    options = FitOptions(method=config.method, threads=threads, blocks=blocks, path=path)
    if memory_budget is not None:
        options.budget = int(memory_budget)
    t_setup = time.perf_counter() - t0
    state = fit(spec, family, y, config.method, options)

    os.makedirs(out_dir, exist_ok=True)
    manifest = RunManifest("fit", seed, sha256_bytes(canonical_json(config.to_dict()).encode()),
                           file_digest(data_path),
                           {"method": config.method, "param": config.parametrisation, "blocks": blocks,
                            "memory_budget": options.budget, "threads": threads, "path": path})
    model = {
        "library_version": __version__,
        "config": config.to_dict(),
        "bases": bases_to_json(spec),
        "beta": [float(b) for b in state.beta],
        "lambda": [float(x) for x in state.lam],
        "penalties": [p.label for p in spec.penalties],
    }
    model_path = os.path.join(out_dir, "model.json")
    _write_json(model_path, model)
    report_path = os.path.join(out_dir, "report.json")
    _write_json(report_path, state.report())
    mu, Sigma = fitted_moments(spec, family, state.beta)
    cols, table = moments_table(mu, Sigma)
    fitted_path = os.path.join(out_dir, "fitted.csv")
    from .model import write_csv
    write_csv(fitted_path, cols, table)
    for name, p in (("model", model_path), ("report", report_path), ("fitted", fitted_path)):
        manifest.add_output(name, p)
    manifest.timings = {"setup": t_setup, **state.timings, "wall": time.perf_counter() - t0}
    manifest.write(os.path.join(out_dir, "manifest.json"))

    log.info("fit %s/%s: n=%d d=%d p=%d, %d outer / %d Newton iterations, LAML %.6f, converged=%s",
             config.parametrisation, config.method, spec.n, spec.d, spec.p, state.outer_iters,
             state.newton_iters, state.laml, state.converged)
    if not state.converged:
        log.warning("fit did not converge; partial outputs written to %s", out_dir)
        return EXIT_NONCONV
    return EXIT_OK


def load_model(model_path):
    """Rebuild the fitted ``ModelSpec`` skeleton, family and coefficients from a model artifact."""
    from .families import make_family
    from .layout import build_theta_layout
    from .model import ModelSpec, bases_from_json, parse_config

    raw = _load_json(model_path, "model")
    try:
        config = parse_config(raw["config"])
        bases = bases_from_json(raw["bases"])
        beta = np.asarray(raw["beta"], dtype=float)
    except KeyError as err:
        raise ConfigurationError(f"model file lacks field {err.args[0]!r}") from None
    layout = build_theta_layout(config.d)
    return config, bases, beta, make_family(config.parametrisation, layout)


def cmd_predict(model_path, newdata_path, out_path, seed=None) -> int:
    from .fitting import fitted_moments
    from .layout import build_theta_layout
    from .model import ModelSpec, _assemble, read_csv, write_csv

    t0 = time.perf_counter()
    config, bases, beta, family = load_model(model_path)
    data = read_csv(newdata_path)
    needed = sorted({b.term.covariate for bl in bases for b in bl})
    missing = [c for c in needed if c not in data]
    if missing:
        raise DataError(f"new data lacks covariate columns {missing}")
    for bl in bases:
        for b in bl:
            n_out = int(np.sum(b.out_of_range(data[b.term.covariate])))
            if n_out:
                log.warning("%d rows of covariate %r lie outside the training range [%g, %g]; extrapolating",
                            n_out, b.term.covariate, b.lower, b.upper)
    n = len(next(iter(data.values())))
    fixed = {j for j, bl in enumerate(bases) if not bl}
    designs = _assemble(bases, data, n, fixed)
    spec = ModelSpec(build_theta_layout(config.d), designs, n=n)
    if spec.p != beta.size:
        raise ConfigurationError(f"model has {beta.size} coefficients but the rebuilt design has {spec.p}")
    mu, Sigma = fitted_moments(spec, family, beta)
    cols, table = moments_table(mu, Sigma)
    write_csv(out_path, cols, table)
    manifest = RunManifest("predict", seed, file_digest(model_path), file_digest(newdata_path))
    manifest.add_output("predictions", out_path)
    manifest.timings = {"wall": time.perf_counter() - t0}
    manifest.write(str(out_path) + ".manifest.json")
    log.info("predicted %d rows", n)
    return EXIT_OK


def scenario_fit_config(kind: str, d: int, param: str) -> dict:
    """A fitting configuration matching the generating structure of a scenario."""
    responses = [f"y{k + 1}" for k in range(d)]
    if kind == "smooth":
        return {"responses": responses, "parametrisation": param, "method": "fs",
                "mean": [{"covariate": c, "k": 10} for c in ("x1", "x2", "x3")],
                "covariance": [{"covariate": c, "k": 10} for c in ("x1", "x2")]}
    lin = [{"covariate": f"x{k}", "kind": "linear"} for k in range(1, 10)]
    return {"responses": responses, "parametrisation": param, "method": "fs", "mean": lin, "covariance": lin}


def _summary(a: np.ndarray) -> dict:
    return {"mean": a.mean(axis=0).tolist(), "sd": a.std(axis=0).tolist(),
            "min": a.min(axis=0).tolist(), "max": a.max(axis=0).tolist()}


def cmd_simulate(scenario, d, n, seed, param, out_dir, s=2) -> int:
    from .model import write_csv
    from .simulate import ScenarioConfig, gen_parsimonious_scenario, gen_smooth_scenario

    t0 = time.perf_counter()
    cfg = ScenarioConfig(d=d, n=n, seed=seed, kind=scenario, parametrisation=param, s=s)
    fit_cfg = scenario_fit_config(scenario, d, param)
    if scenario == "smooth":
        X, y, eta, _ = gen_smooth_scenario(cfg)
        xcols = ["x1", "x2", "x3"]
        extra = {}
    else:
        X, y, fixed, eta = gen_parsimonious_scenario(cfg)
        X = X[:, 1:]
        xcols = [f"x{k}" for k in range(1, 10)]
        extra = {"fixed": [int(d + 1 + j) for j in np.flatnonzero(fixed)]}
        fit_cfg["fixed"] = extra["fixed"]
    os.makedirs(out_dir, exist_ok=True)
    data_path = os.path.join(out_dir, "data.csv")
    write_csv(data_path, xcols + [f"y{k + 1}" for k in range(d)], np.hstack([X, y]))
    truth_path = os.path.join(out_dir, "truth.csv")
    write_csv(truth_path, [f"eta_{j + 1}" for j in range(eta.shape[1])], eta)
    config_path = os.path.join(out_dir, "config.json")
    _write_json(config_path, fit_cfg)
    scen = {"scenario": scenario, "d": d, "n": n, "seed": seed, "parametrisation": param, "s": s, **extra}
    manifest = RunManifest("simulate", seed, sha256_bytes(canonical_json(scen).encode()), None, scen)
    manifest.args["true_eta_summary"] = _summary(eta)
    for name, p in (("data", data_path), ("truth", truth_path), ("config", config_path)):
        manifest.add_output(name, p)
    manifest.timings = {"wall": time.perf_counter() - t0}
    manifest.write(os.path.join(out_dir, "manifest.json"))
    log.info("simulated %s scenario d=%d n=%d seed=%d into %s", scenario, d, n, seed, out_dir)
    return EXIT_OK


def cmd_verify(suite="all", d=4, manifest_path=None, stream=None) -> int:
    from .verify import run_suite

    t0 = time.perf_counter()
    code = run_suite(suite, d=d, stream=stream)
    if manifest_path:
        m = RunManifest("verify", None, None, None, {"suite": suite, "d": d, "status": code})
        m.timings = {"wall": time.perf_counter() - t0}
        m.write(manifest_path)
    return code


def cmd_bench(grid, out_path, kernels=("mcd", "logm"), tasks=("hessian", "assembly"), n=2000, reps=3,
              memory_budget=None, seed=0) -> int:
    from .accumulate import DEFAULT_BUDGET
    from .bench import bench_hessians, bench_paths, write_tsv

    t0 = time.perf_counter()
    rows = []
    if "hessian" in tasks:
        rows += bench_hessians(grid, kernels, reps=reps, seed=seed)
    if "assembly" in tasks:
        for kernel in kernels:
            rows += bench_paths([g for g in grid if g >= 4], n=n, budget=memory_budget or DEFAULT_BUDGET,
                                kernel=kernel, reps=reps, seed=seed)
    write_tsv(rows, out_path)
    m = RunManifest("bench", seed, None, None, {"grid": list(grid), "kernels": list(kernels), "tasks": list(tasks),
                                                "n": n, "reps": reps})
    # timings are the payload here, so the TSV is listed by name only
    m.outputs["bench"] = {"path": os.path.basename(str(out_path))}
    m.timings = {"wall": time.perf_counter() - t0}
    m.write(str(out_path) + ".manifest.json")
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def _int_list(value: str) -> list:
    try:
        return [int(v) for v in value.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {value!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gamcov", description=__doc__)
    p.add_argument("--version", action="version", version=f"gamcov {__version__}")
    p.add_argument("-q", "--quiet", action="store_true", help="only warnings and errors on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit a model to CSV data")
    f.add_argument("config")
    f.add_argument("data")
    f.add_argument("out_dir")
    f.add_argument("--method", choices=("fs", "efs"))
    f.add_argument("--param", choices=("mcd", "logm"))
    f.add_argument("--memory-budget", type=int, metavar="BYTES")
    f.add_argument("--threads", type=int, default=1)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--blocks", type=_blocks_arg, default=None, metavar="auto|K")
    f.add_argument("--path", choices=("standard", "parsimonious"), default="standard")

    pr = sub.add_parser("predict", help="evaluate a fitted model on new covariates")
    pr.add_argument("model")
    pr.add_argument("newdata")
    pr.add_argument("out")
    pr.add_argument("--seed", type=int, default=None)

    s = sub.add_parser("simulate", help="generate a simulation scenario")
    s.add_argument("--scenario", choices=("smooth", "parsimonious"), default="smooth")
    s.add_argument("--d", type=int, required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--param", choices=("mcd", "logm"), default="mcd")
    s.add_argument("--s", type=int, choices=(1, 2), default=2, help="parsimony level of the parsimonious scenario")
    s.add_argument("--out", required=True)

    v = sub.add_parser("verify", help="run self-check suites (TAP output)")
    v.add_argument("suite", nargs="?", default="all", choices=("derivs", "sparsity", "blocks", "laml", "all"))
    v.add_argument("--d", type=int, default=4)
    v.add_argument("--manifest", default=None, help="write a run manifest to this path")

    b = sub.add_parser("bench", help="time kernels and accumulation paths (TSV output)")
    b.add_argument("--grid", type=_int_list, default=[5, 10, 20])
    b.add_argument("--kernels", default="mcd,logm")
    b.add_argument("--tasks", default="hessian,assembly")
    b.add_argument("--n", type=int, default=2000)
    b.add_argument("--reps", type=int, default=3)
    b.add_argument("--memory-budget", type=int, metavar="BYTES")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="gamcov: %(message)s",
                        stream=sys.stderr)
    try:
        if args.command == "fit":
            return cmd_fit(args.config, args.data, args.out_dir, args.method, args.param, args.memory_budget,
                           args.threads, args.seed, args.blocks, args.path)
        if args.command == "predict":
            return cmd_predict(args.model, args.newdata, args.out, args.seed)
        if args.command == "simulate":
            return cmd_simulate(args.scenario, args.d, args.n, args.seed, args.param, args.out, args.s)
        if args.command == "verify":
            return cmd_verify(args.suite, args.d, args.manifest)
        if args.command == "bench":
            return cmd_bench(args.grid, args.out, tuple(args.kernels.split(",")), tuple(args.tasks.split(",")),
                             args.n, args.reps, args.memory_budget, args.seed)
    except (NumericError, ParameterRangeError, LineSearchError, InitializationError) as err:
        log.error("numeric failure: %s", err)
        return EXIT_NUMERIC
    except (ConfigurationError, DataError, UnsupportedOperationError, GamcovError, OSError) as err:
        log.error("%s", err)
        return EXIT_CONFIG
    return EXIT_CONFIG


def main(argv=None) -> None:
    sys.exit(run(argv))
