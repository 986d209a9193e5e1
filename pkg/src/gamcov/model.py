"""Model specification: per-predictor designs, penalties and the Theta layout."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np

from .exceptions import ConfigurationError, DataError, ShapeError
from .layout import ThetaLayout, build_theta_layout, n_predictors
from .smooth import SmoothBasis, SmoothTerm, fit_basis, penalty_rank

PARAMETRISATIONS = ("mcd", "logm")


@dataclass(frozen=True, eq=False)
class PenaltyBlock:
    """One smoothing penalty ``S^u`` acting on ``beta[start:stop]``."""

    S: np.ndarray
    start: int
    stop: int
    rank: int
    label: str = ""

    @property
    def size(self) -> int:
        return self.stop - self.start

    def embed(self, p: int) -> np.ndarray:
        out = np.zeros((p, p))
        out[self.start:self.stop, self.start:self.stop] = self.S
        return out

    @cached_property
    def root(self) -> np.ndarray:
        """``R`` with ``R'R = S`` (rows for the positive eigenvalues only)."""
        ev, V = np.linalg.eigh(0.5 * (self.S + self.S.T))
        keep = ev > 1e-13 * max(ev.max(initial=0.0), 1e-300)
        return np.sqrt(ev[keep])[:, None] * V[:, keep].T

    def quad(self, beta: np.ndarray) -> float:
        """``b' S b`` as a sum of squares, free of the cancellation in the direct form."""
        r = self.root @ beta[self.start:self.stop]
        return float(r @ r)


@dataclass(eq=False)
class ModelSpec:
    """Designs ``X^j`` for every linear predictor plus the penalties on ``beta``.

    ``designs[j]`` is ``None`` for an intercept-only predictor: its design is a
    column of ones that is never stored.  ``bases[j]`` lists the fitted bases
    (after the implicit intercept) used to rebuild designs on new data; it is
    empty for specs assembled directly from matrices.
    """

    layout: ThetaLayout
    designs: list
    penalties: list = field(default_factory=list)
    bases: list | None = None
    n: int = 0
    mean_only: bool = False

    def __post_init__(self):
        q = self.layout.d if self.mean_only else self.layout.q
        if len(self.designs) != q:
            raise ShapeError(f"expected {q} design matrices, got {len(self.designs)}")
        self.designs = list(self.designs)
        n = None
        for j, X in enumerate(self.designs):
            if X is None:
                continue
            X = np.asarray(X, dtype=np.float64)
            if X.ndim != 2:
                raise ShapeError(f"design {j} must be two-dimensional")
            self.designs[j] = X
            if n is None:
                n = X.shape[0]
            elif X.shape[0] != n:
                raise ShapeError(f"design {j} has {X.shape[0]} rows, expected {n}")
        if n is not None:
            self.n = n
        elif self.n <= 0:
            raise ShapeError("all predictors are intercept-only: the row count must be given")
        self.widths = np.array([1 if X is None else X.shape[1] for X in self.designs], dtype=np.intp)
        self.coef_offsets = np.concatenate([[0], np.cumsum(self.widths)]).astype(np.intp)
        p = self.p
        for pen in self.penalties:
            if not (0 <= pen.start < pen.stop <= p):
                raise ShapeError(f"penalty {pen.label!r} range [{pen.start}, {pen.stop}) outside [0, {p})")
            if pen.S.shape != (pen.size, pen.size):
                raise ShapeError(f"penalty {pen.label!r} has shape {pen.S.shape}, expected {(pen.size,) * 2}")

    @property
    def q(self) -> int:
        return len(self.designs)

    @property
    def d(self) -> int:
        return self.layout.d

    @property
    def p(self) -> int:
        return int(self.coef_offsets[-1])

    @property
    def fixed(self) -> np.ndarray:
        """Boolean mask of intercept-only predictors."""
        return np.array([X is None for X in self.designs])

    def coef_slice(self, j: int) -> slice:
        return slice(int(self.coef_offsets[j]), int(self.coef_offsets[j + 1]))

    def design_rows(self, j: int, start: int, stop: int) -> np.ndarray | None:
        X = self.designs[j]
        return None if X is None else X[start:stop]

    def dense_design(self, j: int) -> np.ndarray:
        X = self.designs[j]
        return np.ones((self.n, 1)) if X is None else X

    def total_penalty(self, lam: np.ndarray) -> np.ndarray:
        S = np.zeros((self.p, self.p))
        for lam_u, pen in zip(lam, self.penalties):
            S[pen.start:pen.stop, pen.start:pen.stop] += lam_u * pen.S
        return S

    def penalty_quad(self, beta: np.ndarray, lam: np.ndarray) -> float:
        return float(sum(lam_u * pen.quad(beta) for lam_u, pen in zip(lam, self.penalties)))

    def intercept_index(self, j: int) -> int:
        return int(self.coef_offsets[j])


def eta_from_beta(spec: ModelSpec, beta: np.ndarray) -> np.ndarray:
    """``(n, q)`` matrix of linear predictors, column ``j`` being ``X^j beta_j``."""
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (spec.p,):
        raise ShapeError(f"coefficient vector has shape {beta.shape}, expected ({spec.p},)")
    eta = np.empty((spec.n, spec.q))
    for j, X in enumerate(spec.designs):
        bj = beta[spec.coef_slice(j)]
        if X is None:
            eta[:, j] = bj[0]
        else:
            eta[:, j] = X @ bj
    return eta


def eta_rows(spec: ModelSpec, beta: np.ndarray, start: int, stop: int) -> np.ndarray:
    eta = np.empty((stop - start, spec.q))
    for j, X in enumerate(spec.designs):
        bj = beta[spec.coef_slice(j)]
        eta[:, j] = bj[0] if X is None else X[start:stop] @ bj
    return eta


# --------------------------------------------------------------------------- config


@dataclass
class ModelConfig:
    """Parsed model configuration.

    ``terms[j]`` is the term list of predictor ``j`` (0-based); an empty list
    or membership in ``fixed`` makes the predictor intercept-only.
    """

    responses: list
    parametrisation: str
    terms: list
    fixed: set
    method: str = "fs"

    @property
    def d(self) -> int:
        return len(self.responses)

    @property
    def covariates(self) -> list:
        seen = []
        for tl in self.terms:
            for t in tl:
                if t.covariate not in seen:
                    seen.append(t.covariate)
        return seen

    def to_dict(self) -> dict:
        return {
            "responses": list(self.responses),
            "parametrisation": self.parametrisation,
            "predictors": [[t.to_dict() for t in tl] for tl in self.terms],
            "fixed": sorted(j + 1 for j in self.fixed),
            "method": self.method,
        }


def _parse_terms(raw, where: str) -> list:
    if not isinstance(raw, list):
        raise ConfigurationError(f"field {where!r} must be a list of terms")
    out = []
    for i, t in enumerate(raw):
        if isinstance(t, str):
            t = {"covariate": t}
        if not isinstance(t, dict) or "covariate" not in t:
            raise ConfigurationError(f"field {where}[{i}] must name a 'covariate'")
        unknown = set(t) - {"covariate", "k", "kind", "center"}
        if unknown:
            raise ConfigurationError(f"field {where}[{i}] has unknown keys {sorted(unknown)}")
        try:
            out.append(SmoothTerm(**t))
        except ConfigurationError as err:
            raise ConfigurationError(f"field {where}[{i}]: {err}") from None
        except TypeError as err:
            raise ConfigurationError(f"field {where}[{i}]: {err}") from None
    return out


def parse_config(raw: Mapping) -> ModelConfig:
    if not isinstance(raw, Mapping):
        raise ConfigurationError("configuration must be a JSON object")
    responses = raw.get("responses")
    if not isinstance(responses, list) or not responses or not all(isinstance(r, str) for r in responses):
        raise ConfigurationError("field 'responses' must be a non-empty list of column names")
    param = str(raw.get("parametrisation", "mcd")).lower()
    if param not in PARAMETRISATIONS:
        raise ConfigurationError(f"field 'parametrisation' must be one of {PARAMETRISATIONS}, got {param!r}")
    method = str(raw.get("method", "fs")).lower()
    if method not in ("fs", "efs"):
        raise ConfigurationError(f"field 'method' must be 'fs' or 'efs', got {method!r}")
    d = len(responses)
    q = n_predictors(d)
    if "predictors" in raw and isinstance(raw["predictors"], list):
        plist = raw["predictors"]
        if len(plist) != q:
            raise ConfigurationError(f"field 'predictors' must hold {q} term lists for d={d}, got {len(plist)}")
        terms = [_parse_terms(tl, f"predictors[{j}]") for j, tl in enumerate(plist)]
    else:
        mean_terms = _parse_terms(raw.get("mean", []), "mean")
        cov_terms = _parse_terms(raw.get("covariance", []), "covariance")
        terms = [list(mean_terms) if j < d else list(cov_terms) for j in range(q)]
        overrides = raw.get("predictors", {}) or {}
        if not isinstance(overrides, Mapping):
            raise ConfigurationError("field 'predictors' must be a list or an object keyed by predictor index")
        for key, tl in overrides.items():
            try:
                j = int(key) - 1
            except ValueError:
                raise ConfigurationError(f"field 'predictors' has non-integer key {key!r}") from None
            if not 0 <= j < q:
                raise ConfigurationError(f"field 'predictors' key {key} outside 1..{q}")
            terms[j] = _parse_terms(tl, f"predictors.{key}")
    fixed_raw = raw.get("fixed", [])
    if not isinstance(fixed_raw, list):
        raise ConfigurationError("field 'fixed' must be a list of predictor indices")
    fixed = set()
    for f in fixed_raw:
        if int(f) != f or not 1 <= f <= q:
            raise ConfigurationError(f"field 'fixed' entry {f!r} outside 1..{q}")
        fixed.add(int(f) - 1)
    return ModelConfig(list(responses), param, terms, fixed, method)


def read_csv(path) -> dict:
    """Read a CSV file with a header row into a dict of float columns."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            vals = []
            for name, cell in zip(header, row):
                cell = cell.strip()
                if cell == "" or cell.lower() in ("na", "nan", "null"):
                    raise DataError(f"{path}:{lineno}: missing value in column {name!r}")
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise DataError(f"{path}:{lineno}: non-numeric value {cell!r} in column {name!r}") from None
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    arr = np.array(rows, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{path}: non-finite values")
    return {name: arr[:, i] for i, name in enumerate(header)}


def write_csv(path, columns: Sequence[str], values: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in np.atleast_2d(values):
            writer.writerow([repr(float(v)) for v in row])


def response_matrix(config: ModelConfig, data: Mapping) -> np.ndarray:
    missing = [r for r in config.responses if r not in data]
    if missing:
        raise DataError(f"data lacks response columns {missing}")
    return np.column_stack([np.asarray(data[r], dtype=float) for r in config.responses])


def _assemble(bases_per_pred, data, n, fixed):
    designs = []
    for j, bases in enumerate(bases_per_pred):
        if j in fixed or not bases:
            designs.append(None)
            continue
        cols = [np.ones((n, 1))]
        for b in bases:
            cols.append(b.evaluate(np.asarray(data[b.term.covariate], dtype=float)))
        designs.append(np.hstack(cols))
    return designs


def build_model_spec(config: ModelConfig, data: Mapping) -> ModelSpec:
    """Fit bases on the training covariates and assemble designs and penalties.

    Every modelled predictor gets an explicit intercept column followed by
    its (centered) terms; each spline term contributes one penalty.
    """
    layout = build_theta_layout(config.d)
    missing = [c for c in config.covariates if c not in data]
    if missing:
        raise DataError(f"data lacks covariate columns {missing}")
    n = len(np.asarray(data[config.responses[0]])) if config.responses[0] in data else None
    if n is None:
        raise DataError(f"data lacks response column {config.responses[0]!r}")
    bases_per_pred = []
    cache = {}
    for j in range(layout.q):
        if j in config.fixed:
            bases_per_pred.append([])
            continue
        bl = []
        for t in config.terms[j]:
            if t not in cache:
                cache[t] = fit_basis(np.asarray(data[t.covariate], dtype=float), t)
            bl.append(cache[t])
        bases_per_pred.append(bl)
    designs = _assemble(bases_per_pred, data, n, config.fixed)
    penalties = []
    offset = 0
    for j, bases in enumerate(bases_per_pred):
        width = 1 if designs[j] is None else designs[j].shape[1]
        col = offset + 1
        for b in bases:
            m = b.n_columns
            if b.term.kind == "bspline":
                S = b.penalty()
                penalties.append(PenaltyBlock(S, col, col + m, penalty_rank(S), f"eta{j + 1}:s({b.term.covariate})"))
            col += m
        offset += width
    return ModelSpec(layout, designs, penalties, bases_per_pred, n)


def rebuild_designs(spec: ModelSpec, data: Mapping) -> list:
    """Designs of ``spec`` evaluated on new covariate values."""
    if spec.bases is None:
        raise ConfigurationError("spec was not built from a configuration; cannot evaluate on new data")
    needed = {b.term.covariate for bl in spec.bases for b in bl}
    missing = sorted(c for c in needed if c not in data)
    if missing:
        raise DataError(f"new data lacks covariate columns {missing}")
    if needed:
        n = len(np.asarray(data[next(iter(needed))]))
    else:
        n = len(np.asarray(next(iter(data.values()))))
    fixed = {j for j, X in enumerate(spec.designs) if X is None}
    return _assemble(spec.bases, data, n, fixed)


def spec_for_data(spec: ModelSpec, data: Mapping) -> ModelSpec:
    designs = rebuild_designs(spec, data)
    n = len(np.asarray(next(iter(data.values()))))
    return ModelSpec(spec.layout, designs, spec.penalties, spec.bases, n, spec.mean_only)


def bases_to_json(spec: ModelSpec) -> list:
    return [[b.to_dict() for b in bl] for bl in (spec.bases or [])]


def bases_from_json(raw: list) -> list:
    return [[SmoothBasis.from_dict(b) for b in bl] for bl in raw]
