"""Memory-bounded assembly of the gradient and Hessian w.r.t. beta.

Rows are processed in blocks.  For each block the per-row derivatives
w.r.t. eta are pulled from a :class:`~gamcov.families.DerivSource`, reduced
against the design rows of the block and released before the next block.

Two paths are provided.  The standard path stores every derivative vector
of the block and forms ``X^j' diag(l^{jk}) X^k`` pair by pair.  The
parsimonious path walks the block in small inner chunks, folds pairs of
intercept-only predictors into scalars, reduces pairs with one
intercept-only member into ``X^k' l^{jk}`` on the fly and stores only the
vectors of pairs between two modelled predictors.
"""
from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigurationError
from .families import DerivSource, Family
from .model import ModelSpec

DEFAULT_BUDGET = 1 << 30
INNER_CHUNK = 16
PATHS = ("standard", "parsimonious")


class BufferMeter:
    """Tracks live and peak bytes of the derivative and design buffers."""

    def __init__(self):
        self._lock = threading.Lock()
        self.live = 0
        self.peak = 0
        self.total_stored_vector_bytes = 0

    def alloc(self, nbytes: int, stored_vectors: bool = False):
        with self._lock:
            self.live += int(nbytes)
            self.peak = max(self.peak, self.live)
            if stored_vectors:
                self.total_stored_vector_bytes += int(nbytes)

    def free(self, nbytes: int):
        with self._lock:
            self.live -= int(nbytes)


@dataclass(eq=False)
class BlockPlan:
    """Row partition and buffer budget for one accumulation pass.

    ``pair_class`` classifies every stored Hessian pair: 0 when both
    predictors are intercept-only (the set ``D``), 1 when exactly one is,
    2 when both are modelled.
    """

    n: int
    ranges: list
    budget: int
    path: str
    fixed: np.ndarray
    pair_class: np.ndarray
    bytes_per_row: int
    overhead_bytes: int
    threads: int = 1
    inner_chunk: int = INNER_CHUNK

    @property
    def B(self) -> int:
        return len(self.ranges)

    @property
    def block_size(self) -> int:
        return max(b - a for a, b in self.ranges)

    @property
    def estimated_peak(self) -> int:
        return self.threads * (self.block_size * self.bytes_per_row + self.overhead_bytes)

    def fixed_partners(self, j: int, pairs: np.ndarray) -> np.ndarray:
        """``D_j``: intercept-only predictors paired with an intercept-only ``j``."""
        if not self.fixed[j]:
            return np.zeros(0, dtype=np.intp)
        sel = (self.pair_class == 0) & ((pairs[:, 0] == j) | (pairs[:, 1] == j))
        other = np.where(pairs[sel, 0] == j, pairs[sel, 1], pairs[sel, 0])
        return np.unique(other)


def _row_bytes(spec: ModelSpec, family: Family, path: str, fixed: np.ndarray, pair_class: np.ndarray, order: int):
    q = spec.q
    modelled = ~fixed
    m = int(modelled.sum())
    pmax = int(spec.widths[modelled].max()) if m else 0
    n_third = len(family.triples) if order >= 3 else 0
    full = 1 + q + len(pair_class) + n_third + m * pmax
    if path == "standard":
        return 8 * full, 0
    stored = 1 + m + int(np.sum(pair_class == 2)) + m * pmax
    return 8 * stored, 8 * INNER_CHUNK * full


def plan_blocks(spec: ModelSpec, family: Family, budget_bytes: int = DEFAULT_BUDGET, path: str = "standard",
                threads: int = 1, blocks: int | None = None, order: int = 2) -> BlockPlan:
    """Smallest block count whose buffers fit in ``budget_bytes``.

    With ``threads > 1`` every concurrently processed block holds its own
    buffers, so the budget is shared between them.  ``blocks`` forces a
    block count (still checked against the budget).
    """
    if path not in PATHS:
        raise ConfigurationError(f"unknown accumulation path {path!r}; expected one of {PATHS}")
    threads = max(1, int(threads))
    n = spec.n
    fixed = spec.fixed
    pairs = family.pairs
    nf = fixed[pairs[:, 0]].astype(int) + fixed[pairs[:, 1]].astype(int)
    pair_class = (2 - nf).astype(np.int8)
    if path == "parsimonious" and not fixed.any():
        path = "standard"
    per_row, overhead = _row_bytes(spec, family, path, fixed, pair_class, order)
    share = budget_bytes // threads
    cap = (share - overhead) // per_row
    if cap < 1:
        raise ConfigurationError(
            f"memory budget of {budget_bytes} bytes cannot hold the derivatives of a single row "
            f"({per_row + overhead} bytes needed per worker)")
    if blocks is None:
        B = -(-n // min(cap, n))
    else:
        B = int(blocks)
        if B < 1 or B > n:
            raise ConfigurationError(f"block count must lie in 1..{n}, got {B}")
        if -(-n // B) > cap:
            raise ConfigurationError(f"{B} blocks exceed the memory budget; at least {-(-n // cap)} needed")
    edges = np.linspace(0, n, B + 1).round().astype(int)
    ranges = [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]
    return BlockPlan(n, ranges, int(budget_bytes), path, fixed, pair_class, per_row, overhead, threads)


@dataclass
class Accumulated:
    loglik: float
    grad: np.ndarray
    hess: np.ndarray
    meter: BufferMeter = field(repr=False, default=None)


def _symmetrize_upper(H: np.ndarray) -> np.ndarray:
    return np.triu(H) + np.triu(H, 1).T


class _Layout:
    """Cached index bookkeeping shared by all blocks of one pass."""

    def __init__(self, spec: ModelSpec, family: Family, plan: BlockPlan):
        self.spec = spec
        pairs = family.pairs
        self.pairs = pairs
        self.off = spec.coef_offsets
        fixed = plan.fixed
        self.fixed_idx = np.flatnonzero(fixed)
        self.mod_idx = np.flatnonzero(~fixed)
        cls = plan.pair_class
        self.D_pos = np.flatnonzero(cls == 0)
        self.mm_pos = np.flatnonzero(cls == 2)
        mixed = np.flatnonzero(cls == 1)
        # group mixed pairs by their modelled member
        self.mixed_by_k = []
        for k in self.mod_idx:
            sel = mixed[(pairs[mixed, 0] == k) | (pairs[mixed, 1] == k)]
            if len(sel):
                partner = np.where(pairs[sel, 0] == k, pairs[sel, 1], pairs[sel, 0])
                self.mixed_by_k.append((int(k), sel, partner))
        self.D_rows = self.off[pairs[self.D_pos, 0]]
        self.D_cols = self.off[pairs[self.D_pos, 1]]


def _add_pair(H, spec, j, k, Xj, Xk, v):
    """Add ``X^j' diag(v) X^k`` into the upper block (j <= k) of ``H``."""
    sj, sk = spec.coef_slice(j), spec.coef_slice(k)
    if Xj is None and Xk is None:
        H[sj.start, sk.start] += v.sum()
    elif Xj is None:
        H[sj.start, sk] += v @ Xk
    elif Xk is None:
        H[sj, sk.start] += Xj.T @ v
    else:
        H[sj, sk] += Xj.T @ (v[:, None] * Xk)


def _block_standard(spec, source, lay, a, b, meter):
    p = spec.p
    g = np.zeros(p)
    H = np.zeros((p, p))
    bundle = source(a, b, 2)
    meter.alloc(bundle.nbytes)
    Xb = [spec.design_rows(j, a, b) for j in range(spec.q)]
    xbytes = sum(X.nbytes for X in Xb if X is not None)
    meter.alloc(xbytes)
    try:
        for j, X in enumerate(Xb):
            sj = spec.coef_slice(j)
            if X is None:
                g[sj.start] += bundle.grad[:, j].sum()
            else:
                g[sj] += X.T @ bundle.grad[:, j]
        for idx, (j, k) in enumerate(lay.pairs):
            _add_pair(H, spec, j, k, Xb[j], Xb[k], bundle.hess[:, idx])
        ll = float(bundle.loglik.sum())
    finally:
        meter.free(bundle.nbytes + xbytes)
    return ll, g, H


def _block_parsimonious(spec, source, lay, a, b, meter, inner):
    p = spec.p
    g = np.zeros(p)
    H = np.zeros((p, p))
    nb = b - a
    mod = lay.mod_idx
    # stored buffers: modelled gradients and modelled-modelled Hessian vectors
    Gm = np.empty((nb, len(mod)))
    Hmm = np.empty((nb, len(lay.mm_pos)))
    stored = Gm.nbytes + Hmm.nbytes
    meter.alloc(stored, stored_vectors=True)
    Xb = {int(j): spec.design_rows(int(j), a, b) for j in mod}
    xbytes = sum(X.nbytes for X in Xb.values())
    meter.alloc(xbytes)
    ll = 0.0
    fixed_g = np.zeros(len(lay.fixed_idx))
    D_acc = np.zeros(len(lay.D_pos))
    # X^k' l^{jk} for every intercept-only j paired with a modelled k
    mixed_acc = [np.zeros((len(sel), spec.widths[k])) for k, sel, _ in lay.mixed_by_k]
    try:
        for c0 in range(a, b, inner):
            c1 = min(b, c0 + inner)
            bundle = source(c0, c1, 2)
            meter.alloc(bundle.nbytes)
            ll += float(bundle.loglik.sum())
            fixed_g += bundle.grad[:, lay.fixed_idx].sum(axis=0)
            Gm[c0 - a:c1 - a] = bundle.grad[:, mod]
            # step 1 of the parsimonious scheme: pairs of fixed predictors become scalars
            D_acc += bundle.hess[:, lay.D_pos].sum(axis=0)
            for i, (k, sel, _) in enumerate(lay.mixed_by_k):
                mixed_acc[i] += bundle.hess[:, sel].T @ Xb[k][c0 - a:c1 - a]
            Hmm[c0 - a:c1 - a] = bundle.hess[:, lay.mm_pos]
            meter.free(bundle.nbytes)
        # step 2: modelled pairs contracted against the block designs
        g[lay.off[lay.fixed_idx]] += fixed_g
        for i, j in enumerate(mod):
            g[spec.coef_slice(int(j))] += Xb[int(j)].T @ Gm[:, i]
        np.add.at(H, (lay.D_rows, lay.D_cols), D_acc)
        for (k, _, partner), acc in zip(lay.mixed_by_k, mixed_acc):
            sk = spec.coef_slice(k)
            oj = lay.off[partner]
            lo = partner < k
            H[oj[lo, None], np.arange(sk.start, sk.stop)] += acc[lo]
            H[np.arange(sk.start, sk.stop)[:, None], oj[~lo]] += acc[~lo].T
        for col, pos in enumerate(lay.mm_pos):
            j, k = lay.pairs[pos]
            _add_pair(H, spec, int(j), int(k), Xb[int(j)], Xb[int(k)], Hmm[:, col])
    finally:
        meter.free(stored + xbytes)
    return ll, g, H


def _run(spec, source, plan, meter, threads, block_fn):
    meter = meter or BufferMeter()
    p = spec.p
    threads = max(1, int(threads or plan.threads))
    if threads == 1:
        g = np.zeros(p)
        H = np.zeros((p, p))
        ll = 0.0
        for a, b in plan.ranges:
            lb, gb, Hb = block_fn(a, b, meter)
            ll += lb
            g += gb
            H += Hb
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda r: block_fn(r[0], r[1], meter), plan.ranges))
        g = np.zeros(p)
        H = np.zeros((p, p))
        ll = 0.0
        # reduce in block order, independent of completion order
        for lb, gb, Hb in results:
            ll += lb
            g += gb
            H += Hb
    return Accumulated(ll, g, _symmetrize_upper(H), meter)


def accumulate(spec: ModelSpec, source: DerivSource, plan: BlockPlan, meter: BufferMeter | None = None,
               threads: int | None = None) -> Accumulated:
    """Standard blocked assembly: every pair is formed as ``X^j' diag(l^{jk}) X^k``."""
    lay = _Layout(spec, source.family, plan)
    return _run(spec, source, plan, meter, threads,
                lambda a, b, m: _block_standard(spec, source, lay, a, b, m))


def accumulate_parsimonious(spec: ModelSpec, source: DerivSource, plan: BlockPlan,
                            meter: BufferMeter | None = None, threads: int | None = None) -> Accumulated:
    """Assembly exploiting intercept-only predictors; falls back to the standard path without any."""
    if plan.path == "standard" or not plan.fixed.any():
        return accumulate(spec, source, plan, meter, threads)
    lay = _Layout(spec, source.family, plan)
    return _run(spec, source, plan, meter, threads,
                lambda a, b, m: _block_parsimonious(spec, source, lay, a, b, m, plan.inner_chunk))


def assemble(spec: ModelSpec, source: DerivSource, plan: BlockPlan, meter=None, threads=None) -> Accumulated:
    if plan.path == "parsimonious":
        return accumulate_parsimonious(spec, source, plan, meter, threads)
    return accumulate(spec, source, plan, meter, threads)


def naive_assembly(spec: ModelSpec, source: DerivSource):
    """Single pass over all rows with dense designs and dense eta Hessians (test oracle)."""
    from .oracles import naive_design_assembly
    bundle = source(0, spec.n, 2)
    q = spec.q
    Hd = np.zeros((spec.n, q, q))
    pr = source.family.pairs
    Hd[:, pr[:, 0], pr[:, 1]] = bundle.hess
    Hd[:, pr[:, 1], pr[:, 0]] = bundle.hess
    designs = [spec.dense_design(j) for j in range(q)]
    g, H = naive_design_assembly(designs, bundle.grad, Hd)
    return float(bundle.loglik.sum()), g, H
