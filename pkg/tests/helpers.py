"""Shared builders for randomized test models."""
import numpy as np

from gamcov.families import DerivSource, make_family
from gamcov.layout import build_theta_layout
from gamcov.model import ModelSpec, PenaltyBlock
from gamcov.smooth import difference_penalty


def random_spec(rng, d, n, fixed_frac=0.5, p_range=(2, 4), penalize=True, fixed=None):
    """Random designs (intercept column + noise columns) with some intercept-only predictors."""
    layout = build_theta_layout(d)
    q = layout.q
    if fixed is None:
        fixed = rng.random(q) < fixed_frac
    designs = []
    penalties = []
    off = 0
    for j in range(q):
        if fixed[j]:
            designs.append(None)
            off += 1
            continue
        pj = int(rng.integers(p_range[0], p_range[1] + 1))
        X = np.column_stack([np.ones(n), rng.normal(size=(n, pj - 1)) * 0.3])
        designs.append(X)
        if penalize and pj >= 3:
            S = difference_penalty(pj - 1) + 1e-3 * np.eye(pj - 1)
            penalties.append(PenaltyBlock(S, off + 1, off + pj, pj - 1, f"p{j}"))
        off += pj
    return ModelSpec(layout, designs, penalties, n=n)


def random_source(rng, spec, family_name, beta_scale=0.2):
    fam = make_family(family_name, spec.layout)
    beta = rng.normal(size=spec.p) * beta_scale
    y = rng.normal(size=(spec.n, spec.d))
    return DerivSource(spec, fam, y, beta=beta), fam, beta, y
