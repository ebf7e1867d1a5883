"""Mass-univariate forward inference.

Every voxel is fitted with the same linear model ``x = Y beta + eps`` and
term effects are tested with t contrasts, Bonferroni-corrected across voxels.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy import linalg, special

from .corpus import INTERCEPT, DesignMatrix

# residual variances below this fraction of the voxel's mean square are zero
_ZERO_VARIANCE_RTOL = 1e-24
COLLINEAR_R = 0.999


class CollinearDesignError(ValueError):
    """Rank-deficient design; ``groups`` lists the offending column names."""

    def __init__(self, message: str, groups: list[tuple[str, ...]]):
        super().__init__(message)
        self.groups = groups


@dataclass(frozen=True, eq=False)
class GlmFit:
    beta: np.ndarray
    residual_variance: np.ndarray
    dof: int
    design: DesignMatrix
    gram_inv: np.ndarray
    mean_square: np.ndarray


@dataclass(frozen=True, eq=False)
class ContrastResult:
    term: str
    t_values: np.ndarray
    p_values: np.ndarray
    fwer_threshold: float
    significant: np.ndarray
    alpha: float
    effect: np.ndarray

    @property
    def n_significant(self) -> int:
        return int(self.significant.sum())


def collinear_groups(Y: np.ndarray, columns, r_threshold: float = COLLINEAR_R,
                     pairwise: bool = True):
    """Column groups responsible for rank deficiency.

    Returns pairs with ``|r| > r_threshold`` (only when ``pairwise``) plus,
    when the matrix is still rank deficient, the support of each null-space
    direction.
    """
    Y = np.asarray(Y, dtype=np.float64)
    groups = []
    std = Y.std(axis=0)
    varying = np.flatnonzero(std > 0)
    if pairwise and varying.size > 1:
        r = np.corrcoef(Y[:, varying], rowvar=False)
        for a, b in itertools.combinations(range(varying.size), 2):
            if abs(r[a, b]) > r_threshold:
                groups.append((columns[varying[a]], columns[varying[b]]))
    # a term that never occurs is a null column on its own
    used = Y.any(axis=0)
    groups.extend((columns[j],) for j in np.flatnonzero(~used))
    # identical non-zero constant columns (e.g. an all-ones term next to the intercept)
    const = np.flatnonzero((std == 0) & used)
    for a, b in itertools.combinations(const, 2):
        groups.append((columns[a], columns[b]))
    _, s, vt = linalg.svd(Y, full_matrices=False)
    tol = s.max() * max(Y.shape) * np.finfo(float).eps if s.size else 0.0
    for v in vt[s <= tol]:
        support = tuple(columns[j] for j in np.flatnonzero(np.abs(v) > 1e-8))
        if support and support not in groups:
            groups.append(support)
    return groups


def fit_glm(maps: np.ndarray, design: DesignMatrix) -> GlmFit:
    """Ordinary least squares of every voxel on the design.

    Parameters
    ----------
    maps : ndarray, shape (n, p)
    design : DesignMatrix with n rows and k columns, full column rank

    Raises
    ------
    CollinearDesignError
        If ``Y`` is rank deficient, or it has an intercept and two columns
        correlate above 0.999.
    """
    X = np.asarray(maps, dtype=np.float64)
    Y = design.Y
    n, k = Y.shape
    if X.shape[0] != n:
        raise ValueError(f"maps have {X.shape[0]} rows but design has {n}")
    # |r| near 1 only implies near-singularity alongside an intercept
    groups = collinear_groups(Y, design.columns, pairwise=design.intercept_included)
    rank = np.linalg.matrix_rank(Y)
    if groups or rank < k:
        names = "; ".join(" ~ ".join(g) for g in groups) or "unidentified"
        raise CollinearDesignError(f"design is collinear (rank {rank}, {k} columns): {names}", groups)
    if n <= k:
        raise ValueError(f"need more maps than design columns (n={n}, k={k})")

    q, r = linalg.qr(Y, mode="economic")
    beta = linalg.solve_triangular(r, q.T @ X)
    resid = X - Y @ beta
    dof = n - rank
    rss = np.einsum("ij,ij->j", resid, resid)
    r_inv = linalg.solve_triangular(r, np.eye(k))
    return GlmFit(
        beta=beta,
        residual_variance=rss / dof,
        dof=int(dof),
        design=design,
        gram_inv=r_inv @ r_inv.T,
        mean_square=np.einsum("ij,ij->j", X, X) / n,
    )


def contrast_vector(design: DesignMatrix, term: str, mode: str = "indicator") -> np.ndarray:
    """Contrast isolating ``term``.

    ``indicator`` tests the term's own coefficient (other terms and the
    intercept are partialled out by the joint fit). ``category-mean`` tests the
    coefficient against the mean of the other same-category coefficients.
    """
    if term not in design.columns or term == INTERCEPT:
        if term in design.excluded:
            raise KeyError(f"term {term!r} was excluded from the design")
        raise KeyError(f"term {term!r} is not a design column")
    j = design.column(term)
    c = np.zeros(len(design.columns))
    c[j] = 1.0
    if mode == "indicator":
        return c
    if mode != "category-mean":
        raise ValueError(f"unknown contrast mode {mode!r}")
    cat = design.categories[j]
    others = [i for i, cc in enumerate(design.categories) if cc == cat and i != j]
    if others:
        c[others] = -1.0 / len(others)
    return c


def t_sf_two_sided(t: np.ndarray, dof: int) -> np.ndarray:
    """Two-sided Student-t tail probability."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    return np.minimum(1.0, 2.0 * special.stdtr(dof, -t))


def fwer_threshold(p: int, alpha: float, dof: int) -> float:
    """|t| threshold of a two-sided Bonferroni test over ``p`` voxels."""
    if not (0 < alpha < 1):
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    if dof < 1:
        raise ValueError(f"dof must be >= 1, got {dof}")
    return float(-special.stdtrit(dof, alpha / (2.0 * p)))


def term_contrast(fit: GlmFit, term: str, alpha: float = 0.05,
                  mode: str = "indicator") -> ContrastResult:
    """t test of one term-versus-rest contrast at every voxel.

    A voxel is significant when its two-sided p-value is at most
    ``alpha / p`` (Bonferroni family-wise control).
    """
    if fit.dof < 1:
        raise ValueError("no residual degrees of freedom")
    c = contrast_vector(fit.design, term, mode)
    effect = c @ fit.beta
    scale = float(c @ fit.gram_inv @ c)
    rv = fit.residual_variance
    zero = rv <= _ZERO_VARIANCE_RTOL * np.maximum(fit.mean_square, np.finfo(float).tiny)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = effect / np.sqrt(rv * scale)
    if zero.any():
        nonzero_effect = np.abs(effect) > 1e-10 * np.sqrt(fit.mean_square)
        t = np.where(zero, np.where(nonzero_effect, np.copysign(np.inf, effect), 0.0), t)
    pvals = t_sf_two_sided(t, fit.dof)
    p = effect.size
    return ContrastResult(
        term=term,
        t_values=t,
        p_values=pvals,
        fwer_threshold=fwer_threshold(p, alpha, fit.dof),
        significant=pvals <= alpha / p,
        alpha=alpha,
        effect=effect,
    )
