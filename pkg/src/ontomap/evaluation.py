"""Cross-validation schemes, regularization search, metrics and corpus diagnostics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .classifiers import balance_weights, solve_logistic_batch
from .corpus import Corpus, build_design_matrix

logger = logging.getLogger(__name__)

SCHEMES = ("leave-one-study-out", "leave-one-laboratory-out")
DEFAULT_LAMBDA_GRID = tuple(float(x) for x in np.logspace(-2, 3, 6))


# ----------------------------------------------------------------------------
# outer folds


@dataclass(frozen=True, eq=False)
class FoldPlan:
    """Outer folds; ``folds[i] = (train indices, test indices)`` for held-out ``units[i]``."""

    scheme: str
    units: tuple[str, ...]
    folds: tuple[tuple[np.ndarray, np.ndarray], ...]

    def __len__(self) -> int:
        return len(self.folds)


def make_folds(corpus: Corpus, scheme: str = "leave-one-study-out") -> FoldPlan:
    """One fold per study (or laboratory); all maps of the held-out unit form the test set."""
    if scheme == "leave-one-study-out":
        groups = corpus.map_studies
    elif scheme == "leave-one-laboratory-out":
        groups = corpus.map_laboratories
    else:
        raise ValueError(f"unknown cross-validation scheme {scheme!r}; expected one of {SCHEMES}")
    units = tuple(dict.fromkeys(groups.tolist()))
    if len(units) < 2:
        kind = "study" if scheme == "leave-one-study-out" else "laboratory"
        raise ValueError(f"{scheme} needs at least 2 units, corpus has a single {kind} "
                         f"({units[0] if units else 'none'})")
    folds = []
    for u in units:
        test = np.flatnonzero(groups == u)
        train = np.flatnonzero(groups != u)
        folds.append((train, test))
    return FoldPlan(scheme, units, tuple(folds))


# ----------------------------------------------------------------------------
# inner splits


class StratificationError(ValueError):
    def __init__(self, message: str, term: str | None = None):
        super().__init__(message)
        self.term = term


@dataclass(frozen=True, eq=False)
class InnerSplitPlan:
    n_splits: int
    test_fraction: float
    splits: tuple[tuple[np.ndarray, np.ndarray], ...]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def inner_splits(y, n_splits: int = 10, test_fraction: float = 0.2, seed: int = 0,
                 term: str | None = None) -> InnerSplitPlan:
    """Stratified shuffle splits of positions ``0..len(y)-1``.

    Each class contributes ``round(test_fraction * count)`` validation samples,
    kept between 1 and ``count - 1``.
    """
    y = np.asarray(y).astype(bool)
    if not (0 < test_fraction < 1):
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    if n_splits < 1:
        raise ValueError(f"n_splits must be >= 1, got {n_splits}")
    classes = [np.flatnonzero(~y), np.flatnonzero(y)]
    for c, idx in zip(("negative", "positive"), classes):
        if idx.size < 2:
            name = f"term {term!r}" if term else "labels"
            raise StratificationError(
                f"{name}: {c} class has {idx.size} sample(s), at least 2 are needed to stratify",
                term)
    n_val = [min(max(_round_half_up(test_fraction * idx.size), 1), idx.size - 1) for idx in classes]
    rng = np.random.default_rng(seed)
    splits = []
    for _ in range(n_splits):
        val = np.concatenate([rng.permutation(idx)[:m] for idx, m in zip(classes, n_val)])
        mask = np.zeros(y.size, dtype=bool)
        mask[val] = True
        splits.append((np.flatnonzero(~mask), np.flatnonzero(mask)))
    return InnerSplitPlan(n_splits, float(test_fraction), tuple(splits))


def shuffle_splits(n: int, n_splits: int = 10, test_fraction: float = 0.2,
                   seed: int = 0) -> InnerSplitPlan:
    """Unstratified shuffle splits, for multi-label targets."""
    if n < 2:
        raise ValueError("need at least 2 samples")
    m = min(max(_round_half_up(test_fraction * n), 1), n - 1)
    rng = np.random.default_rng(seed)
    splits = []
    for _ in range(n_splits):
        perm = rng.permutation(n)
        splits.append((np.sort(perm[m:]), np.sort(perm[:m])))
    return InnerSplitPlan(n_splits, float(test_fraction), tuple(splits))


# ----------------------------------------------------------------------------
# regularization search


def balanced_accuracy(pred, truth) -> float:
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    tpr = pred[truth].mean() if truth.any() else 0.0
    tnr = (~pred[~truth]).mean() if (~truth).any() else 0.0
    return 0.5 * (float(tpr) + float(tnr))


@dataclass(eq=False)
class TuneResult:
    lam: float
    grid: tuple[float, ...]
    scores: np.ndarray                 # (n_splits, len(grid)); empty without search
    n_fits: int
    fits: list = field(default_factory=list)  # (split, lam, n_iter, grad_norm)
    solutions: dict = field(default_factory=dict)  # lam -> (d+1, n_splits)
    factors: dict = field(default_factory=dict)    # lam -> preconditioner factor


def _weights(y, weights):
    if weights is None:
        return np.ones(y.size)
    if isinstance(weights, str):
        if weights != "balanced":
            raise ValueError(f"unknown weighting {weights!r}")
        return balance_weights(y)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != y.shape:
        raise ValueError("weights must align with y")
    return w


def tune_lambda(X, y, weights, grid: Sequence[float], inner_plan: InnerSplitPlan) -> TuneResult:
    """Pick the l2 strength maximizing mean validation balanced accuracy.

    Every (split, lambda) pair is fitted. The grid is deduplicated and
    searched from the largest value down, warm-starting each lambda from the
    previous solution; ties go to the smaller lambda. A single-value grid is
    returned without fitting.

    Parameters
    ----------
    X : ndarray (n, d)
    y : bool array (n,)
    weights : None, ``"balanced"`` (recomputed on each split's training part)
        or an array of per-sample weights
    grid : candidate lambdas, all positive
    inner_plan : splits of positions into ``X``
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).astype(bool)
    values = sorted({float(g) for g in grid})
    if not values:
        raise ValueError("lambda grid is empty")
    if values[0] <= 0:
        raise ValueError("lambda grid values must be positive")
    if len(values) == 1:
        return TuneResult(values[0], tuple(values), np.empty((0, 1)), 0)

    n = y.size
    k = inner_plan.n_splits
    W = np.zeros((n, k))
    for s, (tr, _) in enumerate(inner_plan.splits):
        if isinstance(weights, str) or weights is None:
            W[tr, s] = _weights(y[tr], weights)
        else:
            W[tr, s] = _weights(y, weights)[tr]
    Ys = np.repeat(np.where(y, 1.0, -1.0)[:, None], k, axis=1)

    scores = np.full((k, len(values)), -np.inf)
    result = TuneResult(values[0], tuple(values), scores, 0)
    theta = None
    Xa = np.hstack([X, np.ones((n, 1))])
    for j in range(len(values) - 1, -1, -1):
        lam = values[j]
        res = solve_logistic_batch(X, Ys, W, lam, init=theta)
        theta = res.theta
        result.solutions[lam] = theta.copy()
        result.factors[lam] = res.factor
        tol = 1e-6 * np.maximum(1, (W > 0).sum(axis=0))
        dec = Xa @ theta
        for s, (_, va) in enumerate(inner_plan.splits):
            ok = np.isfinite(res.grad_norm[s]) and res.grad_norm[s] <= tol[s]
            result.fits.append((s, lam, int(res.n_iter[s]), float(res.grad_norm[s])))
            result.n_fits += 1
            if ok:
                scores[s, j] = balanced_accuracy(dec[va, s] >= 0.0, y[va])
            else:
                logger.warning("inner fit (split %d, lambda %g) did not converge", s, lam)
    mean = np.where(np.isfinite(scores).all(axis=0), scores.mean(axis=0), -np.inf)
    if not np.isfinite(mean).any():
        raise ArithmeticError("every inner fit failed to converge")
    result.lam = values[int(np.argmax(mean))]
    return result


# ----------------------------------------------------------------------------
# metrics and chance levels


@dataclass(frozen=True)
class TermMetrics:
    term: str
    precision: float
    recall: float
    support: int
    precision_undefined: bool = False
    tp: int = 0
    fp: int = 0
    fn: int = 0
    chance_precision: float = float("nan")
    chance_recall: float = float("nan")

    @property
    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / denom if denom else 0.0


def precision_recall(predicted, truth, term: str = "") -> TermMetrics:
    """Precision TP/(TP+FP) and recall TP/(TP+FN).

    No positive prediction gives precision 0 with ``precision_undefined``
    set; no positive truth gives recall 0.
    """
    p = np.asarray(predicted, dtype=bool)
    t = np.asarray(truth, dtype=bool)
    if p.shape != t.shape:
        raise ValueError("predictions and truth are not aligned")
    tp = int((p & t).sum())
    fp = int((p & ~t).sum())
    fn = int((~p & t).sum())
    undefined = tp + fp == 0
    precision = 0.0 if undefined else tp / (tp + fp)
    recall = tp / (tp + fn) if tp + fn else 0.0
    return TermMetrics(term, precision, recall, int(t.sum()), undefined, tp, fp, fn)


def permute_within_groups(y, groups, rng) -> np.ndarray:
    """Shuffle ``y`` independently inside each group (group prevalences kept)."""
    y = np.asarray(y)
    out = y.copy()
    groups = np.asarray(groups)
    for g in dict.fromkeys(groups.tolist()):
        idx = np.flatnonzero(groups == g)
        out[idx] = y[rng.permutation(idx)]
    return out


def permutation_labels(y, groups, n_permutations: int, seed: int) -> np.ndarray:
    """``(n, n_permutations)`` matrix of within-group label permutations."""
    rng = np.random.default_rng(seed)
    return np.stack([permute_within_groups(y, groups, rng) for _ in range(n_permutations)], axis=1)


@dataclass(frozen=True)
class ChanceEstimate:
    mean: float
    sd: float
    values: np.ndarray


def chance_from_predictions(pred: np.ndarray, truth) -> dict[str, ChanceEstimate]:
    """Precision and recall of each permutation's predictions (columns of ``pred``)."""
    pred = np.asarray(pred, dtype=bool)
    t = np.asarray(truth, dtype=bool)
    tp = (pred & t[:, None]).sum(axis=0)
    npred = pred.sum(axis=0)
    precision = np.where(npred > 0, tp / np.maximum(npred, 1), 0.0)
    recall = tp / t.sum() if t.any() else np.zeros(pred.shape[1])
    out = {}
    for name, v in (("precision", precision), ("recall", recall)):
        sd = float(v.std(ddof=1)) if v.size > 1 else 0.0
        out[name] = ChanceEstimate(float(v.mean()), sd, v)
    return out


def chance_levels(fit_predict: Callable[[np.ndarray], np.ndarray], y_train, groups_train,
                  y_test, metric: str = "recall", n_permutations: int = 100,
                  seed: int = 0) -> ChanceEstimate:
    """Metric of a pipeline trained on within-group permutations of its labels.

    ``fit_predict`` maps an ``(n_train, P)`` matrix of permuted training labels
    to ``(n_test, P)`` test predictions.
    """
    if n_permutations < 100:
        raise ValueError(f"n_permutations must be >= 100, got {n_permutations}")
    if metric not in ("precision", "recall"):
        raise ValueError(f"unknown metric {metric!r}")
    perms = permutation_labels(y_train, groups_train, n_permutations, seed)
    pred = np.asarray(fit_predict(perms))
    return chance_from_predictions(pred, y_test)[metric]


# ----------------------------------------------------------------------------
# corpus diagnostics

DISTANCE_GROUPS = ("same-study", "same-labels", "same-contrast")


@dataclass(eq=False)
class DistanceDiagnostics:
    distances: dict[str, np.ndarray]
    histograms: dict[str, tuple[np.ndarray, np.ndarray]]
    design_columns: tuple[str, ...]
    design_correlation: np.ndarray

    def median(self, group: str) -> float:
        d = self.distances[group]
        return float(np.median(d)) if d.size else float("nan")

    def correlated_pairs(self, threshold: float = 0.8) -> list[tuple[str, str, float]]:
        """Design-column pairs with ``|r| >= threshold``, strongest first."""
        c = self.design_correlation
        cols = self.design_columns
        out = [(cols[i], cols[j], float(c[i, j]))
               for i in range(len(cols)) for j in range(i + 1, len(cols))
               if abs(c[i, j]) >= threshold]
        return sorted(out, key=lambda r: (-abs(r[2]), r[0], r[1]))


def pairwise_distances(data: np.ndarray) -> np.ndarray:
    """Euclidean distance matrix between rows (computed on centred rows)."""
    X = np.asarray(data, dtype=np.float64)
    X = X - X.mean(axis=0)
    sq = np.einsum("ij,ij->i", X, X)
    D = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.maximum(D, 0.0, out=D)
    np.fill_diagonal(D, 0.0)
    return np.sqrt(D)


def design_correlation(corpus: Corpus) -> tuple[tuple[str, ...], np.ndarray]:
    """Pearson correlation between term columns; constant columns correlate 0 with others."""
    dm = build_design_matrix(corpus, intercept=False)
    Y = dm.Y.astype(np.float64)
    Y = Y - Y.mean(axis=0)
    norm = np.sqrt(np.einsum("ij,ij->j", Y, Y))
    safe = np.where(norm > 0, norm, 1.0)
    C = (Y.T @ Y) / np.outer(safe, safe)
    C[norm == 0, :] = 0.0
    C[:, norm == 0] = 0.0
    np.fill_diagonal(C, 1.0)
    return dm.columns, np.clip(C, -1.0, 1.0)


def distance_diagnostics(corpus: Corpus, bins: int = 50) -> DistanceDiagnostics:
    """Pairwise map distances grouped by shared study, term set and condition.

    ``same-contrast`` pairs share study and condition, so they are a subset of
    ``same-study`` pairs. ``same-labels`` pairs have identical term sets but
    come from different studies, so a study confound shows up as a gap
    between the first two groups.
    """
    D = pairwise_distances(corpus.data)
    iu, ju = np.triu_indices(corpus.n_maps, k=1)
    d = D[iu, ju]
    del D
    studies = corpus.map_studies
    _, cond = np.unique([f"{r.study}\x00{r.condition}" for r in corpus.records], return_inverse=True)
    _, termset = np.unique(corpus.labels, axis=0, return_inverse=True)
    termset = termset.ravel()
    masks = {
        "same-study": studies[iu] == studies[ju],
        "same-labels": (termset[iu] == termset[ju]) & (studies[iu] != studies[ju]),
        "same-contrast": cond[iu] == cond[ju],
    }
    distances = {name: d[m] for name, m in masks.items()}
    distances["all"] = d
    lo, hi = (float(d.min()), float(d.max())) if d.size else (0.0, 1.0)
    edges = np.linspace(lo, hi if hi > lo else lo + 1.0, bins + 1)
    histograms = {name: (np.histogram(v, bins=edges)[0], edges) for name, v in distances.items()}
    cols, C = design_correlation(corpus)
    return DistanceDiagnostics(distances, histograms, cols, C)
