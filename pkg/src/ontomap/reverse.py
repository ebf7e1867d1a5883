"""Nested cross-validated reverse inference and reverse-inference atlases.

For every outer fold the training maps alone drive the Ward parcellation,
the per-term ANOVA selection, the inner search of the l2 strength and the
final fit; the held-out maps are only ever predicted. Chance levels come
from refitting each fold's classifier on within-study permutations of the
training labels.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from joblib import Parallel, delayed
from threadpoolctl import threadpool_limits

from . import bmap
from .classifiers import (KNN_GRID, METHODS, LogisticModel, TermModel, balance_weights,
                          eligible_terms, fit_naive_bayes, ovr_labels, predict_biased,
                          predict_nb, save_models, solve_logistic_batch, standardize)
from .corpus import Corpus
from .evaluation import (DEFAULT_LAMBDA_GRID, SCHEMES, StratificationError, balanced_accuracy,
                         chance_from_predictions, inner_splits, make_folds, permutation_labels,
                         precision_recall, shuffle_splits, tune_lambda)
from .parcellation import (Parcellation, anova_select, backproject, reduce, save_parcellation,
                           ward_parcellate)
from .synth import derive_seed
from .volume import OUTLINE_ORDERS, BrainMask, build_adjacency, outline_mask, smooth_data

logger = logging.getLogger(__name__)

PRIOR_MODES = ("normalized", "literal")
NEGATIVE_MODES = ("all", "category")


@dataclass(frozen=True)
class ReverseConfig:
    method: str = "logistic-weighted"
    cv: str = "leave-one-study-out"
    lambda_grid: tuple = DEFAULT_LAMBDA_GRID
    parcel_ratio: float = 0.31
    select_fraction: float = 0.3
    n_splits: int = 10
    test_fraction: float = 0.2
    n_permutations: int = 100
    knn_grid: tuple = KNN_GRID
    negatives: str = "all"
    prior_mode: str = "normalized"
    sigma_map: float = 2.0
    atlas_fraction: float = 0.05
    outline_order: str = "smooth-then-threshold"
    atlas: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lambda_grid", tuple(float(x) for x in self.lambda_grid))
        object.__setattr__(self, "knn_grid", tuple(int(x) for x in self.knn_grid))
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.cv not in SCHEMES:
            raise ValueError(f"unknown cross-validation scheme {self.cv!r}; expected one of {SCHEMES}")
        if not self.lambda_grid or min(self.lambda_grid) <= 0:
            raise ValueError("lambda grid must be non-empty and positive")
        for name in ("parcel_ratio", "select_fraction", "atlas_fraction"):
            v = getattr(self, name)
            if not (0 < v <= 1):
                raise ValueError(f"{name} must be in (0, 1], got {v}")
        if not (0 < self.test_fraction < 1):
            raise ValueError(f"test_fraction must be in (0, 1), got {self.test_fraction}")
        if self.n_permutations != 0 and self.n_permutations < 100:
            raise ValueError("n_permutations must be 0 (analytic chance only) or >= 100")
        if self.n_splits < 1:
            raise ValueError("n_splits must be >= 1")
        if not self.knn_grid or min(self.knn_grid) < 1:
            raise ValueError("knn grid must hold positive integers")
        if self.negatives not in NEGATIVE_MODES:
            raise ValueError(f"unknown negatives mode {self.negatives!r}")
        if self.prior_mode not in PRIOR_MODES:
            raise ValueError(f"unknown prior mode {self.prior_mode!r}")
        if self.outline_order not in OUTLINE_ORDERS:
            raise ValueError(f"unknown outline order {self.outline_order!r}")
        if self.sigma_map < 0:
            raise ValueError("sigma_map must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def n_parcels_for(p: int, ratio: float) -> int:
    return max(1, min(p, int(math.floor(ratio * p + 0.5))))


def _check_disjoint(stage: str, train, test) -> None:
    if np.intersect1d(train, test).size:
        raise RuntimeError(f"fold discipline violated at {stage}: test maps in the training set")


# ----------------------------------------------------------------------------
# per-fold work


@dataclass(eq=False)
class TermFold:
    """One term's outcome in one outer fold."""

    term: str
    P: np.ndarray                 # (n_test,)
    P_biased: np.ndarray
    predicted: np.ndarray
    support_train: int
    lam: float | None = None
    perm_predicted: np.ndarray | None = None   # (n_test, n_permutations)


@dataclass(eq=False)
class FoldResult:
    fold: int
    unit: str
    train: np.ndarray
    test: np.ndarray
    terms: dict[str, TermFold] = field(default_factory=dict)
    tasks: list = field(default_factory=list)
    n_parcels: int = 0
    knn_k: int | None = None


def _task(tasks, kind, fold, term, split="", param="", n_iter="", grad_norm=""):
    tasks.append({"kind": kind, "fold": fold, "term": term, "split": split, "param": param,
                  "n_iter": n_iter, "grad_norm": grad_norm})


def _perm_weights(P: np.ndarray, weighted: bool) -> np.ndarray:
    if not weighted:
        return np.ones(P.shape)
    n = P.shape[0]
    n_pos = P.sum(axis=0, keepdims=True)
    return np.where(P, n / (2.0 * n_pos), n / (2.0 * (n - n_pos)))


def _logistic_term(Z, y, Zte, groups, term, fr: FoldResult, cfg: ReverseConfig):
    weighted = cfg.method == "logistic-weighted"
    plan = inner_splits(y, cfg.n_splits, cfg.test_fraction,
                        derive_seed(cfg.seed, "inner", term, fr.unit), term)
    tune = tune_lambda(Z, y, "balanced" if weighted else None, cfg.lambda_grid, plan)
    for s, lam, it, g in tune.fits:
        _task(fr.tasks, "inner", fr.fold, term, s, lam, it, g)
    lam = tune.lam
    w = balance_weights(y) if weighted else np.ones(y.size)
    ys = np.where(y, 1.0, -1.0)
    init = tune.solutions[lam].mean(axis=1) if lam in tune.solutions else None
    res = solve_logistic_batch(Z, ys, w, lam, init=init, factor=tune.factors.get(lam))
    tol = 1e-6 * max(1, y.size)
    if not res.grad_norm[0] <= tol:
        raise ArithmeticError(f"final fit for {term!r} in fold {fr.unit!r} did not converge")
    _task(fr.tasks, "final", fr.fold, term, "", lam, int(res.n_iter[0]), float(res.grad_norm[0]))
    theta = res.theta[:, 0]
    model = LogisticModel(theta[:-1], float(theta[-1]), lam, float(y.mean()), weighted)
    Pb, present = predict_biased(model, Zte, cfg.prior_mode)
    out = TermFold(term, model.predict_proba(Zte), Pb, present, int(y.sum()), lam)

    if cfg.n_permutations:
        perms = permutation_labels(y, groups, cfg.n_permutations,
                                   derive_seed(cfg.seed, "perm", term, fr.unit))
        W = _perm_weights(perms, weighted)
        pres = solve_logistic_batch(Z, np.where(perms, 1.0, -1.0), W, lam)
        if not np.all(pres.grad_norm <= tol):
            raise ArithmeticError(f"permutation fits for {term!r} in fold {fr.unit!r} did not converge")
        for j in range(cfg.n_permutations):
            _task(fr.tasks, "permutation", fr.fold, term, j, lam, int(pres.n_iter[j]),
                  float(pres.grad_norm[j]))
        out.perm_predicted = (Zte @ pres.theta[:-1] + pres.theta[-1]) >= 0.0
    return out


def _nb_batch_predict(Z, P, Zte, floor_ratio=1e-9):
    """Naive Bayes decisions for every label column of ``P`` (vectorized fit)."""
    floor = max(floor_ratio * float(Z.var(axis=0).mean()), np.finfo(float).tiny)
    Pf = P.astype(np.float64)
    n1 = Pf.sum(axis=0)
    n0 = Z.shape[0] - n1
    s1, s0 = Pf.T @ Z, (1.0 - Pf).T @ Z
    q1, q0 = Pf.T @ (Z * Z), (1.0 - Pf).T @ (Z * Z)
    m1, m0 = s1 / n1[:, None], s0 / n0[:, None]
    v1 = np.maximum(q1 / n1[:, None] - m1 ** 2, floor)
    v0 = np.maximum(q0 / n0[:, None] - m0 ** 2, floor)

    def ll(m, v, prior):
        quad = (Zte ** 2) @ (1.0 / v).T - 2.0 * Zte @ (m / v).T + (m ** 2 / v).sum(axis=1)
        return np.log(prior) - 0.5 * np.log(2 * np.pi * v).sum(axis=1) - 0.5 * quad

    n = Z.shape[0]
    return ll(m1, v1, n1 / n) - ll(m0, v0, n0 / n) >= 0.0


def _nb_term(Z, y, Zte, groups, term, fr: FoldResult, cfg: ReverseConfig):
    model = fit_naive_bayes(Z, y)
    _task(fr.tasks, "final", fr.fold, term)
    P = predict_nb(model, Zte)
    out = TermFold(term, P, P, P >= 0.5, int(y.sum()))
    if cfg.n_permutations:
        perms = permutation_labels(y, groups, cfg.n_permutations,
                                   derive_seed(cfg.seed, "perm", term, fr.unit))
        for j in range(cfg.n_permutations):
            _task(fr.tasks, "permutation", fr.fold, term, j)
        out.perm_predicted = _nb_batch_predict(Z, perms, Zte)
    return out


def _run_model_fold(corpus: Corpus, adjacency, fold: int, unit: str, train, test,
                    cfg: ReverseConfig) -> FoldResult:
    _check_disjoint("fold split", train, test)
    fr = FoldResult(fold, unit, train, test)
    X_train = corpus.data[train]
    parc = ward_parcellate(X_train, adjacency, n_parcels_for(corpus.mask.p, cfg.parcel_ratio))
    fr.n_parcels = parc.n_parcels
    F_train = reduce(X_train, parc)
    del X_train
    F_test = reduce(corpus.data[test], parc)
    studies = corpus.map_studies[train]
    for category in corpus.taxonomy.categories:
        for term in eligible_terms(corpus, train, category):
            y, rows = ovr_labels(corpus, train, term, cfg.negatives)
            y = y[rows]
            try:
                if y.all() or int(y.sum()) < 2 or int((~y).sum()) < 2:
                    raise StratificationError(f"term {term!r}: too few maps in one class", term)
                sel = anova_select(F_train[rows], y, cfg.select_fraction).selected
                Z, mu, sd = standardize(F_train[rows][:, sel])
                Zte = (F_test[:, sel] - mu) / sd
                fn = _nb_term if cfg.method == "naive-bayes" else _logistic_term
                fr.terms[term] = fn(Z, y, Zte, studies[rows], term, fr, cfg)
            except StratificationError as exc:
                logger.warning("fold %s: %s; term skipped", unit, exc)
    logger.info("fold %s done: %d parcels, %d terms", unit, fr.n_parcels, len(fr.terms))
    return fr


def _knn_votes(D_q_train: np.ndarray, labels: np.ndarray, k: int):
    """Vote counts (n_query, n_terms) among the k nearest training maps."""
    nn = np.argsort(D_q_train, axis=1, kind="stable")[:, :k]
    return labels[nn].sum(axis=1), nn


def _run_knn_fold(corpus: Corpus, sq_dist: np.ndarray, fold: int, unit: str, train, test,
                  cfg: ReverseConfig) -> FoldResult:
    _check_disjoint("fold split", train, test)
    fr = FoldResult(fold, unit, train, test)
    labels = corpus.labels.astype(np.int64)
    terms = [t for c in corpus.taxonomy.categories for t in eligible_terms(corpus, train, c)]
    cols = [corpus.taxonomy.terms.index(t) for t in terms]
    grid = sorted(set(cfg.knn_grid))
    plan = shuffle_splits(train.size, cfg.n_splits, cfg.test_fraction,
                          derive_seed(cfg.seed, "knn", fr.unit))
    scores = np.zeros((plan.n_splits, len(grid)))
    for s, (tr_pos, va_pos) in enumerate(plan.splits):
        tr, va = train[tr_pos], train[va_pos]
        nn = np.argsort(sq_dist[np.ix_(va, tr)], axis=1, kind="stable")
        for g, k in enumerate(grid):
            if k > tr.size:
                scores[s, g] = -np.inf
                continue
            votes = labels[tr][nn[:, :k]][:, :, cols].sum(axis=1)
            pred = 2 * votes > k
            truth = labels[va][:, cols].astype(bool)
            bas = [balanced_accuracy(pred[:, j], truth[:, j]) for j in range(len(cols))
                   if truth[:, j].any() and not truth[:, j].all()]
            scores[s, g] = float(np.mean(bas)) if bas else 0.0
            _task(fr.tasks, "inner", fold, "*", s, k)
    k = grid[int(np.argmax(scores.mean(axis=0)))]
    fr.knn_k = k
    _task(fr.tasks, "final", fold, "*", "", k)
    votes, nn = _knn_votes(sq_dist[np.ix_(test, train)], labels[train], k)
    studies = corpus.map_studies[train]
    for term, c in zip(terms, cols):
        y = labels[train, c].astype(bool)
        frac = votes[:, c] / k
        out = TermFold(term, frac, frac, 2 * votes[:, c] > k, int(y.sum()))
        if cfg.n_permutations:
            perms = permutation_labels(y, studies, cfg.n_permutations,
                                       derive_seed(cfg.seed, "perm", term, fr.unit))
            pv = perms[nn].sum(axis=1)
            out.perm_predicted = 2 * pv > k
        fr.terms[term] = out
    return fr


def _fold_worker(kind, corpus, shared, fold, unit, train, test, cfg):
    with threadpool_limits(limits=1):
        if kind == "knn":
            return _run_knn_fold(corpus, shared, fold, unit, train, test, cfg)
        return _run_model_fold(corpus, shared, fold, unit, train, test, cfg)


def knn_sq_distances(data: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between all maps (centred)."""
    X = np.asarray(data, dtype=np.float64)
    X = X - X.mean(axis=0)
    sq = np.einsum("ij,ij->i", X, X)
    D = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.maximum(D, 0.0, out=D)
    np.fill_diagonal(D, 0.0)
    return D


# ----------------------------------------------------------------------------
# whole-corpus run


@dataclass(eq=False)
class TermSummary:
    term: str
    category: str
    support_train: int
    support_test: int
    precision: float
    recall: float
    precision_undefined: bool
    precision_chance: float
    recall_chance: float
    lambda_selected: float | None
    n_permutations: int
    precision_chance_sd: float
    recall_chance_sd: float
    precision_chance_analytic: float
    recall_chance_analytic: float
    f1: float = 0.0


@dataclass(frozen=True)
class AtlasEntry:
    term: str
    lam: float
    weights: np.ndarray     # back-projected raw-unit weights, (p,)
    smoothed: np.ndarray
    outline: np.ndarray     # bool (p,)
    model: TermModel


@dataclass(eq=False)
class ReverseResult:
    config: ReverseConfig
    corpus: Corpus
    folds: list[FoldResult]
    summaries: list[TermSummary]
    atlas: dict = field(default_factory=dict)
    atlas_parcellation: Parcellation | None = None
    atlas_tasks: list = field(default_factory=list)

    @property
    def tasks(self) -> list[dict]:
        out = []
        for fr in self.folds:
            out.extend(fr.tasks)
        out.extend(self.atlas_tasks)
        return out

    def count_fits(self, term: str, kinds: Sequence[str] = ("inner", "final")) -> int:
        return sum(1 for t in self.tasks if t["term"] == term and t["kind"] in kinds)

    def summary(self, term: str) -> TermSummary:
        for s in self.summaries:
            if s.term == term:
                return s
        raise KeyError(term)


def _mode_smallest(values: Sequence[float]) -> float | None:
    if not values:
        return None
    counts = Counter(values)
    best = max(counts.values())
    return min(v for v, c in counts.items() if c == best)


def _summarize(corpus: Corpus, folds: list[FoldResult], cfg: ReverseConfig) -> list[TermSummary]:
    out = []
    labels = corpus.labels
    for j, term in enumerate(corpus.taxonomy.terms):
        if not any(term in fr.terms for fr in folds):
            continue
        preds, truth, perm, lams, train_support = [], [], [], [], []
        for fr in folds:
            t = labels[fr.test, j]
            truth.append(t)
            train_support.append(int(labels[fr.train, j].sum()))
            tf = fr.terms.get(term)
            if tf is None:
                preds.append(np.zeros(t.size, dtype=bool))
                if cfg.n_permutations:
                    perm.append(np.zeros((t.size, cfg.n_permutations), dtype=bool))
                continue
            preds.append(tf.predicted)
            if tf.lam is not None:
                lams.append(tf.lam)
            if cfg.n_permutations:
                perm.append(tf.perm_predicted)
        pred = np.concatenate(preds)
        tr = np.concatenate(truth)
        m = precision_recall(pred, tr, term)
        analytic_p = float(tr.mean())
        analytic_r = float(pred.mean())
        if cfg.n_permutations:
            ch = chance_from_predictions(np.concatenate(perm), tr)
            pc, rc = ch["precision"], ch["recall"]
            chance = (pc.mean, rc.mean, pc.sd, rc.sd)
        else:
            chance = (analytic_p, analytic_r, float("nan"), float("nan"))
        out.append(TermSummary(
            term=term, category=corpus.taxonomy.category_of(term),
            support_train=int(math.floor(np.mean(train_support) + 0.5)),
            support_test=int(tr.sum()), precision=m.precision, recall=m.recall,
            precision_undefined=m.precision_undefined,
            precision_chance=chance[0], recall_chance=chance[1],
            lambda_selected=_mode_smallest(lams), n_permutations=cfg.n_permutations,
            precision_chance_sd=chance[2], recall_chance_sd=chance[3],
            precision_chance_analytic=analytic_p, recall_chance_analytic=analytic_r, f1=m.f1))
    return out


def fit_atlas(corpus: Corpus, summaries: list[TermSummary], cfg: ReverseConfig,
              adjacency=None):
    """Refit each term on every map at its modal fold lambda and outline the weight map.

    Returns ``(entries, parcellation, tasks)``.
    """
    if cfg.method not in ("logistic", "logistic-weighted"):
        return {}, None, []
    adjacency = adjacency if adjacency is not None else build_adjacency(corpus.mask)
    parc = ward_parcellate(corpus.data, adjacency, n_parcels_for(corpus.mask.p, cfg.parcel_ratio))
    F = reduce(corpus.data, parc)
    weighted = cfg.method == "logistic-weighted"
    entries, tasks = {}, []
    everything = np.arange(corpus.n_maps)
    for s in summaries:
        if s.lambda_selected is None:
            continue
        y, rows = ovr_labels(corpus, everything, s.term, cfg.negatives)
        y = y[rows]
        sel = anova_select(F[rows], y, cfg.select_fraction).selected
        Z, mu, sd = standardize(F[rows][:, sel])
        w = balance_weights(y) if weighted else np.ones(y.size)
        res = solve_logistic_batch(Z, np.where(y, 1.0, -1.0), w, s.lambda_selected)
        if not res.grad_norm[0] <= 1e-6 * max(1, y.size):
            raise ArithmeticError(f"atlas fit for {s.term!r} did not converge")
        _task(tasks, "atlas", "", s.term, "", s.lambda_selected, int(res.n_iter[0]),
              float(res.grad_norm[0]))
        beta = res.theta[:-1, 0]
        raw_w = beta / sd
        raw_b = float(res.theta[-1, 0] - beta @ (mu / sd))
        model = LogisticModel(raw_w, raw_b, s.lambda_selected, float(y.mean()), weighted)
        tm = TermModel(s.term, s.category, cfg.method, sel, model)
        vox = backproject(raw_w, sel, parc)
        smoothed = smooth_data(corpus.mask, vox, cfg.sigma_map)
        outline = outline_mask(corpus.mask, vox, cfg.sigma_map, cfg.atlas_fraction, cfg.outline_order)
        entries[s.term] = AtlasEntry(s.term, s.lambda_selected, vox, smoothed, outline, tm)
    return entries, parc, tasks


def run_reverse(corpus: Corpus, config: ReverseConfig | None = None, jobs: int = 1) -> ReverseResult:
    """Nested cross-validated reverse inference over every eligible term."""
    cfg = config or ReverseConfig()
    if jobs < 1:
        raise ValueError(f"jobs must be >= 1, got {jobs}")
    plan = make_folds(corpus, cfg.cv)
    logger.info("%s with %s: %d folds, %d maps", cfg.method, cfg.cv, len(plan), corpus.n_maps)
    if cfg.method == "knn":
        kind, shared = "knn", knn_sq_distances(corpus.data)
    else:
        kind, shared = "model", build_adjacency(corpus.mask)
    args = [(kind, corpus, shared, i, u, tr, te, cfg)
            for i, (u, (tr, te)) in enumerate(zip(plan.units, plan.folds))]
    if jobs == 1:
        folds = [_fold_worker(*a) for a in args]
    else:
        folds = Parallel(n_jobs=jobs, backend="loky")(delayed(_fold_worker)(*a) for a in args)
    summaries = _summarize(corpus, folds, cfg)
    result = ReverseResult(cfg, corpus, folds, summaries)
    if cfg.atlas and kind == "model":
        with threadpool_limits(limits=1):
            result.atlas, result.atlas_parcellation, result.atlas_tasks = fit_atlas(
                corpus, summaries, cfg, shared)
    return result


# ----------------------------------------------------------------------------
# persistence

METRICS_COLUMNS = ("method", "cv_scheme", "term", "category", "support_train", "support_test",
                   "precision", "recall", "precision_chance", "recall_chance", "lambda_selected")
CHANCE_COLUMNS = ("method", "cv_scheme", "term", "n_permutations", "precision_chance",
                  "precision_chance_sd", "recall_chance", "recall_chance_sd",
                  "precision_chance_analytic", "recall_chance_analytic", "precision_undefined")
PREDICTION_COLUMNS = ("map_id", "term", "P", "P_biased", "predicted", "truth")
TASK_COLUMNS = ("task_id", "kind", "fold", "term", "split", "param", "n_iter", "grad_norm")


def fmt(x) -> str:
    """Deterministic text for CSV cells (shortest round-trip repr for floats)."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path, columns, rows) -> None:
    """Write dict rows (keyed by column) or sequence rows with a header line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            values = [r[c] for c in columns] if isinstance(r, dict) else r
            w.writerow([fmt(v) for v in values])


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def slug(term: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "-", term).strip("-").lower()


def metrics_rows(result: ReverseResult) -> list[dict]:
    cfg = result.config
    return [{"method": cfg.method, "cv_scheme": cfg.cv, "term": s.term, "category": s.category,
             "support_train": s.support_train, "support_test": s.support_test,
             "precision": s.precision, "recall": s.recall,
             "precision_chance": s.precision_chance, "recall_chance": s.recall_chance,
             "lambda_selected": s.lambda_selected} for s in result.summaries]


def write_reverse_outputs(result: ReverseResult, out_dir, extra: dict | None = None) -> Path:
    """Persist metrics, chance levels, per-fold predictions, the task ledger and the atlas.

    ``extra`` entries (corpus path, command-line arguments) are added to ``run.json``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = result.config
    corpus = result.corpus
    write_csv(out / "metrics.csv", METRICS_COLUMNS, metrics_rows(result))
    write_csv(out / "chance.csv", CHANCE_COLUMNS, [
        {"method": cfg.method, "cv_scheme": cfg.cv, "term": s.term,
         "n_permutations": s.n_permutations, "precision_chance": s.precision_chance,
         "precision_chance_sd": s.precision_chance_sd, "recall_chance": s.recall_chance,
         "recall_chance_sd": s.recall_chance_sd,
         "precision_chance_analytic": s.precision_chance_analytic,
         "recall_chance_analytic": s.recall_chance_analytic,
         "precision_undefined": s.precision_undefined} for s in result.summaries])
    modelled = [s.term for s in result.summaries]
    fold_rows = []
    for fr in result.folds:
        rows = []
        for i, m in enumerate(fr.test):
            rec_id = corpus.records[m].id
            for term in modelled:
                truth = bool(corpus.term_labels(term)[m])
                tf = fr.terms.get(term)
                if tf is None:
                    rows.append((rec_id, term, "", "", False, truth))
                else:
                    rows.append((rec_id, term, float(tf.P[i]), float(tf.P_biased[i]),
                                 bool(tf.predicted[i]), truth))
        name = f"fold_{fr.fold:02d}.csv"
        write_csv(out / "predictions" / name, PREDICTION_COLUMNS, rows)
        fold_rows.append({"fold": fr.fold, "unit": fr.unit, "n_train": fr.train.size,
                          "n_test": fr.test.size, "n_parcels": fr.n_parcels, "knn_k": fr.knn_k,
                          "file": f"predictions/{name}"})
    write_csv(out / "folds.csv", ("fold", "unit", "n_train", "n_test", "n_parcels", "knn_k", "file"),
              fold_rows)
    tasks = [dict(t, task_id=i) for i, t in enumerate(result.tasks)]
    write_csv(out / "tasks.csv", TASK_COLUMNS, tasks)
    if result.atlas:
        adir = out / "atlas"
        adir.mkdir(exist_ok=True)
        bmap.write_mask(adir / "mask.bmap", corpus.mask)
        save_parcellation(adir / "parcellation.parc", result.atlas_parcellation)
        save_models(adir / "models.lmod", [e.model for e in result.atlas.values()])
        for term, e in result.atlas.items():
            bmap.write_masked_vector(adir / f"{slug(term)}_weights.bmap", corpus.mask, e.weights, "mask.bmap")
            bmap.write_masked_vector(adir / f"{slug(term)}_smoothed.bmap", corpus.mask, e.smoothed, "mask.bmap")
            bmap.write_mask(adir / f"{slug(term)}_outline.bmap",
                            BrainMask(corpus.mask.grid, corpus.mask.unmask(e.outline) > 0))
    run = {"command": "reverse", "config": cfg.to_dict(), "terms": modelled, "n_folds": len(result.folds)}
    run.update(extra or {})
    (out / "run.json").write_text(json.dumps(run, indent=1, sort_keys=True) + "\n")
    return out

