"""Reverse-inference predictors.

Weighted l2 logistic regression with a prior-shift score, Gaussian naive
Bayes, and a K-nearest-neighbour baseline on raw voxel vectors. Per-term
models are trained one-versus-rest inside each taxonomy category.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import linalg
from scipy.special import expit

from .corpus import Corpus, validate_term_span
from .parcellation import anova_select

logger = logging.getLogger(__name__)

METHODS = ("logistic", "logistic-weighted", "naive-bayes", "knn")
KNN_GRID = (5, 10, 15, 20)
_NEWTON_MAX_DIM = 200


class SingleClassError(ValueError):
    pass


def _check_binary(y) -> np.ndarray:
    y = np.asarray(y).astype(bool)
    if y.ndim != 1 or y.size == 0:
        raise ValueError("labels must be a non-empty 1-D array")
    if y.all() or not y.any():
        raise SingleClassError("labels contain a single class")
    return y


def balance_weights(y) -> np.ndarray:
    """Per-sample weights ``n / (2 * count(class))``; both classes then weigh n/2."""
    y = _check_binary(y)
    n = y.size
    n_pos = int(y.sum())
    return np.where(y, n / (2.0 * n_pos), n / (2.0 * (n - n_pos)))


# ----------------------------------------------------------------------------
# logistic regression


@dataclass(frozen=True)
class LogisticModel:
    weights: np.ndarray
    intercept: float
    lam: float
    rho_term: float
    weighted: bool
    n_iter: int = 0
    grad_norm: float = 0.0

    def decision_function(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.weights + self.intercept

    def predict_proba(self, X) -> np.ndarray:
        return expit(self.decision_function(X))


def logistic_objective(theta: np.ndarray, X: np.ndarray, y_signed: np.ndarray,
                       w: np.ndarray, lam: float) -> tuple[float, np.ndarray]:
    """Weighted logistic loss plus ``lam/2 ||beta||^2`` and its gradient.

    ``theta`` is ``[beta, intercept]``; the intercept is not penalized.
    """
    beta = theta[:-1]
    z = y_signed * (X @ beta + theta[-1])
    loss = float(w @ np.logaddexp(0.0, -z)) + 0.5 * lam * float(beta @ beta)
    s = -y_signed * w * expit(-z)
    grad = np.empty_like(theta)
    grad[:-1] = X.T @ s + lam * beta
    grad[-1] = s.sum()
    return loss, grad


def _newton(theta, X, ys, w, lam, tol, max_iter=100):
    n, d = X.shape
    f, g = logistic_objective(theta, X, ys, w, lam)
    it = 0
    while np.abs(g).max() > tol and it < max_iter:
        it += 1
        z = ys * (X @ theta[:-1] + theta[-1])
        dw = w * expit(z) * expit(-z)
        H = np.empty((d + 1, d + 1))
        Xd = X * dw[:, None]
        H[:d, :d] = X.T @ Xd
        H[:d, :d][np.diag_indices(d)] += lam
        H[:d, d] = H[d, :d] = Xd.sum(axis=0)
        H[d, d] = dw.sum() + 1e-300
        try:
            step = linalg.solve(H, g, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            step = linalg.lstsq(H, g)[0]
        t = 1.0
        slope = float(g @ step)
        while True:
            cand = theta - t * step
            fc, gc = logistic_objective(cand, X, ys, w, lam)
            if fc <= f - 1e-4 * t * slope or t < 1e-10:
                break
            t *= 0.5
        if fc > f and t < 1e-10:
            break
        theta, f, g = cand, fc, gc
    return theta, g, it


def _augment(X: np.ndarray) -> np.ndarray:
    Xa = np.empty((X.shape[0], X.shape[1] + 1))
    Xa[:, :-1] = X
    Xa[:, -1] = 1.0
    return Xa


def _softplus_neg(M: np.ndarray) -> np.ndarray:
    """``log(1 + exp(-M))`` without overflow."""
    return np.log1p(np.exp(-np.abs(M))) + np.maximum(-M, 0.0)


def logistic_hessian(Xa, curvature, pen, single: bool = False) -> np.ndarray:
    """``Xa' diag(curvature) Xa + diag(pen)`` with a tiny relative ridge.

    ``single`` forms the product in single precision, which is enough for a
    preconditioner.
    """
    B = Xa * np.sqrt(curvature)[:, None]
    if single:
        B = B.astype(np.float32)
    H = (B.T @ B).astype(np.float64)
    H[np.diag_indices_from(H)] += pen + 1e-10 * max(float(np.max(np.diag(H))), 1e-300)
    return H


def _curvature(Ys, W, Z) -> np.ndarray:
    M = Ys * Z
    return (W * expit(M) * expit(-M)).mean(axis=1)


def precondition_factor(H: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of an SPD preconditioner."""
    try:
        return linalg.cholesky(H, lower=True, check_finite=False)
    except linalg.LinAlgError:
        jitter = 1e-8 * max(float(np.max(np.abs(np.diag(H)))), 1.0)
        return linalg.cholesky(H + jitter * np.eye(H.shape[0]), lower=True, check_finite=False)


@dataclass
class BatchResult:
    theta: np.ndarray      # (d+1, k), last row is the intercept
    n_iter: np.ndarray     # (k,)
    grad_norm: np.ndarray  # (k,)
    factor: np.ndarray     # preconditioner factor in use at exit


def solve_logistic_batch(X, Ys, W, lam: float, init=None, factor=None, tol=None,
                         memory: int = 10, max_iter: int = 3000, refresh: int = 40,
                         precision: str = "mixed") -> BatchResult:
    """Solve k weighted l2-logistic problems that share the design ``X``.

    Column j minimizes ``sum_i W_ij log(1 + exp(-Ys_ij (x_i beta_j + b_j)))
    + lam/2 ||beta_j||^2``; rows with zero weight are left out of that problem.
    Preconditioned L-BFGS: the initial inverse-Hessian estimate is the inverse
    of a shared Hessian (given as a Cholesky ``factor``, or computed at
    ``init``), refreshed every ``refresh`` iterations for unconverged columns.
    Each column stops once its gradient infinity-norm is at most its
    tolerance, by default ``1e-6 * max(1, n_j)`` with n_j its number of rows.
    Columns on which the line search fails are finished by Newton's method.

    With ``precision="mixed"`` the products with ``X`` run in single
    precision down to a quarter of the tolerance; the gradient is then recomputed in
    double precision and columns that miss the tolerance are solved again in
    double precision.

    Parameters
    ----------
    X : ndarray (n, d)
    Ys : ndarray (n, k) of +1/-1
    W : ndarray (n, k) of non-negative weights
    """
    if precision not in ("mixed", "double"):
        raise ValueError(f"unknown precision {precision!r}")
    X = np.asarray(X, dtype=np.float64)
    Ys = np.asarray(Ys, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if Ys.ndim == 1:
        Ys = Ys[:, None]
    if W.ndim == 1:
        W = W[:, None]
    n, d = X.shape
    k = Ys.shape[1]
    Xa = _augment(X)
    pen = np.full(d + 1, float(lam))
    pen[-1] = 0.0
    if tol is None:
        tol = 1e-6 * np.maximum(1, (W > 0).sum(axis=0))
    tol = np.broadcast_to(np.asarray(tol, dtype=np.float64), (k,)).copy()
    if init is None:
        Theta = np.zeros((d + 1, k))
        wp = np.where(Ys > 0, W, 0.0).sum(axis=0)
        wt = W.sum(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            Theta[-1] = np.where((wp > 0) & (wp < wt), np.log(wp / (wt - wp)), 0.0)
    else:
        Theta = np.array(init, dtype=np.float64).reshape(d + 1, -1)
        if Theta.shape[1] == 1 and k > 1:
            Theta = np.repeat(Theta, k, axis=1)
    mixed = precision == "mixed"
    if mixed:
        Xs = Xa.astype(np.float32)
        target = 0.25 * tol

        def prod(Q):
            return (Xs @ Q.astype(np.float32)).astype(np.float64)

        def tprod(Q):
            return (Xs.T @ Q.astype(np.float32)).astype(np.float64)
    else:
        target = tol

        def prod(Q):
            return Xa @ Q

        def tprod(Q):
            return Xa.T @ Q

    def evaluate(cols, Z):
        """Objective and gradient for columns ``cols`` given their raw scores."""
        M = Ys[:, cols] * Z
        f = np.einsum("ij,ij->j", W[:, cols], _softplus_neg(M))
        f += 0.5 * (pen @ Theta[:, cols] ** 2)
        return f, gradient(cols, M)

    def gradient(cols, M):
        return tprod(-YW[:, cols] * expit(-M)) + pen[:, None] * Theta[:, cols]

    def solve(Q):
        return linalg.cho_solve((factor, True), Q, check_finite=False)

    YW = Ys * W
    all_cols = np.arange(k)
    Zs = prod(Theta)
    if factor is None:
        factor = precondition_factor(logistic_hessian(Xa, _curvature(Ys, W, Zs), pen, mixed))
    f, G = evaluate(all_cols, Zs)
    gnorm = np.abs(G).max(axis=0)
    n_iter = np.zeros(k, dtype=np.int64)
    # per-column L-BFGS memory, (k, memory, d+1); rho = 0 marks an empty slot
    S_mem = np.zeros((k, memory, d + 1))
    Y_mem = np.zeros((k, memory, d + 1))
    rho = np.zeros((k, memory))
    gamma = np.ones(k)
    slot = 0
    stalled = np.zeros(k, dtype=bool)
    active = np.flatnonzero(gnorm > target)
    it = 0
    while active.size and it < max_iter:
        it += 1
        A = active
        if it % refresh == 0:
            Zs[:, A] = prod(Theta[:, A])
            factor = precondition_factor(
                logistic_hessian(Xa, _curvature(Ys[:, A], W[:, A], Zs[:, A]), pen, mixed))
            rho[A] = 0.0
            gamma[A] = 1.0
        SA, YA, rA = S_mem[A], Y_mem[A], rho[A]
        q = G[:, A].T.copy()
        order = [(slot - 1 - j) % memory for j in range(memory)]
        alphas = []
        for j in order:
            a = rA[:, j] * np.einsum("ij,ij->i", SA[:, j], q)
            alphas.append(a)
            q -= a[:, None] * YA[:, j]
        r = solve(q.T).T * gamma[A][:, None]
        for j, a in zip(reversed(order), reversed(alphas)):
            b = rA[:, j] * np.einsum("ij,ij->i", YA[:, j], r)
            r += SA[:, j] * (a - b)[:, None]
        D = -r.T
        GA = G[:, A]
        slope = np.einsum("ij,ij->j", GA, D)
        bad = ~(slope < 0)
        if bad.any():
            # memory produced an ascent direction; restart those columns
            rho[A[bad]] = 0.0
            D[:, bad] = -solve(GA[:, bad])
            slope[bad] = np.einsum("ij,ij->j", GA[:, bad], D[:, bad])

        XD = prod(D)
        ZA, YsA, WA, ThA = Zs[:, A], Ys[:, A], W[:, A], Theta[:, A]
        f_pen = 0.5 * (pen @ ThA ** 2)
        pen_td = np.einsum("i,ij,ij->j", pen, ThA, D)
        pen_dd = pen @ D ** 2
        fA = f[A]
        step = np.ones(A.size)
        accepted = np.zeros(A.size, dtype=bool)
        f_acc = np.empty(A.size)
        M_acc = None
        todo = np.arange(A.size)
        for trial in range(60):
            full = todo.size == A.size
            t = step[todo]
            if full:
                M = YsA * (ZA + t * XD)
                loss = np.einsum("ij,ij->j", WA, _softplus_neg(M))
            else:
                M = YsA[:, todo] * (ZA[:, todo] + t * XD[:, todo])
                loss = np.einsum("ij,ij->j", WA[:, todo], _softplus_neg(M))
            fc = loss + f_pen[todo] + t * pen_td[todo] + 0.5 * t * t * pen_dd[todo]
            ok = fc <= fA[todo] + 1e-4 * t * slope[todo]
            accepted[todo[ok]] = True
            f_acc[todo[ok]] = fc[ok]
            if trial == 0:
                M_acc = M
            else:
                M_acc[:, todo[ok]] = M[:, ok]
            todo = todo[~ok]
            if not todo.size:
                break
            step[todo] *= 0.5
        stalled[A[~accepted]] = True
        rho[A, slot] = 0.0
        moved = np.flatnonzero(accepted)
        cols = A[moved]
        if cols.size:
            whole = moved.size == A.size
            st = step if whole else step[moved]
            s_ = D * st if whole else D[:, moved] * st
            Theta[:, cols] += s_
            Zs[:, cols] = (ZA + XD * st) if whole else (ZA[:, moved] + XD[:, moved] * st)
            f_new = f_acc[moved]
            G_new = gradient(cols, M_acc if whole else M_acc[:, moved])
            yv = G_new - (GA if whole else GA[:, moved])
            sy = np.einsum("ij,ij->j", s_, yv)
            keep = sy > 1e-12 * np.einsum("ij,ij->j", yv, yv)
            S_mem[cols, slot] = s_.T
            Y_mem[cols, slot] = yv.T
            rho[cols, slot] = np.where(keep, 1.0 / np.where(keep, sy, 1.0), 0.0)
            if keep.any():
                ly = linalg.solve_triangular(factor, yv[:, keep], lower=True, check_finite=False)
                gamma[cols[keep]] = np.clip(sy[keep] / np.einsum("ij,ij->j", ly, ly), 1e-3, 1e3)
            f[cols] = f_new
            G[:, cols] = G_new
            gnorm[cols] = np.abs(G_new).max(axis=0)
        slot = (slot + 1) % memory
        n_iter[A] += 1
        active = np.flatnonzero((gnorm > target) & ~stalled)

    if mixed:
        M = Ys * (Xa @ Theta)
        G = Xa.T @ (-Ys * W * expit(-M)) + pen[:, None] * Theta
        gnorm = np.abs(G).max(axis=0)
        redo = np.flatnonzero(gnorm > tol)
        if redo.size:
            res = solve_logistic_batch(X, Ys[:, redo], W[:, redo], lam, init=Theta[:, redo],
                                       factor=factor, tol=tol[redo], memory=memory,
                                       max_iter=max_iter, refresh=refresh, precision="double")
            Theta[:, redo] = res.theta
            n_iter[redo] += res.n_iter
            gnorm[redo] = res.grad_norm
        return BatchResult(Theta, n_iter, gnorm, factor)

    for j in np.flatnonzero(gnorm > tol):
        rows = W[:, j] > 0
        theta, g, extra = _newton(Theta[:, j], X[rows], Ys[rows, j], W[rows, j], lam, tol[j])
        Theta[:, j] = theta
        n_iter[j] += extra
        gnorm[j] = np.abs(g).max()
    return BatchResult(Theta, n_iter, gnorm, factor)


def fit_logistic(X, y, sample_weights=None, lam: float = 1.0, tol: float | None = None,
                 init: np.ndarray | None = None, solver: str = "auto") -> LogisticModel:
    """Minimize ``sum_i w_i log(1 + exp(-y_i (x_i beta + b))) + lam/2 ||beta||^2``.

    Convergence is declared when the gradient infinity-norm is at most
    ``tol`` (default ``1e-6 * max(1, n)``). Small problems use Newton's method,
    larger ones preconditioned L-BFGS (see :func:`solve_logistic_batch`).
    """
    X = np.asarray(X, dtype=np.float64)
    y = _check_binary(y)
    if not np.all(np.isfinite(X)):
        raise ValueError("features contain non-finite values")
    if not lam > 0:
        raise ValueError(f"lam must be positive, got {lam}")
    n, d = X.shape
    if y.size != n:
        raise ValueError("X and y have different lengths")
    w = np.ones(n) if sample_weights is None else np.asarray(sample_weights, dtype=np.float64)
    if w.shape != (n,) or np.any(w < 0):
        raise ValueError("sample_weights must be a non-negative vector of length n")
    tol = 1e-6 * max(1, n) if tol is None else tol
    ys = np.where(y, 1.0, -1.0)
    if init is None:
        pw = float(w[y].sum() / w.sum())
        theta = np.zeros(d + 1)
        theta[-1] = np.log(pw / (1 - pw))
    else:
        theta = np.asarray(init, dtype=np.float64).copy()

    if solver == "auto":
        solver = "newton" if d <= _NEWTON_MAX_DIM else "lbfgs"
    if solver == "lbfgs":
        res = solve_logistic_batch(X, ys, w, lam, init=theta, tol=tol)
        theta, n_iter, gnorm = res.theta[:, 0], int(res.n_iter[0]), float(res.grad_norm[0])
    elif solver == "newton":
        theta, g, n_iter = _newton(theta, X, ys, w, lam, tol)
        gnorm = float(np.abs(g).max())
    else:
        raise ValueError(f"unknown solver {solver!r}")
    if gnorm > tol:
        raise ArithmeticError(f"logistic solver did not converge (|grad|={gnorm:.3g} > {tol:.3g})")
    return LogisticModel(theta[:-1].copy(), float(theta[-1]), float(lam), float(y.mean()),
                         sample_weights is not None, n_iter, gnorm)


def predict_biased(model: LogisticModel, X, mode: str = "normalized"):
    """Prior-shifted term probability and presence decision.

    ``literal``: ``P_b = rho * P`` with presence at ``P_b >= rho / 2``.
    ``normalized``: ``P_b = rho P / (rho P + (1 - rho)(1 - P))`` with presence at
    ``P_b >= rho``. Both decisions are the same as ``P >= 0.5``.
    """
    P = model.predict_proba(X)
    rho = model.rho_term
    present = model.decision_function(X) >= 0.0
    if mode == "literal":
        return rho * P, present
    if mode == "normalized":
        num = rho * P
        return num / (num + (1.0 - rho) * (1.0 - P)), present
    raise ValueError(f"unknown mode {mode!r}")


# ----------------------------------------------------------------------------
# naive Bayes


@dataclass(frozen=True)
class NaiveBayesModel:
    means: np.ndarray      # (2, d), row 0 = term absent
    variances: np.ndarray  # (2, d)
    priors: np.ndarray     # (2,)
    variance_floor: float


def fit_naive_bayes(X, y, floor_ratio: float = 1e-9) -> NaiveBayesModel:
    X = np.asarray(X, dtype=np.float64)
    y = _check_binary(y)
    floor = floor_ratio * float(X.var(axis=0).mean())
    floor = max(floor, np.finfo(float).tiny)
    means = np.vstack([X[~y].mean(axis=0), X[y].mean(axis=0)])
    var = np.vstack([X[~y].var(axis=0), X[y].var(axis=0)])
    priors = np.array([1.0 - y.mean(), y.mean()])
    return NaiveBayesModel(means, np.maximum(var, floor), priors, floor)


def predict_nb(model: NaiveBayesModel, X) -> np.ndarray:
    """Posterior probability of the term given each row of ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    ll = np.empty((X.shape[0], 2))
    for c in (0, 1):
        v = model.variances[c]
        ll[:, c] = (np.log(model.priors[c])
                    - 0.5 * np.sum(np.log(2 * np.pi * v))
                    - 0.5 * (((X - model.means[c]) ** 2) / v).sum(axis=1))
    return expit(ll[:, 1] - ll[:, 0])


# ----------------------------------------------------------------------------
# nearest neighbours


@dataclass(frozen=True)
class KnnConfig:
    k: int = 10

    def __post_init__(self):
        if not (5 <= self.k <= 20):
            raise ValueError(f"k must be in [5, 20], got {self.k}")


def pairwise_sq_distances(A: np.ndarray, B: np.ndarray | None = None) -> np.ndarray:
    """Squared Euclidean distances between rows, computed on centred data."""
    A = np.asarray(A, dtype=np.float64)
    B = A if B is None else np.asarray(B, dtype=np.float64)
    center = np.concatenate([A, B]).mean(axis=0) if B is not A else A.mean(axis=0)
    A0 = A - center
    B0 = A0 if B is A else B - center
    a2 = np.einsum("ij,ij->i", A0, A0)
    b2 = a2 if B is A else np.einsum("ij,ij->i", B0, B0)
    d = a2[:, None] + b2[None, :] - 2.0 * (A0 @ B0.T)
    np.maximum(d, 0.0, out=d)
    if B is A:
        np.fill_diagonal(d, 0.0)
    return d


def knn_vote(sq_dist: np.ndarray, train_labels: np.ndarray, k: int) -> np.ndarray:
    """Strict-majority term vote among the k nearest training rows.

    ``sq_dist`` has shape (n_query, n_train); ties in distance go to the lower
    training index.
    """
    sq_dist = np.atleast_2d(sq_dist)
    n_train = sq_dist.shape[1]
    if n_train == 0:
        raise ValueError("empty training set")
    if not (1 <= k <= n_train):
        raise ValueError(f"k must be in [1, {n_train}], got {k}")
    nn = np.argsort(sq_dist, axis=1, kind="stable")[:, :k]
    votes = np.asarray(train_labels, dtype=np.int64)[nn].sum(axis=1)
    return 2 * votes > k


def knn_predict(train_maps: np.ndarray, train_labels: np.ndarray, X, k: int) -> np.ndarray:
    """Predicted term-presence rows for each query map in ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return knn_vote(pairwise_sq_distances(X, train_maps), train_labels, k)


# ----------------------------------------------------------------------------
# per-term pipelines


def standardize(F: np.ndarray):
    mu = F.mean(axis=0)
    sd = F.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (F - mu) / sd, mu, sd


@dataclass
class TermModel:
    """A fitted per-term classifier on selected parcel features.

    Logistic weights are stored in raw (unstandardized) feature units.
    """

    term: str
    category: str
    kind: str
    selected: np.ndarray
    model: LogisticModel | NaiveBayesModel
    mu: np.ndarray | None = None
    sd: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def probabilities(self, features: np.ndarray, mode: str = "normalized"):
        """Return ``(P, P_biased, present)`` for rows of the full feature matrix."""
        F = np.atleast_2d(features)[:, self.selected]
        if isinstance(self.model, LogisticModel):
            P = self.model.predict_proba(F)
            Pb, present = predict_biased(self.model, F, mode)
            return P, Pb, present
        P = predict_nb(self.model, (F - self.mu) / self.sd)
        return P, P, P >= 0.5


def fit_term_model(features: np.ndarray, y, term: str, category: str, kind: str,
                   lam: float = 1.0, select_fraction: float = 0.3,
                   init: np.ndarray | None = None) -> TermModel:
    """ANOVA selection, standardization and one binary classifier."""
    y = _check_binary(y)
    sel = anova_select(features, y, select_fraction).selected
    Z, mu, sd = standardize(features[:, sel])
    if kind == "naive-bayes":
        return TermModel(term, category, kind, sel, fit_naive_bayes(Z, y), mu, sd)
    if kind not in ("logistic", "logistic-weighted"):
        raise ValueError(f"unknown classifier kind {kind!r}")
    w = balance_weights(y) if kind == "logistic-weighted" else None
    m = fit_logistic(Z, y, w, lam, init=init)
    raw = LogisticModel(m.weights / sd, m.intercept - float(m.weights @ (mu / sd)), m.lam,
                        m.rho_term, m.weighted, m.n_iter, m.grad_norm)
    return TermModel(term, category, kind, sel, raw)


def ovr_labels(corpus: Corpus, indices: np.ndarray, term: str, negatives: str = "all"):
    """Binary targets for ``term`` and the rows that take part in the fit.

    ``negatives='all'`` opposes the term to every other map; ``'category'``
    keeps only maps carrying another term of the same category.
    """
    y = corpus.term_labels(term)[indices]
    if negatives == "all":
        return y, np.ones(y.size, dtype=bool)
    if negatives != "category":
        raise ValueError(f"unknown negatives mode {negatives!r}")
    cat = corpus.taxonomy.category_of(term)
    cols = [corpus.taxonomy.terms.index(t) for t in corpus.taxonomy.terms_by_category[cat]]
    other = corpus.labels[np.ix_(indices, cols)].any(axis=1)
    return y, y | other


def eligible_terms(corpus: Corpus, train_idx: Sequence[int], category: str,
                   min_studies: int = 2) -> list[str]:
    span = validate_term_span(corpus, train_idx, min_studies)
    out = []
    for t in corpus.taxonomy.terms_by_category[category]:
        if t not in span:
            logger.warning("term %r has no positive training map; skipped", t)
        elif not span[t].usable:
            logger.warning("term %r spans %d training studies (< %d); skipped",
                           t, span[t].n_studies, min_studies)
        else:
            out.append(t)
    return out


def train_category_ovr(corpus: Corpus, train_idx, category: str, features: np.ndarray,
                       kind: str = "logistic-weighted", lam: float = 1.0,
                       select_fraction: float = 0.3, negatives: str = "all") -> dict[str, TermModel]:
    """One binary model per eligible term of ``category``.

    ``features`` are the training maps' features, aligned with ``train_idx``.
    """
    train_idx = np.asarray(train_idx)
    models = {}
    for term in eligible_terms(corpus, train_idx, category):
        y, rows = ovr_labels(corpus, train_idx, term, negatives)
        if y[rows].all():
            logger.warning("term %r has no negative training map; skipped", term)
            continue
        models[term] = fit_term_model(features[rows], y[rows], term, category, kind, lam,
                                      select_fraction)
    return models


# ----------------------------------------------------------------------------
# serialization

MODEL_MAGIC = b"LMOD"
MODEL_VERSION = 1


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def model_record(tm: TermModel) -> bytes:
    m = tm.model
    if not isinstance(m, LogisticModel):
        raise TypeError("only logistic models are serializable")
    sel = np.asarray(tm.selected, dtype="<u4")
    return (_pack_str(tm.term) + _pack_str(tm.category)
            + struct.pack("<ddI", m.lam, m.rho_term, sel.size) + sel.tobytes()
            + np.asarray(m.weights, dtype="<f8").tobytes() + struct.pack("<dB", m.intercept, m.weighted))


def save_models(path, models: Sequence[TermModel]) -> None:
    """Versioned little-endian records: term, category, lam, rho, indices, weights, intercept."""
    body = b"".join(model_record(tm) for tm in models)
    Path(path).write_bytes(MODEL_MAGIC + struct.pack("<HI", MODEL_VERSION, len(models)) + body)


def load_models(path) -> list[TermModel]:
    buf = Path(path).read_bytes()
    if not buf.startswith(MODEL_MAGIC):
        raise ValueError(f"{path}: not a model file")
    version, count = struct.unpack_from("<HI", buf, 4)
    if version != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model version {version}")
    off = 10
    out = []

    def read_str():
        nonlocal off
        (k,) = struct.unpack_from("<H", buf, off)
        s = buf[off + 2: off + 2 + k].decode("utf-8")
        off += 2 + k
        return s

    for _ in range(count):
        term = read_str()
        cat = read_str()
        lam, rho, m = struct.unpack_from("<ddI", buf, off)
        off += 20
        sel = np.frombuffer(buf, dtype="<u4", count=m, offset=off).astype(np.int64)
        off += 4 * m
        w = np.frombuffer(buf, dtype="<f8", count=m, offset=off).copy()
        off += 8 * m
        b, weighted = struct.unpack_from("<dB", buf, off)
        off += 9
        kind = "logistic-weighted" if weighted else "logistic"
        out.append(TermModel(term, cat, kind, sel, LogisticModel(w, b, lam, rho, bool(weighted))))
    return out
