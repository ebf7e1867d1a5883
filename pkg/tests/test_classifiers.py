import numpy as np
import pytest
from scipy import optimize

from ontomap.classifiers import (KnnConfig, LogisticModel, SingleClassError, TermModel,
                                 balance_weights, eligible_terms, fit_logistic, fit_naive_bayes,
                                 fit_term_model, knn_predict, knn_vote, load_models,
                                 logistic_objective, pairwise_sq_distances, predict_biased,
                                 predict_nb, save_models, solve_logistic_batch,
                                 train_category_ovr)

from conftest import make_corpus
from oracles import gaussian_pdf, logistic_objective_loop


def problem(seed, n=60, d=5):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    y = (X @ rng.normal(size=d) + rng.normal(size=n)) > 0.5
    return X, y


def test_objective_matches_loop_oracle():
    X, y = problem(0, 12, 3)
    theta = np.random.default_rng(1).normal(size=4)
    w = np.random.default_rng(2).uniform(0.5, 2.0, 12)
    f, _ = logistic_objective(theta, X, np.where(y, 1.0, -1.0), w, 0.7)
    assert f == pytest.approx(logistic_objective_loop(theta, X, y.astype(int), w, 0.7), rel=1e-12)


def test_gradient_matches_central_differences():
    X, y = problem(3, 30, 4)
    ys = np.where(y, 1.0, -1.0)
    w = balance_weights(y)
    rng = np.random.default_rng(4)
    for _ in range(5):
        theta = rng.normal(size=5)
        _, g = logistic_objective(theta, X, ys, w, 2.0)
        h = 1e-6
        fd = np.array([(logistic_objective(theta + h * e, X, ys, w, 2.0)[0]
                        - logistic_objective(theta - h * e, X, ys, w, 2.0)[0]) / (2 * h)
                       for e in np.eye(5)])
        assert np.abs(fd - g).max() <= 1e-5 * max(1.0, np.abs(g).max())


def test_tiny_instance_matches_derivative_free_minimizer():
    X, y = problem(5, 8, 2)
    y[:2] = [True, False]
    m = fit_logistic(X, y, lam=1.0, tol=1e-12)
    f_ours = logistic_objective_loop(np.r_[m.weights, m.intercept], X, y.astype(int), np.ones(8), 1.0)
    res = optimize.minimize(lambda t: logistic_objective_loop(t, X, y.astype(int), np.ones(8), 1.0),
                            np.zeros(3), method="Nelder-Mead",
                            options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 20000, "maxfev": 40000})
    assert f_ours == pytest.approx(res.fun, abs=1e-8)
    assert f_ours <= res.fun + 1e-12


def test_separable_1d_optimality():
    X = np.array([[-2.0], [-1.0], [1.0], [2.0]])
    y = np.array([False, False, True, True])
    m = fit_logistic(X, y, lam=1.0)
    _, g = logistic_objective(np.r_[m.weights, m.intercept], X, np.where(y, 1.0, -1.0), np.ones(4), 1.0)
    assert np.abs(g).max() <= 1e-6 * 4


def test_huge_penalty_limit():
    X, y = problem(6, 50, 4)
    w = np.random.default_rng(7).uniform(0.2, 3.0, 50)
    m = fit_logistic(X, y, w, lam=1e6)
    assert np.linalg.norm(m.weights) < 1e-3
    pw = w[y].sum() / w.sum()
    assert m.intercept == pytest.approx(np.log(pw / (1 - pw)), abs=1e-3)


def test_distinct_starts_agree():
    X, y = problem(8, 80, 6)
    a = fit_logistic(X, y, lam=0.5, tol=1e-10)
    b = fit_logistic(X, y, lam=0.5, tol=1e-10, init=np.random.default_rng(9).normal(size=7) * 3)
    assert np.abs(np.r_[a.weights - b.weights, a.intercept - b.intercept]).max() < 1e-6


def test_lbfgs_and_newton_agree():
    X, y = problem(10, 300, 250)
    w = balance_weights(y)
    a = fit_logistic(X, y, w, lam=3.0, solver="newton", tol=1e-9)
    b = fit_logistic(X, y, w, lam=3.0, solver="lbfgs", tol=1e-9)
    assert np.abs(a.weights - b.weights).max() < 1e-6


def test_batch_columns_match_independent_fits():
    X, _ = problem(11, 120, 30)
    rng = np.random.default_rng(12)
    Y = rng.random((120, 4)) < np.array([0.5, 0.2, 0.1, 0.6])
    W = rng.uniform(0.5, 2.0, (120, 4))
    W[:30, 1] = 0.0
    res = solve_logistic_batch(X, np.where(Y, 1.0, -1.0), W, 0.8, tol=1e-9)
    for j in range(4):
        rows = W[:, j] > 0
        ref = fit_logistic(X[rows], Y[rows, j], W[rows, j], 0.8, tol=1e-9, solver="newton")
        np.testing.assert_allclose(res.theta[:-1, j], ref.weights, atol=1e-6)
        assert res.grad_norm[j] <= 1e-9


def test_input_validation():
    X, y = problem(13, 10, 2)
    with pytest.raises(SingleClassError):
        fit_logistic(X, np.ones(10, dtype=bool))
    Xbad = X.copy()
    Xbad[0, 0] = np.nan
    with pytest.raises(ValueError):
        fit_logistic(Xbad, y)
    with pytest.raises(ValueError):
        fit_logistic(X, y, -np.ones(10))


def test_balance_weights():
    assert np.array_equal(balance_weights(np.arange(10) % 2 == 0), np.ones(10))
    y = np.zeros(100, dtype=bool)
    y[:10] = True
    w = balance_weights(y)
    assert w[0] == 5.0
    assert w[-1] == pytest.approx(0.5556, abs=5e-5)
    y2 = np.random.default_rng(0).random(37) < 0.3
    w2 = balance_weights(y2)
    assert w2[y2].sum() == pytest.approx(w2[~y2].sum())
    with pytest.raises(SingleClassError):
        balance_weights(np.zeros(5, dtype=bool))


def model_with(rho, b=0.0):
    return LogisticModel(np.zeros(1), b, 1.0, rho, False)


def test_predict_biased_identities():
    X = np.linspace(-3, 3, 7)[:, None]
    m = LogisticModel(np.array([1.3]), -0.2, 1.0, 1.0, False)
    Pb, _ = predict_biased(m, X, "literal")
    np.testing.assert_allclose(Pb, m.predict_proba(X))
    m_half = LogisticModel(np.array([1.3]), -0.2, 1.0, 0.5, False)
    np.testing.assert_allclose(predict_biased(m_half, X, "normalized")[0], m_half.predict_proba(X))
    for rho in (0.05, 0.3, 0.9):
        Pb, present = predict_biased(model_with(rho), np.zeros((1, 1)), "normalized")
        assert Pb[0] == pytest.approx(rho)
        assert present[0]


def test_predict_biased_modes_share_decision():
    X = np.linspace(-2, 2, 41)[:, None]
    m = LogisticModel(np.array([2.0]), 0.3, 1.0, 0.1, True)
    a = predict_biased(m, X, "literal")[1]
    b = predict_biased(m, X, "normalized")[1]
    assert np.array_equal(a, b)
    assert np.array_equal(a, m.predict_proba(X) >= 0.5)


def test_naive_bayes_identical_classes_gives_prior():
    # both classes have mean 0.5 and variance 0.25
    X = np.array([[0.0], [1.0], [0.0], [1.0], [0.0], [1.0], [0.0], [1.0]])
    y = np.array([0, 0, 1, 1, 1, 1, 1, 1], dtype=bool)
    nb = fit_naive_bayes(X, y)
    np.testing.assert_allclose(predict_nb(nb, np.array([[0.3], [5.0], [-2.0]])), 0.75, rtol=1e-12)


def test_naive_bayes_symmetric_point():
    X = np.array([[-2.0], [0.0], [0.0], [2.0]])
    y = np.array([0, 0, 1, 1], dtype=bool)
    nb = fit_naive_bayes(X, y)
    assert predict_nb(nb, np.array([[0.0]]))[0] == pytest.approx(0.5)


def test_naive_bayes_two_feature_hand_computation():
    X = np.array([[0.0, 1.0], [2.0, 3.0], [1.0, 1.0], [4.0, 0.0], [6.0, 2.0], [5.0, 4.0]])
    y = np.array([0, 0, 0, 1, 1, 1], dtype=bool)
    nb = fit_naive_bayes(X, y)
    x = np.array([3.0, 2.0])
    like = []
    for c in (False, True):
        rows = X[y == c]
        like.append(np.prod(gaussian_pdf(x, rows.mean(axis=0), rows.var(axis=0))) * 0.5)
    assert predict_nb(nb, x[None])[0] == pytest.approx(like[1] / (like[0] + like[1]), rel=1e-10)


def test_knn_votes():
    train = np.array([[0.0], [1.0], [2.0], [3.0], [10.0]])
    labels = np.array([[1, 0], [1, 1], [0, 1], [1, 0], [0, 1]], dtype=bool)
    assert knn_predict(train, labels, [[2.9]], 1)[0].tolist() == [True, False]
    # 5 nearest: labels column 0 has 3 of 5
    assert knn_predict(train, labels, [[0.0]], 5)[0].tolist() == [True, True]
    # 4 nearest of 0: rows 0..3 -> column 1 has 2 of 4, not a strict majority
    assert knn_predict(train, labels, [[0.0]], 4)[0].tolist() == [True, False]
    with pytest.raises(ValueError):
        knn_vote(np.zeros((1, 0)), np.zeros((0, 2)), 1)
    with pytest.raises(ValueError):
        KnnConfig(3)


def test_pairwise_distances_match_direct():
    rng = np.random.default_rng(14)
    A, B = rng.normal(size=(6, 9)) + 50, rng.normal(size=(4, 9)) + 50
    direct = ((A[:, None] - B[None]) ** 2).sum(-1)
    np.testing.assert_allclose(pairwise_sq_distances(A, B), direct, rtol=1e-10)


def test_term_model_raw_weights_reproduce_standardized_fit():
    rng = np.random.default_rng(15)
    F = rng.normal(3.0, 2.0, size=(80, 20))
    y = F[:, 3] + rng.normal(size=80) > 3.0
    tm = fit_term_model(F, y, "visual", "stimulus modality", "logistic-weighted", lam=1.0)
    Z = (F[:, tm.selected] - F[:, tm.selected].mean(0)) / F[:, tm.selected].std(0)
    ref = fit_logistic(Z, y, balance_weights(y), 1.0)
    np.testing.assert_allclose(tm.model.decision_function(F[:, tm.selected]),
                               ref.decision_function(Z), atol=1e-8)


def test_train_category_ovr_skips_narrow_terms():
    c = make_corpus([[["visual", "words"], ["auditory", "shapes"], ["visual", "shapes"]],
                     [["visual", "words"], ["auditory", "shapes"], ["visual", "face"]]], p=6)
    idx = np.arange(c.n_maps)
    assert eligible_terms(c, idx, "stimulus modality") == ["visual", "auditory"]
    models = train_category_ovr(c, idx, "stimulus modality", c.data, "logistic", select_fraction=1.0)
    assert set(models) == {"visual", "auditory"}
    ex = train_category_ovr(c, idx, "explicit stimulus", c.data, "logistic", select_fraction=1.0)
    assert "face" not in ex and set(ex) == {"words", "shapes"}


def test_model_file_round_trip(tmp_path):
    rng = np.random.default_rng(16)
    F = rng.normal(size=(40, 10))
    y = F[:, 0] > 0
    tm = fit_term_model(F, y, "attend", "instructions", "logistic-weighted")
    save_models(tmp_path / "m.lmod", [tm])
    (back,) = load_models(tmp_path / "m.lmod")
    assert back.term == "attend" and back.kind == "logistic-weighted"
    np.testing.assert_array_equal(back.probabilities(F)[0], tm.probabilities(F)[0])
    assert isinstance(back, TermModel)
