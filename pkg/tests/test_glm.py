import numpy as np
import pytest
from scipy import stats

from ontomap.corpus import DesignMatrix, build_design_matrix
from ontomap.glm import (CollinearDesignError, contrast_vector, fit_glm, fwer_threshold,
                         term_contrast)

from conftest import make_corpus


def design(Y, names=None, intercept=False):
    Y = np.asarray(Y, dtype=float)
    names = names or tuple(f"t{j}" for j in range(Y.shape[1]))
    return DesignMatrix(tuple(names), Y, intercept, ("cat",) * Y.shape[1])


def test_intercept_only_gives_voxel_means():
    X = np.random.default_rng(0).normal(size=(9, 4))
    fit = fit_glm(X, design(np.ones((9, 1)), ("intercept",), True))
    np.testing.assert_allclose(fit.beta[0], X.mean(axis=0), rtol=1e-12)


def test_orthogonal_two_column_design_gives_group_means():
    X = np.array([[1.0, 2.0], [3.0, 4.0], [10.0, 0.0], [20.0, 2.0]])
    Y = [[1, 0], [1, 0], [0, 1], [0, 1]]
    fit = fit_glm(X, design(Y))
    np.testing.assert_allclose(fit.beta, [[2.0, 3.0], [15.0, 1.0]], rtol=1e-12)


def test_random_design_matches_pseudo_inverse():
    rng = np.random.default_rng(1)
    Y = rng.normal(size=(20, 3))
    X = rng.normal(size=(20, 5))
    fit = fit_glm(X, design(Y))
    oracle = np.linalg.pinv(Y) @ X
    assert np.abs(fit.beta - oracle).max() <= 1e-10 * np.abs(oracle).max()
    resid = X - Y @ fit.beta
    assert np.abs(Y.T @ resid).max() < 1e-10 * np.abs(X).max() * 20


def test_two_group_t_equals_pooled_two_sample_t():
    X = np.array([[1.0], [2.5], [3.0], [6.0], [7.5], [9.0]])
    Y = np.column_stack([[0, 0, 0, 1, 1, 1], np.ones(6)])
    fit = fit_glm(X, design(Y, ("term", "intercept"), True))
    res = term_contrast(fit, "term")
    oracle = stats.ttest_ind(X[3:, 0], X[:3, 0], equal_var=True).statistic
    assert res.t_values[0] == pytest.approx(oracle, rel=1e-12)
    assert fit.dof == 4


def test_noiseless_planted_effect_is_significant_everywhere_on_support():
    rng = np.random.default_rng(2)
    labels = rng.random((30, 2)) < 0.5
    labels[0] = [True, False]
    labels[1] = [False, True]
    beta = np.zeros((3, 8))
    beta[0, :3] = 2.0
    beta[2] = 1.0
    Y = np.column_stack([labels, np.ones(30)]).astype(float)
    fit = fit_glm(Y @ beta, design(Y, ("a", "b", "intercept"), True))
    res = term_contrast(fit, "a", alpha=1e-12)
    assert res.significant[:3].all()
    assert not res.significant[3:].any()


def test_collinear_design_lists_offending_columns():
    visual = np.array([1, 1, 1, 0, 0, 0, 1, 0])
    Y = np.column_stack([visual, visual, [1, 0, 1, 0, 1, 0, 0, 1], np.ones(8)])
    with pytest.raises(CollinearDesignError) as e:
        fit_glm(np.zeros((8, 4)), design(Y, ("visual", "digits", "read", "intercept"), True))
    assert ("visual", "digits") in e.value.groups


def test_near_collinear_pair_rejected_with_intercept():
    a = np.r_[np.ones(2000), np.zeros(2000)]
    b = a.copy()
    b[0] = 0.0
    Y = np.column_stack([a, b, np.ones(4000)])
    with pytest.raises(CollinearDesignError) as e:
        fit_glm(np.zeros((4000, 2)), design(Y, ("visual", "digits", "intercept"), True))
    assert e.value.groups == [("visual", "digits")]


def test_excluded_term_error_names_exclusion():
    c = make_corpus([[["visual"], ["auditory"], ["visual", "words"], ["auditory", "words"]]])
    d = build_design_matrix(c, {"digits"})
    with pytest.raises(KeyError, match="excluded"):
        contrast_vector(d, "digits")


def test_category_mean_contrast_sums_to_zero():
    c = make_corpus([[["visual", "words"], ["auditory", "digits"], ["visual", "face"]]])
    d = build_design_matrix(c)
    v = contrast_vector(d, "words", "category-mean")
    assert v.sum() == pytest.approx(0.0, abs=1e-12)
    assert v[d.column("words")] == 1.0


def test_fwer_threshold_values():
    assert fwer_threshold(1, 0.05, 10) == pytest.approx(stats.t.ppf(0.975, 10), rel=1e-10)
    assert fwer_threshold(100, 0.05, 10) == pytest.approx(stats.t.ppf(1 - 2.5e-4, 10), rel=1e-10)
    th = [fwer_threshold(p, 0.05, 20) for p in (1, 10, 100, 1000)]
    assert all(a < b for a, b in zip(th, th[1:]))
    for bad in (0.0, 1.0, -0.5):
        with pytest.raises(ValueError):
            fwer_threshold(10, bad, 5)


def test_null_rejection_rate_is_controlled():
    rng = np.random.default_rng(3)
    Y = np.column_stack([rng.random(30) < 0.5, np.ones(30)]).astype(float)
    d = design(Y, ("a", "intercept"), True)
    hits = sum(term_contrast(fit_glm(rng.normal(size=(30, 50)), d), "a").n_significant > 0
               for _ in range(300))
    assert hits / 300 <= 0.05 + 3 * np.sqrt(0.05 * 0.95 / 300)
