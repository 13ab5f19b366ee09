import warnings

import numpy as np
import pytest

from fssd.ensemble import fit_ensemble_weights, fit_logistic
from fssd.metrics import auroc
from helpers import zero_information_scores


def test_single_layer_preserves_auroc(rng):
    s_in, s_ood = rng.normal(1.0, 1.0, (300, 1)), rng.normal(0.0, 1.0, (300, 1))
    alpha, bias = fit_ensemble_weights(s_in, s_ood)
    assert alpha[0] > 0
    assert auroc(s_in @ alpha + bias, s_ood @ alpha + bias) == auroc(s_in[:, 0], s_ood[:, 0])


def test_separable_scores_get_positive_weight():
    alpha, _ = fit_ensemble_weights(np.arange(10.0)[:, None] + 20, np.arange(10.0)[:, None])
    assert alpha[0] > 0


def test_uninformative_column_gets_no_weight(rng):
    for _ in range(5):
        s_in, s_ood = zero_information_scores(rng)
        alpha, _ = fit_ensemble_weights(s_in, s_ood)
        assert abs(alpha[1]) <= 1e-6
        assert alpha[0] > 0


def test_constant_column_warns_and_gets_zero(rng):
    s_in = np.c_[rng.normal(1, 1, 50), np.full(50, 3.0)]
    s_ood = np.c_[rng.normal(0, 1, 50), np.full(50, 3.0)]
    with pytest.warns(UserWarning, match="zero variance"):
        alpha, _ = fit_ensemble_weights(s_in, s_ood)
    assert alpha[1] == 0.0


def test_weights_are_in_raw_coordinates(rng):
    s_in, s_ood = rng.normal([2, 0], [1, 5], (200, 2)), rng.normal([0, 3], [1, 5], (200, 2))
    alpha, bias = fit_ensemble_weights(s_in, s_ood, c_grid=(10.0,))
    mu = np.r_[s_in, s_ood].mean(axis=0)
    sd = np.r_[s_in, s_ood].std(axis=0)
    w, b = fit_logistic((np.r_[s_in, s_ood] - mu) / sd, np.r_[np.ones(200), np.zeros(200)], 10.0)
    np.testing.assert_allclose(alpha, w / sd, rtol=1e-10)
    assert bias == pytest.approx(b - np.sum(w * mu / sd), rel=1e-10)


def test_logistic_matches_sklearn(rng):
    from sklearn.linear_model import LogisticRegression

    X = rng.standard_normal((120, 3))
    y = (X @ [1.0, -2.0, 0.5] + rng.normal(0, 1, 120) > 0).astype(float)
    for C in (0.01, 1.0, 10.0):
        w, b = fit_logistic(X, y, C)
        ref = LogisticRegression(C=C, tol=1e-12, max_iter=10000).fit(X, y)
        np.testing.assert_allclose(w, ref.coef_[0], rtol=1e-5, atol=1e-7)
        assert b == pytest.approx(ref.intercept_[0], rel=1e-5, abs=1e-7)


def test_deterministic_and_shape_checked(rng):
    s_in, s_ood = rng.normal(1, 1, (40, 3)), rng.normal(0, 1, (40, 3))
    a = fit_ensemble_weights(s_in, s_ood, seed=3)
    b = fit_ensemble_weights(s_in, s_ood, seed=3)
    np.testing.assert_array_equal(a[0], b[0])
    with pytest.raises(ValueError, match="equal column counts"):
        fit_ensemble_weights(s_in, s_ood[:, :2])


def test_no_warning_for_healthy_columns(rng):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        fit_ensemble_weights(rng.normal(1, 1, (30, 2)), rng.normal(0, 1, (30, 2)))
