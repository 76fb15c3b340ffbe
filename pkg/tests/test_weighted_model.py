"""Tests for weighted fitting, losses, and importance-weighted CV."""

import numpy as np
import pytest

from shiftproj import (
    InputError,
    LinearModel,
    LossSpec,
    PipelineCandidate,
    eval_loss,
    iwcv_select,
    weighted_fit,
    weighted_loss,
)
from shiftproj.data import TrainTestPair
from shiftproj.weighted_model import (
    _cv_fold_ids,
    iwcv_scores,
    loss_terms,
    select_ridge,
    signed_labels,
)

REG = LossSpec.regression()
CLS = LossSpec.classification()


def _objective(U, y, w, c, b, b0, kind):
    """The documented fit criterion, written independently of the module."""
    z = U @ b + b0
    if kind == "squared":
        values = (z - y) ** 2
    else:
        t = np.where(np.asarray(y) > 0, 1.0, -1.0)
        values = np.log1p(np.exp(-t * z))
    return float(w @ values) / len(y) + c * float(b @ b)


# ---------------------------------------------------------------------------
# loss specs and labels


def test_loss_spec_pairing():
    assert REG.task == "regression"
    assert CLS.task == "classification"
    with pytest.raises(InputError):
        LossSpec(train_loss="squared", eval_loss="zero_one")
    with pytest.raises(InputError):
        LossSpec(train_loss="hinge", eval_loss="zero_one")


def test_signed_labels_maps_both_conventions():
    np.testing.assert_array_equal(signed_labels([0, 1, 1, 0]), [-1, 1, 1, -1])
    np.testing.assert_array_equal(signed_labels([-1, 1]), [-1, 1])


def test_loss_terms_derivatives_match_finite_differences():
    rng = np.random.default_rng(0)
    z = rng.normal(size=6)
    y = rng.normal(size=6)
    for kind, labels in (("squared", y), ("logistic", np.sign(y))):
        values, d1, d2 = loss_terms(z, labels, kind)
        h = 1e-6
        up, _, _ = loss_terms(z + h, labels, kind)
        dn, _, _ = loss_terms(z - h, labels, kind)
        np.testing.assert_allclose(d1, (up - dn) / (2 * h), atol=1e-6)
        np.testing.assert_allclose(d2, (up - 2 * values + dn) / h**2, atol=1e-3)


# ---------------------------------------------------------------------------
# weighted_fit


def test_weighted_fit_regression_matches_normal_equations():
    rng = np.random.default_rng(4)
    U = rng.normal(size=(25, 3))
    y = U @ [1.0, -2.0, 0.5] + 0.3 + 0.1 * rng.normal(size=25)
    w = rng.uniform(0.2, 2.0, size=25)
    c = 0.07
    model = weighted_fit(U, y, w, c, REG)

    # independent closed form: stack [U, 1], ridge on the slope block only
    D = np.hstack([U, np.ones((25, 1))])
    mask = np.diag([1.0, 1.0, 1.0, 0.0])
    lhs = D.T @ (D * w[:, None]) / 25 + c * mask
    rhs = D.T @ (w * y) / 25
    bf = np.linalg.solve(lhs, rhs)
    np.testing.assert_allclose(model.b, bf[:-1], atol=1e-9)
    assert model.intercept == pytest.approx(bf[-1], abs=1e-9)


def test_weighted_fit_is_a_minimizer():
    """Perturbing the returned coefficients never lowers the criterion."""
    rng = np.random.default_rng(8)
    U = rng.normal(size=(30, 2))
    w = rng.uniform(0.1, 1.0, size=30)
    for loss in (REG, CLS):
        if loss.task == "regression":
            y = U @ [0.5, -1.0] + 0.2 * rng.normal(size=30)
        else:
            y = (U[:, 0] > 0).astype(float)
        model = weighted_fit(U, y, w, 0.05, loss)
        base = _objective(U, y, w, 0.05, model.b, model.intercept, loss.train_loss)
        for _ in range(12):
            db = 1e-3 * rng.normal(size=2)
            d0 = 1e-3 * rng.normal()
            bumped = _objective(
                U, y, w, 0.05, model.b + db, model.intercept + d0, loss.train_loss
            )
            assert bumped >= base - 1e-12


def test_weighted_fit_intercept_not_penalized():
    rng = np.random.default_rng(2)
    U = rng.normal(size=(40, 2))
    y = 3.0 + 0.01 * rng.normal(size=40)
    w = np.ones(40)
    model = weighted_fit(U, y, w, c=1e6, loss=REG)
    # huge ridge flattens the slopes but the intercept still tracks the mean
    assert np.all(np.abs(model.b) < 1e-4)
    assert model.intercept == pytest.approx(float(np.mean(y)), abs=1e-3)


def test_weighted_fit_zero_weight_rows_are_ignored():
    rng = np.random.default_rng(6)
    U = rng.normal(size=(20, 2))
    y = U @ [1.0, 1.0]
    w = np.ones(20)
    w[10:] = 0.0
    y2 = y.copy()
    y2[10:] = 999.0  # garbage on the zero-weight rows
    m2 = weighted_fit(U, y2, w, 0.01, REG)
    # same criterion written over the live rows only: the loss term divides by
    # the full N, so halve the per-row weights instead of the sample count
    m1 = weighted_fit(U[:10], y[:10], np.full(10, 0.5), 0.01, REG)
    np.testing.assert_allclose(m2.b, m1.b, atol=1e-8)
    assert m2.intercept == pytest.approx(m1.intercept, abs=1e-8)


def test_weighted_fit_all_zero_weights_degenerate():
    model = weighted_fit(np.ones((5, 2)), np.ones(5), np.zeros(5), 0.1, REG)
    assert model.degenerate
    np.testing.assert_array_equal(model.b, np.zeros(2))
    assert model.intercept == 0.0


def test_weighted_fit_validation():
    U = np.ones((5, 2))
    y = np.ones(5)
    with pytest.raises(InputError):
        weighted_fit(U, y[:4], np.ones(5), 0.1, REG)
    with pytest.raises(InputError):
        weighted_fit(U, y, np.ones(4), 0.1, REG)
    with pytest.raises(InputError):
        weighted_fit(U, y, -np.ones(5), 0.1, REG)
    with pytest.raises(InputError):
        weighted_fit(U, y, np.ones(5), -0.1, REG)


def test_classification_fit_separates():
    rng = np.random.default_rng(3)
    U = np.vstack([rng.normal(-2, 0.3, size=(15, 1)), rng.normal(2, 0.3, size=(15, 1))])
    y = np.array([0.0] * 15 + [1.0] * 15)
    model = weighted_fit(U, y, np.ones(30), 0.01, CLS)
    z = model.predict_score(U)
    assert np.all((z > 0) == (y > 0))


def test_linear_model_interface():
    m = LinearModel(b=[2.0, -1.0], intercept=0.5, task="regression", c=0.1)
    np.testing.assert_allclose(m.predict_score([[1.0, 1.0]]), [1.5])
    with pytest.raises(InputError):
        m.predict_score(np.ones((3, 3)))
    with pytest.raises(InputError):
        LinearModel(b=[1.0], intercept=0.0, task="ranking", c=0.1)


# ---------------------------------------------------------------------------
# losses


def test_weighted_loss_hand_computed():
    m = LinearModel(b=[1.0], intercept=0.0, task="regression", c=0.0)
    U = np.array([[1.0], [2.0]])
    y = np.array([0.0, 0.0])  # residuals 1, 2 -> squared 1, 4
    w = np.array([3.0, 1.0])
    # (3*1 + 1*4) / 2 = 3.5
    assert weighted_loss(m, U, y, w, REG) == pytest.approx(3.5)


def test_eval_loss_regression_is_mae():
    m = LinearModel(b=[1.0], intercept=0.0, task="regression", c=0.0)
    U = np.array([[1.0], [2.0], [3.0]])
    y = np.array([1.5, 1.5, 3.5])  # absolute errors 0.5, 0.5, 0.5
    assert eval_loss(m, U, y, REG) == pytest.approx(0.5)


def test_eval_loss_classification_is_error_rate():
    m = LinearModel(b=[1.0], intercept=0.0, task="classification", c=0.0)
    U = np.array([[-1.0], [1.0], [2.0], [-2.0]])
    y = np.array([0.0, 1.0, 0.0, 0.0])  # third row misclassified
    assert eval_loss(m, U, y, CLS) == pytest.approx(0.25)


def test_eval_loss_validation():
    m = LinearModel(b=[1.0], intercept=0.0, task="regression", c=0.0)
    with pytest.raises(InputError):
        eval_loss(m, np.ones((2, 1)), np.ones(3), REG)


# ---------------------------------------------------------------------------
# cross-validation plumbing


def test_cv_fold_ids_partition():
    ids = _cv_fold_ids(23, 5, seed=1)
    assert len(ids) == 23
    counts = np.bincount(ids, minlength=5)
    # balanced to within one row
    assert counts.max() - counts.min() <= 1
    np.testing.assert_array_equal(ids, _cv_fold_ids(23, 5, seed=1))
    assert not np.array_equal(ids, _cv_fold_ids(23, 5, seed=2))


def test_cv_fold_ids_validation():
    with pytest.raises(InputError):
        _cv_fold_ids(10, 1, seed=0)
    # folds are capped at n
    ids = _cv_fold_ids(3, 10, seed=0)
    assert sorted(ids) == [0, 1, 2]


def test_select_ridge_prefers_no_shrinkage_on_clean_linear_data():
    rng = np.random.default_rng(5)
    U = rng.normal(size=(60, 2))
    y = U @ [1.0, -1.0] + 0.3
    c = select_ridge(U, y, np.ones(60), (1e-4, 1e-2, 1.0), REG, folds=5, seed=0)
    assert c == 1e-4


def test_select_ridge_deterministic():
    rng = np.random.default_rng(9)
    U = rng.normal(size=(40, 2))
    y = U @ [1.0, 0.5] + rng.normal(size=40)
    grid = (1e-3, 1e-1, 10.0)
    picks = {select_ridge(U, y, np.ones(40), grid, REG, folds=4, seed=7) for _ in range(3)}
    assert len(picks) == 1


# ---------------------------------------------------------------------------
# importance-weighted candidate selection


def _toy_pair(n=80, seed=0):
    rng = np.random.default_rng(seed)
    X_tr = rng.uniform(-1, 1, size=(n, 3))
    X_te = rng.uniform(0, 1, size=(n, 3))
    y = np.abs(X_tr[:, 0]) + 0.05 * rng.normal(size=n)
    hold = rng.uniform(0, 1, size=(10, 3))
    y_hold = np.abs(hold[:, 0])
    return TrainTestPair(X_tr=X_tr, y_tr=y, X_te=X_te, holdout_X=hold, y_te_holdout=y_hold)


def test_iwcv_prefers_informative_direction():
    data = _toy_pair()
    e0 = np.array([[1.0], [0.0], [0.0]])
    e2 = np.array([[0.0], [0.0], [1.0]])
    cands = [
        PipelineCandidate(sigma=0.5, gamma=0.01, c=1e-3, projection=e0, label="signal"),
        PipelineCandidate(sigma=0.5, gamma=0.01, c=1e-3, projection=e2, label="noise"),
    ]
    best = iwcv_select(cands, data, REG, folds=5, seed=0)
    assert best.label == "signal"
    scores = iwcv_scores(cands, data, REG, folds=5, seed=0)
    assert scores[0] < scores[1]


def test_iwcv_scores_infinite_for_vanishing_weights():
    """A bandwidth far too small leaves every validation fold weightless."""
    rng = np.random.default_rng(1)
    X_tr = rng.normal(0.0, 1.0, size=(40, 1))
    X_te = rng.normal(100.0, 1.0, size=(40, 1))  # no overlap at sigma=0.1
    data = TrainTestPair(
        X_tr=X_tr, y_tr=X_tr[:, 0], X_te=X_te, holdout_X=X_te, y_te_holdout=X_te[:, 0]
    )
    bad = PipelineCandidate(sigma=0.1, gamma=0.01, c=1e-3, label="bad")
    scores = iwcv_scores([bad], data, REG, folds=4, seed=0)
    assert np.isinf(scores[0])


def test_iwcv_select_tie_breaks_toward_smaller_penalties():
    data = _toy_pair(seed=3)
    same = dict(sigma=0.6, gamma=0.01, projection=None)
    cands = [
        PipelineCandidate(c=1e-2, lam=0.1, label="heavy", **same),
        PipelineCandidate(c=1e-2, lam=0.0, label="light", **same),
    ]
    scores = iwcv_scores(cands, data, REG, folds=5, seed=0)
    assert scores[0] == scores[1]  # identical pipelines score identically
    best = iwcv_select(cands, data, REG, folds=5, seed=0)
    assert best.label == "light"


def test_iwcv_select_empty_candidates():
    data = _toy_pair(seed=2)
    with pytest.raises(InputError):
        iwcv_select([], data, REG)


def test_pipeline_candidate_projection():
    c = PipelineCandidate(sigma=1.0, gamma=0.1, c=0.1)
    X = np.ones((4, 3))
    assert c.project(X) is X  # identity when no projection is set
    c2 = PipelineCandidate(sigma=1.0, gamma=0.1, c=0.1, projection=np.eye(3)[:, :1])
    assert c2.project(X).shape == (4, 1)
