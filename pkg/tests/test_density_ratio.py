"""Tests for the kernel density-ratio estimator."""

import numpy as np
import pytest

from shiftproj import (
    InputError,
    effective_sample_size,
    kernel_features,
    predict_weights,
    ratio_cv,
    ulsif_fit,
)
from shiftproj.density_ratio import (
    GAMMA_GRID,
    SIGMA_GRID_FACTORS,
    KernelBasis,
    RatioModel,
    WeightVector,
    default_sigma_grid,
    median_pairwise_distance,
    select_centers,
    solve_ratio_system,
)


def _gaussian_features_oracle(X, centers, sigma):
    """Straightforward double loop: exp(-||x - c||^2 / (2 sigma^2))."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    out = np.empty((len(X), len(centers)))
    for i, x in enumerate(X):
        for j, c in enumerate(centers):
            out[i, j] = np.exp(-np.sum((x - c) ** 2) / (2.0 * sigma**2))
    return out


# ---------------------------------------------------------------------------
# effective sample size


def test_ess_uniform_weights_equal_sample_size():
    assert effective_sample_size(np.ones(17)) == pytest.approx(17.0)
    # scaling the weights does not change the ESS
    assert effective_sample_size(3.5 * np.ones(17)) == pytest.approx(17.0)


def test_ess_point_mass_is_one():
    w = np.zeros(9)
    w[4] = 2.3
    assert effective_sample_size(w) == pytest.approx(1.0)


def test_ess_hand_computed():
    # (1+2+3)^2 / (1+4+9) = 36/14
    assert effective_sample_size([1.0, 2.0, 3.0]) == pytest.approx(36.0 / 14.0)


def test_ess_all_zero_sentinel():
    assert effective_sample_size(np.zeros(5)) == 0.0


def test_ess_rejects_bad_input():
    with pytest.raises(InputError):
        effective_sample_size([])
    with pytest.raises(InputError):
        effective_sample_size([1.0, -0.5])
    with pytest.raises(InputError):
        effective_sample_size([1.0, np.nan])


def test_weight_vector_carries_ess():
    wv = WeightVector.from_weights([1.0, 2.0, 3.0])
    assert wv.ess == pytest.approx(36.0 / 14.0)
    assert len(wv) == 3
    with pytest.raises(InputError):
        WeightVector.from_weights([-1.0, 1.0])


# ---------------------------------------------------------------------------
# kernel features


def test_kernel_features_matches_naive_loop():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(7, 2))
    centers = rng.normal(size=(4, 2))
    basis = KernelBasis(centers=centers, sigma=0.9)
    expected = _gaussian_features_oracle(X, centers, 0.9)
    np.testing.assert_allclose(kernel_features(X, basis), expected, atol=1e-14)


def test_kernel_features_single_point_shape():
    basis = KernelBasis(centers=np.zeros((3, 2)), sigma=1.0)
    phi = kernel_features(np.array([0.5, -0.5]), basis)
    assert phi.shape == (3,)
    # same values as the batch form
    np.testing.assert_allclose(
        phi, kernel_features(np.array([[0.5, -0.5]]), basis)[0]
    )


def test_kernel_features_at_center_is_one():
    centers = np.array([[1.0, 2.0]])
    basis = KernelBasis(centers=centers, sigma=0.3)
    assert kernel_features(centers, basis)[0, 0] == pytest.approx(1.0)


def test_kernel_features_dimension_mismatch():
    basis = KernelBasis(centers=np.zeros((2, 3)), sigma=1.0)
    with pytest.raises(InputError):
        kernel_features(np.zeros((4, 2)), basis)


def test_kernel_basis_validation():
    with pytest.raises(InputError):
        KernelBasis(centers=np.zeros((2, 2)), sigma=0.0)
    with pytest.raises(InputError):
        KernelBasis(centers=np.zeros((2, 2)), sigma=-1.0)


# ---------------------------------------------------------------------------
# the regularized linear system


def test_solve_ratio_system_residual_tiny():
    rng = np.random.default_rng(11)
    B = rng.normal(size=(6, 6))
    H = B @ B.T / 6.0
    h = rng.normal(size=6)
    alpha, eps, _ = solve_ratio_system(H, h, gamma=0.05)
    assert eps == pytest.approx(1e-9 * np.trace(H) / 6.0)
    resid = (H + eps * np.eye(6)) @ alpha - (h - 0.05)
    assert np.linalg.norm(resid) < 1e-10


def test_solve_ratio_system_shape_check():
    with pytest.raises(InputError):
        solve_ratio_system(np.eye(3), np.ones(2), 0.0)


def test_ulsif_fit_matches_direct_solve():
    """The fitted coefficients solve the documented quadratic program."""
    rng = np.random.default_rng(7)
    X_tr = rng.normal(size=(12, 1))
    X_te = rng.normal(loc=0.4, size=(9, 1))
    sigma, gamma = 0.7, 0.05
    model = ulsif_fit(X_tr, X_te, gamma, sigma, n_centers=4, seed=0)

    # independent reconstruction from first principles
    centers = model.basis.centers
    phi_tr = _gaussian_features_oracle(X_tr, centers, sigma)
    phi_te = _gaussian_features_oracle(X_te, centers, sigma)
    H = phi_tr.T @ phi_tr / len(X_tr)
    h = phi_te.mean(axis=0)
    eps = 1e-9 * np.trace(H) / len(centers)
    # the defining stationarity condition, checked at the returned alpha
    resid = (H + eps * np.eye(len(centers))) @ model.alpha - (h - gamma)
    assert np.linalg.norm(resid) < 1e-12
    alpha = np.linalg.solve(H + eps * np.eye(len(centers)), h - gamma)
    np.testing.assert_allclose(model.alpha, alpha, rtol=1e-6, atol=1e-9)

    # predictions are the clipped kernel expansion
    w = predict_weights(model, X_tr)
    np.testing.assert_allclose(w.w, np.maximum(phi_tr @ model.alpha, 0.0), atol=1e-12)


def test_ulsif_weights_nonnegative_even_with_heavy_penalty():
    rng = np.random.default_rng(5)
    X_tr = rng.normal(size=(40, 2))
    X_te = rng.normal(loc=1.0, size=(30, 2))
    # a large linear penalty drives raw scores negative; clipping must hold
    model = ulsif_fit(X_tr, X_te, gamma=5.0, sigma=1.0)
    w = predict_weights(model, X_tr)
    assert np.all(w.w >= 0.0)


def test_ulsif_fit_validation():
    X_tr = np.zeros((5, 2))
    X_te = np.zeros((5, 2))
    with pytest.raises(InputError):
        ulsif_fit(X_tr, X_te, gamma=0.1, sigma=0.0)
    with pytest.raises(InputError):
        ulsif_fit(X_tr, X_te, gamma=-0.1, sigma=1.0)
    with pytest.raises(InputError):
        ulsif_fit(X_tr, np.zeros((5, 3)), gamma=0.1, sigma=1.0)
    with pytest.raises(InputError):
        ulsif_fit(X_tr, X_te, gamma=0.1, sigma=1.0, center_indices=np.array([7]))
    with pytest.raises(InputError):
        ulsif_fit(X_tr, X_te, gamma=0.1, sigma=1.0, n_centers=6)


def test_ulsif_recovers_gaussian_ratio_roughly():
    """On a 1-d Gaussian shift the estimate should track the true ratio."""
    rng = np.random.default_rng(0)
    n = 500
    X_tr = rng.normal(0.0, 1.0, size=(n, 1))
    X_te = rng.normal(0.5, 0.8, size=(n, 1))
    sigma, gamma = ratio_cv(X_tr, X_te, default_sigma_grid(X_tr, X_te), GAMMA_GRID)
    model = ulsif_fit(X_tr, X_te, gamma, sigma, seed=0)
    w = predict_weights(model, X_tr).w

    def true_ratio(x):
        num = np.exp(-0.5 * ((x - 0.5) / 0.8) ** 2) / 0.8
        den = np.exp(-0.5 * x**2)
        return (num / den).ravel()

    mse = float(np.mean((w - true_ratio(X_tr)) ** 2))
    assert mse < 0.05


def test_ratio_model_validation():
    basis = KernelBasis(centers=np.zeros((3, 1)), sigma=1.0)
    with pytest.raises(InputError):
        RatioModel(basis=basis, alpha=np.ones(2), gamma=0.1)
    with pytest.raises(InputError):
        RatioModel(basis=basis, alpha=np.ones(3), gamma=-0.1)


# ---------------------------------------------------------------------------
# centers, distance scale, cross-validation


def test_select_centers_deterministic_subset():
    pts = np.arange(20.0)[:, None]
    idx1 = select_centers(pts, 8, seed=4)
    idx2 = select_centers(pts, 8, seed=4)
    np.testing.assert_array_equal(idx1, idx2)
    assert len(np.unique(idx1)) == 8
    assert idx1.min() >= 0 and idx1.max() < 20


def test_select_centers_range_errors():
    pts = np.arange(5.0)[:, None]
    with pytest.raises(InputError):
        select_centers(pts, 0)
    with pytest.raises(InputError):
        select_centers(pts, 6)


def test_median_pairwise_distance_hand_case():
    pts = np.array([[0.0], [1.0], [3.0]])  # distances 1, 2, 3
    assert median_pairwise_distance(pts) == pytest.approx(2.0)


def test_median_pairwise_distance_degenerate_fallback():
    pts = np.ones((4, 2))
    assert median_pairwise_distance(pts) == 1.0
    assert median_pairwise_distance(np.array([[1.0, 2.0]])) == 1.0


def test_default_sigma_grid_scales_with_median():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(30, 2))
    b = rng.normal(size=(20, 2))
    med = median_pairwise_distance(np.vstack([a, b]))
    grid = default_sigma_grid(a, b)
    np.testing.assert_allclose(grid, [f * med for f in SIGMA_GRID_FACTORS])


def test_ratio_cv_returns_grid_members_deterministically():
    rng = np.random.default_rng(1)
    X_tr = rng.normal(size=(60, 1))
    X_te = rng.normal(loc=0.3, size=(50, 1))
    sgrid = default_sigma_grid(X_tr, X_te)
    pick1 = ratio_cv(X_tr, X_te, sgrid, GAMMA_GRID, seed=3)
    pick2 = ratio_cv(X_tr, X_te, sgrid, GAMMA_GRID, seed=3)
    assert pick1 == pick2
    assert pick1[0] in sgrid
    assert pick1[1] in GAMMA_GRID


def test_ratio_cv_validation():
    X = np.zeros((10, 1))
    with pytest.raises(InputError):
        ratio_cv(X, X, (), (0.1,))
    with pytest.raises(InputError):
        ratio_cv(X, X, (1.0,), (-0.1,))
    with pytest.raises(InputError):
        ratio_cv(X, X, (0.0,), (0.1,))
    with pytest.raises(InputError):
        ratio_cv(X, X, (1.0,), (0.1,), folds=1)
    with pytest.raises(InputError):
        ratio_cv(np.zeros((1, 1)), X, (1.0,), (0.1,))
