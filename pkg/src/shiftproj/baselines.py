"""Reference pipelines the projection search is compared against.

UW fits an unweighted ridge model on the raw covariates.  IW reweights by a
full-dimensional density-ratio fit.  RP(K) and SIR(K) first project to K
dimensions (random orthonormal directions, or sliced inverse regression in
the spirit of Li, 1991) and then run the IW pipeline on the projected data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import TrainTestPair
from .density_ratio import (
    WeightVector,
    default_gamma_grid,
    default_sigma_grid,
    predict_weights,
    ratio_cv,
    ulsif_fit,
)
from .errors import InputError
from .weighted_model import (
    FitResult,
    LossSpec,
    RIDGE_GRID,
    select_ridge,
    weighted_fit,
    weighted_loss,
)

_KINDS = ("UW", "IW", "RP", "SIR")

#: Ridge added to the covariance before whitening in sliced inverse regression.
SIR_WHITEN_RIDGE = 1e-8

#: Default number of response slices for regression targets.
SIR_SLICES = 10


@dataclass(frozen=True)
class BaselineSpec:
    """Which baseline to run; K is required exactly for the projected ones."""

    kind: str
    k: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise InputError(f"unknown baseline kind {self.kind!r}")
        needs_k = self.kind in ("RP", "SIR")
        if needs_k and (self.k is None or self.k < 1):
            raise InputError(f"{self.kind} requires a positive projection dimension")
        if not needs_k and self.k is not None:
            raise InputError(f"{self.kind} does not take a projection dimension")


def _qr_orthonormal(mat: np.ndarray) -> np.ndarray:
    q, r = np.linalg.qr(mat)
    return q * np.where(np.diagonal(r) < 0, -1.0, 1.0)


def sir_directions(X, y, k: int, n_slices: int = SIR_SLICES, *, with_eigenvalues: bool = False):
    """Top-K directions of sliced inverse regression.

    Whitens the covariates (covariance plus a small ridge), slices the
    response into near-equal quantile bins, and eigendecomposes the
    between-slice covariance of the slice means.  The directions are mapped
    back through the whitening and re-orthonormalized, giving a D x K matrix
    with orthonormal columns.

    With ``with_eigenvalues=True`` also returns the top-K eigenvalues, which
    measure how strongly the sliced means vary (near zero when y is
    independent of X).
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or len(X) < 2:
        raise InputError("X must be 2-d with at least two rows")
    y = np.asarray(y, dtype=np.float64).ravel()
    if len(y) != len(X):
        raise InputError("y length does not match X")
    d = X.shape[1]
    if not 1 <= k <= d:
        raise InputError(f"k must lie in [1, {d}], got {k}")
    if n_slices < 2:
        raise InputError("n_slices must be at least 2")
    if np.ptp(y) == 0:
        raise InputError("y is constant; slicing is undefined")

    n = len(X)
    mu = X.mean(axis=0)
    xc = X - mu
    cov = xc.T @ xc / n + SIR_WHITEN_RIDGE * np.eye(d)
    evals, evecs = np.linalg.eigh(cov)
    whiten = evecs @ np.diag(evals**-0.5) @ evecs.T
    z = xc @ whiten

    order = np.argsort(y, kind="stable")
    between = np.zeros((d, d))
    for rows in np.array_split(order, min(n_slices, n)):
        if rows.size == 0:
            continue
        m = z[rows].mean(axis=0)
        between += (rows.size / n) * np.outer(m, m)
    lams, vecs = np.linalg.eigh(between)
    top = np.argsort(lams)[::-1][:k]
    directions = _qr_orthonormal(whiten @ vecs[:, top])
    if with_eigenvalues:
        return directions, lams[top]
    return directions


def _iw_fit(
    U_tr: np.ndarray,
    y_tr: np.ndarray,
    U_te: np.ndarray,
    loss: LossSpec,
    *,
    c_grid,
    folds: int,
    n_centers: int | None,
    seed: int,
) -> tuple:
    """Shared reweighted pipeline: ratio CV, weight prediction, ridge CV, fit."""
    sigma, gamma = ratio_cv(
        U_tr,
        U_te,
        default_sigma_grid(U_tr, U_te),
        default_gamma_grid(),
        folds=folds,
        n_centers=n_centers,
        seed=seed,
    )
    ratio = ulsif_fit(U_tr, U_te, gamma, sigma, n_centers, seed=seed)
    weights = predict_weights(ratio, U_tr)
    cv_weights = weights.w if np.any(weights.w > 0) else np.ones(len(y_tr))
    c = select_ridge(U_tr, y_tr, cv_weights, c_grid, loss, folds, seed=seed)
    model = weighted_fit(U_tr, y_tr, weights, c, loss)
    hyper = {"sigma": sigma, "gamma": gamma, "c": c}
    return model, weights, hyper


def run_baseline(
    spec: BaselineSpec,
    data: TrainTestPair,
    loss: LossSpec | None = None,
    *,
    c_grid=RIDGE_GRID,
    folds: int = 5,
    n_centers: int | None = None,
    n_slices: int | None = None,
) -> FitResult:
    """Fit one baseline pipeline and return its model, weights, and ESS.

    UW never touches the test covariates.  For classification, SIR slices by
    class rather than by response quantiles.
    """
    loss = loss or LossSpec.regression()
    if spec.kind == "UW":
        weights = WeightVector.from_weights(np.ones(data.n_train))
        c = select_ridge(data.X_tr, data.y_tr, weights, c_grid, loss, folds, seed=spec.seed)
        model = weighted_fit(data.X_tr, data.y_tr, weights, c, loss)
        objective = weighted_loss(model, data.X_tr, data.y_tr, weights, loss)
        return FitResult(
            model=model,
            weights=weights,
            projection=None,
            objective_value=objective,
            hyper={"c": c},
        )

    if spec.kind == "IW":
        projection = None
        U_tr, U_te = data.X_tr, data.X_te
    elif spec.kind == "RP":
        rng = np.random.default_rng(spec.seed)
        projection = _qr_orthonormal(rng.standard_normal((data.dim, spec.k)))
        U_tr, U_te = data.X_tr @ projection, data.X_te @ projection
    else:  # SIR
        if n_slices is None:
            n_slices = len(np.unique(data.y_tr)) if loss.task == "classification" else SIR_SLICES
        projection = sir_directions(data.X_tr, data.y_tr, spec.k, n_slices)
        U_tr, U_te = data.X_tr @ projection, data.X_te @ projection

    model, weights, hyper = _iw_fit(
        U_tr, data.y_tr, U_te, loss, c_grid=c_grid, folds=folds, n_centers=n_centers, seed=spec.seed
    )
    objective = weighted_loss(model, U_tr, data.y_tr, weights, loss)
    return FitResult(
        model=model,
        weights=weights,
        projection=projection,
        objective_value=objective,
        hyper=hyper,
    )
