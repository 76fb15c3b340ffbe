"""Importance-weighted linear models: fitting, loss evaluation, weighted CV."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import expit

from .data import TrainTestPair
from .density_ratio import WeightVector, predict_weights, ulsif_fit
from .errors import InputError, NumericalError

logger = logging.getLogger(__name__)

#: Stationarity tolerance on the gradient of the penalized training objective.
GRAD_TOL = 1e-8

#: Default grid for the ridge penalty on model coefficients.
RIDGE_GRID = (1e-4, 1e-3, 1e-2, 1e-1, 1.0)

_TRAIN_LOSSES = ("squared", "logistic")
_EVAL_LOSSES = ("absolute_error", "zero_one")
_PAIRING = {"squared": "absolute_error", "logistic": "zero_one"}


@dataclass(frozen=True)
class LossSpec:
    """Training loss / evaluation loss pair.

    Squared training loss pairs with mean absolute evaluation error
    (regression); logistic training loss pairs with 0-1 evaluation error
    (classification, scores thresholded at zero).
    """

    train_loss: str
    eval_loss: str

    def __post_init__(self):
        if self.train_loss not in _TRAIN_LOSSES:
            raise InputError(f"unknown train loss {self.train_loss!r}")
        if self.eval_loss not in _EVAL_LOSSES:
            raise InputError(f"unknown eval loss {self.eval_loss!r}")
        if _PAIRING[self.train_loss] != self.eval_loss:
            raise InputError(
                f"train loss {self.train_loss!r} pairs with {_PAIRING[self.train_loss]!r}"
            )

    @classmethod
    def regression(cls) -> "LossSpec":
        return cls(train_loss="squared", eval_loss="absolute_error")

    @classmethod
    def classification(cls) -> "LossSpec":
        return cls(train_loss="logistic", eval_loss="zero_one")

    @property
    def task(self) -> str:
        return "regression" if self.train_loss == "squared" else "classification"


def signed_labels(y) -> np.ndarray:
    """Map labels in {0, 1} or {-1, +1} to +/-1."""
    y = np.asarray(y, dtype=np.float64)
    return np.where(y > 0, 1.0, -1.0)


def loss_terms(z, y, kind: str):
    """Pointwise loss values and first/second derivatives in the score z.

    For ``squared``: (z - y)^2.  For ``logistic``: log(1 + exp(-t z)) with
    t = +/-1 labels; the curvature expit(z) expit(-z) does not depend on y.
    """
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if kind == "squared":
        r = z - y
        return r * r, 2.0 * r, np.full_like(z, 2.0)
    if kind == "logistic":
        t = signed_labels(y)
        margin = t * z
        values = np.logaddexp(0.0, -margin)
        d1 = -t * expit(-margin)
        d2 = expit(z) * expit(-z)
        return values, d1, d2
    raise InputError(f"unknown train loss {kind!r}")


@dataclass(frozen=True)
class LinearModel:
    """Linear predictor score(u) = b @ u + intercept.

    The ridge penalty applies to ``b`` only, never to the intercept.  The
    ``degenerate`` flag marks fits returned for all-zero weight vectors.
    """

    b: np.ndarray
    intercept: float
    task: str
    c: float
    degenerate: bool = False

    def __post_init__(self):
        b = np.asarray(self.b, dtype=np.float64).ravel()
        object.__setattr__(self, "b", b)
        if self.task not in ("regression", "classification"):
            raise InputError(f"unknown task {self.task!r}")

    def predict_score(self, U) -> np.ndarray:
        U = np.asarray(U, dtype=np.float64)
        if U.ndim == 1:
            U = U[:, None]
        if U.shape[1] != len(self.b):
            raise InputError(
                f"feature dimension {U.shape[1]} does not match model dimension {len(self.b)}"
            )
        return U @ self.b + self.intercept


def _design(U: np.ndarray) -> np.ndarray:
    return np.hstack([U, np.ones((len(U), 1))])


def _coerce_weights(w, n: int) -> np.ndarray:
    wv = w.w if isinstance(w, WeightVector) else np.asarray(w, dtype=np.float64).ravel()
    if len(wv) != n:
        raise InputError(f"weight length {len(wv)} does not match sample count {n}")
    if not np.all(np.isfinite(wv)) or np.any(wv < 0):
        raise InputError("weights must be finite and nonnegative")
    return wv


def _penalized_objective(design, y, w, c, mask, bf, kind):
    z = design @ bf
    values, d1, _ = loss_terms(z, y, kind)
    n = len(y)
    f = float(w @ values) / n + c * float(bf @ (mask * bf))
    grad = design.T @ (w * d1) / n + 2.0 * c * mask * bf
    return f, grad


def _solve_spd(mat: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        factor = cho_factor(mat, lower=True)
        sol = cho_solve(factor, rhs)
        # one refinement sweep; cheap at these sizes and tightens stationarity
        sol = sol + cho_solve(factor, rhs - mat @ sol)
        return sol
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(mat, rhs, rcond=None)[0]


def weighted_fit(U, y, w, c: float, loss: LossSpec) -> LinearModel:
    """Minimize (1/N) sum w_i l(score(u_i), y_i) + c ||b||^2 over (b, intercept).

    Squared loss solves the normal equations in closed form; logistic loss
    runs damped Newton.  Both are verified to a gradient norm of 1e-8.  An
    intercept column is appended internally and excluded from the ridge.
    All-zero weights return the zero model flagged degenerate.
    """
    U = np.asarray(U, dtype=np.float64)
    if U.ndim == 1:
        U = U[:, None]
    y = np.asarray(y, dtype=np.float64).ravel()
    if len(U) != len(y) or len(y) == 0:
        raise InputError("U and y must be nonempty with matching lengths")
    wv = _coerce_weights(w, len(y))
    if not np.isfinite(c) or c < 0:
        raise InputError(f"ridge penalty c must be nonnegative, got {c}")
    task = loss.task

    if not np.any(wv > 0):
        logger.warning("all weights are zero; returning degenerate zero fit")
        return LinearModel(
            b=np.zeros(U.shape[1]), intercept=0.0, task=task, c=float(c), degenerate=True
        )

    design = _design(U)
    n, p = design.shape
    mask = np.ones(p)
    mask[-1] = 0.0

    # Drive the inner solve far below the 1e-8 contract: downstream
    # hypergradients difference the fitted objective, so leftover
    # stationarity error shows up as finite-difference noise.
    target = GRAD_TOL * 1e-4

    if loss.train_loss == "squared":
        mat = design.T @ (design * wv[:, None]) / n + c * np.diag(mask)
        rhs = design.T @ (wv * y) / n
        bf = _solve_spd(mat, rhs)
        prev = np.inf
        for _ in range(30):
            grad = 2.0 * (mat @ bf - rhs)
            gn = float(np.linalg.norm(grad))
            if gn <= target or gn >= prev:  # converged or stalled at roundoff
                break
            prev = gn
            bf = bf + _solve_spd(mat, rhs - mat @ bf)
        _, grad = _penalized_objective(design, y, wv, c, mask, bf, "squared")
    else:
        bf = np.zeros(p)
        f, grad = _penalized_objective(design, y, wv, c, mask, bf, "logistic")
        for _ in range(100):
            if float(np.linalg.norm(grad)) <= target:
                break
            z = design @ bf
            _, _, d2 = loss_terms(z, y, "logistic")
            hess = design.T @ (design * (wv * d2)[:, None]) / n + 2.0 * c * np.diag(mask)
            try:
                direction = -_solve_spd(hess, grad)
            except np.linalg.LinAlgError:
                hess = hess + (1e-12 + 1e-8 * np.trace(hess) / p) * np.eye(p)
                direction = -_solve_spd(hess, grad)
            slope = float(grad @ direction)
            if slope >= 0:
                direction = -grad
                slope = -float(grad @ grad)
            step = 1.0
            for _ in range(60):
                cand = bf + step * direction
                f_cand, g_cand = _penalized_objective(design, y, wv, c, mask, cand, "logistic")
                if f_cand <= f + 1e-4 * step * slope:
                    bf, f, grad = cand, f_cand, g_cand
                    break
                step *= 0.5
            else:
                break

    gnorm = float(np.linalg.norm(grad))
    if gnorm > GRAD_TOL:
        raise NumericalError(
            f"{loss.train_loss} fit did not reach stationarity (|grad| = {gnorm:.3e})"
        )
    return LinearModel(b=bf[:-1], intercept=float(bf[-1]), task=task, c=float(c))


def weighted_loss(model: LinearModel, U, y, w, loss: LossSpec) -> float:
    """Weighted empirical training loss (1/N) sum w_i l(score(u_i), y_i)."""
    U = np.asarray(U, dtype=np.float64)
    if U.ndim == 1:
        U = U[:, None]
    y = np.asarray(y, dtype=np.float64).ravel()
    wv = _coerce_weights(w, len(y))
    z = model.predict_score(U)
    values, _, _ = loss_terms(z, y, loss.train_loss)
    return float(wv @ values) / len(y)


def eval_loss(model: LinearModel, U_holdout, y_holdout, loss: LossSpec) -> float:
    """Unweighted holdout loss: mean absolute error or 0-1 error."""
    U = np.asarray(U_holdout, dtype=np.float64)
    if U.ndim == 1:
        U = U[:, None]
    y = np.asarray(y_holdout, dtype=np.float64).ravel()
    if len(U) != len(y) or len(y) == 0:
        raise InputError("holdout must be nonempty with matching lengths")
    z = model.predict_score(U)
    if loss.eval_loss == "absolute_error":
        return float(np.mean(np.abs(z - y)))
    pred = np.where(z > 0, 1.0, -1.0)
    return float(np.mean(pred != signed_labels(y)))


@dataclass(frozen=True)
class FitResult:
    """A fitted weighted pipeline: model, weights, optional projection, and provenance."""

    model: LinearModel
    weights: WeightVector
    projection: np.ndarray | None
    objective_value: float
    hyper: dict = field(default_factory=dict)

    def predict_score(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        U = X if self.projection is None else X @ self.projection
        return self.model.predict_score(U)

    def holdout_loss(self, X_holdout, y_holdout, loss: LossSpec) -> float:
        X = np.asarray(X_holdout, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        U = X if self.projection is None else X @ self.projection
        return eval_loss(self.model, U, y_holdout, loss)


@dataclass(frozen=True)
class PipelineCandidate:
    """One configuration of the weighted pipeline offered to cross-validation."""

    sigma: float
    gamma: float
    c: float
    lam: float = 0.0
    projection: np.ndarray | None = None
    label: str = ""

    def project(self, X: np.ndarray) -> np.ndarray:
        return X if self.projection is None else X @ self.projection


def _cv_fold_ids(n: int, folds: int, seed: int) -> np.ndarray:
    if folds < 2:
        raise InputError("folds must be at least 2")
    folds = min(folds, n)
    ids = np.empty(n, dtype=np.intp)
    rng = np.random.default_rng(seed)
    ids[rng.permutation(n)] = np.arange(n) % folds
    return ids


def _weighted_cv_score(
    U, y, wv, c, loss, fold_ids, strict: bool = False, score: str = "train"
) -> float:
    """Mean over folds of the weighted held-out loss.

    With ``score="eval"`` the held-out rows are scored with the evaluation
    loss (absolute or 0-1) instead of the smooth training loss; fits always
    use the training loss.  With ``strict`` a fold whose in-fold or held-out
    weights are all zero disqualifies the whole score (returns inf): a ratio
    model that puts no mass on part of the training sample would otherwise be
    rewarded, because the zero weights also wipe out the held-out losses.
    """
    scores = []
    for k in range(int(fold_ids.max()) + 1):
        hold = fold_ids == k
        w_in = wv[~hold]
        if not np.any(w_in > 0) or (strict and not np.any(wv[hold] > 0)):
            if strict:
                return float("inf")
            logger.warning("fold %d has all-zero weights; falling back to unweighted fit", k)
            w_in = np.ones_like(w_in)
        model = weighted_fit(U[~hold], y[~hold], w_in, c, loss)
        if score == "eval":
            z = model.predict_score(U[hold])
            if loss.eval_loss == "absolute_error":
                terms = np.abs(z - y[hold])
            else:
                terms = (np.where(z > 0, 1.0, -1.0) != signed_labels(y[hold])).astype(float)
            scores.append(float(wv[hold] @ terms) / len(terms))
        else:
            scores.append(weighted_loss(model, U[hold], y[hold], wv[hold], loss))
    return float(np.mean(scores))


def select_ridge(
    U,
    y,
    w,
    c_grid=RIDGE_GRID,
    loss: LossSpec | None = None,
    folds: int = 5,
    seed: int = 0,
) -> float:
    """Choose the ridge penalty by weighted K-fold CV (ties go to the smaller c)."""
    U = np.asarray(U, dtype=np.float64)
    if U.ndim == 1:
        U = U[:, None]
    y = np.asarray(y, dtype=np.float64).ravel()
    wv = _coerce_weights(w, len(y))
    loss = loss or LossSpec.regression()
    c_grid = tuple(float(c) for c in np.atleast_1d(c_grid))
    if len(c_grid) == 0:
        raise InputError("c_grid must be nonempty")
    fold_ids = _cv_fold_ids(len(y), folds, seed)
    scores = [_weighted_cv_score(U, y, wv, c, loss, fold_ids) for c in c_grid]
    order = sorted(range(len(c_grid)), key=lambda i: (scores[i], c_grid[i]))
    return c_grid[order[0]]


def iwcv_select(
    candidates,
    data: TrainTestPair,
    loss: LossSpec | None = None,
    folds: int = 5,
    *,
    seed: int = 0,
    n_centers: int | None = None,
) -> PipelineCandidate:
    """Importance-weighted cross-validation over pipeline candidates.

    Every candidate fits its own ratio model on the full (projected) samples;
    folds split only the training rows.  The fold score is the mean of
    ``w_i * l(score_i, y_i)`` over held-out training rows, fitting on the
    complement with the candidate's weights.  Ties break toward the smaller
    ``lam``, then the smaller ``c``, then input order.
    """
    candidates = list(candidates)
    scores = iwcv_scores(candidates, data, loss, folds, seed=seed, n_centers=n_centers)
    order = sorted(
        range(len(candidates)),
        key=lambda i: (scores[i], candidates[i].lam, candidates[i].c, i),
    )
    return candidates[order[0]]


def iwcv_scores(
    candidates,
    data: TrainTestPair,
    loss: LossSpec | None = None,
    folds: int = 5,
    *,
    seed: int = 0,
    n_centers: int | None = None,
) -> list[float]:
    """Per-candidate scores from the same procedure as :func:`iwcv_select`.

    Held-out rows are scored with the evaluation loss, so selection targets
    the metric the model is judged by rather than the smooth surrogate it is
    fit with.  A candidate whose refit weights vanish on an entire fold
    (either side) scores inf: its importance model is vacuous there, and the
    zero weights would otherwise hide arbitrarily bad held-out predictions.
    """
    candidates = list(candidates)
    if len(candidates) == 0:
        raise InputError("candidates must be nonempty")
    loss = loss or LossSpec.regression()
    fold_ids = _cv_fold_ids(data.n_train, folds, seed)
    out = []
    for cand in candidates:
        U_tr = cand.project(data.X_tr)
        U_te = cand.project(data.X_te)
        ratio = ulsif_fit(U_tr, U_te, cand.gamma, cand.sigma, n_centers, seed=seed)
        wv = predict_weights(ratio, U_tr).w
        out.append(
            _weighted_cv_score(
                U_tr, data.y_tr, wv, cand.c, loss, fold_ids, strict=True, score="eval"
            )
        )
    return out
