"""Synthetic covariate-shift benchmarks and analytic Gaussian oracles."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .data import TrainTestPair
from .errors import InputError

#: Dimension of the two built-in benchmark generators.
BENCHMARK_DIM = 12

#: Standard deviation of the label noise (variance 0.01).
LABEL_NOISE_SD = 0.1


def _mixture_columns(rng: np.random.Generator, n: int, m: int, p_negative: float) -> np.ndarray:
    """Columns drawn from p*U(-1,0) + (1-p)*U(0,1), independently per entry."""
    pick_negative = rng.random((n, m)) < p_negative
    negative = rng.uniform(-1.0, 0.0, (n, m))
    positive = rng.uniform(0.0, 1.0, (n, m))
    return np.where(pick_negative, negative, positive)


def _labels(rng: np.random.Generator, X: np.ndarray) -> np.ndarray:
    mean = 0.2 * np.abs(X[:, 0]) + np.abs(X[:, 1])
    return mean + LABEL_NOISE_SD * rng.standard_normal(len(X))


def _generate(n: int, seed: int, couple_second: bool, name: str) -> TrainTestPair:
    if n < 10:
        raise InputError(f"need at least 10 samples per side, got {n}")
    rng = np.random.default_rng(seed)
    X_tr = np.empty((n, BENCHMARK_DIM))
    X_tr[:, :2] = rng.uniform(-1.0, 1.0, (n, 2))
    X_tr[:, 2:] = _mixture_columns(rng, n, BENCHMARK_DIM - 2, 0.9)
    if couple_second:
        same_sign = rng.random(n) < 0.5
        X_tr[:, 1] = np.where(same_sign, X_tr[:, 0], -X_tr[:, 0])
    X_te = np.empty((n, BENCHMARK_DIM))
    X_te[:, :2] = rng.uniform(0.0, 1.0, (n, 2))
    X_te[:, 2:] = _mixture_columns(rng, n, BENCHMARK_DIM - 2, 0.1)
    y_tr = _labels(rng, X_tr)
    y_te = _labels(rng, X_te)
    n_unlabeled = n - n // 3
    return TrainTestPair(
        X_tr=X_tr,
        y_tr=y_tr,
        X_te=X_te[:n_unlabeled],
        holdout_X=X_te[n_unlabeled:],
        y_te_holdout=y_te[n_unlabeled:],
        meta={"generator": name, "seed": seed, "n": n},
    )


def gen_example1(n: int, seed: int = 0) -> TrainTestPair:
    """Twelve independent covariates; only the first two matter for the label.

    Train: X1, X2 ~ U(-1, 1) and X3..X12 ~ 0.9 U(-1, 0) + 0.1 U(0, 1).
    Test:  X1, X2 ~ U(0, 1) and the mixture proportions flip.  Labels are
    0.2|X1| + |X2| plus Gaussian noise with standard deviation 0.1.  The test
    sample splits into two thirds unlabeled covariates and one third labeled
    holdout.
    """
    return _generate(n, seed, couple_second=False, name="example1")


def gen_example2(n: int, seed: int = 0) -> TrainTestPair:
    """Like :func:`gen_example1` but with X2 = +/-X1 on the training side.

    The random sign makes X1 and X2 carry the same predictive information in
    training (|X2| = |X1| there) while staying uncorrelated, so any mix of the
    two directions looks equally good to the training sample alone.
    """
    return _generate(n, seed, couple_second=True, name="example2")


def _check_cov(cov: np.ndarray, name: str) -> np.ndarray:
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise InputError(f"{name} must be square")
    if not np.allclose(cov, cov.T, atol=1e-12):
        raise InputError(f"{name} must be symmetric")
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise InputError(f"{name} must be positive definite") from exc
    return cov


@dataclass(frozen=True)
class GaussianShiftSpec:
    """A Gaussian train law and a Gaussian test law on the same space."""

    train_mean: np.ndarray
    train_cov: np.ndarray
    test_mean: np.ndarray
    test_cov: np.ndarray

    def __post_init__(self):
        tm = np.asarray(self.train_mean, dtype=np.float64).ravel()
        sm = np.asarray(self.test_mean, dtype=np.float64).ravel()
        tc = _check_cov(self.train_cov, "train_cov")
        sc = _check_cov(self.test_cov, "test_cov")
        if not (len(tm) == len(sm) == tc.shape[0] == sc.shape[0]):
            raise InputError("means and covariances must share one dimension")
        object.__setattr__(self, "train_mean", tm)
        object.__setattr__(self, "test_mean", sm)
        object.__setattr__(self, "train_cov", tc)
        object.__setattr__(self, "test_cov", sc)

    @property
    def dim(self) -> int:
        return len(self.train_mean)

    def project(self, A) -> "GaussianShiftSpec":
        """Marginal laws of A' x, valid for any full-column-rank A."""
        A_mat = np.asarray(getattr(A, "A", A), dtype=np.float64)
        if A_mat.ndim == 1:
            A_mat = A_mat[:, None]
        if A_mat.shape[0] != self.dim:
            raise InputError("projection rows must match the Gaussian dimension")
        return GaussianShiftSpec(
            train_mean=A_mat.T @ self.train_mean,
            train_cov=A_mat.T @ self.train_cov @ A_mat,
            test_mean=A_mat.T @ self.test_mean,
            test_cov=A_mat.T @ self.test_cov @ A_mat,
        )

    def sample_train(self, n: int, rng: np.random.Generator) -> np.ndarray:
        chol = np.linalg.cholesky(self.train_cov)
        return self.train_mean + rng.standard_normal((n, self.dim)) @ chol.T


def _gaussian_logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    d = len(mean)
    chol = np.linalg.cholesky(cov)
    sol = solve_triangular(chol, (x - mean).T, lower=True)
    quad = np.sum(sol * sol, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diagonal(chol)))
    return -0.5 * (quad + logdet + d * np.log(2.0 * np.pi))


def analytic_ratio(spec: GaussianShiftSpec, x) -> np.ndarray | float:
    """Exact density ratio p_test(x) / p_train(x) under the Gaussian spec."""
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim <= 1
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr[None, :] if spec.dim > 1 else arr[:, None]
        single = spec.dim > 1
    if arr.shape[1] != spec.dim:
        raise InputError(f"points have dimension {arr.shape[1]}, spec expects {spec.dim}")
    log_ratio = _gaussian_logpdf(arr, spec.test_mean, spec.test_cov) - _gaussian_logpdf(
        arr, spec.train_mean, spec.train_cov
    )
    ratio = np.exp(log_ratio)
    return float(ratio[0]) if single else ratio


@dataclass(frozen=True)
class SecondMomentReport:
    """Monte-Carlo comparison of E[w^2] before and after projecting."""

    full_mean: float
    full_se: float
    projected_mean: float
    projected_se: float
    diff_mean: float
    diff_se: float
    satisfied: bool


def weight_second_moment_check(
    spec: GaussianShiftSpec,
    A,
    n_samples: int = 10000,
    trials: int = 10,
    seed: int = 0,
) -> SecondMomentReport:
    """Check that projecting cannot increase the weight second moment.

    Draws train samples, evaluates the exact density ratio in the full space
    and for the projected marginals at the projected points, and compares the
    Monte-Carlo estimates of E[w^2].  ``satisfied`` holds when the projected
    estimate does not exceed the full one by more than twice the standard
    error of their (paired) difference.
    """
    if n_samples < 2 or trials < 1:
        raise InputError("need n_samples >= 2 and trials >= 1")
    A_mat = np.asarray(getattr(A, "A", A), dtype=np.float64)
    if A_mat.ndim == 1:
        A_mat = A_mat[:, None]
    projected_spec = spec.project(A_mat)
    rng = np.random.default_rng(seed)
    full_sq = []
    proj_sq = []
    for _ in range(trials):
        x = spec.sample_train(n_samples, rng)
        w_full = analytic_ratio(spec, x)
        w_proj = analytic_ratio(projected_spec, x @ A_mat)
        full_sq.append(np.square(w_full))
        proj_sq.append(np.square(w_proj))
    full_sq = np.concatenate(full_sq)
    proj_sq = np.concatenate(proj_sq)
    diff = full_sq - proj_sq
    n_total = len(diff)

    def mean_se(v: np.ndarray) -> tuple[float, float]:
        return float(v.mean()), float(v.std(ddof=1) / np.sqrt(n_total))

    full_mean, full_se = mean_se(full_sq)
    proj_mean, proj_se = mean_se(proj_sq)
    diff_mean, diff_se = mean_se(diff)
    return SecondMomentReport(
        full_mean=full_mean,
        full_se=full_se,
        projected_mean=proj_mean,
        projected_se=proj_se,
        diff_mean=diff_mean,
        diff_se=diff_se,
        satisfied=proj_mean <= full_mean + 2.0 * diff_se,
    )
