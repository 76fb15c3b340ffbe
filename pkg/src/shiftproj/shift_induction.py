"""Turn one i.i.d. labeled dataset into a covariate-shifted train/test split.

A predictive direction is found by scoring random unit vectors with a
Nadaraya-Watson fit of the response on the projected values; the test set is
then built by accepting held-out rows with probability proportional to a
Gaussian density placed high along that direction.  A second entry point
builds the split from a binary subgroup column instead, treating the subgroup
as the test population.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .data import TrainTestPair
from .errors import InputError

#: Minimum usable number of accepted test rows.
MIN_TEST_ROWS = 10


@dataclass(frozen=True)
class ShiftSpec:
    """Parameters of the acceptance-sampling shift.

    ``alpha`` places the acceptance peak between the smallest (0) and largest
    (1) projected value; ``c`` scales the acceptance variance relative to the
    spread of the projected values (small c means a sharp shift).
    """

    n_candidate_vectors: int = 100
    alpha: float = 0.8
    c: float = 0.1
    train_fraction: float = 0.5
    seed: int = 0
    bandwidth_rule: str = "silverman"

    def __post_init__(self):
        if self.n_candidate_vectors < 1:
            raise InputError("n_candidate_vectors must be at least 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise InputError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.c <= 0:
            raise InputError(f"c must be positive, got {self.c}")
        if not 0.0 < self.train_fraction < 1.0:
            raise InputError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        if self.bandwidth_rule != "silverman":
            raise InputError(f"unknown bandwidth rule {self.bandwidth_rule!r}")


def silverman_bandwidth(values: np.ndarray) -> float:
    """Silverman's rule of thumb, guarded against degenerate spreads."""
    values = np.asarray(values, dtype=np.float64).ravel()
    n = len(values)
    sd = float(values.std())
    iqr = float(np.subtract(*np.percentile(values, [75, 25])))
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    if spread <= 0:
        spread = max(sd, 1e-3)
    return max(0.9 * spread * n ** (-0.2), 1e-12)


def nadaraya_watson_error(t, y, bandwidth: float | None = None, block: int = 512) -> float:
    """In-sample squared error of a Gaussian-kernel regression of y on t."""
    t = np.asarray(t, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if len(t) != len(y) or len(t) == 0:
        raise InputError("t and y must be nonempty with matching lengths")
    bw = silverman_bandwidth(t) if bandwidth is None else float(bandwidth)
    if bw <= 0:
        raise InputError("bandwidth must be positive")
    err = 0.0
    col = t[:, None]
    for start in range(0, len(t), block):
        rows = t[start : start + block, None]
        k = np.exp(-cdist(rows, col, metric="sqeuclidean") / (2.0 * bw * bw))
        pred = (k @ y) / k.sum(axis=1)
        err += float(np.sum((pred - y[start : start + block]) ** 2))
    return err / len(t)


def pick_predictive_vector(X, y, spec: ShiftSpec, candidates=None) -> np.ndarray:
    """Choose the unit direction along which y is best predicted.

    Random candidates are drawn as Gaussian directions in standardized
    covariates (then mapped back to the raw scale), so coordinates with large
    variance do not dominate.  Each candidate is scored by the in-sample
    Nadaraya-Watson error of y on the projected values with a Silverman
    bandwidth; the minimizer is returned as a unit vector in the raw space.
    Pass ``candidates`` (rows = raw-space vectors) to override the random
    draw.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise InputError("X must be 2-d")
    y = np.asarray(y, dtype=np.float64).ravel()
    n, d = X.shape
    if len(y) != n:
        raise InputError("y length does not match X")
    if n < 20:
        raise InputError(f"need at least 20 rows to pick a direction, got {n}")
    if candidates is None:
        rng = np.random.default_rng(spec.seed)
        scale = X.std(axis=0)
        scale[scale == 0] = 1.0
        candidates = rng.standard_normal((spec.n_candidate_vectors, d)) / scale
    else:
        candidates = np.atleast_2d(np.asarray(candidates, dtype=np.float64))
        if candidates.shape[1] != d:
            raise InputError("candidate vectors must match the covariate dimension")
    norms = np.linalg.norm(candidates, axis=1)
    if np.any(norms == 0):
        raise InputError("candidate vectors must be nonzero")
    candidates = candidates / norms[:, None]
    errors = [nadaraya_watson_error(X @ v, y) for v in candidates]
    return candidates[int(np.argmin(errors))]


def acceptance_probabilities(t_remainder, t_all, spec: ShiftSpec) -> np.ndarray:
    """Acceptance probabilities for the post-training rows.

    A Gaussian density with mean ``t0 + alpha (t1 - t0)`` (t0, t1 the extreme
    projected values over the whole dataset) and variance ``c * sd^2`` (sd
    over the remainder) is evaluated at each remainder projection and scaled
    so the largest probability is exactly 1.
    """
    t_rem = np.asarray(t_remainder, dtype=np.float64).ravel()
    t_all = np.asarray(t_all, dtype=np.float64).ravel()
    if t_rem.size == 0 or t_all.size == 0:
        raise InputError("projected values must be nonempty")
    t0, t1 = float(t_all.min()), float(t_all.max())
    sd = float(t_rem.std())
    if sd == 0:
        raise InputError("projected values are constant; cannot induce a shift")
    center = t0 + spec.alpha * (t1 - t0)
    quad = (t_rem - center) ** 2 / (2.0 * spec.c * sd * sd)
    return np.exp(-(quad - quad.min()))


def induce_shift(X, y, vector, spec: ShiftSpec) -> TrainTestPair:
    """Split one labeled dataset into a shifted train / test / holdout triple.

    A uniform ``train_fraction`` of rows becomes the training set; remaining
    rows are accepted into the test pool with :func:`acceptance_probabilities`
    along ``vector``, and the accepted rows split two-thirds unlabeled /
    one-third labeled holdout.  Row indices of all three parts are recorded in
    ``meta`` so leakage can be audited.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise InputError("X must be 2-d")
    y = np.asarray(y, dtype=np.float64).ravel()
    n = len(X)
    if len(y) != n:
        raise InputError("y length does not match X")
    v = np.asarray(vector, dtype=np.float64).ravel()
    if len(v) != X.shape[1]:
        raise InputError("vector length does not match the covariate dimension")

    rng = np.random.default_rng(spec.seed)
    n_train = int(round(spec.train_fraction * n))
    n_train = min(max(n_train, 1), n - 1)
    train_rows = np.sort(rng.choice(n, size=n_train, replace=False))
    remainder = np.setdiff1d(np.arange(n), train_rows)

    t_all = X @ v
    probs = acceptance_probabilities(t_all[remainder], t_all, spec)
    accepted = remainder[rng.random(len(remainder)) < probs]
    if len(accepted) < MIN_TEST_ROWS:
        raise InputError(
            f"only {len(accepted)} test rows accepted; increase c or move alpha toward "
            "the bulk of the projected values"
        )
    accepted = rng.permutation(accepted)
    n_holdout = len(accepted) // 3
    test_rows = np.sort(accepted[: len(accepted) - n_holdout])
    holdout_rows = np.sort(accepted[len(accepted) - n_holdout :])
    return TrainTestPair(
        X_tr=X[train_rows],
        y_tr=y[train_rows],
        X_te=X[test_rows],
        holdout_X=X[holdout_rows],
        y_te_holdout=y[holdout_rows],
        meta={
            "source": "induced",
            "seed": spec.seed,
            "vector": v.tolist(),
            "alpha": spec.alpha,
            "c": spec.c,
            "train_fraction": spec.train_fraction,
            "train_rows": train_rows.tolist(),
            "test_rows": test_rows.tolist(),
            "holdout_rows": holdout_rows.tolist(),
        },
    )


def subgroup_split(
    X, y, group, holdout_fraction: float = 1.0 / 3.0, seed: int = 0
) -> TrainTestPair:
    """Treat a binary subgroup as the test population.

    Training keeps every labeled row except a held-aside fraction of the
    subgroup; the remaining subgroup rows double as the unlabeled test
    covariates.  The held-aside subgroup rows form the labeled holdout and
    appear nowhere else.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise InputError("X must be 2-d")
    y = np.asarray(y, dtype=np.float64).ravel()
    group = np.asarray(group).ravel()
    n = len(X)
    if len(y) != n or len(group) != n:
        raise InputError("X, y and group must have matching lengths")
    values = set(np.unique(group).tolist())
    if not values <= {0, 1}:
        raise InputError(f"group must be binary 0/1, found values {sorted(values)}")
    if not 0.0 < holdout_fraction < 1.0:
        raise InputError(f"holdout_fraction must lie in (0, 1), got {holdout_fraction}")
    subgroup = np.flatnonzero(group == 1)
    if len(subgroup) < MIN_TEST_ROWS:
        raise InputError(f"subgroup has {len(subgroup)} rows; need at least {MIN_TEST_ROWS}")

    rng = np.random.default_rng(seed)
    n_holdout = max(1, int(round(holdout_fraction * len(subgroup))))
    n_holdout = min(n_holdout, len(subgroup) - 1)
    shuffled = rng.permutation(subgroup)
    holdout_rows = np.sort(shuffled[:n_holdout])
    test_rows = np.sort(shuffled[n_holdout:])
    train_rows = np.setdiff1d(np.arange(n), holdout_rows)
    return TrainTestPair(
        X_tr=X[train_rows],
        y_tr=y[train_rows],
        X_te=X[test_rows],
        holdout_X=X[holdout_rows],
        y_te_holdout=y[holdout_rows],
        meta={
            "source": "subgroup",
            "seed": seed,
            "holdout_fraction": holdout_fraction,
            "train_rows": train_rows.tolist(),
            "test_rows": test_rows.tolist(),
            "holdout_rows": holdout_rows.tolist(),
        },
    )
