"""Container for a train / unlabeled-test / labeled-holdout split."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError


def _as_matrix(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise InputError(f"{name} must be a nonempty 2-d array, got shape {np.shape(x)}")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains non-finite values")
    return arr


def _as_vector(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64).ravel()
    if arr.size == 0:
        raise InputError(f"{name} must be nonempty")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class TrainTestPair:
    """Labeled training sample, unlabeled test covariates, labeled test holdout.

    The holdout rows are reserved for evaluation only; nothing downstream may
    fit on them.  ``meta`` carries provenance (generator name, seed, source row
    indices) and is never interpreted numerically.
    """

    X_tr: np.ndarray
    y_tr: np.ndarray
    X_te: np.ndarray
    holdout_X: np.ndarray
    y_te_holdout: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "X_tr", _as_matrix(self.X_tr, "X_tr"))
        object.__setattr__(self, "y_tr", _as_vector(self.y_tr, "y_tr"))
        object.__setattr__(self, "X_te", _as_matrix(self.X_te, "X_te"))
        object.__setattr__(self, "holdout_X", _as_matrix(self.holdout_X, "holdout_X"))
        object.__setattr__(self, "y_te_holdout", _as_vector(self.y_te_holdout, "y_te_holdout"))
        d = self.X_tr.shape[1]
        if self.X_te.shape[1] != d or self.holdout_X.shape[1] != d:
            raise InputError("train, test and holdout covariates must share one dimension")
        if len(self.y_tr) != len(self.X_tr):
            raise InputError("y_tr length does not match X_tr")
        if len(self.y_te_holdout) != len(self.holdout_X):
            raise InputError("y_te_holdout length does not match holdout_X")

    @property
    def dim(self) -> int:
        return self.X_tr.shape[1]

    @property
    def n_train(self) -> int:
        return self.X_tr.shape[0]

    @property
    def n_test(self) -> int:
        return self.X_te.shape[0]
