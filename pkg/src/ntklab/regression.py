"""Kernel regression with the NTK: the t -> infinity limit of linearized training."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import Dataset
from .kernel import KernelSpec, gram, ntk_grad_weighted


class RankDeficientGramError(np.linalg.LinAlgError):
    """The Gram matrix cannot be factorized at the requested ridge."""

    def __init__(self, lambda_min, ridge):
        self.lambda_min = float(lambda_min)
        self.ridge = float(ridge)
        super().__init__(
            f"Gram matrix + {ridge:g}*I is not positive definite (lambda_min = {lambda_min:.3e}); "
            f"pass a positive ridge to regularize")


def solve_spd(K, Y, ridge=0.0):
    """Solve (K + ridge I) a = Y by Cholesky; no jitter is ever added silently."""
    A = np.array(K, dtype=float) + ridge * np.eye(K.shape[0])
    try:
        factor = linalg.cho_factor(A, lower=True, check_finite=True)
    except linalg.LinAlgError:
        lam_min = float(np.linalg.eigvalsh((K + K.T) / 2)[0])
        raise RankDeficientGramError(lam_min, ridge) from None
    return linalg.cho_solve(factor, np.asarray(Y, dtype=float))


@dataclass(frozen=True, eq=False)
class KernelPredictor:
    """f(x) = K(x, X_support) . alpha with (K + ridge I) alpha = Y."""

    spec: KernelSpec
    support: Dataset
    alpha: np.ndarray
    ridge: float = 0.0

    def decision_function(self, X):
        X = _rows(X)
        if X.shape[0] == 0:
            return np.zeros(0)
        return gram(self.spec, X, self.support.X) @ self.alpha

    def input_gradient(self, X):
        """grad_x f(x) for each row of X, shape (n, d)."""
        X = _rows(X)
        return ntk_grad_weighted(self.spec, X, self.support.X, self.alpha)

    def to_dict(self):
        return {
            "spec": self.spec.to_dict(),
            "support": {**self.support.metadata(), "X": self.support.X.tolist(),
                        "Y": self.support.Y.tolist()},
            "alpha": self.alpha.tolist(),
            "ridge": self.ridge,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        sup = d["support"]
        support = Dataset(sup["X"], sup["Y"], name=sup.get("name", "support"),
                          seed=sup.get("seed", 0), meta={"generator": sup.get("generator", "file")},
                          check_distinct=False)
        return cls(KernelSpec.from_dict(d["spec"]), support, np.asarray(d["alpha"], dtype=float),
                   float(d["ridge"]))

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _rows(X):
    if isinstance(X, Dataset):
        return X.X
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1) if X.size else X.reshape(0, 0)
    return X


def fit(spec: KernelSpec, train: Dataset, ridge=0.0) -> KernelPredictor:
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    K = gram(spec, train.X)
    alpha = solve_spd(K, train.Y, ridge)
    resid = np.abs(K @ alpha + ridge * alpha - train.Y).max()
    if resid > 1e-6 * max(np.abs(train.Y).max(), 1.0):
        raise RankDeficientGramError(np.linalg.eigvalsh(K)[0], ridge)
    alpha.flags.writeable = False
    return KernelPredictor(spec, train, alpha, float(ridge))


def predict(p: KernelPredictor, test) -> np.ndarray:
    X = _rows(test)
    if X.size and X.shape[1] != p.support.d:
        raise ValueError(f"dimension mismatch: {X.shape[1]} vs {p.support.d}")
    return p.decision_function(X)


def sign_accuracy(pred, y):
    """Fraction with sign(pred) == y; a zero prediction counts as an error."""
    pred = np.asarray(pred, dtype=float)
    y = np.asarray(y, dtype=float)
    if pred.size == 0:
        return float("nan")
    return float(np.mean(np.sign(pred) == y))


def accuracy(p, test: Dataset) -> float:
    test.require_classification()
    return sign_accuracy(p.decision_function(test.X), test.Y)


class NTKRegressor(RegressorMixin, BaseEstimator):
    """Kernel ridge regression with the infinite-width ReLU NTK.

    Parameters
    ----------
    depth : int
        Number of hidden layers of the underlying network.
    ridge : float
        Diagonal regularizer; 0 gives the interpolating predictor.
    c_norm : float
        Activation normalization constant (2 for ReLU).
    """

    def __init__(self, depth=1, ridge=0.0, c_norm=2.0):
        self.depth = depth
        self.ridge = ridge
        self.c_norm = c_norm

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float, y_numeric=True)
        self.spec_ = KernelSpec(depth=self.depth, c_norm=self.c_norm)
        self.predictor_ = fit(self.spec_, Dataset(X, y, name="fit"), self.ridge)
        self.dual_coef_ = self.predictor_.alpha
        self.X_fit_ = self.predictor_.support.X
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "predictor_")
        X = check_array(X, dtype=float)
        return self.predictor_.decision_function(X)

    def predict(self, X):
        return self.decision_function(X)

    def input_gradient(self, X):
        check_is_fitted(self, "predictor_")
        return self.predictor_.input_gradient(check_array(X, dtype=float))

    def accuracy(self, X, y):
        return sign_accuracy(self.decision_function(X), y)
