"""scikit-learn style wrappers around the identification and law-fitting code."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .datagen import Dataset
from .errors import InvalidArgumentError
from .models import ARCHITECTURES, NormStats, build_model, predict
from .nslfit import (
    DEFAULT_GRID_SIZE,
    DEFAULT_ITERATIONS,
    DEFAULT_LR,
    PiecewiseAffineGuess,
    envelope_samples,
    eval_nsl,
    fit_nsl,
    margin,
)
from .trainer import TrainConfig, train


def _positive_column(X, name="X") -> np.ndarray:
    X = check_array(X, ensure_2d=False, dtype=np.float64)
    if X.ndim == 2:
        if X.shape[1] != 1:
            raise InvalidArgumentError(f"{name} must have a single feature")
        X = X[:, 0]
    if np.any(X <= 0):
        raise InvalidArgumentError(f"{name} must be strictly positive")
    return X


class BrokenPowerLawRegressor(RegressorMixin, BaseEstimator):
    """Fit a broken power law to the lower envelope of ``(resource, error)`` pairs.

    ``fit(X, y)`` takes resources ``X`` (one column) and errors ``y``.
    ``init`` may be a :class:`PiecewiseAffineGuess`; by default one is found
    by segmented least squares.
    """

    def __init__(self, n_breaks=0, init=None, grid_size=DEFAULT_GRID_SIZE, n_iter=DEFAULT_ITERATIONS, lr=DEFAULT_LR):
        self.n_breaks = n_breaks
        self.init = init
        self.grid_size = grid_size
        self.n_iter = n_iter
        self.lr = lr

    def fit(self, X, y):
        r = _positive_column(X)
        e = check_array(y, ensure_2d=False, dtype=np.float64)
        if e.shape != r.shape:
            raise InvalidArgumentError("X and y must have the same length")
        if self.init is not None and not isinstance(self.init, PiecewiseAffineGuess):
            raise InvalidArgumentError("init must be a PiecewiseAffineGuess")
        self.envelope_ = envelope_samples(r, e, self.grid_size)
        self.result_ = fit_nsl(self.envelope_, int(self.n_breaks), self.init, self.n_iter, self.lr)
        self.params_ = self.result_.params
        self.margin_ = self.result_.margin
        self.n_features_in_ = 1
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        return np.asarray(eval_nsl(self.params_, _positive_column(X)), dtype=float)

    def formula(self, var="r", digits=2) -> str:
        check_is_fitted(self, "result_")
        return self.result_.formula(var, digits)

    def score(self, X, y, sample_weight=None):
        """Negative margin against the envelope of ``(X, y)``; higher is better."""
        check_is_fitted(self, "params_")
        env = envelope_samples(_positive_column(X), np.asarray(y, dtype=float), self.grid_size)
        return -margin(self.params_, env)


class SystemIdentifier(RegressorMixin, BaseEstimator):
    """Learn ``(x, u) -> (xdot, y)`` with one of the three model families.

    ``X`` stacks states and inputs column-wise (first ``n_states`` columns
    are states) and ``y`` stacks state derivatives and outputs likewise.
    ``score`` is the usual coefficient of determination over all targets.
    """

    def __init__(self, n_states, arch="ph", n_h=8, n_d=2, n_e=64, batch_size=256, lr=1e-3, random_state=0):
        self.n_states = n_states
        self.arch = arch
        self.n_h = n_h
        self.n_d = n_d
        self.n_e = n_e
        self.batch_size = batch_size
        self.lr = lr
        self.random_state = random_state

    def _split(self, X):
        n = int(self.n_states)
        if not 1 <= n < X.shape[1]:
            raise InvalidArgumentError("n_states must leave at least one input column")
        return X[:, :n], X[:, n:]

    def fit(self, X, y):
        if self.arch not in ARCHITECTURES:
            raise InvalidArgumentError(f"arch must be one of {ARCHITECTURES}")
        X, y = check_X_y(X, y, multi_output=True, dtype=np.float64)
        x, u = self._split(X)
        n, m = x.shape[1], u.shape[1]
        y = np.atleast_2d(y.T).T
        if y.shape[1] != n + m:
            raise InvalidArgumentError(f"y must have {n + m} columns (derivatives then outputs)")
        xdot, out = y[:, :n], y[:, n:]
        data = Dataset.from_arrays(x, u, xdot, out)
        rng = np.random.default_rng(self.random_state)
        norm = NormStats.from_data(x, u, xdot, out)
        model = build_model(self.arch, n, m, int(self.n_h), int(self.n_d), norm, rng)
        cfg = TrainConfig(n_e=int(self.n_e), batch_size=self.batch_size, lr=self.lr, seed=int(rng.integers(2**63)))
        self.model_ = train(model, data, cfg)
        self.n_features_in_ = n + m
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise InvalidArgumentError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        x, u = self._split(X)
        pred = predict(self.model_, x, u)
        return np.hstack([pred.xdot_hat, pred.y_hat])
