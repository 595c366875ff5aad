"""scikit-learn style wrappers around the feature extractor and the networks.

These cover the array-in/array-out parts of the pipeline. Simulation, mechanical
testing and the staged search are file- or trajectory-oriented and stay plain
functions.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import kbnn
from .features import compute_features
from .nn.optim import TrainConfig
from .phasefield import GridSpec


class MicrostructureFeaturizer(TransformerMixin, BaseEstimator):
    """Map stacked (c, e2) fields of shape (n, 2, ny, nx) to the five features."""

    def __init__(self, Lx: float = 0.01, Ly: float = 0.01, include_outer_boundary: bool = False):
        self.Lx = Lx
        self.Ly = Ly
        self.include_outer_boundary = include_outer_boundary

    def fit(self, X, y=None):
        X = self._check(X)
        self.field_shape_ = X.shape[2:]
        return self

    def transform(self, X):
        check_is_fitted(self, "field_shape_")
        X = self._check(X)
        if X.shape[2:] != self.field_shape_:
            raise ValueError(f"fields have shape {X.shape[2:]}, fitted on {self.field_shape_}")
        ny, nx = self.field_shape_
        grid = GridSpec(nx, ny, self.Lx, self.Ly)
        return np.array(
            [compute_features(c, e2, grid, None, self.include_outer_boundary).as_array() for c, e2 in X]
        )

    @staticmethod
    def _check(X):
        X = check_array(X, allow_nd=True)
        if X.ndim != 4 or X.shape[1] != 2:
            raise ValueError("expected fields of shape (n, 2, ny, nx)")
        return X


def _train_config(est) -> TrainConfig:
    return TrainConfig(est.epochs, est.lr0, est.v_decay, est.n_decay, est.batch_size, est.random_state)


class ENNRegressor(RegressorMixin, BaseEstimator):
    """Dense base-energy network on the five microstructure features."""

    def __init__(self, hidden=(76,), epochs=2000, lr0=1e-3, v_decay=0.7, n_decay=100, batch_size=None, random_state=0):
        self.hidden = hidden
        self.epochs = epochs
        self.lr0 = lr0
        self.v_decay = v_decay
        self.n_decay = n_decay
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        self.n_features_in_ = X.shape[1]
        self.network_ = kbnn.enn_dnn(tuple(self.hidden), X.shape[1], self.random_state)
        self.history_ = kbnn.train_enn(self.network_, X, y, _train_config(self))
        return self

    def predict(self, X):
        check_is_fitted(self, "network_")
        X = check_array(X)
        return self.network_.predict(X).ravel()


class KBNNRegressor(RegressorMixin, BaseEstimator):
    """Frozen ENN plus a dense MNN on the strains.

    ``X`` rows are (E11, E12, E22, five features); ``y`` is the mechanical free
    energy. The stress penalty needs ``F`` and ``P`` (each (n, 2, 2) or (n, 4))
    passed to ``fit``.
    """

    def __init__(
        self,
        enn=None,
        beta=0.01,
        hidden=(26, 26),
        epochs=1000,
        lr0=1e-3,
        v_decay=0.92,
        n_decay=100,
        batch_size=32,
        random_state=0,
    ):
        self.enn = enn
        self.beta = beta
        self.hidden = hidden
        self.epochs = epochs
        self.lr0 = lr0
        self.v_decay = v_decay
        self.n_decay = n_decay
        self.batch_size = batch_size
        self.random_state = random_state

    def _data(self, X, y=None, F=None, P=None):
        return kbnn.KBNNData(
            E=X[:, :3],
            F=None if F is None else np.asarray(F, dtype=float),
            psi=y,
            P=None if P is None else np.asarray(P, dtype=float),
            features=X[:, 3:],
        )

    def fit(self, X, y, F=None, P=None):
        if self.enn is None:
            raise ValueError("a trained ENN network is required")
        X, y = check_X_y(X, y, y_numeric=True)
        if X.shape[1] != 8:
            raise ValueError("X must hold 3 strains and 5 features per row")
        if self.beta and (F is None or P is None):
            raise ValueError("a nonzero beta needs F and P")
        self.n_features_in_ = X.shape[1]
        self.model_ = kbnn.KBNNModel(
            self.enn, kbnn.mnn_plain(tuple(self.hidden), self.random_state), beta=float(self.beta)
        )
        self.history_ = kbnn.train_kbnn(self.model_, self._data(X, y, F, P), _train_config(self))
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X)
        return kbnn.predict_energy(self.model_, self._data(X))[1]

    def predict_stress(self, X, F):
        check_is_fitted(self, "model_")
        X = check_array(X)
        return kbnn.predict_stress(self.model_, self._data(X, F=F))
