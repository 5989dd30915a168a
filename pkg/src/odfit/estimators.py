"""scikit-learn compatible wrappers around the fitters and the CNN regressor.

Array conventions:

* frame stacks: ``(n, C, H, W)`` counts, channel order (atoms, bg, dark);
* OD stacks: ``(n, H, W)`` floats with NaN at pixels excluded from fitting;
* parameters: ``(n, 7)`` in ``PARAM_NAMES`` order.
"""
from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import ShapeMismatchError
from .imaging import DEFAULT_FLOOR, DEFAULT_T_FLOOR, Frame, FrameTriple, ODMap, od_from_triple
from .lsfit import FitConfig, fit_2d, fit_3x1d
from .regressor import NetworkSpec, RegressorModel, TrainConfig, fine_tune_arrays, train_arrays
from .simulator import ParamRanges


def check_frame_stack(X, channels=None) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim == 3 and channels in (None, 1):
        X = X[:, None]
    if X.ndim != 4:
        raise ShapeMismatchError(f"expected frame stack (n, C, H, W), got shape {X.shape}")
    if channels is not None and X.shape[1] != channels:
        raise ShapeMismatchError(f"expected {channels} channel(s), got {X.shape[1]}")
    if X.shape[0] == 0:
        raise ShapeMismatchError("empty frame stack")
    if not np.all(np.isfinite(X)):
        raise ValueError("frame counts must be finite")
    return X


def check_od_stack(X) -> np.ndarray:
    if isinstance(X, ODMap):
        X = [X]
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], ODMap):
        X = np.stack([np.where(m.fit_mask, m.values, np.nan) for m in X])
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[0] == 0:
        raise ShapeMismatchError(f"expected OD stack (n, H, W), got shape {X.shape}")
    return X


def check_params(y, n=None) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or y.shape[1] != 7:
        raise ShapeMismatchError(f"expected parameters of shape (n, 7), got {y.shape}")
    if n is not None and len(y) != n:
        raise ShapeMismatchError(f"{len(y)} parameter rows for {n} samples")
    return y


def _od_map(values: np.ndarray) -> ODMap:
    valid = np.isfinite(values)
    return ODMap(np.where(valid, values, 0.0), valid)


class ODTransformer(TransformerMixin, BaseEstimator):
    """Frame triples (n, 3, H, W) -> OD stacks (n, H, W)."""

    def __init__(self, floor=DEFAULT_FLOOR, t_floor=DEFAULT_T_FLOOR):
        self.floor = floor
        self.t_floor = t_floor

    def fit(self, X, y=None):
        X = check_frame_stack(X, 3)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_frame_stack(X, 3)
        out = np.empty((len(X),) + X.shape[2:])
        for i, stack in enumerate(X):
            triple = FrameTriple(*(Frame(c) for c in stack))
            od = od_from_triple(triple, self.t_floor, self.floor)
            out[i] = np.where(od.fit_mask, od.values, np.nan)
        return out


class _LSFitter(RegressorMixin, BaseEstimator):
    def __init__(self, max_iterations=200, param_tolerance=1e-8, residual_tolerance=1e-8,
                 lm_lambda0=1e-3, lm_lambda_up=10.0, lm_lambda_down=0.1, slice_rounds=3):
        self.max_iterations = max_iterations
        self.param_tolerance = param_tolerance
        self.residual_tolerance = residual_tolerance
        self.lm_lambda0 = lm_lambda0
        self.lm_lambda_up = lm_lambda_up
        self.lm_lambda_down = lm_lambda_down
        self.slice_rounds = slice_rounds

    def _config(self) -> FitConfig:
        return FitConfig(self.max_iterations, self.param_tolerance, self.residual_tolerance,
                         self.lm_lambda0, self.lm_lambda_up, self.lm_lambda_down,
                         slice_rounds=self.slice_rounds)

    def fit(self, X, y=None):
        """Nothing is learned; validates settings and input shape."""
        X = check_od_stack(X)
        self.config_ = self._config()
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def fit_results(self, X):
        check_is_fitted(self, "config_")
        return [self._fit_one(_od_map(od)) for od in check_od_stack(X)]

    def predict(self, X):
        return np.array([r.params.to_array() for r in self.fit_results(X)])


class SliceGaussianFitter(_LSFitter):
    """3x1-D least squares: alternating row/column 1-D fits, no rotation."""

    def _fit_one(self, od):
        return fit_3x1d(od, self.config_)


class RotatedGaussianFitter(_LSFitter):
    """Full 7-parameter 2-D least squares including rotation."""

    def _fit_one(self, od):
        return fit_2d(od, self.config_)


class CNNRegressor(RegressorMixin, BaseEstimator):
    """Convolutional regressor: ``channels=1`` is ML-1 (atoms only), 3 is ML-3."""

    def __init__(self, channels=1, input_size=(64, 64), conv_channels=(16, 32, 64, 64), hidden=128,
                 pooling="flatten", epochs=30, batch_size=16, lr=1e-3, lr_final=1e-5, schedule="cosine",
                 val_fraction=0.1, augment=True, input_log=True, theta_output="cross", ranges=None,
                 count_scale=None, random_state=0):
        self.channels = channels
        self.input_size = input_size
        self.conv_channels = conv_channels
        self.hidden = hidden
        self.pooling = pooling
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_final = lr_final
        self.schedule = schedule
        self.val_fraction = val_fraction
        self.augment = augment
        self.input_log = input_log
        self.theta_output = theta_output
        self.ranges = ranges
        self.count_scale = count_scale
        self.random_state = random_state

    def _train_config(self, epochs=None, lr=None) -> TrainConfig:
        return TrainConfig(self.epochs if epochs is None else epochs, self.batch_size,
                           self.lr if lr is None else lr, self.lr_final, self.schedule,
                           self.val_fraction, self.augment, self.random_state)

    def fit(self, X, y):
        X = check_frame_stack(X, self.channels)
        y = check_params(y, len(X))
        spec = NetworkSpec(self.channels, tuple(self.input_size), tuple(self.conv_channels),
                           hidden=self.hidden, pooling=self.pooling)
        ranges = self.ranges if self.ranges is not None else ParamRanges()
        self.model_, self.loss_curve_ = train_arrays(spec, X, y, ranges, self._train_config(),
                                                     self.count_scale, input_log=self.input_log,
                                                     theta_output=self.theta_output)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def fine_tune(self, X, y, epochs=5, lr=3e-4):
        """Continue training the fitted model on new data."""
        check_is_fitted(self, "model_")
        X = check_frame_stack(X, self.channels)
        y = check_params(y, len(X))
        self.model_, curve = fine_tune_arrays(self.model_, X, y, self._train_config(epochs, lr))
        self.loss_curve_ = list(self.loss_curve_) + curve
        return self

    @classmethod
    def from_model(cls, model: RegressorModel) -> "CNNRegressor":
        spec = model.spec
        norm = model.normalizer
        est = cls(spec.input_channels, spec.input_size, spec.conv_channels, spec.hidden, spec.pooling,
                  input_log=norm.input_log, theta_output=norm.theta_output, count_scale=norm.count_scale)
        est.model_, est.loss_curve_ = model, []
        est.n_features_in_ = None
        return est

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict(check_frame_stack(X, self.channels))
