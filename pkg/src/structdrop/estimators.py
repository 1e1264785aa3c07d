"""scikit-learn style estimators wrapping the variational training loop."""
from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .inference import Model, Objective, TrainSpec, predict, train
from .layers import VARIANTS
from .tensor import make_rng


def _architecture(hidden_layer_sizes, activation, n_out):
    arch = []
    for width in hidden_layer_sizes:
        arch += [{"type": "dense", "units": int(width)}, {"type": activation}]
    arch.append({"type": "dense", "units": int(n_out)})
    return arch


class _BaseVariational(BaseEstimator):
    def __init__(self, hidden_layer_sizes=(100,), activation="relu", variant="vsd", n_transforms=1,
                 rank=None, log_alpha_init=math.log(0.25), kl_weight=1.0, epochs=100, batch_size=100,
                 lr=1e-3, optimizer="adam", lr_step_size=None, lr_gamma=0.3, mc_samples=100,
                 random_state=0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.variant = variant
        self.n_transforms = n_transforms
        self.rank = rank
        self.log_alpha_init = log_alpha_init
        self.kl_weight = kl_weight
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.optimizer = optimizer
        self.lr_step_size = lr_step_size
        self.lr_gamma = lr_gamma
        self.mc_samples = mc_samples
        self.random_state = random_state

    def _check_params(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.activation not in ("relu", "tanh", "sigmoid"):
            raise ValueError(f"unsupported activation {self.activation!r}")

    def _seed(self):
        return 0 if self.random_state is None else int(self.random_state)

    def _fit_inputs(self, X):
        self.x_mean_ = X.mean(axis=0)
        std = X.std(axis=0)
        self.x_scale_ = np.where(std > 0, std, 1.0)
        return (X - self.x_mean_) / self.x_scale_

    def _transform_inputs(self, X):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return (X - self.x_mean_) / self.x_scale_

    def _spec(self, n_out, likelihood, **extra):
        spec = {
            "architecture": _architecture(self.hidden_layer_sizes, self.activation, n_out),
            "input_shape": [self.n_features_in_],
            "variant": self.variant,
            "likelihood": likelihood,
            "layer_defaults": {"n_transforms": self.n_transforms, "rank": self.rank,
                               "log_alpha_init": self.log_alpha_init},
        }
        spec.update(extra)
        return spec

    def _train(self, spec, Xn, target, likelihood):
        self.model_ = Model(spec, self._seed())
        train_spec = TrainSpec(optimizer=self.optimizer, lr=self.lr, lr_step_size=self.lr_step_size,
                               lr_gamma=self.lr_gamma, epochs=self.epochs,
                               batch_size=min(self.batch_size, len(Xn)), seed=self._seed(),
                               mc_samples=self.mc_samples)
        objective = Objective(self.variant, self.kl_weight, len(Xn), likelihood)
        _, self.trace_ = train(self.model_, Xn, target, train_spec, objective)
        return self


class VSDRegressor(RegressorMixin, _BaseVariational):
    """Bayesian MLP regressor with a Gaussian likelihood.

    Inputs and targets are standardized internally. ``noise_variance`` fixes
    the likelihood variance (in target units); ``None`` learns it.
    """

    def __init__(self, hidden_layer_sizes=(100,), activation="relu", variant="vsd", n_transforms=1,
                 rank=None, log_alpha_init=math.log(0.25), kl_weight=1.0, epochs=100, batch_size=100,
                 lr=1e-3, optimizer="adam", lr_step_size=None, lr_gamma=0.3, mc_samples=100,
                 random_state=0, noise_variance=None):
        super().__init__(hidden_layer_sizes, activation, variant, n_transforms, rank, log_alpha_init,
                         kl_weight, epochs, batch_size, lr, optimizer, lr_step_size, lr_gamma,
                         mc_samples, random_state)
        self.noise_variance = noise_variance

    def fit(self, X, y):
        self._check_params()
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        self.n_features_in_ = X.shape[1]
        Xn = self._fit_inputs(X)
        self.y_mean_ = float(y.mean())
        self.y_scale_ = float(y.std()) or 1.0
        yn = (y - self.y_mean_) / self.y_scale_
        if self.noise_variance is None:
            log_prec, learn = 0.0, True
        else:
            if self.noise_variance <= 0:
                raise ValueError("noise_variance must be positive")
            log_prec, learn = math.log(self.y_scale_ ** 2 / self.noise_variance), False
        spec = self._spec(1, "gaussian", log_precision=log_prec, learn_precision=learn)
        return self._train(spec, Xn, yn, "gaussian")

    def predict(self, X, return_std=False):
        check_is_fitted(self, "model_")
        Xn = self._transform_inputs(X)
        mean, var = predict(self.model_, Xn, self.mc_samples, make_rng(self._seed() + 1))
        mean = mean.ravel() * self.y_scale_ + self.y_mean_
        if return_std:
            return mean, np.sqrt(var.ravel()) * self.y_scale_
        return mean


class VSDClassifier(ClassifierMixin, _BaseVariational):
    """Bayesian MLP classifier with a softmax likelihood."""

    def fit(self, X, y):
        self._check_params()
        X, y = check_X_y(X, y, dtype=np.float64)
        self.n_features_in_ = X.shape[1]
        self._encoder = LabelEncoder().fit(y)
        self.classes_ = self._encoder.classes_
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        Xn = self._fit_inputs(X)
        spec = self._spec(len(self.classes_), "categorical")
        return self._train(spec, Xn, self._encoder.transform(y), "categorical")

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        Xn = self._transform_inputs(X)
        return predict(self.model_, Xn, self.mc_samples, make_rng(self._seed() + 1))

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]
