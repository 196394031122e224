"""scikit-learn compatible estimators around :func:`mt2st.trainer.train`.

The primary task is the usual ``(X, y)``; auxiliary tasks are passed to
``fit`` as extra target arrays and only shape the shared encoder.
"""

from __future__ import annotations

import numbers

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_random_state, check_X_y

from . import kernel
from .optimizer import TrainConfig
from .schedules import AdaptiveParams, Diminish, DiminishParams, Fisher, FixedMTL, GradNorm, NoneSTL, Switch
from .tasks import TaskSpec, TaskSuite
from .trainer import FeedbackPolicy, train

STRATEGIES = ("stl", "mtl", "diminish", "switch", "gradnorm", "fisher")


class _MT2STBase(BaseEstimator):
    _primary_kind = None

    def __init__(
        self,
        hidden_layer_sizes=(16,),
        activation="tanh",
        strategy="switch",
        t_switch=None,
        gamma0=1.0,
        eta=1e-3,
        nu=1.0,
        lambda_budget=1.0,
        learning_rate=0.05,
        max_steps=1000,
        batch_size=32,
        validation_fraction=0.2,
        feedback=False,
        feedback_window=50,
        feedback_tol=1e-3,
        random_state=0,
    ):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.strategy = strategy
        self.t_switch = t_switch
        self.gamma0 = gamma0
        self.eta = eta
        self.nu = nu
        self.lambda_budget = lambda_budget
        self.learning_rate = learning_rate
        self.max_steps = max_steps
        self.batch_size = batch_size
        self.validation_fraction = validation_fraction
        self.feedback = feedback
        self.feedback_window = feedback_window
        self.feedback_tol = feedback_tol
        self.random_state = random_state

    def _schedule(self, n_aux: int):
        s = self.strategy
        if s not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {s!r}")
        if s == "stl":
            return NoneSTL()
        if s == "mtl":
            return FixedMTL(self.gamma0)
        if s == "diminish":
            return Diminish([DiminishParams(self.gamma0, self.eta, self.nu)] * n_aux)
        if s == "switch":
            return Switch(self.max_steps // 2 if self.t_switch is None else self.t_switch)
        adaptive = AdaptiveParams(self.lambda_budget)
        return GradNorm(adaptive) if s == "gradnorm" else Fisher(adaptive)

    def _seed(self) -> int:
        if isinstance(self.random_state, numbers.Integral):
            return int(self.random_state)
        return int(check_random_state(self.random_state).randint(0, 2**31 - 1))

    def _encode_primary(self, y):
        raise NotImplementedError

    def fit(self, X, y, aux_targets=None, aux_kinds=None):
        """Fit on ``(X, y)`` with optional auxiliary targets sharing the same rows.

        ``aux_kinds`` defaults to "classification" for integer or string
        targets and "regression" otherwise.
        """
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=self._primary_kind == "regression")
        aux_targets = list(aux_targets or [])
        if aux_kinds is None:
            aux_kinds = [_infer_kind(a) for a in aux_targets]
        if len(aux_kinds) != len(aux_targets):
            raise ValueError(f"got {len(aux_targets)} auxiliary targets but {len(aux_kinds)} kinds")

        y_primary, primary_dim = self._encode_primary(y)
        targets, specs = [y_primary], [TaskSpec(self._primary_kind, primary_dim)]
        for i, (a, kind) in enumerate(zip(aux_targets, aux_kinds)):
            a = np.asarray(a)
            if len(a) != len(X):
                raise ValueError(f"auxiliary target {i} has {len(a)} rows, X has {len(X)}")
            if kind == "classification":
                _, codes = np.unique(a, return_inverse=True)
                targets.append(codes.reshape(-1))
                specs.append(TaskSpec("classification", max(int(codes.max()) + 1, 1)))
            elif kind == "regression":
                a = _as_2d(a.astype(np.float64))
                targets.append(a)
                specs.append(TaskSpec("regression", a.shape[1]))
            else:
                raise ValueError(f"auxiliary kind must be 'classification' or 'regression', got {kind!r}")

        seed = self._seed()
        suite = TaskSuite.from_arrays(X, targets, specs, self.validation_fraction, seed)
        cfg = TrainConfig(self.learning_rate, self.max_steps, self.batch_size, seed)
        fb = FeedbackPolicy(self.feedback_window, self.feedback_tol, bool(self.feedback))
        run = train(
            suite,
            self._schedule(len(aux_targets)),
            cfg,
            fb,
            hidden_dims=tuple(self.hidden_layer_sizes),
            activation=self.activation,
        )
        self.params_ = run.params
        self.history_ = run
        self.cost_model_ = run.cost
        self.n_features_in_ = X.shape[1]
        return self

    def _forward(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, estimator was fitted with {self.n_features_in_}")
        return kernel.forward(self.params_, X, heads=[0])

    def transform(self, X):
        """Shared encoder representation of ``X``."""
        return self._forward(X).pooled


class MT2STClassifier(ClassifierMixin, _MT2STBase):
    _primary_kind = "classification"

    def _encode_primary(self, y):
        self.classes_, codes = np.unique(y, return_inverse=True)
        return codes.reshape(-1), len(self.classes_)

    def decision_function(self, X):
        return self._forward(X).outputs[0]

    def predict_proba(self, X):
        logits = self.decision_function(X)
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X):
        logits = self.decision_function(X)
        return self.classes_[np.argmax(logits, axis=1)]


class MT2STRegressor(RegressorMixin, _MT2STBase):
    _primary_kind = "regression"

    def _encode_primary(self, y):
        self._y_1d = np.ndim(y) == 1
        y = _as_2d(np.asarray(y, dtype=np.float64))
        return y, y.shape[1]

    def predict(self, X):
        out = self._forward(X).outputs[0]
        return out[:, 0] if self._y_1d else out


def _as_2d(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, 1) if a.ndim == 1 else a


def _infer_kind(a) -> str:
    kind = np.asarray(a).dtype.kind
    return "classification" if kind in "iubUSO" else "regression"
