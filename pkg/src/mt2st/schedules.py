"""Auxiliary-task weight schedules.

Step indices are zero-based: a run of ``T`` steps visits ``t = 0 .. T-1``.
The per-strategy ``gamma_*`` functions are pure; the schedule classes bundle
their parameters and are what the trainer consumes.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .kernel import GradientSet

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-8


@dataclass(frozen=True)
class DiminishParams:
    gamma0: float
    eta: float
    nu: float = 1.0

    def __post_init__(self):
        if not self.gamma0 >= 0:
            raise ValueError(f"gamma0 must be >= 0, got {self.gamma0}")
        if not self.eta >= 0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")
        if not self.nu >= 1:
            raise ValueError(f"nu must be >= 1, got {self.nu}")


@dataclass(frozen=True)
class SwitchParams:
    t_switch: int

    def __post_init__(self):
        if self.t_switch < 0:
            raise ValueError(f"t_switch must be >= 0, got {self.t_switch}")


@dataclass(frozen=True)
class AdaptiveParams:
    lambda_budget: float = 1.0
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if not self.lambda_budget > 0:
            raise ValueError(f"lambda_budget must be > 0, got {self.lambda_budget}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")


def gamma_diminish(t, p: DiminishParams) -> float:
    """``gamma0 * exp(-eta * t**nu)``."""
    if t < 0:
        raise ValueError(f"step must be >= 0, got {t}")
    return p.gamma0 * math.exp(-p.eta * float(t) ** p.nu)


def gamma_switch(t, p: SwitchParams) -> float:
    if t < 0:
        raise ValueError(f"step must be >= 0, got {t}")
    return 1.0 if t < p.t_switch else 0.0


def _rescale(raw: np.ndarray, budget: float) -> np.ndarray:
    return raw / raw.sum() * budget


def gamma_gradnorm(primary_norm: float, aux_norms: Sequence[float], p: AdaptiveParams) -> np.ndarray:
    """Inverse gradient-norm ratios, rescaled to sum to the budget.

    A vanished primary gradient makes every ratio zero; that case returns
    zeros and logs a ``primary-converged`` warning instead of dividing by 0.
    """
    aux = np.asarray(aux_norms, dtype=np.float64)
    if not (np.isfinite(primary_norm) and primary_norm >= 0 and np.all(np.isfinite(aux)) and np.all(aux >= 0)):
        raise ValueError("gradient norms must be finite and nonnegative")
    raw = primary_norm / (aux + p.epsilon)
    if aux.size == 0:
        return raw
    if not raw.sum() > 0:
        logger.warning("gradnorm weights are all zero", extra={"condition": "primary-converged"})
        return np.zeros_like(aux)
    return _rescale(raw, p.lambda_budget)


def gamma_fisher(traces: Sequence[float], p: AdaptiveParams) -> np.ndarray:
    """Relative Fisher-trace weights scaled by the budget.

    All-zero traces fall back to a uniform split so the multi-task phase does
    not silently stop.
    """
    tr = np.asarray(traces, dtype=np.float64)
    if not (np.all(np.isfinite(tr)) and np.all(tr >= 0)):
        raise ValueError("Fisher traces must be finite and nonnegative")
    if tr.size == 0:
        return tr
    total = tr.sum()
    if not total > 0:
        logger.warning("all Fisher traces are zero; using uniform weights", extra={"condition": "zero-fisher"})
        return np.full(tr.size, p.lambda_budget / tr.size)
    return tr / total * p.lambda_budget


def gamma_variance(t, provider: Callable[[int], Sequence[float]], p: AdaptiveParams) -> np.ndarray:
    """Inverse noise-variance weights normalised to the budget."""
    var = np.asarray(provider(t), dtype=np.float64)
    if np.any(~np.isfinite(var)) or np.any(var <= 0):
        raise ValueError(f"noise variances must be positive and finite at step {t}, got {var.tolist()}")
    if var.size == 0:
        return var
    return _rescale(1.0 / (var + p.epsilon), p.lambda_budget)


def estimate_fisher_trace(grads: GradientSet) -> float:
    """Empirical-Fisher trace proxy: sum of squared encoder-gradient entries."""
    return float(sum(np.sum(l.weight**2) + np.sum(l.bias**2) for l in grads.encoder))


@dataclass
class ScheduleInputs:
    """What an adaptive schedule may look at when producing ``gamma(t)``."""

    primary_norm: float = 0.0
    aux_norms: Sequence[float] = ()
    fisher_traces: Sequence[float] = ()


class TaskWeightSchedule:
    """Base class. ``n_aux`` is ``None`` when the schedule fits any ``K``."""

    name = "schedule"
    adaptive = False

    @property
    def n_aux(self):
        return None

    def weights(self, t: int, n_aux: int, inputs: ScheduleInputs | None = None) -> np.ndarray:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass
class NoneSTL(TaskWeightSchedule):
    name = "stl"

    def weights(self, t, n_aux, inputs=None):
        return np.zeros(n_aux)

    def to_dict(self):
        return {"type": self.name}


@dataclass
class FixedMTL(TaskWeightSchedule):
    """Constant weights; a scalar applies to every auxiliary task."""

    gammas: float | Sequence[float] = 1.0
    name = "mtl"

    def __post_init__(self):
        g = np.atleast_1d(np.asarray(self.gammas, dtype=np.float64))
        if np.any(g < 0) or np.any(~np.isfinite(g)):
            raise ValueError(f"fixed weights must be finite and >= 0, got {g.tolist()}")

    @property
    def n_aux(self):
        return None if np.ndim(self.gammas) == 0 else len(self.gammas)

    def weights(self, t, n_aux, inputs=None):
        if np.ndim(self.gammas) == 0:
            return np.full(n_aux, float(self.gammas))
        return np.asarray(self.gammas, dtype=np.float64).copy()

    def to_dict(self):
        g = self.gammas
        return {"type": self.name, "gammas": float(g) if np.ndim(g) == 0 else [float(x) for x in g]}


@dataclass
class Diminish(TaskWeightSchedule):
    params: Sequence[DiminishParams] = field(default_factory=list)
    name = "diminish"

    def __post_init__(self):
        self.params = tuple(self.params)

    @property
    def n_aux(self):
        return len(self.params)

    def weights(self, t, n_aux, inputs=None):
        return np.array([gamma_diminish(t, p) for p in self.params], dtype=np.float64)

    def to_dict(self):
        return {
            "type": self.name,
            "tasks": [{"gamma0": p.gamma0, "eta": p.eta, "nu": p.nu} for p in self.params],
        }


@dataclass
class Switch(TaskWeightSchedule):
    t_switch: int = 0
    name = "switch"

    def __post_init__(self):
        self._p = SwitchParams(int(self.t_switch))

    def weights(self, t, n_aux, inputs=None):
        return np.full(n_aux, gamma_switch(t, self._p))

    def to_dict(self):
        return {"type": self.name, "t_switch": int(self.t_switch)}


@dataclass
class GradNorm(TaskWeightSchedule):
    params: AdaptiveParams = field(default_factory=AdaptiveParams)
    name = "gradnorm"
    adaptive = True

    def weights(self, t, n_aux, inputs=None):
        return gamma_gradnorm(inputs.primary_norm, inputs.aux_norms, self.params)

    def to_dict(self):
        return {"type": self.name, "lambda": self.params.lambda_budget, "epsilon": self.params.epsilon}


@dataclass
class Fisher(TaskWeightSchedule):
    params: AdaptiveParams = field(default_factory=AdaptiveParams)
    ema_decay: float = 0.9
    name = "fisher"
    adaptive = True

    def weights(self, t, n_aux, inputs=None):
        return gamma_fisher(inputs.fisher_traces, self.params)

    def to_dict(self):
        return {
            "type": self.name,
            "lambda": self.params.lambda_budget,
            "epsilon": self.params.epsilon,
            "ema_decay": self.ema_decay,
        }


@dataclass
class Variance(TaskWeightSchedule):
    """``provider`` maps a step to per-task noise variances.

    Left as ``None`` it is filled in by the trainer from the suite's
    denoising tasks.
    """

    params: AdaptiveParams = field(default_factory=AdaptiveParams)
    provider: Callable[[int], Sequence[float]] | None = None
    name = "variance"

    def weights(self, t, n_aux, inputs=None):
        if self.provider is None:
            raise ValueError("variance schedule has no noise-variance provider")
        return gamma_variance(t, self.provider, self.params)

    def to_dict(self):
        return {"type": self.name, "lambda": self.params.lambda_budget, "epsilon": self.params.epsilon}


SCHEDULE_TYPES = {
    cls.name: cls for cls in (NoneSTL, FixedMTL, Diminish, Switch, GradNorm, Fisher, Variance)
}


def schedule_from_dict(spec: dict) -> TaskWeightSchedule:
    """Build a schedule from its plain-dict form (as produced by ``to_dict``)."""
    spec = dict(spec)
    kind = spec.pop("type", None)
    if kind not in SCHEDULE_TYPES:
        raise ValueError(f"type: unknown schedule {kind!r}; expected one of {sorted(SCHEDULE_TYPES)}")
    if kind == "stl":
        return NoneSTL()
    if kind == "mtl":
        return FixedMTL(spec.get("gammas", 1.0))
    if kind == "switch":
        if "t_switch" not in spec:
            raise ValueError("t_switch: required for switch schedule")
        return Switch(int(spec["t_switch"]))
    if kind == "diminish":
        tasks = spec.get("tasks")
        if not tasks:
            raise ValueError("tasks: diminish schedule needs one {gamma0, eta, nu} entry per auxiliary task")
        return Diminish([DiminishParams(float(d["gamma0"]), float(d["eta"]), float(d.get("nu", 1.0))) for d in tasks])
    adaptive = AdaptiveParams(float(spec.get("lambda", 1.0)), float(spec.get("epsilon", DEFAULT_EPSILON)))
    if kind == "gradnorm":
        return GradNorm(adaptive)
    if kind == "fisher":
        return Fisher(adaptive, float(spec.get("ema_decay", 0.9)))
    return Variance(adaptive)
