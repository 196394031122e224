"""Multi-task to single-task training schedules on a small numpy MLP."""

from .cost import CostModel, compression_rate, measure_costs, mt2st_cost
from .estimator import MT2STClassifier, MT2STRegressor
from .kernel import ModelParams, backward, flops_breakdown, forward, init_params, task_loss
from .optimizer import TrainConfig, combine, pl_alignment, sgd_step
from .schedules import (
    AdaptiveParams,
    Diminish,
    DiminishParams,
    Fisher,
    FixedMTL,
    GradNorm,
    NoneSTL,
    Switch,
    SwitchParams,
    Variance,
    gamma_diminish,
    gamma_fisher,
    gamma_gradnorm,
    gamma_switch,
    gamma_variance,
)
from .tasks import DenoiseSchedule, TaskSpec, TaskSuite, generate_suite
from .trainer import FeedbackPolicy, RunResult, TrainingDiverged, evaluate, train

__version__ = "0.1.0"
