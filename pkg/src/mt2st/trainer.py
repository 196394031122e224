"""The multi-task to single-task training loop.

Per step ``t`` (zero-based): draw one batch per task, run forward/backward for
every task, ask the schedule for ``gamma(t)``, combine, descend. Auxiliary
losses and gradient norms are computed and recorded even when their weight
is zero; they just never reach the update.

Batches are a pure function of ``(seed, task, step)``, so a run restarted
from step ``s`` with the parameters it had at ``s`` replays the original.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernel
from .cost import CostModel, measure_costs
from .optimizer import TrainConfig, combine, pl_alignment, sgd_step
from .schedules import Fisher, ScheduleInputs, TaskWeightSchedule, Variance, estimate_fisher_trace
from .tasks import TaskSuite, denoise_batch

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid configuration: bad config fields, or suite, schedule and model that do not fit."""


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, task: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step} for task {task}")
        self.step = step
        self.task = task


@dataclass(frozen=True)
class FeedbackPolicy:
    """Plateau detector on the primary validation loss.

    After every step the mean validation loss of the last ``window`` steps is
    compared with the mean of the ``window`` steps before that. A relative
    improvement below ``min_relative_improvement`` while any auxiliary weight
    is still positive forces every later weight to zero.
    """

    window: int = 50
    min_relative_improvement: float = 1e-3
    enabled: bool = False

    def __post_init__(self):
        if self.window < 2:
            raise ValueError(f"window must be >= 2, got {self.window}")
        if not self.min_relative_improvement >= 0:
            raise ValueError(f"min_relative_improvement must be >= 0, got {self.min_relative_improvement}")


@dataclass
class StepRecord:
    step: int
    losses: list[float]
    gammas: list[float]
    grad_norms: list[float]
    alignment: float
    flops_expected: float
    flops_realized: float
    wall_ms: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("wall_ms")
        return d


@dataclass
class RunResult:
    params: kernel.ModelParams
    records: list[StepRecord]
    convergence_epoch: int | None
    switch_step_effective: int | None
    final_metrics: list[dict]
    epoch_val_losses: list[float] = field(default_factory=list)
    feedback_step: int | None = None
    snapshots: dict = field(default_factory=dict, repr=False)
    cost: CostModel | None = None

    @property
    def total_epochs(self) -> int:
        return len(self.epoch_val_losses)

    @property
    def flops_expected(self) -> float:
        return self.records[-1].flops_expected if self.records else 0.0

    @property
    def flops_realized(self) -> float:
        return self.records[-1].flops_realized if self.records else 0.0


class _BatchStream:
    """Epoch-wise reshuffled index stream; epoch ``e`` uses ``rng([seed, task, e])``."""

    def __init__(self, n: int, seed: int, task: int):
        self.n = n
        self.seed = seed
        self.task = task
        self._perms = {}

    def _perm(self, epoch: int) -> np.ndarray:
        perm = self._perms.get(epoch)
        if perm is None:
            perm = np.random.default_rng([self.seed, self.task, epoch]).permutation(self.n)
            self._perms = {e: p for e, p in self._perms.items() if e >= epoch - 1}
            self._perms[epoch] = perm
        return perm

    def indices(self, step: int, batch: int) -> np.ndarray:
        start = step * batch
        first, last = start // self.n, (start + batch - 1) // self.n
        if first == last:
            off = start % self.n
            return self._perm(first)[off : off + batch]
        pos = np.arange(start, start + batch)
        return np.concatenate([self._perm(e)[pos[pos // self.n == e] % self.n] for e in range(first, last + 1)])


def _task_batch(suite: TaskSuite, k: int, stream: _BatchStream, t: int, cfg: TrainConfig):
    task = suite.tasks[k]
    idx = stream.indices(t, cfg.batch_size)
    X, y = task.X_train[idx], task.y_train[idx]
    if task.spec.kind == "denoising":
        noise = task.spec.noise
        return denoise_batch(noise, noise.level_for(t), y, [cfg.seed, k, t, 1])
    return X, y


def evaluate(params: kernel.ModelParams, suite: TaskSuite, split: str = "validation", noise_level=None) -> list[dict]:
    """Per-task loss, plus accuracy for classification tasks.

    Denoising tasks are scored at ``noise_level`` (default: the schedule's
    midpoint) with noise fixed by the suite seed.
    """
    results = []
    cache_by_input = {}
    for k, task in enumerate(suite.tasks):
        X, y = task.view(split)
        if len(X) == 0:
            raise ValueError(f"split {split!r} is empty for task {k}")
        if task.spec.kind == "denoising":
            level = task.spec.noise.steps // 2 if noise_level is None else noise_level
            X, y = denoise_batch(task.spec.noise, level, y, [suite.seed, k, level, 2])
            cache = kernel.forward(params, X, heads=[k])
        else:
            key = id(X)
            cache = cache_by_input.get(key)
            if cache is None:
                cache = cache_by_input[key] = kernel.forward(params, X)
        metrics = {"loss": kernel.task_loss(cache, k, y, task.spec.loss_kind)}
        if task.spec.kind == "classification":
            metrics["accuracy"] = float(np.mean(cache.outputs[k].argmax(axis=1) == np.asarray(y)))
        results.append(metrics)
    return results


def _primary_val_loss(params, suite: TaskSuite) -> float:
    task = suite.primary
    X, y = task.X_val, task.y_val
    if task.spec.kind == "denoising":
        level = task.spec.noise.steps // 2
        X, y = denoise_batch(task.spec.noise, level, y, [suite.seed, 0, level, 2])
    cache = kernel.forward(params, X, heads=[0])
    return kernel.task_loss(cache, 0, y, task.spec.loss_kind)


def _check_fit(suite: TaskSuite, schedule: TaskWeightSchedule, params: kernel.ModelParams):
    if schedule.n_aux is not None and schedule.n_aux != suite.n_aux:
        raise ConfigError(f"schedule {schedule.name!r} has {schedule.n_aux} auxiliary entries, suite has K={suite.n_aux}")
    if params.n_tasks != len(suite.tasks):
        raise ConfigError(f"model has {params.n_tasks} heads, suite has {len(suite.tasks)} tasks")
    if params.input_dim != suite.input_dim:
        raise ConfigError(f"model input dim {params.input_dim} != suite input dim {suite.input_dim}")
    if list(params.output_dims) != suite.output_dims:
        raise ConfigError(f"model head dims {list(params.output_dims)} != task output dims {suite.output_dims}")


def train(
    suite: TaskSuite,
    schedule: TaskWeightSchedule,
    cfg: TrainConfig,
    feedback: FeedbackPolicy | None = None,
    cost: CostModel | None = None,
    *,
    hidden_dims=(32,),
    activation: str = "tanh",
    params: kernel.ModelParams | None = None,
    start_step: int = 0,
    snapshot_steps=(),
) -> RunResult:
    """Train for steps ``start_step .. cfg.total_steps - 1``.

    ``params`` overrides the seeded initialisation (``hidden_dims`` and
    ``activation`` are then ignored). ``snapshot_steps`` asks for copies of
    the parameters as they were at the start of those steps.
    """
    feedback = feedback or FeedbackPolicy()
    if params is None:
        params = kernel.init_params(suite.input_dim, hidden_dims, suite.output_dims, seed=cfg.seed, activation=activation)
    _check_fit(suite, schedule, params)
    if not 0 <= start_step <= cfg.total_steps:
        raise ConfigError(f"start_step {start_step} outside [0, {cfg.total_steps}]")
    if cost is None:
        cost = measure_costs(params, suite, cfg.batch_size)
    elif len(cost.c_marginal) != suite.n_aux:
        raise ConfigError(f"cost model has {len(cost.c_marginal)} marginal costs, suite has K={suite.n_aux}")
    if isinstance(schedule, Variance) and schedule.provider is None:
        schedule = Variance(schedule.params, suite.noise_variance_provider())

    n_tasks = len(suite.tasks)
    kinds = [t.spec.loss_kind for t in suite.tasks]
    streams = [_BatchStream(t.n("train"), cfg.seed, k) for k, t in enumerate(suite.tasks)]
    n_primary = suite.primary.n("train")
    snapshot_steps = set(snapshot_steps)
    snapshots = {}

    records: list[StepRecord] = []
    epoch_losses: list[float] = []
    val_history: list[float] = []
    fisher_ema = None
    forced_stl_from = None
    flops_exp = flops_real = 0.0
    W = feedback.window

    for t in range(start_step, cfg.total_steps):
        tic = time.perf_counter()
        if t in snapshot_steps:
            snapshots[t] = params

        losses, grads = [], []
        for k in range(n_tasks):
            X, y = _task_batch(suite, k, streams[k], t, cfg)
            cache = kernel.forward(params, X, heads=[k])
            loss = kernel.task_loss(cache, k, y, kinds[k])
            if not math.isfinite(loss):
                raise TrainingDiverged(t, k, loss)
            losses.append(loss)
            grads.append(kernel.backward(params, cache, k, y, kinds[k]))
        norms = [g.encoder_norm() for g in grads]

        if schedule.adaptive and isinstance(schedule, Fisher):
            traces = np.array([estimate_fisher_trace(g) for g in grads[1:]])
            fisher_ema = traces if fisher_ema is None else schedule.ema_decay * fisher_ema + (1 - schedule.ema_decay) * traces
        if forced_stl_from is not None:
            gammas = np.zeros(suite.n_aux)
        else:
            inputs = ScheduleInputs(norms[0], norms[1:], () if fisher_ema is None else fisher_ema)
            gammas = np.asarray(schedule.weights(t, suite.n_aux, inputs), dtype=np.float64)
            if gammas.shape != (suite.n_aux,) or np.any(gammas < 0) or np.any(~np.isfinite(gammas)):
                raise ConfigError(f"schedule {schedule.name!r} produced invalid weights {gammas.tolist()} at step {t}")

        eff = combine(grads[0], grads[1:], gammas)
        alignment = pl_alignment(grads[0], eff)
        params = sgd_step(params, eff, cfg.learning_rate)
        flops_exp += cost.step_cost(gammas, "expected")
        flops_real += cost.step_cost(gammas, "realized")

        done_before = (t * cfg.batch_size) // n_primary
        done_after = ((t + 1) * cfg.batch_size) // n_primary
        if done_after > done_before:
            epoch_losses.extend([_primary_val_loss(params, suite)] * (done_after - done_before))

        if feedback.enabled and forced_stl_from is None:
            val_history.append(_primary_val_loss(params, suite))
            if np.any(gammas > 0) and len(val_history) >= 2 * W:
                now = sum(val_history[-W:]) / W
                before = sum(val_history[-2 * W : -W]) / W
                rel = (before - now) / max(abs(before), 1e-12)
                if rel < feedback.min_relative_improvement:
                    forced_stl_from = t + 1
                    logger.info("feedback trigger: switching to single-task from step %d", t + 1)

        records.append(
            StepRecord(
                step=t,
                losses=losses,
                gammas=gammas.tolist(),
                grad_norms=norms,
                alignment=alignment,
                flops_expected=flops_exp,
                flops_realized=flops_real,
                wall_ms=(time.perf_counter() - tic) * 1e3,
            )
        )

    if cfg.total_steps in snapshot_steps:
        snapshots[cfg.total_steps] = params
    final_val = _primary_val_loss(params, suite)
    if (cfg.total_steps * cfg.batch_size) % n_primary or not epoch_losses:
        epoch_losses.append(final_val)
    convergence = next(
        (e for e, v in enumerate(epoch_losses, start=1) if abs(v - final_val) <= 0.01 * abs(final_val)), None
    )

    switch_step = None
    t_switch = getattr(schedule, "t_switch", None)
    if t_switch is not None and t_switch < cfg.total_steps:
        switch_step = int(t_switch)
    if forced_stl_from is not None and (switch_step is None or forced_stl_from < switch_step):
        switch_step = forced_stl_from

    return RunResult(
        params=params,
        records=records,
        convergence_epoch=convergence,
        switch_step_effective=switch_step,
        final_metrics=evaluate(params, suite, "validation"),
        epoch_val_losses=epoch_losses,
        feedback_step=forced_stl_from,
        snapshots=snapshots,
        cost=cost,
    )
