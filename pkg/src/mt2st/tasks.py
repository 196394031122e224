"""Seeded synthetic multi-task problems and a toy denoising task.

All tasks in a generated suite share one Gaussian input matrix. Task ``k``
reads the inputs through the latent map ``rho_k * G + (1 - rho_k) * P_k``
where ``G`` is shared and ``P_k`` is private to the task. ``G`` and every
``P_k`` project onto mutually orthogonal input subspaces, so ``rho = 0``
makes a task's targets independent of the shared latent, not merely
uncorrelated in expectation.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .kernel import LOSS_KINDS

KINDS = ("classification", "regression", "denoising")
SUITE_FORMAT = "mt2st-suite v1"


@dataclass(frozen=True)
class DenoiseSchedule:
    """Linear noise-variance schedule over ``steps + 1`` noise levels."""

    steps: int
    sigma2_min: float = 0.01
    sigma2_max: float = 1.0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if not self.sigma2_min > 0:
            raise ValueError(f"sigma2_min must be > 0, got {self.sigma2_min}")
        if not self.sigma2_max >= self.sigma2_min:
            raise ValueError(f"sigma2_max ({self.sigma2_max}) must be >= sigma2_min ({self.sigma2_min})")

    def variance(self, t: int) -> float:
        if not 0 <= t <= self.steps:
            raise ValueError(f"noise step {t} outside [0, {self.steps}]")
        return self.sigma2_min + (self.sigma2_max - self.sigma2_min) * t / self.steps

    def level_for(self, train_step: int) -> int:
        """Noise level used at a training step; cycles when training outlasts the schedule."""
        return train_step % (self.steps + 1)


def denoise_batch(schedule: DenoiseSchedule, t: int, clean, seed) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(clean + sqrt(var(t)) * eps, eps)`` with ``eps ~ N(0, I)``."""
    var = schedule.variance(t)
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.random.default_rng(seed).standard_normal(clean.shape)
    return clean + math.sqrt(var) * noise, noise


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    output_dim: int
    relatedness: float = 1.0
    samples: int = 2000
    noise: DenoiseSchedule | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.output_dim < 1:
            raise ValueError(f"output_dim must be >= 1, got {self.output_dim}")
        if not 0.0 <= self.relatedness <= 1.0:
            raise ValueError(f"relatedness must lie in [0, 1], got {self.relatedness}")
        if self.samples < 1:
            raise ValueError(f"samples must be >= 1, got {self.samples}")
        if self.kind == "denoising" and self.noise is None:
            raise ValueError("denoising tasks need a DenoiseSchedule")

    @property
    def loss_kind(self) -> str:
        return LOSS_KINDS[0] if self.kind == "classification" else LOSS_KINDS[1]


@dataclass
class Task:
    """A task's data. For denoising tasks the stored targets are the clean signals."""

    spec: TaskSpec
    X_train: np.ndarray
    y_train: np.ndarray
    X_val: np.ndarray
    y_val: np.ndarray

    def view(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        if split == "train":
            return self.X_train, self.y_train
        if split == "validation":
            return self.X_val, self.y_val
        raise ValueError(f"split must be 'train' or 'validation', got {split!r}")

    def n(self, split: str = "train") -> int:
        return len(self.view(split)[0])


@dataclass
class TaskSuite:
    primary: Task
    auxiliaries: list[Task]
    input_dim: int
    validation_fraction: float = 0.2
    seed: int = 0
    truth: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError(f"validation_fraction must lie in (0, 1), got {self.validation_fraction}")
        for k, task in enumerate(self.tasks):
            if task.X_train.shape[-1] != self.input_dim or task.X_val.shape[-1] != self.input_dim:
                raise ValueError(f"task {k} inputs do not have input_dim {self.input_dim}")
            if task.spec.kind == "denoising" and task.spec.output_dim != self.input_dim:
                raise ValueError(f"denoising task {k} must predict noise of dim {self.input_dim}")

    @property
    def tasks(self) -> list[Task]:
        return [self.primary, *self.auxiliaries]

    @property
    def n_aux(self) -> int:
        return len(self.auxiliaries)

    @property
    def output_dims(self) -> list[int]:
        return [t.spec.output_dim for t in self.tasks]

    def noise_variance_provider(self):
        """Step -> auxiliary noise variances, read from the denoising task schedules."""
        schedules = []
        for k, task in enumerate(self.auxiliaries, start=1):
            if task.spec.noise is None:
                raise ValueError(f"auxiliary task {k} ({task.spec.kind}) has no noise schedule")
            schedules.append(task.spec.noise)

        def provider(t):
            return [s.variance(s.level_for(t)) for s in schedules]

        return provider

    @classmethod
    def from_arrays(
        cls,
        X,
        targets: Sequence,
        specs: Sequence[TaskSpec],
        validation_fraction: float = 0.2,
        seed: int = 0,
    ) -> "TaskSuite":
        """Split shared inputs and per-task targets into train/validation tasks."""
        X = np.asarray(X, dtype=np.float64)
        n = len(X)
        if len(targets) != len(specs) or not specs:
            raise ValueError("need one target array per task spec, primary first")
        perm = np.random.default_rng(seed).permutation(n)
        n_val = min(max(1, int(round(validation_fraction * n))), n - 1)
        val_idx, train_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
        X_train, X_val = X[train_idx], X[val_idx]
        tasks = []
        for spec, y in zip(specs, targets):
            y = X if spec.kind == "denoising" else np.asarray(y)
            if len(y) != n:
                raise ValueError(f"targets have {len(y)} rows, inputs have {n}")
            if spec.kind == "denoising":
                tasks.append(Task(spec, X_train, X_train, X_val, X_val))
                continue
            tasks.append(Task(spec, X_train, y[train_idx], X_val, y[val_idx]))
        suite = cls(tasks[0], tasks[1:], X.shape[-1], validation_fraction, seed)
        suite.truth["train_index"] = train_idx
        suite.truth["validation_index"] = val_idx
        return suite


def _orthonormal_blocks(rng, d: int, m: int, n_blocks: int) -> list[np.ndarray]:
    if m * n_blocks > d:
        raise ValueError(
            f"latent_dim {m} x {n_blocks} latent maps exceeds input_dim {d}; "
            "orthogonal shared/private subspaces need latent_dim * (K + 2) <= d"
        )
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return [q[:, i * m : (i + 1) * m].T.copy() for i in range(n_blocks)]


def generate_suite(
    seed: int,
    d: int,
    K: int,
    rho=0.9,
    samples: int = 2000,
    class_counts=4,
    kinds=None,
    primary_rho: float = 1.0,
    latent_dim: int | None = None,
    validation_fraction: float = 0.2,
    label_flip: float = 0.05,
    target_noise_var: float = 0.01,
    noise_schedules=None,
) -> TaskSuite:
    """Generate a primary task plus ``K`` auxiliary tasks.

    ``rho``, ``class_counts`` and ``kinds`` may be scalars or per-task lists;
    ``rho`` covers the auxiliaries only (the primary uses ``primary_rho``),
    while ``class_counts`` and ``kinds`` cover all ``K + 1`` tasks, primary
    first. For regression tasks ``class_counts`` is the target dimension.
    ``noise_schedules`` gives the DenoiseSchedule of each denoising task in
    order of appearance.
    """
    n_tasks = K + 1
    rhos = [primary_rho, *_per_task(rho, K, "rho")]
    counts = _per_task(class_counts, n_tasks, "class_counts")
    kinds = _per_task(kinds if kinds is not None else "classification", n_tasks, "kinds")
    schedules = list(noise_schedules or [])
    m = latent_dim if latent_dim is not None else max(1, min(8, d // (K + 2)))

    rng = np.random.default_rng(seed)
    shared, primary_private, *aux_private = _orthonormal_blocks(rng, d, m, K + 2)
    private = [primary_private, *aux_private]
    X = rng.standard_normal((samples, d))

    specs, targets, heads = [], [], []
    for k in range(n_tasks):
        kind = kinds[k]
        noise = None
        if kind == "denoising":
            if not schedules:
                raise ValueError(f"task {k} is denoising but no noise schedule was supplied")
            noise = schedules.pop(0)
        out_dim = d if kind == "denoising" else int(counts[k])
        spec = TaskSpec(kind, out_dim, float(rhos[k]), samples, noise)
        latent_map = rhos[k] * shared + (1.0 - rhos[k]) * private[k]
        head = rng.normal(0.0, 1.0 / math.sqrt(m), size=(out_dim, m))
        scores = (X @ latent_map.T) @ head.T
        if kind == "classification":
            y = scores.argmax(axis=1)
            flip = rng.random(samples) < label_flip
            if out_dim > 1:
                shift = rng.integers(1, out_dim, size=samples)
                y = np.where(flip, (y + shift) % out_dim, y)
            targets.append(y.astype(np.int64))
        elif kind == "regression":
            targets.append(scores + rng.normal(0.0, math.sqrt(target_noise_var), size=scores.shape))
        else:
            targets.append(X)
        specs.append(spec)
        heads.append(head)

    suite = TaskSuite.from_arrays(X, targets, specs, validation_fraction, seed)
    suite.truth.update(shared_map=shared, private_maps=private, heads=heads, latent_dim=m, inputs=X)
    return suite


def _per_task(value, n: int, name: str) -> list:
    if isinstance(value, (str, int, float, np.integer, np.floating)):
        return [value] * n
    value = list(value)
    if len(value) != n:
        raise ValueError(f"{name}: expected {n} entries, got {len(value)}")
    return value


def dump_suite(suite: TaskSuite) -> str:
    """Columnar text form: ``#`` header lines, a column-name line, then one row per sample."""
    buf = io.StringIO()
    buf.write(f"# {SUITE_FORMAT}\n")
    buf.write(
        f"# input_dim={suite.input_dim} n_tasks={len(suite.tasks)} seed={suite.seed} "
        f"validation_fraction={suite.validation_fraction!r}\n"
    )
    for k, task in enumerate(suite.tasks):
        s = task.spec
        line = f"# task {k} kind={s.kind} output_dim={s.output_dim} relatedness={s.relatedness!r} samples={s.samples}"
        if s.noise is not None:
            line += f" steps={s.noise.steps} sigma2_min={s.noise.sigma2_min!r} sigma2_max={s.noise.sigma2_max!r}"
        buf.write(line + "\n")
    cols = ["split"] + [f"x{i}" for i in range(suite.input_dim)]
    for k, task in enumerate(suite.tasks):
        if task.spec.kind == "classification":
            cols.append(f"y{k}")
        elif task.spec.kind == "regression":
            cols.extend(f"y{k}_{j}" for j in range(task.spec.output_dim))
    buf.write(" ".join(cols) + "\n")
    for split in ("train", "validation"):
        X = suite.primary.view(split)[0]
        for i in range(len(X)):
            row = [split] + [repr(float(v)) for v in X[i]]
            for task in suite.tasks:
                y = task.view(split)[1]
                if task.spec.kind == "classification":
                    row.append(str(int(y[i])))
                elif task.spec.kind == "regression":
                    row.extend(repr(float(v)) for v in np.atleast_1d(y[i]))
            buf.write(" ".join(row) + "\n")
    return buf.getvalue()


def load_suite(text: str) -> TaskSuite:
    """Inverse of ``dump_suite`` (ground-truth maps are not stored)."""
    lines = text.splitlines()
    if not lines or lines[0] != f"# {SUITE_FORMAT}":
        raise ValueError(f"not a {SUITE_FORMAT} document")
    meta = dict(kv.split("=", 1) for kv in lines[1][2:].split())
    n_tasks = int(meta["n_tasks"])
    specs = []
    for line in lines[2 : 2 + n_tasks]:
        fields = dict(kv.split("=", 1) for kv in line[2:].split()[2:])
        noise = None
        if "steps" in fields:
            noise = DenoiseSchedule(int(fields["steps"]), float(fields["sigma2_min"]), float(fields["sigma2_max"]))
        specs.append(
            TaskSpec(fields["kind"], int(fields["output_dim"]), float(fields["relatedness"]), int(fields["samples"]), noise)
        )
    d = int(meta["input_dim"])
    rows = {"train": [], "validation": []}
    for line in lines[3 + n_tasks :]:
        if line:
            parts = line.split()
            rows[parts[0]].append(parts[1:])
    tasks_data = {split: _parse_rows(rows[split], d, specs) for split in rows}
    tasks = []
    for k, spec in enumerate(specs):
        Xt, yt = tasks_data["train"][0], tasks_data["train"][1][k]
        Xv, yv = tasks_data["validation"][0], tasks_data["validation"][1][k]
        tasks.append(Task(spec, Xt, yt, Xv, yv))
    return TaskSuite(tasks[0], tasks[1:], d, float(meta["validation_fraction"]), int(meta["seed"]))


def _parse_rows(rows, d: int, specs):
    n = len(rows)
    X = np.array([[float(v) for v in r[:d]] for r in rows], dtype=np.float64).reshape(n, d)
    ys = []
    col = d
    for spec in specs:
        if spec.kind == "classification":
            ys.append(np.array([int(r[col]) for r in rows], dtype=np.int64))
            col += 1
        elif spec.kind == "regression":
            w = spec.output_dim
            ys.append(np.array([[float(v) for v in r[col : col + w]] for r in rows], dtype=np.float64).reshape(n, w))
            col += w
        else:
            ys.append(X)
    return X, ys
