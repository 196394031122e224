"""Training-cost accounting and the compression-rate metric."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .kernel import ModelParams, flops_breakdown

MODES = ("expected", "realized")


@dataclass(frozen=True)
class CostModel:
    """Per-step FLOPs of primary-only training plus each auxiliary task's marginal cost.

    ``source`` records where the constants came from: ``"analytic"`` for
    hand-supplied values, ``"measured"`` when tallied from a model's shapes.
    """

    c_stl: float
    c_marginal: tuple[float, ...] = ()
    source: str = "analytic"

    def __post_init__(self):
        object.__setattr__(self, "c_marginal", tuple(float(c) for c in self.c_marginal))
        if not self.c_stl > 0:
            raise ValueError(f"c_stl must be > 0, got {self.c_stl}")
        if any(not c > 0 for c in self.c_marginal):
            raise ValueError(f"marginal costs must be > 0, got {list(self.c_marginal)}")
        if self.source not in ("analytic", "measured"):
            raise ValueError(f"source must be 'analytic' or 'measured', got {self.source!r}")

    @property
    def c_mtl(self) -> float:
        return self.c_stl + sum(self.c_marginal)

    def step_cost(self, gammas, mode: str = "expected") -> float:
        g = np.asarray(gammas, dtype=np.float64)
        if g.size != len(self.c_marginal):
            raise ValueError(f"expected {len(self.c_marginal)} weights, got {g.size}")
        if mode == "expected":
            return self.c_stl + float(np.dot(g, self.c_marginal)) if g.size else float(self.c_stl)
        if mode == "realized":
            return self.c_stl + float(sum(c for gk, c in zip(g, self.c_marginal) if gk > 0))
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


def mt2st_cost(gammas_over_time: Iterable[Sequence[float]], cm: CostModel, mode: str = "expected") -> float:
    """Total FLOPs of a run given its per-step weight vectors.

    ``expected`` scales each marginal cost by its weight; ``realized`` charges
    the full marginal cost whenever the weight is positive.
    """
    return float(sum(cm.step_cost(g, mode) for g in gammas_over_time))


def compression_rate(cost_run: float, cost_stl_baseline: float) -> float:
    """Percentage FLOPs reduction relative to the STL baseline (negative if costlier)."""
    if not cost_stl_baseline > 0:
        raise ValueError(f"STL baseline cost must be > 0, got {cost_stl_baseline}")
    return 100.0 * (1.0 - cost_run / cost_stl_baseline)


def measure_costs(params: ModelParams, suite, batch: int, seq_len: int = 1) -> CostModel:
    """Cost constants tallied from the model's layer shapes.

    The encoder forward is shared, so it is charged once in ``c_stl``. Each
    auxiliary task adds its head forward/backward plus its own encoder backward.
    """
    n_tasks = len(suite.tasks) if hasattr(suite, "tasks") else int(suite)
    if params.n_tasks != n_tasks:
        raise ValueError(f"model has {params.n_tasks} heads, suite has {n_tasks} tasks")
    b = flops_breakdown(params, batch, seq_len)
    shared = b["encoder_forward"] + b["encoder_backward"]
    heads = b["head_forward_backward"]
    c_stl = shared + heads[0]
    marginal = tuple(b["encoder_backward"] + h for h in heads[1:])
    return CostModel(float(c_stl), marginal, source="measured")
