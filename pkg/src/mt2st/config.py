"""Experiment configuration: a YAML key tree, validated into plain dataclasses.

Example::

    suite:
      input_dim: 32
      n_aux: 2
      rho: 0.9
      samples: 2000
      class_counts: 4
    model:
      hidden_dims: [16]
    train:
      learning_rate: 0.05
      total_steps: 3000
      batch_size: 32
    seeds: [0, 1, 2]
    strategies:
      - {name: STL, type: stl}
      - {name: MTL, type: mtl, gammas: 1.0}
      - {name: MT2ST-D, type: diminish, gamma0: 1.0, eta: 0.002}
      - {name: MT2ST-S, type: switch, t_switch: 1500}
    feedback: {enabled: false, window: 50, min_relative_improvement: 0.001}
    output_dir: results
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .optimizer import TrainConfig
from .schedules import SCHEDULE_TYPES, TaskWeightSchedule, Variance, schedule_from_dict
from .tasks import KINDS, DenoiseSchedule, generate_suite
from .trainer import ConfigError, FeedbackPolicy

OUTPUT_DIR_ENV = "MT2ST_OUTPUT_DIR"


@dataclass(frozen=True)
class SuiteConfig:
    input_dim: int = 32
    n_aux: int = 2
    rho: float | tuple = 0.9
    primary_rho: float = 1.0
    samples: int = 2000
    class_counts: int | tuple = 4
    kinds: str | tuple = "classification"
    latent_dim: int | None = None
    validation_fraction: float = 0.2
    label_flip: float = 0.05
    target_noise_var: float = 0.01
    noise_schedules: tuple = ()

    def build(self, seed: int):
        return generate_suite(
            seed,
            self.input_dim,
            self.n_aux,
            rho=self.rho,
            samples=self.samples,
            class_counts=self.class_counts,
            kinds=self.kinds,
            primary_rho=self.primary_rho,
            latent_dim=self.latent_dim,
            validation_fraction=self.validation_fraction,
            label_flip=self.label_flip,
            target_noise_var=self.target_noise_var,
            noise_schedules=list(self.noise_schedules),
        )


@dataclass(frozen=True)
class ModelConfig:
    hidden_dims: tuple = (16,)
    activation: str = "tanh"


@dataclass(frozen=True)
class StrategyConfig:
    name: str
    spec: dict

    def build(self) -> TaskWeightSchedule:
        return schedule_from_dict(self.spec)


@dataclass(frozen=True)
class ExperimentConfig:
    suite: SuiteConfig
    model: ModelConfig
    train: TrainConfig
    seeds: tuple
    strategies: tuple
    feedback: FeedbackPolicy = field(default_factory=FeedbackPolicy)
    output_dir: str = "results"
    record_timing: bool = False

    def resolved_output_dir(self, base: Path | None = None) -> Path:
        env = os.environ.get(OUTPUT_DIR_ENV)
        out = Path(env) if env else Path(self.output_dir)
        if not out.is_absolute() and base is not None:
            out = base / out
        return out

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(self.train.learning_rate, self.train.total_steps, self.train.batch_size, seed)


_TOP_KEYS = {"suite", "model", "train", "seeds", "strategies", "feedback", "output_dir", "record_timing"}


def _fail(path: str, msg: str):
    raise ConfigError(f"{path}: {msg}")


def _section(doc: dict, key: str, allowed: set) -> dict:
    sec = doc.get(key, {}) or {}
    if not isinstance(sec, dict):
        _fail(key, "must be a mapping")
    unknown = set(sec) - allowed
    if unknown:
        _fail(f"{key}.{sorted(unknown)[0]}", "unknown key")
    return sec


def _int(value, path, minimum=None):
    if isinstance(value, bool) or not isinstance(value, int):
        _fail(path, f"expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        _fail(path, f"must be >= {minimum}, got {value}")
    return value


def _num(value, path, lo=None, hi=None, lo_open=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        _fail(path, f"expected a number, got {value!r}")
    value = float(value)
    if lo is not None and (value <= lo if lo_open else value < lo):
        _fail(path, f"must be {'>' if lo_open else '>='} {lo}, got {value}")
    if hi is not None and value > hi:
        _fail(path, f"must be <= {hi}, got {value}")
    return value


def _scalar_or_list(value, n, path, conv):
    if isinstance(value, list):
        if len(value) != n:
            _fail(path, f"expected {n} entries, got {len(value)}")
        return tuple(conv(v, f"{path}[{i}]") for i, v in enumerate(value))
    return conv(value, path)


def _parse_suite(doc) -> SuiteConfig:
    sec = _section(doc, "suite", set(SuiteConfig.__dataclass_fields__))
    d = SuiteConfig()
    K = _int(sec.get("n_aux", d.n_aux), "suite.n_aux", 0)

    def kind(v, p):
        if v not in KINDS:
            _fail(p, f"must be one of {list(KINDS)}, got {v!r}")
        return v

    kinds = _scalar_or_list(sec.get("kinds", d.kinds), K + 1, "suite.kinds", kind)
    kinds_list = [kinds] * (K + 1) if isinstance(kinds, str) else list(kinds)
    schedules = []
    for i, s in enumerate(sec.get("noise_schedules", []) or []):
        p = f"suite.noise_schedules[{i}]"
        if not isinstance(s, dict):
            _fail(p, "must be a mapping with steps, sigma2_min, sigma2_max")
        try:
            schedules.append(
                DenoiseSchedule(
                    _int(s.get("steps"), f"{p}.steps", 1),
                    _num(s.get("sigma2_min", 0.01), f"{p}.sigma2_min", 0, lo_open=True),
                    _num(s.get("sigma2_max", 1.0), f"{p}.sigma2_max", 0, lo_open=True),
                )
            )
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            _fail(p, str(exc))
    if len(schedules) != kinds_list.count("denoising"):
        _fail("suite.noise_schedules", f"need one schedule per denoising task ({kinds_list.count('denoising')})")

    input_dim = _int(sec.get("input_dim", d.input_dim), "suite.input_dim", 1)
    latent = sec.get("latent_dim", d.latent_dim)
    latent = None if latent is None else _int(latent, "suite.latent_dim", 1)
    m = latent if latent is not None else max(1, min(8, input_dim // (K + 2)))
    if m * (K + 2) > input_dim:
        _fail("suite.latent_dim", f"latent_dim * (n_aux + 2) = {m * (K + 2)} exceeds input_dim {input_dim}")
    return SuiteConfig(
        input_dim=input_dim,
        n_aux=K,
        rho=_scalar_or_list(sec.get("rho", d.rho), K, "suite.rho", lambda v, p: _num(v, p, 0.0, 1.0)),
        primary_rho=_num(sec.get("primary_rho", d.primary_rho), "suite.primary_rho", 0.0, 1.0),
        samples=_int(sec.get("samples", d.samples), "suite.samples", 2),
        class_counts=_scalar_or_list(
            sec.get("class_counts", d.class_counts), K + 1, "suite.class_counts", lambda v, p: _int(v, p, 1)
        ),
        kinds=kinds,
        latent_dim=latent,
        validation_fraction=_num(
            sec.get("validation_fraction", d.validation_fraction), "suite.validation_fraction", 0.0, 1.0, lo_open=True
        ),
        label_flip=_num(sec.get("label_flip", d.label_flip), "suite.label_flip", 0.0, 1.0),
        target_noise_var=_num(sec.get("target_noise_var", d.target_noise_var), "suite.target_noise_var", 0.0),
        noise_schedules=tuple(schedules),
    )


def _parse_strategy(raw, i, K) -> StrategyConfig:
    p = f"strategies[{i}]"
    if not isinstance(raw, dict):
        _fail(p, "must be a mapping")
    spec = dict(raw)
    name = spec.pop("name", None)
    if not isinstance(name, str) or not name:
        _fail(f"{p}.name", "required non-empty string")
    kind = spec.get("type")
    if kind not in SCHEDULE_TYPES:
        _fail(f"{p}.type", f"must be one of {sorted(SCHEDULE_TYPES)}, got {kind!r}")
    if kind == "diminish" and "tasks" not in spec:
        one = {k: spec.pop(k) for k in ("gamma0", "eta", "nu") if k in spec}
        if "gamma0" not in one or "eta" not in one:
            _fail(p, "diminish needs gamma0 and eta (or a per-task 'tasks' list)")
        spec["tasks"] = [one] * K
    if kind == "diminish" and len(spec["tasks"]) != K:
        _fail(f"{p}.tasks", f"expected {K} entries (one per auxiliary task), got {len(spec['tasks'])}")
    if kind == "mtl" and isinstance(spec.get("gammas"), list) and len(spec["gammas"]) != K:
        _fail(f"{p}.gammas", f"expected {K} entries, got {len(spec['gammas'])}")
    try:
        schedule_from_dict(spec)
    except (ValueError, KeyError, TypeError) as exc:
        _fail(p, str(exc))
    return StrategyConfig(name, spec)


def parse_config(doc) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("<root>: config must be a mapping")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        _fail(sorted(unknown)[0], "unknown key")
    suite = _parse_suite(doc)

    msec = _section(doc, "model", {"hidden_dims", "activation"})
    hidden = msec.get("hidden_dims", [16])
    if not isinstance(hidden, list):
        _fail("model.hidden_dims", "must be a list of layer widths")
    hidden = tuple(_int(h, f"model.hidden_dims[{i}]", 1) for i, h in enumerate(hidden))
    activation = msec.get("activation", "tanh")
    if activation not in ("tanh", "linear"):
        _fail("model.activation", f"must be 'tanh' or 'linear', got {activation!r}")

    tsec = _section(doc, "train", {"learning_rate", "total_steps", "batch_size"})
    train = TrainConfig(
        _num(tsec.get("learning_rate", 0.05), "train.learning_rate", 0.0, lo_open=True),
        _int(tsec.get("total_steps", 1000), "train.total_steps", 1),
        _int(tsec.get("batch_size", 32), "train.batch_size", 1),
        0,
    )

    seeds = doc.get("seeds")
    if not isinstance(seeds, list) or not seeds:
        _fail("seeds", "need a non-empty list of integer seeds")
    seeds = tuple(_int(s, f"seeds[{i}]", 0) for i, s in enumerate(seeds))
    if len(set(seeds)) != len(seeds):
        _fail("seeds", "duplicate seed")

    raw = doc.get("strategies")
    if not isinstance(raw, list) or not raw:
        _fail("strategies", "need a non-empty list")
    strategies = tuple(_parse_strategy(s, i, suite.n_aux) for i, s in enumerate(raw))
    names = [s.name for s in strategies]
    if len(set(names)) != len(names):
        _fail("strategies", "duplicate strategy name")
    kinds = [suite.kinds] * (suite.n_aux + 1) if isinstance(suite.kinds, str) else list(suite.kinds)
    if any(s.spec["type"] == "variance" for s in strategies) and any(k != "denoising" for k in kinds[1:]):
        _fail("strategies", "a variance strategy needs every auxiliary task to be 'denoising'")

    fsec = _section(doc, "feedback", {"enabled", "window", "min_relative_improvement"})
    enabled = fsec.get("enabled", False)
    if not isinstance(enabled, bool):
        _fail("feedback.enabled", "must be true or false")
    feedback = FeedbackPolicy(
        window=_int(fsec.get("window", 50), "feedback.window", 2),
        min_relative_improvement=_num(fsec.get("min_relative_improvement", 1e-3), "feedback.min_relative_improvement", 0.0),
        enabled=enabled,
    )

    out = doc.get("output_dir", "results")
    if not isinstance(out, str):
        _fail("output_dir", "must be a path string")
    timing = doc.get("record_timing", False)
    if not isinstance(timing, bool):
        _fail("record_timing", "must be true or false")
    return ExperimentConfig(suite, ModelConfig(hidden, activation), train, seeds, strategies, feedback, out, timing)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"<file>: {path} does not exist") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"<file>: not valid YAML ({exc})") from None
    return parse_config(doc)
