"""Run configuration: YAML file, ``--set key.path=value`` overrides and validation."""

import dataclasses
import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import yaml

from .errors import ConfigError
from .neural import AdamConfig
from .problems import (
    FunctionClass,
    FunctionClassSpec,
    OdeSystem,
    OdeSystemId,
    hybrid_pendulum,
    lorenz,
)
from .rl import (
    BROKEN_POLY_ACTIONS,
    BROKEN_POLY_TOL,
    LORENZ_ACTIONS,
    LORENZ_TOL,
    PENDULUM_ACTIONS,
    PENDULUM_CONSTANT_STEPS,
    PENDULUM_TOL,
    SINES_ACTIONS,
    SINES_TOL,
    ActionSet,
    RewardConfig,
    RewardVariant,
    TrainingConfig,
)

logger = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "QSTEPPER_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = "./qstepper_output"
RESOLVED_CONFIG_NAME = "resolved_config.yaml"
# discount factor when training.gamma is not set
DEFAULT_GAMMA = {"quadrature": 0.0, "ode": 0.9}


class _ConfigLoader(yaml.SafeLoader):
    """Safe loader that also reads exponent-only numbers such as 1e-5 as floats."""


_ConfigLoader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*)(?:\.[0-9_]*)?[eE][-+]?[0-9]+$"),
    list("-+0123456789"),
)


def _load_yaml(stream):
    return yaml.load(stream, Loader=_ConfigLoader)


def default_output_dir() -> str:
    return os.environ.get(OUTPUT_DIR_ENV, DEFAULT_OUTPUT_DIR)


@dataclass
class ProblemConfig:
    kind: str = "quadrature"
    function_class: str = FunctionClass.SUPERPOSED_SINES_5.value
    domain: Optional[List[float]] = None
    degree: Optional[int] = None
    coefficient_law: str = "uniform"
    system: str = OdeSystemId.LORENZ.value
    t_span: List[float] = field(default_factory=lambda: [0.0, 200.0])
    initial_condition: Optional[List[float]] = None
    random_initial_conditions: bool = False
    stop_at_first_switch: bool = False
    oracle: str = "closed_form"
    oracle_tol: float = 1e-10


@dataclass
class RewardSettings:
    variant: str = RewardVariant.PIECEWISE.value
    tol: Optional[float] = None
    L: float = 3.0


@dataclass
class LearnerSettings:
    actions: Optional[List[float]] = None
    memory: int = 0
    hidden_layers: int = 4
    hidden_width: Optional[int] = None
    reward: RewardSettings = field(default_factory=RewardSettings)


@dataclass
class TrainingSettings:
    max_episodes: int = 2000
    min_episodes: int = 200
    gamma: Optional[float] = None
    alpha: float = 0.8
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    minibatch_size: Optional[int] = None
    updates_per_episode: int = 1
    episode_length: Optional[float] = None
    window: int = 50
    lag: int = 100
    threshold: float = 0.01
    scaler_episodes: int = 5


@dataclass
class MetaSettings:
    base_checkpoints: List[str] = field(default_factory=list)
    constant_steps: List[float] = field(default_factory=lambda: list(PENDULUM_CONSTANT_STEPS))


@dataclass
class BenchSettings:
    function_count: int = 5000
    simpson_steps: List[float] = field(default_factory=lambda: [0.05, 0.1, 0.15, 0.2, 0.3, 0.4, 0.5])
    subdivision_budgets: List[int] = field(default_factory=lambda: [41, 61, 81, 121, 161, 241, 321])
    checkpoints: List[str] = field(default_factory=list)
    rk45_tolerances: List[float] = field(default_factory=lambda: [1e-3, 1e-4, 1e-5, 1e-6])
    random_ics: int = 0
    workers: int = 1
    optimal_weights: bool = True
    optimal_weights_samples: int = 10_000


@dataclass
class WeightsSettings:
    mode: str = "fit"
    function_class: str = FunctionClass.POLY_DEG_N.value
    degree: int = 4
    coefficient_law: str = "normal"
    interval: List[float] = field(default_factory=lambda: [0.0, 1.0])
    samples: int = 100_000
    holdout: float = 0.0
    grid_nodes: int = 1
    resolution: Optional[int] = None
    common_random_numbers: bool = False
    initial_nodes: List[float] = field(default_factory=lambda: [0.2])
    max_iter: int = 400


@dataclass
class RunConfig:
    """Everything a subcommand needs; echoed into the output directory as resolved_config.yaml."""

    seed: int = 0
    output_dir: str = field(default_factory=default_output_dir)
    checkpoint: Optional[str] = None
    theme: str = "light"
    problem: ProblemConfig = field(default_factory=ProblemConfig)
    learner: LearnerSettings = field(default_factory=LearnerSettings)
    training: TrainingSettings = field(default_factory=TrainingSettings)
    meta: MetaSettings = field(default_factory=MetaSettings)
    bench: BenchSettings = field(default_factory=BenchSettings)
    weights: WeightsSettings = field(default_factory=WeightsSettings)

    def validate(self) -> "RunConfig":
        _check(self.seed >= 0, "seed", "must be non-negative")
        _check(self.theme in ("light", "dark"), "theme", f"unknown theme {self.theme!r}")
        p = self.problem
        _check(p.kind in ("quadrature", "ode"), "problem.kind", f"must be quadrature or ode, got {p.kind!r}")
        if p.kind == "quadrature":
            self.function_spec()
        else:
            self.ode_system()
        _check(len(p.t_span) == 2 and p.t_span[1] > p.t_span[0], "problem.t_span", f"need [t0, t1] with t1 > t0, got {p.t_span}")
        _check(p.oracle in ("closed_form", "fine_simpson"), "problem.oracle", f"unknown oracle {p.oracle!r}")
        _check(0 < p.oracle_tol < 1e-3, "problem.oracle_tol", "must lie in (0, 1e-3)")

        lr = self.learner
        _check(lr.memory >= 0, "learner.memory", "must be non-negative")
        _check(lr.hidden_layers >= 1, "learner.hidden_layers", "must be at least 1")
        _check(lr.hidden_width is None or lr.hidden_width >= 1, "learner.hidden_width", "must be positive")
        self.reward_config()

        t = self.training
        _check(t.max_episodes >= 0, "training.max_episodes", "must be non-negative")
        _check(t.min_episodes >= 0, "training.min_episodes", "must be non-negative")
        _check(t.learning_rate > 0, "training.learning_rate", "must be positive")
        _check(t.weight_decay >= 0, "training.weight_decay", "must be non-negative")
        _check(t.episode_length is None or t.episode_length > 0, "training.episode_length", "must be positive")
        _check(0 < t.threshold < 1, "training.threshold", "must lie in (0, 1)")
        _check(t.scaler_episodes >= 0, "training.scaler_episodes", "must be non-negative")
        self.training_config().validate()

        m = self.meta
        _check(all(h > 0 for h in m.constant_steps), "meta.constant_steps", "step sizes must be positive")

        b = self.bench
        _check(b.function_count > 0, "bench.function_count", "the benchmark needs at least one function")
        _check(all(h > 0 for h in b.simpson_steps), "bench.simpson_steps", "step sizes must be positive")
        _check(all(n >= 5 for n in b.subdivision_budgets), "bench.subdivision_budgets", "budgets below 5 evaluations")
        _check(all(0 < tol < 1 for tol in b.rk45_tolerances), "bench.rk45_tolerances", "tolerances must lie in (0, 1)")
        _check(b.random_ics >= 0, "bench.random_ics", "must be non-negative")
        _check(b.workers >= 1, "bench.workers", "must be at least 1")
        _check(b.optimal_weights_samples >= 3, "bench.optimal_weights_samples", "need at least 3 samples")

        w = self.weights
        _check(w.mode in ("fit", "one-node", "grid", "optimize"), "weights.mode", f"unknown mode {w.mode!r}")
        _check(w.samples > 0, "weights.samples", "must be positive")
        _check(0.0 <= w.holdout < 1.0, "weights.holdout", "must lie in [0, 1)")
        _check(w.grid_nodes in (1, 2), "weights.grid_nodes", "grid search supports one or two nodes")
        _check(w.resolution is None or w.resolution >= 2, "weights.resolution", "must be at least 2")
        _check(w.max_iter > 0, "weights.max_iter", "must be positive")
        _check(len(w.interval) == 2 and w.interval[1] > w.interval[0], "weights.interval", "need [a, b] with b > a")
        self.weights_spec()
        return self

    # Domain objects

    def function_spec(self) -> FunctionClassSpec:
        p = self.problem
        return FunctionClassSpec(
            class_id=p.function_class,
            domain=tuple(p.domain) if p.domain else None,
            degree=p.degree,
            coefficient_law=p.coefficient_law,
            seed=self.seed,
        )

    def weights_spec(self) -> FunctionClassSpec:
        w = self.weights
        return FunctionClassSpec(
            class_id=w.function_class,
            domain=tuple(w.interval),
            degree=w.degree,
            coefficient_law=w.coefficient_law,
            seed=self.seed,
        )

    def ode_system(self) -> OdeSystem:
        system_id = OdeSystemId.parse(self.problem.system)
        overrides = {}
        if self.problem.initial_condition is not None:
            overrides["initial_condition"] = tuple(self.problem.initial_condition)
        return lorenz(**overrides) if system_id == OdeSystemId.LORENZ else hybrid_pendulum(**overrides)

    def problem_instance(self):
        return self.function_spec() if self.problem.kind == "quadrature" else self.ode_system()

    def _default_actions(self):
        p = self.problem
        if p.kind == "ode":
            if OdeSystemId.parse(p.system) == OdeSystemId.LORENZ:
                return LORENZ_ACTIONS, LORENZ_TOL
            return PENDULUM_ACTIONS, PENDULUM_TOL
        cid = FunctionClass.parse(p.function_class)
        if cid == FunctionClass.BROKEN_POLY_5:
            return BROKEN_POLY_ACTIONS, BROKEN_POLY_TOL
        return SINES_ACTIONS, SINES_TOL

    def action_set(self) -> ActionSet:
        if self.learner.actions:
            return ActionSet(tuple(self.learner.actions))
        return self._default_actions()[0]

    def reward_config(self) -> RewardConfig:
        r = self.learner.reward
        tol = r.tol if r.tol is not None else self._default_actions()[1]
        return RewardConfig(tol=tol, variant=r.variant, L=r.L)

    def training_config(self, checkpoint_path: Optional[str] = None) -> TrainingConfig:
        t = self.training
        return TrainingConfig(
            max_episodes=t.max_episodes,
            min_episodes=t.min_episodes,
            gamma=t.gamma if t.gamma is not None else DEFAULT_GAMMA[self.problem.kind],
            alpha=t.alpha,
            adam=AdamConfig(lr=t.learning_rate, weight_decay=t.weight_decay),
            minibatch_size=t.minibatch_size,
            updates_per_episode=t.updates_per_episode,
            window=t.window,
            lag=t.lag,
            threshold=t.threshold,
            scaler_episodes=t.scaler_episodes,
            checkpoint_path=checkpoint_path,
        )

    def env_options(self) -> dict:
        """Keyword options for the environment matching the problem kind."""
        p = self.problem
        if p.kind == "quadrature":
            return {"oracle": p.oracle}
        return {
            "t_span": tuple(p.t_span),
            "episode_length": self.training.episode_length,
            "random_initial_conditions": p.random_initial_conditions,
            "stop_at_first_switch": p.stop_at_first_switch,
            "oracle_tol": p.oracle_tol,
        }


def _check(condition: bool, name: str, message: str):
    if not condition:
        raise ConfigError(message, field=name)


def _apply(obj, data: dict, prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping, got {type(data).__name__}", field=prefix.rstrip(".") or "config")
    names = {f.name for f in dataclasses.fields(obj)}
    for key, value in data.items():
        dotted = f"{prefix}{key}"
        if key not in names:
            raise ConfigError("unknown configuration key", field=dotted)
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            _apply(current, value, dotted + ".")
        else:
            setattr(obj, key, value)


def parse_override(text: str):
    """Split ``key.path=value``; the value is read as a YAML scalar or list."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key.path=value", field="--set")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {text!r} has an empty key", field="--set")
    try:
        value = _load_yaml(raw) if raw.strip() else None
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse value {raw!r}: {e}", field=key) from e
    return key, value


def _nest(key: str, value) -> dict:
    data = value
    for part in reversed(key.split(".")):
        data = {part: data}
    return data


def load_config(path=None, overrides: Sequence[str] = ()) -> RunConfig:
    """Defaults, then the YAML file, then each override in order; the result is validated."""
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"configuration file {path} not found", field="--config")
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = _load_yaml(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{path} is not valid YAML: {e}", field="--config") from e
        _apply(cfg, data)
        logger.info("loaded configuration from %s", path)
    for text in overrides:
        key, value = parse_override(text)
        _apply(cfg, _nest(key, value))
    return cfg.validate()


def dump_config(cfg: RunConfig, directory) -> Path:
    """Write the fully resolved configuration next to the run's outputs."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / RESOLVED_CONFIG_NAME
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(dataclasses.asdict(cfg), f, sort_keys=False)
    return path
