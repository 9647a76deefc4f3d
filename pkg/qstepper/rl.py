"""Q-learning of step-size controllers: encodings, rewards, environments, training and rollouts."""

import csv
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, List, Optional, Sequence, Tuple

import numpy as np

from .errors import CheckpointError, ConfigError, ContractViolation, StepFailure, TrainingDivergence
from .neural import AdamConfig, MlpParams, MlpSpec, QNetwork, TrainBatch, forward
from .ode import DORMAND_PRINCE, ButcherTableau, rk_step
from .problems import (
    FunctionClassSpec,
    ModeTracker,
    OdeSystem,
    ReferenceOracle,
    SampledFunction,
    reference_integral,
    sample_function,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ActionSet:
    """Candidate step sizes h1 < ... < hn; hn normalizes positive rewards."""

    step_sizes: Tuple[float, ...]

    def __post_init__(self):
        steps = tuple(float(h) for h in self.step_sizes)
        object.__setattr__(self, "step_sizes", steps)
        if not steps:
            raise ConfigError("the action set is empty", field="learner.actions")
        if any(h <= 0 for h in steps):
            raise ConfigError(f"step sizes must be positive, got {steps}", field="learner.actions")
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ConfigError(f"step sizes must be strictly increasing, got {steps}", field="learner.actions")

    def __len__(self):
        return len(self.step_sizes)

    def __getitem__(self, i) -> float:
        return self.step_sizes[i]

    def __iter__(self):
        return iter(self.step_sizes)

    @property
    def h_min(self) -> float:
        return self.step_sizes[0]

    @property
    def h_max(self) -> float:
        return self.step_sizes[-1]


# Action sets and tolerances of the reference experiments
SINES_ACTIONS = ActionSet((0.05, 0.1, 0.15, 0.2, 0.3, 0.4, 0.5, 0.75))
SINES_TOL = 5e-4
BROKEN_POLY_ACTIONS = ActionSet((0.05, 0.075, 0.1, 0.125, 0.15, 0.2, 0.3, 0.67))
BROKEN_POLY_TOL = 7.5e-6
LORENZ_ACTIONS = ActionSet((0.025, 0.029, 0.033, 0.039, 0.045, 0.052, 0.060, 0.070))
LORENZ_TOL = 1e-4
PENDULUM_ACTIONS = ActionSet((0.25, 0.27, 0.29, 0.31, 0.33, 0.36, 0.39, 0.42, 0.45, 0.48))
PENDULUM_TOL = 1e-5
PENDULUM_CONSTANT_STEPS = (0.1, 0.05, 0.01, 0.005, 0.001)


# State encoding


@dataclass(frozen=True, eq=False)
class StepState:
    """Controller observation: last step size, its features and m earlier records (zero padded)."""

    h: float
    features: np.ndarray
    memory: Tuple[Tuple[float, np.ndarray], ...] = ()
    padded: Tuple[bool, ...] = ()

    def vector(self) -> np.ndarray:
        parts = [np.array([self.h]), self.features]
        for h, feats in self.memory:
            parts.append(np.array([h]))
            parts.append(feats)
        return np.concatenate(parts)

    @property
    def warming_up(self) -> bool:
        return any(self.padded)


class MemoryBuffer:
    """The m most recent (h, features) records, newest first."""

    def __init__(self, m: int, feature_dim: int):
        if m < 0:
            raise ConfigError(f"memory must be non-negative, got {m}", field="learner.memory")
        self.m = m
        self.feature_dim = feature_dim
        self._records = deque(maxlen=m) if m else None

    def push(self, h: float, features: np.ndarray):
        if self._records is not None:
            self._records.appendleft((float(h), np.array(features, dtype=float)))

    def snapshot(self) -> Tuple[Tuple[Tuple[float, np.ndarray], ...], Tuple[bool, ...]]:
        if not self.m:
            return (), ()
        records = list(self._records)
        padded = [False] * len(records)
        while len(records) < self.m:
            records.append((0.0, np.zeros(self.feature_dim)))
            padded.append(True)
        return tuple(records), tuple(padded)

    def clear(self):
        if self._records is not None:
            self._records.clear()


def _with_memory(h, features, memory: Optional[MemoryBuffer]) -> StepState:
    if memory is None:
        return StepState(h=float(h), features=features)
    if memory.feature_dim != features.size:
        raise ContractViolation(f"memory holds {memory.feature_dim} features, state has {features.size}")
    records, padded = memory.snapshot()
    return StepState(h=float(h), features=features, memory=records, padded=padded)


def encode_quadrature(h: float, f_vals: Sequence[float], memory: Optional[MemoryBuffer] = None) -> StepState:
    """Centered encoding (f(x2) - f(x1), f(x3) - f(x1)) of three equally spaced evaluations."""
    f_vals = np.asarray(f_vals, dtype=float)
    if f_vals.shape != (3,):
        raise ContractViolation(f"quadrature encoding needs 3 values, got shape {f_vals.shape}")
    features = np.array([f_vals[1] - f_vals[0], f_vals[2] - f_vals[0]])
    return _with_memory(h, features, memory)


def encode_ode(
    h: float,
    stages,
    memory: Optional[MemoryBuffer] = None,
    expected_shape: Optional[Tuple[int, int]] = None,
) -> StepState:
    """Runge-Kutta stages flattened stage-major into one feature vector."""
    stages = np.asarray(stages, dtype=float)
    if stages.ndim != 2 or (expected_shape is not None and stages.shape != tuple(expected_shape)):
        raise ContractViolation(f"stage array of shape {stages.shape} does not match {expected_shape}")
    return _with_memory(h, stages.reshape(-1), memory)


@dataclass(frozen=True)
class EncoderConfig:
    """Which encoding a learner expects."""

    kind: str
    memory: int = 0
    feature_dim: int = 2

    def __post_init__(self):
        if self.kind not in ("quadrature", "ode"):
            raise ConfigError(f"unknown encoder kind {self.kind!r}", field="problem.kind")

    @property
    def input_dim(self) -> int:
        return (self.memory + 1) * (1 + self.feature_dim)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "memory": self.memory, "feature_dim": self.feature_dim}


@dataclass
class InputScaler:
    """Per-component standardization applied after centering."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls, dim: int) -> "InputScaler":
        return cls(mean=np.zeros(dim), std=np.ones(dim))

    @classmethod
    def fit(cls, vectors) -> "InputScaler":
        data = np.atleast_2d(np.asarray(vectors, dtype=float))
        std = data.std(axis=0)
        return cls(mean=data.mean(axis=0), std=np.where(std > 1e-12, std, 1.0))

    def transform(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "InputScaler":
        return cls(mean=np.asarray(data["mean"], dtype=float), std=np.asarray(data["std"], dtype=float))


# Rewards


class RewardVariant(str, Enum):
    PIECEWISE = "Piecewise"
    CONTINUOUS = "Continuous"
    LOG = "Log"
    SIMPLE = "Simple"


@dataclass
class RewardConfig:
    """Reward shape; a and b default to the values giving r(tol) = 0 and r(2 tol) = -1."""

    tol: float
    variant: RewardVariant = RewardVariant.PIECEWISE
    L: float = 3.0
    a: Optional[float] = None
    b: Optional[float] = None

    def __post_init__(self):
        try:
            self.variant = RewardVariant(self.variant)
        except ValueError:
            raise ConfigError(f"unknown reward variant {self.variant!r}", field="learner.reward.variant")
        if not self.tol > 0:
            raise ConfigError(f"tolerance must be positive, got {self.tol}", field="learner.reward.tol")
        if not self.L > 1:
            raise ConfigError(f"L must exceed 1, got {self.L}", field="learner.reward.L")
        if self.a is None:
            self.a = self.L ** 2 / (self.L - 1.0)
        if self.b is None:
            self.b = math.log(self.L / (self.L - 1.0)) / self.tol

    def to_dict(self) -> dict:
        return {"tol": self.tol, "variant": self.variant.value, "L": self.L, "a": self.a, "b": self.b}


def reward(cfg: RewardConfig, eps: float, h: float, h_max: float) -> float:
    """Reward for a step of size h with local error eps."""
    if eps < 0:
        raise ContractViolation(f"local error must be non-negative, got {eps}")
    if not math.isfinite(eps):
        return 0.0 if cfg.variant == RewardVariant.SIMPLE else -cfg.L
    gain = h / h_max
    if cfg.variant == RewardVariant.CONTINUOUS:
        return gain * (cfg.a * math.exp(-cfg.b * eps) - cfg.L)
    if eps < cfg.tol:
        return gain
    if cfg.variant == RewardVariant.PIECEWISE:
        return cfg.a * math.exp(-cfg.b * eps) - cfg.L
    if cfg.variant == RewardVariant.LOG:
        return math.log10(cfg.tol / eps)
    return 0.0


# Policies


def q_values(net, state: StepState) -> np.ndarray:
    """Q-values from a learner (anything with q_values), raw parameters or a callable network."""
    if hasattr(net, "q_values"):
        return np.asarray(net.q_values(state), dtype=float)
    if isinstance(net, MlpParams):
        return forward(net, state.vector())
    return np.asarray(net(state.vector()), dtype=float)


def select_from_q(q: np.ndarray, explore: bool, alpha: float, rng: Optional[np.random.Generator]) -> int:
    """Greedy argmax, or the best action with probability alpha and the runner-up otherwise."""
    q = np.asarray(q, dtype=float)
    if not explore or q.size == 1:
        return int(np.argmax(q))
    if not 0.5 <= alpha <= 1.0:
        raise ContractViolation(f"exploration needs 0.5 <= alpha <= 1, got {alpha}")
    order = np.argsort(-q, kind="stable")
    return int(order[0] if rng.random() < alpha else order[1])


def select_action(net, state: StepState, explore: bool = False, alpha: float = 1.0, rng=None) -> int:
    return select_from_q(q_values(net, state), explore, alpha, rng)


def q_target(reward_value: float, next_state: Optional[StepState], net, gamma: float, terminal: bool = False) -> float:
    """r + gamma * max_a Q(next_state, a); terminal transitions keep r alone."""
    if not 0.0 <= gamma <= 1.0:
        raise ContractViolation(f"discount factor must lie in [0, 1], got {gamma}")
    if terminal or gamma == 0.0 or next_state is None:
        return float(reward_value)
    return float(reward_value + gamma * np.max(q_values(net, next_state)))


# Environments


@dataclass
class StepOutcome:
    state: Optional[StepState]
    reward: float
    terminal: bool
    h: float
    error: float
    trainable: bool = True


@dataclass
class RolloutRow:
    """One executed integration step."""

    position: float
    h: float
    error: float
    reward: float
    evaluations: int
    value: Any = None
    mode: Optional[int] = None
    learner: Optional[int] = None
    violation: bool = False
    trainable: bool = True
    false_discontinuity: bool = False


@dataclass
class RolloutResult:
    """Executed steps of one integration run and derived metrics."""

    kind: str
    rows: List[RolloutRow]
    span: Tuple[float, float]
    value: Any = None
    failed: bool = False
    switch_times: List[float] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.rows)

    @property
    def evaluations(self) -> int:
        return self.rows[-1].evaluations if self.rows else 0

    @property
    def avg_error(self) -> float:
        return float(np.mean([r.error for r in self.rows])) if self.rows else 0.0

    @property
    def mean_reward(self) -> float:
        return float(np.mean([r.reward for r in self.rows])) if self.rows else 0.0

    @property
    def evals_per_unit(self) -> float:
        return self.evaluations / (self.span[1] - self.span[0])

    @property
    def step_sizes(self) -> np.ndarray:
        return np.array([r.h for r in self.rows])

    @property
    def tol_violations(self) -> int:
        return sum(1 for r in self.rows if r.violation)

    @property
    def false_discontinuities(self) -> int:
        return sum(1 for r in self.rows if r.false_discontinuity)

    def write_csv(self, path) -> Path:
        """Per-step trace: position, value(s), chosen h, local error, violation flag, learner index."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        position = "x" if self.kind == "quadrature" else "t"
        dim = np.size(self.rows[0].value) if self.rows else 1
        value_cols = ["f"] if self.kind == "quadrature" else [f"x{i + 1}" for i in range(dim)]
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow([position] + value_cols + ["h", "local_error", "reward", "violation", "mode", "learner"])
            for r in self.rows:
                values = np.atleast_1d(r.value).tolist()
                writer.writerow(
                    [repr(r.position)]
                    + [repr(float(v)) for v in values]
                    + [repr(r.h), repr(r.error), repr(r.reward), int(r.violation),
                       "" if r.mode is None else r.mode, "" if r.learner is None else r.learner]
                )
        return path


class IntegrationEnv:
    """Episode protocol shared by the quadrature and ODE environments.

    ``reset(rng)`` starts an episode and returns the warm-up state,
    ``advance(h)`` executes one step of any size and ``step(i)`` executes
    the i-th action. ``result()`` summarizes the episode so far.
    """

    kind = "quadrature"

    def __init__(self, actions: ActionSet, reward_cfg: RewardConfig, memory: int = 0):
        self.actions = actions
        self.reward_cfg = reward_cfg
        self.memory_size = memory
        self.rows: List[RolloutRow] = []
        self.learner_index: Optional[int] = None

    @property
    def action_count(self) -> int:
        return len(self.actions)

    @property
    def encoder(self) -> EncoderConfig:
        raise NotImplementedError

    def reset(self, rng: Optional[np.random.Generator] = None) -> StepState:
        raise NotImplementedError

    def advance(self, h: float, h_max: Optional[float] = None) -> StepOutcome:
        raise NotImplementedError

    def step(self, action_index: int) -> StepOutcome:
        if not 0 <= action_index < len(self.actions):
            raise ContractViolation(f"action {action_index} outside the action set of {len(self.actions)}")
        return self.advance(self.actions[action_index])

    def result(self) -> RolloutResult:
        raise NotImplementedError

    def _record(self, row: RolloutRow):
        row.learner = self.learner_index
        row.violation = row.error >= self.reward_cfg.tol
        self.rows.append(row)


def _span_end(x: float, b: float) -> bool:
    return b - x <= 1e-12 * max(1.0, abs(b))


class QuadratureEnv(IntegrationEnv):
    """Integrate a sampled function with one Simpson panel [x, x + 2h] per step.

    The warm-up panel uses the smallest action and yields the first state.
    A final step that would pass the domain end is shortened to land on it
    and marked untrainable.
    """

    kind = "quadrature"

    def __init__(
        self,
        spec: Optional[FunctionClassSpec],
        actions: ActionSet,
        reward_cfg: RewardConfig,
        memory: int = 0,
        oracle: str = "closed_form",
        domain: Optional[Tuple[float, float]] = None,
        function: Optional[SampledFunction] = None,
    ):
        super().__init__(actions, reward_cfg, memory)
        if spec is None and function is None:
            raise ContractViolation("a quadrature environment needs a function class or a fixed function")
        if oracle not in ("closed_form", "fine_simpson"):
            raise ConfigError(f"unknown oracle {oracle!r}", field="problem.oracle")
        self.spec = spec
        self.oracle = oracle
        self.fixed_function = function
        self.domain = tuple(domain) if domain is not None else (function.domain if function is not None else spec.domain)
        self.memory = MemoryBuffer(memory, 2)
        self.function: Optional[SampledFunction] = None

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig("quadrature", self.memory_size, 2)

    def _exact(self, lo: float, hi: float) -> float:
        if self.oracle == "closed_form":
            return self.function.integral(lo, hi)
        return reference_integral(self.function, lo, hi)

    def reset(self, rng: Optional[np.random.Generator] = None, function: Optional[SampledFunction] = None) -> StepState:
        if function is not None:
            self.function = function
        elif self.fixed_function is not None:
            self.function = self.fixed_function
        else:
            self.function = sample_function(self.spec, rng if rng is not None else np.random.default_rng(self.spec.seed))
        self.memory.clear()
        self.rows = []
        self.integral = 0.0
        self.failed = False
        self.evaluations = 1
        self.x = self.domain[0]
        self.fx = float(self.function(self.x))
        outcome = self.advance(self.actions.h_min)
        self.rows[-1].trainable = False
        return outcome.state

    def advance(self, h: float, h_max: Optional[float] = None) -> StepOutcome:
        a, b = self.domain
        x = self.x
        h_max = self.actions.h_max if h_max is None else h_max
        trainable = True
        x3 = x + 2.0 * h
        if x3 > b or _span_end(x3, b):
            h, x3, trainable = 0.5 * (b - x), b, _span_end(x + 2.0 * h, b)
        x2 = x + h
        f1 = self.fx
        f2, f3 = (float(v) for v in self.function(np.array([x2, x3])))
        self.evaluations += 2
        piece = (x3 - x) / 6.0 * (f1 + 4.0 * f2 + f3)
        terminal = _span_end(x3, b)
        if not (math.isfinite(f2) and math.isfinite(f3)):
            error, failed = math.inf, True
            terminal = True
        else:
            error, failed = abs(piece - self._exact(x, x3)), False
        r = reward(self.reward_cfg, error, h, h_max)
        state = None if failed else encode_quadrature(h, (f1, f2, f3), self.memory)
        if state is not None:
            self.memory.push(h, state.features)
        row = RolloutRow(position=x, h=h, error=error, reward=r, evaluations=self.evaluations, value=f1, trainable=trainable)
        bp = self.function.break_point
        if bp is not None and x < bp and h == h_max and error >= self.reward_cfg.tol:
            row.false_discontinuity = True
            logger.warning("maximal step %g taken at x=%g before the break at %g (error %.3g)", h, x, bp, error)
        self._record(row)
        self.integral += piece
        self.x, self.fx = x3, f3
        self.failed = failed
        return StepOutcome(state=state, reward=r, terminal=terminal, h=h, error=error, trainable=trainable and not failed)

    def result(self) -> RolloutResult:
        return RolloutResult(
            kind="quadrature", rows=list(self.rows), span=self.domain, value=self.integral, failed=self.failed
        )


class OdeEnv(IntegrationEnv):
    """Integrate an ODE with one Dormand-Prince step per action, measuring local errors.

    Local errors compare against the reference flow restarted from the
    current state and mode. Mode switches of hybrid systems are tracked on
    executed steps.
    """

    kind = "ode"

    def __init__(
        self,
        system: OdeSystem,
        actions: ActionSet,
        reward_cfg: RewardConfig,
        memory: int = 0,
        t_span: Tuple[float, float] = (0.0, 200.0),
        episode_length: Optional[float] = None,
        random_initial_conditions: bool = False,
        stop_at_first_switch: bool = False,
        oracle_tol: float = 1e-10,
        tableau: ButcherTableau = DORMAND_PRINCE,
        x0=None,
    ):
        super().__init__(actions, reward_cfg, memory)
        if not t_span[1] > t_span[0]:
            raise ConfigError(f"empty time span {t_span}", field="problem.t_span")
        if episode_length is not None and not episode_length > 0:
            raise ConfigError("episode length must be positive", field="training.episode_length")
        self.system = system
        self.t_span = (float(t_span[0]), float(t_span[1]))
        self.episode_length = episode_length
        self.random_initial_conditions = random_initial_conditions
        self.stop_at_first_switch = stop_at_first_switch
        self.tableau = tableau
        self.oracle = ReferenceOracle(system, oracle_tol)
        self.fixed_x0 = None if x0 is None else np.asarray(x0, dtype=float)
        self.feature_dim = tableau.stage_count * system.state_dim
        self.memory = MemoryBuffer(memory, self.feature_dim)

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig("ode", self.memory_size, self.feature_dim)

    def reset(self, rng: Optional[np.random.Generator] = None, x0=None) -> StepState:
        if x0 is not None:
            x = np.asarray(x0, dtype=float)
        elif self.fixed_x0 is not None:
            x = self.fixed_x0
        elif self.random_initial_conditions:
            x = self.system.random_initial_condition(rng if rng is not None else np.random.default_rng())
        else:
            x = self.system.initial_condition
        t0 = self.t_span[0]
        self.t_end = self.t_span[1] if self.episode_length is None else min(self.t_span[1], t0 + self.episode_length)
        self.t, self.x = t0, np.array(x, dtype=float)
        self.tracker = ModeTracker(self.system, self.system.initial_mode(t0, self.x), t0)
        self.k1 = None
        self.evaluations = 0
        self.rows = []
        self.ts, self.xs = [t0], [self.x.copy()]
        self.memory.clear()
        self.failed = False
        outcome = self.advance(self.actions.h_min)
        self.rows[-1].trainable = False
        return outcome.state

    def advance(self, h: float, h_max: Optional[float] = None) -> StepOutcome:
        h_max = self.actions.h_max if h_max is None else h_max
        trainable = True
        if self.t + h > self.t_end or _span_end(self.t + h, self.t_end):
            trainable = _span_end(self.t + h, self.t_end)
            h = self.t_end - self.t
        mode = self.tracker.mode
        switches_before = len(self.tracker.switch_times)
        self.tracker.begin_step()
        try:
            step = rk_step(self.tableau, self.tracker, self.t, self.x, h, k1=self.k1)
        except StepFailure as e:
            logger.warning("episode ended by a failed step: %s", e)
            self.failed = True
            r = reward(self.reward_cfg, math.inf, h, h_max)
            self._record(RolloutRow(position=self.t, h=h, error=math.inf, reward=r,
                                    evaluations=self.evaluations, value=self.x.copy(), mode=mode.index, trainable=False))
            return StepOutcome(state=None, reward=r, terminal=True, h=h, error=math.inf, trainable=False)
        self.evaluations += step.evaluations
        exact = self.oracle.flow(self.t, self.x, mode, h)
        error = float(np.linalg.norm(step.x_next - exact))
        r = reward(self.reward_cfg, error, h, h_max)
        t_next = self.t_end if _span_end(self.t + h, self.t_end) else self.t + h
        self.tracker.commit(t_next, step.x_next)
        switched = len(self.tracker.switch_times) > switches_before
        # the last stage is stale once the vector field changed
        self.k1 = None if switched else step.stages[-1]
        state = encode_ode(h, step.stages, self.memory)
        self.memory.push(h, state.features)
        self._record(RolloutRow(position=self.t, h=h, error=error, reward=r, evaluations=self.evaluations,
                                value=step.x_next.copy(), mode=mode.index, trainable=trainable))
        self.t, self.x = t_next, step.x_next
        self.ts.append(self.t)
        self.xs.append(self.x.copy())
        terminal = _span_end(self.t, self.t_end) or (self.stop_at_first_switch and switched)
        return StepOutcome(state=state, reward=r, terminal=terminal, h=h, error=error, trainable=trainable)

    def result(self) -> RolloutResult:
        return RolloutResult(
            kind="ode",
            rows=list(self.rows),
            span=(self.t_span[0], self.t),
            value=self.x.copy(),
            failed=self.failed,
            switch_times=list(self.tracker.switch_times),
        )

    @property
    def trajectory(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.array(self.ts), np.array(self.xs)


def make_env(problem, actions: ActionSet, reward_cfg: RewardConfig, memory: int = 0, **options) -> IntegrationEnv:
    """Quadrature environment for a function class or function, ODE environment for a system."""
    if isinstance(problem, OdeSystem):
        return OdeEnv(problem, actions, reward_cfg, memory, **options)
    if isinstance(problem, SampledFunction):
        return QuadratureEnv(None, actions, reward_cfg, memory, function=problem, **options)
    if isinstance(problem, FunctionClassSpec):
        return QuadratureEnv(problem, actions, reward_cfg, memory, **options)
    raise ContractViolation(f"cannot build an environment for {type(problem).__name__}")


# Episodes and training


@dataclass
class Transition:
    state: StepState
    action_index: int
    reward: float
    next_state: Optional[StepState]
    terminal: bool
    trainable: bool = True
    h: float = 0.0
    error: float = 0.0


def run_episode(
    env: IntegrationEnv,
    learner,
    explore: bool = False,
    alpha: float = 1.0,
    rng: Optional[np.random.Generator] = None,
    max_steps: int = 1_000_000,
) -> List[Transition]:
    """Roll out one episode; the warm-up state is the first observation, not a transition."""
    state = env.reset(rng)
    transitions: List[Transition] = []
    terminal = state is None
    while not terminal and len(transitions) < max_steps:
        action = select_action(learner, state, explore, alpha, rng)
        outcome = env.step(action)
        transitions.append(
            Transition(
                state=state,
                action_index=action,
                reward=outcome.reward,
                next_state=outcome.state,
                terminal=outcome.terminal,
                trainable=outcome.trainable,
                h=outcome.h,
                error=outcome.error,
            )
        )
        state = outcome.state
        terminal = outcome.terminal or state is None
    return transitions


class RandomPolicy:
    """Uniformly random actions; drives the warm-up episodes that fit the input scaler."""

    def __init__(self, action_count: int, rng: np.random.Generator):
        self.action_count = action_count
        self.rng = rng

    def q_values(self, state: StepState) -> np.ndarray:
        return self.rng.random(self.action_count)


@dataclass
class TrainingConfig:
    max_episodes: int = 2000
    min_episodes: int = 200
    gamma: float = 0.0
    alpha: float = 0.8
    adam: AdamConfig = field(default_factory=AdamConfig)
    minibatch_size: Optional[int] = None
    updates_per_episode: int = 1
    window: int = 50
    lag: int = 100
    threshold: float = 0.01
    scaler_episodes: int = 5
    checkpoint_path: Optional[str] = None

    def validate(self):
        if self.max_episodes < 0:
            raise ConfigError("must be non-negative", field="training.max_episodes")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"must lie in [0, 1], got {self.gamma}", field="training.gamma")
        if not 0.5 <= self.alpha <= 1.0:
            raise ConfigError(f"must lie in [0.5, 1], got {self.alpha}", field="training.alpha")
        if self.minibatch_size is not None and self.minibatch_size <= 0:
            raise ConfigError("must be positive", field="training.minibatch_size")
        if self.window <= 0 or self.lag <= 0 or self.updates_per_episode <= 0:
            raise ConfigError("window, lag and updates per episode must be positive", field="training")
        return self


@dataclass
class EpisodeLog:
    episode: int
    mean_reward: float
    loss: float
    evals_per_unit: float
    avg_error: float


@dataclass
class TrainingLog:
    episodes: List[EpisodeLog] = field(default_factory=list)
    converged: bool = False

    def moving_average(self, window: int) -> np.ndarray:
        rewards = np.array([e.mean_reward for e in self.episodes])
        if rewards.size < window:
            return np.empty(0)
        return np.convolve(rewards, np.ones(window) / window, mode="valid")

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["episode", "mean_reward", "loss", "evals_per_unit", "avg_error"])
            for e in self.episodes:
                writer.writerow([e.episode, repr(e.mean_reward), repr(e.loss), repr(e.evals_per_unit), repr(e.avg_error)])
        return path


def has_converged(log: TrainingLog, cfg: TrainingConfig) -> bool:
    """Moving average of the mean reward changed by less than the threshold over the lag."""
    n = len(log.episodes)
    if n < max(cfg.min_episodes, cfg.window + cfg.lag):
        return False
    ma = log.moving_average(cfg.window)
    now, before = ma[-1], ma[-1 - cfg.lag]
    return abs(now - before) < cfg.threshold * max(abs(before), 1e-8)


def build_batch(transitions: Sequence[Transition], learner, gamma: float) -> Optional[TrainBatch]:
    """Scaled inputs, actions and Q-targets of the trainable transitions."""
    usable = [tr for tr in transitions if tr.trainable]
    if not usable:
        return None
    inputs = np.array([learner.input_vector(tr.state) for tr in usable])
    actions = np.array([tr.action_index for tr in usable])
    targets = np.array([q_target(tr.reward, tr.next_state, learner, gamma, tr.terminal) for tr in usable])
    return TrainBatch(inputs=inputs, actions=actions, targets=targets)


def fit_scaler(env: IntegrationEnv, episodes: int, rng: np.random.Generator, input_dim: int) -> InputScaler:
    """Standardization statistics from episodes driven by uniformly random actions."""
    if episodes <= 0:
        return InputScaler.identity(input_dim)
    policy = RandomPolicy(env.action_count, rng)
    vectors = []
    for _ in range(episodes):
        for tr in run_episode(env, policy, rng=rng):
            vectors.append(tr.state.vector())
    if not vectors:
        return InputScaler.identity(input_dim)
    return InputScaler.fit(vectors)


def train_q_learner(env: IntegrationEnv, learner, cfg: TrainingConfig, rng: np.random.Generator) -> TrainingLog:
    """Episodic Q-learning: roll out with exploration, regress Q(s, a) on the targets, repeat."""
    cfg.validate()
    log = TrainingLog()
    for episode in range(cfg.max_episodes):
        transitions = run_episode(env, learner, explore=True, alpha=cfg.alpha, rng=rng)
        batch = build_batch(transitions, learner, cfg.gamma)
        losses = []
        if batch is not None:
            for _ in range(cfg.updates_per_episode):
                for part in _minibatches(batch, cfg.minibatch_size, rng):
                    try:
                        losses.append(learner.net.fit(part))
                    except TrainingDivergence as e:
                        checkpoint = None
                        if cfg.checkpoint_path:
                            checkpoint = str(learner.save(cfg.checkpoint_path))
                        raise TrainingDivergence(f"episode {episode}: {e}", checkpoint=checkpoint) from e
        summary = env.result()
        log.episodes.append(
            EpisodeLog(
                episode=episode,
                mean_reward=float(np.mean([t.reward for t in transitions])) if transitions else 0.0,
                loss=float(np.mean(losses)) if losses else float("nan"),
                evals_per_unit=summary.evals_per_unit,
                avg_error=summary.avg_error,
            )
        )
        if episode % 50 == 0:
            logger.info("episode %d: mean reward %.4f, loss %.3g", episode, log.episodes[-1].mean_reward, log.episodes[-1].loss)
        if has_converged(log, cfg):
            log.converged = True
            logger.info("converged after %d episodes", episode + 1)
            break
    if not log.converged and cfg.max_episodes:
        logger.warning("training stopped at the episode cap (%d) before convergence", cfg.max_episodes)
    return log


def _minibatches(batch: TrainBatch, size: Optional[int], rng: np.random.Generator):
    if size is None or size >= len(batch):
        yield batch
        return
    order = rng.permutation(len(batch))
    for start in range(0, len(batch), size):
        idx = order[start:start + size]
        yield TrainBatch(inputs=batch.inputs[idx], actions=batch.actions[idx], targets=batch.targets[idx])


# Learners


class BaseLearner:
    """A trained Q-network step-size policy over a fixed action set."""

    kind = "trained"

    def __init__(
        self,
        net: QNetwork,
        actions: ActionSet,
        encoder: EncoderConfig,
        scaler: Optional[InputScaler] = None,
        reward_cfg: Optional[RewardConfig] = None,
    ):
        if net.spec.output_dim != len(actions):
            raise ContractViolation(f"network has {net.spec.output_dim} outputs for {len(actions)} actions")
        if net.spec.input_dim != encoder.input_dim:
            raise ContractViolation(f"network takes {net.spec.input_dim} inputs, encoder produces {encoder.input_dim}")
        self.net = net
        self.actions = actions
        self.encoder = encoder
        self.scaler = scaler or InputScaler.identity(encoder.input_dim)
        self.reward_cfg = reward_cfg

    @classmethod
    def create(
        cls,
        actions: ActionSet,
        encoder: EncoderConfig,
        rng: np.random.Generator,
        hidden_layers: int = 4,
        hidden_width: Optional[int] = None,
        adam: Optional[AdamConfig] = None,
        scaler: Optional[InputScaler] = None,
        reward_cfg: Optional[RewardConfig] = None,
    ) -> "BaseLearner":
        spec = MlpSpec(encoder.input_dim, len(actions), hidden_layers, hidden_width)
        return cls(QNetwork.create(spec, rng, adam), actions, encoder, scaler, reward_cfg)

    def input_vector(self, state: StepState) -> np.ndarray:
        return self.scaler.transform(state.vector())

    def q_values(self, state: StepState) -> np.ndarray:
        return self.net(self.input_vector(state))

    def propose_index(self, state: StepState) -> int:
        return int(np.argmax(self.q_values(state)))

    def propose_step(self, state: StepState) -> float:
        return self.actions[self.propose_index(state)]

    def metadata(self) -> dict:
        return {
            "role": "base",
            "actions": list(self.actions.step_sizes),
            "encoder": self.encoder.to_dict(),
            "scaler": self.scaler.to_dict(),
            "reward": self.reward_cfg.to_dict() if self.reward_cfg else None,
        }

    def save(self, path) -> Path:
        return self.net.save(path, self.metadata())

    @classmethod
    def load(cls, path, adam: Optional[AdamConfig] = None) -> "BaseLearner":
        net = QNetwork.load(path, adam)
        meta = net.params.metadata
        try:
            if meta.get("role") != "base":
                raise CheckpointError(f"{path} is not a base-learner checkpoint (role {meta.get('role')!r})")
            reward_cfg = RewardConfig(**meta["reward"]) if meta.get("reward") else None
            return cls(
                net,
                ActionSet(tuple(meta["actions"])),
                EncoderConfig(**meta["encoder"]),
                InputScaler.from_dict(meta["scaler"]),
                reward_cfg,
            )
        except (KeyError, TypeError, ConfigError, ContractViolation) as e:
            raise CheckpointError(f"{path}: incomplete learner metadata ({e})") from e


class ConstantStepLearner:
    """Trivial policy that always proposes the same step size."""

    kind = "constant"

    def __init__(self, h: float):
        if not h > 0:
            raise ConfigError(f"constant step must be positive, got {h}", field="meta.constant_steps")
        self.h = float(h)

    def propose_step(self, state: StepState) -> float:
        return self.h

    def label(self) -> str:
        return f"constant({self.h:g})"


@dataclass
class TrainingResult:
    learner: Any
    log: TrainingLog

    @property
    def converged(self) -> bool:
        return self.log.converged


def train_base_learner(
    problem,
    actions: ActionSet,
    reward_cfg: RewardConfig,
    training: TrainingConfig,
    rng: np.random.Generator,
    memory: int = 0,
    hidden_layers: int = 4,
    hidden_width: Optional[int] = None,
    **env_options,
) -> TrainingResult:
    """Train a base learner for a function class (quadrature) or ODE system."""
    training.validate()
    env = make_env(problem, actions, reward_cfg, memory, **env_options)
    scaler = fit_scaler(env, training.scaler_episodes, rng, env.encoder.input_dim)
    learner = BaseLearner.create(
        actions, env.encoder, rng, hidden_layers, hidden_width, training.adam, scaler, reward_cfg
    )
    log = train_q_learner(env, learner, training, rng)
    return TrainingResult(learner=learner, log=log)


def integrate_with_learner(
    learner,
    problem,
    span: Optional[Tuple[float, float]] = None,
    reward_cfg: Optional[RewardConfig] = None,
    rng: Optional[np.random.Generator] = None,
    **env_options,
) -> RolloutResult:
    """Greedy rollout over a function (quadrature) or an ODE system; metrics against the oracle."""
    reward_cfg = reward_cfg or learner.reward_cfg
    if reward_cfg is None:
        raise ContractViolation("a reward configuration (tolerance) is needed to score the rollout")
    memory = learner.encoder.memory
    if isinstance(problem, OdeSystem):
        if learner.encoder.kind != "ode":
            raise ContractViolation("an ODE rollout needs a learner trained on ODE stages")
        if span is not None:
            env_options["t_span"] = span
        env = OdeEnv(problem, learner.actions, reward_cfg, memory, **env_options)
    else:
        if learner.encoder.kind != "quadrature":
            raise ContractViolation("a quadrature rollout needs a learner trained on function values")
        env = QuadratureEnv(None, learner.actions, reward_cfg, memory, domain=span, function=problem, **env_options)
    run_episode(env, learner, explore=False, rng=rng)
    return env.result()
