"""Meta-learner that dispatches each integration step to one of a pool of base learners."""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import CheckpointError, ConfigError, ContractViolation
from .neural import AdamConfig, MlpSpec, QNetwork
from .problems import OdeSystem
from .rl import (
    ActionSet,
    BaseLearner,
    ConstantStepLearner,
    EncoderConfig,
    InputScaler,
    IntegrationEnv,
    OdeEnv,
    RewardConfig,
    RolloutResult,
    StepOutcome,
    StepState,
    TrainingConfig,
    TrainingResult,
    Transition,
    fit_scaler,
    run_episode,
    select_action,
    train_q_learner,
)

logger = logging.getLogger(__name__)


class LearnerPool:
    """Ordered base learners; meta action i always refers to entry i."""

    def __init__(self, learners: Sequence, sources: Optional[Sequence[Optional[str]]] = None):
        if not learners:
            raise ConfigError("the learner pool is empty", field="meta")
        self.learners = list(learners)
        self.sources = list(sources) if sources is not None else [None] * len(self.learners)
        encoders = {l.encoder for l in self.learners if isinstance(l, BaseLearner)}
        if len(encoders) > 1:
            raise ContractViolation("trained learners in one pool must share their state encoding")
        self.encoder: Optional[EncoderConfig] = encoders.pop() if encoders else None

    def __len__(self):
        return len(self.learners)

    def __getitem__(self, i):
        return self.learners[i]

    @property
    def kinds(self) -> List[str]:
        return [l.kind for l in self.learners]

    def labels(self) -> List[str]:
        out = []
        for i, l in enumerate(self.learners):
            out.append(l.label() if isinstance(l, ConstantStepLearner) else f"trained[{i}]")
        return out

    def step_sizes(self) -> ActionSet:
        """Every step size some entry can propose."""
        steps = set()
        for l in self.learners:
            if isinstance(l, ConstantStepLearner):
                steps.add(l.h)
            else:
                steps.update(l.actions.step_sizes)
        return ActionSet(tuple(sorted(steps)))

    def to_dict(self) -> list:
        entries = []
        for l, src in zip(self.learners, self.sources):
            if isinstance(l, ConstantStepLearner):
                entries.append({"kind": "constant", "h": l.h})
            else:
                if src is None:
                    raise CheckpointError("a trained pool entry has no checkpoint path to record")
                entries.append({"kind": "trained", "checkpoint": str(src)})
        return entries

    @classmethod
    def from_dict(cls, entries: list, base_dir: Optional[Path] = None) -> "LearnerPool":
        learners, sources = [], []
        for entry in entries:
            if entry.get("kind") == "constant":
                learners.append(ConstantStepLearner(entry["h"]))
                sources.append(None)
            elif entry.get("kind") == "trained":
                path = Path(entry["checkpoint"])
                if base_dir is not None and not path.is_absolute() and not path.exists():
                    path = base_dir / path
                learners.append(BaseLearner.load(path))
                sources.append(str(path))
            else:
                raise CheckpointError(f"unknown pool entry {entry!r}")
        return cls(learners, sources)

    @classmethod
    def with_constants(cls, trained: Sequence[Tuple[BaseLearner, Optional[str]]], constants: Sequence[float]) -> "LearnerPool":
        learners = [l for l, _ in trained] + [ConstantStepLearner(h) for h in constants]
        sources = [src for _, src in trained] + [None] * len(constants)
        return cls(learners, sources)


class MetaEnv(IntegrationEnv):
    """Meta-level view of an ODE environment: action i executes the step proposed by pool entry i."""

    def __init__(self, base: OdeEnv, pool: LearnerPool):
        super().__init__(base.actions, base.reward_cfg, base.memory_size)
        self.base = base
        self.pool = pool
        self.state: Optional[StepState] = None

    kind = "ode"

    @property
    def action_count(self) -> int:
        return len(self.pool)

    @property
    def encoder(self) -> EncoderConfig:
        return self.base.encoder

    def reset(self, rng: Optional[np.random.Generator] = None, **kwargs) -> StepState:
        self.base.learner_index = None
        self.state = self.base.reset(rng, **kwargs)
        return self.state

    def advance(self, h: float, h_max: Optional[float] = None) -> StepOutcome:
        return self.base.advance(h, h_max)

    def step(self, action_index: int) -> StepOutcome:
        if not 0 <= action_index < len(self.pool):
            raise ContractViolation(f"pool has no learner {action_index}")
        h = self.pool[action_index].propose_step(self.state)
        self.base.learner_index = action_index
        outcome = self.base.advance(h)
        self.state = outcome.state
        return outcome

    def result(self) -> RolloutResult:
        return self.base.result()


def make_meta_env(pool: LearnerPool, system: OdeSystem, reward_cfg: RewardConfig, memory: Optional[int] = None, **options) -> MetaEnv:
    """ODE environment whose action set is the union of everything the pool can propose."""
    if memory is None:
        memory = pool.encoder.memory if pool.encoder is not None else 0
    base = OdeEnv(system, pool.step_sizes(), reward_cfg, memory, **options)
    if pool.encoder is not None and base.encoder != pool.encoder:
        raise ContractViolation(f"pool learners expect {pool.encoder}, the environment produces {base.encoder}")
    return MetaEnv(base, pool)


class MetaLearner:
    """Q-network over pool indices, fed the same state encoding as the base learners."""

    kind = "meta"

    def __init__(
        self,
        net: QNetwork,
        pool: LearnerPool,
        encoder: EncoderConfig,
        scaler: Optional[InputScaler] = None,
        reward_cfg: Optional[RewardConfig] = None,
    ):
        if net.spec.output_dim != len(pool):
            raise ContractViolation(f"meta network has {net.spec.output_dim} outputs for a pool of {len(pool)}")
        self.net = net
        self.pool = pool
        self.encoder = encoder
        self.scaler = scaler or InputScaler.identity(encoder.input_dim)
        self.reward_cfg = reward_cfg

    @classmethod
    def create(
        cls,
        pool: LearnerPool,
        encoder: EncoderConfig,
        rng: np.random.Generator,
        hidden_layers: int = 4,
        hidden_width: Optional[int] = None,
        adam: Optional[AdamConfig] = None,
        scaler: Optional[InputScaler] = None,
        reward_cfg: Optional[RewardConfig] = None,
    ) -> "MetaLearner":
        spec = MlpSpec(encoder.input_dim, len(pool), hidden_layers, hidden_width)
        return cls(QNetwork.create(spec, rng, adam), pool, encoder, scaler, reward_cfg)

    def input_vector(self, state: StepState) -> np.ndarray:
        return self.scaler.transform(state.vector())

    def q_values(self, state: StepState) -> np.ndarray:
        return self.net(self.input_vector(state))

    def propose_index(self, state: StepState) -> int:
        return int(np.argmax(self.q_values(state)))

    def propose_step(self, state: StepState) -> float:
        return self.pool[self.propose_index(state)].propose_step(state)

    def save(self, path) -> Path:
        meta = {
            "role": "meta",
            "pool": self.pool.to_dict(),
            "encoder": self.encoder.to_dict(),
            "scaler": self.scaler.to_dict(),
            "reward": self.reward_cfg.to_dict() if self.reward_cfg else None,
        }
        return self.net.save(path, meta)

    @classmethod
    def load(cls, path, adam: Optional[AdamConfig] = None) -> "MetaLearner":
        path = Path(path)
        net = QNetwork.load(path, adam)
        meta = net.params.metadata
        try:
            if meta.get("role") != "meta":
                raise CheckpointError(f"{path} is not a meta-learner checkpoint (role {meta.get('role')!r})")
            pool = LearnerPool.from_dict(meta["pool"], base_dir=path.parent)
            reward_cfg = RewardConfig(**meta["reward"]) if meta.get("reward") else None
            return cls(net, pool, EncoderConfig(**meta["encoder"]), InputScaler.from_dict(meta["scaler"]), reward_cfg)
        except (KeyError, TypeError, ConfigError, ContractViolation) as e:
            raise CheckpointError(f"{path}: incomplete meta-learner metadata ({e})") from e


def meta_select(meta: MetaLearner, state: StepState, explore: bool = False, alpha: float = 1.0, rng=None) -> int:
    """Pool index to act next, with the same exploration rule as the base learners."""
    return select_action(meta, state, explore, alpha, rng)


def meta_step(meta: MetaLearner, env: MetaEnv, state: StepState, explore: bool = False, alpha: float = 1.0, rng=None) -> Transition:
    """Let the selected learner propose a step, execute it and reward the choice with the step reward."""
    index = meta_select(meta, state, explore, alpha, rng)
    outcome = env.step(index)
    return Transition(
        state=state,
        action_index=index,
        reward=outcome.reward,
        next_state=outcome.state,
        terminal=outcome.terminal,
        trainable=outcome.trainable,
        h=outcome.h,
        error=outcome.error,
    )


def train_meta(
    pool: LearnerPool,
    problem: OdeSystem,
    reward_cfg: RewardConfig,
    training: TrainingConfig,
    rng: np.random.Generator,
    hidden_layers: int = 4,
    hidden_width: Optional[int] = None,
    **env_options,
) -> TrainingResult:
    """Q-train a meta-learner over a frozen pool; mechanics match base-learner training."""
    training.validate()
    env = make_meta_env(pool, problem, reward_cfg, **env_options)
    logger.info("training a meta-learner over %d learners: %s", len(pool), ", ".join(pool.labels()))
    scaler = fit_scaler(env, training.scaler_episodes, rng, env.encoder.input_dim)
    meta = MetaLearner.create(pool, env.encoder, rng, hidden_layers, hidden_width, training.adam, scaler, reward_cfg)
    log = train_q_learner(env, meta, training, rng)
    return TrainingResult(learner=meta, log=log)


@dataclass
class DispatchRow:
    t: float
    learner_index: Optional[int]
    learner_kind: str
    h: float
    local_error: float
    reward: float


@dataclass
class MetaRollout:
    result: RolloutResult
    dispatch: List[DispatchRow]

    def learner_share(self, index: int) -> float:
        chosen = [d for d in self.dispatch if d.learner_index is not None]
        return sum(1 for d in chosen if d.learner_index == index) / len(chosen) if chosen else 0.0

    def write_dispatch_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["t", "learner_index", "learner_kind", "h", "local_error", "reward"])
            for d in self.dispatch:
                index = "" if d.learner_index is None else d.learner_index
                writer.writerow([repr(d.t), index, d.learner_kind, repr(d.h), repr(d.local_error), repr(d.reward)])
        return path


def integrate_with_meta(
    meta: MetaLearner,
    problem: OdeSystem,
    t_span: Tuple[float, float],
    reward_cfg: Optional[RewardConfig] = None,
    rng: Optional[np.random.Generator] = None,
    **env_options,
) -> MetaRollout:
    """Greedy meta dispatch over [t0, t1]; the dispatch log names the learner behind every step."""
    reward_cfg = reward_cfg or meta.reward_cfg
    if reward_cfg is None:
        raise ContractViolation("a reward configuration (tolerance) is needed to score the rollout")
    env = make_meta_env(meta.pool, problem, reward_cfg, meta.encoder.memory, t_span=t_span, **env_options)
    run_episode(env, meta, explore=False, rng=rng)
    result = env.result()
    kinds = meta.pool.kinds
    dispatch = [
        DispatchRow(
            t=row.position,
            learner_index=row.learner,
            learner_kind="warmup" if row.learner is None else kinds[row.learner],
            h=row.h,
            local_error=row.error,
            reward=row.reward,
        )
        for row in result.rows
    ]
    return MetaRollout(result=result, dispatch=dispatch)
