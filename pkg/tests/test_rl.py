import math
from collections import Counter

import numpy as np
import pytest

from qstepper import neural
from qstepper.errors import CheckpointError, ConfigError, ContractViolation
from qstepper.problems import FunctionClassSpec, SampledFunction, hybrid_pendulum, lorenz
from qstepper.rl import (
    LORENZ_ACTIONS,
    PENDULUM_ACTIONS,
    ActionSet,
    BaseLearner,
    ConstantStepLearner,
    EncoderConfig,
    EpisodeLog,
    InputScaler,
    MemoryBuffer,
    OdeEnv,
    QuadratureEnv,
    RewardConfig,
    RewardVariant,
    TrainingConfig,
    TrainingLog,
    Transition,
    build_batch,
    encode_ode,
    encode_quadrature,
    has_converged,
    integrate_with_learner,
    make_env,
    q_target,
    reward,
    run_episode,
    select_action,
    select_from_q,
    train_base_learner,
)


def test_action_set_must_be_increasing():
    with pytest.raises(ConfigError):
        ActionSet((0.2, 0.1))
    with pytest.raises(ConfigError):
        ActionSet(())
    actions = ActionSet((0.1, 0.2, 0.4))
    assert actions.h_min == 0.1 and actions.h_max == 0.4
    assert list(actions) == [0.1, 0.2, 0.4]


def test_memory_is_newest_first_and_zero_padded():
    memory = MemoryBuffer(3, 2)
    memory.push(0.1, [1.0, 2.0])
    memory.push(0.2, [3.0, 4.0])
    state = encode_quadrature(0.3, [1.0, 1.5, 3.0], memory)
    np.testing.assert_allclose(state.features, [0.5, 2.0])
    np.testing.assert_allclose(state.vector(), [0.3, 0.5, 2.0, 0.2, 3.0, 4.0, 0.1, 1.0, 2.0, 0.0, 0.0, 0.0])
    assert state.padded == (False, False, True)
    assert state.warming_up
    assert state.vector().size == EncoderConfig("quadrature", 3, 2).input_dim


def test_memory_forgets_the_oldest_record():
    memory = MemoryBuffer(1, 2)
    memory.push(0.1, [1.0, 1.0])
    memory.push(0.2, [2.0, 2.0])
    records, padded = memory.snapshot()
    assert records[0][0] == 0.2
    assert padded == (False,)


def test_encoders_check_shapes():
    with pytest.raises(ContractViolation):
        encode_quadrature(0.1, [1.0, 2.0])
    with pytest.raises(ContractViolation):
        encode_ode(0.1, np.zeros((7, 3)), expected_shape=(7, 2))
    with pytest.raises(ContractViolation):
        encode_quadrature(0.1, [1.0, 2.0, 3.0], MemoryBuffer(1, 5))
    state = encode_ode(0.1, np.arange(6.0).reshape(3, 2))
    np.testing.assert_array_equal(state.features, [0.0, 1.0, 2.0, 3.0, 4.0, 5.0])


def test_input_scaler_keeps_constant_components():
    scaler = InputScaler.fit([[1.0, 5.0], [3.0, 5.0]])
    np.testing.assert_allclose(scaler.transform([2.0, 5.0]), [0.0, 0.0])
    assert scaler.std[1] == 1.0


def test_piecewise_reward_calibration():
    cfg = RewardConfig(tol=1e-3)
    assert cfg.a == pytest.approx(4.5)
    assert reward(cfg, cfg.tol, 0.2, 0.4) == pytest.approx(0.0, abs=1e-12)
    assert reward(cfg, 2 * cfg.tol, 0.2, 0.4) == pytest.approx(-1.0)
    assert reward(cfg, 0.5 * cfg.tol, 0.2, 0.4) == pytest.approx(0.5)
    assert reward(cfg, 100 * cfg.tol, 0.2, 0.4) == pytest.approx(-3.0, abs=1e-6)
    assert reward(cfg, math.inf, 0.2, 0.4) == -3.0


def test_reward_variants():
    tol = 1e-4
    continuous = RewardConfig(tol=tol, variant="Continuous")
    assert reward(continuous, tol, 0.4, 0.4) == pytest.approx(0.0, abs=1e-12)
    assert reward(continuous, 0.0, 0.2, 0.4) == pytest.approx(0.5 * (4.5 - 3.0))
    log = RewardConfig(tol=tol, variant=RewardVariant.LOG)
    assert reward(log, 10 * tol, 0.2, 0.4) == pytest.approx(-1.0)
    simple = RewardConfig(tol=tol, variant="Simple")
    assert reward(simple, 10 * tol, 0.2, 0.4) == 0.0
    assert reward(simple, 0.1 * tol, 0.2, 0.4) == pytest.approx(0.5)
    with pytest.raises(ContractViolation):
        reward(simple, -1.0, 0.2, 0.4)
    with pytest.raises(ConfigError):
        RewardConfig(tol=tol, variant="Quadratic")
    with pytest.raises(ConfigError):
        RewardConfig(tol=tol, L=1.0)


def test_exploration_picks_best_or_runner_up():
    q = np.array([0.1, 0.9, 0.5])
    assert select_from_q(q, False, 0.5, None) == 1
    assert select_from_q(q, True, 1.0, np.random.default_rng(0)) == 1
    rng = np.random.default_rng(0)
    picks = Counter(select_from_q(q, True, 0.8, rng) for _ in range(10_000))
    assert set(picks) == {1, 2}
    assert picks[1] / 10_000 == pytest.approx(0.8, abs=0.02)
    with pytest.raises(ContractViolation):
        select_from_q(q, True, 0.3, rng)


def test_select_action_reads_the_network():
    state = encode_quadrature(0.2, [1.0, 2.0, 4.0])
    # Q-values depend on the encoded vector (h, 1, 3)
    net = lambda v: np.array([v[0], v[1], v[2]])
    assert select_action(net, state) == 2
    assert select_action(net, state, explore=True, alpha=0.5, rng=np.random.default_rng(1)) in (1, 2)


def test_q_target():
    state = encode_quadrature(0.1, [0.0, 0.0, 0.0])
    net = lambda v: np.array([1.0, 3.0])
    assert q_target(0.5, state, net, 0.0) == 0.5
    assert q_target(0.5, state, net, 0.5) == pytest.approx(2.0)
    assert q_target(0.5, state, net, 0.5, terminal=True) == 0.5
    with pytest.raises(ContractViolation):
        q_target(0.5, state, net, 1.5)


def sine_env(tol=1e-3):
    f = SampledFunction.sines([1.0], [1.0], [0.0], domain=(0.0, 2.0))
    return QuadratureEnv(None, ActionSet((0.05, 0.1)), RewardConfig(tol=tol), function=f)


def test_quadrature_episode_covers_the_domain():
    env = sine_env()
    state = env.reset()
    assert state is not None
    assert not env.rows[0].trainable
    assert env.rows[0].h == 0.05
    outcome = None
    while outcome is None or not outcome.terminal:
        outcome = env.step(1)
    res = env.result()
    assert res.value == pytest.approx(1.0 - math.cos(2.0), abs=1e-5)
    assert res.evaluations == 1 + 2 * res.steps
    last = res.rows[-1]
    assert last.position + 2 * last.h == pytest.approx(2.0)
    assert res.tol_violations == 0


def test_shortened_last_step_is_not_trainable():
    env = sine_env()
    env.reset()
    outcomes = []
    while not outcomes or not outcomes[-1].terminal:
        outcomes.append(env.step(1))
    assert not outcomes[-1].trainable
    assert all(o.trainable for o in outcomes[:-1])


def test_violations_are_flagged():
    env = sine_env(tol=1e-14)
    env.reset()
    env.step(1)
    assert env.result().tol_violations == 2


def test_maximal_step_across_a_break_is_reported():
    f = SampledFunction.polynomial([0.0, 0.0, 1.0], domain=(0.0, 1.0), broken=True)
    env = QuadratureEnv(None, ActionSet((0.05, 0.25)), RewardConfig(tol=1e-5), function=f)
    env.reset()
    env.step(1)
    assert env.result().false_discontinuities == 1


def test_step_index_is_checked():
    env = sine_env()
    env.reset()
    with pytest.raises(ContractViolation):
        env.step(2)


def test_ode_episode_reuses_the_last_stage():
    env = OdeEnv(hybrid_pendulum(), PENDULUM_ACTIONS, RewardConfig(tol=1e-5), t_span=(0.0, 5.0))
    env.reset()
    while not env.step(0).terminal:
        pass
    res = env.result()
    assert res.span == (0.0, 5.0)
    assert res.switch_times == []
    assert res.evaluations == 7 + 6 * (res.steps - 1)
    assert all(np.isfinite(r.error) for r in res.rows)
    assert {r.mode for r in res.rows} == {0}


def test_ode_episode_can_stop_at_the_first_switch():
    env = OdeEnv(hybrid_pendulum(), PENDULUM_ACTIONS, RewardConfig(tol=1e-5), t_span=(0.0, 5.0),
                 stop_at_first_switch=True, x0=[0.06, 0.0])
    env.reset()
    while not env.step(0).terminal:
        pass
    res = env.result()
    assert len(res.switch_times) == 1
    assert res.span[1] == res.switch_times[0]
    assert res.span[1] < 5.0


def test_episode_length_limits_training_episodes():
    env = OdeEnv(lorenz(), LORENZ_ACTIONS, RewardConfig(tol=1e-4), t_span=(0.0, 200.0), episode_length=0.5)
    env.reset()
    while not env.step(len(LORENZ_ACTIONS) - 1).terminal:
        pass
    assert env.result().span == (0.0, 0.5)


def test_random_initial_conditions_come_from_the_box():
    env = OdeEnv(lorenz(), LORENZ_ACTIONS, RewardConfig(tol=1e-4), episode_length=0.1, random_initial_conditions=True)
    env.reset(np.random.default_rng(3))
    x0 = env.trajectory[1][0]
    assert np.all(np.abs(x0) <= 10.0)
    assert not np.allclose(x0, [10.0, 10.0, 10.0])


def test_make_env_dispatches_on_the_problem():
    cfg = RewardConfig(tol=1e-3)
    assert isinstance(make_env(FunctionClassSpec("SingleSine"), ActionSet((0.1, 0.2)), cfg), QuadratureEnv)
    assert isinstance(make_env(lorenz(), LORENZ_ACTIONS, cfg), OdeEnv)
    with pytest.raises(ContractViolation):
        make_env("Lorenz", LORENZ_ACTIONS, cfg)


def test_warm_up_is_not_a_transition(rng):
    env = sine_env()
    learner = BaseLearner.create(env.actions, env.encoder, rng, hidden_layers=1)
    transitions = run_episode(env, learner)
    assert len(transitions) == len(env.result().rows) - 1


def test_batch_skips_untrainable_transitions(rng):
    learner = BaseLearner.create(ActionSet((0.1, 0.2)), EncoderConfig("quadrature"), rng, hidden_layers=1)
    s = encode_quadrature(0.1, [0.0, 1.0, 2.0])
    transitions = [
        Transition(state=s, action_index=1, reward=0.7, next_state=s, terminal=False),
        Transition(state=s, action_index=0, reward=0.1, next_state=None, terminal=True, trainable=False),
    ]
    batch = build_batch(transitions, learner, gamma=0.0)
    assert len(batch) == 1
    assert batch.targets[0] == 0.7
    assert build_batch(transitions[1:], learner, 0.0) is None


def test_convergence_needs_a_flat_moving_average():
    cfg = TrainingConfig(min_episodes=20, window=5, lag=10, threshold=0.01)
    log = TrainingLog([EpisodeLog(i, 0.5, 0.0, 1.0, 0.0) for i in range(19)])
    assert not has_converged(log, cfg)
    log.episodes.append(EpisodeLog(19, 0.5, 0.0, 1.0, 0.0))
    assert has_converged(log, cfg)
    rising = TrainingLog([EpisodeLog(i, 0.01 * i, 0.0, 1.0, 0.0) for i in range(40)])
    assert not has_converged(rising, cfg)


def test_training_config_validation():
    with pytest.raises(ConfigError):
        TrainingConfig(alpha=0.2).validate()
    with pytest.raises(ConfigError):
        TrainingConfig(gamma=2.0).validate()


def test_learner_prefers_the_largest_step_when_every_step_is_exact(rng):
    spec = FunctionClassSpec("PolyDegN", degree=2, domain=(0.0, 5.0))
    training = TrainingConfig(max_episodes=300, min_episodes=1000, adam=neural.AdamConfig(lr=1e-2), scaler_episodes=3)
    result = train_base_learner(spec, ActionSet((0.05, 0.25)), RewardConfig(tol=1e-6), training, rng,
                                hidden_layers=2, hidden_width=10)
    assert not result.converged
    assert len(result.log.episodes) == 300
    f = SampledFunction.polynomial([0.3, -0.2, 0.1], domain=(0.0, 5.0))
    rollout = integrate_with_learner(result.learner, f)
    chosen = Counter(rollout.step_sizes[1:-1])
    assert chosen.most_common(1)[0][0] == 0.25


def test_untrained_rollout_is_greedy_and_repeatable(rng):
    learner = BaseLearner.create(PENDULUM_ACTIONS, EncoderConfig("ode", 0, 14), rng, hidden_layers=2,
                                 reward_cfg=RewardConfig(tol=1e-5))
    a = integrate_with_learner(learner, hybrid_pendulum(), (0.0, 3.0))
    b = integrate_with_learner(learner, hybrid_pendulum(), (0.0, 3.0))
    np.testing.assert_array_equal(a.step_sizes, b.step_sizes)
    assert set(a.step_sizes[1:-1]) <= set(PENDULUM_ACTIONS)


def test_rollout_checks_the_learner_kind(rng):
    learner = BaseLearner.create(ActionSet((0.1, 0.2)), EncoderConfig("quadrature"), rng, hidden_layers=1)
    with pytest.raises(ContractViolation):
        integrate_with_learner(learner, hybrid_pendulum(), (0.0, 1.0), RewardConfig(tol=1e-5))
    with pytest.raises(ContractViolation):
        integrate_with_learner(learner, SampledFunction.sines([1.0], [1.0], [0.0]))


def test_learner_checkpoint(rng, tmp_path):
    learner = BaseLearner.create(ActionSet((0.1, 0.2)), EncoderConfig("quadrature", 1), rng, hidden_layers=1,
                                 scaler=InputScaler(mean=np.full(6, 0.5), std=np.full(6, 2.0)),
                                 reward_cfg=RewardConfig(tol=1e-3, variant="Log"))
    path = learner.save(tmp_path / "learner.json")
    loaded = BaseLearner.load(path)
    state = encode_quadrature(0.1, [0.0, 1.0, 3.0], MemoryBuffer(1, 2))
    np.testing.assert_array_equal(loaded.q_values(state), learner.q_values(state))
    assert loaded.encoder == learner.encoder
    assert loaded.reward_cfg.variant == RewardVariant.LOG

    neural.save(learner.net.params, tmp_path / "other.json", metadata={"role": "meta"})
    with pytest.raises(CheckpointError):
        BaseLearner.load(tmp_path / "other.json")


def test_network_must_fit_the_action_set(rng):
    learner = BaseLearner.create(ActionSet((0.1, 0.2)), EncoderConfig("quadrature"), rng, hidden_layers=1)
    with pytest.raises(ContractViolation):
        BaseLearner(learner.net, ActionSet((0.1, 0.2, 0.3)), learner.encoder)


def test_constant_learner():
    assert ConstantStepLearner(0.05).propose_step(None) == 0.05
    assert ConstantStepLearner(0.05).label() == "constant(0.05)"
    with pytest.raises(ConfigError):
        ConstantStepLearner(0.0)
