import math

import numpy as np
import pytest

from qstepper.errors import ContractViolation, IntegrationFailure, StepFailure
from qstepper.ode import DORMAND_PRINCE, error_norm, local_error, rk45_adaptive, rk_step


def growth(t, x):
    return x


def decay(t, x):
    return -x


def test_dormand_prince_tableau_is_consistent():
    tab = DORMAND_PRINCE.validate()
    assert tab.stage_count == 7
    np.testing.assert_allclose(tab.a[-1, :6], tab.b[:6])


def test_rk_step_counts_evaluations():
    full = rk_step(DORMAND_PRINCE, growth, 0.0, [1.0], 0.1)
    assert full.evaluations == 7
    reused = rk_step(DORMAND_PRINCE, growth, 0.0, [1.0], 0.1, k1=np.array([1.0]))
    assert reused.evaluations == 6
    np.testing.assert_allclose(reused.x_next, full.x_next)
    assert full.x_next[0] == pytest.approx(math.exp(0.1), abs=1e-9)


def test_fsal_stage_is_derivative_at_the_new_point():
    step = rk_step(DORMAND_PRINCE, growth, 0.0, [1.0], 0.2)
    np.testing.assert_allclose(step.stages[-1], growth(0.2, step.x_next))


def test_local_error_shrinks_at_sixth_order():
    errors = []
    for h in (0.1, 0.05):
        step = rk_step(DORMAND_PRINCE, growth, 0.0, [1.0], h)
        errors.append(abs(step.x_next[0] - math.exp(h)))
    assert math.log2(errors[0] / errors[1]) == pytest.approx(6.0, abs=0.5)


def test_non_finite_stage_is_a_step_failure():
    with pytest.raises(StepFailure):
        rk_step(DORMAND_PRINCE, lambda t, x: np.full_like(x, np.nan), 0.0, [1.0], 0.1)


def test_rk_step_rejects_non_positive_step():
    with pytest.raises(ContractViolation):
        rk_step(DORMAND_PRINCE, growth, 0.0, [1.0], 0.0)


def test_error_norm_is_zero_for_identical_solutions():
    step = rk_step(DORMAND_PRINCE, lambda t, x: np.zeros_like(x), 0.0, [1.0, 2.0], 0.5)
    assert error_norm(step, 1e-6, 1e-6) == 0.0


def test_adaptive_run_reaches_the_end_accurately():
    res = rk45_adaptive(DORMAND_PRINCE, decay, (0.0, 5.0), [1.0], rtol=1e-8, atol=1e-8)
    assert res.ts[-1] == 5.0
    assert res.xs[-1, 0] == pytest.approx(math.exp(-5.0), abs=1e-6)
    assert np.all(np.diff(res.ts) > 0)


def test_fsal_evaluation_count():
    res = rk45_adaptive(DORMAND_PRINCE, decay, (0.0, 5.0), [1.0], rtol=1e-6, atol=1e-6)
    assert res.evaluations == 1 + 6 * len(res.log)
    assert res.accepted == len(res.ts) - 1


def test_evaluation_count_without_reuse():
    res = rk45_adaptive(DORMAND_PRINCE, decay, (0.0, 5.0), [1.0], rtol=1e-6, atol=1e-6, h0=0.1, fsal=False)
    assert res.evaluations == 7 * len(res.log)


def test_rejections_are_logged():
    res = rk45_adaptive(DORMAND_PRINCE, decay, (0.0, 2.0), [1.0], rtol=1e-9, atol=1e-9, h0=1.0)
    assert res.rejected >= 1
    assert not res.log[0].accepted
    assert res.log[1].h < res.log[0].h


def test_stop_callback_ends_the_run():
    res = rk45_adaptive(DORMAND_PRINCE, decay, (0.0, 5.0), [1.0], rtol=1e-6, atol=1e-6, stop=lambda t, x: x[0] < 0.5)
    assert res.stopped
    assert res.xs[-1, 0] < 0.5
    assert res.ts[-1] < 5.0


def test_tracker_hooks_are_called_around_attempts():
    calls = []

    class Hooked:
        def begin_step(self):
            calls.append("begin")

        def __call__(self, t, x):
            return -x

        def commit(self, t, x):
            calls.append("commit")

    res = rk45_adaptive(DORMAND_PRINCE, Hooked(), (0.0, 1.0), [1.0], rtol=1e-6, atol=1e-6)
    assert calls.count("commit") == res.accepted


def test_invalid_tolerances_and_span():
    with pytest.raises(ContractViolation):
        rk45_adaptive(DORMAND_PRINCE, decay, (0.0, 1.0), [1.0], rtol=0.0, atol=1e-6)
    with pytest.raises(ContractViolation):
        rk45_adaptive(DORMAND_PRINCE, decay, (1.0, 1.0), [1.0], rtol=1e-6, atol=1e-6)


def test_step_size_underflow():
    with pytest.raises(IntegrationFailure):
        rk45_adaptive(DORMAND_PRINCE, decay, (0.0, 1.0), [1.0], rtol=1e-6, atol=1e-6, h0=1e-3, h_min=0.5)


def test_write_log(tmp_path):
    res = rk45_adaptive(DORMAND_PRINCE, decay, (0.0, 1.0), [1.0], rtol=1e-6, atol=1e-6)
    lines = res.write_log(tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "t,h,accepted,error_estimate,cumulative_evals"
    assert len(lines) == len(res.log) + 1


def test_local_error_against_exact_flow():
    step = rk_step(DORMAND_PRINCE, growth, 0.0, [1.0], 0.1)
    err = local_error(step, lambda t, x, h: x * math.exp(h))
    assert err == pytest.approx(abs(step.x_next[0] - math.exp(0.1)))
    with pytest.raises(ContractViolation):
        local_error(step, lambda t, x, h: None)
