import math

import numpy as np
import pytest

from qstepper.errors import ContractViolation, NotPositiveDefiniteError, SingularDesignError
from qstepper.optweights import (
    BasisEvaluations,
    OptimalRule,
    compare_simpson,
    compare_with_rule,
    describe,
    fit_panel_weights,
    fit_weights,
    gram_from_samples,
    gram_solve,
    node_grid_search,
    node_optimize,
    one_node_analytic,
    one_node_optimum,
    sample_basis,
)
from qstepper.problems import FunctionClassSpec
from qstepper.quad import QuadratureRule


def quadratics():
    return FunctionClassSpec("PolyDegN", degree=2, coefficient_law="normal")


def exact_moments(nodes, degree):
    """E[F_i F_j] and E[F_i I] on [0, 1] for i.i.d. unit-variance coefficients."""
    powers = np.arange(degree + 1)
    V = np.asarray(nodes)[:, None] ** powers
    return V @ V.T, V @ (1.0 / (powers + 1.0))


def test_one_node_closed_form_optimum():
    x, omega, eps_sq = one_node_optimum()
    assert x == pytest.approx(0.54706, abs=1e-3)
    assert omega == pytest.approx(0.9888, abs=1e-3)
    assert eps_sq == pytest.approx(0.0032, abs=2e-5)


def test_one_node_closed_form_matches_moments():
    for x in (0.0, 0.3, 1.0):
        A, b = exact_moments([x], 2)
        omega, eps_sq = one_node_analytic(x)
        assert omega == pytest.approx(b[0] / A[0, 0])
    omegas, _ = one_node_analytic(np.linspace(0.0, 1.0, 5))
    assert omegas.shape == (5,)
    with pytest.raises(ContractViolation):
        one_node_analytic(1.5)


def test_exact_family_recovers_the_interval_length(rng):
    data = sample_basis(FunctionClassSpec("PolyDegN", degree=0, domain=(0.0, 2.0)), [1.0], 100, rng)
    rule = fit_weights(data)
    assert rule.weights[0] == pytest.approx(2.0, rel=1e-12)
    assert rule.eps < 1e-12


def test_quartic_weights_at_simpson_nodes(rng):
    spec = FunctionClassSpec("PolyDegN", degree=4, coefficient_law="normal")
    rule, (simpson_eps, _) = compare_simpson(spec, 100_000, rng)
    np.testing.assert_allclose(rule.weights, [0.159, 0.679, 0.162], atol=0.02)
    exact = gram_solve(*exact_moments([0.0, 0.5, 1.0], 4))
    np.testing.assert_allclose(exact, [0.159, 0.679, 0.162], atol=0.005)
    assert rule.eps <= simpson_eps


def test_oscillator_weights_beat_simpson(rng):
    rule, (simpson_eps, simpson_abs) = compare_simpson(FunctionClassSpec("DampedOscillatorVelocity"), 20_000, rng)
    assert rule.eps <= simpson_eps
    assert rule.sample_count == 20_000
    rows = describe([("DampedOscillatorVelocity", rule, (simpson_eps, simpson_abs))])
    assert rows[0]["eps_model"] == rule.eps
    assert rows[0]["weights"].startswith("(")


@pytest.mark.slow
def test_oscillator_weights_at_simpson_nodes():
    rule, (simpson_eps, simpson_abs) = compare_simpson(
        FunctionClassSpec("DampedOscillatorVelocity"), 100_000, np.random.default_rng(1)
    )
    np.testing.assert_allclose(rule.weights, [0.257, 0.624, 0.257], atol=0.02)
    assert rule.eps < simpson_eps
    assert 1.0 - rule.eps_abs / simpson_abs >= 0.4


@pytest.mark.parametrize(
    "spec",
    [
        FunctionClassSpec("PolyDegN", degree=4, coefficient_law="normal"),
        FunctionClassSpec("DampedOscillatorVelocity"),
        FunctionClassSpec("SingleSine", domain=(0.0, 1.0)),
    ],
    ids=["quartics", "oscillator", "sine"],
)
def test_root_mean_square_error_bounds_mean_absolute_error(spec, rng):
    rule, (simpson_eps, simpson_abs) = compare_simpson(spec, 5_000, rng, holdout=0.2)
    assert rule.eps >= rule.eps_abs
    assert rule.holdout_eps >= rule.holdout_eps_abs
    assert simpson_eps >= simpson_abs


def test_weight_spread_shrinks_with_the_sample_count():
    spec = FunctionClassSpec("PolyDegN", degree=4, coefficient_law="normal")
    seeds = np.random.SeedSequence(11).spawn(40)

    def spread(samples, seeds):
        weights = [compare_simpson(spec, samples, np.random.default_rng(s))[0].weights for s in seeds]
        return np.mean(np.std(weights, axis=0))

    ratio = spread(2_000, seeds[:20]) / spread(20_000, seeds[20:])
    assert math.sqrt(10) / 2 <= ratio <= 2 * math.sqrt(10)


@pytest.mark.slow
def test_two_node_search_on_oscillators_stays_in_the_grid_basin():
    spec = FunctionClassSpec("DampedOscillatorVelocity")
    surface = node_grid_search(spec, 2, resolution=21, samples=10_000, seed=2, common_random_numbers=True)
    start = np.clip(sorted(surface.best_nodes), 0.02, 0.98)
    rule = node_optimize(spec, 2, start, samples=10_000, seed=2)
    assert rule.eps <= 1.02 * surface.best_eps
    i, j = (int(np.abs(surface.axis - x).argmin()) for x in rule.nodes)
    assert surface.eps[i, j] <= 2.0 * surface.best_eps
    assert surface.eps[i, j] < np.nanmedian(surface.eps)


def test_holdout_errors_are_reported(rng):
    rule, _ = compare_simpson(quadratics(), 5_000, rng, holdout=0.2)
    assert rule.sample_count == 4_000
    assert rule.holdout_eps is not None
    assert rule.holdout_eps == pytest.approx(rule.eps, rel=0.25)


def test_residual_is_orthogonal_to_the_design(rng):
    data = sample_basis(FunctionClassSpec("SingleSine", domain=(0.0, 1.0)), [0.1, 0.6, 0.9], 2_000, rng)
    rule = fit_weights(data)
    residual = data.matrix @ np.array(rule.weights) - data.targets
    gradient = data.matrix.T @ residual / data.sample_count
    assert np.max(np.abs(gradient)) < 1e-10


def test_normal_equations_agree_with_qr(rng):
    data = sample_basis(quadratics(), [0.2, 0.7], 5_000, rng)
    np.testing.assert_allclose(gram_solve(*gram_from_samples(data)), fit_weights(data).weights, rtol=1e-8)


def test_coincident_nodes_are_singular(rng):
    data = sample_basis(quadratics(), [0.5, 0.5], 100, rng)
    with pytest.raises(SingularDesignError) as info:
        fit_weights(data)
    assert 0.5 in info.value.nodes


def test_too_few_samples():
    data = BasisEvaluations(np.ones((1, 2)), [1.0], (0.2, 0.4))
    with pytest.raises(ContractViolation):
        fit_weights(data)


def test_gram_solve():
    np.testing.assert_allclose(gram_solve(np.eye(3), [1.0, 2.0, 3.0]), [1.0, 2.0, 3.0])
    np.testing.assert_allclose(gram_solve([[4.0, 2.0], [2.0, 3.0]], [2.0, 1.0]), [0.5, 0.0], atol=1e-12)
    with pytest.raises(NotPositiveDefiniteError):
        gram_solve([[1.0, 2.0], [0.0, 1.0]], [1.0, 1.0])
    with pytest.raises(NotPositiveDefiniteError):
        gram_solve([[1.0, 2.0], [2.0, 1.0]], [1.0, 1.0])
    with pytest.raises(ContractViolation):
        gram_solve(np.eye(2), [1.0, 2.0, 3.0])


def test_split_holds_out_the_last_rows():
    data = BasisEvaluations(np.arange(10.0)[:, None], np.arange(10.0), (0.5,))
    fit_part, test_part = data.split(0.2)
    assert fit_part.sample_count == 8
    np.testing.assert_array_equal(test_part.targets, [8.0, 9.0])
    with pytest.raises(ContractViolation):
        data.split(1.0)


def test_rule_rescaling():
    rule = OptimalRule(nodes=(1.5, 0.5), weights=(1.0, 1.0), eps=0.0, eps_abs=0.0, sample_count=1, interval=(0.0, 2.0))
    quad = rule.to_quadrature_rule()
    assert quad.nodes == (0.25, 0.75)
    assert quad.weights == (0.5, 0.5)


def test_panel_weights_reduce_to_simpson_for_quadratics(rng):
    spec = FunctionClassSpec("PolyDegN", degree=2)
    rule = fit_panel_weights(spec, 0.5, 200, rng).to_quadrature_rule()
    assert rule.nodes == (0.0, 0.5, 1.0)
    np.testing.assert_allclose(rule.weights, [1 / 6, 2 / 3, 1 / 6], atol=1e-8)
    with pytest.raises(ContractViolation):
        fit_panel_weights(spec, 2.0, 10, rng)


def test_compare_with_rule_checks_the_nodes(rng):
    data = sample_basis(quadratics(), [0.2, 0.7], 10, rng)
    with pytest.raises(ContractViolation):
        compare_with_rule(QuadratureRule.simpson(), data)
    data = sample_basis(quadratics(), [0.0, 0.5, 1.0], 10, rng)
    eps, eps_abs = compare_with_rule(QuadratureRule.simpson(), data)
    assert eps < 1e-12 and eps_abs < 1e-12


def test_one_node_grid_finds_the_closed_form_optimum():
    surface = node_grid_search(quadratics(), 1, resolution=101, samples=100_000, common_random_numbers=True)
    assert surface.n_nodes == 1
    assert surface.best_nodes[0] == pytest.approx(0.547, abs=0.015)
    assert surface.best_weights[0] == pytest.approx(0.9888, abs=0.02)
    assert surface.best_eps == pytest.approx(math.sqrt(0.0032), rel=0.1)
    assert not surface.flagged.any()


def test_one_node_error_is_symmetric_for_sines():
    spec = FunctionClassSpec("SingleSine", domain=(0.0, 1.0))
    surface = node_grid_search(spec, 1, resolution=21, samples=20_000, common_random_numbers=True)
    np.testing.assert_allclose(surface.eps, surface.eps[::-1], rtol=0.05)


def test_two_node_grid_flags_coincident_nodes(tmp_path):
    spec = FunctionClassSpec("PolyDegN", degree=3)
    surface = node_grid_search(spec, 2, resolution=5, samples=500, seed=4)
    assert surface.flagged.diagonal().all()
    assert np.isnan(surface.eps.diagonal()).all()
    assert surface.flagged.sum() == 5
    assert surface.best_nodes[0] != surface.best_nodes[1]
    lines = surface.write_csv(tmp_path / "surface.csv").read_text().splitlines()
    assert lines[0] == "x1,x2,eps,degenerate"
    assert len(lines) == 26


def test_grid_is_reproducible_and_worker_independent():
    spec = FunctionClassSpec("SuperposedSines5", domain=(0.0, 2.0))
    serial = node_grid_search(spec, 1, resolution=9, samples=1_000, seed=3)
    threaded = node_grid_search(spec, 1, resolution=9, samples=1_000, seed=3, workers=4)
    np.testing.assert_array_equal(serial.eps, threaded.eps)
    with pytest.raises(ContractViolation):
        node_grid_search(spec, 3)


def test_node_search_converges_to_the_closed_form_optimum():
    rule = node_optimize(quadratics(), 1, [0.2], samples=100_000, seed=1)
    assert rule.converged
    assert rule.nodes[0] == pytest.approx(0.547, abs=0.01)
    again = node_optimize(quadratics(), 1, [0.2], samples=100_000, seed=1)
    assert again.nodes == rule.nodes
    with pytest.raises(ContractViolation):
        node_optimize(quadratics(), 1, [1.0])
    with pytest.raises(ContractViolation):
        node_optimize(quadratics(), 2, [0.3])


@pytest.mark.slow
def test_two_node_search_improves_on_its_start():
    spec = FunctionClassSpec("PolyDegN", degree=4, coefficient_law="normal")
    start = fit_weights(sample_basis(spec, [0.2, 0.8], 100_000, np.random.default_rng(0)))
    rule = node_optimize(spec, 2, [0.2, 0.8], samples=100_000, seed=0)
    assert rule.eps <= start.eps
    assert len(set(rule.nodes)) == 2
