import math

import numpy as np
import pytest

from qstepper.errors import ConfigError, ContractViolation
from qstepper.quad import (
    SIMPSON,
    CountingIntegrand,
    QuadratureRule,
    apply_rule,
    composite_rule_panels,
    composite_simpson,
    composite_simpson_panels,
    panel_edges,
    simpson,
    subdivide,
)


def test_simpson_is_exact_for_cubics():
    assert simpson(lambda x: x ** 3 - 2 * x + 1, 0.0, 2.0) == pytest.approx(4.0 - 4.0 + 2.0)


def test_simpson_rejects_empty_interval():
    with pytest.raises(ContractViolation):
        simpson(np.sin, 1.0, 1.0)


def test_constant_integrand_is_broadcast():
    assert simpson(lambda x: 3.0, 0.0, 2.0) == pytest.approx(6.0)


def test_composite_simpson_counts_shared_endpoints_once():
    f = CountingIntegrand(np.sin)
    integral, evals = composite_simpson(f, 0.0, math.pi, math.pi / 8)
    assert integral == pytest.approx(2.0, abs=1e-3)
    assert evals == 9
    assert f.count == evals


def test_composite_simpson_single_panel_when_step_covers_domain():
    integral, evals = composite_simpson(np.exp, 0.0, 1.0, 5.0)
    assert evals == 3
    assert integral == pytest.approx(simpson(np.exp, 0.0, 1.0))


def test_composite_simpson_converges_at_fourth_order():
    exact = 1.0 - math.cos(2.0)
    e1 = abs(composite_simpson(np.sin, 0.0, 2.0, 0.1)[0] - exact)
    e2 = abs(composite_simpson(np.sin, 0.0, 2.0, 0.05)[0] - exact)
    assert math.log2(e1 / e2) == pytest.approx(4.0, abs=0.2)


def test_panel_edges_keep_a_short_last_panel():
    edges = panel_edges(0.0, 1.0, 0.3)
    np.testing.assert_allclose(edges, [0.0, 0.3, 0.6, 0.9, 1.0])


def test_rule_panels_match_simpson_panels():
    f = lambda x: np.cos(3 * x) + x ** 2
    edges, estimates, unique = composite_rule_panels(SIMPSON, f, 0.0, 2.0, 0.25)
    ref_edges, ref_estimates = composite_simpson_panels(f, 0.0, 2.0, 0.125)
    np.testing.assert_allclose(edges, ref_edges)
    np.testing.assert_allclose(estimates, ref_estimates, rtol=1e-12, atol=1e-14)
    assert unique == 2 * (edges.size - 1) + 1


def test_interior_rule_shares_no_points():
    rule = QuadratureRule(nodes=(0.25, 0.75), weights=(0.5, 0.5), label="midpoints")
    _, estimates, unique = composite_rule_panels(rule, lambda x: x, 0.0, 1.0, 0.5)
    assert unique == 4
    assert estimates.sum() == pytest.approx(0.5)


def test_rule_validation():
    with pytest.raises(ContractViolation):
        QuadratureRule(nodes=(0.5, 0.2), weights=(1.0, 1.0))
    with pytest.raises(ContractViolation):
        QuadratureRule(nodes=(0.5, 1.2), weights=(1.0, 1.0))
    with pytest.raises(ContractViolation):
        QuadratureRule(nodes=(0.5,), weights=(1.0, 1.0))


def test_rule_text_record():
    rule = QuadratureRule(nodes=(0.1, 0.6), weights=(0.4, 0.6), label="fitted")
    back = QuadratureRule.from_text(rule.to_text())
    assert back == rule
    assert apply_rule(back, lambda x: 1.0 + 0 * x, 0.0, 2.0) == pytest.approx(2.0)
    with pytest.raises(ContractViolation):
        QuadratureRule.from_text("something: else\n")


def test_subdivision_needs_a_minimal_budget():
    with pytest.raises(ConfigError):
        subdivide(np.sin, 0.0, 1.0, 4)


def test_subdivision_stops_on_exact_estimates():
    res = subdivide(lambda x: x ** 3, 0.0, 1.0, 101, tol=1e-12)
    assert res.evaluations_used == 5
    assert len(res.intervals) == 1
    assert res.integral == pytest.approx(0.25)


def test_subdivision_respects_budget_and_tiles_domain():
    f = lambda x: np.sin(10 * x) * np.exp(-x)
    res = subdivide(f, 0.0, 3.0, 101)
    assert res.evaluations_used <= 101
    assert (res.evaluations_used - 5) % 4 == 0
    assert res.intervals[0].a == 0.0 and res.intervals[-1].b == 3.0
    for left, right in zip(res.intervals, res.intervals[1:]):
        assert left.b == right.a
    assert res.integral == pytest.approx(sum(iv.fine for iv in res.intervals))


def test_subdivision_refines_where_the_function_varies():
    f = lambda x: np.where(x <= 0.5, 0.0, np.sin(40 * x))
    res = subdivide(f, 0.0, 1.0, 81)
    left = sum(1 for iv in res.intervals if iv.b <= 0.5)
    right = sum(1 for iv in res.intervals if iv.a >= 0.5)
    assert right > left
