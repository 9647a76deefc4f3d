"""Benchmark harness: Pareto points for learners and classical baselines."""

import concurrent.futures
import csv
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import neural
from .errors import CheckpointError, ConfigError, ContractViolation
from .meta import MetaLearner, integrate_with_meta
from .ode import DORMAND_PRINCE, rk45_adaptive
from .optweights import fit_panel_weights
from .problems import FunctionClassSpec, ModeTracker, OdeSystem, ReferenceOracle, sample_batch
from .quad import SIMPSON, composite_rule_panels, subdivide
from .rl import BaseLearner, RewardConfig, integrate_with_learner

logger = logging.getLogger(__name__)

PARETO_COLUMNS = [
    "method",
    "family",
    "parameter",
    "avg_error_per_step",
    "avg_evaluations",
    "rejected_steps",
    "evals_all",
    "evals_accepted",
    "modal_step",
    "runs",
]


@dataclass
class ParetoPoint:
    """One method configuration in the accuracy-cost plane, averaged over a sample of runs.

    For quadrature ``avg_evaluations`` counts evaluations per function, for
    ODEs evaluations per unit of time. RK45 rows also report the count of all
    attempts without first-same-as-last reuse and of accepted steps only.
    """

    method: str
    family: str
    parameter: float
    avg_error_per_step: float
    avg_evaluations: float
    rejected_steps: Optional[float] = None
    evals_all: Optional[float] = None
    evals_accepted: Optional[float] = None
    modal_step: Optional[float] = None
    runs: int = 0

    def as_row(self) -> dict:
        return {name: getattr(self, name) for name in PARETO_COLUMNS}


def write_pareto_csv(points: Sequence[ParetoPoint], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=PARETO_COLUMNS)
        writer.writeheader()
        for p in points:
            writer.writerow({k: ("" if v is None else v) for k, v in p.as_row().items()})
    return path


_INT_COLUMNS = ("runs",)
_TEXT_COLUMNS = ("method", "family")


def read_pareto_csv(path) -> List[ParetoPoint]:
    """Points written by write_pareto_csv; empty cells come back as None."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Pareto file not found: {path}", field="bench")
    points = []
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            values = {}
            for name in PARETO_COLUMNS:
                cell = row.get(name, "")
                if name in _TEXT_COLUMNS:
                    values[name] = cell
                elif cell == "":
                    values[name] = None
                else:
                    values[name] = int(cell) if name in _INT_COLUMNS else float(cell)
            points.append(ParetoPoint(**values))
    return points


def front_evaluations(front: Sequence[ParetoPoint], error: float) -> float:
    """Evaluations a sweep needs at the given error, interpolated in log-log coordinates.

    Errors outside the sweep are clamped to its ends.
    """
    usable = sorted((p for p in front if p.avg_error_per_step > 0), key=lambda p: p.avg_error_per_step)
    if not usable:
        raise ContractViolation("the sweep has no point with a positive error")
    if error <= 0:
        raise ContractViolation(f"matched error must be positive, got {error}")
    log_err = np.log([p.avg_error_per_step for p in usable])
    log_evals = np.log([p.avg_evaluations for p in usable])
    return float(np.exp(np.interp(np.log(error), log_err, log_evals)))


def evaluation_saving(point: ParetoPoint, front: Sequence[ParetoPoint]) -> float:
    """Fraction of the sweep's evaluations a point saves at its own error (negative when it costs more)."""
    return 1.0 - point.avg_evaluations / front_evaluations(front, point.avg_error_per_step)


def _map(fn: Callable, items: Sequence, workers: int) -> list:
    if workers > 1 and len(items) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def load_learner(path):
    """Base or meta learner, whichever the checkpoint holds."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} not found")
    role = neural.load(path).metadata.get("role")
    if role == "meta":
        return MetaLearner.load(path)
    if role == "base":
        return BaseLearner.load(path)
    raise CheckpointError(f"{path}: unknown learner role {role!r}")


# Quadrature


def _reduce(method, family, parameter, per_run: List[Tuple[float, float]], **extra) -> ParetoPoint:
    errors = np.array([e for e, _ in per_run])
    evals = np.array([n for _, n in per_run])
    return ParetoPoint(
        method=method,
        family=family,
        parameter=float(parameter),
        avg_error_per_step=float(errors.mean()),
        avg_evaluations=float(evals.mean()),
        runs=len(per_run),
        **extra,
    )


def _panel_errors(f, edges, estimates) -> float:
    exact = np.array([f.integral(lo, hi) for lo, hi in zip(edges[:-1], edges[1:])])
    return float(np.mean(np.abs(estimates - exact)))


def simpson_sweep(functions, steps: Sequence[float], workers: int = 1) -> List[ParetoPoint]:
    """Equidistant composite Simpson with panels of width 2h for every h of the sweep."""
    points = []
    for h in steps:
        def run(f, h=h):
            a, b = f.domain
            edges, estimates, evals = composite_rule_panels(SIMPSON, f, a, b, 2.0 * h)
            return _panel_errors(f, edges, estimates), evals

        points.append(_reduce(f"simpson(h={h:g})", "simpson", h, _map(run, functions, workers)))
    return points


def subdivision_sweep(functions, budgets: Sequence[int], workers: int = 1) -> List[ParetoPoint]:
    """Greedy bisection at each evaluation budget; errors per final interval."""
    points = []
    for budget in budgets:
        def run(f, budget=budget):
            a, b = f.domain
            res = subdivide(f, a, b, budget)
            errors = [abs(iv.fine - f.integral(iv.a, iv.b)) for iv in res.intervals]
            return float(np.mean(errors)), res.evaluations_used

        points.append(_reduce(f"subdivision(n={budget})", "subdivision", budget, _map(run, functions, workers)))
    return points


def optimal_weights_sweep(
    spec: FunctionClassSpec, functions, steps: Sequence[float], samples: int, rng: np.random.Generator, workers: int = 1
) -> List[ParetoPoint]:
    """The Simpson sweep again with weights fitted for panels of the same width."""
    points = []
    a, b = spec.domain
    for h in steps:
        if 2.0 * h > b - a:
            continue
        rule = fit_panel_weights(spec, 2.0 * h, samples, rng).to_quadrature_rule(label=f"optimal(h={h:g})")

        def run(f, rule=rule, h=h):
            edges, estimates, evals = composite_rule_panels(rule, f, a, b, 2.0 * h)
            return _panel_errors(f, edges, estimates), evals

        points.append(_reduce(rule.label, "optimal_weights", h, _map(run, functions, workers)))
    return points


def learner_point(label: str, learner, functions, reward_cfg: Optional[RewardConfig] = None, workers: int = 1) -> ParetoPoint:
    """Greedy rollouts of a trained learner over the common sample."""
    def run(f):
        res = integrate_with_learner(learner, f, reward_cfg=reward_cfg)
        return res.avg_error, res.evaluations, res.step_sizes[1:]

    results = _map(run, functions, workers)
    chosen = Counter(float(h) for _, _, steps in results for h in steps)
    modal = chosen.most_common(1)[0][0] if chosen else None
    return _reduce(label, "learner", learner.encoder.memory, [(e, n) for e, n, _ in results], modal_step=modal)


def settles_after_break(rollout, break_point: float, h_max: float, before: int = 3, after: int = 2) -> bool:
    """Steps shrink towards a break and return to h_max right after it.

    Only trainable steps count, so the warm-up and a shortened last step are
    ignored. A break too close to the end to leave a step behind it passes
    the second condition.
    """
    steps = [r for r in rollout.rows if r.trainable]
    approach = [r.h for r in steps if r.position < break_point][-before:]
    behind = [r.h for r in steps if r.position >= break_point][:after]
    shrinking = bool(np.all(np.diff(approach) <= 1e-12 * h_max))
    recovered = not behind or any(np.isclose(h, h_max) for h in behind)
    return shrinking and recovered


def break_settling_rate(learner, spec: FunctionClassSpec, count: int, rng: np.random.Generator,
                        reward_cfg: Optional[RewardConfig] = None) -> float:
    """Share of sampled broken polynomials on which the greedy learner settles around the break."""
    if count <= 0:
        raise ConfigError(f"must be positive, got {count}", field="bench.function_count")
    h_max = learner.actions.h_max
    hits = 0
    for f in sample_batch(spec, count, rng):
        if f.break_point is None:
            raise ContractViolation(f"{spec.class_id.value} functions carry no break point")
        rollout = integrate_with_learner(learner, f, reward_cfg=reward_cfg)
        hits += settles_after_break(rollout, f.break_point, h_max)
    return hits / count


def bench_quadrature(
    spec: FunctionClassSpec,
    count: int,
    simpson_steps: Sequence[float],
    subdivision_budgets: Sequence[int],
    learners: Sequence[Tuple[str, BaseLearner]] = (),
    reward_cfg: Optional[RewardConfig] = None,
    optimal_weights: bool = False,
    weight_samples: int = 10_000,
    seed: int = 0,
    workers: int = 1,
) -> List[ParetoPoint]:
    """All quadrature rows on one common sample of functions."""
    if count <= 0:
        raise ConfigError(f"the benchmark needs at least one function, got {count}", field="bench.function_count")
    rng = np.random.default_rng(seed)
    functions = list(sample_batch(spec, count, rng))
    logger.info("quadrature benchmark on %d %s functions", count, spec.class_id.value)
    points = []
    for label, learner in learners:
        points.append(learner_point(label, learner, functions, reward_cfg, workers))
    points.extend(simpson_sweep(functions, simpson_steps, workers))
    points.extend(subdivision_sweep(functions, subdivision_budgets, workers))
    if optimal_weights:
        points.extend(optimal_weights_sweep(spec, functions, simpson_steps, weight_samples, rng, workers))
    return points


# ODEs


class _RecordingTracker(ModeTracker):
    """Mode tracker that remembers the mode each accepted step started in."""

    def __init__(self, sys: OdeSystem, mode=None, t0: float = 0.0):
        super().__init__(sys, mode, t0)
        self.step_modes = []

    def commit(self, t, x):
        self.step_modes.append(self.mode)
        super().commit(t, x)


@dataclass
class OdeRun:
    avg_error: float
    evals_per_unit: float
    rejected: int = 0
    evals_all_per_unit: Optional[float] = None
    evals_accepted_per_unit: Optional[float] = None
    switch_times: List[float] = field(default_factory=list)


def rk45_run(system: OdeSystem, t_span, x0, tol: float, oracle: ReferenceOracle) -> OdeRun:
    """RK45 with rtol = atol = tol; local errors of the accepted steps against the oracle."""
    t0, t1 = t_span
    tracker = _RecordingTracker(system, system.initial_mode(t0, x0), t0)
    res = rk45_adaptive(DORMAND_PRINCE, tracker, (t0, t1), x0, rtol=tol, atol=tol, keep_steps=True)
    errors = [
        float(np.linalg.norm(step.x_next - oracle.flow(step.t, step.x, mode, step.h)))
        for step, mode in zip(res.steps, tracker.step_modes)
    ]
    span = res.ts[-1] - t0
    attempts = len(res.log)
    return OdeRun(
        avg_error=float(np.mean(errors)) if errors else 0.0,
        evals_per_unit=res.evaluations / span,
        rejected=res.rejected,
        evals_all_per_unit=7 * attempts / span,
        evals_accepted_per_unit=(1 + 6 * res.accepted) / span,
        switch_times=list(tracker.switch_times),
    )


def learner_run(learner, system: OdeSystem, t_span, x0, reward_cfg=None, oracle_tol: float = 1e-10) -> OdeRun:
    if isinstance(learner, MetaLearner):
        res = integrate_with_meta(learner, system, t_span, reward_cfg, x0=x0, oracle_tol=oracle_tol).result
    else:
        res = integrate_with_learner(learner, system, t_span, reward_cfg, x0=x0, oracle_tol=oracle_tol)
    return OdeRun(avg_error=res.avg_error, evals_per_unit=res.evals_per_unit, switch_times=res.switch_times)


def initial_conditions(system: OdeSystem, random_ics: int, seed: int = 0) -> List[np.ndarray]:
    """The system's own initial condition, or a reproducible random sample from its box."""
    if random_ics <= 0:
        return [system.initial_condition]
    rng = np.random.default_rng(seed)
    return [system.random_initial_condition(rng) for _ in range(random_ics)]


def bench_ode(
    system: OdeSystem,
    t_span: Tuple[float, float],
    rk45_tolerances: Sequence[float],
    learners: Sequence[Tuple[str, object]] = (),
    reward_cfg: Optional[RewardConfig] = None,
    random_ics: int = 0,
    seed: int = 0,
    oracle_tol: float = 1e-10,
    workers: int = 1,
) -> List[ParetoPoint]:
    """Learner rows and RK45 rows at each tolerance, averaged over the initial conditions."""
    if len(rk45_tolerances) < 3:
        raise ConfigError("RK45 needs at least three tolerances for a front", field="bench.rk45_tolerances")
    ics = initial_conditions(system, random_ics, seed)
    oracle = ReferenceOracle(system, oracle_tol)
    logger.info("ODE benchmark on %s over %s with %d initial conditions", system.system_id.value, t_span, len(ics))
    points = []
    for label, learner in learners:
        runs = _map(lambda x0: learner_run(learner, system, t_span, x0, reward_cfg, oracle_tol), ics, workers)
        points.append(ParetoPoint(
            method=label,
            family="meta" if isinstance(learner, MetaLearner) else "learner",
            parameter=float(learner.encoder.memory),
            avg_error_per_step=float(np.mean([r.avg_error for r in runs])),
            avg_evaluations=float(np.mean([r.evals_per_unit for r in runs])),
            rejected_steps=0.0,
            runs=len(runs),
        ))
    for tol in rk45_tolerances:
        runs = _map(lambda x0: rk45_run(system, t_span, x0, tol, oracle), ics, workers)
        points.append(ParetoPoint(
            method=f"rk45(tol={tol:g})",
            family="rk45",
            parameter=float(tol),
            avg_error_per_step=float(np.mean([r.avg_error for r in runs])),
            avg_evaluations=float(np.mean([r.evals_per_unit for r in runs])),
            rejected_steps=float(np.mean([r.rejected for r in runs])),
            evals_all=float(np.mean([r.evals_all_per_unit for r in runs])),
            evals_accepted=float(np.mean([r.evals_accepted_per_unit for r in runs])),
            runs=len(runs),
        ))
    return points
