"""Explicit Runge-Kutta stepping, the Dormand-Prince 5(4) pair and the RK45 controller."""

import csv
import logging
from dataclasses import dataclass, field
from fractions import Fraction as Fr
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import numpy as np

from .errors import ContractViolation, IntegrationFailure, StepFailure

logger = logging.getLogger(__name__)

Rhs = Callable[[float, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class ButcherTableau:
    """Coefficients of an explicit embedded Runge-Kutta pair."""

    a: np.ndarray
    b: np.ndarray
    b_hat: np.ndarray
    c: np.ndarray
    order: int = 5
    fsal: bool = False
    name: str = "tableau"

    @property
    def stage_count(self) -> int:
        return len(self.c)

    def validate(self, tol: float = 1e-14):
        """Check explicitness, row sums and weight sums."""
        s = self.stage_count
        if self.a.shape != (s, s) or self.b.shape != (s,) or self.b_hat.shape != (s,):
            raise ContractViolation(f"inconsistent tableau shapes for {self.name}")
        if np.any(np.triu(self.a) != 0.0):
            raise ContractViolation(f"{self.name} is not explicit: a[i, j] != 0 for j >= i")
        row_sums = self.a.sum(axis=1)
        if np.max(np.abs(row_sums - self.c)) > tol:
            raise ContractViolation(f"{self.name}: row sums of a differ from c")
        if abs(self.b.sum() - 1.0) > tol or abs(self.b_hat.sum() - 1.0) > tol:
            raise ContractViolation(f"{self.name}: weights do not sum to one")
        return self


def _tableau_from_fractions(rows, b, b_hat, name, order, fsal) -> ButcherTableau:
    s = len(b)
    a = np.zeros((s, s))
    for i, row in enumerate(rows):
        for j, value in enumerate(row):
            a[i, j] = float(value)
    c = np.array([float(sum(row, Fr(0))) for row in rows])
    return ButcherTableau(
        a=a,
        b=np.array([float(v) for v in b]),
        b_hat=np.array([float(v) for v in b_hat]),
        c=c,
        order=order,
        fsal=fsal,
        name=name,
    )


DORMAND_PRINCE = _tableau_from_fractions(
    rows=[
        [],
        [Fr(1, 5)],
        [Fr(3, 40), Fr(9, 40)],
        [Fr(44, 45), Fr(-56, 15), Fr(32, 9)],
        [Fr(19372, 6561), Fr(-25360, 2187), Fr(64448, 6561), Fr(-212, 729)],
        [Fr(9017, 3168), Fr(-355, 33), Fr(46732, 5247), Fr(49, 176), Fr(-5103, 18656)],
        [Fr(35, 384), Fr(0), Fr(500, 1113), Fr(125, 192), Fr(-2187, 6784), Fr(11, 84)],
    ],
    b=[Fr(35, 384), Fr(0), Fr(500, 1113), Fr(125, 192), Fr(-2187, 6784), Fr(11, 84), Fr(0)],
    b_hat=[
        Fr(5179, 57600),
        Fr(0),
        Fr(7571, 16695),
        Fr(393, 640),
        Fr(-92097, 339200),
        Fr(187, 2100),
        Fr(1, 40),
    ],
    name="dopri5",
    order=5,
    fsal=True,
)


@dataclass
class RkStepResult:
    """Outcome of one explicit RK step from (t, x) with step h."""

    t: float
    h: float
    x: np.ndarray
    x_next: np.ndarray
    x_next_embedded: np.ndarray
    stages: np.ndarray
    evaluations: int

    @property
    def t_next(self) -> float:
        return self.t + self.h


def rk_step(
    tab: ButcherTableau,
    rhs: Rhs,
    t: float,
    x,
    h: float,
    k1: Optional[np.ndarray] = None,
) -> RkStepResult:
    """Compute the stages successively and both solutions of the embedded pair.

    A precomputed first stage (FSAL reuse) saves one evaluation.
    """
    if not h > 0:
        raise ContractViolation(f"rk_step needs h > 0, got {h}")
    x = np.asarray(x, dtype=float)
    s = tab.stage_count
    stages = np.empty((s,) + x.shape)
    evaluations = 0
    for i in range(s):
        if i == 0 and k1 is not None:
            stages[0] = k1
            continue
        x_stage = x + h * np.tensordot(tab.a[i, :i], stages[:i], axes=1) if i else x
        stages[i] = rhs(t + tab.c[i] * h, x_stage)
        evaluations += 1
        if not np.all(np.isfinite(stages[i])):
            raise StepFailure(f"non-finite stage k{i + 1} at t={t:g}, h={h:g}")
    x_next = x + h * np.tensordot(tab.b, stages, axes=1)
    x_embedded = x + h * np.tensordot(tab.b_hat, stages, axes=1)
    return RkStepResult(
        t=t, h=h, x=x, x_next=x_next, x_next_embedded=x_embedded, stages=stages, evaluations=evaluations
    )


def error_norm(step: RkStepResult, rtol: float, atol: float) -> float:
    """Scaled RMS norm of the difference between the two embedded solutions."""
    scale = atol + rtol * np.maximum(np.abs(step.x), np.abs(step.x_next))
    return float(np.sqrt(np.mean(((step.x_next - step.x_next_embedded) / scale) ** 2)))


@dataclass
class StepRecord:
    t: float
    h: float
    accepted: bool
    error_estimate: float
    cumulative_evals: int


@dataclass
class AdaptiveResult:
    """Accepted trajectory of an adaptive run and the log of every attempted step."""

    ts: np.ndarray
    xs: np.ndarray
    log: List[StepRecord] = field(default_factory=list)
    steps: List[RkStepResult] = field(default_factory=list)
    stopped: bool = False

    @property
    def evaluations(self) -> int:
        return self.log[-1].cumulative_evals if self.log else 0

    @property
    def rejected(self) -> int:
        return sum(1 for r in self.log if not r.accepted)

    @property
    def accepted(self) -> int:
        return sum(1 for r in self.log if r.accepted)

    def write_log(self, path):
        """Write the step log as CSV (t, h, accepted, error_estimate, cumulative_evals)."""
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["t", "h", "accepted", "error_estimate", "cumulative_evals"])
            for r in self.log:
                writer.writerow([repr(r.t), repr(r.h), int(r.accepted), repr(r.error_estimate), r.cumulative_evals])
        return path


# Controller constants of the mainstream RK45 implementations
SAFETY = 0.9
FAC_MIN = 0.2
FAC_MAX = 10.0


def initial_step(rhs_value: np.ndarray, x: np.ndarray, rtol: float, atol: float) -> float:
    """First step guess from the size of the state and of its derivative."""
    scale = atol + rtol * np.abs(x)
    d0 = np.sqrt(np.mean((x / scale) ** 2))
    d1 = np.sqrt(np.mean((rhs_value / scale) ** 2))
    if d0 < 1e-5 or d1 < 1e-5:
        return 1e-6
    return float(0.01 * d0 / d1)


def rk45_adaptive(
    tab: ButcherTableau,
    rhs: Rhs,
    t_span: Tuple[float, float],
    x0,
    rtol: float,
    atol: float,
    h0: Optional[float] = None,
    h_max: Optional[float] = None,
    h_min: Optional[float] = None,
    fsal: bool = True,
    keep_steps: bool = False,
    stop: Optional[Callable[[float, np.ndarray], bool]] = None,
) -> AdaptiveResult:
    """Integrate with the classical embedded-pair step-size controller.

    Every attempted step is logged. When rhs exposes ``begin_step`` and
    ``commit`` (see problems.ModeTracker) they are called around each
    attempt so that switched systems only change mode on accepted steps.
    ``stop(t, x)`` is checked after every accepted step and ends the run
    early when it returns True.
    """
    if not (rtol > 0 and atol > 0):
        raise ContractViolation(f"rk45_adaptive needs rtol, atol > 0, got {rtol}, {atol}")
    t0, t_end = float(t_span[0]), float(t_span[1])
    if not t_end > t0:
        raise ContractViolation(f"empty time span {t_span}")
    begin_step = getattr(rhs, "begin_step", None)
    commit = getattr(rhs, "commit", None)
    h_max = h_max if h_max is not None else t_end - t0
    x = np.asarray(x0, dtype=float)
    t = t0
    evals = 0

    use_fsal = fsal and tab.fsal
    k1 = None
    if h0 is None or use_fsal:
        if begin_step:
            begin_step()
        k1 = np.asarray(rhs(t, x), dtype=float)
        evals += 1
    h = h0 if h0 is not None else initial_step(k1, x, rtol, atol)
    h = min(h, h_max)

    ts, xs = [t], [x.copy()]
    result = AdaptiveResult(ts=np.empty(0), xs=np.empty(0))
    exponent = -1.0 / tab.order
    while t < t_end:
        floor = h_min if h_min is not None else 10.0 * np.finfo(float).eps * max(1.0, abs(t))
        if h < floor:
            raise IntegrationFailure(f"step size underflow at t={t:g} (h={h:g} < {floor:g})")
        h_try = min(h, t_end - t)
        if begin_step:
            begin_step()
        step = rk_step(tab, rhs, t, x, h_try, k1=k1)
        evals += step.evaluations
        err = error_norm(step, rtol, atol)
        accepted = err <= 1.0
        result.log.append(StepRecord(t=t, h=h_try, accepted=accepted, error_estimate=err, cumulative_evals=evals))
        if err == 0.0:
            factor = FAC_MAX
        else:
            factor = min(FAC_MAX, max(FAC_MIN, SAFETY * err ** exponent))
        if accepted:
            t = t + h_try if h_try < t_end - t else t_end
            x = step.x_next
            if commit:
                commit(t, x)
            if use_fsal:
                k1 = step.stages[-1]
            ts.append(t)
            xs.append(x.copy())
            if keep_steps:
                result.steps.append(step)
            h = min(h_try * factor, h_max)
            if stop is not None and stop(t, x):
                result.stopped = True
                break
        else:
            logger.debug("rejected step t=%g h=%g err=%.3g", t, h_try, err)
            h = h_try * min(1.0, factor)
        if not use_fsal:
            k1 = None
    result.ts = np.array(ts)
    result.xs = np.array(xs)
    return result


def local_error(step: RkStepResult, oracle: Callable[[float, np.ndarray, float], np.ndarray]) -> float:
    """Euclidean distance between the step result and the exact flow restarted from step.x.

    ``oracle(t, x, h)`` returns the exact solution at t + h starting from x at t.
    """
    exact = oracle(step.t, step.x, step.h)
    if exact is None:
        raise ContractViolation(f"oracle does not cover [{step.t:g}, {step.t_next:g}]")
    return float(np.linalg.norm(step.x_next - np.asarray(exact, dtype=float)))
