"""Function classes and ODE systems used for training and benchmarks, with reference oracles."""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, NamedTuple, Optional, Tuple, Union

import numpy as np
from numpy.polynomial import Polynomial
from numpy.polynomial import polynomial as P
from scipy.optimize import brentq

from .errors import BreakSearchError, ConfigError, ContractViolation, IntegrationFailure, StepFailure
from .ode import DORMAND_PRINCE, rk45_adaptive, rk_step
from .quad import composite_simpson

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi


class FunctionClass(str, Enum):
    SUPERPOSED_SINES_5 = "SuperposedSines5"
    SINGLE_SINE = "SingleSine"
    BROKEN_POLY_5 = "BrokenPoly5"
    POLY_DEG_N = "PolyDegN"
    DAMPED_OSCILLATOR_VELOCITY = "DampedOscillatorVelocity"

    @classmethod
    def parse(cls, value) -> "FunctionClass":
        try:
            return cls(value)
        except ValueError:
            choices = ", ".join(c.value for c in cls)
            raise ConfigError(f"unknown function class {value!r} (choose from {choices})", field="problem.function_class")


SINE_CLASSES = (FunctionClass.SUPERPOSED_SINES_5, FunctionClass.SINGLE_SINE)
POLY_CLASSES = (FunctionClass.BROKEN_POLY_5, FunctionClass.POLY_DEG_N)

DEFAULT_DOMAINS = {
    FunctionClass.SUPERPOSED_SINES_5: (0.0, 20.0),
    FunctionClass.SINGLE_SINE: (0.0, 20.0),
    FunctionClass.BROKEN_POLY_5: (-1.0, 1.0),
    FunctionClass.POLY_DEG_N: (0.0, 1.0),
    FunctionClass.DAMPED_OSCILLATOR_VELOCITY: (0.0, 1.0),
}

DEFAULT_RANGES = {
    FunctionClass.SUPERPOSED_SINES_5: {"amplitude": (0.0, 1.0), "frequency": (0.0, TWO_PI), "phase": (0.0, TWO_PI)},
    FunctionClass.SINGLE_SINE: {"amplitude": (0.0, 1.0), "frequency": (0.0, TWO_PI), "phase": (0.0, TWO_PI)},
    FunctionClass.BROKEN_POLY_5: {"coefficient": (-1.0, 1.0)},
    FunctionClass.POLY_DEG_N: {"coefficient": (-1.0, 1.0)},
    FunctionClass.DAMPED_OSCILLATOR_VELOCITY: {
        "amplitude": (0.0, 1.0),
        "frequency": (0.0, TWO_PI),
        "phase": (0.0, TWO_PI),
        "damping": (0.0, 1.0),
    },
}

COEFFICIENT_LAWS = ("uniform", "normal")

# redraw cap for broken polynomials without a derivative-one point in the domain
MAX_BREAK_REDRAWS = 1000


@dataclass
class FunctionClassSpec:
    """A function class together with its sampling measure."""

    class_id: FunctionClass
    domain: Optional[Tuple[float, float]] = None
    degree: Optional[int] = None
    coefficient_law: str = "uniform"
    ranges: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        self.class_id = FunctionClass.parse(self.class_id)
        if self.domain is None:
            self.domain = DEFAULT_DOMAINS[self.class_id]
        self.domain = (float(self.domain[0]), float(self.domain[1]))
        if self.degree is None:
            self.degree = 5 if self.class_id == FunctionClass.BROKEN_POLY_5 else 4
        merged = dict(DEFAULT_RANGES[self.class_id])
        merged.update({k: (float(v[0]), float(v[1])) for k, v in self.ranges.items()})
        self.ranges = merged
        self.validate()

    def validate(self):
        a, b = self.domain
        if not a < b:
            raise ConfigError(f"empty domain [{a}, {b}]", field="problem.domain")
        if self.degree < 0:
            raise ConfigError(f"degree must be non-negative, got {self.degree}", field="problem.degree")
        if self.coefficient_law not in COEFFICIENT_LAWS:
            raise ConfigError(
                f"unknown coefficient law {self.coefficient_law!r}, use one of {COEFFICIENT_LAWS}",
                field="problem.coefficient_law",
            )
        for name, (lo, hi) in self.ranges.items():
            if name not in DEFAULT_RANGES[self.class_id]:
                raise ConfigError(f"{self.class_id.value} has no parameter {name!r}", field="problem.ranges")
            if hi < lo:
                raise ConfigError(f"range for {name} is reversed: ({lo}, {hi})", field="problem.ranges")
        return self


# Kernels. Parameter arrays carry an optional leading batch axis; x is 1-D.


def _sine_values(params, x):
    arg = params["frequencies"][..., None, :] * x[:, None] + params["phases"][..., None, :]
    return np.sum(params["amplitudes"][..., None, :] * np.sin(arg), axis=-1)


def _sine_integrals(params, a, b):
    c, w, phi = params["amplitudes"], params["frequencies"], params["phases"]
    tiny = np.abs(w) < 1e-12
    safe_w = np.where(tiny, 1.0, w)
    terms = np.where(
        tiny,
        c * np.sin(phi) * (b - a),
        c * (np.cos(w * a + phi) - np.cos(w * b + phi)) / safe_w,
    )
    return np.sum(terms, axis=-1)


def _poly_values(params, x, break_point):
    coef = params["coefficients"]
    values = P.polyval(x, coef.T)
    if break_point is None:
        return values
    return np.where(x > np.asarray(break_point)[..., None], 0.0, values)


def _poly_integrals(params, a, b, break_point):
    anti = P.polyint(params["coefficients"], axis=-1).T
    if break_point is None:
        return P.polyval(b, anti) - P.polyval(a, anti)
    upper = np.fmin(b, break_point)
    inside = P.polyval(upper, anti, tensor=False) - P.polyval(a, anti)
    return np.where(upper > a, inside, 0.0)


def _oscillator_position(params, t):
    amp, w, phi, damp = (params[k][..., None] for k in ("amplitude", "frequency", "phase", "damping"))
    return amp * np.sin(w * t + phi) * np.exp(-damp * t)


def _oscillator_values(params, t):
    amp, w, phi, damp = (params[k][..., None] for k in ("amplitude", "frequency", "phase", "damping"))
    return -amp * np.exp(-damp * t) * (damp * np.sin(w * t + phi) - w * np.cos(w * t + phi))


def _values(class_id, params, break_point, x):
    if class_id in SINE_CLASSES:
        return _sine_values(params, x)
    if class_id in POLY_CLASSES:
        return _poly_values(params, x, break_point)
    return _oscillator_values(params, x)


def _integrals(class_id, params, break_point, a, b):
    if class_id in SINE_CLASSES:
        return _sine_integrals(params, a, b)
    if class_id in POLY_CLASSES:
        return _poly_integrals(params, a, b, break_point)
    ends = _oscillator_position(params, np.array([a, b]))
    return ends[..., 1] - ends[..., 0]


@dataclass
class SampledFunction:
    """One draw from a function class: callable on scalars or arrays, with an exact integral."""

    class_id: FunctionClass
    parameters: Dict[str, np.ndarray]
    domain: Tuple[float, float]
    break_point: Optional[float] = None

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        values = _values(self.class_id, self.parameters, self.break_point, x.reshape(-1)).reshape(x.shape)
        return float(values) if values.ndim == 0 else values

    def integral(self, a: float, b: float) -> float:
        """Closed-form integral over [a, b]."""
        return float(_integrals(self.class_id, self.parameters, self.break_point, float(a), float(b)))

    @classmethod
    def sines(cls, amplitudes, frequencies, phases, domain=(0.0, 20.0)) -> "SampledFunction":
        params = {
            "amplitudes": np.atleast_1d(np.asarray(amplitudes, dtype=float)),
            "frequencies": np.atleast_1d(np.asarray(frequencies, dtype=float)),
            "phases": np.atleast_1d(np.asarray(phases, dtype=float)),
        }
        class_id = FunctionClass.SINGLE_SINE if params["amplitudes"].size == 1 else FunctionClass.SUPERPOSED_SINES_5
        return cls(class_id=class_id, parameters=params, domain=tuple(domain))

    @classmethod
    def polynomial(cls, coefficients, domain=(0.0, 1.0), broken: bool = False) -> "SampledFunction":
        """Polynomial with ascending coefficients; ``broken`` cuts it at its derivative-one point."""
        params = {"coefficients": np.asarray(coefficients, dtype=float)}
        class_id = FunctionClass.BROKEN_POLY_5 if broken else FunctionClass.POLY_DEG_N
        f = cls(class_id=class_id, parameters=params, domain=tuple(domain))
        if broken:
            f.break_point = locate_break(f)
        return f

    @classmethod
    def oscillator(cls, amplitude, frequency, phase, damping, domain=(0.0, 1.0)) -> "SampledFunction":
        params = {
            "amplitude": np.asarray(float(amplitude)),
            "frequency": np.asarray(float(frequency)),
            "phase": np.asarray(float(phase)),
            "damping": np.asarray(float(damping)),
        }
        return cls(class_id=FunctionClass.DAMPED_OSCILLATOR_VELOCITY, parameters=params, domain=tuple(domain))

    def to_record(self) -> dict:
        """Plain-data record (YAML/JSON friendly) of the drawn parameters."""
        return {
            "class": self.class_id.value,
            "domain": list(self.domain),
            "break_point": self.break_point,
            "parameters": {k: np.asarray(v).tolist() for k, v in self.parameters.items()},
        }

    @classmethod
    def from_record(cls, record: dict) -> "SampledFunction":
        try:
            return cls(
                class_id=FunctionClass.parse(record["class"]),
                parameters={k: np.asarray(v, dtype=float) for k, v in record["parameters"].items()},
                domain=tuple(record["domain"]),
                break_point=record.get("break_point"),
            )
        except (KeyError, TypeError) as e:
            raise ContractViolation(f"malformed function record: {e}") from e


@dataclass
class FunctionBatch:
    """Many draws of one class stored as stacked parameter arrays."""

    class_id: FunctionClass
    parameters: Dict[str, np.ndarray]
    domain: Tuple[float, float]
    break_points: Optional[np.ndarray] = None

    def __len__(self) -> int:
        first = next(iter(self.parameters.values()))
        return first.shape[0]

    def values(self, x) -> np.ndarray:
        """Values at the points x, shape (len(batch), len(x))."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return _values(self.class_id, self.parameters, self.break_points, x)

    def integrals(self, a: float, b: float) -> np.ndarray:
        return _integrals(self.class_id, self.parameters, self.break_points, float(a), float(b))

    def function(self, i: int) -> SampledFunction:
        bp = None if self.break_points is None else float(self.break_points[i])
        return SampledFunction(
            class_id=self.class_id,
            parameters={k: np.asarray(v[i]) for k, v in self.parameters.items()},
            domain=self.domain,
            break_point=bp,
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self.function(i)


def _draw_coefficients(spec: FunctionClassSpec, rng: np.random.Generator, shape) -> np.ndarray:
    if spec.class_id == FunctionClass.POLY_DEG_N and spec.coefficient_law == "normal":
        return rng.standard_normal(shape)
    lo, hi = spec.ranges["coefficient"]
    return rng.uniform(lo, hi, shape)


def sample_batch(spec: FunctionClassSpec, count: int, rng: Optional[np.random.Generator] = None) -> FunctionBatch:
    """Draw ``count`` functions from the class measure; repeatable for a fixed generator state."""
    if count < 0:
        raise ConfigError(f"sample count must be non-negative, got {count}", field="count")
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    cid = spec.class_id
    r = spec.ranges
    break_points = None
    if cid in SINE_CLASSES:
        terms = 5 if cid == FunctionClass.SUPERPOSED_SINES_5 else 1
        params = {
            "amplitudes": rng.uniform(*r["amplitude"], (count, terms)),
            "frequencies": rng.uniform(*r["frequency"], (count, terms)),
            "phases": rng.uniform(*r["phase"], (count, terms)),
        }
    elif cid == FunctionClass.DAMPED_OSCILLATOR_VELOCITY:
        params = {
            "amplitude": rng.uniform(*r["amplitude"], count),
            "frequency": rng.uniform(*r["frequency"], count),
            "phase": rng.uniform(*r["phase"], count),
            "damping": rng.uniform(*r["damping"], count),
        }
    else:
        coef = _draw_coefficients(spec, rng, (count, spec.degree + 1))
        params = {"coefficients": coef}
        if cid == FunctionClass.BROKEN_POLY_5:
            break_points = np.empty(count)
            for i in range(count):
                break_points[i] = _draw_break(spec, rng, coef, i)
    return FunctionBatch(class_id=cid, parameters=params, domain=spec.domain, break_points=break_points)


def _draw_break(spec: FunctionClassSpec, rng: np.random.Generator, coef: np.ndarray, i: int) -> float:
    for _ in range(MAX_BREAK_REDRAWS):
        try:
            bp = _break_of(coef[i], spec.domain)
        except BreakSearchError as e:
            logger.debug("redrawing broken polynomial: %s", e)
            bp = None
        if bp is not None:
            return bp
        coef[i] = _draw_coefficients(spec, rng, coef.shape[1])
    raise BreakSearchError(f"no broken polynomial with a break in {spec.domain} after {MAX_BREAK_REDRAWS} draws")


def sample_function(spec: FunctionClassSpec, rng: Optional[np.random.Generator] = None) -> SampledFunction:
    """Draw one function from the class measure (same stream as a batch of one)."""
    return sample_batch(spec, 1, rng).function(0)


def _break_of(coefficients, domain) -> Optional[float]:
    a, b = domain
    shifted = Polynomial(coefficients).deriv() - 1.0
    if not np.any(shifted.coef):
        return a
    try:
        roots = shifted.roots()
    except np.linalg.LinAlgError as e:
        raise BreakSearchError(f"root finding on p'(x) - 1 failed: {e}") from e
    real = roots[np.abs(roots.imag) <= 1e-7 * np.maximum(1.0, np.abs(roots))].real
    inside = real[(real >= a - 1e-12) & (real <= b + 1e-12)]
    if inside.size == 0:
        return None
    return float(np.clip(inside.min(), a, b))


def locate_break(f: SampledFunction) -> Optional[float]:
    """Smallest point of the domain where the polynomial's derivative equals one."""
    if "coefficients" not in f.parameters:
        raise ContractViolation(f"{f.class_id.value} has no underlying polynomial")
    return _break_of(f.parameters["coefficients"], f.domain)


REFERENCE_DIVISIONS = 2 ** 16


def reference_integral(f, a: float, b: float) -> float:
    """Fine composite Simpson estimate used as ground truth when no closed form is used.

    Broken polynomials are integrated only up to their break point.
    """
    if not a < b:
        raise ContractViolation(f"reference_integral needs a < b, got [{a}, {b}]")
    bp = getattr(f, "break_point", None)
    if bp is not None:
        if bp <= a:
            return 0.0
        b = min(b, bp)
    integral, _ = composite_simpson(f, a, b, (b - a) / REFERENCE_DIVISIONS)
    return integral


# ODE systems


class OdeSystemId(str, Enum):
    LORENZ = "Lorenz"
    HYBRID_PENDULUM = "HybridPendulum"

    @classmethod
    def parse(cls, value) -> "OdeSystemId":
        try:
            return cls(value)
        except ValueError:
            choices = ", ".join(c.value for c in cls)
            raise ConfigError(f"unknown ODE system {value!r} (choose from {choices})", field="problem.system")


class Mode(NamedTuple):
    """Active vector field of a switched system and the time it was entered."""

    index: int
    t_enter: float = 0.0


DEFAULT_PARAMETERS = {
    OdeSystemId.LORENZ: {"sigma": 10.0, "beta": 8.0 / 3.0, "rho": 28.0},
    OdeSystemId.HYBRID_PENDULUM: {"a": 2.0, "b": -0.2, "c": 5.0, "d": 1.0, "C1": 0.05, "C2": 3.3},
}
DEFAULT_INITIAL_CONDITIONS = {
    OdeSystemId.LORENZ: (10.0, 10.0, 10.0),
    OdeSystemId.HYBRID_PENDULUM: (1.0, 1.0),
}
# box for random initial conditions
DEFAULT_IC_BOX = {
    OdeSystemId.LORENZ: (-10.0, 10.0),
    OdeSystemId.HYBRID_PENDULUM: (-2.0, 2.0),
}
MODE_COUNTS = {OdeSystemId.LORENZ: 1, OdeSystemId.HYBRID_PENDULUM: 2}


@dataclass
class OdeSystem:
    system_id: OdeSystemId
    parameters: Dict[str, float] = field(default_factory=dict)
    initial_condition: Optional[np.ndarray] = None
    ic_box: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        self.system_id = OdeSystemId.parse(self.system_id)
        defaults = DEFAULT_PARAMETERS[self.system_id]
        unknown = set(self.parameters) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown parameters {sorted(unknown)} for {self.system_id.value}", field="problem.parameters")
        self.parameters = {**defaults, **{k: float(v) for k, v in self.parameters.items()}}
        if self.initial_condition is None:
            self.initial_condition = DEFAULT_INITIAL_CONDITIONS[self.system_id]
        self.initial_condition = np.asarray(self.initial_condition, dtype=float)
        if self.initial_condition.shape != (self.state_dim,):
            raise ConfigError(
                f"initial condition needs {self.state_dim} components, got {self.initial_condition.shape}",
                field="problem.initial_condition",
            )
        if self.ic_box is None:
            self.ic_box = DEFAULT_IC_BOX[self.system_id]
        if self.system_id == OdeSystemId.HYBRID_PENDULUM:
            p = self.parameters
            if not 0 < p["C1"] < p["C2"]:
                raise ConfigError("thresholds need 0 < C1 < C2", field="problem.parameters")

    @property
    def state_dim(self) -> int:
        return 3 if self.system_id == OdeSystemId.LORENZ else 2

    @property
    def mode_count(self) -> int:
        return MODE_COUNTS[self.system_id]

    def initial_mode(self, t0: float = 0.0, x0=None) -> Mode:
        x0 = self.initial_condition if x0 is None else x0
        return next_mode(self, Mode(0, t0), t0, x0)

    def random_initial_condition(self, rng: np.random.Generator) -> np.ndarray:
        lo, hi = self.ic_box
        return rng.uniform(lo, hi, self.state_dim)

    def rhs(self, mode: Union[int, Mode] = 0):
        """Pure right-hand side (t, x) -> dx/dt for a fixed mode."""
        return lambda t, x: eval_rhs(self, t, x, mode)


def lorenz(**overrides) -> OdeSystem:
    return OdeSystem(OdeSystemId.LORENZ, **overrides)


def hybrid_pendulum(**overrides) -> OdeSystem:
    return OdeSystem(OdeSystemId.HYBRID_PENDULUM, **overrides)


def _as_mode(mode) -> Mode:
    return mode if isinstance(mode, Mode) else Mode(int(mode), 0.0)


def eval_rhs(sys: OdeSystem, t: float, x, mode: Union[int, Mode] = 0) -> np.ndarray:
    """dx/dt of the system under the given mode. An integer mode is entered at t = 0."""
    x = np.asarray(x, dtype=float)
    if x.shape != (sys.state_dim,):
        raise ContractViolation(f"{sys.system_id.value} expects a state of length {sys.state_dim}, got shape {x.shape}")
    mode = _as_mode(mode)
    if not 0 <= mode.index < sys.mode_count:
        raise ContractViolation(f"{sys.system_id.value} has no mode {mode.index}")
    p = sys.parameters
    if sys.system_id == OdeSystemId.LORENZ:
        return np.array(
            [
                p["sigma"] * (x[1] - x[0]),
                x[0] * (p["rho"] - x[2]) - x[1],
                x[0] * x[1] - p["beta"] * x[2],
            ]
        )
    if mode.index == 0:
        return np.array([p["b"] * x[0] + p["a"] * x[1], -p["a"] * x[0] + p["b"] * x[1]])
    return np.array([0.0, p["c"] * (t - mode.t_enter) + p["d"]])


def next_mode(sys: OdeSystem, mode: Mode, t: float, x) -> Mode:
    """Mode after visiting state x at time t; thresholds on |x| switch the pendulum."""
    if sys.system_id != OdeSystemId.HYBRID_PENDULUM:
        return mode
    norm = float(np.linalg.norm(x))
    if mode.index == 0 and norm < sys.parameters["C1"]:
        return Mode(1, t)
    if mode.index == 1 and norm > sys.parameters["C2"]:
        return Mode(0, t)
    return mode


class ModeTracker:
    """Stateful right-hand side of a switched system for step-based integrators.

    The committed mode is copied at the start of every attempt, may flip while
    the stages are evaluated and only sticks once the step is accepted.
    """

    def __init__(self, sys: OdeSystem, mode: Optional[Mode] = None, t0: float = 0.0):
        self.sys = sys
        self.mode = mode if mode is not None else sys.initial_mode(t0)
        self.trial = self.mode
        self.switch_times: List[float] = []

    def begin_step(self):
        self.trial = self.mode

    def __call__(self, t, x):
        self.trial = next_mode(self.sys, self.trial, t, x)
        return eval_rhs(self.sys, t, x, self.trial)

    def commit(self, t, x):
        before = self.mode
        self.mode = next_mode(self.sys, self.trial, t, x)
        self.trial = self.mode
        if self.mode.index != before.index:
            self.switch_times.append(t)
            logger.debug("mode %d -> %d at t=%g", before.index, self.mode.index, t)


@dataclass
class DenseSegment:
    """Accepted steps of the reference solver inside one mode."""

    mode: Mode
    ts: np.ndarray
    xs: np.ndarray
    fs: np.ndarray

    def __call__(self, t: float) -> np.ndarray:
        i = int(np.clip(np.searchsorted(self.ts, t, side="right") - 1, 0, len(self.ts) - 2))
        h = self.ts[i + 1] - self.ts[i]
        s = (t - self.ts[i]) / h
        h00 = 2 * s ** 3 - 3 * s ** 2 + 1
        h10 = s ** 3 - 2 * s ** 2 + s
        h01 = -2 * s ** 3 + 3 * s ** 2
        h11 = s ** 3 - s ** 2
        return h00 * self.xs[i] + h10 * h * self.fs[i] + h01 * self.xs[i + 1] + h11 * h * self.fs[i + 1]


@dataclass
class DenseSolution:
    """Piecewise cubic-Hermite interpolant of a reference trajectory."""

    segments: List[DenseSegment]
    switch_times: List[float]

    @property
    def t_start(self) -> float:
        return float(self.segments[0].ts[0])

    @property
    def t_end(self) -> float:
        return float(self.segments[-1].ts[-1])

    @property
    def x_end(self) -> np.ndarray:
        return self.segments[-1].xs[-1].copy()

    @property
    def mode_end(self) -> Mode:
        return self.segments[-1].mode

    def mode_at(self, t: float) -> Mode:
        return self._segment(t).mode

    def _segment(self, t: float) -> DenseSegment:
        if not self.t_start <= t <= self.t_end:
            raise ContractViolation(f"t={t:g} outside the reference interval [{self.t_start:g}, {self.t_end:g}]")
        for seg in self.segments:
            if t <= seg.ts[-1]:
                return seg
        return self.segments[-1]

    def __call__(self, t: float) -> np.ndarray:
        seg = self._segment(t)
        if len(seg.ts) == 1:
            return seg.xs[0].copy()
        return seg(t)


REFERENCE_TOL = 1e-10
SWITCH_TIME_TOL = 1e-10
MAX_SWITCHES = 10000


def _segment_from_steps(mode, steps, x0, t0) -> DenseSegment:
    x0 = np.asarray(x0, dtype=float)
    if not steps:
        return DenseSegment(mode=mode, ts=np.array([t0]), xs=x0[None, :], fs=np.zeros((1, x0.size)))
    ts = np.array([t0] + [s.t_next for s in steps])
    xs = np.array([x0] + [s.x_next for s in steps])
    fs = np.array([steps[0].stages[0]] + [s.stages[-1] for s in steps])
    return DenseSegment(mode=mode, ts=ts, xs=xs, fs=fs)


def reference_trajectory(
    sys: OdeSystem,
    t_span: Tuple[float, float],
    dense_tol: float = REFERENCE_TOL,
    x0=None,
    mode: Optional[Mode] = None,
) -> DenseSolution:
    """High-accuracy dense solution; switches are located by root finding to SWITCH_TIME_TOL."""
    t, t_end = float(t_span[0]), float(t_span[1])
    x = np.asarray(sys.initial_condition if x0 is None else x0, dtype=float)
    mode = sys.initial_mode(t, x) if mode is None else mode
    segments: List[DenseSegment] = []
    switches: List[float] = []
    while t < t_end:
        if len(switches) > MAX_SWITCHES:
            raise IntegrationFailure(f"more than {MAX_SWITCHES} mode switches before t={t_end:g}")
        rhs = sys.rhs(mode)
        if t_end - t <= 1e-12 * max(1.0, abs(t_end)):
            segments.append(_segment_from_steps(mode, [], x, t_end))
            break
        current = mode

        def stop(ts, xs):
            return next_mode(sys, current, ts, xs) != current

        try:
            res = rk45_adaptive(
                DORMAND_PRINCE, rhs, (t, t_end), x, rtol=dense_tol, atol=dense_tol, keep_steps=True, stop=stop
            )
        except (IntegrationFailure, StepFailure) as e:
            raise IntegrationFailure(f"reference solver failed on [{t:g}, {t_end:g}]: {e}") from e
        if not res.stopped:
            segments.append(_segment_from_steps(mode, res.steps, x, t))
            break
        last = res.steps[-1]
        t_switch, x_switch = _locate_switch(sys, current, rhs, last)
        kept = res.steps[:-1]
        if t_switch > last.t:
            kept = kept + [rk_step(DORMAND_PRINCE, rhs, last.t, last.x, t_switch - last.t)]
        segments.append(_segment_from_steps(mode, kept, x, t))
        switches.append(t_switch)
        mode = Mode(1 - current.index, t_switch)
        t, x = t_switch, x_switch
    if not segments:
        raise ContractViolation(f"empty time span {t_span}")
    return DenseSolution(segments=segments, switch_times=switches)


def _locate_switch(sys: OdeSystem, mode: Mode, rhs, last) -> Tuple[float, np.ndarray]:
    threshold = sys.parameters["C1"] if mode.index == 0 else sys.parameters["C2"]

    def gap(tau):
        if tau <= 0:
            return float(np.linalg.norm(last.x)) - threshold
        return float(np.linalg.norm(rk_step(DORMAND_PRINCE, rhs, last.t, last.x, tau).x_next)) - threshold

    lo_gap, hi_gap = gap(0.0), gap(last.h)
    if lo_gap == 0.0:
        return last.t, last.x.copy()
    if np.sign(lo_gap) == np.sign(hi_gap):
        return last.t_next, last.x_next.copy()
    tau = brentq(gap, 0.0, last.h, xtol=SWITCH_TIME_TOL)
    x = last.x.copy() if tau <= 0 else rk_step(DORMAND_PRINCE, rhs, last.t, last.x, tau).x_next
    return last.t + tau, x


class ReferenceOracle:
    """Exact-flow oracle for local errors: restarts the reference solver from any state."""

    def __init__(self, sys: OdeSystem, tol: float = REFERENCE_TOL):
        self.sys = sys
        self.tol = tol

    def flow(self, t: float, x, mode: Mode, h: float) -> np.ndarray:
        return reference_trajectory(self.sys, (t, t + h), self.tol, x0=x, mode=mode).x_end

    def for_mode(self, mode: Mode):
        """Callable (t, x, h) -> exact state at t + h, as expected by ode.local_error."""
        return lambda t, x, h: self.flow(t, x, mode, h)

    def trajectory(self, t_span, x0=None) -> DenseSolution:
        return reference_trajectory(self.sys, t_span, self.tol, x0=x0)


def damped_spiral(sys: OdeSystem, t, x0=None) -> np.ndarray:
    """Closed-form solution of the pendulum's damped vector field from x0 at time 0."""
    p = sys.parameters
    x0 = np.asarray(sys.initial_condition if x0 is None else x0, dtype=float)
    t = float(t)
    ca, sa = math.cos(p["a"] * t), math.sin(p["a"] * t)
    return math.exp(p["b"] * t) * np.array([ca * x0[0] + sa * x0[1], -sa * x0[0] + ca * x0[1]])


def first_switch_time(sys: OdeSystem, x0=None) -> float:
    """Analytic time at which |x| of the damped spiral falls to C1."""
    p = sys.parameters
    x0 = np.asarray(sys.initial_condition if x0 is None else x0, dtype=float)
    return math.log(np.linalg.norm(x0) / p["C1"]) / -p["b"]
