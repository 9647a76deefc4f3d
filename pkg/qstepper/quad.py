"""Classical quadrature kernels: Simpson rules, weighted rules and subdivision."""

import heapq
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Tuple

import numpy as np
import yaml

from .errors import ConfigError, ContractViolation

logger = logging.getLogger(__name__)

Integrand = Callable[[np.ndarray], np.ndarray]


def evaluate(f: Integrand, x) -> np.ndarray:
    """Evaluate f on an array of points; constant results are broadcast."""
    x = np.asarray(x, dtype=float)
    return np.broadcast_to(np.asarray(f(x), dtype=float), x.shape)


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes on [0, 1] and weights; integrates as (b - a) / divisor * sum(w_j f(x_j))."""

    nodes: Tuple[float, ...]
    weights: Tuple[float, ...]
    divisor: float = 1.0
    label: str = "rule"

    def __post_init__(self):
        nodes = tuple(float(c) for c in self.nodes)
        weights = tuple(float(w) for w in self.weights)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)
        if not nodes:
            raise ContractViolation("a quadrature rule needs at least one node")
        if len(nodes) != len(weights):
            raise ContractViolation(
                f"rule has {len(nodes)} nodes but {len(weights)} weights"
            )
        if any(c < 0.0 or c > 1.0 for c in nodes):
            raise ContractViolation(f"rule nodes must lie in [0, 1], got {nodes}")
        if any(b <= a for a, b in zip(nodes, nodes[1:])):
            raise ContractViolation(f"rule nodes must be strictly increasing, got {nodes}")
        if not self.divisor > 0:
            raise ContractViolation("rule divisor must be positive")

    @classmethod
    def simpson(cls) -> "QuadratureRule":
        return cls(nodes=(0.0, 0.5, 1.0), weights=(1.0, 4.0, 1.0), divisor=6.0, label="simpson")

    @property
    def normalized_weights(self) -> np.ndarray:
        """Weights for an interval of unit length."""
        return np.asarray(self.weights) / self.divisor

    def points(self, a: float, b: float) -> np.ndarray:
        """Absolute node positions on [a, b]; the right endpoint is hit exactly."""
        c = np.asarray(self.nodes)
        return np.where(c == 1.0, b, a + c * (b - a))

    def to_text(self) -> str:
        """Serialize to the YAML record shared with the weights report."""
        record = {
            "label": self.label,
            "nodes": list(self.nodes),
            "weights": list(self.weights),
            "divisor": self.divisor,
        }
        return yaml.safe_dump({"quadrature_rule": record}, sort_keys=False)

    @classmethod
    def from_text(cls, text: str) -> "QuadratureRule":
        try:
            record = yaml.safe_load(text)["quadrature_rule"]
            return cls(
                nodes=tuple(record["nodes"]),
                weights=tuple(record["weights"]),
                divisor=float(record.get("divisor", 1.0)),
                label=str(record.get("label", "rule")),
            )
        except (KeyError, TypeError, yaml.YAMLError) as e:
            raise ContractViolation(f"malformed quadrature rule record: {e}") from e


SIMPSON = QuadratureRule.simpson()


class CountingIntegrand:
    """Wrap an integrand and count every point it is evaluated at."""

    def __init__(self, f: Integrand):
        self.f = f
        self.count = 0

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        self.count += x.size
        return self.f(x)


def apply_rule(rule: QuadratureRule, f: Integrand, a: float, b: float) -> float:
    """Apply a quadrature rule on [a, b]."""
    values = evaluate(f, rule.points(a, b))
    total = 0.0
    for w, fx in zip(rule.weights, values):
        total += w * float(fx)
    return (b - a) / rule.divisor * total


def simpson(f: Integrand, a: float, b: float) -> float:
    """Three-point Simpson rule (b - a) / 6 * (f(a) + 4 f(m) + f(b))."""
    if not a < b:
        raise ContractViolation(f"simpson needs a < b, got [{a}, {b}]")
    return apply_rule(SIMPSON, f, a, b)


def panel_edges(a: float, b: float, width: float) -> np.ndarray:
    """Edges of panels of the given width tiling [a, b]; the last one may be shorter."""
    length = b - a
    if width >= length:
        return np.array([a, b])
    n_full = int(math.floor(length / width + 1e-9))
    edges = a + width * np.arange(n_full + 1)
    if b - edges[-1] > 1e-12 * max(1.0, abs(length)):
        edges = np.append(edges, b)
    else:
        edges[-1] = b
    return edges


def composite_simpson(f: Integrand, a: float, b: float, h: float) -> Tuple[float, int]:
    """Composite Simpson rule with panels of width 2h.

    Returns the integral and the exact number of function evaluations, with
    panel endpoints shared between neighbouring panels.
    """
    if not h > 0:
        raise ContractViolation(f"composite_simpson needs h > 0, got {h}")
    if not a < b:
        raise ContractViolation(f"composite_simpson needs a < b, got [{a}, {b}]")
    edges, estimates = composite_simpson_panels(f, a, b, h)
    return float(np.sum(estimates)), 2 * edges.size - 1


def composite_simpson_panels(f: Integrand, a: float, b: float, h: float) -> Tuple[np.ndarray, np.ndarray]:
    """Edges and per-panel Simpson estimates of the composite rule."""
    edges = np.array([a, b]) if h >= b - a else panel_edges(a, b, 2.0 * h)
    mids = 0.5 * (edges[:-1] + edges[1:])
    f_edges = evaluate(f, edges)
    f_mids = evaluate(f, mids)
    estimates = np.diff(edges) / 6.0 * (f_edges[:-1] + 4.0 * f_mids + f_edges[1:])
    return edges, estimates


def composite_rule_panels(rule: QuadratureRule, f: Integrand, a: float, b: float, width: float) -> Tuple[np.ndarray, np.ndarray, int]:
    """Apply a rule on consecutive panels of the given width.

    Returns edges, per-panel estimates and the number of distinct points evaluated.
    """
    if not width > 0:
        raise ContractViolation(f"panel width must be positive, got {width}")
    edges = panel_edges(a, b, width)
    lo, hi = edges[:-1, None], edges[1:, None]
    c = np.asarray(rule.nodes)[None, :]
    points = np.where(c == 1.0, hi, lo + c * (hi - lo))
    unique, inverse = np.unique(points, return_inverse=True)
    values = evaluate(f, unique)[inverse].reshape(points.shape)
    estimates = (hi[:, 0] - lo[:, 0]) / rule.divisor * (values @ np.asarray(rule.weights))
    return edges, estimates, int(unique.size)


@dataclass
class Interval:
    """One interval of a subdivision run: fine Simpson estimate and |I_r - I_f|."""

    a: float
    b: float
    fine: float
    error: float


@dataclass
class SubdivisionResult:
    integral: float
    evaluations_used: int
    intervals: List[Interval] = field(default_factory=list)


MIN_SUBDIVISION_EVALS = 5


def subdivide(f: Integrand, a: float, b: float, max_evals: int, tol: float = 0.0) -> SubdivisionResult:
    """Greedy interval bisection driven by the rough-vs-fine Simpson discrepancy.

    The interval with the largest estimate |I_r - I_f| is split at its
    midpoint (leftmost first on ties) until the next split would exceed
    max_evals or no estimate exceeds tol. The fine estimates are summed.
    """
    if max_evals < MIN_SUBDIVISION_EVALS:
        raise ConfigError(
            f"subdivision needs at least {MIN_SUBDIVISION_EVALS} evaluations, got {max_evals}",
            field="max_evals",
        )
    if not a < b:
        raise ContractViolation(f"subdivide needs a < b, got [{a}, {b}]")

    cache: Dict[float, float] = {}

    def value(x: float) -> float:
        if x not in cache:
            cache[x] = float(evaluate(f, [x])[0])
        return cache[x]

    def estimate(lo: float, hi: float) -> Tuple[float, float]:
        mid = 0.5 * (lo + hi)
        q1, q3 = 0.5 * (lo + mid), 0.5 * (mid + hi)
        f_lo, f_mid, f_hi = value(lo), value(mid), value(hi)
        rough = (hi - lo) / 6.0 * (f_lo + 4.0 * f_mid + f_hi)
        fine = (mid - lo) / 6.0 * (f_lo + 4.0 * value(q1) + f_mid) + (hi - mid) / 6.0 * (
            f_mid + 4.0 * value(q3) + f_hi
        )
        return fine, abs(rough - fine)

    fine, err = estimate(a, b)
    # heap key: (-error, left endpoint) gives the leftmost interval on ties
    heap = [(-err, a, b, fine)]
    while len(cache) + 4 <= max_evals:
        neg_err, lo, hi, _ = heap[0]
        if -neg_err <= tol:
            break
        heapq.heappop(heap)
        mid = 0.5 * (lo + hi)
        for left, right in ((lo, mid), (mid, hi)):
            child_fine, child_err = estimate(left, right)
            heapq.heappush(heap, (-child_err, left, right, child_fine))

    intervals = sorted(
        (Interval(a=lo, b=hi, fine=fine_est, error=-neg) for neg, lo, hi, fine_est in heap),
        key=lambda iv: iv.a,
    )
    total = 0.0
    for iv in intervals:
        total += iv.fine
    logger.debug("subdivision used %d evaluations on %d intervals", len(cache), len(intervals))
    return SubdivisionResult(integral=total, evaluations_used=len(cache), intervals=intervals)
