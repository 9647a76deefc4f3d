"""Regression-optimal quadrature weights, the one-node closed form and node-placement search."""

import concurrent.futures
import csv
import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg
from scipy.optimize import minimize, minimize_scalar

from .errors import ContractViolation, NotPositiveDefiniteError, SingularDesignError
from .problems import FunctionClassSpec, reference_integral, sample_batch
from .quad import QuadratureRule

logger = logging.getLogger(__name__)

ONE_NODE_GRID = 500
TWO_NODE_GRID = 50


@dataclass
class BasisEvaluations:
    """Node values of sampled functions (one row per function) and their exact integrals."""

    matrix: np.ndarray
    targets: np.ndarray
    nodes: Tuple[float, ...]
    interval: Tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        self.matrix = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        self.targets = np.asarray(self.targets, dtype=float).reshape(-1)
        self.nodes = tuple(float(x) for x in self.nodes)
        rows, cols = self.matrix.shape
        if cols != len(self.nodes):
            raise ContractViolation(f"{cols} basis columns for {len(self.nodes)} nodes")
        if rows != self.targets.size:
            raise ContractViolation(f"{rows} rows but {self.targets.size} targets")

    @property
    def sample_count(self) -> int:
        return self.matrix.shape[0]

    def split(self, holdout: float) -> Tuple["BasisEvaluations", "BasisEvaluations"]:
        """Fit part and held-out part; rows are i.i.d. so the last rows are held out."""
        if not 0.0 < holdout < 1.0:
            raise ContractViolation(f"holdout fraction must lie in (0, 1), got {holdout}")
        cut = self.sample_count - int(round(holdout * self.sample_count))
        if cut <= 0 or cut >= self.sample_count:
            raise ContractViolation(f"holdout {holdout} leaves an empty part of {self.sample_count} samples")
        return (
            BasisEvaluations(self.matrix[:cut], self.targets[:cut], self.nodes, self.interval),
            BasisEvaluations(self.matrix[cut:], self.targets[cut:], self.nodes, self.interval),
        )


def sample_basis(
    spec: FunctionClassSpec,
    nodes: Sequence[float],
    count: int,
    rng: Optional[np.random.Generator] = None,
    interval: Optional[Tuple[float, float]] = None,
    oracle: str = "closed_form",
) -> BasisEvaluations:
    """Sample ``count`` functions and collect f(x_i) and the integral over the interval."""
    if count <= 0:
        raise ContractViolation(f"need a positive sample count, got {count}")
    a, b = interval if interval is not None else spec.domain
    nodes = np.asarray(nodes, dtype=float)
    if np.any(nodes < a) or np.any(nodes > b):
        raise ContractViolation(f"nodes {nodes.tolist()} leave the interval [{a}, {b}]")
    batch = sample_batch(spec, count, rng)
    matrix = batch.values(nodes)
    if oracle == "closed_form":
        targets = batch.integrals(a, b)
    elif oracle == "fine_simpson":
        targets = np.array([reference_integral(f, a, b) for f in batch])
    else:
        raise ContractViolation(f"unknown oracle {oracle!r}")
    return BasisEvaluations(matrix, targets, tuple(nodes), (float(a), float(b)))


def rule_errors(weights, data: BasisEvaluations) -> Tuple[float, float]:
    """Root-mean-square and mean absolute error of sum(w_i f(x_i)) against the integrals."""
    residual = data.matrix @ np.asarray(weights, dtype=float) - data.targets
    return float(np.sqrt(np.mean(residual ** 2))), float(np.mean(np.abs(residual)))


@dataclass
class OptimalRule:
    """Weights fitted for fixed nodes, with their Monte-Carlo error estimates."""

    nodes: Tuple[float, ...]
    weights: Tuple[float, ...]
    eps: float
    eps_abs: float
    sample_count: int
    interval: Tuple[float, float] = (0.0, 1.0)
    holdout_eps: Optional[float] = None
    holdout_eps_abs: Optional[float] = None
    converged: bool = True

    def to_quadrature_rule(self, label: str = "optimal") -> QuadratureRule:
        """Relative nodes on [0, 1] and weights per unit length, in increasing node order."""
        a, b = self.interval
        order = np.argsort(self.nodes)
        nodes = [(self.nodes[i] - a) / (b - a) for i in order]
        weights = [self.weights[i] / (b - a) for i in order]
        return QuadratureRule(nodes=tuple(nodes), weights=tuple(weights), divisor=1.0, label=label)

    def to_dict(self) -> dict:
        return {
            "nodes": list(self.nodes),
            "weights": list(self.weights),
            "eps": self.eps,
            "eps_abs": self.eps_abs,
            "sample_count": self.sample_count,
            "interval": list(self.interval),
            "holdout_eps": self.holdout_eps,
            "holdout_eps_abs": self.holdout_eps_abs,
            "converged": self.converged,
        }


def fit_weights(data: BasisEvaluations, holdout: Optional[BasisEvaluations] = None) -> OptimalRule:
    """Least-squares weights through an economic QR factorization of the design matrix.

    Errors are measured in-sample; a held-out set adds a second pair of estimates.
    """
    F, y = data.matrix, data.targets
    rows, cols = F.shape
    if rows < cols:
        raise ContractViolation(f"{rows} samples cannot determine {cols} weights")
    q, r = linalg.qr(F, mode="economic")
    diag = np.abs(np.diag(r))
    cutoff = np.finfo(float).eps * max(rows, cols) * (diag.max() if diag.size else 0.0)
    weak = np.flatnonzero(diag <= cutoff)
    if diag.max() == 0.0 or weak.size:
        offending = [data.nodes[i] for i in weak] if weak.size else list(data.nodes)
        raise SingularDesignError(f"design matrix has rank below {cols}", nodes=offending)
    weights = linalg.solve_triangular(r, q.T @ y)
    eps, eps_abs = rule_errors(weights, data)
    rule = OptimalRule(
        nodes=data.nodes,
        weights=tuple(float(w) for w in weights),
        eps=eps,
        eps_abs=eps_abs,
        sample_count=rows,
        interval=data.interval,
    )
    if holdout is not None:
        if holdout.nodes != data.nodes:
            raise ContractViolation("held-out samples were taken at different nodes")
        rule.holdout_eps, rule.holdout_eps_abs = rule_errors(weights, holdout)
    return rule


def fit_panel_weights(
    spec: FunctionClassSpec,
    width: float,
    samples: int,
    rng: Optional[np.random.Generator] = None,
    relative_nodes: Sequence[float] = (0.0, 0.5, 1.0),
) -> OptimalRule:
    """Weights for panels of a fixed width placed uniformly at random inside the class domain.

    The returned rule lives on [0, width]; ``to_quadrature_rule`` rescales it to any panel.
    """
    a, b = spec.domain
    if not 0 < width <= b - a:
        raise ContractViolation(f"panel width {width} does not fit into [{a}, {b}]")
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    batch = sample_batch(spec, samples, rng)
    starts = rng.uniform(a, b - width, samples)
    offsets = np.asarray(relative_nodes, dtype=float) * width
    matrix = np.empty((samples, offsets.size))
    targets = np.empty(samples)
    for i, f in enumerate(batch):
        matrix[i] = f(starts[i] + offsets)
        targets[i] = f.integral(starts[i], starts[i] + width)
    return fit_weights(BasisEvaluations(matrix, targets, tuple(offsets), (0.0, width)))


def gram_from_samples(data: BasisEvaluations) -> Tuple[np.ndarray, np.ndarray]:
    """Monte-Carlo estimates of A = E[F_i F_j] and b = E[F_i I]."""
    n = data.sample_count
    return data.matrix.T @ data.matrix / n, data.matrix.T @ data.targets / n


def gram_solve(A, b) -> np.ndarray:
    """Solve A w = b for a symmetric positive definite Gram matrix by Cholesky factorization."""
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or b.shape != (A.shape[0],):
        raise ContractViolation(f"gram_solve needs a square matrix and a matching vector, got {A.shape} and {b.shape}")
    if not np.allclose(A, A.T, rtol=1e-10, atol=1e-14):
        raise NotPositiveDefiniteError("Gram matrix is not symmetric")
    try:
        factor = linalg.cho_factor(A)
    except linalg.LinAlgError as e:
        raise NotPositiveDefiniteError(f"Gram matrix is not positive definite: {e}") from e
    return linalg.cho_solve(factor, b)


def one_node_analytic(x1):
    """Optimal weight and squared error of a one-node rule for quadratics on [0, 1].

    Coefficients are i.i.d. with zero mean and unit variance, so
    E[F^2] = x^4 + x^2 + 1 and E[F I] = x^2/3 + x/2 + 1.
    """
    x = np.asarray(x1, dtype=float)
    if np.any(x < 0.0) or np.any(x > 1.0):
        raise ContractViolation(f"node must lie in [0, 1], got {x1}")
    cross = x ** 2 / 3.0 + x / 2.0 + 1.0
    second = x ** 4 + x ** 2 + 1.0
    omega = cross / second
    eps_sq = 49.0 / 36.0 - cross ** 2 / second
    if omega.ndim == 0:
        return float(omega), float(eps_sq)
    return omega, eps_sq


def one_node_optimum() -> Tuple[float, float, float]:
    """Node, weight and squared error at the minimum of the one-node closed form."""
    res = minimize_scalar(lambda x: one_node_analytic(x)[1], bounds=(0.0, 1.0), method="bounded", options={"xatol": 1e-10})
    omega, eps_sq = one_node_analytic(float(res.x))
    return float(res.x), omega, eps_sq


@dataclass
class ErrorSurface:
    """Fitted eps over a grid of node positions; degenerate cells are NaN and flagged."""

    axis: np.ndarray
    eps: np.ndarray
    flagged: np.ndarray
    sample_count: int
    best_nodes: Tuple[float, ...] = ()
    best_eps: float = float("nan")
    best_weights: Tuple[float, ...] = field(default_factory=tuple)

    @property
    def n_nodes(self) -> int:
        return self.eps.ndim

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            if self.n_nodes == 1:
                writer.writerow(["x1", "eps", "degenerate"])
                for x, e, bad in zip(self.axis, self.eps, self.flagged):
                    writer.writerow([repr(float(x)), repr(float(e)), int(bad)])
            else:
                writer.writerow(["x1", "x2", "eps", "degenerate"])
                for i, j in itertools.product(range(self.axis.size), repeat=2):
                    writer.writerow([repr(float(self.axis[i])), repr(float(self.axis[j])),
                                     repr(float(self.eps[i, j])), int(self.flagged[i, j])])
        return path


def _cell(spec, nodes, samples, interval, seed) -> Tuple[float, Tuple[float, ...], bool]:
    if len(set(nodes)) < len(nodes):
        return float("nan"), (), True
    data = sample_basis(spec, nodes, samples, np.random.default_rng(seed), interval)
    try:
        rule = fit_weights(data)
    except SingularDesignError:
        return float("nan"), (), True
    return rule.eps, rule.weights, False


def node_grid_search(
    spec: FunctionClassSpec,
    n_nodes: int,
    resolution: Optional[int] = None,
    samples: int = 10_000,
    interval: Optional[Tuple[float, float]] = None,
    seed: int = 0,
    common_random_numbers: bool = False,
    workers: int = 1,
) -> ErrorSurface:
    """Fit weights for every node tuple of a grid and return the error surface and its minimum.

    Each cell draws its own samples from a spawned seed unless common random
    numbers are requested, in which case every cell sees the same functions.
    """
    if n_nodes not in (1, 2):
        raise ContractViolation(f"grid search supports one or two nodes, got {n_nodes}")
    resolution = resolution or (ONE_NODE_GRID if n_nodes == 1 else TWO_NODE_GRID)
    if resolution < 2:
        raise ContractViolation(f"grid resolution must be at least 2, got {resolution}")
    a, b = interval if interval is not None else spec.domain
    axis = np.linspace(a, b, resolution)
    cells = list(itertools.product(range(resolution), repeat=n_nodes))
    if common_random_numbers:
        seeds = [np.random.SeedSequence(seed)] * len(cells)
    else:
        seeds = np.random.SeedSequence(seed).spawn(len(cells))
    tasks = [(spec, tuple(float(axis[k]) for k in cell), samples, (a, b), s) for cell, s in zip(cells, seeds)]

    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda t: _cell(*t), tasks))
    else:
        results = [_cell(*t) for t in tasks]

    shape = (resolution,) * n_nodes
    eps = np.full(shape, np.nan)
    flagged = np.zeros(shape, dtype=bool)
    weights = {}
    for cell, (e, w, bad) in zip(cells, results):
        eps[cell] = e
        flagged[cell] = bad
        weights[cell] = w
    if flagged.any():
        logger.warning("%d degenerate node tuples skipped in the grid search", int(flagged.sum()))
    best = np.unravel_index(np.nanargmin(eps), shape)
    return ErrorSurface(
        axis=axis,
        eps=eps,
        flagged=flagged,
        sample_count=samples,
        best_nodes=tuple(float(axis[k]) for k in best),
        best_eps=float(eps[best]),
        best_weights=weights[tuple(int(k) for k in best)],
    )


_OUTSIDE_PENALTY = 1e6


def node_optimize(
    spec: FunctionClassSpec,
    n_nodes: int,
    initial_nodes: Sequence[float],
    samples: int = 10_000,
    interval: Optional[Tuple[float, float]] = None,
    seed: int = 0,
    max_iter: int = 400,
    xatol: float = 1e-4,
    fatol: float = 1e-10,
) -> OptimalRule:
    """Nelder-Mead search over node positions; every evaluation refits the weights.

    The objective redraws the same functions at every evaluation (common
    random numbers), so it is deterministic for a fixed seed.
    """
    x0 = np.asarray(initial_nodes, dtype=float)
    if x0.shape != (n_nodes,):
        raise ContractViolation(f"need {n_nodes} initial nodes, got {x0.tolist()}")
    a, b = interval if interval is not None else spec.domain
    if np.any(x0 <= a) or np.any(x0 >= b):
        raise ContractViolation(f"initial nodes {x0.tolist()} must lie strictly inside ({a}, {b})")
    batch = sample_batch(spec, samples, np.random.default_rng(seed))
    targets = batch.integrals(a, b)

    def data_at(nodes) -> BasisEvaluations:
        return BasisEvaluations(batch.values(nodes), targets, tuple(nodes), (a, b))

    def objective(nodes):
        outside = np.sum(np.maximum(a - nodes, 0.0) + np.maximum(nodes - b, 0.0))
        if outside > 0:
            return _OUTSIDE_PENALTY * (1.0 + outside)
        try:
            return fit_weights(data_at(nodes)).eps
        except SingularDesignError:
            return _OUTSIDE_PENALTY

    res = minimize(objective, x0, method="Nelder-Mead",
                   options={"maxiter": max_iter, "xatol": xatol, "fatol": fatol})
    best = np.clip(res.x, a, b)
    rule = fit_weights(data_at(best))
    rule.converged = bool(res.success)
    if not res.success:
        logger.warning("node search stopped before convergence (%s); returning the best nodes so far", res.message)
    return rule


def compare_with_rule(rule: QuadratureRule, data: BasisEvaluations) -> Tuple[float, float]:
    """Errors of a classical rule on samples taken at its own nodes."""
    a, b = data.interval
    points = rule.points(a, b)
    if points.shape != (len(data.nodes),) or not np.allclose(points, data.nodes):
        raise ContractViolation(f"samples at {data.nodes} do not match the rule nodes {points.tolist()}")
    return rule_errors((b - a) * rule.normalized_weights, data)


def compare_simpson(
    spec: FunctionClassSpec,
    samples: int,
    rng: Optional[np.random.Generator] = None,
    interval: Optional[Tuple[float, float]] = None,
    holdout: Optional[float] = None,
) -> Tuple[OptimalRule, Tuple[float, float]]:
    """Fitted weights at the Simpson nodes next to Simpson's own errors on the same samples."""
    a, b = interval if interval is not None else spec.domain
    data = sample_basis(spec, (a, 0.5 * (a + b), b), samples, rng, (a, b))
    if holdout:
        fit_part, test_part = data.split(holdout)
        rule = fit_weights(fit_part, test_part)
    else:
        rule = fit_weights(data)
    simpson_errors = compare_with_rule(QuadratureRule.simpson(), data)
    return rule, simpson_errors


def describe(rules: List[Tuple[str, OptimalRule, Tuple[float, float]]]) -> List[dict]:
    """Rows of the weights comparison table."""
    rows = []
    for label, rule, (simpson_eps, simpson_abs) in rules:
        rows.append({
            "class": label,
            "weights": "(" + ", ".join(f"{w:.3f}" for w in rule.weights) + ")",
            "eps_model": rule.eps,
            "eps_simpson": simpson_eps,
            "eps_abs_model": rule.eps_abs,
            "eps_abs_simpson": simpson_abs,
            "holdout_eps": rule.holdout_eps,
            "samples": rule.sample_count,
        })
    return rows
