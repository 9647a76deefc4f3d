#!/usr/bin/env python3
"""Command-line interface for qstepper."""

import argparse
import logging
import sys
import traceback
from pathlib import Path

import numpy as np

from .bench import bench_ode, bench_quadrature, load_learner, write_pareto_csv
from .config import dump_config, load_config
from .errors import ConfigError, QStepperError, TrainingDivergence
from .meta import LearnerPool, MetaLearner, integrate_with_meta, train_meta
from .optweights import (
    ErrorSurface,
    compare_simpson,
    describe,
    node_grid_search,
    node_optimize,
    one_node_analytic,
    one_node_optimum,
)
from .problems import FunctionClass, OdeSystem, sample_function
from .rl import BaseLearner, integrate_with_learner, train_base_learner
from .visualizer import ResultVisualizer

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CAP = 3
EXIT_NUMERIC = 4

COMMAND_KINDS = {
    "train-quad": "quadrature",
    "train-ode": "ode",
    "train-meta": "ode",
    "bench-quad": "quadrature",
    "bench-ode": "ode",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qstepper",
        description="Q-learned step-size control for quadrature and ODE integration",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Train a quadrature learner on superposed sines
  qstepper train-quad -c configs/sines.yaml -o runs/sines

  # Benchmark it against composite Simpson and subdivision
  qstepper bench-quad -c configs/sines.yaml --set bench.checkpoints=[runs/sines/learner.json]

  # Regression-optimal weights for degree-4 polynomials
  qstepper weights --set weights.degree=4 --set weights.samples=100000
        """,
    )
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress logging, -vv for debug")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    helps = {
        "train-quad": "train a quadrature step-size learner",
        "train-ode": "train an ODE step-size learner",
        "train-meta": "train a meta-learner over frozen base learners",
        "bench-quad": "quadrature Pareto benchmark",
        "bench-ode": "ODE Pareto benchmark against RK45",
        "weights": "regression-optimal quadrature weights and node search",
        "trace": "per-step trace of one run of a trained learner",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("-c", "--config", type=str, help="YAML run configuration")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a configuration field, e.g. --set training.gamma=0.5 (repeatable)")
        p.add_argument("-o", "--output-dir", type=str, help="output directory (default: $QSTEPPER_OUTPUT_DIR or ./qstepper_output)")
        p.add_argument("--seed", type=int, help="random seed")
        p.add_argument("--checkpoint", type=str, help="checkpoint to write (train) or read (trace)")
        p.add_argument("-t", "--theme", type=str, choices=["light", "dark"], help="figure and report theme")
    return parser


def _overrides(args) -> list:
    overrides = list(args.overrides)
    if args.output_dir:
        overrides.append(f"output_dir={args.output_dir}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.checkpoint:
        overrides.append(f"checkpoint={args.checkpoint}")
    if args.theme:
        overrides.append(f"theme={args.theme}")
    if args.command in COMMAND_KINDS:
        overrides.append(f"problem.kind={COMMAND_KINDS[args.command]}")
    return overrides


def _configure_logging(verbosity: int):
    level = logging.WARNING if verbosity == 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _checkpoint_path(cfg, default_name: str) -> Path:
    return Path(cfg.checkpoint) if cfg.checkpoint else Path(cfg.output_dir) / default_name


def _finish_training(cfg, result, checkpoint: Path, out: Path, label: str) -> int:
    result.learner.save(checkpoint)
    log_path = result.log.write_csv(out / "training_log.csv")
    ResultVisualizer(cfg.theme).save_training_plot(result.log, out / "training_reward.png", cfg.training.window)
    episodes = len(result.log.episodes)
    print(f"{label} trained for {episodes} episodes")
    print(f"Checkpoint: {checkpoint}")
    print(f"Training log: {log_path}")
    if not result.converged:
        print("Training stopped at the episode cap before convergence", file=sys.stderr)
        return EXIT_CAP
    return EXIT_OK


def cmd_train(cfg, command: str) -> int:
    out = Path(cfg.output_dir)
    if cfg.training.max_episodes == 0:
        print("Episode cap is zero; nothing trained, no checkpoint written", file=sys.stderr)
        return EXIT_CAP
    rng = np.random.default_rng(cfg.seed)
    training = cfg.training_config(checkpoint_path=str(out / "last_good.json"))
    reward_cfg = cfg.reward_config()

    if command == "train-meta":
        system = cfg.ode_system()
        if not cfg.meta.base_checkpoints and not cfg.meta.constant_steps:
            raise ConfigError("the pool needs base checkpoints or constant step sizes", field="meta")
        trained = [(BaseLearner.load(p), p) for p in cfg.meta.base_checkpoints]
        pool = LearnerPool.with_constants(trained, cfg.meta.constant_steps)
        print(f"Training meta-learner over {len(pool)} learners: {', '.join(pool.labels())}")
        result = train_meta(
            pool, system, reward_cfg, training, rng,
            hidden_layers=cfg.learner.hidden_layers, hidden_width=cfg.learner.hidden_width,
            **cfg.env_options(),
        )
        return _finish_training(cfg, result, _checkpoint_path(cfg, "meta.json"), out, "Meta-learner")

    problem = cfg.problem_instance()
    actions = cfg.action_set()
    name = cfg.problem.system if isinstance(problem, OdeSystem) else cfg.problem.function_class
    print(f"Training base learner on {name} with {len(actions)} step sizes, tol {reward_cfg.tol:g}")
    result = train_base_learner(
        problem, actions, reward_cfg, training, rng,
        memory=cfg.learner.memory,
        hidden_layers=cfg.learner.hidden_layers,
        hidden_width=cfg.learner.hidden_width,
        **cfg.env_options(),
    )
    return _finish_training(cfg, result, _checkpoint_path(cfg, "learner.json"), out, "Base learner")


def _learner_rows(paths):
    rows = []
    for path in paths:
        learner = load_learner(path)
        rows.append((f"{Path(path).stem}(m={learner.encoder.memory})", learner))
    return rows


def _report(cfg, title: str, points, out: Path, stem: str) -> None:
    csv_path = write_pareto_csv(points, out / f"{stem}.csv")
    viz = ResultVisualizer(cfg.theme)
    figure = viz.save_pareto_plot(points, out / f"{stem}.png", title=title)
    report = viz.save_html_report(title, {"Pareto points": [p.as_row() for p in points]}, [(title, figure)], out / f"{stem}.html")
    for p in points:
        print(f"  {p.method:<28} error/step {p.avg_error_per_step:.3e}  evaluations {p.avg_evaluations:.1f}")
    print(f"Results: {csv_path}")
    print(f"Report: {report}")


def cmd_bench_quadrature(cfg) -> int:
    b = cfg.bench
    spec = cfg.function_spec()
    learners = _learner_rows(b.checkpoints)
    print(f"Benchmarking {len(learners)} learner(s) on {b.function_count} {spec.class_id.value} functions...")
    points = bench_quadrature(
        spec,
        b.function_count,
        b.simpson_steps,
        b.subdivision_budgets,
        learners=learners,
        reward_cfg=cfg.reward_config(),
        optimal_weights=b.optimal_weights,
        weight_samples=b.optimal_weights_samples,
        seed=cfg.seed,
        workers=b.workers,
    )
    _report(cfg, f"Quadrature benchmark: {spec.class_id.value}", points, Path(cfg.output_dir), "pareto_quadrature")
    return EXIT_OK


def cmd_bench_ode(cfg) -> int:
    b = cfg.bench
    system = cfg.ode_system()
    learners = _learner_rows(b.checkpoints)
    print(f"Benchmarking {len(learners)} learner(s) on {system.system_id.value} against RK45...")
    points = bench_ode(
        system,
        tuple(cfg.problem.t_span),
        b.rk45_tolerances,
        learners=learners,
        reward_cfg=cfg.reward_config(),
        random_ics=b.random_ics,
        seed=cfg.seed,
        oracle_tol=cfg.problem.oracle_tol,
        workers=b.workers,
    )
    _report(cfg, f"ODE benchmark: {system.system_id.value}", points, Path(cfg.output_dir), "pareto_ode")
    return EXIT_OK


def cmd_weights(cfg) -> int:
    w = cfg.weights
    out = Path(cfg.output_dir)
    viz = ResultVisualizer(cfg.theme)
    interval = tuple(w.interval)

    if w.mode == "one-node":
        xs = np.linspace(0.0, 1.0, 501)
        omega, eps_sq = one_node_analytic(xs)
        x1, omega1, eps_sq1 = one_node_optimum()
        surface = ErrorSurface(axis=xs, eps=np.sqrt(eps_sq), flagged=np.zeros(xs.size, dtype=bool), sample_count=0,
                               best_nodes=(x1,), best_eps=float(np.sqrt(eps_sq1)), best_weights=(omega1,))
        csv_path = surface.write_csv(out / "one_node_analytic.csv")
        figure = viz.save_error_surface(surface, out / "one_node_analytic.png", title="One node, quadratics on [0, 1]")
        print(f"Optimal node x1 = {x1:.4f}, weight {omega1:.4f}, eps^2 = {eps_sq1:.5f}")
        print(f"Curve: {csv_path}")
        print(f"Figure: {figure}")
        return EXIT_OK

    spec = cfg.weights_spec()
    if w.mode == "fit":
        rng = np.random.default_rng(cfg.seed)
        rule, simpson_errors = compare_simpson(spec, w.samples, rng, interval, holdout=w.holdout or None)
        rows = describe([(f"{spec.class_id.value}", rule, simpson_errors)])
        rule_path = out / "optimal_rule.yaml"
        rule_path.parent.mkdir(parents=True, exist_ok=True)
        rule_path.write_text(rule.to_quadrature_rule().to_text(), encoding="utf-8")
        report = viz.save_html_report("Regression-optimal weights", {"Weights versus Simpson": rows}, [], out / "weights.html")
        print(f"Weights {rows[0]['weights']}: eps {rule.eps:.4g} (Simpson {simpson_errors[0]:.4g}), "
              f"eps_abs {rule.eps_abs:.4g} (Simpson {simpson_errors[1]:.4g})")
        if rule.holdout_eps is not None:
            print(f"Held-out eps {rule.holdout_eps:.4g}, eps_abs {rule.holdout_eps_abs:.4g}")
        print(f"Rule: {rule_path}")
        print(f"Report: {report}")
        return EXIT_OK

    if w.mode == "grid":
        surface = node_grid_search(
            spec, w.grid_nodes, w.resolution, w.samples,
            interval, cfg.seed, w.common_random_numbers, cfg.bench.workers,
        )
        analytic = None
        if w.grid_nodes == 1 and spec.class_id == FunctionClass.POLY_DEG_N and spec.degree == 2 and interval == (0.0, 1.0):
            analytic = (surface.axis, np.sqrt(one_node_analytic(surface.axis)[1]))
        csv_path = surface.write_csv(out / "error_surface.csv")
        figure = viz.save_error_surface(surface, out / "error_surface.png", analytic=analytic)
        nodes = ", ".join(f"{x:.4f}" for x in surface.best_nodes)
        print(f"Best nodes ({nodes}) with eps {surface.best_eps:.4g}")
        print(f"Surface: {csv_path}")
        print(f"Figure: {figure}")
        return EXIT_OK

    rule = node_optimize(spec, len(w.initial_nodes), w.initial_nodes, w.samples, interval, cfg.seed, w.max_iter)
    rule_path = out / "optimal_rule.yaml"
    rule_path.parent.mkdir(parents=True, exist_ok=True)
    rule_path.write_text(rule.to_quadrature_rule().to_text(), encoding="utf-8")
    nodes = ", ".join(f"{x:.4f}" for x in rule.nodes)
    weights = ", ".join(f"{x:.4f}" for x in rule.weights)
    print(f"Nodes ({nodes}), weights ({weights}), eps {rule.eps:.4g}")
    if not rule.converged:
        print("Warning: node search hit the iteration cap; best nodes so far reported", file=sys.stderr)
    print(f"Rule: {rule_path}")
    return EXIT_OK


def cmd_trace(cfg) -> int:
    if not cfg.checkpoint:
        raise ConfigError("trace needs a checkpoint", field="checkpoint")
    out = Path(cfg.output_dir)
    learner = load_learner(cfg.checkpoint)
    # the tolerance stored with the checkpoint unless one is given explicitly
    reward_cfg = cfg.reward_config()
    if cfg.learner.reward.tol is None and learner.reward_cfg is not None:
        reward_cfg = learner.reward_cfg
    rng = np.random.default_rng(cfg.seed)
    if isinstance(learner, MetaLearner):
        rollout = integrate_with_meta(learner, cfg.ode_system(), tuple(cfg.problem.t_span), reward_cfg, rng=rng,
                                      oracle_tol=cfg.problem.oracle_tol)
        result = rollout.result
        dispatch = rollout.write_dispatch_csv(out / "dispatch.csv")
        print(f"Dispatch log: {dispatch}")
    elif learner.encoder.kind == "ode":
        result = integrate_with_learner(learner, cfg.ode_system(), tuple(cfg.problem.t_span), reward_cfg, rng=rng,
                                        oracle_tol=cfg.problem.oracle_tol)
    else:
        f = sample_function(cfg.function_spec(), rng)
        result = integrate_with_learner(learner, f, reward_cfg=reward_cfg, rng=rng, oracle=cfg.problem.oracle)
    trace = result.write_csv(out / "trace.csv")
    figure = ResultVisualizer(cfg.theme).save_trace_plot(result, out / "trace.png", tol=reward_cfg.tol)
    print(f"{result.steps} steps, {result.evaluations} evaluations, average error {result.avg_error:.3e}, "
          f"{result.tol_violations} tolerance violations")
    if result.switch_times:
        print("Mode switches at " + ", ".join(f"{t:.3f}" for t in result.switch_times))
    print(f"Trace: {trace}")
    print(f"Figure: {figure}")
    return EXIT_OK


def main(argv=None) -> int:
    """Main entry point for the qstepper CLI."""
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args.verbose)

    try:
        cfg = load_config(args.config, _overrides(args))
        resolved = dump_config(cfg, cfg.output_dir)
        logger.info("resolved configuration written to %s", resolved)
        if args.command.startswith("train-"):
            return cmd_train(cfg, args.command)
        if args.command == "bench-quad":
            return cmd_bench_quadrature(cfg)
        if args.command == "bench-ode":
            return cmd_bench_ode(cfg)
        if args.command == "weights":
            return cmd_weights(cfg)
        return cmd_trace(cfg)
    except TrainingDivergence as e:
        print(f"Error: {e}", file=sys.stderr)
        if e.checkpoint:
            print(f"Last good checkpoint: {e.checkpoint}", file=sys.stderr)
        return EXIT_NUMERIC
    except QStepperError as e:
        print(f"Error: {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        print(f"Error: {e}", file=sys.stderr)
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
