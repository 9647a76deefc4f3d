import csv

import pytest

from qstepper import main as cli
from qstepper.config import OUTPUT_DIR_ENV, RESOLVED_CONFIG_NAME
from qstepper.errors import TrainingDivergence
from qstepper.quad import QuadratureRule

SHORT_SINE = ["--set", "problem.function_class=SingleSine", "--set", "problem.domain=[0, 4]"]
SHORT_PENDULUM = ["--set", "problem.system=HybridPendulum", "--set", "problem.t_span=[0, 2]"]
FAST_TRAINING = ["--set", "training.max_episodes=2", "--set", "training.scaler_episodes=1",
                 "--set", "learner.hidden_layers=1"]


def _rows(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


def test_help_exits_cleanly(capsys):
    with pytest.raises(SystemExit) as excinfo:
        cli.main(["--help"])
    assert excinfo.value.code == 0
    assert "train-quad" in capsys.readouterr().out


def test_weights_one_node(tmp_path, capsys):
    assert cli.main(["weights", "--set", "weights.mode=one-node", "-o", str(tmp_path)]) == 0
    assert "Optimal node x1 = 0.547" in capsys.readouterr().out
    assert (tmp_path / "one_node_analytic.csv").exists()
    assert (tmp_path / "one_node_analytic.png").exists()
    assert (tmp_path / RESOLVED_CONFIG_NAME).exists()


def test_weights_fit_writes_rule(tmp_path):
    assert cli.main(["weights", "--set", "weights.samples=2000", "-o", str(tmp_path)]) == 0
    rule = QuadratureRule.from_text((tmp_path / "optimal_rule.yaml").read_text())
    assert rule.nodes == (0.0, 0.5, 1.0)
    assert sum(rule.normalized_weights) == pytest.approx(1.0, abs=0.1)
    assert (tmp_path / "weights.html").exists()


def test_weights_grid_surface(tmp_path):
    argv = ["weights", "--set", "weights.mode=grid", "--set", "weights.resolution=11",
            "--set", "weights.samples=2000", "--set", "weights.degree=2", "-o", str(tmp_path)]
    assert cli.main(argv) == 0
    assert len(_rows(tmp_path / "error_surface.csv")) == 12
    assert (tmp_path / "error_surface.png").exists()


def test_weights_optimize(tmp_path):
    argv = ["weights", "--set", "weights.mode=optimize", "--set", "weights.initial_nodes=[0.3]",
            "--set", "weights.samples=5000", "--set", "weights.degree=2", "-o", str(tmp_path)]
    assert cli.main(argv) == 0
    rule = QuadratureRule.from_text((tmp_path / "optimal_rule.yaml").read_text())
    assert len(rule.nodes) == 1


def test_zero_episode_cap(tmp_path, capsys):
    argv = ["train-quad", "--set", "training.max_episodes=0", "-o", str(tmp_path)]
    assert cli.main(argv) == cli.EXIT_CAP
    assert "nothing trained" in capsys.readouterr().err
    assert not (tmp_path / "learner.json").exists()


def test_train_trace_and_bench_quadrature(tmp_path):
    train_dir = tmp_path / "train"
    assert cli.main(["train-quad", *SHORT_SINE, *FAST_TRAINING, "-o", str(train_dir)]) == cli.EXIT_CAP
    checkpoint = train_dir / "learner.json"
    assert checkpoint.exists()
    assert len(_rows(train_dir / "training_log.csv")) == 3
    assert (train_dir / "training_reward.png").exists()

    trace_dir = tmp_path / "trace"
    assert cli.main(["trace", *SHORT_SINE, "--checkpoint", str(checkpoint), "-o", str(trace_dir)]) == 0
    assert _rows(trace_dir / "trace.csv")[0][:2] == ["x", "f"]
    assert (trace_dir / "trace.png").exists()

    bench_dir = tmp_path / "bench"
    argv = ["bench-quad", *SHORT_SINE, "--set", f"bench.checkpoints=[{checkpoint}]",
            "--set", "bench.function_count=3", "--set", "bench.simpson_steps=[0.2, 0.5]",
            "--set", "bench.subdivision_budgets=[21]", "--set", "bench.optimal_weights=false",
            "-o", str(bench_dir)]
    assert cli.main(argv) == 0
    rows = _rows(bench_dir / "pareto_quadrature.csv")
    assert [r[1] for r in rows[1:]] == ["learner", "simpson", "simpson", "subdivision"]
    assert rows[1][0] == "learner(m=0)"
    assert (bench_dir / "pareto_quadrature.html").exists()


def test_train_and_bench_ode(tmp_path):
    train_dir = tmp_path / "train"
    argv = ["train-ode", *SHORT_PENDULUM, *FAST_TRAINING, "--set", "training.max_episodes=1",
            "-o", str(train_dir)]
    assert cli.main(argv) == cli.EXIT_CAP
    checkpoint = train_dir / "learner.json"

    trace_dir = tmp_path / "trace"
    assert cli.main(["trace", *SHORT_PENDULUM, "--checkpoint", str(checkpoint), "-o", str(trace_dir)]) == 0
    assert _rows(trace_dir / "trace.csv")[0][:3] == ["t", "x1", "x2"]

    bench_dir = tmp_path / "bench"
    argv = ["bench-ode", *SHORT_PENDULUM, "--set", f"bench.checkpoints=[{checkpoint}]",
            "--set", "bench.rk45_tolerances=[1e-3, 1e-4, 1e-5]", "-o", str(bench_dir)]
    assert cli.main(argv) == 0
    rows = _rows(bench_dir / "pareto_ode.csv")
    assert [r[1] for r in rows[1:]] == ["learner", "rk45", "rk45", "rk45"]


def test_bench_ode_needs_three_tolerances(tmp_path, capsys):
    argv = ["bench-ode", *SHORT_PENDULUM, "--set", "bench.rk45_tolerances=[1e-3, 1e-4]", "-o", str(tmp_path)]
    assert cli.main(argv) == 2
    assert "bench.rk45_tolerances" in capsys.readouterr().err


def test_trace_needs_checkpoint(tmp_path, capsys):
    assert cli.main(["trace", "-o", str(tmp_path)]) == 2
    assert "Error: checkpoint: trace needs a checkpoint" in capsys.readouterr().err
    assert cli.main(["trace", "--checkpoint", str(tmp_path / "absent.json"), "-o", str(tmp_path)]) == 2


def test_unknown_key_and_missing_config(tmp_path, capsys):
    assert cli.main(["weights", "--set", "weights.colour=red", "-o", str(tmp_path)]) == 2
    assert "weights.colour: unknown configuration key" in capsys.readouterr().err
    assert cli.main(["weights", "-c", str(tmp_path / "absent.yaml"), "-o", str(tmp_path)]) == 2


def test_divergence_reports_last_checkpoint(tmp_path, monkeypatch, capsys):
    def diverge(*args, **kwargs):
        raise TrainingDivergence("loss became NaN at episode 7", checkpoint="last_good.json")

    monkeypatch.setattr(cli, "train_base_learner", diverge)
    assert cli.main(["train-quad", "-o", str(tmp_path)]) == cli.EXIT_NUMERIC
    assert "Last good checkpoint: last_good.json" in capsys.readouterr().err


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path))
    assert cli.main(["weights", "--set", "weights.mode=one-node"]) == 0
    assert (tmp_path / "one_node_analytic.csv").exists()
