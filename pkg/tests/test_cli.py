"""Tests for the command line interface: exit codes, artifacts, flags."""

import os
import subprocess
import sys

import numpy as np
import pytest

from cbfforge.cli import main
from cbfforge.hj import load_field

TINY_GRID = [
    "grid_nx = 17",
    "grid_ny = 17",
    "grid_ntheta = 9",
    "vi_tol = 1e-4",
]


def _write_cfg(tmp_path, *lines):
    path = tmp_path / "run.cfg"
    path.write_text("\n".join(lines) + "\n")
    return str(path)


def test_help_lists_subcommands_and_config_keys(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for sub in ("train-margin", "solve-grid", "train-rl", "filter-eval",
                "verify-bound", "bench", "demo"):
        assert sub in out
    assert "config keys:" in out
    assert "alpha_list" in out


def test_no_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2


def test_unknown_config_key_exits_2(tmp_path, capsys):
    cfg = _write_cfg(tmp_path, "warp_factor = 9")
    assert main(["filter-eval", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "config error" in capsys.readouterr().err


def test_bound_hypothesis_violation_exits_2(tmp_path, capsys):
    cfg = _write_cfg(tmp_path, "lip_gamma = 0.96", "lip_fd_samples = 500")
    assert main(["verify-bound", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "hypothesis" in capsys.readouterr().err


def test_train_margin_rejects_exact_mode(tmp_path, capsys):
    cfg = _write_cfg(tmp_path, "margin_mode = exact")
    assert main(["train-margin", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "margin_mode" in capsys.readouterr().err


def test_train_margin_is_byte_deterministic(tmp_path):
    cfg = _write_cfg(
        tmp_path,
        "margin_mode = nogp",
        "margin_iterations = 150",
        "margin_train_points = 2000",
        "margin_batch_size = 64",
    )
    assert main(["train-margin", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert main(["train-margin", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    first = (tmp_path / "a" / "margin_nogp.txt").read_bytes()
    second = (tmp_path / "b" / "margin_nogp.txt").read_bytes()
    assert first == second


def test_solve_grid_writes_loadable_fields(tmp_path, capsys):
    cfg = _write_cfg(tmp_path, *TINY_GRID)
    out = tmp_path / "grid"
    assert main(["solve-grid", "--config", cfg, "--out", str(out)]) == 0
    assert "17x17x9" in capsys.readouterr().out
    value = load_field(str(out / "value_grid.txt"), kind="value")
    margin = load_field(str(out / "margin_grid.txt"), kind="margin")
    assert value.spec.nx == 17 and margin.spec.ntheta == 9
    # the discounted value never exceeds the raw margin
    assert np.all(value.values <= margin.values + 1e-12)


def test_demo_writes_trajectory_with_diagnostics(tmp_path, capsys):
    cfg = _write_cfg(tmp_path, *TINY_GRID, "rollout_steps = 15")
    out = tmp_path / "demo"
    assert main(["demo", "--config", cfg, "--out", str(out)]) == 0
    assert "demo rollout" in capsys.readouterr().out
    lines = (out / "demo_trajectory.csv").read_text().splitlines()
    assert lines[0] == ("t,x,y,theta,a_nom,a_exec,margin,overridden,"
                       "feasible_count,q_nominal,q_fallback")
    assert len(lines) == 1 + 15


def test_seed_flag_changes_the_demo_start(tmp_path):
    cfg = _write_cfg(tmp_path, *TINY_GRID, "rollout_steps = 5")
    main(["demo", "--config", cfg, "--out", str(tmp_path / "s0")])
    main(["demo", "--config", cfg, "--seed", "5", "--out", str(tmp_path / "s5")])
    first = (tmp_path / "s0" / "demo_trajectory.csv").read_text()
    second = (tmp_path / "s5" / "demo_trajectory.csv").read_text()
    assert first != second


def test_filter_eval_runs_and_reports(tmp_path, capsys):
    cfg = _write_cfg(tmp_path, *TINY_GRID, "n_rollouts = 3", "rollout_steps = 15")
    out = tmp_path / "eval"
    assert main(["filter-eval", "--config", cfg, "--out", str(out)]) == 0
    assert "3 rows" in capsys.readouterr().out
    lines = (out / "metrics.csv").read_text().splitlines()
    assert [line.split(",")[0] for line in lines] == ["method", "none", "lr", "cbf"]


def test_bench_subcommand(tmp_path):
    cfg = _write_cfg(
        tmp_path,
        "bench_sizes = 1, 10",
        "bench_reps = 3",
        "rl_iterations = 60",
        "rl_batch_size = 32",
        "rl_buffer_capacity = 512",
        "rl_episode_len = 4",
        "rl_actor_dims = 16, 16",
        "rl_critic_dims = 16, 16",
    )
    out = tmp_path / "bench"
    assert main(["bench", "--config", cfg, "--out", str(out)]) == 0
    lines = (out / "bench.csv").read_text().splitlines()
    assert len(lines) == 1 + 4


def test_corrupt_model_file_exits_1(tmp_path, capsys):
    bad = tmp_path / "margin_gp.txt"
    bad.write_text("this is not a model file\n")
    cfg = _write_cfg(
        tmp_path,
        *TINY_GRID,
        "margin_mode = gp",
        f"margin_model = {bad}",
        "n_rollouts = 2",
        "rollout_steps = 5",
    )
    assert main(["filter-eval", "--config", cfg, "--out", str(tmp_path / "o")]) == 1
    assert "error" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    cfg = _write_cfg(tmp_path, *TINY_GRID, "rollout_steps = 5")
    proc = subprocess.run(
        [sys.executable, "-m", "cbfforge.cli", "demo", "--config", cfg,
         "--out", str(tmp_path / "o")],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    assert os.path.exists(tmp_path / "o" / "demo_trajectory.csv")
