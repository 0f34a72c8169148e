"""Command-line entry point for training, solving, filtering, and benchmarks.

Every subcommand reads the same flat key=value config (all keys documented
in --help), overridable by --seed and --out.  Exit codes: 0 success, 1
runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .config import ConfigError, describe_keys, load_config
from .dubins import nominal_policy, rollout, sample_initial_states, save_trajectory_csv
from .experiments import (
    _build_backend,
    _filter_config,
    _nominal_cfg,
    _resolve_actor_critic,
    _resolve_grid,
    _resolve_margin,
    _margin_for_field,
    _train_margin_net,
    run_experiment,
)
from .filters import cbf_filter

_EXPERIMENT_COMMANDS = {
    "filter-eval": ("filter_comparison", ("filter_comparison", "alpha_ablation")),
    "verify-bound": ("lipschitz_bound", ("lipschitz_bound",)),
    "bench": ("throughput", ("throughput",)),
}


def _cmd_train_margin(cfg: dict) -> int:
    if cfg["experiment"] == "margin_quality":
        table = run_experiment(cfg)
        print(f"margin_quality: {len(table.rows)} rows -> {cfg['output_dir']}/metrics.csv")
        return 0
    mode = cfg["margin_mode"]
    if mode == "exact":
        raise ConfigError("train-margin needs margin_mode = gp or nogp (exact has nothing to train)")
    os.makedirs(cfg["output_dir"], exist_ok=True)
    _train_margin_net(cfg, use_gp=(mode == "gp"), out_dir=cfg["output_dir"])
    path = os.path.join(cfg["output_dir"], f"margin_{mode}.txt")
    print(f"trained margin ({mode}) -> {path}")
    return 0


def _cmd_solve_grid(cfg: dict) -> int:
    out_dir = cfg["output_dir"]
    os.makedirs(out_dir, exist_ok=True)
    cfg = dict(cfg)
    cfg["value_grid"] = cfg["margin_grid"] = ""  # always solve fresh
    margin_fn, net = _resolve_margin(cfg, out_dir)
    _resolve_grid(cfg, out_dir, _margin_for_field(cfg, margin_fn, net))
    print(f"solved {cfg['grid_nx']}x{cfg['grid_ny']}x{cfg['grid_ntheta']} grid -> {out_dir}/value_grid.txt")
    return 0


def _cmd_train_rl(cfg: dict) -> int:
    if cfg["experiment"] == "mix_ablation":
        run_experiment(cfg)
        print(f"mix_ablation report -> {cfg['output_dir']}/mix_report.csv")
        return 0
    out_dir = cfg["output_dir"]
    os.makedirs(out_dir, exist_ok=True)
    cfg = dict(cfg)
    cfg["critic_model"] = cfg["actor_model"] = ""  # always train
    margin_fn, _ = _resolve_margin(cfg, out_dir)
    _resolve_actor_critic(cfg, out_dir, margin_fn)
    print(f"trained safety actor-critic -> {out_dir}/rl/")
    return 0


def _cmd_demo(cfg: dict) -> int:
    out_dir = cfg["output_dir"]
    os.makedirs(out_dir, exist_ok=True)
    backend = _build_backend(cfg, out_dir)
    fcfg = _filter_config(cfg)
    nom = _nominal_cfg(cfg)
    rng = np.random.default_rng([cfg["seed"], 1000])
    start = sample_initial_states(np.random.default_rng([cfg["seed"], 777]), 1)[0]
    rec = rollout(
        lambda s: nominal_policy(s, nom, rng=rng),
        start,
        cfg["rollout_steps"],
        action_filter=lambda s, a: cbf_filter(s, a, backend, fcfg),
        dt=cfg["dt"],
    )
    path = os.path.join(out_dir, "demo_trajectory.csv")
    save_trajectory_csv(rec, path)
    n_over = int(np.count_nonzero(rec.override_magnitudes > 1e-9))
    print(
        f"demo rollout: {rec.n_steps} steps, collided={rec.collided}, "
        f"{n_over} overridden steps -> {path}"
    )
    return 0


def _make_experiment_cmd(command: str):
    default, allowed = _EXPERIMENT_COMMANDS[command]

    def _run(cfg: dict) -> int:
        if cfg["experiment"] not in allowed:
            cfg = dict(cfg)
            cfg["experiment"] = default
        table = run_experiment(cfg)
        print(f"{cfg['experiment']}: {len(table.rows)} rows -> {cfg['output_dir']}/metrics.csv")
        return 0

    return _run


_COMMANDS = {
    "train-margin": _cmd_train_margin,
    "solve-grid": _cmd_solve_grid,
    "train-rl": _cmd_train_rl,
    "filter-eval": _make_experiment_cmd("filter-eval"),
    "verify-bound": _make_experiment_cmd("verify-bound"),
    "bench": _make_experiment_cmd("bench"),
    "demo": _cmd_demo,
}

_DESCRIPTIONS = {
    "train-margin": "train a margin net (or run the margin_quality experiment)",
    "solve-grid": "solve the avoid value function on the grid and save both fields",
    "train-rl": "train the safety actor-critic (or run the mix_ablation experiment)",
    "filter-eval": "compare runtime filters over evaluation rollouts",
    "verify-bound": "check the margin-to-value Lipschitz bound",
    "bench": "benchmark candidate-scoring throughput",
    "demo": "dump one filtered rollout as CSV",
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cbfforge",
        description="Safety filtering testbed: margins, value grids, actor-critic, filters.",
        epilog="config keys:\n" + describe_keys(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in _DESCRIPTIONS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="path to a key = value config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the config output_dir")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["output_dir"] = args.out
    try:
        cfg = load_config(args.config, overrides)
        return _COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports and exits
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
