"""Experiment runner: train / eval / verify / flops / baseline / curves.

Every run lands in a timestamped directory under the output root (override
with the DSPPO_RUN_ROOT environment variable) together with the resolved
config snapshot, so any artifact can be reproduced from its directory alone.
Exit codes: 0 success, 2 configuration error, 3 training divergence.
"""

import argparse
import datetime
import json
import os
import sys

import numpy as np
import yaml

from . import convergence, flops, orchestrator, plots
from .config import ConfigError, ExperimentConfig, dump_config, load_config

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def _timestamp() -> str:
    return datetime.datetime.now().strftime("%Y%m%d_%H%M%S_%f")


def make_run_dir(cfg: ExperimentConfig, tag: str) -> str:
    run_dir = os.path.join(cfg.out_root, f"{_timestamp()}_{tag}")
    os.makedirs(run_dir, exist_ok=True)
    dump_config(cfg.resolved, os.path.join(run_dir, "resolved_config.yaml"))
    return run_dir


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY.PATH=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--seed", type=int, help="experiment seed")
    p.add_argument("--L", type=int, help="cluster size")
    p.add_argument("--K", type=int, help="number of users")
    p.add_argument("--Td", type=int, help="observation delay in steps")
    p.add_argument("--episodes", type=int, help="training episodes")


def _load(args: argparse.Namespace, mode: str | None = None) -> ExperimentConfig:
    flags = {
        "seed": args.seed,
        "episodes": getattr(args, "episodes", None),
        "cluster.size": args.L,
        "cluster.users": args.K,
        "cluster.delay_steps": args.Td,
    }
    if mode is not None:
        flags["mode"] = mode
    return load_config(args.config, args.set, flags)


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _load(args, mode=args.mode)
    run_dir = make_run_dir(cfg, f"train_{cfg.mode}")
    print(f"[train] mode={cfg.mode} L={cfg.env.cluster_size} K={cfg.env.n_users} "
          f"Td={cfg.env.delay_steps} episodes={cfg.episodes} seed={cfg.seed}")
    print(f"[train] run dir: {run_dir}")
    try:
        summary = orchestrator.run_training(cfg, run_dir)
    except orchestrator.DivergenceAbort as exc:
        print(f"[train] DIVERGED: {exc}; last healthy checkpoint: {exc.checkpoint_path}",
              file=sys.stderr)
        return EXIT_DIVERGED
    fig = plots.render_learning_curve(run_dir)
    tail = summary["mean_rates"][-max(1, len(summary["mean_rates"]) // 5):]
    print(f"[train] final-20% mean episodic rate: {np.mean(tail):.1f} Mbps")
    print(f"[train] curve: {fig}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _load(args)
    run_dir = make_run_dir(cfg, "eval")
    result = orchestrator.run_eval(cfg, args.checkpoint, args.eval_episodes, run_dir)
    print(f"[eval] {args.eval_episodes} episodes: mean {result['mean_rate']:.1f} Mbps, "
          f"std {result['std_rate']:.1f} Mbps")
    return EXIT_OK


def cmd_baseline(args: argparse.Namespace) -> int:
    cfg = _load(args)
    run_dir = make_run_dir(cfg, f"baseline_{args.kind}")
    result = orchestrator.run_baseline(cfg, args.kind, args.eval_episodes, run_dir)
    print(f"[baseline:{args.kind}] {args.eval_episodes} episodes: "
          f"mean {result['mean_rate']:.1f} Mbps, std {result['std_rate']:.1f} Mbps")
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    if args.replay:
        with open(args.replay) as fh:
            cases = yaml.safe_load(fh)
        for i, case in enumerate(cases):
            result = convergence.replay_case(case)
            print(f"[verify] replayed case {i} ({case.get('kind','?')}): "
                  f"{json.dumps(result, default=float)}")
        return EXIT_OK
    report = convergence.run_verification(n_instances=args.instances, seed=args.seed or 2024)
    checks = [
        ("value/advantage bounds", report.lemma1_ok,
         f"worst excess {report.worst_value_excess:.3e}"),
        ("performance-difference identity", report.worst_perf_diff_residual < 1e-8,
         f"worst residual {report.worst_perf_diff_residual:.3e}"),
        ("surrogate self-consistency", report.worst_surrogate_self_residual < 1e-12,
         f"worst residual {report.worst_surrogate_self_residual:.3e}"),
        ("improvement inequality", report.theorem1_ok,
         f"{report.n_theorem1_checked} improving pairs, worst slack {report.worst_theorem1_slack:.3e}"),
        ("linear surrogate-gap bound", report.linear_gap_ok, ""),
        ("quadratic surrogate-gap bound", report.quadratic_gap_ok,
         "" if report.quadratic_gap_ok else "violations recorded (bound-constant discrepancy)"),
        ("first-order gradient match", report.worst_gradient_match < 1e-3,
         f"worst relative error {report.worst_gradient_match:.3e}"),
    ]
    for name, ok, detail in checks:
        print(f"[verify] {'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else ""))
    if report.counterexamples:
        out = args.counterexamples or "verify_counterexamples.yaml"
        with open(out, "w") as fh:
            yaml.safe_dump(report.counterexamples, fh)
        print(f"[verify] {len(report.counterexamples)} counterexample(s) written to {out}")
    return EXIT_OK if report.all_ok else 1


def cmd_flops(args: argparse.Namespace) -> int:
    rows = []
    if args.L is not None or args.K is not None:
        grid = [(args.L or 4, args.K or 2)]
    else:
        grid = flops.REFERENCE_GRID
    for L, K in grid:
        arch = flops.ArchSpec(m_antennas=args.M, n_users=K, cluster_size=L)
        rep = flops.episode_flops(arch, L, args.T, args.epochs1, args.epochs2, args.N)
        rows.append((L, K, rep))
    print(f"{'L':>3} {'K':>3} {'per-episode (GFLOPS)':>22} {'total (TFLOPS)':>16} {'neural %':>9}")
    for L, K, rep in rows:
        print(f"{L:>3} {K:>3} {rep.per_episode/1e9:>22.2f} {rep.total/1e12:>16.2f} "
              f"{100*rep.neural_share:>8.2f}%")
    if args.csv:
        with open(args.csv + ".tmp", "w") as fh:
            fh.write("L,K,per_step_flops,per_episode_gflops,total_tflops,neural_share\n")
            for L, K, rep in rows:
                fh.write(f"{L},{K},{rep.per_step},{rep.per_episode/1e9},"
                         f"{rep.total/1e12},{rep.neural_share}\n")
        os.replace(args.csv + ".tmp", args.csv)
        print(f"[flops] CSV written to {args.csv}")
    return EXIT_OK


def cmd_curves(args: argparse.Namespace) -> int:
    out = plots.render_learning_curve(args.run_dir)
    print(f"[curves] {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dsppo",
        description="Dual-stage multi-agent PPO for LEO satellite downlink precoding",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train dsppo or ippo agents")
    p_train.add_argument("--mode", choices=["dsppo", "ippo"], default=None)
    _add_config_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint deterministically")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--eval-episodes", type=int, default=10)
    _add_config_flags(p_eval)
    p_eval.set_defaults(func=cmd_eval)

    p_base = sub.add_parser("baseline", help="random-TPM / matched-filter sanity runs")
    p_base.add_argument("--kind", choices=["random", "mf"], default="random")
    p_base.add_argument("--eval-episodes", type=int, default=10)
    _add_config_flags(p_base)
    p_base.set_defaults(func=cmd_baseline)

    p_verify = sub.add_parser("verify", help="numerical verification of the improvement theory")
    p_verify.add_argument("--instances", type=int, default=1000)
    p_verify.add_argument("--seed", type=int, default=None)
    p_verify.add_argument("--counterexamples", help="output path for counterexample YAML")
    p_verify.add_argument("--replay", help="re-run checks on a serialized counterexample file")
    p_verify.set_defaults(func=cmd_verify)

    p_flops = sub.add_parser("flops", help="analytical complexity report")
    p_flops.add_argument("--M", type=int, default=9)
    p_flops.add_argument("--L", type=int, default=None)
    p_flops.add_argument("--K", type=int, default=None)
    p_flops.add_argument("--T", type=int, default=512)
    p_flops.add_argument("--N", type=int, default=flops.REFERENCE_EPISODES,
                         help="episodes for the total-cost column")
    p_flops.add_argument("--epochs1", type=float, default=flops.EFFECTIVE_EPOCHS_STAGE1,
                         help="effective stage-1 training passes per sample")
    p_flops.add_argument("--epochs2", type=float, default=flops.EFFECTIVE_EPOCHS_STAGE2,
                         help="effective stage-2 training passes per sample")
    p_flops.add_argument("--csv", help="also write the table as CSV")
    p_flops.set_defaults(func=cmd_flops)

    p_curves = sub.add_parser("curves", help="render the learning curve of a run directory")
    p_curves.add_argument("run_dir")
    p_curves.set_defaults(func=cmd_curves)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
