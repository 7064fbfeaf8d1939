"""Command line entry point.

Subcommands cover the full pipeline: generate demonstrations, train the
action tokenizer, train the policy, roll the policy out, and inspect the
artifacts.  Every command takes --config/--seed/--out, writes its resolved
configuration beside its outputs, and reports failures through exit codes:

    0  success
    2  configuration problem (unknown key, bad value, missing config file)
    3  data or checkpoint problem (missing file, corruption, shape mismatch)
    4  numerical failure (non-finite value during training or inference)
"""

from __future__ import annotations

import argparse
import itertools
import sys
from pathlib import Path

import numpy as np

from .autograd import NumericsError
from .checkpoint import (
    CheckpointError,
    read_policy,
    read_tokenizer,
    write_policy,
    write_tokenizer,
)
from .config import ConfigError, RunConfig, load_config, parse_config, write_config
from .data import DataFormatError, denormalize, read_dataset, write_dataset
from .envs import scripted_demonstrator
from .evaluation import (
    PolicyBundle,
    RolloutConfig,
    evaluate,
    report_to_json,
    rollout,
    timing_probe,
    write_traces,
)
from .plots import plot_codebook, plot_trajectories, plot_training_log
from .rng import SeededRng
from .training import train_policy, train_rvq


def _cmd_gen_data(cfg: RunConfig, out: Path) -> int:
    rng = SeededRng(cfg.seed).split("demos")
    ds = scripted_demonstrator(cfg.env, rng, cfg.demo_count)
    path = out / "demos.bin"
    write_dataset(ds, path)
    print(f"wrote {cfg.demo_count} {cfg.env} demos to {path}")
    return 0


def _cmd_train_rvq(cfg: RunConfig, out: Path) -> int:
    ds = read_dataset(_require(cfg.dataset, "dataset"))
    quantizer, stats = train_rvq(ds, cfg, log_path=out / "rvq_log.csv")
    write_tokenizer(out / "tokenizer.bin", quantizer, stats)
    print(f"wrote tokenizer to {out / 'tokenizer.bin'}")
    return 0


def _cmd_train_policy(cfg: RunConfig, out: Path) -> int:
    ds = read_dataset(_require(cfg.dataset, "dataset"))
    quantizer, stats = read_tokenizer(_require(cfg.tokenizer, "tokenizer"))
    net, mask = train_policy(ds, quantizer, stats, cfg, log_path=out / "policy_log.csv")
    write_policy(out / "policy.bin", net, mask)
    print(f"wrote policy to {out / 'policy.bin'}")
    return 0


def _load_bundle(cfg: RunConfig) -> PolicyBundle:
    quantizer, stats = read_tokenizer(_require(cfg.tokenizer, "tokenizer"))
    net, mask = read_policy(_require(cfg.policy, "policy"))
    if not cfg.deadcode_mask:
        mask = None
    return PolicyBundle(net, quantizer, stats, mask)


def _roll(cfg: RunConfig):
    bundle = _load_bundle(cfg)
    roll_cfg = RolloutConfig(
        episodes=cfg.episodes,
        execution=cfg.execution,
        receding_steps=cfg.receding_steps,
        temperature=cfg.temperature,
        conditional=cfg.conditional,
        seed=cfg.seed,
    )
    demos = read_dataset(cfg.dataset) if cfg.dataset else None
    if cfg.conditional and demos is None:
        raise ConfigError("conditional rollouts need dataset= pointing at demos")
    results = rollout(bundle, cfg.env, roll_cfg, goal_source=demos, keep_traces=True)
    report = evaluate(results, cfg.env, roll_cfg, demos=demos)
    return bundle, results, report


def _cmd_rollout(cfg: RunConfig, out: Path) -> int:
    _, results, report = _roll(cfg)
    (out / "report.json").write_text(report_to_json(report))
    write_traces(results, out / "traces")
    plot_trajectories(results, cfg.env, out / "trajectories.svg")
    print(report_to_json(report), end="")
    return 0


def _cmd_eval(cfg: RunConfig, out: Path) -> int:
    bundle, results, report = _roll(cfg)
    report["timing"] = timing_probe(bundle, cfg.env, repeats=30, seed=cfg.seed)
    (out / "report.json").write_text(report_to_json(report))
    plot_trajectories(results, cfg.env, out / "trajectories.svg")
    for r in results:
        r.obs, r.actions, r.codes = None, None, None
    write_traces(results, out)
    print(report_to_json(report), end="")
    return 0


def _cmd_inspect_codebook(cfg: RunConfig, out: Path) -> int:
    quantizer, stats = read_tokenizer(_require(cfg.tokenizer, "tokenizer"))
    qc = quantizer.cfg
    combos = np.array(
        list(itertools.product(*[range(qc.codebook_size)] * qc.num_quantizers)),
        dtype=np.int64,
    )
    centers = denormalize(quantizer.decode_codes(combos), stats)
    flat = centers.reshape(len(combos), -1)
    header = [f"code_{q}" for q in range(qc.num_quantizers)]
    header += [f"act_{t}_{d}" for t in range(qc.chunk_len) for d in range(qc.act_dim)]
    lines = [",".join(header)]
    for row_codes, row_acts in zip(combos, flat):
        lines.append(
            ",".join([str(int(c)) for c in row_codes] + [f"{v:.6g}" for v in row_acts])
        )
    (out / "codebook.csv").write_text("\n".join(lines) + "\n")
    plot_codebook(flat, combos, out / "codebook.svg")
    print(f"wrote {len(combos)} code combinations to {out / 'codebook.csv'}")
    return 0


def _cmd_plot(cfg: RunConfig, out: Path, log: str) -> int:
    log_path = Path(log)
    if not log_path.exists():
        raise DataFormatError(f"{log_path}: no such log file")
    dest = out / (log_path.stem + ".svg")
    plot_training_log(log_path, dest)
    print(f"wrote {dest}")
    return 0


def _require(value: str, key: str) -> str:
    if not value:
        raise ConfigError(f"this command needs {key}= in the config or overrides")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vqpolicy",
        description="Behavior cloning with residual vector-quantized action tokens.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="path to a key=value config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a single config key (repeatable)",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate scripted demonstrations")
    sub.add_parser("train-rvq", parents=[common], help="train the action tokenizer")
    sub.add_parser("train-policy", parents=[common], help="train the policy transformer")
    sub.add_parser("rollout", parents=[common], help="roll out episodes with full traces")
    sub.add_parser("eval", parents=[common], help="aggregate rollout report with timing")
    sub.add_parser("inspect-codebook", parents=[common], help="dump decoded code centers")
    plot = sub.add_parser("plot", parents=[common], help="render a training log to SVG")
    plot.add_argument("--log", required=True, help="training CSV to plot")
    return parser


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train-rvq": _cmd_train_rvq,
    "train-policy": _cmd_train_policy,
    "rollout": _cmd_rollout,
    "eval": _cmd_eval,
    "inspect-codebook": _cmd_inspect_codebook,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed)
        cfg = _apply_sets(cfg, args.set)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / "resolved.cfg")
    try:
        if args.command == "plot":
            return _cmd_plot(cfg, out, args.log)
        return _COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataFormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericsError as exc:
        print(f"numerics error: {exc}", file=sys.stderr)
        return 4


def _apply_sets(cfg: RunConfig, pairs: list[str]) -> RunConfig:
    for pair in pairs:
        cfg = parse_config(pair, base=cfg)
    cfg.validate()
    return cfg


if __name__ == "__main__":
    sys.exit(main())
