"""Unified command line: gen-data, train-sft, decode, train-mdpo,
filter-backslide, analyze, eval.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from .analysis import report_for, write_report_csv
from .core import DecodeConfig, Vocab, trajectory_to_jsonl, validate_trajectory
from .decoding import ConfigError, UnknownSchedule, decode
from .evaluation import evaluate
from .mdpo import MdpoConfig, filter_backslide, train_mdpo
from .model import load_checkpoint
from .rewards import gen_instances
from .sft import SftConfig, train_sft
from .util import read_jsonl, substream, write_jsonl


def _dump_resolved(args: argparse.Namespace, out_path: str) -> None:
    """Every run leaves its resolved configuration next to its outputs."""
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    path = Path(out_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg_path = path.with_name(path.stem + ".config.json")
    cfg_path.write_text(json.dumps(resolved, indent=1, sort_keys=True, default=str))


def cmd_gen_data(args) -> int:
    rng = substream(args.seed, "data")
    items = gen_instances(args.task, args.count, rng, lo=args.lo, hi=args.hi)
    write_jsonl(args.out, items)
    _dump_resolved(args, args.out)
    print(f"wrote {len(items)} {args.task} instances to {args.out}")
    return 0


def cmd_train_sft(args) -> int:
    vocab = Vocab.default()
    items = read_jsonl(args.data)
    cfg = SftConfig(
        steps=args.steps, batch_size=args.batch, lr=args.lr, seed=args.seed,
        d_model=args.d_model, n_layers=args.layers, n_heads=args.heads,
        response_len=args.len, ckpt_path=args.out,
        log_path=args.log or f"{args.out}.train.jsonl",
    )
    model = train_sft(items, cfg, vocab)
    _dump_resolved(args, args.out)
    print(f"trained {model.n_params()} params for {cfg.steps} steps -> {args.out}")
    return 0


def cmd_decode(args) -> int:
    vocab = Vocab.default()
    model, _ = load_checkpoint(args.checkpoint)
    cfg = DecodeConfig(
        strategy=args.strategy, schedule=args.schedule, block_size=args.block,
        steps=args.steps, response_len=args.len, temperature=args.temp, seed=args.seed,
    )
    prompt = vocab.encode(args.prompt)
    traj = decode(model, prompt.ids, cfg, vocab)
    validate_trajectory(traj, vocab.mask_id)
    trajectory_to_jsonl(traj, args.out)
    _dump_resolved(args, args.out)
    print(vocab.decode_ids(traj.final_ids()[len(prompt.ids):]))
    return 0


def cmd_train_mdpo(args) -> int:
    vocab = Vocab.default()
    items = read_jsonl(args.data)
    init_model, _ = load_checkpoint(args.init)
    cfg = MdpoConfig(
        group_size=args.group, rollout_steps=args.steps_rollout,
        eps_clip=args.clip, beta=args.beta, inner_epochs=args.epochs_inner,
        mode_mix=args.mode_mix, block_size=args.block,
        reward_stride=args.reward_stride, updates=args.updates,
        batch_prompts=args.batch_prompts, lr=args.lr,
        temperature=args.temp, strategy=args.strategy, schedule=args.schedule,
        response_len=args.len, seed=args.seed,
        train_on_backslide_only=args.filter_backslide,
        ckpt_path=args.out, log_path=args.log or f"{args.out}.metrics.jsonl",
    )
    _, log = train_mdpo(items, cfg, vocab, init_model)
    _dump_resolved(args, args.out)
    print(f"{cfg.updates} weight updates -> {args.out} "
          f"(final mean reward {log[-1]['mean_final_reward']:.3f})")
    return 0


def cmd_filter_backslide(args) -> int:
    vocab = Vocab.default()
    items = read_jsonl(args.data)
    model, _ = load_checkpoint(args.checkpoint)
    cfg = DecodeConfig(
        strategy=args.strategy, schedule=args.schedule, block_size=args.block,
        steps=args.steps, response_len=args.len, temperature=0.0, seed=args.seed,
    )
    kept, _ = filter_backslide(model, items, cfg, vocab, seed=args.seed)
    write_jsonl(args.out, kept)
    _dump_resolved(args, args.out)
    print(f"kept {len(kept)}/{len(items)} backslide prompts -> {args.out}")
    return 0


def cmd_analyze(args) -> int:
    records = read_jsonl(args.rewards)
    reports = [
        report_for(rec.get("traj_id", f"traj{i}"), rec.get("mode", "pure-diff"), rec["rewards"])
        for i, rec in enumerate(records)
    ]
    write_report_csv(reports, args.bins, args.out)
    _dump_resolved(args, args.out)
    print(f"analyzed {len(reports)} trajectories -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    vocab = Vocab.default()
    items = read_jsonl(args.data)
    if not items:
        raise ConfigError("empty evaluation dataset")
    model, _ = load_checkpoint(args.checkpoint)
    rows = []
    for strategy in args.strategies.split(","):
        for schedule in args.schedules.split(","):
            for block in (int(b) for b in args.blocks.split(",")):
                for steps in (int(t) for t in args.steps_list.split(",")):
                    cfg = DecodeConfig(
                        strategy=strategy, schedule=schedule, block_size=block,
                        steps=steps, response_len=args.len, temperature=0.0,
                        seed=args.seed,
                    )
                    res = evaluate(model, items, cfg, vocab, seed=args.seed)
                    rows.append({
                        "strategy": strategy, "schedule": schedule,
                        "block": block, "steps": steps,
                        **res.as_dict(),
                    })
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        w.writeheader()
        w.writerows(rows)
    _dump_resolved(args, args.out)
    print(f"wrote {len(rows)} grid cells -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mdlab")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a verifiable-task dataset")
    g.add_argument("--task", choices=["countdown", "arith"], required=True)
    g.add_argument("--count", type=int, default=1000)
    g.add_argument("--lo", type=int, default=1)
    g.add_argument("--hi", type=int, default=9)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train-sft", help="masked-diffusion supervised training")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int, default=2000)
    s.add_argument("--batch", type=int, default=64)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--d-model", type=int, default=128)
    s.add_argument("--layers", type=int, default=4)
    s.add_argument("--heads", type=int, default=4)
    s.add_argument("--len", type=int, default=16)
    s.add_argument("--log", default=None)
    s.set_defaults(func=cmd_train_sft)

    d = sub.add_parser("decode", help="run one denoising trajectory")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--prompt", required=True)
    d.add_argument("--strategy", choices=["rr", "lcr", "lcr-frozen", "rcr"], default="lcr")
    d.add_argument("--schedule", default="linear")
    d.add_argument("--steps", type=int, default=16)
    d.add_argument("--block", type=int, default=0)
    d.add_argument("--len", type=int, default=16)
    d.add_argument("--temp", type=float, default=0.0)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_decode)

    m = sub.add_parser("train-mdpo", help="policy optimization from a checkpoint")
    m.add_argument("--init", required=True)
    m.add_argument("--data", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--group", type=int, default=8)
    m.add_argument("--steps-rollout", type=int, default=32)
    m.add_argument("--clip", type=float, default=0.2)
    m.add_argument("--beta", type=float, default=0.01)
    m.add_argument("--epochs-inner", type=int, default=2)
    m.add_argument("--mode-mix", type=float, default=0.5)
    m.add_argument("--block", type=int, default=8)
    m.add_argument("--reward-stride", type=int, default=1)
    m.add_argument("--updates", type=int, default=100)
    m.add_argument("--batch-prompts", type=int, default=8)
    m.add_argument("--lr", type=float, default=1e-4)
    m.add_argument("--temp", type=float, default=1.0)
    m.add_argument("--strategy", choices=["rr", "lcr", "lcr-frozen", "rcr"], default="lcr")
    m.add_argument("--schedule", default="linear")
    m.add_argument("--len", type=int, default=16)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--filter-backslide", action="store_true")
    m.add_argument("--log", default=None)
    m.set_defaults(func=cmd_train_mdpo)

    f = sub.add_parser("filter-backslide", help="keep prompts showing answer backslide")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--strategy", choices=["rr", "lcr", "lcr-frozen", "rcr"], default="lcr")
    f.add_argument("--schedule", default="linear")
    f.add_argument("--steps", type=int, default=16)
    f.add_argument("--block", type=int, default=0)
    f.add_argument("--len", type=int, default=16)
    f.add_argument("--seed", type=int, default=0)
    f.set_defaults(func=cmd_filter_backslide)

    a = sub.add_parser("analyze", help="span/backslide statistics as CSV")
    a.add_argument("--rewards", required=True, help="jsonl: {traj_id, mode, rewards}")
    a.add_argument("--traj-dir", default=None, help="optional trajectory directory (metadata only)")
    a.add_argument("--bins", type=int, default=20)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_analyze)

    e = sub.add_parser("eval", help="accuracy grid over decode settings")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--strategies", default="lcr,rcr")
    e.add_argument("--schedules", default="linear")
    e.add_argument("--blocks", default="0")
    e.add_argument("--steps-list", default="8,16,32")
    e.add_argument("--len", type=int, default=16)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UnknownSchedule, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
