"""Command-line entry points."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys

import numpy as np

from . import report
from .agent import Agent, Hyperparameters
from .env import BenchmarkEnvironment, SyntheticEnvironment, matching_oracle
from .linearize import (BitBudget, EncodingPlan, alto_default_plan, bit_budget,
                        count_interleavings, linearize)
from .mttkrp import BenchConfig, benchmark
from .tensor import density, load_frostt
from .transport import EnvironmentClient, RemoteEnvironment, serve

log = logging.getLogger("bitweave")


def _dims(text):
    return tuple(int(x) for x in text.replace("x", ",").split(",")) if text else None


def _add_bench_flags(p):
    p.add_argument("--rank", type=int, default=16)
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--reuse-threshold", type=float, default=8.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", type=_dims, default=None, help="override mode lengths, e.g. 4,8,2")


def _bench_config(args) -> BenchConfig:
    return BenchConfig(rank=args.rank, repeats=args.repeats, warmup=args.warmup,
                       threads=args.threads, reuse_threshold=args.reuse_threshold)


def _resolve_plan(text, budget: BitBudget) -> EncodingPlan:
    if text in (None, "alto"):
        return alto_default_plan(budget)
    return EncodingPlan.from_string(text).validate(budget)


def _csv_out(rows, columns):
    w = csv.DictWriter(sys.stdout, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    w.writerows(rows)


def cmd_inspect(args):
    t = load_frostt(args.path, args.dims)
    b = bit_budget(t.dims)
    print(f"dims {'×'.join(map(str, t.dims))}, nnz {t.nnz}, ℓ(p)={b.total}, "
          f"plans {count_interleavings(b)}")
    print(f"density {density(t.dims, t.nnz):.3g}")
    print(f"bits per mode {','.join(map(str, b.per_mode))}, word {b.word_bits} bits")
    print(f"alto plan {alto_default_plan(b)}")


def cmd_bench(args):
    t = load_frostt(args.path, args.dims)
    budget = bit_budget(t.dims)
    cfg = _bench_config(args)
    plans = [("plan", _resolve_plan(args.plan, budget))]
    if args.compare:
        plans.append(("compare", _resolve_plan(args.compare, budget)))
    rows = []
    results = []
    for label, plan in plans:
        res = benchmark(t, plan, cfg)
        results.append(res)
        for n, s in enumerate(res.mode_seconds):
            rows.append({"label": label, "plan": plan.to_string(), "mode": n + 1, "seconds": f"{s:.6g}"})
        rows.append({"label": label, "plan": plan.to_string(), "mode": "total",
                     "seconds": f"{res.total_seconds:.6g}"})
    _csv_out(rows, ["label", "plan", "mode", "seconds"])
    if len(results) == 2:
        print(f"speedup {results[0].total_seconds / results[1].total_seconds:.4f}")


def cmd_serve(args):
    t = load_frostt(args.path, args.dims)
    env = BenchmarkEnvironment(t, _bench_config(args), tensor_id=os.path.basename(args.path))
    if args.cache and os.path.exists(args.cache):
        env.cache.load(args.cache)
    log.info("baseline %.6gs for %s", env.baseline_seconds, env.alto_plan)
    try:
        serve(env, args.host, args.port, tensor_id=os.path.basename(args.path))
    finally:
        if args.cache:
            env.cache.save(args.cache)


def _hyper(args) -> Hyperparameters:
    hp = Hyperparameters(seed=args.seed)
    for name in ("max_episodes", "decay_fraction", "eps_min", "target_update",
                 "hidden_scale", "gamma"):
        v = getattr(args, name)
        if v is not None:
            setattr(hp, name, v)
    if args.no_reward_model:
        hp.reward_model = False
    if args.max_hours is not None:
        hp.max_seconds = args.max_hours * 3600.0
    return hp


def _synthetic_env(bits_text: str, seed: int) -> SyntheticEnvironment:
    budget = BitBudget(tuple(int(x) for x in bits_text.split(",")))
    rng = np.random.default_rng(seed)
    picks = [n for n, b in enumerate(budget.per_mode) for _ in range(b)]
    hidden = EncodingPlan(tuple(int(p) for p in rng.permutation(picks)))
    env = SyntheticEnvironment(budget, matching_oracle(hidden))
    env.hidden = hidden
    return env


def cmd_train(args):
    if args.synthetic:
        env = _synthetic_env(args.synthetic, args.seed)
    elif args.endpoint:
        host, port = args.endpoint.rsplit(":", 1)
        env = RemoteEnvironment(EnvironmentClient(host, int(port)))
    elif args.path:
        t = load_frostt(args.path, args.dims)
        env = BenchmarkEnvironment(t, _bench_config(args))
    else:
        raise ValueError("train needs a tensor path, --endpoint or --synthetic")
    hp = _hyper(args)
    if args.checkpoint and os.path.exists(os.path.join(args.checkpoint, "state.json")):
        agent = Agent.load(args.checkpoint, env)
        if args.max_hours is not None:
            agent.hyper.max_seconds = hp.max_seconds
        log.info("resumed at episode %d", agent.episode)
    else:
        agent = Agent(env, hp)
    stop = math.e * (1 - 1e-12) if args.synthetic and args.stop_at_optimum else None
    try:
        result = agent.train(episodes=args.episodes, stop_reward=stop, log_path=args.log)
    finally:
        if args.checkpoint:
            agent.save(args.checkpoint)
    summary = {
        "best_plan": result.best.plan.to_string(), "speedup": result.best.reward,
        "found_episode": result.best.episode, "episodes": result.episodes,
        "truncated": result.truncated, **result.counts,
    }
    if args.synthetic:
        summary["hidden_plan"] = env.hidden.to_string()
    print(json.dumps(summary))
    if args.report_dir:
        for p in report.training_report(agent.history, args.report_dir):
            log.info("wrote %s", p)


def cmd_eval(args):
    t = load_frostt(args.path, args.dims)
    budget = bit_budget(t.dims)
    cfg = _bench_config(args)
    baseline = _resolve_plan(args.baseline, budget)
    learned = _resolve_plan(args.plan, budget)
    name = os.path.basename(args.path)
    rows = []
    base_seconds = None
    for label, plan in (("baseline", baseline), ("learned", learned)):
        res = benchmark(t, plan, cfg)
        base_seconds = base_seconds or res.total_seconds
        rows.append({"tensor": name, "label": label, "plan": plan.to_string(),
                     "seconds": res.total_seconds, "speedup": base_seconds / res.total_seconds,
                     "storage_bytes": linearize(t, plan).storage_bytes()})
    _csv_out(rows, ["tensor", "label", "plan", "seconds", "speedup", "storage_bytes"])
    if args.report_dir:
        report.comparison_report(rows, args.report_dir)


def cmd_report(args):
    records = report.read_log(args.log)
    for p in report.training_report(records, args.out):
        print(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bitweave", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("inspect", help="summarise a .tns tensor")
    p.add_argument("path")
    p.add_argument("--dims", type=_dims, default=None)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("bench", help="time all-modes MTTKRP for a plan")
    p.add_argument("path")
    p.add_argument("--plan", default=None, help="comma-separated 1-based modes, or 'alto'")
    p.add_argument("--alto", dest="plan", action="store_const", const="alto")
    p.add_argument("--compare", default=None, help="second plan; prints plan/compare speedup")
    _add_bench_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("serve", help="serve plan evaluations over TCP")
    p.add_argument("path")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=5555)
    p.add_argument("--cache", default=None, help="reward cache file to load and save")
    _add_bench_flags(p)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("train", help="learn an encoding plan")
    p.add_argument("path", nargs="?")
    p.add_argument("--endpoint", default=None, help="host:port of a running server")
    p.add_argument("--synthetic", default=None, metavar="BITS",
                   help="per-mode bit budget, e.g. 2,3,1; rewards from a hidden plan")
    p.add_argument("--stop-at-optimum", action="store_true")
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--max-episodes", type=int, default=None)
    p.add_argument("--max-hours", type=float, default=None)
    p.add_argument("--decay-fraction", type=float, default=None)
    p.add_argument("--eps-min", type=float, default=None)
    p.add_argument("--target-update", type=int, default=None)
    p.add_argument("--hidden-scale", type=float, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--no-reward-model", action="store_true")
    p.add_argument("--checkpoint", default=None, help="directory to resume from and save to")
    p.add_argument("--log", default=None, help="append one JSON record per episode")
    p.add_argument("--report-dir", default=None, help="write training.csv and figures here")
    _add_bench_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="compare a learned plan with the baseline")
    p.add_argument("path")
    p.add_argument("--plan", required=True)
    p.add_argument("--baseline", default="alto")
    p.add_argument("--report-dir", default=None)
    _add_bench_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render figures from a training log")
    p.add_argument("log")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
