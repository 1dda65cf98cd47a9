"""Command-line interface.

Subcommands: ``gen-chain``, ``gen-ratio-series``, ``run``, ``validate``,
``sample``, ``exact-query``.  Run ``ctbnep <subcommand> --help`` for the
flags of each.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import io
from .clustergraph import build_uniform_graph, validate
from .exact import build_joint, exact_marginals
from .experiments import (ExperimentConfig, gen_chain, gen_rate_ratio_series,
                          pair_partition, run_experiment)
from .model import IntervalEvidence


def _parse_mode(text: str):
    """"uniform:K" -> ("uniform", K); "dynamic" -> ("dynamic", None)."""
    if text == "dynamic":
        return "dynamic", None
    if text.startswith("uniform:"):
        return "uniform", float(text.split(":", 1)[1])
    raise argparse.ArgumentTypeError(
        f"mode must be 'uniform:K' or 'dynamic', got {text!r}"
    )


def _add_run_flags(p):
    p.add_argument("--model", required=True, help="model JSON file")
    p.add_argument("--evidence", help="evidence JSON file")
    p.add_argument("--mode", type=_parse_mode, default=("dynamic", None),
                   help="uniform:K or dynamic (default dynamic)")
    p.add_argument("--kl-threshold", type=float, default=0.01,
                   help="split acceptance threshold in nats (dynamic mode)")
    p.add_argument("--horizon", type=float, default=10.0)
    p.add_argument("--grid", type=int, default=100, help="query grid points in (0, horizon]")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="out", help="directory for the CSV bundle")
    p.add_argument("--oracle-cap", type=int, default=2 ** 16,
                   help="max joint states for the exact-inference metric")
    p.add_argument("--metrics", default="kl-to-exact,runtime",
                   help="comma list of kl-to-exact, empirical-llh, runtime")
    p.add_argument("--initial-state", default="staggered",
                   help="'staggered', 'model' (keep the model's own), or "
                        "comma list var=state")
    p.add_argument("--trajectories", type=int, default=100,
                   help="trajectory count for the empirical metric")


def _initial_state_arg(text):
    if text == "staggered":
        return "staggered"
    if text == "model":
        return None
    return {kv.split("=")[0]: int(kv.split("=")[1]) for kv in text.split(",")}


def cmd_gen_chain(args):
    model = gen_chain(args.n, base_rate=args.base_rate,
                      agree_factor=args.agree_factor,
                      disagree_factor=args.disagree_factor, noise=args.noise)
    io.save_model(model, args.out)
    print(f"wrote {args.n}-variable chain to {args.out}")


def cmd_gen_ratio_series(args):
    ratios = [float(r) for r in args.ratios.split(",")]
    models = gen_rate_ratio_series(args.n, top_rate=args.top_rate, ratios=ratios)
    os.makedirs(args.out_dir, exist_ok=True)
    for ratio, model in zip(ratios, models):
        path = os.path.join(args.out_dir, f"chain{args.n}_ratio{ratio:g}.json")
        io.save_model(model, path)
        print(f"wrote {path}")


def cmd_run(args):
    model = io.load_model(args.model)
    evidence = io.load_evidence(args.evidence, model) if args.evidence else None
    mode, k = args.mode
    config = ExperimentConfig(
        model=model, horizon=args.horizon, mode=mode, granularity=k,
        kl_threshold=args.kl_threshold, evidence=evidence,
        initial_state=_initial_state_arg(args.initial_state),
        metrics=tuple(args.metrics.split(",")), grid_points=args.grid,
        seed=args.seed, n_trajectories=args.trajectories,
        oracle_cap=args.oracle_cap,
    )
    result = run_experiment(config, out_dir=args.out_dir)
    for warning in result.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    print(f"wrote metrics.csv, splits.csv, diagnostics.csv, timing.csv to {args.out_dir}")
    print(f"run_ep: {result.ep_seconds:.3f}s, sweeps={result.diagnostics.sweeps}, "
          f"converged={result.diagnostics.converged}, splits={result.n_splits}")
    for metric in dict.fromkeys(m for m, *_ in result.metric_rows):
        print(f"mean {metric}: {result.mean(metric):.6g}")


def cmd_validate(args):
    model = io.load_model(args.model)
    if args.layout:
        subsets, cuts = io.load_layout(args.layout, model)
    else:
        subsets = pair_partition(model)
        cuts = [[] for _ in subsets]
    graph = build_uniform_graph(model, subsets, cuts, args.horizon)
    violations = validate(graph)
    if violations:
        for v in violations:
            print(f"{v.kind}: {v.message}")
        sys.exit(1)
    print(f"OK: {len(graph.clusters)} clusters, {len(graph.sepsets)} sepsets, "
          "all legality properties hold")


def cmd_sample(args):
    from .sampler import sample_trajectory
    model = io.load_model(args.model)
    traj = sample_trajectory(model, args.horizon, args.seed)
    io.trajectory_to_csv(traj, args.out)
    print(f"wrote {len(traj.segments)} segments to {args.out}")


def cmd_exact_query(args):
    model = io.load_model(args.model)
    evidence = io.load_evidence(args.evidence, model) if args.evidence else IntervalEvidence(())
    jp = build_joint(model, args.oracle_cap)
    var = model.var(args.var)
    times = ([args.time] if args.time is not None
             else list(np.linspace(args.horizon / args.grid, args.horizon, args.grid)))
    out = exact_marginals(jp, evidence, args.horizon, [var], times)[var]
    for t, dist in zip(times, out):
        print(f"t={t:.6g}: " + " ".join(f"{p:.6f}" for p in dist))


def build_parser():
    p = argparse.ArgumentParser(prog="ctbnep",
                                description="CTBN inference with adaptive-granularity EP")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-chain", help="generate a follow-the-parent chain model")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--base-rate", type=float, default=1.0)
    g.add_argument("--agree-factor", type=float, default=0.1)
    g.add_argument("--disagree-factor", type=float, default=10.0)
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_chain)

    g = sub.add_parser("gen-ratio-series",
                       help="chains with an increasingly faster root")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--top-rate", type=float, default=100.0)
    g.add_argument("--ratios", default="1,10,100,1000")
    g.add_argument("--out-dir", required=True)
    g.set_defaults(func=cmd_gen_ratio_series)

    g = sub.add_parser("run", help="run one experiment and write the CSV bundle")
    _add_run_flags(g)
    g.set_defaults(func=cmd_run)

    g = sub.add_parser("validate", help="check cluster-graph legality")
    g.add_argument("--model", required=True)
    g.add_argument("--layout", help="layout JSON (default: consecutive pairs)")
    g.add_argument("--horizon", type=float, default=10.0)
    g.set_defaults(func=cmd_validate)

    g = sub.add_parser("sample", help="draw one trajectory to CSV")
    g.add_argument("--model", required=True)
    g.add_argument("--horizon", type=float, default=10.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_sample)

    g = sub.add_parser("exact-query", help="exact posterior marginal of one variable")
    g.add_argument("--model", required=True)
    g.add_argument("--evidence")
    g.add_argument("--var", required=True)
    g.add_argument("--time", type=float, help="single query time (default: grid)")
    g.add_argument("--grid", type=int, default=100)
    g.add_argument("--horizon", type=float, default=10.0)
    g.add_argument("--oracle-cap", type=int, default=2 ** 16)
    g.set_defaults(func=cmd_exact_query)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    args.func(args)


if __name__ == "__main__":
    main()
