"""Command-line entry points: train, eval, verify, grid-info, convert-dag, export-dist.

Exit codes: 0 success, 1 validation/config failure, 2 verification-suite
tolerance breach, 3 I/O error.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from .dag_env import (
    DagValidationError,
    HypergridSpec,
    build_hypergrid,
    count_complete_trajectories,
    load_dag,
    save_dag,
    to_graded,
    validate_pointed_dag,
)
from .exact import flow_propagate, target_distribution
from .trainer import (
    TrainConfig,
    checkpoint_doc,
    evaluate_checkpoint,
    load_checkpoint,
    rows_to_csv,
    train_run,
)
from .verify import SUITES, run_suite


def cmd_train(args) -> int:
    with open(args.config) as f:
        config = TrainConfig.from_json(json.load(f))
    os.makedirs(args.out, exist_ok=True)
    result = train_run(config, log=print if args.verbose else None)
    with open(os.path.join(args.out, "metrics.csv"), "w") as f:
        f.write(result.metrics_csv())
    with open(os.path.join(args.out, "summary.json"), "w") as f:
        json.dump(result.summary, f, indent=1)
    with open(os.path.join(args.out, "checkpoint.json"), "w") as f:
        json.dump(checkpoint_doc(config.env, result.policy), f)
    print(f"wrote metrics.csv, summary.json, checkpoint.json to {args.out}")
    return 0


def cmd_eval(args) -> int:
    with open(args.checkpoint) as f:
        dag, rewards, _, policy = load_checkpoint(json.load(f))
    row = evaluate_checkpoint(policy, dag, rewards)
    print(json.dumps(row.to_json()))
    return 0


def cmd_verify(args) -> int:
    kwargs = {}
    if args.suite in ("prop1", "surrogate"):
        kwargs["policy_kind"] = args.policy
    result = run_suite(args.suite, seed=args.seed, instances=args.instances, **kwargs)
    for i, row in enumerate(result.rows):
        line = " ".join(f"{k}={v:.3e}" for k, v in row.items())
        print(f"[{result.name} {i:03d}] {line}")
    worst = result.worst()
    print("max discrepancy per identity:")
    for k, v in worst.items():
        print(f"  {k}: {v:.3e} (tolerance {result.tol_for(k):.0e})")
    if not result.ok:
        for i, k, v in result.failures():
            print(f"FAIL instance {i}: {k}={v:.3e} >= {result.tol_for(k):.0e}")
        return 2
    print("all identities within tolerance")
    return 0


def cmd_grid_info(args) -> int:
    spec = HypergridSpec(H=args.H, D=args.D, R0=args.R0)
    dag, rewards = build_hypergrid(spec)
    target = target_distribution(dag, rewards)
    vals = np.array(sorted(set(rewards.values.values())))
    info = {
        "H": spec.H, "D": spec.D, "R0": spec.R0,
        "n_states": dag.n_states,
        "n_edges": len(dag.edges),
        "n_terminating": len(dag.terminating),
        "n_trajectories": count_complete_trajectories(dag),
        "log_partition": rewards.log_partition(),
        "reward_levels": vals.tolist(),
        "max_target_mass": float(target.probs.max()),
    }
    print(json.dumps(info, indent=1))
    return 0


def cmd_convert_dag(args) -> int:
    dag = load_dag(getattr(args, "in"))
    report = validate_pointed_dag(dag)
    if not report.ok:
        print(f"invalid DAG: {report.error} (offender {report.offender!r})",
              file=sys.stderr)
        return 1
    save_dag(to_graded(dag), args.out)
    print(f"wrote graded DAG to {args.out}")
    return 0


def cmd_export_dist(args) -> int:
    with open(args.checkpoint) as f:
        dag, rewards, hspec, policy = load_checkpoint(json.load(f))
    marginal = flow_propagate(dag, policy)
    target = target_distribution(dag, rewards)
    doc = {
        "entries": {
            "pf_top": marginal.to_json(),
            "target": target.to_json(),
        },
    }
    if hspec is not None:
        doc["H"], doc["D"] = hspec.H, hspec.D
    with open(args.out, "w") as f:
        json.dump(doc, f)
    print(f"wrote distributions to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="flowvi",
        description="Train samplers over pointed DAGs with flow-balance and "
                    "variational objectives; verify their gradient identities "
                    "exactly on small instances.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run a training experiment from a config file")
    t.add_argument("--config", required=True, help="JSON experiment config")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="exact one-shot evaluation of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.set_defaults(fn=cmd_eval)

    v = sub.add_parser("verify", help="run an identity-verification suite")
    v.add_argument("--suite", required=True, choices=sorted(SUITES))
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--instances", type=int, default=20)
    v.add_argument("--policy", choices=["tabular", "mlp"], default="tabular",
                   help="policy parametrization for prop1/surrogate suites")
    v.set_defaults(fn=cmd_verify)

    g = sub.add_parser("grid-info", help="print hypergrid environment facts")
    g.add_argument("--H", type=int, required=True)
    g.add_argument("--D", type=int, required=True)
    g.add_argument("--R0", type=float, required=True)
    g.set_defaults(fn=cmd_grid_info)

    c = sub.add_parser("convert-dag", help="apply the graded canonicalization")
    c.add_argument("--in", required=True, dest="in")
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_convert_dag)

    x = sub.add_parser("export-dist", help="emit learned and target distributions")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(fn=cmd_export_dist)
    return p


def run_command(argv: list[str]) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (DagValidationError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
