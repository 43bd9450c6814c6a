"""The `plot` command: JSD curves and grid heatmaps from training outputs."""
from __future__ import annotations

import argparse
import sys

from .figures import render_grid_heatmap, render_jsd_curves
from .loader import load_grid_distributions, load_metrics_csv


def cmd_jsd(args) -> int:
    paths = args.runs.split(",")
    labels = args.labels.split(",") if args.labels else [f"run{i}" for i in
                                                         range(len(paths))]
    if len(labels) != len(paths):
        raise ValueError(f"{len(paths)} runs but {len(labels)} labels")
    curves = [load_metrics_csv(p, lab) for p, lab in zip(paths, labels)]
    render_jsd_curves(curves, args.out, title=args.title)
    print(f"wrote {args.out}")
    return 0


def cmd_grid(args) -> int:
    dists = []
    for spec in args.dists.split(","):
        dists.extend(load_grid_distributions(spec, args.H))
    render_grid_heatmap(dists, args.H, args.out)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="plot",
        description="Render JSD training curves and 2-D grid heatmaps from "
                    "flowvi metrics CSV / distribution JSON files.")
    sub = p.add_subparsers(dest="command", required=True)

    j = sub.add_parser("jsd", help="mean JSD curves with standard-error bands")
    j.add_argument("--runs", required=True,
                   help="comma-separated metrics CSV paths")
    j.add_argument("--labels", default=None,
                   help="comma-separated label per CSV; repeated labels "
                        "aggregate seeds into one banded curve")
    j.add_argument("--out", required=True, help="output image (png/svg/pdf)")
    j.add_argument("--title", default="JSD between learned and target marginals")
    j.set_defaults(fn=cmd_jsd)

    g = sub.add_parser("grid", help="side-by-side heatmaps of 2-D distributions")
    g.add_argument("--dists", required=True,
                   help="comma-separated distribution JSON specs; use "
                        "file.json:key to pick one entry of a multi-entry file")
    g.add_argument("--H", type=int, required=True, help="grid side length")
    g.add_argument("--out", required=True, help="output image (png/svg/pdf)")
    g.set_defaults(fn=cmd_grid)
    return p


def run_command(argv: list[str]) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
