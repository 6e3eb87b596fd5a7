"""CLI: `plots <in_dir> <out_dir>` renders the figure set from run outputs."""

from __future__ import annotations

import argparse
import sys

from .figures import MissingInputError, render_all


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="plots", description=__doc__)
    parser.add_argument("in_dir", help="run output directory (CSVs + dashboard/config echo)")
    parser.add_argument("out_dir", help="directory receiving figs/tier1 and figs/tier2")
    args = parser.parse_args(argv)
    try:
        manifest = render_all(args.in_dir, args.out_dir)
    except MissingInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for figure_id in sorted(manifest):
        print(f"{figure_id} -> {manifest[figure_id]['path']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
