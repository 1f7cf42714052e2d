"""CLI: immuplot render --csv results.csv --kind trajectory [filters] --out fig.png"""

from __future__ import annotations

import argparse
import sys

from .render import KINDS, EmptySelection, PlotSpec, SchemaMismatch, render


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="immuplot", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("render", help="render one figure from a results csv")
    p.add_argument("--csv", required=True)
    p.add_argument("--kind", choices=KINDS, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", default=None)
    p.add_argument("--attack", default=None)
    p.add_argument("--metric", default=None)
    p.add_argument("--concept", default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = PlotSpec(csv=args.csv, kind=args.kind, out=args.out, method=args.method,
                        attack=args.attack, metric=args.metric, concept=args.concept)
        render(spec)
    except (SchemaMismatch, EmptySelection, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
