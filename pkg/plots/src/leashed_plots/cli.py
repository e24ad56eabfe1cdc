"""Figure CLI: one subcommand per figure kind, CSV paths in, image out."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional

from .render import FigureSpec, render
from .schemas import SchemaError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="leashed-plot",
        description="Render benchmark figures from leashed CSV telemetry",
    )
    sub = parser.add_subparsers(dest="kind", required=True)

    box = sub.add_parser("convergence-box", help="time-to-threshold box plot per setting")
    box.add_argument("--summary", required=True)
    box.add_argument("--epsilon", type=float, default=None,
                     help="threshold to box (default: smallest present)")

    prog = sub.add_parser("progress", help="loss-over-time training curves")
    prog.add_argument("--progress", required=True)
    prog.add_argument("--summary", required=True)

    stale = sub.add_parser("staleness", help="staleness distribution over time")
    stale.add_argument("--updates", required=True)
    stale.add_argument("--window-ms", type=float, default=250.0)

    mem = sub.add_parser("memory", help="live payload memory over time")
    mem.add_argument("--memory", required=True)

    dynp = sub.add_parser("dynamics", help="retry-loop occupancy model trajectories")
    dynp.add_argument("--dynamics", required=True)
    dynp.add_argument("--sim", default=None)

    for p in (box, prog, stale, mem, dynp):
        p.add_argument("--out", required=True, help="output image path")
        p.add_argument("--title", default=None)
    return parser


def _spec_from_args(args: argparse.Namespace) -> FigureSpec:
    kind = args.kind.replace("-", "_")
    return FigureSpec(
        kind=kind,
        out_path=Path(args.out),
        summary=Path(args.summary) if getattr(args, "summary", None) else None,
        progress=Path(args.progress) if getattr(args, "progress", None) else None,
        updates=Path(args.updates) if getattr(args, "updates", None) else None,
        memory=Path(args.memory) if getattr(args, "memory", None) else None,
        dynamics=Path(args.dynamics) if getattr(args, "dynamics", None) else None,
        sim=Path(args.sim) if getattr(args, "sim", None) else None,
        epsilon=getattr(args, "epsilon", None),
        window_ms=getattr(args, "window_ms", 250.0),
        title=args.title,
    )


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = render(_spec_from_args(args))
    except (SchemaError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {result.out_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
