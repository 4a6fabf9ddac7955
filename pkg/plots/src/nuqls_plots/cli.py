"""Figure rendering entry point: ``plot <kind> --in report.json --out fig.png``."""

from __future__ import annotations

import argparse
import logging
import sys

import matplotlib.pyplot as plt

from .figures import RENDERERS, PlotJob


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="plot", description="Render figures from experiment reports")
    parser.add_argument("kind", choices=sorted(RENDERERS),
                        help="figure kind to render")
    parser.add_argument("--in", dest="report", required=True,
                        help="report.json produced by an experiment run")
    parser.add_argument("--out", required=True, help="output image path")
    parser.add_argument("--dpi", type=int, default=150)
    parser.add_argument("--title", default=None)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s: %(message)s")
    job = PlotJob(report_path=args.report, kind=args.kind, out_path=args.out,
                  dpi=args.dpi, title=args.title)
    try:
        fig = RENDERERS[args.kind](job)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    plt.close(fig)
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
