#!/usr/bin/env python3
"""Reproduce the synthetic logistic-regression comparisons.

Sweeps the four selection strategies over the three active-set sizes
(presets synthetic_fig1a/b/c), then prints a combined fairness/convergence
summary (one row per strategy and m). The per-m run directories also hold
the fig-style CSVs: metrics.csv (loss curves), histogram.csv (final
per-client loss histograms, the m=1 runs being the histogram scenario).
"""

import argparse
import sys
from pathlib import Path

from fedsel import cli, runio


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/synthetic", help="output root (default: runs/synthetic)")
    parser.add_argument("--seeds", default="1,2,3", help="comma-separated seeds (default: 1,2,3)")
    parser.add_argument(
        "--strategies", default="rand,pow-d,rpow-d,ucb-cs", help="strategies to sweep"
    )
    args = parser.parse_args()

    out_root = Path(args.out)
    run_dirs: list[Path] = []
    for preset in ("synthetic_fig1a", "synthetic_fig1b", "synthetic_fig1c"):
        out_dir = out_root / preset
        rc = cli.main(
            [
                "sweep",
                "--config", preset,
                "--strategies", args.strategies,
                "--seeds", args.seeds,
                "--out", str(out_dir),
            ]
        )
        if rc != 0:
            return rc
        run_dirs.extend(p for p in sorted(out_dir.iterdir()) if p.is_dir())

    rows = runio.summarize_runs(run_dirs)
    runio.write_summary_csv(out_root / "summary.csv", rows)
    print("\ncombined summary (all m):")
    print(runio.format_summary_text(rows))
    print(f"\nwritten to {out_root / 'summary.csv'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
