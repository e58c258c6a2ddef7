#!/usr/bin/env python3
"""Reproduce the FMNIST MLP comparisons (mild and high label skew).

Requires the four FMNIST IDX files (plain or .gz); point --data-dir at the
directory holding them. Runs the fmnist_fig3a (alpha=2) and fmnist_fig3b
(alpha=0.3) sweeps. The full 200-round sweeps take a few CPU-hours; pass
--presets fmnist_fig3b to run one scenario.
"""

import argparse
import sys
import tempfile
from pathlib import Path

from fedsel import cli
from fedsel.config import load_config, render_config

FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def resolve(data_dir: Path) -> dict[str, Path]:
    out = {}
    for key, stem in FILES.items():
        for candidate in (data_dir / f"{stem}.gz", data_dir / stem):
            if candidate.is_file():
                out[key] = candidate
                break
        else:
            raise SystemExit(f"missing {stem}[.gz] under {data_dir}")
    return out


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--data-dir", default="data/fmnist", help="directory with the IDX files")
    parser.add_argument("--out", default="runs/fmnist", help="output root")
    parser.add_argument("--seeds", default="1,2")
    parser.add_argument("--strategies", default="rand,pow-d,rpow-d,ucb-cs")
    parser.add_argument("--presets", default="fmnist_fig3a,fmnist_fig3b")
    args = parser.parse_args()

    paths = resolve(Path(args.data_dir))
    for preset in args.presets.split(","):
        cfg = load_config(preset.strip())
        cfg.dataset.train_images = str(paths["train_images"])
        cfg.dataset.train_labels = str(paths["train_labels"])
        cfg.dataset.test_images = str(paths["test_images"])
        cfg.dataset.test_labels = str(paths["test_labels"])
        with tempfile.NamedTemporaryFile("w", suffix=".cfg", delete=False) as tmp:
            tmp.write(render_config(cfg))
            cfg_path = tmp.name
        rc = cli.main(
            [
                "sweep",
                "--config", cfg_path,
                "--strategies", args.strategies,
                "--seeds", args.seeds,
                "--out", str(Path(args.out) / preset.strip()),
            ]
        )
        if rc != 0:
            return rc
    return 0


if __name__ == "__main__":
    sys.exit(main())
