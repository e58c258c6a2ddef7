"""Run artifacts: metrics CSV, fairness and histogram CSVs, manifests.

Metrics CSV column order is fixed:

    round, strategy, seed, eta, global_train_loss, test_accuracy, jain,
    sigma_t, selected_ids, model_msgs, extra_msgs, wall_ms

Non-eval rounds leave test_accuracy and jain empty. selected_ids is
semicolon-joined ascending. wall_ms is always left empty so that reruns with
identical seeds produce byte-identical files; wall-clock timing lives in the
run manifest instead. An aborted run keeps its partial rows and appends a
marker row whose round column is "abort" and whose selected_ids column
carries the abort reason.
"""

from __future__ import annotations

import csv
import json
import time
from pathlib import Path

import numpy as np

from .engine import RoundRecord
from .metrics import FairnessReport

METRICS_COLUMNS = [
    "round",
    "strategy",
    "seed",
    "eta",
    "global_train_loss",
    "test_accuracy",
    "jain",
    "sigma_t",
    "selected_ids",
    "model_msgs",
    "extra_msgs",
    "wall_ms",
]

ABORT_MARKER = "abort"


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def metrics_row(record: RoundRecord, strategy: str, seed: int) -> list[str]:
    return [
        str(record.round_index),
        strategy,
        str(seed),
        _fmt(record.eta),
        _fmt(record.global_train_loss),
        _fmt(record.test_accuracy),
        _fmt(record.jain),
        _fmt(record.sigma),
        ";".join(str(k) for k in record.selected),
        str(record.model_msgs),
        str(record.extra_msgs),
        "",
    ]


def write_metrics_csv(path, records: list[RoundRecord], strategy: str, seed: int, abort_reason: str | None = None) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRICS_COLUMNS)
        for record in records:
            writer.writerow(metrics_row(record, strategy, seed))
        if abort_reason is not None:
            row = [ABORT_MARKER, strategy, str(seed)] + [""] * 5
            row += [abort_reason, "", "", ""]
            writer.writerow(row)


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def write_fairness_csv(path, report: FairnessReport) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["round", "jain", "client_losses"])
        writer.writerow(
            [str(report.round_index), _fmt(report.jain), ";".join(repr(v) for v in report.losses.tolist())]
        )


def read_fairness_csv(path) -> FairnessReport:
    with open(path, newline="") as f:
        row = list(csv.DictReader(f))[0]
    losses = np.array([float(v) for v in row["client_losses"].split(";")])
    return FairnessReport(round_index=int(row["round"]), jain=float(row["jain"]), losses=losses)


def write_histogram_csv(path, edges: np.ndarray, counts: np.ndarray) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["bin_lo", "bin_hi", "count"])
        if len(edges) == 2 and edges[0] == edges[1]:
            writer.writerow([_fmt(float(edges[0])), _fmt(float(edges[1])), str(int(counts[0]))])
            return
        for i, count in enumerate(counts):
            writer.writerow([_fmt(float(edges[i])), _fmt(float(edges[i + 1])), str(int(count))])


def read_histogram_csv(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    lows = [float(r["bin_lo"]) for r in rows]
    highs = [float(r["bin_hi"]) for r in rows]
    counts = np.array([int(r["count"]) for r in rows], dtype=np.int64)
    edges = np.array(lows + [highs[-1]])
    return edges, counts


def write_bandit_debug_csv(path, trace: list[dict]) -> None:
    """Per-round dump of the discounted-UCB internals for inspection."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["round", "client", "discounted_loss", "discounted_count", "sigma_t", "score"])
        for row in trace:
            for k in range(len(row["scores"])):
                writer.writerow(
                    [
                        str(row["round"]),
                        str(k),
                        _fmt(float(row["discounted_loss"][k])),
                        _fmt(float(row["discounted_count"][k])),
                        _fmt(float(row["max_step_loss_std"])),
                        _fmt(float(row["scores"][k])),
                    ]
                )


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

ARTIFACT_VERSION = "0.1.0"


def write_manifest(run_dir: Path, resolved_config: str, strategy: str, seed: int, m: int) -> Path:
    """Written before training starts; finalize_manifest adds the wall clock."""
    manifest = {
        "artifact_version": ARTIFACT_VERSION,
        "strategy": strategy,
        "seed": seed,
        "m": m,
        "config": resolved_config,
        "outputs": {
            "metrics": "metrics.csv",
            "fairness": "fairness.csv",
            "histogram": "histogram.csv",
        },
        "started_unix": time.time(),
        "wall_clock_sec": None,
        "status": "running",
    }
    path = run_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def finalize_manifest(path: Path, status: str) -> None:
    manifest = json.loads(Path(path).read_text())
    manifest["wall_clock_sec"] = time.time() - manifest["started_unix"]
    manifest["status"] = status
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True))


def read_manifest(run_dir: Path) -> dict:
    return json.loads((Path(run_dir) / "manifest.json").read_text())


# ---------------------------------------------------------------------------
# Sweep summaries
# ---------------------------------------------------------------------------

SUMMARY_COLUMNS = [
    "strategy",
    "m",
    "num_runs",
    "final_loss_mean",
    "final_jain_mean",
    "rounds_to_threshold",
    "msgs_per_round_mean",
]

NOT_REACHED = "not reached"


def summarize_runs(run_dirs: list[Path], threshold: float | None = None) -> list[dict]:
    """Aggregate finished runs into one row per (strategy, m).

    ``rounds_to_threshold`` is the first round whose seed-mean global loss
    drops to ``threshold`` or below; when no threshold is given, the largest
    group-mean final loss is used, so at least one group reaches it.
    """
    groups: dict[tuple[str, int], list[Path]] = {}
    for run_dir in map(Path, run_dirs):
        manifest = read_manifest(run_dir)
        groups.setdefault((manifest["strategy"], manifest["m"]), []).append(run_dir)

    curves: dict[tuple[str, int], np.ndarray] = {}
    jains: dict[tuple[str, int], float] = {}
    msgs: dict[tuple[str, int], float] = {}
    for key, dirs in groups.items():
        losses, finals, per_round = [], [], []
        for run_dir in dirs:
            rows = [r for r in read_metrics_csv(run_dir / "metrics.csv") if r["round"] != ABORT_MARKER]
            losses.append([float(r["global_train_loss"]) for r in rows])
            per_round.append(
                float(np.mean([int(r["model_msgs"]) + int(r["extra_msgs"]) for r in rows]))
            )
            finals.append(read_fairness_csv(run_dir / "fairness.csv").jain)
        curves[key] = np.mean(np.array(losses), axis=0)
        jains[key] = float(np.mean(finals))
        msgs[key] = float(np.mean(per_round))

    if threshold is None:
        threshold = max(float(curve[-1]) for curve in curves.values())

    rows = []
    for key in sorted(groups, key=lambda item: (item[1], item[0])):
        curve = curves[key]
        reached = np.flatnonzero(curve <= threshold)
        rows.append(
            {
                "strategy": key[0],
                "m": key[1],
                "num_runs": len(groups[key]),
                "final_loss_mean": float(curve[-1]),
                "final_jain_mean": jains[key],
                "rounds_to_threshold": int(reached[0]) + 1 if reached.size else NOT_REACHED,
                "msgs_per_round_mean": msgs[key],
            }
        )
    return rows


def write_summary_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(SUMMARY_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row[c]) if isinstance(row[c], float) else str(row[c]) for c in SUMMARY_COLUMNS])


def format_summary_text(rows: list[dict]) -> str:
    headers = SUMMARY_COLUMNS
    table = [headers] + [
        [
            row["strategy"],
            str(row["m"]),
            str(row["num_runs"]),
            f"{row['final_loss_mean']:.6f}",
            f"{row['final_jain_mean']:.4f}",
            str(row["rounds_to_threshold"]),
            f"{row['msgs_per_round_mean']:.2f}",
        ]
        for row in rows
    ]
    widths = [max(len(r[i]) for r in table) for i in range(len(headers))]
    lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(r)).rstrip() for r in table]
    return "\n".join(lines)
