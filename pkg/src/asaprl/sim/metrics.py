"""Episode-level driving metrics."""

from __future__ import annotations

import csv
from pathlib import Path

METRIC_FIELDS = ("scenario", "seed", "iteration", "reward", "success", "completion", "collision", "passed_cars")


def episode_metrics(history: list[dict]) -> dict:
    """Summarize one finished episode from its per-step log records."""
    if not history:
        return {"reward": 0.0, "success": False, "completion": 0.0, "collision": False, "passed_cars": 0}
    last = history[-1]
    cause = last["cause"]
    return {
        "reward": float(sum(rec["reward"] for rec in history)),
        "success": cause == "success",
        "completion": float(min(max(last["completion"], 0.0), 1.0)),
        "collision": cause in ("crash", "off-road"),
        "passed_cars": int(last["passed"]),
    }


def write_metric_rows(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in METRIC_FIELDS})
