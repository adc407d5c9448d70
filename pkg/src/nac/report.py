"""Summaries across runs: layer widths, final metrics, running statistic series."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .arch import NetworkSpec, deserialize
from .fmstat import write_csv

WIDTH_COLUMNS = ("stage", "layer", "runs", "mean_width", "std_width")
COMPARISON_COLUMNS = ("network", "epochs", "final_train_loss", "test_loss", "test_error", "test_accuracy")
SERIES_COLUMNS = ("run", "iteration", "step", "block_id", "running_l2")


def width_table(specs: list[NetworkSpec]) -> list[dict]:
    """Mean and population std of layer width at each (stage, layer) depth across specs.

    A spec with a shallower stage simply does not contribute to deeper rows.
    """
    rows = []
    stages = max(len(s.stages) for s in specs)
    for si in range(stages):
        depth = max(s.stages[si].depth for s in specs if si < len(s.stages))
        for li in range(depth):
            widths = [s.stages[si].layers[li].width for s in specs if si < len(s.stages) and li < s.stages[si].depth]
            rows.append({"stage": si, "layer": li, "runs": len(widths),
                         "mean_width": f"{np.mean(widths):.4f}", "std_width": f"{np.std(widths):.4f}"})
    return rows


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def comparison_row(name: str, metrics: list[dict]) -> dict:
    if not metrics:
        raise ValueError(f"{name}: metrics file has no rows")
    last = metrics[-1]
    err = last.get("test_error", "")
    return {
        "network": name,
        "epochs": last["epoch"],
        "final_train_loss": last["train_loss"],
        "test_loss": last.get("test_loss", ""),
        "test_error": err,
        "test_accuracy": "" if err in ("", None) else f"{1.0 - float(err):.6f}",
    }


def build_report(runs: list[Path], metrics: list[tuple[str, Path]], out: Path) -> dict[str, list[dict]]:
    if not runs and not metrics:
        raise ValueError("nothing to report: pass --runs and/or --metrics")
    out.mkdir(parents=True, exist_ok=True)
    result: dict[str, list[dict]] = {}
    if runs:
        specs = [deserialize((r / "architecture.json").read_text()) for r in runs]
        result["widths"] = width_table(specs)
        write_csv(out / "widths.csv", WIDTH_COLUMNS, result["widths"])
        series = []
        for r in runs:
            hist = r / "history.csv"
            if hist.exists():
                series += [{"run": r.name, **row} for row in read_csv(hist)]
        result["series"] = series
        write_csv(out / "running_stats.csv", SERIES_COLUMNS, series)
    if metrics:
        result["comparison"] = [comparison_row(name, read_csv(p)) for name, p in metrics]
        write_csv(out / "comparison.csv", COMPARISON_COLUMNS, result["comparison"])
    return result


def format_table(rows: list[dict], columns) -> str:
    cells = [[str(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    line = lambda vals: "  ".join(v.ljust(w) for v, w in zip(vals, widths))  # noqa: E731
    return "\n".join([line(list(columns))] + [line(r) for r in cells])
