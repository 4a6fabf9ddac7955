"""Versioned report files: one report.json plus flat CSV views.

The JSON file is the contract consumed by the plotting package; everything
in it is plain lists/dicts/scalars with sorted keys, so a rerun with the
same config and seed is byte-identical apart from the "timings" object.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

__all__ = ["REPORT_SCHEMA_VERSION", "report_write", "report_read"]

REPORT_SCHEMA_VERSION = 1


def _plain(obj):
    """Recursively convert numpy scalars/arrays for JSON serialization."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def _write_csv(path: Path, header: list[str], rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def report_write(report: dict, out_dir) -> Path:
    """Write report.json and CSV companions; returns the JSON path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = _plain(report)
    report.setdefault("schema_version", REPORT_SCHEMA_VERSION)

    path = out / "report.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")

    metrics = report.get("metrics", {})
    if metrics:
        _write_csv(out / "metrics.csv", ["metric", "value"],
                   sorted(metrics.items()))
    sev = report.get("sev")
    if sev:
        _write_csv(out / "sev_epochs.csv",
                   ["epochs", "sev_mean", "sev_ci95", "train_loss_mean",
                    "gram_condition"],
                   [(r["epochs"], r["sev_mean"], r["sev_ci95"],
                     r["train_loss_mean"], sev["gram_condition"])
                    for r in sev["epochs_sweep"]])
        _write_csv(out / "sev_realizations.csv",
                   ["members", "sev_mean", "sev_ci95", "gram_condition"],
                   [(r["members"], r["sev_mean"], r["sev_ci95"],
                     sev["gram_condition"])
                    for r in sev["realizations_sweep"]])
    band = report.get("band")
    if band:
        header = ["x"]
        cols = [band["grid_x"]]
        for panel in band["panels"]:
            header += [f"{panel['label']}_mean", f"{panel['label']}_sigma"]
            cols += [panel["mean"], panel["sigma"]]
        _write_csv(out / "band.csv", header, zip(*cols))
        _write_csv(out / "train_points.csv", ["x", "y"],
                   zip(band["train_x"], band["train_y"]))
    vmsp = report.get("vmsp")
    if vmsp:
        rows = []
        for method, groups in sorted(vmsp.items()):
            for group, samples in sorted(groups.items()):
                rows += [(method, group, s) for s in samples]
        _write_csv(out / "vmsp.csv", ["method", "group", "value"], rows)
    intervals = report.get("intervals")
    if intervals:
        _write_csv(out / "intervals.csv",
                   ["method", "level", "coverage", "mean_width"],
                   [(r["method"], r["level"], r["coverage"], r["mean_width"])
                    for r in intervals["rows"]])
    return path


def report_read(path) -> dict:
    report = json.loads(Path(path).read_text(encoding="utf-8"))
    version = report.get("schema_version")
    if version != REPORT_SCHEMA_VERSION:
        raise ValueError(f"unsupported report schema version {version!r}")
    return report
