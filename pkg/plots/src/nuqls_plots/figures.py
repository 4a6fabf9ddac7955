"""Render figures from uncertainty-experiment report files.

Three figure kinds, one per report payload: an uncertainty band over a 1-D
grid, the two variance-convergence sweeps, and violin plots of per-group
predictive-variance samples.  Scripts are read-only over reports and fully
deterministic, so re-rendering an unchanged report reproduces the file.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

logger = logging.getLogger(__name__)

__all__ = ["PlotJob", "plot_band", "plot_sev", "plot_violin", "load_report"]

SUPPORTED_SCHEMA_VERSIONS = (1,)

GROUP_LABELS = {"id_correct": "ID correct", "id_incorrect": "ID incorrect",
                "ood": "OoD"}

STYLE = {
    "figure.dpi": 100,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "svg.hashsalt": "nuqls-plots",
}


@dataclass
class PlotJob:
    """What to render: input report, figure kind, output image, styling."""

    report_path: str
    kind: str
    out_path: str
    dpi: int = 150
    title: str | None = None
    band_sigmas: float = 3.0

    def __post_init__(self):
        if self.kind not in ("band", "sev", "violin"):
            raise ValueError(f"unknown figure kind {self.kind!r}")


def load_report(path) -> dict:
    report = json.loads(Path(path).read_text(encoding="utf-8"))
    version = report.get("schema_version")
    if version not in SUPPORTED_SCHEMA_VERSIONS:
        raise ValueError(f"unsupported report schema version {version!r}")
    return report


def _require(report: dict, *names: str) -> list:
    missing = [n for n in names if n not in report]
    if missing:
        raise ValueError(f"report is missing field(s): {', '.join(missing)}")
    return [report[n] for n in names]


def _save(fig, job: PlotJob):
    out = Path(job.out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    # strip volatile PNG metadata so identical inputs give identical bytes
    metadata = {"Software": None} if out.suffix == ".png" else None
    fig.savefig(out, dpi=job.dpi, metadata=metadata, bbox_inches="tight")
    logger.info("wrote %s", out)


def plot_band(job: PlotJob):
    """Mean curve with a +-k sigma band per method, plus training points."""
    report = load_report(job.report_path)
    (band,) = _require(report, "band")
    missing = [n for n in ("grid_x", "panels", "train_x", "train_y")
               if n not in band]
    if missing:
        raise ValueError(f"band payload is missing field(s): {', '.join(missing)}")
    x = np.asarray(band["grid_x"])
    panels = band["panels"]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(panels), figsize=(4.2 * len(panels), 3.4),
                                 sharex=True, sharey=True, squeeze=False)
        for ax, panel in zip(axes[0], panels):
            mean = np.asarray(panel["mean"])
            sd = np.asarray(panel["sigma"])
            k = job.band_sigmas
            ax.fill_between(x, mean - k * sd, mean + k * sd, color="tab:green",
                            alpha=0.35, label=f"±{k:g}σ")
            ax.plot(x, mean, color="tab:blue", lw=1.5, label="mean")
            ax.scatter(band["train_x"], band["train_y"], s=14, color="tab:red",
                       zorder=3, label="train")
            ax.set_title(panel["label"])
            ax.set_xlabel("x")
        axes[0, 0].set_ylabel("y")
        axes[0, 0].legend(loc="upper left", fontsize=8)
        if job.title:
            fig.suptitle(job.title)
        _save(fig, job)
    return fig


def plot_sev(job: PlotJob):
    """Two stacked panels: variance error against epochs and ensemble size."""
    report = load_report(job.report_path)
    (sev,) = _require(report, "sev")
    missing = [n for n in ("epochs_sweep", "realizations_sweep") if n not in sev]
    if missing:
        raise ValueError(f"sev payload is missing field(s): {', '.join(missing)}")
    with plt.rc_context(STYLE):
        fig, (top, bottom) = plt.subplots(2, 1, figsize=(4.6, 5.6))
        ep = sev["epochs_sweep"]
        xs = [r["epochs"] for r in ep]
        top.errorbar(xs, [r["sev_mean"] for r in ep],
                     yerr=[r["sev_ci95"] for r in ep],
                     marker="o", color="tab:blue", capsize=3, label="SEV")
        top.set_xscale("log")
        top.set_yscale("log")
        top.set_xlabel("training epochs")
        top.set_ylabel("SEV")
        if all("train_loss_mean" in r for r in ep):
            twin = top.twinx()
            twin.plot(xs, [r["train_loss_mean"] for r in ep], marker="^",
                      color="tab:orange", lw=1.0, label="train loss")
            twin.set_yscale("log")
            twin.set_ylabel("member train loss")
            twin.grid(False)
        rs = sev["realizations_sweep"]
        bottom.errorbar([r["members"] for r in rs], [r["sev_mean"] for r in rs],
                        yerr=[r["sev_ci95"] for r in rs],
                        marker="o", color="tab:blue", capsize=3)
        bottom.set_xscale("log")
        bottom.set_yscale("log")
        bottom.set_xlabel("ensemble members")
        bottom.set_ylabel("SEV")
        cond = sev.get("gram_condition")
        title = job.title or "variance convergence"
        if cond is not None:
            title += f" ({cond:.2e})"
        fig.suptitle(title)
        fig.tight_layout()
        _save(fig, job)
    return fig


VARIANCE_FLOOR = 1e-20


def plot_violin(job: PlotJob):
    """Violin per (method, group) of predictive-variance samples.

    Violin width depicts density and the median is marked.  Samples are
    rendered on a log10 scale because groups routinely differ by many
    decades; empty or zero-spread groups are omitted with a warning.
    """
    report = load_report(job.report_path)
    (vmsp,) = _require(report, "vmsp")
    methods = sorted(vmsp)
    if not methods:
        raise ValueError("vmsp payload holds no methods")
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(methods), figsize=(3.6 * len(methods), 3.4),
                                 sharey=True, squeeze=False)
        for ax, method in zip(axes[0], methods):
            groups = vmsp[method]
            kept, labels = [], []
            for group in ("id_correct", "id_incorrect", "ood"):
                samples = np.asarray(groups.get(group, []), dtype=float)
                if samples.size == 0:
                    logger.warning("%s: group %r is empty, omitting its violin",
                                   method, group)
                    continue
                logs = np.log10(np.maximum(samples, VARIANCE_FLOOR))
                if samples.size < 2 or np.ptp(logs) == 0.0:
                    logger.warning("%s: group %r has no spread, omitting its violin",
                                   method, group)
                    continue
                kept.append(logs)
                labels.append(GROUP_LABELS.get(group, group))
            if kept:
                parts = ax.violinplot(kept, showmedians=True, showextrema=False)
                for body in parts["bodies"]:
                    body.set_alpha(0.6)
                ax.set_xticks(np.arange(1, len(kept) + 1))
                ax.set_xticklabels(labels, fontsize=8)
            ax.set_title(method)
        axes[0, 0].set_ylabel("log10 predictive variance of selected class")
        if job.title:
            fig.suptitle(job.title)
        _save(fig, job)
    return fig


RENDERERS = {"band": plot_band, "sev": plot_sev, "violin": plot_violin}
