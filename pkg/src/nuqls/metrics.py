"""Evaluation quantities: error, likelihood, calibration, ranking, intervals.

Regression calibration uses central Gaussian intervals on a fixed symmetric
coverage grid; classification calibration is the standard top-label binned
form.  All functions are pure and permutation-invariant in the sample axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

__all__ = [
    "UqReport",
    "VMSP_GROUPS",
    "DEFAULT_COVERAGE_LEVELS",
    "rmse",
    "gaussian_nll_metric",
    "ece_regression",
    "ece_classification",
    "vmsp",
    "vmsp_samples",
    "auc_roc",
    "interval_coverage",
    "sample_skew",
    "median",
]

VMSP_GROUPS = ("id_correct", "id_incorrect", "ood")

UQ_REPORT_SCHEMA_VERSION = 1

# symmetric grid 0.05, 0.10, ..., 0.95
DEFAULT_COVERAGE_LEVELS = tuple(np.round(np.arange(1, 20) * 0.05, 2))

VARIANCE_FLOOR = 1e-12


def _flat(*arrays):
    out = [np.asarray(a, dtype=np.float64).ravel() for a in arrays]
    n = out[0].size
    if any(a.size != n for a in out):
        raise ValueError("inputs must have equal lengths")
    return out


def rmse(pred, target) -> float:
    pred, target = _flat(pred, target)
    if pred.size == 0:
        raise ValueError("rmse needs at least one sample")
    return float(np.sqrt(np.mean((pred - target) ** 2)))


def gaussian_nll_metric(mean, variance, target) -> float:
    """Average Gaussian negative log likelihood with a 1e-12 variance floor."""
    mean, variance, target = _flat(mean, variance, target)
    s2 = np.maximum(variance, VARIANCE_FLOOR)
    return float(np.mean(0.5 * ((target - mean) ** 2 / s2 + np.log(s2)
                                + np.log(2.0 * np.pi))))


def ece_regression(mean, variance, target,
                   levels=DEFAULT_COVERAGE_LEVELS) -> float:
    """Mean |empirical central-interval coverage - nominal level| over levels."""
    levels = np.asarray(levels, dtype=np.float64)
    if levels.size == 0:
        raise ValueError("need at least one coverage level")
    if np.any((levels <= 0) | (levels >= 1)):
        raise ValueError("levels must lie in (0, 1)")
    mean, variance, target = _flat(mean, variance, target)
    sd = np.sqrt(np.maximum(variance, 0.0))
    dev = np.abs(target - mean)
    z = norm.ppf(0.5 * (1.0 + levels))
    inside = dev[None, :] <= z[:, None] * sd[None, :]
    coverage = inside.mean(axis=1)
    return float(np.mean(np.abs(coverage - levels)))


def ece_classification(probs, labels, bins: int = 10) -> float:
    """Top-label expected calibration error with equal-width bins on [0, 1]."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2:
        raise ValueError("probs must be (n, c)")
    if np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6) or probs.min() < -1e-12:
        raise ValueError("rows of probs must be probability vectors")
    n = probs.shape[0]
    conf = probs.max(axis=1)
    pred = probs.argmax(axis=1)
    correct = (pred == labels).astype(np.float64)
    idx = np.minimum((conf * bins).astype(int), bins - 1)
    ece = 0.0
    for b in range(bins):
        mask = idx == b
        if not mask.any():
            continue
        ece += mask.sum() / n * abs(correct[mask].mean() - conf[mask].mean())
    return float(ece)


def vmsp(member_probs, mean_probs) -> float:
    """Variance across members of the class the mean predictor selects.

    Ties in the argmax go to the lowest class index; the sample variance is
    unbiased (divisor S-1).
    """
    member_probs = np.asarray(member_probs, dtype=np.float64)
    mean_probs = np.asarray(mean_probs, dtype=np.float64)
    if member_probs.ndim != 2 or member_probs.shape[0] < 2:
        raise ValueError("need (S >= 2, c) member probabilities")
    c_hat = int(np.argmax(mean_probs))
    return float(np.var(member_probs[:, c_hat], ddof=1))


def vmsp_samples(member_probs, mean_probs) -> np.ndarray:
    """Per-test-point VMSP for stacked member probabilities (S, m, c)."""
    member_probs = np.asarray(member_probs, dtype=np.float64)
    if member_probs.ndim != 3 or member_probs.shape[0] < 2:
        raise ValueError("need (S >= 2, m, c) member probabilities")
    c_hat = np.argmax(mean_probs, axis=1)
    picked = member_probs[:, np.arange(member_probs.shape[1]), c_hat]
    return np.var(picked, axis=0, ddof=1)


def auc_roc(scores, is_positive) -> float:
    """Rank-based (Mann-Whitney) AUC; ties contribute one half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    pos = np.asarray(is_positive, dtype=bool).ravel()
    if scores.size != pos.size:
        raise ValueError("inputs must have equal lengths")
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("both classes must be present")
    from scipy.stats import rankdata

    ranks = rankdata(scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def interval_coverage(mean, variance, target, level: float):
    """(coverage rate, mean width) of central Gaussian intervals."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    mean, variance, target = _flat(mean, variance, target)
    sd = np.sqrt(np.maximum(variance, 0.0))
    z = norm.ppf(0.5 * (1.0 + level))
    coverage = float(np.mean(np.abs(target - mean) <= z * sd))
    width = float(np.mean(2.0 * z * sd))
    return coverage, width


def sample_skew(xs) -> float:
    """Fisher-Pearson g1 with population moments (no bias correction)."""
    xs = np.asarray(xs, dtype=np.float64).ravel()
    if xs.size < 3:
        raise ValueError("skew needs at least 3 samples")
    d = xs - xs.mean()
    m2 = np.mean(d * d)
    if m2 < 1e-300:
        return 0.0
    return float(np.mean(d ** 3) / m2 ** 1.5)


def median(xs) -> float:
    xs = np.asarray(xs, dtype=np.float64).ravel()
    if xs.size == 0:
        raise ValueError("median of empty sample")
    return float(np.median(xs))


@dataclass
class UqReport:
    """Named scalar metrics plus per-group VMSP samples and run metadata."""

    metrics: dict[str, float] = field(default_factory=dict)
    vmsp_groups: dict[str, list[float]] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def add(self, name: str, value: float) -> None:
        value = float(value)
        if not np.isfinite(value):
            raise ValueError(f"metric {name!r} is not finite: {value}")
        self.metrics[name] = value

    def set_group(self, group: str, samples) -> None:
        if group not in VMSP_GROUPS:
            raise ValueError(f"unknown VMSP group {group!r}; "
                             f"expected one of {VMSP_GROUPS}")
        samples = [float(v) for v in np.asarray(samples, dtype=np.float64).ravel()]
        if not all(np.isfinite(samples)):
            raise ValueError(f"group {group!r} holds non-finite samples")
        self.vmsp_groups[group] = samples

    def to_dict(self) -> dict:
        return {"schema_version": UQ_REPORT_SCHEMA_VERSION,
                "metrics": dict(self.metrics),
                "vmsp_groups": {k: list(v) for k, v in self.vmsp_groups.items()},
                "metadata": dict(self.metadata)}

    @classmethod
    def from_dict(cls, d: dict) -> "UqReport":
        version = d.get("schema_version", UQ_REPORT_SCHEMA_VERSION)
        if version != UQ_REPORT_SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema version {version!r}")
        return cls(metrics=dict(d.get("metrics", {})),
                   vmsp_groups={k: list(v) for k, v in d.get("vmsp_groups", {}).items()},
                   metadata=dict(d.get("metadata", {})))

    def to_json(self) -> str:
        import json

        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "UqReport":
        import json

        return cls.from_dict(json.loads(text))

    def write_csv(self, path) -> None:
        """Flat CSV view: one row per metric and per VMSP sample."""
        from pathlib import Path

        lines = ["field,group,value"]
        for name in sorted(self.metrics):
            lines.append(f"{name},,{self.metrics[name]!r}")
        for group in sorted(self.vmsp_groups):
            for value in self.vmsp_groups[group]:
                lines.append(f"vmsp,{group},{value!r}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
