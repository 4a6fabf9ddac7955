"""Ternary search and post-hoc calibration of the perturbation scale.

Predictive variance of a linearized ensemble scales exactly with the square
of the initialization scale, so the scale can be re-fit on a validation set
after training by a one-dimensional search on the regression calibration
error, which is unimodal in that scale.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .linearize import LinearizedModel, NuqlsEnsemble, ensemble_predict, ensemble_stats
from .metrics import DEFAULT_COVERAGE_LEVELS, ece_regression

logger = logging.getLogger(__name__)

__all__ = ["TernaryConfig", "ternary_search", "tune_gamma"]

BRACKET_GRID = 25


@dataclass(frozen=True)
class TernaryConfig:
    left: float = 1e-3
    right: float = 10.0
    tolerance: float = 1e-4
    max_iters: int = 100

    def __post_init__(self):
        if not self.left < self.right:
            raise ValueError("need left < right")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")


def ternary_search(f, cfg: TernaryConfig) -> float:
    """Minimize a unimodal function on [left, right] by interval thirds.

    Stops when the interval shrinks below the tolerance or the iteration cap
    is hit, and returns the interval midpoint; at most 2 * max_iters
    evaluations.
    """
    lo, hi = cfg.left, cfg.right
    for _ in range(cfg.max_iters):
        if abs(hi - lo) < cfg.tolerance:
            break
        third = (hi - lo) / 3.0
        l3, r3 = lo + third, hi - third
        fl, fr = f(l3), f(r3)
        if not np.isfinite(fl) or not np.isfinite(fr):
            raise ValueError(f"objective non-finite at {l3 if not np.isfinite(fl) else r3}")
        if fl < fr:
            hi = r3
        else:
            lo = l3
    return 0.5 * (lo + hi)


def tune_gamma(lin: LinearizedModel, ens: NuqlsEnsemble, val: Dataset,
               cfg: TernaryConfig | None = None,
               levels=DEFAULT_COVERAGE_LEVELS) -> float:
    """Pick the variance scale minimizing validation calibration error.

    The ensemble is queried once; candidate scales gamma only rescale the
    sample variance by (gamma / gamma_base)^2, so no retraining happens and
    the ensemble is never mutated.
    """
    if val.is_classification:
        raise ValueError("gamma tuning works on regression validation data")
    if val.n < 1:
        raise ValueError("empty validation set")
    cfg = cfg or TernaryConfig()
    preds = ensemble_predict(lin, ens, val.X)
    base = ensemble_stats(preds, gamma_scale=1.0)
    target = val.Y.ravel()
    mean = base.mean.ravel()
    var_base = base.variance.ravel()

    def objective(gamma):
        scaled = (gamma / ens.gamma) ** 2 * var_base
        return ece_regression(mean, scaled, target, levels=levels)

    # The empirical calibration error is flat once the intervals are far too
    # narrow or far too wide, so a plain interval-thirds pass over the whole
    # range can stall on a plateau.  A coarse log-spaced scan brackets the
    # dip first; the ternary refinement then runs inside the bracket.
    if cfg.left > 0:
        grid = np.geomspace(cfg.left, cfg.right, BRACKET_GRID)
    else:
        grid = np.linspace(cfg.left, cfg.right, BRACKET_GRID)
    vals = np.array([objective(g) for g in grid])
    if np.all(vals == vals[0]):
        mid = 0.5 * (cfg.left + cfg.right)
        logger.warning("calibration error is constant over the search range "
                       "(degenerate ensemble variance?); returning midpoint %.4g", mid)
        return mid
    i = int(np.argmin(vals))
    sub = TernaryConfig(grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)],
                        cfg.tolerance, cfg.max_iters)
    return ternary_search(objective, sub)
