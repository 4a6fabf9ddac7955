"""Empirical-NTK kernel, Gram factorization, and the closed-form posterior.

The Gram matrix is K = J_X J_X^T with J_X the (n*c, p) stacked parameter
Jacobian at fixed reference parameters.  The closed-form posterior computed
here is the oracle the linearized-ensemble sampler is cross-validated
against; the two share the kernel but nothing else (direct factorized solve
here, gradient iteration there).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .data import Dataset
from .mlp import MlpSpec, forward_batch, jacobian, jacobian_stack

logger = logging.getLogger(__name__)

__all__ = [
    "NtkGram",
    "PosteriorSummary",
    "BudgetExceededError",
    "FactorizationError",
    "DEFAULT_BUDGET",
    "ntk_block",
    "gram",
    "gp_posterior_regression",
    "gp_posterior_general",
    "sev",
    "nullspace_residual",
    "export_gram_csv",
    "export_posterior_csv",
]

# elements of the largest matrix we are willing to materialize (~400 MB float64)
DEFAULT_BUDGET = 50_000_000

JITTER_RETRIES = 6
VARIANCE_CLAMP_WARN = 1e-8


class BudgetExceededError(RuntimeError):
    """A requested dense Jacobian/Gram would exceed the memory budget."""


class FactorizationError(RuntimeError):
    """Cholesky failed even at the maximum jitter level."""


@dataclass
class PosteriorSummary:
    """Predictive mean (m, c) and per-output variance (m, c) at scale gamma.

    ``covariance`` carries full (m, c, c) blocks when the producer computes
    them (vector-output posterior); the diagonal then equals ``variance``.
    """

    mean: np.ndarray
    variance: np.ndarray
    gamma: float
    covariance: np.ndarray | None = None


@dataclass
class NtkGram:
    """Factorized empirical-NTK Gram matrix with conditioning diagnostics."""

    K: np.ndarray
    chol: np.ndarray
    jitter_used: float
    condition_estimate: float
    J: np.ndarray | None = None  # stacked Jacobian when it was materialized

    @property
    def size(self) -> int:
        return self.K.shape[0]

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return scipy.linalg.cho_solve((self.chol, True), rhs)


def ntk_block(spec: MlpSpec, theta: np.ndarray, x: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Kernel block K(x, x2) = J(theta, x) J(theta, x2)^T of shape (c, c)."""
    return jacobian(spec, theta, x) @ jacobian(spec, theta, x2).T


def _check_budget(elements: int, budget: int, what: str):
    if elements > budget:
        raise BudgetExceededError(
            f"{what} needs {elements} float64 elements, budget is {budget}")


def _assemble_gram(spec, theta, X, budget):
    n, c, p = X.shape[0], spec.output_dim, spec.param_count
    _check_budget((n * c) ** 2, budget, "Gram matrix")
    if n * c * p <= budget:
        J = jacobian_stack(spec, theta, X)
        return J @ J.T, J
    # sample-chunked assembly: row blocks are recomputed per pair, bounding
    # live memory at two Jacobian chunks
    chunk = max(1, budget // (2 * c * p))
    K = np.empty((n * c, n * c))
    starts = list(range(0, n, chunk))
    for a in starts:
        ae = min(a + chunk, n)
        Ja = jacobian_stack(spec, theta, X[a:ae])
        for b in starts:
            if b < a:
                continue
            be = min(b + chunk, n)
            Jb = Ja if b == a else jacobian_stack(spec, theta, X[b:be])
            block = Ja @ Jb.T
            K[a * c : ae * c, b * c : be * c] = block
            if b > a:
                K[b * c : be * c, a * c : ae * c] = block.T
    return K, None


def _cholesky_with_jitter(K: np.ndarray):
    """Lower Cholesky factor with adaptive jitter; returns (L, jitter)."""
    base = 1e-10 * np.trace(K) / K.shape[0]
    jitters = [0.0] + [base * 10.0 ** k for k in range(JITTER_RETRIES + 1)]
    for jitter in jitters:
        try:
            L = scipy.linalg.cholesky(
                K + jitter * np.eye(K.shape[0]) if jitter else K, lower=True)
            return L, jitter
        except scipy.linalg.LinAlgError:
            continue
    raise FactorizationError(
        f"Cholesky failed up to jitter {jitters[-1]:.3e} (size {K.shape[0]})")


def _condition_estimate(K: np.ndarray, chol: np.ndarray, iters: int = 20) -> float:
    """Extreme-eigenvalue ratio from a few power/inverse-power iterations.

    Cheap, approximate, diagnostic-only; evaluated on the jittered matrix.
    """
    rng = np.random.default_rng(0)
    v = rng.standard_normal(K.shape[0])
    v /= np.linalg.norm(v)
    for _ in range(iters):
        v = K @ v
        v /= np.linalg.norm(v)
    lam_max = float(v @ (K @ v))
    w = rng.standard_normal(K.shape[0])
    w /= np.linalg.norm(w)
    for _ in range(iters):
        w = scipy.linalg.cho_solve((chol, True), w)
        w /= np.linalg.norm(w)
    lam_min = float(w @ (K @ w))
    return lam_max / max(lam_min, np.finfo(float).tiny)


def gram(spec: MlpSpec, theta: np.ndarray, X: np.ndarray,
         budget: int = DEFAULT_BUDGET) -> NtkGram:
    """Assemble and factorize the (n*c, n*c) empirical-NTK Gram matrix."""
    X = np.asarray(X, dtype=np.float64)
    K, J = _assemble_gram(spec, theta, X, budget)
    K = 0.5 * (K + K.T)
    chol, jitter = _cholesky_with_jitter(K)
    if jitter > 0:
        logger.info("Gram factorized with jitter %.3e", jitter)
    cond = _condition_estimate(K, chol)
    return NtkGram(K=K, chol=chol, jitter_used=jitter, condition_estimate=cond, J=J)


def _cross_kernel(spec, theta, Xstar, gram_: NtkGram, X, budget):
    """K(X*, X) as an (m*c, n*c) matrix."""
    m, c, p = Xstar.shape[0], spec.output_dim, spec.param_count
    _check_budget(m * c * p, budget, "test Jacobian")
    Jstar = jacobian_stack(spec, theta, Xstar)
    if gram_.J is not None:
        return Jstar, Jstar @ gram_.J.T
    n = X.shape[0]
    chunk = max(1, budget // (c * p))
    kk = np.empty((m * c, n * c))
    for a in range(0, n, chunk):
        ae = min(a + chunk, n)
        Ja = jacobian_stack(spec, theta, X[a:ae])
        kk[:, a * c : ae * c] = Jstar @ Ja.T
    return Jstar, kk


def gp_posterior_regression(spec: MlpSpec, theta: np.ndarray, data: Dataset,
                            Xstar: np.ndarray, gamma: float,
                            gram_: NtkGram | None = None,
                            budget: int = DEFAULT_BUDGET) -> PosteriorSummary:
    """Closed-form scalar-output posterior at the reference parameters.

    mean(x)  = k(x,X) K^{-1} (y - f(X)) + f(x)
    var(x)   = (k(x,x) - k(x,X) K^{-1} k(X,x)) * gamma^2

    The mean does not depend on gamma; the variance is exactly
    gamma^2-homogeneous (one final multiplication).
    """
    if spec.output_dim != 1:
        raise ValueError("regression posterior is scalar-output; "
                         "use gp_posterior_general for c > 1")
    if data.is_classification:
        raise ValueError("needs regression targets")
    Xstar = np.asarray(Xstar, dtype=np.float64)
    if gram_ is None:
        gram_ = gram(spec, theta, data.X, budget=budget)
    f0 = forward_batch(spec, theta, data.X)
    fstar = forward_batch(spec, theta, Xstar)
    Jstar, kk = _cross_kernel(spec, theta, Xstar, gram_, data.X, budget)

    alpha = gram_.solve(data.Y[:, 0] - f0[:, 0])
    mean = fstar[:, 0] + kk @ alpha

    kappa = np.einsum("ij,ij->i", Jstar, Jstar)
    V = gram_.solve(kk.T)
    var_unit = kappa - np.einsum("ij,ji->i", kk, V)
    var_unit = _clamp_variance(var_unit, kappa)
    return PosteriorSummary(mean=mean[:, None],
                            variance=(var_unit * gamma ** 2)[:, None],
                            gamma=gamma)


def gp_posterior_general(spec: MlpSpec, theta: np.ndarray, data: Dataset,
                         Xstar: np.ndarray, gamma: float,
                         gram_: NtkGram | None = None,
                         budget: int = DEFAULT_BUDGET) -> PosteriorSummary:
    """Vector-output posterior blocks around a near-interpolating reference.

    mean(x) = f(x); Sigma(x) = (K(x,x) - K(x,X) K^{-1} K(X,x)) * gamma^2,
    one (c, c) covariance block per test point, clamped to PSD.
    """
    Xstar = np.asarray(Xstar, dtype=np.float64)
    if gram_ is None:
        gram_ = gram(spec, theta, data.X, budget=budget)
    c = spec.output_dim
    m = Xstar.shape[0]
    fstar = forward_batch(spec, theta, Xstar)
    Jstar, kk = _cross_kernel(spec, theta, Xstar, gram_, data.X, budget)
    V = gram_.solve(kk.T)

    cov = np.empty((m, c, c))
    for i in range(m):
        rows = slice(i * c, (i + 1) * c)
        block = Jstar[rows] @ Jstar[rows].T - kk[rows] @ V[:, rows]
        cov[i] = 0.5 * (block + block.T)
        evals, evecs = np.linalg.eigh(cov[i])
        if evals.min() < -VARIANCE_CLAMP_WARN * max(evals.max(), 1e-300):
            logger.warning("covariance block %d clamped (min eigenvalue %.3e)",
                           i, evals.min())
        if evals.min() < 0:
            cov[i] = (evecs * np.clip(evals, 0.0, None)) @ evecs.T
    cov *= gamma ** 2
    variance = np.einsum("ikk->ik", cov).copy()
    return PosteriorSummary(mean=fstar, variance=variance, gamma=gamma,
                            covariance=cov)


def _clamp_variance(var: np.ndarray, kappa: np.ndarray) -> np.ndarray:
    bad = var < -VARIANCE_CLAMP_WARN * np.maximum(kappa, np.finfo(float).tiny)
    if bad.any():
        logger.warning("%d posterior variance(s) clamped to 0 "
                       "(worst raw value %.3e)", int(bad.sum()), var.min())
    return np.clip(var, 0.0, None)


def export_gram_csv(gram_: NtkGram, path) -> None:
    """Write the Gram matrix as plain numeric CSV plus a diagnostics sidecar."""
    from pathlib import Path

    out = Path(path)
    np.savetxt(out, gram_.K, delimiter=",")
    out.with_suffix(out.suffix + ".meta").write_text(
        f"jitter_used={gram_.jitter_used!r}\n"
        f"condition_estimate={gram_.condition_estimate!r}\n"
        f"size={gram_.size}\n", encoding="utf-8")


def export_posterior_csv(post: PosteriorSummary, path) -> None:
    """Write per-test-point mean and variance columns as headed CSV."""
    from pathlib import Path

    c = post.mean.shape[1]
    header = ",".join([f"mean_{k}" for k in range(c)]
                      + [f"variance_{k}" for k in range(c)] + ["gamma"])
    table = np.concatenate([post.mean, post.variance,
                            np.full((post.mean.shape[0], 1), post.gamma)], axis=1)
    lines = [header] + [",".join(repr(float(v)) for v in row) for row in table]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def sev(var_a: np.ndarray, var_b: np.ndarray) -> float:
    """Squared-error-of-variance diagnostic: l2 distance of variance vectors."""
    var_a = np.asarray(var_a, dtype=np.float64).ravel()
    var_b = np.asarray(var_b, dtype=np.float64).ravel()
    if var_a.shape != var_b.shape:
        raise ValueError(f"length mismatch: {var_a.shape} vs {var_b.shape}")
    return float(np.linalg.norm(var_a - var_b))


def nullspace_residual(spec: MlpSpec, theta: np.ndarray, X: np.ndarray,
                       theta_star: np.ndarray, theta_init: np.ndarray,
                       budget: int = DEFAULT_BUDGET) -> float:
    """Norm of the displacement component outside range(J_X^T).

    A gradient-descent solution of the linearized problem started at
    ``theta_init`` should satisfy theta_star - theta_init in range(J_X^T);
    the residual of the least-squares projection measures the violation.
    """
    X = np.asarray(X, dtype=np.float64)
    _check_budget(X.shape[0] * spec.output_dim * spec.param_count, budget,
                  "stacked Jacobian")
    J = jacobian_stack(spec, theta, X)
    d = np.asarray(theta_star, dtype=np.float64) - np.asarray(theta_init, dtype=np.float64)
    coef, *_ = np.linalg.lstsq(J.T, d, rcond=None)
    return float(np.linalg.norm(d - J.T @ coef))
