"""Ensemble sampling with linearized networks.

Build an ensemble of first-order expansions of a trained network, each
started at a Gaussian perturbation of the reference parameters and trained
on the original data, then read predictive mean/variance off the member
predictions.

Member training has three interchangeable implementations:

``permember``
    each member runs through the generic trainer with JVP/VJP closures;
``batched``
    the training Jacobian is cached once and all members step together as a
    (p, S) matrix (same update rule, vectorized over members);
``gram``
    for full-batch gradient descent without weight decay the whole
    recurrence lives in function space: every iterate satisfies
    theta_t = theta_init + J^T a_t, so the identical update is carried on
    the (n*c, S) coefficients and parameters are recovered at the end.
    This is what makes large-epoch-count runs affordable.

All three produce the same ensembles up to floating-point roundoff; a test
pins that agreement.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .mlp import MlpSpec, forward, forward_batch, jacobian_stack, jvp, jvp_batch
from .ntk import PosteriorSummary
from .training import (
    PLATEAU_RTOL,
    PLATEAU_WINDOW,
    LossSpec,
    OptimizerSpec,
    SchedulerSpec,
    TrainingDivergedError,
    lr_factor,
    train_model,
)

logger = logging.getLogger(__name__)

__all__ = [
    "LinearizedModel",
    "NuqlsConfig",
    "NuqlsEnsemble",
    "nuqls_sample",
    "ensemble_predict",
    "ensemble_stats",
    "save_ensemble",
    "load_ensemble",
]

METHODS = ("auto", "gram", "batched", "permember")
ENSEMBLE_FORMAT_VERSION = 1


class LinearizedModel:
    """f~(theta, x) = f(ref, x) + J(ref, x) (theta - ref): affine in theta.

    Reference forward values and stacked Jacobians are cached per input
    matrix so repeated ensemble queries pay the network cost once.
    """

    def __init__(self, spec: MlpSpec, theta_ref: np.ndarray):
        self.spec = spec
        self.theta_ref = np.asarray(theta_ref, dtype=np.float64).copy()
        if self.theta_ref.shape != (spec.param_count,):
            raise ValueError("reference parameters do not match the spec")
        self._cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def reference_outputs(self, X: np.ndarray) -> np.ndarray:
        return forward_batch(self.spec, self.theta_ref, X)

    def cached(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(f(ref, X), stacked Jacobian) for X, computed once per array."""
        key = id(X)
        hit = self._cache.get(key)
        if hit is None:
            hit = (self.reference_outputs(X), jacobian_stack(self.spec, self.theta_ref, X))
            self._cache[key] = hit
        return hit

    def forward(self, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Single-point linearized forward, one JVP, no materialized Jacobian."""
        dtheta = np.asarray(theta, dtype=np.float64) - self.theta_ref
        return forward(self.spec, self.theta_ref, x) + jvp(self.spec, self.theta_ref, x, dtheta)

    # model protocol for the generic trainer
    def predict(self, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
        dtheta = np.asarray(theta, dtype=np.float64) - self.theta_ref
        return self.reference_outputs(X) + jvp_batch(self.spec, self.theta_ref, X, dtheta)

    def grad(self, theta: np.ndarray, X: np.ndarray, G: np.ndarray) -> np.ndarray:
        # gradient of the affine model lives at the reference Jacobian
        from .mlp import grad_from_output_grads

        return grad_from_output_grads(self.spec, self.theta_ref, X, G)


@dataclass(frozen=True)
class NuqlsConfig:
    n_members: int
    gamma: float
    opt: OptimizerSpec
    loss: LossSpec = field(default_factory=LossSpec)
    seed: int = 0
    method: str = "auto"
    jacobian_budget: int = 50_000_000

    def __post_init__(self):
        if self.n_members < 1:
            raise ValueError("need at least one member")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")


@dataclass
class NuqlsEnsemble:
    """Converged member parameters (S, p) with their training provenance."""

    members: np.ndarray
    final_train_losses: np.ndarray
    gamma: float
    seed: int
    loss_history: np.ndarray  # mean member loss per epoch
    config: NuqlsConfig
    snapshots: dict[int, np.ndarray] | None = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.final_train_losses)):
            raise ValueError("ensemble holds non-finite final losses")

    @property
    def n_members(self) -> int:
        return self.members.shape[0]


def _draw_inits(theta_ref, cfg) -> np.ndarray:
    rng = np.random.default_rng(cfg.seed)
    Z0 = cfg.gamma * rng.standard_normal((cfg.n_members, theta_ref.size))
    return theta_ref[None, :] + Z0


def suggest_learning_rate(lin: LinearizedModel, data: Dataset,
                          momentum: float = 0.0, safety: float = 0.5) -> float:
    """Stable step size for full-batch training of the linearized model.

    Estimates the top Gram eigenvalue by power iteration and backs off from
    the stability bound of heavy-ball/Nesterov descent on the mean-reduced
    quadratic.  Conservative for cross-entropy, whose logit Hessian is
    bounded above by the quadratic one.
    """
    _, J = lin.cached(data.X)
    rng = np.random.default_rng(0)
    v = rng.standard_normal(J.shape[0])
    v /= np.linalg.norm(v)
    for _ in range(30):
        v = J @ (J.T @ v)
        v /= np.linalg.norm(v)
    lam_max = float(v @ (J @ (J.T @ v)))
    curvature = 2.0 * lam_max / data.n
    bound = 1.0 + 1.0 / (1.0 + 2.0 * momentum)
    return safety * bound / curvature


def _select_method(cfg: NuqlsConfig, data: Dataset, spec: MlpSpec) -> str:
    if cfg.method != "auto":
        return cfg.method
    c = spec.output_dim
    cacheable = data.n * c * spec.param_count <= cfg.jacobian_budget
    if not cacheable:
        return "permember"
    full_batch = cfg.opt.kind == "gd" or cfg.opt.batch_size is None or cfg.opt.batch_size >= data.n
    # the function-space iteration costs (n c)^2 per epoch vs 2 n c p for the
    # parameter-space one, so it only pays off for few outputs and many params
    if (cfg.opt.kind in ("gd", "sgd") and full_batch and cfg.opt.weight_decay == 0.0
            and cfg.loss.kind in ("mse", "cross_entropy")
            and data.n * c <= 2 * spec.param_count):
        return "gram"
    if cfg.loss.kind in ("mse", "cross_entropy") and cfg.opt.kind in ("gd", "sgd"):
        return "batched"
    return "permember"


def nuqls_sample(lin: LinearizedModel, data: Dataset, cfg: NuqlsConfig,
                 checkpoints: tuple[int, ...] = ()) -> NuqlsEnsemble:
    """Train the ensemble of linearized networks from perturbed inits.

    ``checkpoints`` asks for parameter snapshots after the listed epoch
    counts (diagnostics for convergence sweeps); they ride on the returned
    ensemble.  All members share one shuffling stream, so data order is
    identical across members and across methods.
    """
    if data.n < 1:
        raise ValueError("empty dataset")
    spec = lin.spec
    if cfg.loss.kind == "cross_entropy" and not data.is_classification:
        raise ValueError("cross_entropy sampling needs a classification dataset")
    inits = _draw_inits(lin.theta_ref, cfg)
    method = _select_method(cfg, data, spec)
    logger.debug("sampling %d members via %s", cfg.n_members, method)

    if method == "permember":
        if checkpoints:
            raise ValueError("checkpoints require the gram or batched method")
        return _sample_permember(lin, data, cfg, inits)
    if method == "gram":
        runner = _GramRunner(lin, data, cfg)
    else:
        runner = _BatchedRunner(lin, data, cfg)
    members, finals, history, snaps = _run_members(runner, cfg, inits, checkpoints)
    return NuqlsEnsemble(members=members, final_train_losses=finals,
                         gamma=cfg.gamma, seed=cfg.seed,
                         loss_history=history, config=cfg,
                         snapshots=snaps if checkpoints else None)


def _sample_permember(lin, data, cfg, inits):
    members = np.empty_like(inits)
    finals = np.empty(cfg.n_members)
    histories = []
    for s in range(cfg.n_members):
        try:
            res = train_model(lin, inits[s], data.X, data.Y, cfg.loss, cfg.opt)
        except TrainingDivergedError as exc:
            raise TrainingDivergedError(f"ensemble member {s}: {exc}") from exc
        members[s] = res.theta
        finals[s] = res.loss_history[-1]
        histories.append(res.loss_history)
    epochs = min(len(h) for h in histories)
    history = np.mean([h[:epochs] for h in histories], axis=0)
    return NuqlsEnsemble(members=members, final_train_losses=finals,
                         gamma=cfg.gamma, seed=cfg.seed,
                         loss_history=history, config=cfg)


class _GramRunner:
    """Full-batch GD on the cached linearized problem, in function space.

    State is the coefficient matrix A with theta = theta_init + J^T A[:, s];
    the gradient step on A mirrors the parameter-space step exactly because
    every parameter gradient is J^T g.
    """

    def __init__(self, lin, data, cfg):
        opt = cfg.opt
        full_batch = opt.kind == "gd" or opt.batch_size is None or opt.batch_size >= data.n
        if not full_batch or opt.weight_decay != 0.0 or opt.kind == "adam":
            raise ValueError("gram method needs full-batch gd/sgd without weight decay")
        if cfg.loss.kind not in ("mse", "cross_entropy"):
            raise ValueError("gram method supports mse or cross_entropy")
        self.lin = lin
        self.data = data
        self.cfg = cfg
        self.f0, self.J = lin.cached(data.X)
        self.K = self.J @ self.J.T
        self.n, self.c = data.n, lin.spec.output_dim

    def start(self, inits):
        self.Z0 = (inits - self.lin.theta_ref[None, :]).T  # (p, S)
        self.base = self.f0.reshape(-1)[:, None] + self.J @ self.Z0  # (nc, S)
        self.A = np.zeros((self.n * self.c, self.cfg.n_members))

    def predictions(self, rows=None):
        assert rows is None  # full-batch only
        return self.base + self.K @ self.A  # flat (nc, S)

    def step(self, G_flat, lr, state, rows=None):
        state.step(self.A, G_flat, lr)

    def params(self):
        return (self.lin.theta_ref[None, :] + (self.Z0 + self.J.T @ self.A).T)


class _BatchedRunner:
    """Parameter-space training of all members at once on the cached Jacobian."""

    def __init__(self, lin, data, cfg):
        if cfg.loss.kind not in ("mse", "cross_entropy"):
            raise ValueError("batched method supports mse or cross_entropy")
        if cfg.opt.kind == "adam":
            raise ValueError("batched method supports gd/sgd; use permember for adam")
        self.lin = lin
        self.data = data
        self.cfg = cfg
        self.f0, self.J = lin.cached(data.X)
        self.n, self.c = data.n, lin.spec.output_dim

    def start(self, inits):
        self.D = (inits - self.lin.theta_ref[None, :]).T.copy()  # (p, S)

    def predictions(self, rows=None):
        J = self.J if rows is None else self.J[rows]
        f0 = self.f0.reshape(-1)[:, None]
        if rows is not None:
            f0 = f0[rows]
        return f0 + J @ self.D

    def step(self, G_flat, lr, state, rows=None):
        J = self.J if rows is None else self.J[rows]
        grad = J.T @ G_flat
        if self.cfg.opt.weight_decay > 0:
            grad += self.cfg.opt.weight_decay * (self.lin.theta_ref[:, None] + self.D)
        state.step(self.D, grad, lr)

    def params(self):
        return self.lin.theta_ref[None, :] + self.D.T


class _MomentumState:
    """PyTorch-convention SGD momentum on a matrix of member states."""

    def __init__(self, opt, shape):
        self.opt = opt
        self.buf = np.zeros(shape) if opt.momentum > 0 else None

    def step(self, target, grad, lr):
        opt = self.opt
        if self.buf is None:
            d = grad
        else:
            self.buf *= opt.momentum
            self.buf += grad
            d = grad + opt.momentum * self.buf if opt.nesterov else self.buf
        target -= lr * d


def _member_loss_grads(loss: LossSpec, F_flat: np.ndarray, data: Dataset, c: int):
    """Per-member loss vector (S,) and flat gradients (n*c, S)."""
    n = data.n
    S = F_flat.shape[1]
    if loss.kind == "mse":
        r = F_flat - data.Y.reshape(-1)[:, None]
        losses = np.einsum("is,is->s", r, r)
        G = 2.0 * r
    else:  # cross_entropy on logits (n, c, S)
        F = F_flat.reshape(n, c, S)
        zmax = F.max(axis=1, keepdims=True)
        ez = np.exp(F - zmax)
        Z = ez.sum(axis=1, keepdims=True)
        logz = (zmax + np.log(Z))[:, 0, :]
        picked = F[np.arange(n), data.Y, :]
        losses = (logz - picked).sum(axis=0)
        G = ez / Z
        G[np.arange(n), data.Y, :] -= 1.0
        G = G.reshape(n * c, S)
    if loss.reduction == "mean":
        losses = losses / n
        G = G / n
    return losses, G


def _run_members(runner, cfg, inits, checkpoints):
    opt = cfg.opt
    runner.start(inits)
    state = _MomentumState(opt, runner.A.shape if isinstance(runner, _GramRunner)
                           else runner.D.shape)
    snaps: dict[int, np.ndarray] = {}
    history = []
    member_losses = None
    n, c = runner.n, runner.c

    full_batch = opt.kind == "gd" or opt.batch_size is None or opt.batch_size >= n
    shuffle_rng = np.random.Generator(np.random.Philox(key=opt.seed))

    for epoch in range(opt.epochs):
        lr = opt.learning_rate * lr_factor(opt.scheduler, epoch, opt.epochs)
        if full_batch:
            F = runner.predictions()
            _, G = _member_loss_grads(cfg.loss, F, runner.data, c)
            runner.step(G, lr, state)
        else:
            perm = shuffle_rng.permutation(n)
            for i in range(0, n, opt.batch_size):
                idx = np.sort(perm[i : i + opt.batch_size])
                rows = (idx[:, None] * c + np.arange(c)[None, :]).reshape(-1)
                batch = runner.data.subset(idx)
                Fb = runner.predictions(rows)
                _, Gb = _member_loss_grads(cfg.loss, Fb, batch, c)
                runner.step(Gb, lr, state, rows)

        member_losses, _ = _member_loss_grads(cfg.loss, runner.predictions(),
                                              runner.data, c)
        bad = ~np.isfinite(member_losses)
        if bad.any():
            raise TrainingDivergedError(
                f"non-finite loss at epoch {epoch} for member(s) "
                f"{np.flatnonzero(bad).tolist()}")
        history.append(float(member_losses.mean()))
        if epoch + 1 in checkpoints:
            snaps[epoch + 1] = runner.params()
        if opt.target_loss is not None and member_losses.max() < opt.target_loss:
            break
        if (opt.plateau_stop and len(history) > PLATEAU_WINDOW
                and history[-PLATEAU_WINDOW - 1] - history[-1]
                <= PLATEAU_RTOL * max(1.0, abs(history[-PLATEAU_WINDOW - 1]))):
            break
    return runner.params(), member_losses, np.asarray(history), snaps


def ensemble_predict(lin: LinearizedModel, ens: NuqlsEnsemble,
                     Xstar: np.ndarray) -> np.ndarray:
    """Member predictions at test inputs: (S, m, c) tensor."""
    Xstar = np.asarray(Xstar, dtype=np.float64)
    if Xstar.ndim != 2 or Xstar.shape[1] != lin.spec.input_dim:
        raise ValueError(f"test inputs have shape {Xstar.shape}, "
                         f"expected (*, {lin.spec.input_dim})")
    m, c = Xstar.shape[0], lin.spec.output_dim
    S = ens.n_members
    if m == 0:
        return np.empty((S, 0, c))
    f0, Jstar = lin.cached(Xstar)
    D = ens.members - lin.theta_ref[None, :]  # (S, p)
    out = (Jstar @ D.T).reshape(m, c, S)
    return np.transpose(out, (2, 0, 1)) + f0[None, :, :]


def _softmax(z, axis):
    z = z - z.max(axis=axis, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=axis, keepdims=True)


def ensemble_stats(predictions: np.ndarray, gamma_scale: float = 1.0,
                   mode: str = "regression") -> PosteriorSummary:
    """Sample mean/variance over members, variance scaled by gamma_scale^2.

    ``gamma_scale`` is a multiplier relative to the gamma the ensemble was
    trained at (scale 1 reproduces the raw sample variance); tuning picks it
    post hoc without retraining.  ``softmax`` mode maps member outputs
    through a softmax before the statistics.
    """
    preds = np.asarray(predictions, dtype=np.float64)
    if preds.ndim != 3:
        raise ValueError("predictions must be (S, m, c)")
    if preds.shape[0] < 2:
        raise ValueError("variance needs at least 2 members")
    if mode not in ("regression", "softmax"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "softmax":
        preds = _softmax(preds, axis=2)
    mean = preds.mean(axis=0)
    variance = gamma_scale ** 2 * preds.var(axis=0, ddof=1)
    return PosteriorSummary(mean=mean, variance=variance, gamma=gamma_scale)


def save_ensemble(path, lin: LinearizedModel, ens: NuqlsEnsemble) -> None:
    """Persist reference model + members to a versioned npz container."""
    spec = lin.spec
    meta = {
        "format_version": ENSEMBLE_FORMAT_VERSION,
        "spec": {
            "input_dim": spec.input_dim,
            "output_dim": spec.output_dim,
            "hidden_widths": list(spec.hidden_widths),
            "activation": spec.activation,
            "scaling": spec.scaling,
            "bias": spec.bias,
        },
        "gamma": ens.gamma,
        "seed": ens.seed,
        "loss": {"kind": ens.config.loss.kind, "reduction": ens.config.loss.reduction},
        "opt": {
            "kind": ens.config.opt.kind,
            "learning_rate": ens.config.opt.learning_rate,
            "momentum": ens.config.opt.momentum,
            "nesterov": ens.config.opt.nesterov,
            "weight_decay": ens.config.opt.weight_decay,
            "batch_size": ens.config.opt.batch_size,
            "epochs": ens.config.opt.epochs,
            "seed": ens.config.opt.seed,
            "scheduler": {
                "kind": ens.config.opt.scheduler.kind,
                "power": ens.config.opt.scheduler.power,
                "total_iters": ens.config.opt.scheduler.total_iters,
            },
        },
    }
    np.savez(path, meta=json.dumps(meta, sort_keys=True),
             theta_ref=lin.theta_ref, members=ens.members,
             final_train_losses=ens.final_train_losses,
             loss_history=ens.loss_history)


def load_ensemble(path) -> tuple[LinearizedModel, NuqlsEnsemble]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta["format_version"] != ENSEMBLE_FORMAT_VERSION:
            raise ValueError(f"unsupported ensemble format {meta['format_version']}")
        spec = MlpSpec(input_dim=meta["spec"]["input_dim"],
                       output_dim=meta["spec"]["output_dim"],
                       hidden_widths=tuple(meta["spec"]["hidden_widths"]),
                       activation=meta["spec"]["activation"],
                       scaling=meta["spec"]["scaling"],
                       bias=meta["spec"]["bias"])
        lin = LinearizedModel(spec, z["theta_ref"])
        sched = meta["opt"].get("scheduler", {"kind": "none", "power": 1.0,
                                              "total_iters": None})
        opt = OptimizerSpec(kind=meta["opt"]["kind"],
                            learning_rate=meta["opt"]["learning_rate"],
                            momentum=meta["opt"]["momentum"],
                            nesterov=meta["opt"]["nesterov"],
                            weight_decay=meta["opt"]["weight_decay"],
                            batch_size=meta["opt"]["batch_size"],
                            epochs=meta["opt"]["epochs"],
                            seed=meta["opt"]["seed"],
                            scheduler=SchedulerSpec(**sched))
        cfg = NuqlsConfig(n_members=z["members"].shape[0], gamma=meta["gamma"],
                          opt=opt, loss=LossSpec(**meta["loss"]), seed=meta["seed"])
        ens = NuqlsEnsemble(members=z["members"],
                            final_train_losses=z["final_train_losses"],
                            gamma=meta["gamma"], seed=meta["seed"],
                            loss_history=z["loss_history"], config=cfg)
    return lin, ens
