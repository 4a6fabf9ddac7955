"""Losses, optimizers, and schedulers for network and linearized training.

The training loop is generic over a small model protocol: anything with
``predict(theta, X) -> (n, c_out)`` and ``grad(theta, X, G) -> (p,)`` can be
trained, which is how both real networks and linearized networks share one
optimizer implementation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .mlp import MlpSpec, forward_batch, grad_from_output_grads

__all__ = [
    "LossSpec",
    "OptimizerSpec",
    "SchedulerSpec",
    "TrainResult",
    "TrainingDivergedError",
    "MlpModel",
    "loss_value",
    "loss_value_and_grad",
    "lr_factor",
    "train",
    "train_model",
]

LOSS_KINDS = ("mse", "gaussian_nll_hetero", "cross_entropy")
REDUCTIONS = ("sum", "mean")
OPTIMIZER_KINDS = ("gd", "sgd", "adam")
SCHEDULER_KINDS = ("none", "cosine", "polynomial")

LOG_2PI = float(np.log(2.0 * np.pi))


class TrainingDivergedError(RuntimeError):
    """Raised when a training loss turns NaN/Inf."""


@dataclass(frozen=True)
class LossSpec:
    kind: str = "mse"
    reduction: str = "mean"

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.kind!r}")
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"unknown reduction {self.reduction!r}")

    def prediction_dim(self, target_dim: int) -> int:
        """Network output width this loss expects for a given target width."""
        if self.kind == "gaussian_nll_hetero":
            return 2 * target_dim
        return target_dim


@dataclass(frozen=True)
class SchedulerSpec:
    kind: str = "none"
    power: float = 1.0
    total_iters: int | None = None

    def __post_init__(self):
        if self.kind not in SCHEDULER_KINDS:
            raise ValueError(f"unknown scheduler {self.kind!r}")


def lr_factor(sched: SchedulerSpec, epoch: int, epochs: int) -> float:
    """Multiplier on the base learning rate at a given epoch index."""
    if sched.kind == "none":
        return 1.0
    total = sched.total_iters if sched.total_iters is not None else epochs
    t = min(epoch, total)
    if sched.kind == "cosine":
        return 0.5 * (1.0 + np.cos(np.pi * t / total))
    return (1.0 - t / total) ** sched.power


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "sgd"
    learning_rate: float = 1e-3
    momentum: float = 0.0
    nesterov: bool = False
    weight_decay: float = 0.0
    batch_size: int | None = None  # None = full batch
    epochs: int = 100
    scheduler: SchedulerSpec = field(default_factory=SchedulerSpec)
    seed: int = 0
    # optional stopping rules; loss_history then ends at the stopping epoch
    target_loss: float | None = None
    plateau_stop: bool = False

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.kind == "gd" and self.batch_size is not None:
            raise ValueError("gd is full-batch; leave batch_size unset")
        if not np.isfinite(self.learning_rate) or self.learning_rate <= 0:
            raise ValueError("learning_rate must be a positive finite number")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")


@dataclass
class TrainResult:
    theta: np.ndarray
    loss_history: np.ndarray


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def hetero_split(pred: np.ndarray):
    """Split a heteroskedastic head into (mean, variance).

    The raw second half is mapped through softplus with a 1e-6 floor, which
    keeps the variance positive without exp overflow.
    """
    c = pred.shape[1] // 2
    mu = pred[:, :c]
    s2 = _softplus(pred[:, c:]) + 1e-6
    return mu, s2


def loss_value_and_grad(loss: LossSpec, pred: np.ndarray, target: np.ndarray):
    """Loss value and its gradient with respect to the prediction matrix."""
    pred = np.asarray(pred, dtype=np.float64)
    if loss.kind == "cross_entropy":
        target = np.asarray(target)
        if not np.issubdtype(target.dtype, np.integer):
            raise ValueError("cross_entropy needs integer class targets")
        n, c = pred.shape
        if target.shape != (n,) or target.min() < 0 or target.max() >= c:
            raise ValueError("class targets must be in [0, c)")
        zmax = pred.max(axis=1, keepdims=True)
        logz = zmax[:, 0] + np.log(np.exp(pred - zmax).sum(axis=1))
        value = float(np.sum(logz - pred[np.arange(n), target]))
        grad = np.exp(pred - logz[:, None])
        grad[np.arange(n), target] -= 1.0
    else:
        target = np.asarray(target, dtype=np.float64)
        if target.ndim == 1:
            target = target[:, None]
        n = pred.shape[0]
        if loss.kind == "mse":
            if pred.shape != target.shape:
                raise ValueError(f"prediction {pred.shape} vs target {target.shape}")
            r = pred - target
            value = float(np.sum(r * r))
            grad = 2.0 * r
        else:  # gaussian_nll_hetero
            if pred.shape != (target.shape[0], 2 * target.shape[1]):
                raise ValueError("heteroskedastic loss needs output_dim = 2 * target_dim")
            c = target.shape[1]
            mu, s2 = hetero_split(pred)
            r = mu - target
            value = float(0.5 * np.sum(r * r / s2 + np.log(s2) + LOG_2PI))
            grad = np.empty_like(pred)
            grad[:, :c] = r / s2
            grad[:, c:] = 0.5 * (1.0 / s2 - (r * r) / (s2 * s2)) * _sigmoid(pred[:, c:])
    if loss.reduction == "mean":
        value /= n
        grad = grad / n
    return value, grad


def loss_value(loss: LossSpec, pred: np.ndarray, target: np.ndarray) -> float:
    return loss_value_and_grad(loss, pred, target)[0]


class MlpModel:
    """Model-protocol adapter around the raw network functions."""

    def __init__(self, spec: MlpSpec):
        self.spec = spec

    def predict(self, theta, X):
        return forward_batch(self.spec, theta, X)

    def grad(self, theta, X, G):
        return grad_from_output_grads(self.spec, theta, X, G)


class _SgdState:
    def __init__(self, opt, p):
        self.opt = opt
        self.buf = np.zeros(p) if opt.momentum > 0 else None

    def step(self, theta, grad, lr):
        opt = self.opt
        if self.buf is None:
            d = grad
        else:
            self.buf *= opt.momentum
            self.buf += grad
            d = grad + opt.momentum * self.buf if opt.nesterov else self.buf
        theta -= lr * d


class _AdamState:
    beta1, beta2, eps = 0.9, 0.999, 1e-8

    def __init__(self, opt, p):
        self.m = np.zeros(p)
        self.v = np.zeros(p)
        self.t = 0

    def step(self, theta, grad, lr):
        self.t += 1
        self.m += (1.0 - self.beta1) * (grad - self.m)
        self.v += (1.0 - self.beta2) * (grad * grad - self.v)
        mhat = self.m / (1.0 - self.beta1 ** self.t)
        vhat = self.v / (1.0 - self.beta2 ** self.t)
        theta -= lr * mhat / (np.sqrt(vhat) + self.eps)


PLATEAU_WINDOW = 50
PLATEAU_RTOL = 1e-10


def train_model(model, theta0: np.ndarray, X: np.ndarray, Y: np.ndarray,
                loss: LossSpec, opt: OptimizerSpec) -> TrainResult:
    """Run the configured optimizer; deterministic given opt.seed.

    Minibatch shuffling uses a dedicated counter-based (Philox) stream keyed
    only by the optimizer seed, so runs that differ in initialization still
    see identical data order.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] < 1:
        raise ValueError("empty training set")
    n = X.shape[0]
    theta = np.array(theta0, dtype=np.float64, copy=True)

    full_batch = opt.kind == "gd" or opt.batch_size is None or opt.batch_size >= n
    shuffle_rng = np.random.Generator(np.random.Philox(key=opt.seed))
    state = _AdamState(opt, theta.size) if opt.kind == "adam" else _SgdState(opt, theta.size)

    history = []
    for epoch in range(opt.epochs):
        lr = opt.learning_rate * lr_factor(opt.scheduler, epoch, opt.epochs)
        if full_batch:
            batches = [slice(None)]
        else:
            perm = shuffle_rng.permutation(n)
            batches = [perm[i : i + opt.batch_size] for i in range(0, n, opt.batch_size)]
        for idx in batches:
            pred = model.predict(theta, X[idx])
            _, G = loss_value_and_grad(loss, pred, Y[idx])
            grad = model.grad(theta, X[idx], G)
            if opt.weight_decay > 0:
                grad = grad + opt.weight_decay * theta
            state.step(theta, grad, lr)

        epoch_loss = loss_value(loss, model.predict(theta, X), Y)
        if not np.isfinite(epoch_loss):
            raise TrainingDivergedError(
                f"non-finite training loss {epoch_loss} at epoch {epoch}")
        history.append(epoch_loss)
        if opt.target_loss is not None and epoch_loss < opt.target_loss:
            break
        if (opt.plateau_stop and len(history) > PLATEAU_WINDOW
                and history[-PLATEAU_WINDOW - 1] - epoch_loss
                <= PLATEAU_RTOL * max(1.0, abs(history[-PLATEAU_WINDOW - 1]))):
            break
    return TrainResult(theta, np.asarray(history))


def train(spec: MlpSpec, theta0: np.ndarray, data: Dataset,
          loss: LossSpec, opt: OptimizerSpec) -> TrainResult:
    """Train a network on a dataset; see `train_model` for the engine."""
    if loss.kind == "cross_entropy":
        if not data.is_classification:
            raise ValueError("cross_entropy needs a classification dataset")
    else:
        if data.is_classification:
            raise ValueError(f"{loss.kind} needs regression targets")
        if spec.output_dim != loss.prediction_dim(data.Y.shape[1]):
            raise ValueError(
                f"network output_dim {spec.output_dim} does not match "
                f"{loss.kind} expectation {loss.prediction_dim(data.Y.shape[1])}")
    return train_model(MlpModel(spec), theta0, data.X, data.Y, loss, opt)
