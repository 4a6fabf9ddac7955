"""Deep-ensemble baseline: independently trained networks, mixture-combined.

Regression members carry a heteroskedastic head (mean and raw-variance
columns); their predictive distribution is the moment-matched Gaussian
mixture.  Classification members are combined by averaging softmax outputs.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .mlp import MlpSpec, forward_batch, init_params
from .ntk import PosteriorSummary
from .training import LossSpec, OptimizerSpec, TrainingDivergedError, hetero_split, train

logger = logging.getLogger(__name__)

__all__ = ["DeepEnsemble", "de_train", "de_predict", "de_member_probs",
           "save_deep_ensemble", "load_deep_ensemble"]

DE_FORMAT_VERSION = 1


@dataclass
class DeepEnsemble:
    """Member parameter vectors (S, p) sharing one architecture."""

    spec: MlpSpec
    members: np.ndarray
    final_train_losses: np.ndarray
    classification: bool
    seed: int

    @property
    def n_members(self) -> int:
        return self.members.shape[0]


def de_train(spec: MlpSpec, data: Dataset, n_members: int,
             opt: OptimizerSpec, seed: int = 0) -> DeepEnsemble:
    """Train S fully independent members with distinct Xavier-normal inits.

    Regression uses the heteroskedastic Gaussian likelihood (network output
    width must be twice the target width); classification uses cross-entropy.
    """
    if n_members < 1:
        raise ValueError("need at least one member")
    if data.is_classification:
        loss = LossSpec("cross_entropy", "mean")
    else:
        loss = LossSpec("gaussian_nll_hetero", "mean")
        if spec.output_dim != 2 * data.Y.shape[1]:
            raise ValueError("heteroskedastic ensemble needs output_dim = 2 * target_dim")
    seeds = np.random.SeedSequence(seed).generate_state(n_members)
    members = np.empty((n_members, spec.param_count))
    finals = np.empty(n_members)
    for s in range(n_members):
        theta0 = init_params(spec, "xavier_normal", seed=int(seeds[s]))
        try:
            res = train(spec, theta0, data, loss, opt)
        except TrainingDivergedError as exc:
            raise TrainingDivergedError(f"ensemble member {s}: {exc}") from exc
        members[s] = res.theta
        finals[s] = res.loss_history[-1]
    return DeepEnsemble(spec=spec, members=members, final_train_losses=finals,
                        classification=data.is_classification, seed=seed)


def de_predict(ens: DeepEnsemble, Xstar: np.ndarray) -> PosteriorSummary:
    """Moment-matched mixture prediction.

    Regression: mean is the average member mean and the variance is
    mean(sigma_s^2 + mu_s^2) - mean(mu_s)^2, the exact mixture variance.
    Classification: mean is the averaged softmax; variance the member
    spread of softmax outputs.
    """
    if ens.classification:
        probs = de_member_probs(ens, Xstar)
        mean = probs.mean(axis=0)
        variance = probs.var(axis=0, ddof=1) if ens.n_members > 1 else np.zeros_like(mean)
        return PosteriorSummary(mean=mean, variance=variance, gamma=1.0)
    c = ens.spec.output_dim // 2
    mus = np.empty((ens.n_members, Xstar.shape[0], c))
    s2s = np.empty_like(mus)
    for s in range(ens.n_members):
        out = forward_batch(ens.spec, ens.members[s], Xstar)
        mus[s], s2s[s] = hetero_split(out)
    mean = mus.mean(axis=0)
    variance = (s2s + mus ** 2).mean(axis=0) - mean ** 2
    variance = np.maximum(variance, 0.0)
    return PosteriorSummary(mean=mean, variance=variance, gamma=1.0)


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


def de_member_probs(ens: DeepEnsemble, Xstar: np.ndarray) -> np.ndarray:
    """Per-member softmax outputs (S, m, c) for classification ensembles."""
    if not ens.classification:
        raise ValueError("member probabilities are for classification ensembles")
    out = np.stack([forward_batch(ens.spec, ens.members[s], Xstar)
                    for s in range(ens.n_members)])
    return _softmax(out)


def save_deep_ensemble(path, ens: DeepEnsemble) -> None:
    meta = {
        "format_version": DE_FORMAT_VERSION,
        "spec": {
            "input_dim": ens.spec.input_dim,
            "output_dim": ens.spec.output_dim,
            "hidden_widths": list(ens.spec.hidden_widths),
            "activation": ens.spec.activation,
            "scaling": ens.spec.scaling,
            "bias": ens.spec.bias,
        },
        "classification": ens.classification,
        "seed": ens.seed,
    }
    np.savez(path, meta=json.dumps(meta, sort_keys=True), members=ens.members,
             final_train_losses=ens.final_train_losses)


def load_deep_ensemble(path) -> DeepEnsemble:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta["format_version"] != DE_FORMAT_VERSION:
            raise ValueError(f"unsupported ensemble format {meta['format_version']}")
        spec = MlpSpec(input_dim=meta["spec"]["input_dim"],
                       output_dim=meta["spec"]["output_dim"],
                       hidden_widths=tuple(meta["spec"]["hidden_widths"]),
                       activation=meta["spec"]["activation"],
                       scaling=meta["spec"]["scaling"],
                       bias=meta["spec"]["bias"])
        return DeepEnsemble(spec=spec, members=z["members"],
                            final_train_losses=z["final_train_losses"],
                            classification=bool(meta["classification"]),
                            seed=int(meta["seed"]))
