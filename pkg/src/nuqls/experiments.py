"""Config-driven experiment runners binding all modules.

Every runner is deterministic given (config, master seed): worker processes
only parallelize over independent realizations/repeats whose seeds are
derived up front, and results are aggregated in index order.
"""

from __future__ import annotations

import logging
import time
import zlib
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .config import ConfigError, ExperimentConfig
from .data import (
    Dataset,
    gen_blobs_classification,
    gen_cubic_toy,
    gen_gaussian_synthetic,
    gen_sin_sum,
    load_csv,
    normalize,
    split,
)
from .deep_ensemble import de_member_probs, de_predict, de_train
from .linearize import (
    LinearizedModel,
    NuqlsConfig,
    NuqlsEnsemble,
    ensemble_predict,
    ensemble_stats,
    nuqls_sample,
    suggest_learning_rate,
)
from .metrics import (
    ece_classification,
    ece_regression,
    gaussian_nll_metric,
    interval_coverage,
    median,
    rmse,
    sample_skew,
    vmsp_samples,
)
from .mlp import MlpSpec, init_params
from .ntk import gp_posterior_regression, gram, sev
from .report import report_write
from .training import LossSpec, OptimizerSpec, SchedulerSpec, train
from .tuning import TernaryConfig, tune_gamma

logger = logging.getLogger(__name__)

__all__ = ["run_experiment", "defaults_reference", "RUNNERS", "DEFAULTS"]


DEFAULTS = {
    "convergence": {
        "data.n": "100",
        "data.dim": "5",
        "net.width": "256",
        "net.activation": "tanh",
        "nn.learning_rate": "0.1",
        "nn.momentum": "0.9",
        "nn.epochs": "5000",
        "nuqls.gamma": "0.1",
        "sweep.members": "100",
        "sweep.learning_rate": "0.1",
        "sweep.momentum": "0.9",
        "sweep.checkpoints": "100,1000,10000",
        "converged.members": "500",
        "converged.learning_rate": "auto",
        "converged.momentum": "0.999",
        "converged.target_loss": "1e-9",
        "converged.max_epochs": "30000",
        "converged.subsets": "10,100,500",
        "realizations": "10",
    },
    "toy": {
        "data.n": "20",
        "data.n_val": "40",
        "data.noise_std": "3.0",
        "net.width": "50",
        "net.activation": "silu",
        "nn.learning_rate": "0.001",
        "nn.epochs": "10000",
        "nn.scheduler_power": "0.5",
        "nuqls.members": "100",
        "nuqls.gamma": "0.01",
        "nuqls.learning_rate": "0.001",
        "nuqls.momentum": "0.9",
        "nuqls.max_epochs": "1000",
        "nuqls.target_loss": "1e-10",
        "de.members": "10",
        "de.learning_rate": "0.05",
        "de.epochs": "2000",
        "grid.points": "200",
        "grid.lo": "-6.0",
        "grid.hi": "6.0",
        "tune.left": "1e-3",
        "tune.right": "10.0",
    },
    "regression_csv": {
        "data.csv": "",
        "data.targets": "-1",
        "data.header": "false",
        "split.seed_offset": "1",
        "net.width": "150",
        "net.activation": "tanh",
        "nn.learning_rate": "0.01",
        "nn.epochs": "500",
        "nn.batch_size": "128",
        "nn.weight_decay": "1e-5",
        "nn.scheduler_power": "0.5",
        "nuqls.members": "100",
        "nuqls.gamma": "0.01",
        "nuqls.learning_rate": "auto",
        "nuqls.momentum": "0.9",
        "nuqls.max_epochs": "2000",
        "nuqls.target_loss": "1e-9",
        "de.members": "10",
        "de.learning_rate": "0.01",
        "de.epochs": "300",
        "de.batch_size": "128",
        "tune.left": "1e-3",
        "tune.right": "10.0",
        "report.original_units": "false",
    },
    "classification_blobs": {
        "data.n": "3000",
        "data.classes": "3",
        "data.separation": "3.0",
        "data.ood": "500",
        "split.test_fraction": "0.33",
        "net.width": "64",
        "net.activation": "tanh",
        "nn.learning_rate": "0.01",
        "nn.epochs": "300",
        "nn.batch_size": "128",
        "nuqls.members": "100",
        "nuqls.gamma": "0.05",
        "nuqls.learning_rate": "auto",
        "nuqls.momentum": "0.9",
        "nuqls.epochs": "200",
        "de.members": "10",
        "de.learning_rate": "0.01",
        "de.epochs": "100",
        "de.batch_size": "128",
        "base.draws": "10",
    },
    "intervals": {
        "data.n": "128",
        "data.dim": "2",
        "data.n_val": "64",
        "data.noise_std": "0.01",
        "net.width": "128",
        "net.activation": "tanh",
        "nn.learning_rate": "0.01",
        "nn.epochs": "500",
        "nuqls.members": "100",
        "nuqls.gamma": "0.01",
        "nuqls.learning_rate": "auto",
        "nuqls.momentum": "0.999",
        "nuqls.max_epochs": "20000",
        "nuqls.target_loss": "1e-10",
        "tune.left": "1e-4",
        "tune.right": "10.0",
        "width.multiplier": "1.0",
        "levels": "90,95",
        "repeats": "20",
    },
}


def _check_keys(cfg: ExperimentConfig):
    known = set(DEFAULTS[cfg.kind])
    unknown = set(cfg.values) - known - {"seed", "out"}
    if unknown:
        raise ConfigError(f"unknown config key(s) for {cfg.kind}: "
                          f"{', '.join(sorted(unknown))}")


def _f(cfg, key):
    return cfg.get_float(key, float(DEFAULTS[cfg.kind][key]))


def _i(cfg, key):
    return cfg.get_int(key, int(DEFAULTS[cfg.kind][key]))


def _s(cfg, key):
    return cfg.get_str(key, DEFAULTS[cfg.kind][key])


def _b(cfg, key):
    return cfg.get_bool(key, DEFAULTS[cfg.kind][key] == "true")


def _ilist(cfg, key):
    return cfg.get_int_list(
        key, tuple(int(v) for v in DEFAULTS[cfg.kind][key].split(",")))


def _linear_lr(raw, lin: LinearizedModel, data: Dataset, momentum: float) -> float:
    """Config learning rate for linearized training; 'auto' derives a stable one."""
    if str(raw).strip().lower() == "auto":
        lr = suggest_learning_rate(lin, data, momentum=momentum)
        logger.info("auto linearized learning rate: %.4g", lr)
        return lr
    return float(raw)


def defaults_reference() -> str:
    lines = ["Experiment configuration defaults", "=" * 34, ""]
    for kind, defaults in DEFAULTS.items():
        lines.append(f"[{kind}]")
        for key, val in defaults.items():
            lines.append(f"  {key} = {val}")
        lines.append("")
    lines.append("Common keys: kind, seed, out.")
    return "\n".join(lines)


def _seeds(master: int, n: int, tag: str) -> list[int]:
    # crc32 rather than hash(): stable across interpreter processes
    ss = np.random.SeedSequence([master, zlib.crc32(tag.encode())])
    return [int(s) for s in ss.generate_state(n)]


def _mean_ci95(values) -> tuple[float, float]:
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return float(values.mean()), 0.0
    sem = values.std(ddof=1) / np.sqrt(values.size)
    return float(values.mean()), float(1.96 * sem)


# ---------------------------------------------------------------------------
# convergence (synthetic Gaussian data, ensemble vs closed-form posterior)
# ---------------------------------------------------------------------------


def _convergence_realization(payload: dict) -> dict:
    """One ensemble realization on the shared trained network."""
    spec = MlpSpec(**payload["spec"])
    train_ds = Dataset(payload["train_X"], payload["train_Y"])
    lin = LinearizedModel(spec, payload["theta_hat"])
    gamma = payload["gamma"]
    checkpoints = tuple(payload["checkpoints"])

    sweep_opt = OptimizerSpec("gd", learning_rate=payload["sweep_lr"],
                              momentum=payload["sweep_momentum"], nesterov=True,
                              epochs=max(checkpoints), seed=0)
    sweep_cfg = NuqlsConfig(n_members=payload["sweep_members"], gamma=gamma,
                            opt=sweep_opt, seed=payload["sweep_seed"])
    sweep_ens = nuqls_sample(lin, train_ds, sweep_cfg, checkpoints=checkpoints)

    conv_opt = OptimizerSpec("gd", learning_rate=payload["conv_lr"],
                             momentum=payload["conv_momentum"], nesterov=True,
                             epochs=payload["conv_max_epochs"], seed=0,
                             target_loss=payload["conv_target"])
    conv_cfg = NuqlsConfig(n_members=payload["conv_members"], gamma=gamma,
                           opt=conv_opt, seed=payload["conv_seed"])
    conv_ens = nuqls_sample(lin, train_ds, conv_cfg)

    test_X = payload["test_X"]
    gp_var = payload["gp_var"]
    out = {"sev_epochs": {}, "loss_epochs": {}, "sev_members": {},
           "conv_loss_max": float(conv_ens.final_train_losses.max())}
    for ep in checkpoints:
        snap = NuqlsEnsemble(members=sweep_ens.snapshots[ep],
                             final_train_losses=np.zeros(sweep_cfg.n_members),
                             gamma=gamma, seed=0, loss_history=np.zeros(1),
                             config=sweep_cfg)
        stats = ensemble_stats(ensemble_predict(lin, snap, test_X))
        out["sev_epochs"][ep] = sev(stats.variance, gp_var)
        out["loss_epochs"][ep] = float(sweep_ens.loss_history[ep - 1])
    preds = ensemble_predict(lin, conv_ens, test_X)
    for s_count in payload["subsets"]:
        stats = ensemble_stats(preds[:s_count])
        out["sev_members"][s_count] = sev(stats.variance, gp_var)
        if s_count == payload["sweep_members"]:
            out["pooled_var"] = stats.variance[:, 0]
    if "pooled_var" not in out:
        out["pooled_var"] = ensemble_stats(preds).variance[:, 0]
    return out


def run_convergence(cfg: ExperimentConfig) -> dict:
    _check_keys(cfg)
    timings = {}
    t0 = time.perf_counter()
    n, d = _i(cfg, "data.n"), _i(cfg, "data.dim")
    train_ds, test_ds = gen_gaussian_synthetic(n, d, seed=cfg.seed)
    spec = MlpSpec(input_dim=d, output_dim=1, hidden_widths=(_i(cfg, "net.width"),),
                   activation=_s(cfg, "net.activation"), scaling="ntk", bias=False)
    theta0 = init_params(spec, "standard_normal", seed=_seeds(cfg.seed, 1, "init")[0])
    nn_opt = OptimizerSpec("gd", learning_rate=_f(cfg, "nn.learning_rate"),
                           momentum=_f(cfg, "nn.momentum"), nesterov=True,
                           epochs=_i(cfg, "nn.epochs"), seed=0)
    res = train(spec, theta0, train_ds, LossSpec("mse", "mean"), nn_opt)
    timings["nn_train_s"] = time.perf_counter() - t0

    t1 = time.perf_counter()
    gamma = _f(cfg, "nuqls.gamma")
    G = gram(spec, res.theta, train_ds.X)
    post = gp_posterior_regression(spec, res.theta, train_ds, test_ds.X,
                                   gamma=gamma, gram_=G)
    timings["gp_posterior_s"] = time.perf_counter() - t1

    lin0 = LinearizedModel(spec, res.theta)
    conv_lr = _linear_lr(_s(cfg, "converged.learning_rate"), lin0, train_ds,
                         _f(cfg, "converged.momentum"))

    realizations = _i(cfg, "realizations")
    checkpoints = _ilist(cfg, "sweep.checkpoints")
    subsets = _ilist(cfg, "converged.subsets")
    sweep_seeds = _seeds(cfg.seed, realizations, "sweep")
    conv_seeds = _seeds(cfg.seed, realizations, "converged")
    payloads = [{
        "spec": {"input_dim": d, "output_dim": 1,
                 "hidden_widths": spec.hidden_widths,
                 "activation": spec.activation, "scaling": "ntk", "bias": False},
        "train_X": train_ds.X, "train_Y": train_ds.Y, "test_X": test_ds.X,
        "theta_hat": res.theta, "gp_var": post.variance, "gamma": gamma,
        "checkpoints": checkpoints, "subsets": subsets,
        "sweep_members": _i(cfg, "sweep.members"),
        "sweep_lr": _f(cfg, "sweep.learning_rate"),
        "sweep_momentum": _f(cfg, "sweep.momentum"),
        "sweep_seed": sweep_seeds[r],
        "conv_members": _i(cfg, "converged.members"),
        "conv_lr": conv_lr,
        "conv_momentum": _f(cfg, "converged.momentum"),
        "conv_target": _f(cfg, "converged.target_loss"),
        "conv_max_epochs": _i(cfg, "converged.max_epochs"),
        "conv_seed": conv_seeds[r],
    } for r in range(realizations)]

    t2 = time.perf_counter()
    results = _map(cfg.workers, _convergence_realization, payloads)
    timings["ensembles_s"] = time.perf_counter() - t2

    epochs_sweep = []
    for ep in checkpoints:
        mean, ci = _mean_ci95([r["sev_epochs"][ep] for r in results])
        loss_mean = float(np.mean([r["loss_epochs"][ep] for r in results]))
        epochs_sweep.append({"epochs": ep, "sev_mean": mean, "sev_ci95": ci,
                             "train_loss_mean": loss_mean})
    realizations_sweep = []
    for s_count in subsets:
        mean, ci = _mean_ci95([r["sev_members"][s_count] for r in results])
        realizations_sweep.append({"members": s_count, "sev_mean": mean,
                                   "sev_ci95": ci})
    pooled_var = np.mean([r["pooled_var"] for r in results], axis=0)
    rel_err = float(np.mean(np.abs(pooled_var - post.variance[:, 0]))
                    / np.mean(post.variance[:, 0]))

    report = {
        "kind": "convergence",
        "seed": cfg.seed,
        "config": cfg.echo(),
        "metrics": {
            "nn_final_train_loss": float(res.loss_history[-1]),
            "gram_condition": G.condition_estimate,
            "gram_jitter": G.jitter_used,
            "oracle_rel_var_error": rel_err,
            "converged_member_loss_max": float(np.max(
                [r["conv_loss_max"] for r in results])),
        },
        "sev": {"epochs_sweep": epochs_sweep,
                "realizations_sweep": realizations_sweep,
                "gram_condition": G.condition_estimate},
        "timings": timings,
    }
    return report


def _map(workers: int, fn, payloads: list) -> list:
    if workers > 1 and len(payloads) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, payloads))
    return [fn(p) for p in payloads]


# ---------------------------------------------------------------------------
# toy cubic regression (uncertainty band)
# ---------------------------------------------------------------------------


def run_toy(cfg: ExperimentConfig) -> dict:
    _check_keys(cfg)
    timings = {}
    seeds = _seeds(cfg.seed, 4, "toy")
    noise = _f(cfg, "data.noise_std")
    raw_train = gen_cubic_toy(_i(cfg, "data.n"), seed=seeds[0], noise_std=noise)
    raw_val = gen_cubic_toy(_i(cfg, "data.n_val"), seed=seeds[1], noise_std=noise)
    train_ds, val_ds = normalize(raw_train, raw_val)
    norm = train_ds.normalization

    width = _i(cfg, "net.width")
    act = _s(cfg, "net.activation")
    spec = MlpSpec(input_dim=1, output_dim=1, hidden_widths=(width,), activation=act)
    t0 = time.perf_counter()
    nn_opt = OptimizerSpec("adam", learning_rate=_f(cfg, "nn.learning_rate"),
                           epochs=_i(cfg, "nn.epochs"),
                           scheduler=SchedulerSpec("polynomial",
                                                   power=_f(cfg, "nn.scheduler_power"),
                                                   total_iters=_i(cfg, "nn.epochs")),
                           seed=0)
    res = train(spec, init_params(spec, "xavier_normal", seed=seeds[2]),
                train_ds, LossSpec("mse", "mean"), nn_opt)
    timings["nn_train_s"] = time.perf_counter() - t0

    t1 = time.perf_counter()
    lin = LinearizedModel(spec, res.theta)
    momentum = _f(cfg, "nuqls.momentum")
    nuqls_opt = OptimizerSpec(
        "gd", learning_rate=_linear_lr(_s(cfg, "nuqls.learning_rate"),
                                       lin, train_ds, momentum),
        momentum=momentum, nesterov=True,
        epochs=_i(cfg, "nuqls.max_epochs"),
        target_loss=_f(cfg, "nuqls.target_loss"), seed=0)
    ncfg = NuqlsConfig(n_members=_i(cfg, "nuqls.members"),
                       gamma=_f(cfg, "nuqls.gamma"), opt=nuqls_opt, seed=seeds[3])
    ens = nuqls_sample(lin, train_ds, ncfg)
    tcfg = TernaryConfig(_f(cfg, "tune.left"), _f(cfg, "tune.right"))
    gamma_hat = tune_gamma(lin, ens, val_ds, tcfg)
    timings["nuqls_s"] = time.perf_counter() - t1
    timings["nuqls_total_s"] = timings["nn_train_s"] + timings["nuqls_s"]

    t2 = time.perf_counter()
    de_spec = MlpSpec(input_dim=1, output_dim=2, hidden_widths=(width,), activation=act)
    de_opt = OptimizerSpec("adam", learning_rate=_f(cfg, "de.learning_rate"),
                           epochs=_i(cfg, "de.epochs"), seed=0)
    de = de_train(de_spec, train_ds, _i(cfg, "de.members"), de_opt,
                  seed=_seeds(cfg.seed, 1, "toy-de")[0])
    timings["de_train_s"] = time.perf_counter() - t2

    grid = np.linspace(_f(cfg, "grid.lo"), _f(cfg, "grid.hi"), _i(cfg, "grid.points"))
    grid_n = norm.apply_x(grid[:, None])
    stats = ensemble_stats(ensemble_predict(lin, ens, grid_n),
                           gamma_scale=gamma_hat / ens.gamma)
    mean = norm.invert_y(stats.mean)[:, 0]
    sigma = norm.invert_y_std(np.sqrt(stats.variance))[:, 0]
    de_post = de_predict(de, grid_n)
    de_mean = norm.invert_y(de_post.mean)[:, 0]
    de_sigma = norm.invert_y_std(np.sqrt(de_post.variance))[:, 0]

    truth = grid ** 3
    contain = float(np.mean(np.abs(truth - mean) <= 3.0 * sigma))
    in_data = (np.abs(grid) >= 2.0) & (np.abs(grid) <= 4.0)
    sigma_in = float(np.median(sigma[in_data]))
    sigma_edge = float(min(sigma[0], sigma[-1]))

    report = {
        "kind": "toy",
        "seed": cfg.seed,
        "config": cfg.echo(),
        "metrics": {
            "nn_final_train_loss": float(res.loss_history[-1]),
            "nuqls_member_loss_max": float(ens.final_train_losses.max()),
            "gamma_hat": float(gamma_hat),
            "band_containment_3sigma": contain,
            "sigma_in_data_median": sigma_in,
            "sigma_at_edge": sigma_edge,
            "sigma_edge_ratio": sigma_edge / sigma_in,
            "de_band_containment_3sigma": float(np.mean(
                np.abs(truth - de_mean) <= 3.0 * de_sigma)),
        },
        "band": {
            "grid_x": grid,
            "panels": [
                {"label": "nuqls", "mean": mean, "sigma": sigma},
                {"label": "deep_ensemble", "mean": de_mean, "sigma": de_sigma},
            ],
            "train_x": raw_train.X[:, 0],
            "train_y": raw_train.Y[:, 0],
        },
        "timings": timings,
    }
    return report


# ---------------------------------------------------------------------------
# CSV regression pipeline
# ---------------------------------------------------------------------------


def run_regression_csv(cfg: ExperimentConfig) -> dict:
    _check_keys(cfg)
    timings = {}
    path = _s(cfg, "data.csv")
    if not path:
        raise ConfigError("regression_csv needs data.csv = <path>")
    targets = list(_ilist(cfg, "data.targets"))
    full = load_csv(path, target_columns=targets, header=_b(cfg, "data.header"))
    if full.Y.shape[1] != 1:
        raise ConfigError("pipeline handles a single target column")
    tr, va, te = split(full, (0.7, 0.15, 0.15),
                       seed=cfg.seed + _i(cfg, "split.seed_offset"))
    train_ds, val_ds, test_ds = normalize(tr, va, te)
    norm = train_ds.normalization

    width = _i(cfg, "net.width")
    act = _s(cfg, "net.activation")
    spec = MlpSpec(input_dim=train_ds.input_dim, output_dim=1,
                   hidden_widths=(width,), activation=act)
    seeds = _seeds(cfg.seed, 3, "regression")
    t0 = time.perf_counter()
    epochs = _i(cfg, "nn.epochs")
    nn_opt = OptimizerSpec("adam", learning_rate=_f(cfg, "nn.learning_rate"),
                           weight_decay=_f(cfg, "nn.weight_decay"), epochs=epochs,
                           batch_size=_i(cfg, "nn.batch_size"),
                           scheduler=SchedulerSpec("polynomial",
                                                   power=_f(cfg, "nn.scheduler_power"),
                                                   total_iters=10 * epochs),
                           seed=0)
    res = train(spec, init_params(spec, "xavier_normal", seed=seeds[0]),
                train_ds, LossSpec("mse", "mean"), nn_opt)
    timings["nn_train_s"] = time.perf_counter() - t0

    t1 = time.perf_counter()
    lin = LinearizedModel(spec, res.theta)
    momentum = _f(cfg, "nuqls.momentum")
    nuqls_opt = OptimizerSpec(
        "gd", learning_rate=_linear_lr(_s(cfg, "nuqls.learning_rate"),
                                       lin, train_ds, momentum),
        momentum=momentum, nesterov=True,
        epochs=_i(cfg, "nuqls.max_epochs"),
        target_loss=_f(cfg, "nuqls.target_loss"),
        plateau_stop=True, seed=0)
    ncfg = NuqlsConfig(n_members=_i(cfg, "nuqls.members"),
                       gamma=_f(cfg, "nuqls.gamma"), opt=nuqls_opt, seed=seeds[1])
    ens = nuqls_sample(lin, train_ds, ncfg)
    tcfg = TernaryConfig(_f(cfg, "tune.left"), _f(cfg, "tune.right"))
    gamma_hat = tune_gamma(lin, ens, val_ds, tcfg)
    timings["nuqls_s"] = time.perf_counter() - t1
    timings["nuqls_total_s"] = timings["nn_train_s"] + timings["nuqls_s"]

    t2 = time.perf_counter()
    de_spec = MlpSpec(input_dim=train_ds.input_dim, output_dim=2,
                      hidden_widths=(width,), activation=act)
    de_opt = OptimizerSpec("adam", learning_rate=_f(cfg, "de.learning_rate"),
                           epochs=_i(cfg, "de.epochs"),
                           batch_size=_i(cfg, "de.batch_size"), seed=0)
    de = de_train(de_spec, train_ds, _i(cfg, "de.members"), de_opt, seed=seeds[2])
    timings["de_train_s"] = time.perf_counter() - t2

    stats = ensemble_stats(ensemble_predict(lin, ens, test_ds.X),
                           gamma_scale=gamma_hat / ens.gamma)
    de_post = de_predict(de, test_ds.X)

    original_units = _b(cfg, "report.original_units")

    def block(mean, variance, tag):
        target = test_ds.Y[:, 0]
        if original_units:
            mean = norm.invert_y(mean)
            variance = variance * norm.y_std[0] ** 2
            target = norm.invert_y(test_ds.Y)[:, 0]
        return {
            f"{tag}.rmse": rmse(mean[:, 0], target),
            f"{tag}.nll": gaussian_nll_metric(mean[:, 0], variance[:, 0], target),
            f"{tag}.ece": ece_regression(mean[:, 0], variance[:, 0], target),
        }

    metrics = {
        "nn_final_train_loss": float(res.loss_history[-1]),
        "nuqls_member_loss_max": float(ens.final_train_losses.max()),
        "gamma_hat": float(gamma_hat),
        "units_original": float(original_units),
        "n_train": float(train_ds.n), "n_val": float(val_ds.n),
        "n_test": float(test_ds.n),
    }
    metrics.update(block(stats.mean, stats.variance, "nuqls"))
    metrics.update(block(de_post.mean, de_post.variance, "de"))

    return {"kind": "regression_csv", "seed": cfg.seed, "config": cfg.echo(),
            "metrics": metrics, "timings": timings}


# ---------------------------------------------------------------------------
# blobs classification with an OOD cluster (VMSP groups)
# ---------------------------------------------------------------------------


def _softmax_rows(z):
    z = z - z.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


def run_classification_blobs(cfg: ExperimentConfig) -> dict:
    _check_keys(cfg)
    timings = {}
    seeds = _seeds(cfg.seed, 5, "blobs")
    classes = _i(cfg, "data.classes")
    ds_raw, sample_ood = gen_blobs_classification(
        _i(cfg, "data.n"), classes=classes,
        separation=_f(cfg, "data.separation"), seed=seeds[0])
    test_fraction = _f(cfg, "split.test_fraction")
    n_test = int(round(test_fraction * ds_raw.n))
    perm = np.random.default_rng(seeds[1]).permutation(ds_raw.n)
    test_raw = ds_raw.subset(perm[:n_test], split="test")
    train_raw = ds_raw.subset(perm[n_test:], split="train")
    train_ds, test_ds = normalize(train_raw, test_raw)
    ood_X = train_ds.normalization.apply_x(sample_ood(_i(cfg, "data.ood"),
                                                      ood_seed=seeds[2]))

    spec = MlpSpec(input_dim=train_ds.input_dim, output_dim=classes,
                   hidden_widths=(_i(cfg, "net.width"),),
                   activation=_s(cfg, "net.activation"))
    t0 = time.perf_counter()
    nn_opt = OptimizerSpec("adam", learning_rate=_f(cfg, "nn.learning_rate"),
                           epochs=_i(cfg, "nn.epochs"),
                           batch_size=_i(cfg, "nn.batch_size"), seed=0)
    res = train(spec, init_params(spec, "xavier_normal", seed=seeds[3]),
                train_ds, LossSpec("cross_entropy", "mean"), nn_opt)
    timings["nn_train_s"] = time.perf_counter() - t0

    from .mlp import forward_batch

    logits_test = forward_batch(spec, res.theta, test_ds.X)
    pred_test = logits_test.argmax(axis=1)
    correct = pred_test == test_ds.Y
    accuracy = float(np.mean(correct))

    t1 = time.perf_counter()
    lin = LinearizedModel(spec, res.theta)
    momentum = _f(cfg, "nuqls.momentum")
    nuqls_opt = OptimizerSpec(
        "gd", learning_rate=_linear_lr(_s(cfg, "nuqls.learning_rate"),
                                       lin, train_ds, momentum),
        momentum=momentum, nesterov=True,
        epochs=_i(cfg, "nuqls.epochs"), seed=0)
    ncfg = NuqlsConfig(n_members=_i(cfg, "nuqls.members"),
                       gamma=_f(cfg, "nuqls.gamma"), opt=nuqls_opt,
                       loss=LossSpec("cross_entropy", "mean"), seed=seeds[4])
    ens = nuqls_sample(lin, train_ds, ncfg)
    timings["nuqls_s"] = time.perf_counter() - t1
    timings["nuqls_total_s"] = timings["nn_train_s"] + timings["nuqls_s"]

    t2 = time.perf_counter()
    de_opt = OptimizerSpec("adam", learning_rate=_f(cfg, "de.learning_rate"),
                           epochs=_i(cfg, "de.epochs"),
                           batch_size=_i(cfg, "de.batch_size"), seed=0)
    de = de_train(spec, train_ds, _i(cfg, "de.members"), de_opt,
                  seed=_seeds(cfg.seed, 1, "blobs-de")[0])
    timings["de_train_s"] = time.perf_counter() - t2

    eval_X = np.concatenate([test_ds.X, ood_X])
    groups = {
        "id_correct": np.flatnonzero(correct),
        "id_incorrect": np.flatnonzero(~correct),
        "ood": test_ds.n + np.arange(ood_X.shape[0]),
    }

    def vmsp_by_group(member_probs):
        mean_probs = member_probs.mean(axis=0)
        values = vmsp_samples(member_probs, mean_probs)
        return {g: values[idx] for g, idx in groups.items()}

    nuqls_probs = _softmax_rows(ensemble_predict(lin, ens, eval_X))
    de_probs = de_member_probs(de, eval_X)
    base_rng = np.random.default_rng(_seeds(cfg.seed, 1, "base")[0])
    base_probs = _softmax_rows(base_rng.standard_normal(
        (_i(cfg, "base.draws"), eval_X.shape[0], classes)))

    vmsp = {"nuqls": vmsp_by_group(nuqls_probs),
            "de": vmsp_by_group(de_probs),
            "base": vmsp_by_group(base_probs)}

    metrics = {"accuracy": accuracy,
               "nn_final_train_loss": float(res.loss_history[-1]),
               "n_id_correct": float(groups["id_correct"].size),
               "n_id_incorrect": float(groups["id_incorrect"].size),
               "n_ood": float(groups["ood"].size)}
    id_probs = nuqls_probs.mean(axis=0)[:test_ds.n]
    metrics["nuqls.test_ece"] = ece_classification(id_probs, test_ds.Y)
    for method, by_group in vmsp.items():
        for group, values in by_group.items():
            if values.size >= 1:
                metrics[f"{method}.median_{group}"] = median(values)
            if values.size >= 3:
                metrics[f"{method}.skew_{group}"] = sample_skew(values)

    return {"kind": "classification_blobs", "seed": cfg.seed,
            "config": cfg.echo(), "metrics": metrics,
            "vmsp": {m: {g: list(v) for g, v in by.items()}
                     for m, by in vmsp.items()},
            "timings": timings}


# ---------------------------------------------------------------------------
# confidence-interval harness (repeat-over-seeds coverage/width)
# ---------------------------------------------------------------------------


def _intervals_repeat(payload: dict) -> dict:
    d = payload["d"]
    data = gen_sin_sum(payload["n"], d=d, seed=payload["data_seed"],
                       noise_std=payload["noise_std"])
    val = gen_sin_sum(payload["n_val"], d=d, seed=payload["val_seed"],
                      noise_std=payload["noise_std"])
    train_ds, val_ds = normalize(data, val)
    norm = train_ds.normalization
    spec = MlpSpec(input_dim=d, output_dim=1, hidden_widths=(payload["width"],),
                   activation=payload["activation"])
    nn_opt = OptimizerSpec("adam", learning_rate=payload["nn_lr"],
                           epochs=payload["nn_epochs"], seed=0)
    res = train(spec, init_params(spec, "xavier_normal", seed=payload["init_seed"]),
                train_ds, LossSpec("mse", "mean"), nn_opt)
    lin = LinearizedModel(spec, res.theta)
    opt = OptimizerSpec("gd",
                        learning_rate=_linear_lr(payload["nuqls_lr"], lin,
                                                 train_ds,
                                                 payload["nuqls_momentum"]),
                        momentum=payload["nuqls_momentum"], nesterov=True,
                        epochs=payload["nuqls_max_epochs"],
                        target_loss=payload["nuqls_target"],
                        plateau_stop=True, seed=0)
    ncfg = NuqlsConfig(n_members=payload["members"], gamma=payload["gamma"],
                       opt=opt, seed=payload["ens_seed"])
    ens = nuqls_sample(lin, train_ds, ncfg)
    tcfg = TernaryConfig(payload["tune_left"], payload["tune_right"])
    gamma_hat = tune_gamma(lin, ens, val_ds, tcfg)

    xstar = norm.apply_x(np.full((1, d), 0.1))
    stats = ensemble_stats(ensemble_predict(lin, ens, xstar),
                           gamma_scale=gamma_hat / ens.gamma)
    mean = float(norm.invert_y(stats.mean)[0, 0])
    sdev = float(norm.invert_y_std(np.sqrt(stats.variance))[0, 0])
    return {"mean": mean, "sd": sdev}


def run_intervals(cfg: ExperimentConfig) -> dict:
    _check_keys(cfg)
    timings = {}
    repeats = _i(cfg, "repeats")
    d = _i(cfg, "data.dim")
    data_seeds = _seeds(cfg.seed, repeats, "intervals-data")
    val_seeds = _seeds(cfg.seed, repeats, "intervals-val")
    init_seeds = _seeds(cfg.seed, repeats, "intervals-init")
    ens_seeds = _seeds(cfg.seed, repeats, "intervals-ens")
    payloads = [{
        "n": _i(cfg, "data.n"), "n_val": _i(cfg, "data.n_val"), "d": d,
        "noise_std": _f(cfg, "data.noise_std"),
        "width": _i(cfg, "net.width"), "activation": _s(cfg, "net.activation"),
        "nn_lr": _f(cfg, "nn.learning_rate"), "nn_epochs": _i(cfg, "nn.epochs"),
        "members": _i(cfg, "nuqls.members"), "gamma": _f(cfg, "nuqls.gamma"),
        "nuqls_lr": _s(cfg, "nuqls.learning_rate"),
        "nuqls_momentum": _f(cfg, "nuqls.momentum"),
        "nuqls_max_epochs": _i(cfg, "nuqls.max_epochs"),
        "nuqls_target": _f(cfg, "nuqls.target_loss"),
        "tune_left": _f(cfg, "tune.left"), "tune_right": _f(cfg, "tune.right"),
        "data_seed": data_seeds[r], "val_seed": val_seeds[r],
        "init_seed": init_seeds[r], "ens_seed": ens_seeds[r],
    } for r in range(repeats)]

    t0 = time.perf_counter()
    results = _map(cfg.workers, _intervals_repeat, payloads)
    timings["repeats_s"] = time.perf_counter() - t0

    truth = d * np.sin(0.1)
    means = np.array([r["mean"] for r in results])
    sds = np.array([r["sd"] for r in results]) * _f(cfg, "width.multiplier")
    rows = []
    for level_pct in _ilist(cfg, "levels"):
        level = level_pct / 100.0
        coverage, mean_width = interval_coverage(means, sds ** 2,
                                                 np.full(means.size, truth), level)
        rows.append({"method": "nuqls", "level": level,
                     "coverage": coverage, "mean_width": mean_width})
    metrics = {"mean_prediction": float(means.mean()),
               "true_value": float(truth), "repeats": float(repeats)}
    for row in rows:
        metrics[f"nuqls.coverage_{int(round(row['level'] * 100))}"] = row["coverage"]
        metrics[f"nuqls.width_{int(round(row['level'] * 100))}"] = row["mean_width"]

    return {"kind": "intervals", "seed": cfg.seed, "config": cfg.echo(),
            "metrics": metrics, "intervals": {"rows": rows}, "timings": timings}


RUNNERS = {
    "convergence": run_convergence,
    "toy": run_toy,
    "regression_csv": run_regression_csv,
    "classification_blobs": run_classification_blobs,
    "intervals": run_intervals,
}


def run_experiment(cfg: ExperimentConfig):
    """Run the configured experiment and write its report files."""
    report = RUNNERS[cfg.kind](cfg)
    path = report_write(report, cfg.out_dir)
    logger.info("wrote %s", path)
    return report, path
