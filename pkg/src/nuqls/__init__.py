"""Post-hoc uncertainty quantification via ensembles of linearized networks.

Train a network, linearize it around the trained parameters, and sample the
predictive distribution by re-training cheap linear models from Gaussian
perturbations of those parameters.  For square loss this provably samples
the Gaussian-process posterior whose kernel is the empirical neural tangent
kernel at the trained parameters; the closed form of that posterior is
implemented alongside so the two routes can be cross-validated.
"""

from .data import Dataset, gen_blobs_classification, gen_cubic_toy, gen_gaussian_synthetic, load_csv, normalize, split
from .deep_ensemble import DeepEnsemble, de_member_probs, de_predict, de_train
from .linearize import (
    LinearizedModel,
    NuqlsConfig,
    NuqlsEnsemble,
    ensemble_predict,
    ensemble_stats,
    load_ensemble,
    nuqls_sample,
    save_ensemble,
    suggest_learning_rate,
)
from .metrics import UqReport
from .mlp import MlpSpec, forward, forward_batch, init_params, jacobian, jvp, vjp
from .ntk import (
    NtkGram,
    PosteriorSummary,
    gp_posterior_general,
    gp_posterior_regression,
    gram,
    ntk_block,
    nullspace_residual,
    sev,
)
from .training import LossSpec, OptimizerSpec, SchedulerSpec, TrainResult, loss_value, train
from .tuning import TernaryConfig, ternary_search, tune_gamma

__version__ = "0.1.0"
