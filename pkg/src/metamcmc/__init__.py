"""Trainable stochastic-gradient MCMC toolkit.

A Hamiltonian-style sampler whose per-coordinate curl and diffusion
diagonals come from small shared neural networks, the meta-training
procedure that fits those networks from parallel-chain rollouts, classic
baselines (SGLD, SGHMC, preconditioned Langevin), and diagnostics.
"""

from .diagnostics import SampleSet, classify_eval, ess, fit_gaussian_kl, mean_chain_ess
from .dynamics import (
    BaselineHyper,
    BaselineSampler,
    NnsghmcSampler,
    SamplerState,
    StepConfig,
    baseline_step,
    build_preconditioners,
    gamma,
    init_baseline_state,
    init_sampler_state,
    nnsghmc_step,
    run_chains,
)
from .errors import (
    CalibrationError,
    ConfigError,
    ContractError,
    DivergenceError,
    NumericError,
    TrainingError,
)
from .nets import (
    MetaNets,
    MlpParams,
    PreprocessStats,
    calibrate_preprocess,
    f_d,
    f_q,
    load_checkpoint,
    net_partials,
    save_checkpoint,
)
from .targets import (
    BnnTarget,
    GaussianTarget,
    energy,
    grad_energy,
    load_dataset,
    random_correlated_gaussian,
    random_diagonal_gaussian,
    stochastic_energy_grad,
    synthetic_classification,
    write_dataset_csv,
)
from .training import (
    AdamMoments,
    TrainConfig,
    adam_step,
    cross_chain_loss,
    in_chain_loss,
    meta_train,
    stein_score,
    unroll_and_grad,
)

__version__ = "0.1.0"
