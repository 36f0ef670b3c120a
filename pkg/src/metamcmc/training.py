"""Meta-training of the preconditioning networks.

The training signal is a time-accumulated variational bound estimated from
parallel chains: energy terms come straight from the target, entropy
gradients from a ridge-regularized kernel score estimator.  Gradients with
respect to the network weights are reverse-accumulated through the unrolled
update maps, with the network inputs, the divergence correction, and the
drive gradients all held constant; the injected noise is reparameterized so
its amplitude stays differentiable.  Sensitivities reset at the
backpropagation window boundaries while the chain state carries on.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .dynamics import SamplerState, StepConfig, StepRecord, init_sampler_state, nnsghmc_step
from .errors import ContractError, DivergenceError, NumericError, TrainingError
from .nets import (
    MetaNets,
    PreprocessStats,
    _paired_input,
    _triple_input,
    mlp_forward,
    mlp_weight_vjp,
    sigmoid,
    softplus,
)


def stein_score(samples: np.ndarray, bandwidth_multiplier: float = 0.5,
                ridge: float = 1e-3) -> np.ndarray:
    """Estimate the score of the sampling distribution at each sample.

    Uses an RBF kernel whose width is ``bandwidth_multiplier`` times the
    median pairwise distance, and solves the ridge-regularized linear system
    ``(K + ridge I) G = -<grad, K>``.  Each row of the result approximates
    the log-density gradient at that sample.  A single sample yields zeros
    (the kernel gradient vanishes at coincident points).
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise ContractError("samples must be a (count, dim) matrix")
    if not np.all(np.isfinite(samples)):
        raise ContractError("samples must be finite")
    if ridge <= 0:
        raise ContractError("ridge must be positive")
    n = samples.shape[0]
    if n == 1:
        return np.zeros_like(samples)
    sq = np.sum(samples * samples, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * samples @ samples.T
    np.maximum(d2, 0.0, out=d2)
    iu = np.triu_indices(n, k=1)
    median = float(np.median(np.sqrt(d2[iu])))
    if median < 1e-12:
        raise NumericError(
            "samples are (nearly) all identical: kernel bandwidth collapsed; "
            "raise the ridge after de-duplicating or thinning differently")
    sigma = bandwidth_multiplier * median
    kern = np.exp(-d2 / (2.0 * sigma * sigma))
    row_sums = kern.sum(axis=1)
    grad_k = (row_sums[:, None] * samples - kern @ samples) / (sigma * sigma)
    try:
        return -np.linalg.solve(kern + ridge * np.eye(n), grad_k)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"Stein system is singular despite ridge={ridge}; "
                           "increase the ridge") from exc


def _bound_terms(u_values, thetas, scores):
    """Energy plus linearized entropy surrogate per sample; the surrogate's
    position gradient is the estimated score, which is all the optimizer
    consumes."""
    return u_values + np.sum(scores * thetas, axis=-1)


def cross_chain_loss(u_values, grad_values, thetas, scores):
    """Time-averaged negative bound over per-step cross-chain sample sets.

    Arguments are stacked over retained time slices: ``u_values`` is
    ``(T', K)``, the rest ``(T', K, D)``.  Returns the scalar loss and the
    adjoint seed for every retained sample, with energy gradients and scores
    treated as constants.
    """
    u_values = np.asarray(u_values, dtype=np.float64)
    thetas = np.asarray(thetas, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    grad_values = np.asarray(grad_values, dtype=np.float64)
    if u_values.ndim != 2:
        raise ContractError("u_values must be (slices, chains)")
    n_slices, n_chains = u_values.shape
    if n_slices == 0:
        return 0.0, np.zeros_like(thetas)
    if n_chains < 2:
        raise ContractError("cross-chain loss needs at least 2 chains")
    loss = float(np.mean(_bound_terms(u_values, thetas, scores)))
    seeds = (grad_values + scores) / (n_slices * n_chains)
    return loss, seeds


def in_chain_loss(u_values, grad_values, thetas, scores):
    """Negative bound of the thinning-averaged within-chain distribution.

    Arguments are stacked as ``(retained_times, sub_chains, ...)``; the
    scores must come from a pooled estimate over all retained samples.
    """
    u_values = np.asarray(u_values, dtype=np.float64)
    thetas = np.asarray(thetas, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    grad_values = np.asarray(grad_values, dtype=np.float64)
    if u_values.ndim != 2:
        raise ContractError("u_values must be (times, chains)")
    n_times, n_chains = u_values.shape
    if n_times < 2:
        raise ContractError("in-chain loss needs at least 2 retained time points per chain")
    loss = float(np.mean(_bound_terms(u_values, thetas, scores)))
    seeds = (grad_values + scores) / (n_times * n_chains)
    return loss, seeds


@dataclass
class TrainConfig:
    """Schedule and loss settings for meta-training.

    A sub-epoch simulates ``t_unroll`` steps and applies one optimizer
    update; within it, sensitivities are truncated every ``bptt_steps``
    steps.  Chains continue across sub-epochs and are re-initialized at
    epoch boundaries.  ``w_in = 0`` disables the in-chain machinery
    entirely.
    """

    chains: int = 50
    t_unroll: int = 100
    bptt_steps: int = 20
    cross_stride: int = 2
    in_burn_in: int = 50
    in_chain_count: int = 5
    in_thin: int = 3
    stein_ridge: float = 1e-3
    bandwidth_mult: float = 0.5
    lr: float = 5e-4
    epochs: int = 100
    sub_epochs: int = 4
    w_cross: float = 1.0
    w_in: float = 1.0
    eta: float = 0.01
    gamma_mode: str = "exact"
    noise_on: bool = True
    max_divergences: int = 3
    theta_init: tuple = ("uniform", 0.0, 6.0)
    momentum_init_std: float = 1.0

    def __post_init__(self):
        if self.chains < 2:
            raise ContractError("meta-training needs at least 2 chains")
        if self.in_thin < 1:
            raise ContractError("thinning stride must be >= 1")
        if self.stein_ridge <= 0:
            raise ContractError("stein_ridge must be positive")
        if self.bptt_steps < 1:
            raise ContractError("bptt_steps must be >= 1")

    def step_config(self) -> StepConfig:
        # Curl clamping stays off while training; it is an evaluation guard.
        return StepConfig(eta=self.eta, gamma_mode=self.gamma_mode,
                          noise_on=self.noise_on, clamp=False)


@dataclass
class UnrollTape:
    """Everything recorded over one unroll that the reverse pass (and its
    finite-difference oracle) treats as constant."""

    records: list            # StepRecord per step, length T
    seeds: np.ndarray        # (T + 1, K, D); seeds[0] is always zero
    cross_slices: list       # 1-based step indices entering the cross-chain bound
    in_slices: list          # 1-based step indices entering the in-chain bound
    in_chain_idx: np.ndarray | None
    eta: float
    in_chain_used: bool


@dataclass
class UnrollResult:
    loss: float
    grad: np.ndarray
    state: SamplerState
    tape: Optional[UnrollTape] = None


def _init_distribution(spec, shape, rng):
    kind = spec[0]
    if kind == "uniform":
        return rng.uniform(spec[1], spec[2], size=shape)
    if kind == "normal":
        return spec[1] * rng.standard_normal(shape)
    raise ContractError(f"unknown init distribution {spec!r}")


def _backward_window(nets: MetaNets, stats: PreprocessStats, records, seeds, eta, lo, hi):
    """Reverse accumulation over steps ``lo+1 .. hi`` (1-based).

    Adjoints start at zero at the window end; contributions flow through the
    algebraic update terms only, since all network inputs were recorded as
    constants.  Returns the flat gradient contribution of this window.
    """
    grad_q = np.zeros(nets.q_net.size)
    grad_d = np.zeros(nets.d_net.size)
    lam_theta = np.zeros_like(seeds[hi])
    lam_p = np.zeros_like(seeds[hi])
    for t in range(hi, lo, -1):
        rec: StepRecord = records[t - 1]
        lam_theta = lam_theta + seeds[t]
        p_in = rec.p_old / stats.momentum_scale
        x1 = _paired_input(rec.u_scaled_old, p_in)
        x2q = _paired_input(rec.u_scaled_new, p_in)
        fq1_raw, _ = mlp_forward(nets.q_net, x1)
        fq1 = nets.beta + fq1_raw.reshape(rec.p_old.shape)
        fq2_raw, _ = mlp_forward(nets.q_net, x2q)
        fq2 = nets.beta + fq2_raw.reshape(rec.p_old.shape)
        if nets.constant_mode:
            fd2 = np.zeros_like(fq2)
        else:
            x2d = _triple_input(rec.u_scaled_new, p_in, rec.grad_new / stats.gradient_scale)
            fd2_raw, _ = mlp_forward(nets.d_net, x2d)
            fd2 = nets.d_scale * softplus(fd2_raw.reshape(rec.p_old.shape))
        df2 = nets.alpha * fq2 * fq2 + fd2 + nets.c

        # position stage: theta_t = theta_{t-1} + eta * fq1 * p_{t-1} + const
        w1 = (eta * rec.p_old * lam_theta).ravel()
        grad_q += mlp_weight_vjp(nets.q_net, x1, w1)

        # momentum stage: friction, drive, and noise amplitude
        w_df = lam_p * (-eta * rec.p_old) + lam_p * rec.xi * np.sqrt(eta / (2.0 * df2))
        w_q2 = -eta * rec.grad_new * lam_p + 2.0 * nets.alpha * fq2 * w_df
        grad_q += mlp_weight_vjp(nets.q_net, x2q, w_q2.ravel())
        if not nets.constant_mode:
            w_d2 = w_df * nets.d_scale * sigmoid(fd2_raw.reshape(rec.p_old.shape))
            grad_d += mlp_weight_vjp(nets.d_net, x2d, w_d2.ravel())

        lam_p, lam_theta = eta * fq1 * lam_theta + (1.0 - eta * df2) * lam_p, lam_theta
    return np.concatenate([grad_q, grad_d])


def unroll_and_grad(model, nets: MetaNets, stats: PreprocessStats, cfg: TrainConfig,
                    state: SamplerState, rng: np.random.Generator,
                    return_tape: bool = False, t_unroll: Optional[int] = None) -> UnrollResult:
    """Simulate ``t_unroll`` steps from ``state`` and reverse-accumulate the
    loss gradient with respect to the flattened network weights."""
    n_steps = cfg.t_unroll if t_unroll is None else t_unroll
    if n_steps == 0:
        return UnrollResult(loss=0.0, grad=np.zeros(nets.n_params), state=state,
                            tape=UnrollTape([], np.zeros((1,) + state.theta.shape),
                                            [], [], None, cfg.eta, False) if return_tape else None)

    step_cfg = cfg.step_config()
    base_step = state.step
    records: list[StepRecord] = []
    for _ in range(n_steps):
        state, rec = nnsghmc_step(state, model, nets, stats, step_cfg, rng)
        records.append(rec)

    n_chains, dim = state.theta.shape
    seeds = np.zeros((n_steps + 1, n_chains, dim))
    total_loss = 0.0

    cross_slices = []
    if cfg.w_cross != 0.0:
        cross_slices = list(range(cfg.cross_stride, n_steps + 1, cfg.cross_stride))
        if cross_slices:
            u_sl, g_sl, th_sl, sc_sl = [], [], [], []
            for t in cross_slices:
                theta_t = records[t - 1].theta_new
                u_l, g_l = model.loss_terms(theta_t, base_step + t)
                sc = stein_score(theta_t, cfg.bandwidth_mult, cfg.stein_ridge)
                u_sl.append(u_l)
                g_sl.append(g_l)
                th_sl.append(theta_t)
                sc_sl.append(sc)
            loss_c, seed_c = cross_chain_loss(np.stack(u_sl), np.stack(g_sl),
                                              np.stack(th_sl), np.stack(sc_sl))
            total_loss += cfg.w_cross * loss_c
            for i, t in enumerate(cross_slices):
                seeds[t] += cfg.w_cross * seed_c[i]

    in_slices: list[int] = []
    in_idx = None
    in_chain_used = False
    if cfg.w_in != 0.0:
        in_slices = list(range(cfg.in_burn_in + cfg.in_thin, n_steps + 1, cfg.in_thin))
        if len(in_slices) >= 2:
            in_chain_used = True
            k_sub = min(cfg.in_chain_count, n_chains)
            in_idx = np.sort(rng.choice(n_chains, size=k_sub, replace=False))
            th = np.stack([records[t - 1].theta_new[in_idx] for t in in_slices])
            pooled = th.reshape(-1, dim)
            sc = stein_score(pooled, cfg.bandwidth_mult, cfg.stein_ridge)
            sc = sc.reshape(th.shape)
            u_sl, g_sl = [], []
            for t in in_slices:
                u_l, g_l = model.loss_terms(records[t - 1].theta_new[in_idx], base_step + t)
                u_sl.append(u_l)
                g_sl.append(g_l)
            loss_i, seed_i = in_chain_loss(np.stack(u_sl), np.stack(g_sl), th, sc)
            total_loss += cfg.w_in * loss_i
            for i, t in enumerate(in_slices):
                seeds[t][in_idx] += cfg.w_in * seed_i[i]

    grad = np.zeros(nets.n_params)
    hi = n_steps
    while hi > 0:
        lo = max(0, hi - cfg.bptt_steps)
        grad += _backward_window(nets, stats, records, seeds, cfg.eta, lo, hi)
        hi = lo

    if not (np.isfinite(total_loss) and np.all(np.isfinite(grad))):
        raise TrainingError(f"non-finite loss or gradient after step {base_step + n_steps}")

    tape = None
    if return_tape:
        tape = UnrollTape(records=records, seeds=seeds, cross_slices=cross_slices,
                          in_slices=in_slices, in_chain_idx=in_idx, eta=cfg.eta,
                          in_chain_used=in_chain_used)
    return UnrollResult(loss=total_loss, grad=grad, state=state, tape=tape)


@dataclass
class AdamMoments:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @staticmethod
    def zeros(n: int) -> "AdamMoments":
        return AdamMoments(m=np.zeros(n), v=np.zeros(n), t=0)


def adam_step(phi: np.ndarray, grad: np.ndarray, moments: AdamMoments, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected first/second-moment update; returns new (phi, moments)."""
    if phi.shape != grad.shape or phi.shape != moments.m.shape:
        raise ContractError("phi, grad, and moments must share a shape")
    t = moments.t + 1
    m = beta1 * moments.m + (1.0 - beta1) * grad
    v = beta2 * moments.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    phi_new = phi - lr * m_hat / (np.sqrt(v_hat) + eps)
    return phi_new, AdamMoments(m=m, v=v, t=t)


@dataclass
class TrainLogRow:
    update: int
    loss: float
    grad_norm: float
    wall_time: float


def meta_train(model, nets: MetaNets, stats: PreprocessStats, cfg: TrainConfig,
               rng: np.random.Generator,
               callback: Optional[Callable[[TrainLogRow], None]] = None):
    """Full training loop: epochs of sub-epoch unrolls with Adam updates.

    Chain positions and momenta are re-drawn at every epoch boundary; within
    an epoch the chains continue from where the previous unroll left them
    (with sensitivities truncated).  After ``max_divergences`` consecutive
    diverged sub-epochs the loop aborts.

    Returns the trained nets and the per-update log.
    """
    moments = AdamMoments.zeros(nets.n_params)
    log: list[TrainLogRow] = []
    start = time.perf_counter()
    consecutive_failures = 0
    update = 0
    for _ in range(cfg.epochs):
        theta0 = _init_distribution(cfg.theta_init, (cfg.chains, model.dim), rng)
        p0 = cfg.momentum_init_std * rng.standard_normal((cfg.chains, model.dim))
        state = init_sampler_state(model, theta0, p0, rng, stats)
        for _ in range(cfg.sub_epochs):
            update += 1
            try:
                result = unroll_and_grad(model, nets, stats, cfg, state, rng)
            except (DivergenceError, TrainingError):
                consecutive_failures += 1
                if consecutive_failures > cfg.max_divergences:
                    raise TrainingError(
                        f"aborting after {consecutive_failures} consecutive "
                        f"diverged updates (update {update})") from None
                theta0 = _init_distribution(cfg.theta_init, (cfg.chains, model.dim), rng)
                p0 = cfg.momentum_init_std * rng.standard_normal((cfg.chains, model.dim))
                state = init_sampler_state(model, theta0, p0, rng, stats)
                continue
            consecutive_failures = 0
            state = result.state
            phi, moments = adam_step(nets.flat_phi(), result.grad, moments, cfg.lr)
            nets.set_flat_phi(phi)
            row = TrainLogRow(update=update, loss=result.loss,
                              grad_norm=float(np.linalg.norm(result.grad)),
                              wall_time=time.perf_counter() - start)
            log.append(row)
            if callback is not None:
                callback(row)
    return nets, log
