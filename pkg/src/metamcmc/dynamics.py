"""Sampler dynamics: the neural preconditioned Hamiltonian step plus baselines.

State layout is chain-major: ``theta`` and ``momentum`` are ``(chains, dim)``
arrays advanced in lock-step by vectorized numpy ops.  One stochastic
energy/gradient evaluation happens per step, at the freshly updated
position; its outputs are carried on the state so the next step can feed
them to the networks without re-evaluating.

The update follows a two-stage order: the position moves with the
current-step network outputs, then the networks are re-evaluated with the
new energy for the momentum update.  The divergence correction (``gamma``)
is evaluated at the pre-step state, either from exact network partials or
from one-step-back secants using cached network outputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ContractError, DivergenceError
from .nets import (
    IDENTITY_STATS,
    MetaNets,
    PreprocessStats,
    f_d,
    f_q,
    net_partials,
)
from .targets import ModelEval


@dataclass
class StepConfig:
    """Knobs of one sampler configuration.

    ``gamma_mode`` selects how the divergence correction is computed:
    ``"exact"`` (network partials), ``"fd"`` (secants from cached outputs,
    one extra network forward per step), or ``"off"``.  ``fd_floor`` guards
    the secant denominators; coordinates below it fall back to the exact
    partial.  ``clamp`` applies the curl output clamp (sampling yes,
    meta-training no).
    """

    eta: float
    gamma_mode: str = "exact"
    noise_on: bool = True
    fd_floor: float = 1e-8
    clamp: bool = True

    def __post_init__(self):
        if self.eta <= 0:
            raise ContractError("step size eta must be positive")
        if self.gamma_mode not in ("exact", "fd", "off"):
            raise ContractError(f"unknown gamma_mode {self.gamma_mode!r}")
        if self.fd_floor <= 0:
            raise ContractError("fd_floor must be positive")


@dataclass
class FdCache:
    """Previous-step quantities enabling the secant divergence correction.

    ``fq_hat`` is the curl net at (old energy, new momentum); ``fd_hat`` is
    the diffusion net at (new energy, old momentum, new gradient) — exactly
    the stage-two evaluation of the step that produced this cache.
    """

    u: np.ndarray        # (K,)   stochastic energy at the previous position
    p: np.ndarray        # (K, D) previous momentum
    fq: np.ndarray       # (K, D)
    fd: np.ndarray       # (K, D)
    fq_hat: np.ndarray   # (K, D)
    fd_hat: np.ndarray   # (K, D)
    grad: np.ndarray     # (K, D) previous stochastic gradient


@dataclass
class SamplerState:
    """Augmented state of a block of chains plus cached evaluations."""

    theta: np.ndarray     # (K, D)
    momentum: np.ndarray  # (K, D)
    step: int
    eval: ModelEval       # model evaluation at ``theta``
    cache: Optional[FdCache] = None


@dataclass
class StepRecord:
    """Per-step quantities recorded for meta-training and its oracles.

    Everything here is treated as a constant during backpropagation except
    where the meta-parameters re-enter through the network forward passes.
    """

    p_old: np.ndarray         # momentum entering the step
    u_scaled_old: np.ndarray  # energy input at the old position
    u_scaled_new: np.ndarray  # energy input at the new position
    grad_new: np.ndarray      # stochastic gradient driving the momentum update
    u_new: np.ndarray         # stochastic energy at the new position
    xi: np.ndarray            # unit normals behind the injected noise
    gamma_theta: np.ndarray
    gamma_p: np.ndarray
    theta_new: np.ndarray


def init_sampler_state(model, theta0, p0, rng, stats: PreprocessStats = IDENTITY_STATS,
                       batch_index: int = 0) -> SamplerState:
    """Evaluate the model at the initial positions and wrap everything up."""
    theta0 = np.atleast_2d(np.asarray(theta0, dtype=np.float64))
    p0 = np.atleast_2d(np.asarray(p0, dtype=np.float64))
    if theta0.shape != p0.shape:
        raise ContractError("theta0 and p0 must have matching shapes")
    ev = model.evaluate(theta0, batch_index, rng, stats)
    return SamplerState(theta=theta0.copy(), momentum=p0.copy(), step=0, eval=ev)


def build_preconditioners(nets: MetaNets, u_scaled, p, grad,
                          stats: PreprocessStats = IDENTITY_STATS, clamp: bool = True):
    """Diagonals of the curl and diffusion blocks at the given state.

    ``D_f = alpha * Q_f**2 + f_D + c`` entrywise; the implied full matrices
    are skew-symmetric and positive semi-definite by construction.
    """
    qf = f_q(nets, u_scaled, p, stats.momentum_scale, clamp=clamp)
    fd_val = f_d(nets, u_scaled, p, grad, stats.momentum_scale, stats.gradient_scale)
    df = nets.alpha * qf * qf + fd_val + nets.c
    return qf, df


def assemble_curl_diffusion(qf_row: np.ndarray, df_row: np.ndarray):
    """Explicit 2D x 2D curl/diffusion matrices for one chain (small dims)."""
    d = qf_row.shape[0]
    curl = np.zeros((2 * d, 2 * d))
    diff = np.zeros((2 * d, 2 * d))
    curl[:d, d:] = -np.diag(qf_row)
    curl[d:, :d] = np.diag(qf_row)
    diff[d:, d:] = np.diag(df_row)
    return curl, diff


def _exact_gamma(nets, stats, ev: ModelEval, p, fq_cur, clamp):
    parts = net_partials(nets, ev.u_scaled, p, ev.grad,
                         stats.momentum_scale, stats.gradient_scale, clamp=clamp)
    gamma_theta = -parts.dfq_dp
    gamma_p = (parts.dfq_du * ev.grad_scaled + parts.dfd_dp
               + 2.0 * nets.alpha * fq_cur * parts.dfq_dp)
    return gamma_theta, gamma_p


def _gamma(nets, stats, cfg: StepConfig, ev: ModelEval, p, fq_cur, fd_cur,
           cache: Optional[FdCache]):
    """Divergence correction at the current state.

    Secant mode never divides by a vanishing increment: coordinates whose
    denominator falls under ``fd_floor`` (and the whole first step, which
    has no cache) are replaced by the exact partials.
    """
    if cfg.gamma_mode == "off":
        zero = np.zeros_like(p)
        return zero, zero.copy()
    if cfg.gamma_mode == "exact" or cache is None:
        return _exact_gamma(nets, stats, ev, p, fq_cur, cfg.clamp)

    dp = p - cache.p
    du = ev.u - cache.u
    small_p = np.abs(dp) < cfg.fd_floor
    small_u = np.abs(du) < cfg.fd_floor
    need_exact = bool(small_p.any() or small_u.any())
    if need_exact:
        parts = net_partials(nets, ev.u_scaled, p, ev.grad,
                             stats.momentum_scale, stats.gradient_scale, clamp=cfg.clamp)

    dp_safe = np.where(small_p, 1.0, dp)
    du_safe = np.where(small_u, 1.0, du)

    dfq_dp = (cache.fq_hat - cache.fq) / dp_safe
    dfd_dp = (fd_cur - cache.fd_hat) / dp_safe
    dfq_du_term = ((fq_cur - cache.fq_hat) / du_safe[:, None]) * ev.grad
    if need_exact:
        dfq_dp = np.where(small_p, parts.dfq_dp, dfq_dp)
        dfd_dp = np.where(small_p, parts.dfd_dp, dfd_dp)
        dfq_du_term = np.where(small_u[:, None], parts.dfq_du * ev.grad_scaled, dfq_du_term)

    gamma_theta = -dfq_dp
    gamma_p = dfq_du_term + dfd_dp + 2.0 * nets.alpha * fq_cur * dfq_dp
    return gamma_theta, gamma_p


def gamma(state: SamplerState, nets: MetaNets, stats: PreprocessStats, cfg: StepConfig):
    """Public wrapper computing the correction at ``state`` from scratch."""
    fq_cur = f_q(nets, state.eval.u_scaled, state.momentum, stats.momentum_scale,
                 clamp=cfg.clamp)
    fd_cur = f_d(nets, state.eval.u_scaled, state.momentum, state.eval.grad,
                 stats.momentum_scale, stats.gradient_scale)
    return _gamma(nets, stats, cfg, state.eval, state.momentum, fq_cur, fd_cur, state.cache)


def nnsghmc_step(state: SamplerState, model, nets: MetaNets, stats: PreprocessStats,
                 cfg: StepConfig, rng: np.random.Generator):
    """Advance all chains by one step; returns (new state, step record)."""
    ev = state.eval
    p = state.momentum
    eta = cfg.eta
    m_scale, g_scale = stats.momentum_scale, stats.gradient_scale

    fq1 = f_q(nets, ev.u_scaled, p, m_scale, clamp=cfg.clamp)
    fd1 = f_d(nets, ev.u_scaled, p, ev.grad, m_scale, g_scale)
    gamma_theta, gamma_p = _gamma(nets, stats, cfg, ev, p, fq1, fd1, state.cache)

    theta_new = state.theta + eta * fq1 * p + eta * gamma_theta

    ev_new = model.evaluate(theta_new, state.step + 1, rng, stats)
    fq2 = f_q(nets, ev_new.u_scaled, p, m_scale, clamp=cfg.clamp)
    fd2 = f_d(nets, ev_new.u_scaled, p, ev_new.grad, m_scale, g_scale)
    df2 = nets.alpha * fq2 * fq2 + fd2 + nets.c

    if cfg.noise_on:
        xi = rng.standard_normal(p.shape)
        noise = np.sqrt(2.0 * eta * df2) * xi
    else:
        xi = np.zeros_like(p)
        noise = 0.0
    p_new = (1.0 - eta * df2) * p - eta * fq2 * ev_new.grad + eta * gamma_p + noise

    if not (np.all(np.isfinite(theta_new)) and np.all(np.isfinite(p_new))
            and np.all(np.isfinite(ev_new.u))):
        raise DivergenceError("sampler state became non-finite", state.step + 1)

    fq_hat = f_q(nets, ev.u_scaled, p_new, m_scale, clamp=cfg.clamp)
    cache = FdCache(u=ev.u, p=p, fq=fq1, fd=fd1, fq_hat=fq_hat, fd_hat=fd2, grad=ev.grad)
    new_state = SamplerState(theta=theta_new, momentum=p_new, step=state.step + 1,
                             eval=ev_new, cache=cache)
    record = StepRecord(
        p_old=p, u_scaled_old=ev.u_scaled, u_scaled_new=ev_new.u_scaled,
        grad_new=ev_new.grad, u_new=ev_new.u, xi=xi,
        gamma_theta=gamma_theta, gamma_p=gamma_p, theta_new=theta_new,
    )
    return new_state, record


@dataclass
class BaselineHyper:
    """Hyperparameters shared by the hand-designed baselines.

    ``friction`` is the scalar momentum friction (identity friction matrix
    times this value); ``rho``/``kappa`` belong to the EMA preconditioner.
    """

    eta: float
    friction: float = 1.0
    rho: float = 0.99
    kappa: float = 1e-5
    noise_on: bool = True

    def __post_init__(self):
        if self.eta <= 0:
            raise ContractError("step size eta must be positive")


@dataclass
class BaselineState:
    theta: np.ndarray
    momentum: np.ndarray
    second_moment: np.ndarray
    step: int


BASELINE_KINDS = ("sgld", "sghmc", "psgld")


def init_baseline_state(theta0, p0=None) -> BaselineState:
    theta0 = np.atleast_2d(np.asarray(theta0, dtype=np.float64))
    if p0 is None:
        p0 = np.zeros_like(theta0)
    p0 = np.atleast_2d(np.asarray(p0, dtype=np.float64))
    return BaselineState(theta=theta0.copy(), momentum=p0.copy(),
                         second_moment=np.zeros_like(theta0), step=0)


def baseline_step(kind: str, state: BaselineState, model, hyper: BaselineHyper,
                  rng: np.random.Generator) -> BaselineState:
    """One step of SGLD, SGHMC, or EMA-preconditioned Langevin dynamics."""
    if kind not in BASELINE_KINDS:
        raise ContractError(f"unknown baseline sampler {kind!r}")
    eta = hyper.eta
    ev = model.evaluate(state.theta, state.step, rng)
    grad = ev.grad
    if kind == "sgld":
        noise = (np.sqrt(2.0 * eta) * rng.standard_normal(grad.shape)
                 if hyper.noise_on else 0.0)
        theta_new = state.theta - eta * grad + noise
        p_new = state.momentum
        v_new = state.second_moment
    elif kind == "sghmc":
        c = hyper.friction
        noise = (np.sqrt(2.0 * eta * c) * rng.standard_normal(grad.shape)
                 if hyper.noise_on else 0.0)
        p_new = (1.0 - eta * c) * state.momentum - eta * grad + noise
        theta_new = state.theta + eta * p_new
        v_new = state.second_moment
    else:  # psgld
        mean_grad = grad / model.n_observations
        v_new = hyper.rho * state.second_moment + (1.0 - hyper.rho) * mean_grad ** 2
        precond = 1.0 / (np.sqrt(v_new) + hyper.kappa)
        noise = (np.sqrt(eta * precond) * rng.standard_normal(grad.shape)
                 if hyper.noise_on else 0.0)
        theta_new = state.theta - 0.5 * eta * precond * grad + noise
        p_new = state.momentum
    if not np.all(np.isfinite(theta_new)):
        raise DivergenceError(f"{kind} state became non-finite", state.step + 1)
    return BaselineState(theta=theta_new, momentum=p_new, second_moment=v_new,
                         step=state.step + 1)


class NnsghmcSampler:
    """Convenience wrapper binding networks, preprocessing, and step config."""

    name = "nnsghmc"

    def __init__(self, nets: MetaNets, stats: PreprocessStats, cfg: StepConfig):
        self.nets = nets
        self.stats = stats
        self.cfg = cfg

    def init_state(self, model, theta0, p0, rng):
        return init_sampler_state(model, theta0, p0, rng, self.stats)

    def step(self, state, model, rng):
        new_state, _ = nnsghmc_step(state, model, self.nets, self.stats, self.cfg, rng)
        return new_state

    def positions(self, state):
        return state.theta


class BaselineSampler:
    def __init__(self, kind: str, hyper: BaselineHyper):
        if kind not in BASELINE_KINDS:
            raise ContractError(f"unknown baseline sampler {kind!r}")
        self.name = kind
        self.hyper = hyper

    def init_state(self, model, theta0, p0, rng):
        return init_baseline_state(theta0, p0)

    def step(self, state, model, rng):
        return baseline_step(self.name, state, model, self.hyper, rng)

    def positions(self, state):
        return state.theta


def run_chains(model, sampler, theta0, p0, n_steps: int, rng: np.random.Generator,
               record_every: int = 1, record_from: int = 0):
    """Drive all chains for ``n_steps`` and record thinned positions.

    Returns ``(draws, steps)`` where ``draws`` has shape
    ``(n_records, chains, dim)`` and ``steps`` gives the 1-based step index
    of each record.  Recording starts after ``record_from`` steps.
    """
    state = sampler.init_state(model, theta0, p0, rng)
    draws = []
    steps = []
    for t in range(1, n_steps + 1):
        state = sampler.step(state, model, rng)
        if t > record_from and (t - record_from) % record_every == 0:
            draws.append(sampler.positions(state).copy())
            steps.append(t)
    if draws:
        return np.stack(draws), np.asarray(steps, dtype=np.int64)
    k, d = np.atleast_2d(theta0).shape
    return np.empty((0, k, d)), np.empty(0, dtype=np.int64)
