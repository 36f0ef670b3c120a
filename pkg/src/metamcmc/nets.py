"""Per-coordinate preconditioning networks and their input preprocessing.

Two small one-hidden-layer perceptrons (tanh hidden units) are shared across
all coordinates: the curl network sees ``(scaled energy, scaled momentum)``
and the diffusion network additionally sees the scaled energy gradient.
Everything here is plain numpy; the exact input partials needed by the
divergence correction and the weight gradients needed by meta-training are
computed in closed form.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CalibrationError, ContractError

CHECKPOINT_FORMAT = "metamcmc-checkpoint"
CHECKPOINT_VERSION = 1


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    out = np.empty_like(np.asarray(x, dtype=np.float64))
    arr = np.asarray(x, dtype=np.float64)
    pos = arr >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    ex = np.exp(arr[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class MlpParams:
    """Weights of a one-hidden-layer scalar-output perceptron."""

    w1: np.ndarray  # (n_in, hidden)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden,)
    b2: float

    @property
    def n_in(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def size(self) -> int:
        return self.w1.size + self.b1.size + self.w2.size + 1

    def flat(self) -> np.ndarray:
        return np.concatenate([self.w1.ravel(), self.b1, self.w2, [self.b2]])

    def from_flat(self, vec: np.ndarray) -> "MlpParams":
        n_in, hidden = self.w1.shape
        k = n_in * hidden
        return MlpParams(
            w1=vec[:k].reshape(n_in, hidden).copy(),
            b1=vec[k:k + hidden].copy(),
            w2=vec[k + hidden:k + 2 * hidden].copy(),
            b2=float(vec[k + 2 * hidden]),
        )

    @staticmethod
    def random(n_in: int, hidden: int, rng: np.random.Generator,
               init_scale: float = 0.05) -> "MlpParams":
        return MlpParams(
            w1=rng.uniform(-init_scale, init_scale, size=(n_in, hidden)),
            b1=rng.uniform(-init_scale, init_scale, size=hidden),
            w2=rng.uniform(-init_scale, init_scale, size=hidden),
            b2=float(rng.uniform(-init_scale, init_scale)),
        )

    @staticmethod
    def zeros(n_in: int, hidden: int) -> "MlpParams":
        return MlpParams(np.zeros((n_in, hidden)), np.zeros(hidden), np.zeros(hidden), 0.0)


def mlp_forward(params: MlpParams, x: np.ndarray):
    """Forward pass; returns (outputs (n,), hidden activations (n, H))."""
    h = np.tanh(x @ params.w1 + params.b1)
    return h @ params.w2 + params.b2, h


def mlp_input_grads(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Exact d(out)/d(input) for each row, shape (n, n_in)."""
    _, h = mlp_forward(params, x)
    return ((1.0 - h * h) * params.w2) @ params.w1.T


def mlp_weight_vjp(params: MlpParams, x: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Accumulate ``sum_i weights[i] * d out_i / d phi`` as a flat vector."""
    _, h = mlp_forward(params, x)
    dz = (weights[:, None] * params.w2) * (1.0 - h * h)  # (n, H)
    gw1 = x.T @ dz
    gb1 = dz.sum(axis=0)
    gw2 = h.T @ weights
    gb2 = weights.sum()
    return np.concatenate([gw1.ravel(), gb1, gw2, [gb2]])


@dataclass
class PreprocessStats:
    """Input rescaling statistics enabling cross-dimension transfer.

    Momentum and energy-gradient inputs are divided by the recorded
    magnitudes; the energy input is rebuilt by the target itself using
    ``d_train`` (parameter count of the training task) when ``scale_energy``
    is set.
    """

    momentum_scale: float = 1.0
    gradient_scale: float = 1.0
    d_train: int = 0
    scale_energy: bool = False

    def __post_init__(self):
        if self.momentum_scale <= 0 or self.gradient_scale <= 0:
            raise ContractError("preprocessing scales must be strictly positive")

    def to_dict(self):
        return {
            "momentum_scale": self.momentum_scale,
            "gradient_scale": self.gradient_scale,
            "d_train": self.d_train,
            "scale_energy": self.scale_energy,
        }

    @staticmethod
    def from_dict(d) -> "PreprocessStats":
        return PreprocessStats(
            momentum_scale=float(d["momentum_scale"]),
            gradient_scale=float(d["gradient_scale"]),
            d_train=int(d["d_train"]),
            scale_energy=bool(d["scale_energy"]),
        )


IDENTITY_STATS = PreprocessStats()


class MetaNets:
    """Parameters of the curl/diffusion networks plus their fixed transforms.

    ``beta`` offsets the curl output, ``alpha`` scales its squared
    contribution to the diffusion, ``c`` is the diffusion floor and
    ``d_scale`` multiplies the softplus-rectified diffusion output.
    ``q_clamp`` bounds the curl output during sampling (training leaves it
    off).  ``constant_mode`` zeroes the diffusion network entirely so the
    sampler degenerates to a hand-designed Hamiltonian scheme.
    """

    def __init__(self, q_net: MlpParams, d_net: MlpParams, alpha: float = 0.0,
                 beta: float = 0.0, c: float = 0.01, d_scale: float = 1.0,
                 q_clamp=(-5.0, 5.0), constant_mode: bool = False):
        if q_net.n_in != 2:
            raise ContractError("curl network takes 2 inputs (energy, momentum)")
        if d_net.n_in != 3:
            raise ContractError("diffusion network takes 3 inputs (energy, momentum, gradient)")
        if alpha < 0:
            raise ContractError("alpha must be nonnegative")
        if c <= 0:
            raise ContractError("c must be strictly positive")
        if d_scale <= 0:
            raise ContractError("d_scale must be strictly positive")
        if q_clamp is not None and not q_clamp[0] < q_clamp[1]:
            raise ContractError("q_clamp must be an increasing interval")
        self.q_net = q_net
        self.d_net = d_net
        self.alpha = float(alpha)
        self.beta = float(beta)
        self.c = float(c)
        self.d_scale = float(d_scale)
        self.q_clamp = None if q_clamp is None else (float(q_clamp[0]), float(q_clamp[1]))
        self.constant_mode = bool(constant_mode)

    @staticmethod
    def random_init(rng: np.random.Generator, hidden_q: int = 10, hidden_d: int = 10,
                    init_scale: float = 0.05, **kwargs) -> "MetaNets":
        return MetaNets(
            MlpParams.random(2, hidden_q, rng, init_scale),
            MlpParams.random(3, hidden_d, rng, init_scale),
            **kwargs,
        )

    @staticmethod
    def constant(alpha: float, beta: float, c: float, hidden: int = 4) -> "MetaNets":
        """Zero-weight networks with the diffusion net bypassed.

        With ``beta`` as offset the curl output is exactly ``beta`` and the
        diffusion diagonal is exactly ``alpha * beta**2 + c``.
        """
        return MetaNets(MlpParams.zeros(2, hidden), MlpParams.zeros(3, hidden),
                        alpha=alpha, beta=beta, c=c, constant_mode=True)

    @property
    def n_params(self) -> int:
        return self.q_net.size + self.d_net.size

    def flat_phi(self) -> np.ndarray:
        return np.concatenate([self.q_net.flat(), self.d_net.flat()])

    def set_flat_phi(self, vec: np.ndarray) -> None:
        if vec.shape != (self.n_params,):
            raise ContractError(f"expected {self.n_params} parameters, got {vec.shape}")
        k = self.q_net.size
        self.q_net = self.q_net.from_flat(vec[:k])
        self.d_net = self.d_net.from_flat(vec[k:])


def _paired_input(u_scaled, p_scaled):
    p_scaled = np.asarray(p_scaled, dtype=np.float64)
    u_col = np.broadcast_to(np.asarray(u_scaled, dtype=np.float64)[..., None], p_scaled.shape)
    return np.stack([u_col.ravel(), p_scaled.ravel()], axis=1)


def _triple_input(u_scaled, p_scaled, g_scaled):
    p_scaled = np.asarray(p_scaled, dtype=np.float64)
    g_scaled = np.asarray(g_scaled, dtype=np.float64)
    u_col = np.broadcast_to(np.asarray(u_scaled, dtype=np.float64)[..., None], p_scaled.shape)
    return np.stack([u_col.ravel(), p_scaled.ravel(), g_scaled.ravel()], axis=1)


def f_q(nets: MetaNets, u_scaled, p, momentum_scale: float = 1.0, clamp: bool = True):
    """Curl diagonal ``beta + net_Q(u_scaled, p / momentum_scale)``.

    ``u_scaled`` broadcasts against the trailing shape of ``p``; the result
    has the shape of ``p``.
    """
    p = np.asarray(p, dtype=np.float64)
    x = _paired_input(u_scaled, p / momentum_scale)
    out, _ = mlp_forward(nets.q_net, x)
    out = nets.beta + out.reshape(p.shape)
    if clamp and nets.q_clamp is not None:
        out = np.clip(out, nets.q_clamp[0], nets.q_clamp[1])
    return out


def f_d(nets: MetaNets, u_scaled, p, grad, momentum_scale: float = 1.0,
        gradient_scale: float = 1.0):
    """Nonnegative diffusion output ``d_scale * softplus(net_D(...))``.

    In ``constant_mode`` this is identically zero (the rectifier is
    bypassed), which reduces the diffusion diagonal to ``alpha*f_Q**2 + c``.
    """
    p = np.asarray(p, dtype=np.float64)
    if nets.constant_mode:
        return np.zeros_like(p)
    x = _triple_input(u_scaled, p / momentum_scale, np.asarray(grad) / gradient_scale)
    out, _ = mlp_forward(nets.d_net, x)
    return nets.d_scale * softplus(out.reshape(p.shape))


@dataclass(frozen=True)
class NetPartials:
    """Exact first derivatives of the network outputs per coordinate.

    ``dfq_du`` is taken with respect to the scaled energy input;
    ``dfq_dp``/``dfd_dp`` are with respect to the raw momentum (the
    ``1/momentum_scale`` chain factor is included).  Where the curl clamp is
    active the curl partials are zero (flat region).
    """

    dfq_du: np.ndarray
    dfq_dp: np.ndarray
    dfd_dp: np.ndarray


def net_partials(nets: MetaNets, u_scaled, p, grad, momentum_scale: float = 1.0,
                 gradient_scale: float = 1.0, clamp: bool = True) -> NetPartials:
    p = np.asarray(p, dtype=np.float64)
    xq = _paired_input(u_scaled, p / momentum_scale)
    raw_q, _ = mlp_forward(nets.q_net, xq)
    gq = mlp_input_grads(nets.q_net, xq)
    dfq_du = gq[:, 0].reshape(p.shape)
    dfq_dp = (gq[:, 1] / momentum_scale).reshape(p.shape)
    if clamp and nets.q_clamp is not None:
        inside = ((nets.beta + raw_q >= nets.q_clamp[0])
                  & (nets.beta + raw_q <= nets.q_clamp[1])).reshape(p.shape)
        dfq_du = np.where(inside, dfq_du, 0.0)
        dfq_dp = np.where(inside, dfq_dp, 0.0)
    if nets.constant_mode:
        dfd_dp = np.zeros_like(p)
    else:
        xd = _triple_input(u_scaled, p / momentum_scale, np.asarray(grad) / gradient_scale)
        raw_d, _ = mlp_forward(nets.d_net, xd)
        gd = mlp_input_grads(nets.d_net, xd)
        dfd_dp = (nets.d_scale * sigmoid(raw_d) * gd[:, 1] / momentum_scale).reshape(p.shape)
    return NetPartials(dfq_du=dfq_du, dfq_dp=dfq_dp, dfd_dp=dfd_dp)


def calibrate_preprocess(model, nets: MetaNets, pilot_steps: int, rng: np.random.Generator,
                         eta: float, chains: int = 10, theta0=None,
                         scale_energy: bool = True) -> PreprocessStats:
    """Run a short pilot with the given (typically freshly initialized) nets
    and return scales that bring momentum and gradient magnitudes to unit
    order.

    The pilot uses identity preprocessing, injected noise on, and no
    divergence correction (its magnitude statistics are what matter, not
    exactness of the stationary distribution).
    """
    from .dynamics import SamplerState, StepConfig, init_sampler_state, nnsghmc_step

    if pilot_steps < 1:
        raise ContractError("pilot_steps must be >= 1")
    if theta0 is None:
        theta0 = rng.standard_normal((chains, model.dim))
    theta0 = np.atleast_2d(np.asarray(theta0, dtype=np.float64))
    p0 = rng.standard_normal(theta0.shape)
    cfg = StepConfig(eta=eta, gamma_mode="off", noise_on=True)
    state = init_sampler_state(model, theta0, p0, rng, stats=IDENTITY_STATS)
    sq_p = 0.0
    sq_g = 0.0
    count = 0
    for _ in range(pilot_steps):
        state, _ = nnsghmc_step(state, model, nets, IDENTITY_STATS, cfg, rng)
        if not (np.all(np.isfinite(state.theta)) and np.all(np.isfinite(state.momentum))):
            raise CalibrationError(
                "pilot run diverged; retry with a smaller step size")
        sq_p += float(np.sum(state.momentum ** 2))
        sq_g += float(np.sum(state.eval.grad ** 2))
        count += state.momentum.size
    momentum_scale = float(np.sqrt(sq_p / count))
    gradient_scale = float(np.sqrt(sq_g / count))
    if not (np.isfinite(momentum_scale) and np.isfinite(gradient_scale)):
        raise CalibrationError("pilot statistics are non-finite")
    return PreprocessStats(
        momentum_scale=max(momentum_scale, 1e-12),
        gradient_scale=max(gradient_scale, 1e-12),
        d_train=model.dim,
        scale_energy=scale_energy,
    )


def _mlp_to_dict(params: MlpParams):
    return {
        "n_in": params.n_in,
        "hidden": params.hidden,
        "w1": params.w1.tolist(),
        "b1": params.b1.tolist(),
        "w2": params.w2.tolist(),
        "b2": params.b2,
    }


def _mlp_from_dict(d) -> MlpParams:
    return MlpParams(
        w1=np.asarray(d["w1"], dtype=np.float64),
        b1=np.asarray(d["b1"], dtype=np.float64),
        w2=np.asarray(d["w2"], dtype=np.float64),
        b2=float(d["b2"]),
    )


def save_checkpoint(path, nets: MetaNets, stats: PreprocessStats) -> None:
    """Serialize networks, transforms and preprocessing stats as JSON."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "q_net": _mlp_to_dict(nets.q_net),
        "d_net": _mlp_to_dict(nets.d_net),
        "alpha": nets.alpha,
        "beta": nets.beta,
        "c": nets.c,
        "d_scale": nets.d_scale,
        "q_clamp": list(nets.q_clamp) if nets.q_clamp is not None else None,
        "constant_mode": nets.constant_mode,
        "preprocess": stats.to_dict(),
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_checkpoint(path) -> tuple[MetaNets, PreprocessStats]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ContractError(f"not a {CHECKPOINT_FORMAT} file: {path}")
    nets = MetaNets(
        q_net=_mlp_from_dict(doc["q_net"]),
        d_net=_mlp_from_dict(doc["d_net"]),
        alpha=doc["alpha"],
        beta=doc["beta"],
        c=doc["c"],
        d_scale=doc["d_scale"],
        q_clamp=doc["q_clamp"],
        constant_mode=doc["constant_mode"],
    )
    return nets, PreprocessStats.from_dict(doc["preprocess"])
