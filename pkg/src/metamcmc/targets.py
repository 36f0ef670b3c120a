"""Target densities exposed through a uniform energy interface.

Every target provides the exact energy ``U`` and gradient, plus stochastic
versions used by the samplers (mini-batch estimates for classifiers,
artificial gradient noise for Gaussians).  Evaluations are read-only and
safe to share across chains; all chain-level randomness comes from the
caller's generator.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError


@dataclass(frozen=True)
class ModelEval:
    """One stochastic evaluation of a target at a batch of positions.

    ``u``/``grad`` drive the dynamics.  ``u_scaled``/``grad_scaled`` are the
    rescaled energy fed to the meta networks and its position gradient
    (identical to the raw values unless input preprocessing is active).
    """

    u: np.ndarray          # (K,)
    grad: np.ndarray       # (K, D)
    u_scaled: np.ndarray   # (K,)
    grad_scaled: np.ndarray  # (K, D)


def _as_batch(theta: np.ndarray, dim: int) -> tuple[np.ndarray, bool]:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim == 1:
        theta = theta[None, :]
        single = True
    elif theta.ndim == 2:
        single = False
    else:
        raise ContractError(f"theta must be (dim,) or (chains, dim), got shape {theta.shape}")
    if theta.shape[1] != dim:
        raise ContractError(f"theta has dimension {theta.shape[1]}, model expects {dim}")
    return theta, single


def _maybe_scalar(values: np.ndarray, single: bool):
    return values[0] if single else values


class GaussianTarget:
    """Quadratic energy ``U(theta) = 0.5 (theta-mean)^T precision (theta-mean)``.

    ``injected_noise_std`` adds per-coordinate Gaussian noise to the gradient
    only (the energy value stays exact), mimicking mini-batch gradients.
    """

    kind = "gaussian"

    def __init__(self, mean, precision, injected_noise_std: float = 0.0):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.precision = np.asarray(precision, dtype=np.float64)
        if self.mean.ndim != 1:
            raise ContractError("mean must be a vector")
        d = self.mean.shape[0]
        if self.precision.shape != (d, d):
            raise ContractError("precision must be square and match the mean")
        if not np.allclose(self.precision, self.precision.T, atol=1e-12):
            raise ContractError("precision must be symmetric")
        eigvals = np.linalg.eigvalsh(self.precision)
        if np.min(eigvals) <= 0:
            raise ContractError("precision must be positive definite")
        if injected_noise_std < 0:
            raise ContractError("injected_noise_std must be nonnegative")
        self.injected_noise_std = float(injected_noise_std)
        self.covariance = np.linalg.inv(self.precision)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    # N=1 pseudo-count: the whole quadratic plays the role of the prior term
    # when cross-dimension energy rescaling is requested.
    n_observations = 1

    def energy(self, theta):
        theta, single = _as_batch(theta, self.dim)
        delta = theta - self.mean
        u = 0.5 * np.einsum("ki,ij,kj->k", delta, self.precision, delta)
        return _maybe_scalar(u, single)

    def grad_energy(self, theta):
        theta, single = _as_batch(theta, self.dim)
        g = (theta - self.mean) @ self.precision
        return g[0] if single else g

    def loss_terms(self, theta, batch_index: int = 0):
        """Exact (energy, gradient) used inside training objectives.

        Injected gradient noise mimics data sub-sampling in the dynamics but
        plays no role in the energy values the losses integrate.
        """
        theta, single = _as_batch(theta, self.dim)
        delta = theta - self.mean
        u = 0.5 * np.einsum("ki,ij,kj->k", delta, self.precision, delta)
        g = delta @ self.precision
        if single:
            return u[0], g[0]
        return u, g

    def evaluate(self, theta, batch_index: int, rng: np.random.Generator,
                 stats=None) -> ModelEval:
        """Stochastic evaluation: exact energy, noise-injected gradient."""
        theta, _ = _as_batch(theta, self.dim)
        delta = theta - self.mean
        u = 0.5 * np.einsum("ki,ij,kj->k", delta, self.precision, delta)
        g = delta @ self.precision
        if self.injected_noise_std > 0:
            g = g + self.injected_noise_std * rng.standard_normal(g.shape)
        ratio = 1.0
        if stats is not None and stats.scale_energy:
            ratio = stats.d_train / (self.n_observations * self.dim)
        return ModelEval(u=u, grad=g, u_scaled=ratio * u, grad_scaled=ratio * g)

    def stochastic_energy_grad(self, theta, batch_index: int, rng: np.random.Generator):
        ev = self.evaluate(theta, batch_index, rng)
        theta_arr, single = _as_batch(theta, self.dim)
        if single:
            return ev.u[0], ev.grad[0]
        return ev.u, ev.grad


def random_diagonal_gaussian(dim: int, rng: np.random.Generator, mean_value: float = 3.0,
                             var_range=(0.3, 2.5), injected_noise_std: float = 1.0) -> GaussianTarget:
    """Uncorrelated Gaussian with randomly drawn per-coordinate variances."""
    variances = rng.uniform(var_range[0], var_range[1], size=dim)
    precision = np.diag(1.0 / variances)
    return GaussianTarget(np.full(dim, mean_value), precision, injected_noise_std)


def random_correlated_gaussian(dim: int, rng: np.random.Generator, mean_value: float = 3.0,
                               var_range=(0.3, 2.5), injected_noise_std: float = 1.0) -> GaussianTarget:
    """Randomly rotated Gaussian: random eigenvalues, random orthogonal basis."""
    variances = rng.uniform(var_range[0], var_range[1], size=dim)
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    covariance = (q * variances) @ q.T
    covariance = 0.5 * (covariance + covariance.T)
    return GaussianTarget(np.full(dim, mean_value), np.linalg.inv(covariance), injected_noise_std)


def _relu(x):
    return np.maximum(x, 0.0)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_ACTIVATIONS = {"relu": _relu, "sigmoid": _sigmoid}


class BnnTarget:
    """Posterior energy of a small MLP classifier with a Gaussian prior.

    Parameters are a flat vector packing ``[W0, b0, W1, b1, ...]`` row-major.
    Mini-batches are disjoint contiguous slices of a per-epoch permutation,
    cycled in order and reshuffled each epoch from ``batch_seed`` so that any
    batch index maps to a reproducible subset.
    """

    kind = "bnn-classifier"

    def __init__(self, features, labels, layer_sizes, activation: str = "relu",
                 prior_precision: float = 1.0, minibatch_size: int | None = None,
                 batch_seed: int = 0):
        self.features = np.asarray(features, dtype=np.float64)
        self.labels = np.asarray(labels)
        if self.features.ndim != 2:
            raise ConfigError("features must be a 2-D array")
        if self.features.shape[0] == 0:
            raise ConfigError("dataset is empty")
        if self.labels.shape != (self.features.shape[0],):
            raise ConfigError("labels must be one integer per row of features")
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise ConfigError("labels must be integers")
        self.n = self.features.shape[0]
        self.layer_sizes = list(layer_sizes)
        if self.layer_sizes[0] != self.features.shape[1]:
            raise ContractError("first layer size must equal the feature count")
        if np.min(self.labels) < 0 or np.max(self.labels) >= self.layer_sizes[-1]:
            raise ConfigError("labels out of range for the output layer")
        if activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}")
        self.activation = activation
        if prior_precision <= 0:
            raise ContractError("prior_precision must be positive")
        self.prior_precision = float(prior_precision)
        self.minibatch_size = int(minibatch_size) if minibatch_size else self.n
        if not 1 <= self.minibatch_size <= self.n:
            raise ConfigError("minibatch_size must be in [1, N]")
        self.batch_seed = int(batch_seed)
        self._shapes = []
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            self._shapes.append((fan_in, fan_out))
        self.dim = sum(i * o + o for i, o in self._shapes)
        self._onehot = np.eye(self.layer_sizes[-1])[self.labels]
        self._epoch_perm_cache: dict[int, np.ndarray] = {}

    @property
    def n_observations(self) -> int:
        return self.n

    @property
    def n_batches(self) -> int:
        return int(np.ceil(self.n / self.minibatch_size))

    def unpack(self, theta: np.ndarray):
        """Split flat parameter rows (K, dim) into per-layer (W, b) arrays."""
        params = []
        offset = 0
        for fan_in, fan_out in self._shapes:
            w = theta[:, offset:offset + fan_in * fan_out].reshape(-1, fan_in, fan_out)
            offset += fan_in * fan_out
            b = theta[:, offset:offset + fan_out]
            offset += fan_out
            params.append((w, b))
        return params

    def _forward(self, theta: np.ndarray, x: np.ndarray):
        """Forward pass for K parameter vectors over one batch of inputs.

        Returns the logits (K, M, C) and the post-activation values of every
        layer (needed by the backward pass).
        """
        act = _ACTIVATIONS[self.activation]
        params = self.unpack(theta)
        a = np.broadcast_to(x, (theta.shape[0],) + x.shape)
        activations = [a]
        for layer, (w, b) in enumerate(params):
            z = np.matmul(a, w) + b[:, None, :]
            if layer < len(params) - 1:
                a = act(z)
                activations.append(a)
            else:
                a = z
        return a, activations

    def _cross_entropy_and_grad(self, theta: np.ndarray, x: np.ndarray, onehot: np.ndarray):
        """Summed cross-entropy over the batch and its gradient via reverse
        accumulation through the classifier."""
        logits, activations = self._forward(theta, x)
        shifted = logits - logits.max(axis=2, keepdims=True)
        logz = np.log(np.sum(np.exp(shifted), axis=2)) + logits.max(axis=2)
        ce = np.sum(logz - np.sum(logits * onehot, axis=2), axis=1)

        probs = np.exp(shifted)
        probs /= probs.sum(axis=2, keepdims=True)
        dz = probs - onehot
        params = self.unpack(theta)
        grads = [None] * len(params)
        for layer in range(len(params) - 1, -1, -1):
            w, _ = params[layer]
            a_prev = activations[layer]
            dw = np.matmul(a_prev.transpose(0, 2, 1), dz)
            db = dz.sum(axis=1)
            grads[layer] = (dw, db)
            if layer > 0:
                da = np.matmul(dz, w.transpose(0, 2, 1))
                if self.activation == "relu":
                    dz = da * (activations[layer] > 0)
                else:
                    s = activations[layer]
                    dz = da * s * (1.0 - s)
        flat = np.concatenate(
            [np.concatenate([dw.reshape(dw.shape[0], -1), db], axis=1) for dw, db in grads],
            axis=1,
        )
        return ce, flat

    def _batch_indices(self, batch_index: int) -> np.ndarray:
        epoch, slot = divmod(int(batch_index), self.n_batches)
        if epoch not in self._epoch_perm_cache:
            seq = np.random.SeedSequence((self.batch_seed, epoch))
            self._epoch_perm_cache = {epoch: np.random.default_rng(seq).permutation(self.n)}
        perm = self._epoch_perm_cache[epoch]
        return perm[slot * self.minibatch_size:(slot + 1) * self.minibatch_size]

    def energy(self, theta):
        theta, single = _as_batch(theta, self.dim)
        logits, _ = self._forward(theta, self.features)
        shifted = logits - logits.max(axis=2, keepdims=True)
        logz = np.log(np.sum(np.exp(shifted), axis=2)) + logits.max(axis=2)
        ce = np.sum(logz - np.sum(logits * self._onehot, axis=2), axis=1)
        u = ce + 0.5 * self.prior_precision * np.sum(theta * theta, axis=1)
        return _maybe_scalar(u, single)

    def grad_energy(self, theta):
        theta, single = _as_batch(theta, self.dim)
        _, g = self._cross_entropy_and_grad(theta, self.features, self._onehot)
        g = g + self.prior_precision * theta
        return g[0] if single else g

    def loss_terms(self, theta, batch_index: int):
        """Mini-batch (energy, gradient) at the batch the dynamics used."""
        theta, single = _as_batch(theta, self.dim)
        ev = self.evaluate(theta, batch_index, rng=None)
        if single:
            return ev.u[0], ev.grad[0]
        return ev.u, ev.grad

    def evaluate(self, theta, batch_index: int, rng=None, stats=None) -> ModelEval:
        """N/M-rescaled mini-batch estimate of the energy and gradient."""
        theta, _ = _as_batch(theta, self.dim)
        idx = self._batch_indices(batch_index)
        scale = self.n / idx.shape[0]
        ce, ce_grad = self._cross_entropy_and_grad(theta, self.features[idx], self._onehot[idx])
        prior_u = 0.5 * self.prior_precision * np.sum(theta * theta, axis=1)
        prior_g = self.prior_precision * theta
        u = scale * ce + prior_u
        g = scale * ce_grad + prior_g
        if stats is not None and stats.scale_energy:
            ratio = stats.d_train / (self.n * self.dim)
            u_scaled = ce / idx.shape[0] + ratio * prior_u
            grad_scaled = ce_grad / idx.shape[0] + ratio * prior_g
        else:
            u_scaled, grad_scaled = u, g
        return ModelEval(u=u, grad=g, u_scaled=u_scaled, grad_scaled=grad_scaled)

    def stochastic_energy_grad(self, theta, batch_index: int, rng=None):
        ev = self.evaluate(theta, batch_index, rng)
        theta_arr, single = _as_batch(theta, self.dim)
        if single:
            return ev.u[0], ev.grad[0]
        return ev.u, ev.grad

    def predict_proba(self, theta, x):
        """Per-draw softmax class probabilities, shape (K, n_eval, classes)."""
        theta, _ = _as_batch(theta, self.dim)
        logits, _ = self._forward(theta, np.asarray(x, dtype=np.float64))
        shifted = logits - logits.max(axis=2, keepdims=True)
        probs = np.exp(shifted)
        probs /= probs.sum(axis=2, keepdims=True)
        return probs


def energy(model, theta):
    """Exact full-data energy ``U(theta)``."""
    return model.energy(theta)


def grad_energy(model, theta):
    """Exact full-data energy gradient."""
    return model.grad_energy(theta)


def stochastic_energy_grad(model, theta, batch_index: int, rng):
    """Stochastic (mini-batch or noise-injected) energy and gradient."""
    return model.stochastic_energy_grad(theta, batch_index, rng)


def load_dataset(path, standardize: bool = False):
    """Load a CSV dataset: header row, float feature columns, integer label last.

    Returns ``(features, labels)``.  With ``standardize`` the feature columns
    are shifted/scaled to zero mean and unit variance (constant columns are
    left centred only).
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"dataset file not found: {path}")
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(f"dataset file is empty: {path}") from None
        n_cols = len(header)
        if n_cols < 2:
            raise ConfigError("dataset needs at least one feature column and a label column")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != n_cols:
                raise ConfigError(f"{path}:{lineno}: expected {n_cols} columns, got {len(row)}")
            rows.append(row)
    if not rows:
        raise ConfigError(f"dataset has a header but no data rows: {path}")
    raw = np.asarray(rows)
    try:
        features = raw[:, :-1].astype(np.float64)
    except ValueError as exc:
        raise ConfigError(f"non-numeric feature value in {path}: {exc}") from None
    label_col = raw[:, -1]
    try:
        labels_f = label_col.astype(np.float64)
    except ValueError as exc:
        raise ConfigError(f"non-numeric label in {path}: {exc}") from None
    labels = labels_f.astype(np.int64)
    if not np.all(labels_f == labels):
        raise ConfigError(f"labels must be integers in {path}")
    if standardize:
        mu = features.mean(axis=0)
        sd = features.std(axis=0)
        sd[sd == 0] = 1.0
        features = (features - mu) / sd
    return features, labels


def synthetic_classification(n: int, n_features: int, n_classes: int,
                             rng: np.random.Generator, separation: float = 2.0):
    """Gaussian class clusters with random centres; labels are balanced."""
    centres = separation * rng.standard_normal((n_classes, n_features))
    labels = np.arange(n) % n_classes
    labels = rng.permutation(labels)
    features = centres[labels] + rng.standard_normal((n, n_features))
    return features, labels.astype(np.int64)


def write_dataset_csv(path, features, labels):
    """Write a dataset in the CSV layout ``load_dataset`` expects."""
    features = np.asarray(features)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(features.shape[1])] + ["label"])
        for row, lab in zip(features, labels):
            writer.writerow([repr(float(v)) for v in row] + [int(lab)])
