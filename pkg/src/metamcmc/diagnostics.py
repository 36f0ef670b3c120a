"""Quantitative evaluation of sampler output.

Covers the Gaussian-fit KL bias metric, autocorrelation-based effective
sample size, and posterior-predictive classification metrics, plus the
on-disk sample formats (CSV and a small binary block).
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError

_BINARY_MAGIC = b"MMCSAMP1"


@dataclass
class SampleSet:
    """Retained draws with their chain/step provenance and run metadata."""

    draws: np.ndarray      # (S, D)
    chain_id: np.ndarray   # (S,)
    step: np.ndarray       # (S,)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.draws = np.asarray(self.draws, dtype=np.float64)
        self.chain_id = np.asarray(self.chain_id, dtype=np.int64)
        self.step = np.asarray(self.step, dtype=np.int64)
        if self.draws.ndim != 2 or self.draws.shape[0] < 1:
            raise ContractError("draws must be a nonempty (S, D) matrix")
        if self.chain_id.shape != (self.draws.shape[0],) or self.step.shape != self.chain_id.shape:
            raise ContractError("chain_id and step must have one entry per draw")
        if not np.all(np.isfinite(self.draws)):
            raise ContractError("draws must be finite")

    @property
    def dim(self) -> int:
        return self.draws.shape[1]

    @staticmethod
    def from_runs(draws_by_step: np.ndarray, steps: np.ndarray, meta=None) -> "SampleSet":
        """Flatten a (n_records, chains, dim) stack into draw rows."""
        n_rec, n_chains, dim = draws_by_step.shape
        flat = draws_by_step.reshape(-1, dim)
        chain = np.tile(np.arange(n_chains), n_rec)
        step = np.repeat(np.asarray(steps, dtype=np.int64), n_chains)
        return SampleSet(flat, chain, step, meta or {})

    def by_chain(self) -> dict[int, np.ndarray]:
        """Per-chain trajectories ordered by step, each (T_c, D)."""
        out = {}
        for cid in np.unique(self.chain_id):
            mask = self.chain_id == cid
            order = np.argsort(self.step[mask], kind="stable")
            out[int(cid)] = self.draws[mask][order]
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["chain", "step"] + [f"theta{i}" for i in range(self.dim)])
            for cid, step, row in zip(self.chain_id, self.step, self.draws):
                writer.writerow([int(cid), int(step)] + [repr(float(v)) for v in row])
        meta_path = Path(path).with_suffix(Path(path).suffix + ".meta.json")
        with open(meta_path, "w") as fh:
            json.dump(self.meta, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_binary(self, path) -> None:
        """Little-endian block: magic, u32 rows, u32 dim, i64 chain ids,
        i64 steps, f64 draws row-major."""
        with open(path, "wb") as fh:
            fh.write(_BINARY_MAGIC)
            fh.write(struct.pack("<II", self.draws.shape[0], self.dim))
            fh.write(self.chain_id.astype("<i8").tobytes())
            fh.write(self.step.astype("<i8").tobytes())
            fh.write(self.draws.astype("<f8").tobytes())
        meta_path = Path(path).with_suffix(Path(path).suffix + ".meta.json")
        with open(meta_path, "w") as fh:
            json.dump(self.meta, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @staticmethod
    def read(path) -> "SampleSet":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"sample file not found: {path}")
        meta_path = path.with_suffix(path.suffix + ".meta.json")
        meta = {}
        if meta_path.exists():
            with open(meta_path) as fh:
                meta = json.load(fh)
        with open(path, "rb") as fh:
            head = fh.read(len(_BINARY_MAGIC))
        if head == _BINARY_MAGIC:
            return SampleSet._read_binary(path, meta)
        return SampleSet._read_csv(path, meta)

    @staticmethod
    def _read_csv(path, meta) -> "SampleSet":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or len(header) < 3:
                raise ConfigError(f"malformed sample CSV: {path}")
            rows = list(reader)
        if not rows:
            raise ConfigError(f"sample CSV has no rows: {path}")
        arr = np.asarray(rows)
        return SampleSet(arr[:, 2:].astype(np.float64),
                         arr[:, 0].astype(np.int64),
                         arr[:, 1].astype(np.int64), meta)

    @staticmethod
    def _read_binary(path, meta) -> "SampleSet":
        raw = Path(path).read_bytes()
        off = len(_BINARY_MAGIC)
        n_rows, dim = struct.unpack_from("<II", raw, off)
        off += 8
        chain = np.frombuffer(raw, dtype="<i8", count=n_rows, offset=off)
        off += 8 * n_rows
        step = np.frombuffer(raw, dtype="<i8", count=n_rows, offset=off)
        off += 8 * n_rows
        draws = np.frombuffer(raw, dtype="<f8", count=n_rows * dim, offset=off)
        return SampleSet(draws.reshape(n_rows, dim).copy(), chain.copy(), step.copy(), meta)


def fit_gaussian_kl(samples, true_mean, true_cov, reverse: bool = False) -> float:
    """KL divergence from the moment-matched Gaussian fit of ``samples`` to
    the ground truth ``N(true_mean, true_cov)``.

    The fitted covariance uses the unbiased (S-1) normalizer.  ``reverse``
    flips the direction (truth to fit) for sensitivity checks.
    """
    draws = samples.draws if isinstance(samples, SampleSet) else np.asarray(samples, dtype=np.float64)
    true_mean = np.asarray(true_mean, dtype=np.float64)
    true_cov = np.asarray(true_cov, dtype=np.float64)
    s, d = draws.shape
    if true_mean.shape != (d,) or true_cov.shape != (d, d):
        raise ContractError("ground-truth moments do not match the sample dimension")
    if not np.allclose(true_cov, true_cov.T, atol=1e-10):
        raise ContractError("true_cov must be symmetric")
    if np.min(np.linalg.eigvalsh(true_cov)) <= 0:
        raise ContractError("true_cov must be positive definite")
    if s <= d:
        raise ContractError(f"need more samples ({s}) than dimensions ({d}) for a full-rank fit")
    mu_hat = draws.mean(axis=0)
    sigma_hat = np.cov(draws, rowvar=False, ddof=1)
    sigma_hat = np.atleast_2d(sigma_hat)
    sign_hat, logdet_hat = np.linalg.slogdet(sigma_hat)
    if sign_hat <= 0:
        raise ContractError("empirical covariance is singular")
    if reverse:
        mu_a, cov_a, mu_b, cov_b = true_mean, true_cov, mu_hat, sigma_hat
    else:
        mu_a, cov_a, mu_b, cov_b = mu_hat, sigma_hat, true_mean, true_cov
    sign_a, logdet_a = np.linalg.slogdet(cov_a)
    sign_b, logdet_b = np.linalg.slogdet(cov_b)
    solve_b = np.linalg.solve(cov_b, np.eye(d))
    delta = mu_b - mu_a
    kl = 0.5 * (np.trace(solve_b @ cov_a) + delta @ solve_b @ delta - d
                + (logdet_b - logdet_a))
    return float(kl)


def _ess_1d(series: np.ndarray) -> float:
    n = series.shape[0]
    centred = series - series.mean()
    var = np.dot(centred, centred)
    if var == 0.0:
        return 1.0
    nfft = 1 << (2 * n - 1).bit_length()
    spec = np.fft.rfft(centred, nfft)
    acov = np.fft.irfft(spec * np.conj(spec), nfft)[:n].real
    rho = acov / acov[0]
    # initial positive sequence: accumulate until the first non-positive lag
    tail = rho[1:]
    nonpos = np.nonzero(tail <= 0.0)[0]
    cutoff = nonpos[0] if nonpos.size else tail.size
    tau = 1.0 + 2.0 * float(tail[:cutoff].sum())
    ess = n / tau
    return float(min(max(ess, 1.0), n))


def ess(series) -> float:
    """Effective sample size of a scalar series, ``N / (1 + 2 sum rho_k)``.

    Autocorrelations are accumulated until the first non-positive lag.
    Multivariate input (T, D) is reduced to the minimum across coordinates.
    Constant series return the degenerate value 1.
    """
    series = np.asarray(series, dtype=np.float64)
    if series.ndim == 1:
        if series.shape[0] < 10:
            raise ContractError("series too short for an autocorrelation estimate (need >= 10)")
        return _ess_1d(series)
    if series.ndim == 2:
        if series.shape[0] < 10:
            raise ContractError("series too short for an autocorrelation estimate (need >= 10)")
        return float(min(_ess_1d(series[:, j]) for j in range(series.shape[1])))
    raise ContractError("series must be 1-D or 2-D (time, coords)")


def mean_chain_ess(samples: SampleSet) -> float:
    """Average over chains of the per-chain (min over coordinates) ESS."""
    values = [ess(traj) for traj in samples.by_chain().values()]
    return float(np.mean(values))


def classify_eval(samples: SampleSet, model, features, labels):
    """Posterior-predictive error rate and summed negative log-likelihood.

    The predictive distribution averages per-draw softmax outputs over all
    retained draws; the error rate uses its argmax.
    """
    if samples.dim != model.dim:
        raise ContractError(
            f"samples have dimension {samples.dim} but the classifier expects {model.dim}")
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    probs = model.predict_proba(samples.draws, features)  # (S, n, C)
    predictive = probs.mean(axis=0)
    predicted = predictive.argmax(axis=1)
    error_rate = float(np.mean(predicted != labels))
    eps = np.finfo(np.float64).tiny
    nll = float(-np.sum(np.log(np.maximum(predictive[np.arange(labels.shape[0]), labels], eps))))
    return error_rate, nll
