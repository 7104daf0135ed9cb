"""
Fixed random reservoir of leaky-integrator tanh units.

The recurrent matrix is sparse with a fixed number of incoming
connections per unit and is rescaled to a target spectral radius.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import sparse

logger = logging.getLogger(__name__)

N_INPUTS = 2  # bias + lead II
MAX_BUILD_ATTEMPTS = 8


class SpectralRadiusError(RuntimeError):
    def __init__(self, message, last_estimates=()):
        self.last_estimates = tuple(last_estimates)
        super().__init__(message)


@dataclass(frozen=True)
class ReservoirParams:
    size: int = 768
    input_scaling: float = 0.5
    connections_per_node: int = 10
    spectral_radius: float = 0.99
    leakage_rate: float = 0.99
    bias_value: float = 1.0
    seed: int = 0
    washout: int = 720

    def validate(self) -> None:
        if self.size < 1:
            raise ValueError("reservoir size must be positive")
        if not 0.0 <= self.leakage_rate <= 1.0:
            raise ValueError(f"leakage rate must lie in [0, 1], got {self.leakage_rate}")
        if self.spectral_radius <= 0:
            raise ValueError("spectral radius must be positive")
        if self.input_scaling <= 0:
            raise ValueError("input scaling must be positive")
        if not 1 <= self.connections_per_node <= self.size - 1:
            raise ValueError(
                f"connections_per_node={self.connections_per_node} impossible for {self.size} units"
            )
        if self.washout < 0:
            raise ValueError("washout must be nonnegative")


@dataclass(frozen=True)
class ReservoirWeights:
    W: sparse.csr_matrix
    W_in: np.ndarray
    W_fb: sparse.csr_matrix
    achieved_spectral_radius: float
    seed_used: int
    params: ReservoirParams

    @property
    def size(self) -> int:
        return self.W.shape[0]


def estimate_spectral_radius(W, tol: float = 1e-8, max_iters: int = 10_000,
                             block_size: int = 8, seed: int = 0) -> float:
    """Largest eigenvalue magnitude of a square (sparse) matrix.

    Block power iteration with a Rayleigh-Ritz step: a small orthonormal
    block is repeatedly multiplied by ``W`` and re-orthonormalised, and the
    eigenvalues of the projected block matrix give the estimate. Unlike
    single-vector iteration this resolves complex-conjugate dominant
    pairs, which are the rule for nonsymmetric random matrices.

    Raises
    ------
    SpectralRadiusError
        If the relative change of the estimate does not drop below ``tol``
        within ``max_iters`` iterations.
    """
    n, m = W.shape
    if n != m:
        raise ValueError(f"matrix must be square, got {W.shape}")
    p = min(block_size, n)
    if p == n:
        # a full block makes Rayleigh-Ritz exact; iterating would only
        # re-orthonormalise rank-deficient products of defective matrices
        dense = W.toarray() if sparse.issparse(W) else np.asarray(W, dtype=float)
        return float(np.max(np.abs(np.linalg.eigvals(dense)))) if n else 0.0
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((n, p)))
    prev = None
    streak = 0
    for _ in range(max_iters):
        Y = W @ Q
        H = Q.T @ Y
        est = float(np.max(np.abs(np.linalg.eigvals(H))))
        if not np.any(Y):
            return 0.0
        Q, _ = np.linalg.qr(Y)
        if prev is not None and abs(est - prev) <= tol * max(est, np.finfo(float).tiny):
            streak += 1
            if streak >= 3:
                return est
        else:
            streak = 0
        prev = est
    raise SpectralRadiusError(
        f"spectral radius estimate did not converge in {max_iters} iterations "
        f"(last estimates {prev!r}, {est!r})",
        (prev, est),
    )


def _random_recurrent(n: int, k: int, rng: np.random.Generator) -> sparse.csr_matrix:
    cols = np.empty(n * k, dtype=np.int64)
    for i in range(n):
        # k distinct targets among the other n-1 units
        c = rng.choice(n - 1, size=k, replace=False)
        c[c >= i] += 1
        cols[i * k:(i + 1) * k] = np.sort(c)
    rows = np.repeat(np.arange(n), k)
    vals = rng.uniform(-1.0, 1.0, size=n * k)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))


def build_reservoir(params: ReservoirParams, n_outputs: int = 1) -> ReservoirWeights:
    """Generate the recurrent, input and (zero) feedback weights from ``params.seed``."""
    params.validate()
    n = params.size
    seed = params.seed
    for _ in range(MAX_BUILD_ATTEMPTS):
        rng = np.random.default_rng(seed)
        W = _random_recurrent(n, params.connections_per_node, rng)
        radius = estimate_spectral_radius(W)
        if radius >= 1e-12:
            break
        logger.warning("degenerate recurrent draw for seed %d (radius %.3g); retrying", seed, radius)
        seed += 1
    else:
        raise SpectralRadiusError(f"no usable recurrent matrix after {MAX_BUILD_ATTEMPTS} seeds")
    W = (W * (params.spectral_radius / radius)).tocsr()
    W_in = rng.uniform(-params.input_scaling, params.input_scaling, size=(n, N_INPUTS))
    W_fb = sparse.csr_matrix((n, n_outputs))
    achieved = estimate_spectral_radius(W)
    return ReservoirWeights(W, W_in, W_fb, achieved, seed, params)


def _check_finite(v: np.ndarray, what: str) -> None:
    bad = np.flatnonzero(~np.isfinite(v))
    if bad.size:
        raise FloatingPointError(f"non-finite {what} component at index {int(bad[0])}")


def step(weights: ReservoirWeights, params: ReservoirParams, x: np.ndarray, u: np.ndarray,
         y: Optional[np.ndarray] = None) -> np.ndarray:
    """One leaky-integrator update ``(1-a) x + a tanh(W x + W_in u + W_fb y)``."""
    u = np.asarray(u, dtype=float)
    _check_finite(u, "input")
    drive = weights.W @ x + weights.W_in @ u
    if y is not None:
        drive = drive + weights.W_fb @ y
    a = params.leakage_rate
    return (1.0 - a) * x + a * np.tanh(drive)


@dataclass
class StateTrajectory:
    """Extended states ``z(t) = [x(t); u(t)]``, one column per retained sample."""

    states: np.ndarray  # (T, N_x + N_u), row per time step
    sampling_period: float
    final_state: np.ndarray = field(repr=False, default=None)

    @property
    def Z(self) -> np.ndarray:
        return self.states.T

    @property
    def num_steps(self) -> int:
        return self.states.shape[0]


def harvest(weights: ReservoirWeights, params: ReservoirParams, ecg, *,
            washout: Optional[int] = None, x0: Optional[np.ndarray] = None,
            sampling_period: Optional[float] = None) -> StateTrajectory:
    """Drive the reservoir with ``u(t) = [bias; ecg(t)]`` and collect states.

    Parameters
    ----------
    ecg : SignalBuffer or array_like
        Lead II samples.
    washout : int, optional
        Leading steps to discard; defaults to ``params.washout``.
    x0 : ndarray, optional
        Initial reservoir state (zeros by default). Passing the
        ``final_state`` of an earlier harvest continues that run.
    """
    if hasattr(ecg, "samples"):
        sampling_period = ecg.sampling_period if sampling_period is None else sampling_period
        ecg = ecg.samples
    ecg = np.asarray(ecg, dtype=float)
    washout = params.washout if washout is None else washout
    if len(ecg) <= washout:
        raise ValueError(f"input of {len(ecg)} samples does not exceed washout {washout}")
    _check_finite(ecg, "input")

    n = weights.size
    W = weights.W
    w_bias = weights.W_in[:, 0] * params.bias_value
    w_ecg = weights.W_in[:, 1]
    a = params.leakage_rate
    keep = 1.0 - a
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)

    T = len(ecg) - washout
    out = np.empty((T, n + N_INPUTS))
    out[:, n] = params.bias_value
    out[:, n + 1] = ecg[washout:]
    for t, v in enumerate(ecg):
        x = keep * x + a * np.tanh(W @ x + w_bias + v * w_ecg)
        if t >= washout:
            out[t - washout, :n] = x
    return StateTrajectory(out, sampling_period if sampling_period else 1.0, x)


def reservoir_sidecar(weights: ReservoirWeights) -> str:
    """Text description sufficient to regenerate ``weights`` exactly."""
    doc = {
        "format": "rcecg-reservoir/1",
        "params": asdict(weights.params),
        "seed_used": weights.seed_used,
        "achieved_spectral_radius": weights.achieved_spectral_radius,
        "nnz": int(weights.W.nnz),
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def load_reservoir_sidecar(text: str, n_outputs: int = 1) -> ReservoirWeights:
    doc = json.loads(text)
    params = ReservoirParams(**doc["params"])
    weights = build_reservoir(params, n_outputs=n_outputs)
    recorded = doc["achieved_spectral_radius"]
    if weights.seed_used != doc["seed_used"] or abs(weights.achieved_spectral_radius - recorded) > 1e-12 * recorded:
        raise ValueError("regenerated reservoir does not match its sidecar")
    return weights
