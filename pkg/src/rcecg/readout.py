"""
Linear readout training.

Ridge regression on extended reservoir states, and a robust weighted
variant in which each time sample is reweighted by an exponential
function of its residual under the plain ridge fit.
"""

from __future__ import annotations

import io
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

logger = logging.getLogger(__name__)

GRAM_BLOCK = 16384


@dataclass(frozen=True)
class RobustConfig:
    a: float
    s: float = 1.0
    max_irls_rounds: int = 1

    def __post_init__(self):
        if self.a < 1 or self.s < 1:
            raise ValueError(f"robust scaling factors need a >= 1 and s >= 1, got a={self.a}, s={self.s}")
        if self.max_irls_rounds < 1:
            raise ValueError("max_irls_rounds must be at least 1")

    @property
    def ratio(self) -> float:
        return self.a / self.s


@dataclass(frozen=True)
class RidgeConfig:
    gamma: float
    robust: Optional[RobustConfig] = None

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"regularization factor must be nonnegative, got {self.gamma}")


@dataclass(frozen=True)
class TrainingDesign:
    """Extended states ``Z`` (features x samples) and targets ``Y`` (outputs x samples)."""

    Z: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        if self.Z.ndim != 2 or self.Y.ndim != 2:
            raise ValueError("Z and Y must be 2-D")
        if self.Z.shape[1] != self.Y.shape[1]:
            raise ValueError(f"Z has {self.Z.shape[1]} columns but Y has {self.Y.shape[1]}")


@dataclass
class ReadoutWeights:
    W_out: np.ndarray
    gamma: float
    a: Optional[float] = None
    s: Optional[float] = None
    residual_norm: float = float("nan")

    def __call__(self, Z: np.ndarray) -> np.ndarray:
        return self.W_out @ Z


def _check_finite(*arrays) -> None:
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError("non-finite entries in regression inputs")


def gram(Z: np.ndarray, weights: Optional[np.ndarray] = None) -> np.ndarray:
    """``Z diag(w) Z^T`` accumulated over fixed column blocks in a fixed order."""
    k, n = Z.shape
    G = np.zeros((k, k))
    root = None if weights is None else np.sqrt(weights)
    for lo in range(0, n, GRAM_BLOCK):
        blk = Z[:, lo:lo + GRAM_BLOCK]
        if root is not None:
            blk = blk * root[lo:lo + GRAM_BLOCK]
        # X @ X.T form lets BLAS use the symmetric rank-k update
        G += blk @ blk.T
    return G


def cross(Y: np.ndarray, Z: np.ndarray, weights: Optional[np.ndarray] = None) -> np.ndarray:
    if weights is None:
        return Y @ Z.T
    return (Y * weights) @ Z.T


def solve_normal(G: np.ndarray, B: np.ndarray, gamma: float) -> np.ndarray:
    """Return ``B (G + gamma^2 I)^{-1}`` for symmetric positive semidefinite ``G``.

    Uses a Cholesky-based solve; when the system is singular or badly
    conditioned, falls back to the minimum-norm pseudo-inverse solution.
    """
    A = G + (gamma * gamma) * np.eye(G.shape[0])
    with warnings.catch_warnings():
        warnings.simplefilter("error", linalg.LinAlgWarning)
        try:
            return linalg.solve(A, B.T, assume_a="pos").T
        except (linalg.LinAlgError, linalg.LinAlgWarning) as exc:
            logger.warning("ridge normal equations ill-posed (%s); using minimum-norm solution",
                           str(exc).splitlines()[0])
    return B @ linalg.pinvh(A)


def ridge_solve(design: TrainingDesign, gamma: float) -> ReadoutWeights:
    """Ridge regression ``W = Y Z^T (Z Z^T + gamma^2 I)^{-1}``."""
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    _check_finite(design.Z, design.Y)
    W = solve_normal(gram(design.Z), cross(design.Y, design.Z), gamma)
    res = float(np.linalg.norm(design.Y - W @ design.Z))
    return ReadoutWeights(W, gamma, residual_norm=res)


def robust_weights(residuals: np.ndarray, a: float, s: float) -> np.ndarray:
    """Per-sample weights ``exp(-a |r_i| / s)``.

    ``r_i`` is the Euclidean norm of residual column ``i`` (pooled over
    output rows); this equals ``psi(r/s) / (r/s)`` for
    ``psi(r) = r exp(-a |r|)`` and is 1 where the residual vanishes.
    """
    r = np.asarray(residuals, dtype=float)
    if r.ndim == 2:
        r = np.sqrt(np.einsum("ij,ij->j", r, r))
    return np.exp(-a * (np.abs(r) / s))


def weighted_ridge_solve(design: TrainingDesign, config: RidgeConfig,
                         initial: Optional[ReadoutWeights] = None) -> ReadoutWeights:
    """Robust weighted ridge regression.

    Fits plain ridge, turns its residuals into sample weights ``v`` and
    solves ``W = Y V Z^T (Z V Z^T + gamma^2 I)^{-1}`` with ``V = diag(v)``.
    Repeats the reweighting ``max_irls_rounds`` times.
    """
    if config.robust is None:
        raise ValueError("weighted_ridge_solve needs a robust configuration")
    rob = config.robust
    Z, Y = design.Z, design.Y
    W = (initial or ridge_solve(design, config.gamma)).W_out
    for _ in range(rob.max_irls_rounds):
        v = robust_weights(Y - W @ Z, rob.a, rob.s)
        W = solve_normal(gram(Z, v), cross(Y, Z, v), config.gamma)
    res = float(np.linalg.norm(Y - W @ Z))
    return ReadoutWeights(W, config.gamma, rob.a, rob.s, res)


def fit_readout(design: TrainingDesign, config: RidgeConfig) -> ReadoutWeights:
    if config.robust is None:
        return ridge_solve(design, config.gamma)
    return weighted_ridge_solve(design, config)


def moving_average(X: np.ndarray, half_width: int, axis: int = -1) -> np.ndarray:
    """Centered moving mean of ``2*half_width + 1`` samples along ``axis``.

    Windows are truncated at the array ends and normalised by the number
    of samples actually covered.
    """
    X = np.asarray(X, dtype=float)
    if half_width <= 0:
        return X.copy()
    X = np.moveaxis(X, axis, -1)
    shape = X.shape
    n = shape[-1]
    flat = X.reshape(-1, n)
    idx = np.arange(n)
    lo = np.clip(idx - half_width, 0, n)
    hi = np.clip(idx + half_width + 1, 0, n)
    count = (hi - lo).astype(float)

    # Prefix sums restart every `block` samples so their magnitude, and the
    # cancellation error of differencing them, scales with the window rather
    # than the trajectory length. A window then spans at most two blocks.
    block = min(2 * half_width + 1, n)
    n_blocks = -(-n // block)
    k = lo // block
    a = lo - k * block
    e = hi - k * block
    spill = e > block
    e_here = np.where(spill, block, e)
    flat_a = k * (block + 1) + a
    flat_e = k * (block + 1) + e_here
    flat_next = np.where(spill, (k + 1) * (block + 1) + (e - block), 0)

    out = np.empty(flat.shape)
    chunk = 64
    padded = np.zeros((min(chunk, len(flat)), n_blocks * block))
    local = np.zeros((min(chunk, len(flat)), n_blocks, block + 1))
    # row chunks bound the temporaries for long trajectories
    for r0 in range(0, len(flat), chunk):
        rows = flat[r0:r0 + chunk]
        m = len(rows)
        padded[:m, :n] = rows
        np.cumsum(padded[:m].reshape(m, n_blocks, block), axis=2, out=local[:m, :, 1:])
        L = local[:m].reshape(m, -1)
        s = L[:, flat_e] - L[:, flat_a]
        s += np.where(spill, L[:, flat_next], 0.0)
        out[r0:r0 + chunk] = s / count
    return np.moveaxis(out.reshape(shape), -1, axis)


def half_width(tau: float, dt: float) -> int:
    if tau < 0:
        raise ValueError(f"integration window must be nonnegative, got {tau}")
    return int(np.floor(tau / (2.0 * dt) + 1e-9))


def time_average_states(Z, tau: float, dt: float) -> np.ndarray:
    """Average extended states over a window of ``tau`` seconds centered on each sample.

    ``Z`` may be a ``StateTrajectory`` or a (features x samples) array.
    """
    if hasattr(Z, "states"):
        Z = Z.Z
    h = half_width(tau, dt)
    if h == 0:
        return np.asarray(Z)
    return moving_average(Z, h, axis=1)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

MAGIC = b"RCECG-READOUT/1\n"


@dataclass
class RowConfig:
    label: str
    gamma: float
    a: Optional[float]
    s: Optional[float]
    tau: float

    @property
    def weighting(self) -> str:
        return "no weights" if self.a is None else f"{self.a / self.s:g}"


def dump_readout(W_out: np.ndarray, rows: Sequence[RowConfig], extra: Optional[dict] = None) -> bytes:
    """Header line (JSON) followed by ``W_out`` as little-endian float64, row-major."""
    W_out = np.ascontiguousarray(W_out, dtype="<f8")
    header = {
        "n_outputs": int(W_out.shape[0]),
        "n_features": int(W_out.shape[1]),
        "class_order": [r.label for r in rows],
        "rows": [asdict(r) for r in rows],
    }
    if extra:
        header.update(extra)
    return MAGIC + json.dumps(header, sort_keys=True).encode() + b"\n" + W_out.tobytes()


def load_readout(blob: bytes) -> Tuple[np.ndarray, List[RowConfig], dict]:
    if not blob.startswith(MAGIC):
        raise ValueError("not a readout file")
    rest = blob[len(MAGIC):]
    line, data = rest.split(b"\n", 1)
    header = json.loads(line)
    shape = (header["n_outputs"], header["n_features"])
    W = np.frombuffer(data, dtype="<f8")
    if W.size != shape[0] * shape[1]:
        raise ValueError(f"readout payload holds {W.size} values, header declares {shape}")
    rows = [RowConfig(**r) for r in header["rows"]]
    return W.reshape(shape).copy(), rows, header
