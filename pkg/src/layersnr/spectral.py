"""Singular-value signal-to-noise ratio of a single weight matrix.

The pipeline for one matrix W (m x n) is::

    singular values s_1 >= ... >= s_k            (k = min(m, n))
    sigma   = IQR(s) / 1.349                     robust noise scale
    beta    = min(m, n) / max(m, n)
    eps     = sigma * (1 + sqrt(beta))           Marchenko-Pastur upper edge, unnormalized
    snr     = sum(s_i > eps) / sum(s_i <= eps)
    snr_max = snr / s_1

``snr_max`` (the normalized SNR) is the ranking key used downstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .checkpoint import TensorRecord

__all__ = [
    "IQR_TO_SIGMA",
    "SvdResult",
    "MpBounds",
    "SnrResult",
    "singular_values",
    "estimate_sigma",
    "mp_bounds",
    "snr",
    "analyze_matrix",
]

# Interquartile range of a unit normal: 2 * Phi^-1(0.75).
IQR_TO_SIGMA = 1.349


@dataclass(frozen=True)
class SvdResult:
    singular_values: np.ndarray
    rows: int
    cols: int

    def __post_init__(self) -> None:
        s = self.singular_values
        if s.ndim != 1 or s.size != min(self.rows, self.cols):
            raise ValueError("expected min(rows, cols) singular values")


@dataclass(frozen=True)
class MpBounds:
    sigma_estimate: float
    beta: float
    epsilon: float
    lambda_plus: float
    lambda_minus: float


@dataclass(frozen=True)
class SnrResult:
    tensor_name: str
    rows: int
    cols: int
    signal_sum: float
    noise_sum: float
    raw_snr: float  # math.inf when all mass is above the threshold
    normalized_snr: float
    max_singular_value: float
    bounds: MpBounds
    signal_count: int

    @property
    def noise_count(self) -> int:
        return min(self.rows, self.cols) - self.signal_count

    @property
    def num_params(self) -> int:
        return self.rows * self.cols


def singular_values(matrix) -> SvdResult:
    """All singular values of a 2-D matrix, descending, computed in float64."""
    w = np.asarray(matrix, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got {w.ndim} dimensions")
    if w.size == 0:
        raise ValueError("matrix is empty")
    if not np.isfinite(w).all():
        raise ValueError("matrix contains non-finite entries")
    s = np.linalg.svd(w, compute_uv=False)
    # LAPACK already returns them descending and >= 0; enforce for the contract
    s = np.clip(np.sort(s)[::-1], 0.0, None)
    return SvdResult(np.ascontiguousarray(s), w.shape[0], w.shape[1])


def estimate_sigma(svd: SvdResult) -> float:
    """Noise scale from the interquartile range of the singular values.

    Quantiles use linear interpolation between order statistics, so a set of
    identical values gives exactly 0.
    """
    s = svd.singular_values
    if s.size == 0:
        raise ValueError("need at least one singular value")
    q25, q75 = np.quantile(s, [0.25, 0.75], method="linear")
    return max(float(q75 - q25), 0.0) / IQR_TO_SIGMA


def mp_bounds(sigma: float, rows: int, cols: int) -> MpBounds:
    if rows < 1 or cols < 1:
        raise ValueError("matrix dimensions must be positive")
    if not sigma >= 0:
        raise ValueError("sigma must be non-negative")
    beta = min(rows, cols) / max(rows, cols)
    root = math.sqrt(beta)
    return MpBounds(
        sigma_estimate=float(sigma),
        beta=beta,
        epsilon=sigma * (1.0 + root),
        lambda_plus=sigma**2 * (1.0 + root) ** 2,
        lambda_minus=sigma**2 * (1.0 - root) ** 2,
    )


def snr(matrix_name: str, svd: SvdResult, bounds: MpBounds) -> SnrResult:
    """Split singular values at ``bounds.epsilon`` and form the signal/noise ratio.

    A value equal to the threshold counts as noise. Conventions for the
    degenerate cases: no noise mass gives ``inf``; no mass at all gives 0.
    """
    s = svd.singular_values
    is_signal = s > bounds.epsilon
    signal_sum = float(s[is_signal].sum())
    noise_sum = float(s[~is_signal].sum())
    top = float(s[0])

    if noise_sum > 0:
        raw = signal_sum / noise_sum
    elif signal_sum > 0:
        raw = math.inf
    else:
        raw = 0.0

    if top > 0:
        normalized = raw / top
    else:
        normalized = 0.0

    return SnrResult(
        tensor_name=matrix_name,
        rows=svd.rows,
        cols=svd.cols,
        signal_sum=signal_sum,
        noise_sum=noise_sum,
        raw_snr=raw,
        normalized_snr=normalized,
        max_singular_value=top,
        bounds=bounds,
        signal_count=int(np.count_nonzero(is_signal)),
    )


def analyze_matrix(record: TensorRecord) -> SnrResult:
    if len(record.shape) != 2:
        raise ValueError(f"{record.name}: expected a 2-D tensor, got shape {list(record.shape)}")
    if min(record.shape) < 2:
        raise ValueError(f"{record.name}: both dimensions must be >= 2, got {list(record.shape)}")
    if record.flagged:
        raise ValueError(f"{record.name}: {record.nonfinite_count} non-finite values")
    svd = singular_values(record.matrix())
    bounds = mp_bounds(estimate_sigma(svd), svd.rows, svd.cols)
    return snr(record.name, svd, bounds)
