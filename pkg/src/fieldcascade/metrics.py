"""Reconstruction error metrics and kernel density estimation."""

from __future__ import annotations

import numpy as np

from .errors import EmptyDomainError, ParameterError

MIN_BANDWIDTH = 1e-6


def rmse(predicted: np.ndarray, truth: np.ndarray, validity: np.ndarray | None = None) -> float:
    """Root mean square error over valid points, channels pooled."""
    predicted = np.asarray(predicted, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if predicted.shape != truth.shape:
        raise ParameterError(f"shape mismatch {predicted.shape} vs {truth.shape}")
    err = predicted - truth
    if validity is not None:
        validity = np.asarray(validity, dtype=bool).reshape(-1)
        if validity.shape[0] != err.shape[0]:
            raise ParameterError("validity length does not match fields")
        if not validity.any():
            raise EmptyDomainError("rmse over zero valid points")
        err = err[validity]
    if err.size == 0:
        raise EmptyDomainError("rmse over empty fields")
    return float(np.sqrt(np.mean(err**2)))


def silverman_bandwidth(samples: np.ndarray) -> float:
    """h = 0.9 min(std, IQR/1.34) n^(-1/5), floored at MIN_BANDWIDTH.

    A zero spread measure (e.g. the IQR when most samples tie) drops out of
    the min; otherwise ties would force a near-zero bandwidth that no
    evaluation grid can resolve. All-identical samples fall back to the
    documented minimum bandwidth.
    """
    samples = np.asarray(samples, dtype=np.float64)
    n = samples.size
    if n < 2:
        return MIN_BANDWIDTH
    std = float(np.std(samples, ddof=1))
    q75, q25 = np.percentile(samples, [75, 25])
    spreads = [s for s in (std, (q75 - q25) / 1.34) if s > 0.0]
    if not spreads:
        return MIN_BANDWIDTH
    h = 0.9 * min(spreads) * n ** (-0.2)
    if not np.isfinite(h) or h <= 0.0:
        return MIN_BANDWIDTH
    return h


def kde_rmse(
    samples, grid: np.ndarray | None = None, n_grid: int = 512, bandwidth: float | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian KDE with Silverman bandwidth, evaluated on an explicit grid.

    The default grid spans the sample range extended by four bandwidths on
    each side, so the curve integrates to one (trapezoid rule) within 1e-3.
    Returns (grid, density).
    """
    samples = np.asarray(samples, dtype=np.float64).reshape(-1)
    if samples.size == 0:
        raise EmptyDomainError("kde needs at least one sample")
    h = silverman_bandwidth(samples) if bandwidth is None else float(bandwidth)
    if h <= 0:
        raise ParameterError("bandwidth must be positive")
    if grid is None:
        lo = samples.min() - 4.0 * h
        hi = samples.max() + 4.0 * h
        grid = np.linspace(lo, hi, n_grid)
    else:
        grid = np.asarray(grid, dtype=np.float64)
    u = (grid[:, None] - samples[None, :]) / h
    density = np.exp(-0.5 * u**2).sum(axis=1) / (samples.size * h * np.sqrt(2.0 * np.pi))
    return grid, density
