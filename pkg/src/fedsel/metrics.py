"""Evaluation: per-client losses, the weighted global objective, Jain's
fairness index, and final-loss histograms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import models
from .data import FederatedDataset
from .models import ModelSpec, ParamVector


@dataclass
class FairnessReport:
    round_index: int
    jain: float
    losses: np.ndarray


def client_losses(dataset: FederatedDataset, spec: ModelSpec, params: ParamVector) -> np.ndarray:
    """Mean loss of the current model over each client's full local training set."""
    return np.array(
        [models.loss(spec, params, shard.data) for shard in dataset.shards], dtype=np.float64
    )


def global_loss(fractions: np.ndarray, losses: np.ndarray) -> float:
    """Data-fraction-weighted sum of per-client losses.

    With fractions proportional to shard sizes this equals the pooled
    per-sample mean loss.
    """
    fractions = np.asarray(fractions, dtype=np.float64)
    losses = np.asarray(losses, dtype=np.float64)
    if fractions.shape != losses.shape:
        raise ValueError("fractions and losses must have equal length")
    return float(fractions @ losses)


def jain_index(losses: np.ndarray) -> float:
    """Jain's fairness index (sum x)^2 / (K * sum x^2) over non-negative losses.

    1 means all clients perform identically; 1/K is maximal disparity. The
    all-zero vector is defined as perfectly uniform (1.0). Tiny rounding
    excursions are clamped back into [1/K, 1].
    """
    x = np.asarray(losses, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("losses must be a non-empty vector")
    if np.any(x < 0):
        raise ValueError("losses must be non-negative")
    peak = float(x.max())
    if peak == 0.0:
        return 1.0
    if peak > 1e150 or peak < 1e-150:
        # rescale so the squared sum cannot overflow or underflow; the ratio
        # is scale-free so this only changes the last few bits
        x = x / peak
    total = x.sum()
    k = x.size
    value = total * total / (k * float(x @ x))
    return float(min(1.0, max(1.0 / k, value)))


def loss_histogram(losses: np.ndarray, num_bins: int) -> tuple[np.ndarray, np.ndarray]:
    """Equal-width histogram over [min, max]; counts always sum to len(losses).

    Degenerates to a single bin when all values coincide.
    """
    x = np.asarray(losses, dtype=np.float64)
    if x.size == 0:
        raise ValueError("losses must be non-empty")
    if num_bins < 1:
        raise ValueError("num_bins must be >= 1")
    lo, hi = float(x.min()), float(x.max())
    if lo == hi:
        return np.array([lo, hi]), np.array([x.size], dtype=np.int64)
    counts, edges = np.histogram(x, bins=num_bins, range=(lo, hi))
    return edges, counts.astype(np.int64)
