"""Layer-wide Z-score normalization of expert weights and the sigma fold.

mu and sigma are scalars over every entry of every expert of one matrix type in
one layer (population std). ``mu_matrix=True`` swaps the scalar mean for the
elementwise cross-expert mean; sigma stays scalar so the fold still works.
"""

import dataclasses
import logging
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, ShapeError
from .models import FACTORIZED_TYPES

logger = logging.getLogger(__name__)

SIGMA_EPSILON = 1e-12


@dataclass(frozen=True)
class WeightStats:
    mu: float
    sigma: float
    mu_matrix: np.ndarray = None

    @property
    def offset(self):
        """What gets subtracted before scaling: the scalar mean or the p x d mean."""
        return self.mu if self.mu_matrix is None else self.mu_matrix


@dataclass(frozen=True)
class StatsRow:
    layer: int
    type: str
    mu: float
    sigma: float
    mu_omission_cost: float


def _stack(weights):
    if isinstance(weights, np.ndarray) and weights.ndim == 3:
        stacked = np.asarray(weights, dtype=np.float64)
    else:
        weights = [np.asarray(w, dtype=np.float64) for w in weights]
        if not weights:
            raise ShapeError("zscore needs at least one expert matrix")
        shapes = {w.shape for w in weights}
        if len(shapes) != 1:
            raise ShapeError("expert matrices must share one shape", *sorted(shapes))
        stacked = np.stack(weights)
    if stacked.shape[0] == 0:
        raise ShapeError("zscore needs at least one expert matrix", stacked.shape)
    return stacked


def weight_stats(weights, mu_matrix=False):
    stacked = _stack(weights)
    if mu_matrix:
        center = stacked.mean(axis=0)
        sigma = float(np.sqrt(np.mean((stacked - center) ** 2)))
        return WeightStats(mu=float(center.mean()), sigma=sigma, mu_matrix=center)
    mu = float(stacked.mean())
    sigma = float(np.sqrt(np.mean((stacked - mu) ** 2)))
    return WeightStats(mu=mu, sigma=sigma)


def zscore(weights, mu_matrix=False):
    """Return ``((W^i - mu) / sigma for every i, stats)``."""
    stacked = _stack(weights)
    stats = weight_stats(stacked, mu_matrix=mu_matrix)
    if stats.sigma < SIGMA_EPSILON:
        raise DegenerateInputError(f"weights are constant (sigma={stats.sigma:.3e}); cannot normalize")
    return (stacked - stats.offset) / stats.sigma, stats


def mu_omission_cost(stats, p, d):
    """Frobenius error per expert from dropping a scalar mu: |mu| sqrt(p d)."""
    return abs(stats.mu) * np.sqrt(p * d)


def stats_report(model):
    """Model-wide mean/std per layer for gate and up matrices."""
    rows = []
    for idx, layer in enumerate(model.layers):
        for kind in FACTORIZED_TYPES:
            experts = layer.experts(kind)
            stats = weight_stats(experts)
            p, d = experts.shape[1:]
            rows.append(StatsRow(layer=idx, type=kind.value, mu=stats.mu, sigma=stats.sigma,
                                 mu_omission_cost=float(mu_omission_cost(stats, p, d))))
    return rows


def model_stats(model):
    """Model-wide (all layers pooled) mean/std per matrix type, the shape of a weight-statistics table."""
    summary = {}
    for kind in FACTORIZED_TYPES:
        pooled = np.concatenate([layer.experts(kind).ravel() for layer in model.layers])
        summary[kind.value] = weight_stats(pooled.reshape(1, 1, -1))
    return summary


def fold_sigma(factors, stats, keep_mu=False):
    """Fold sigma into the transforms: (sigma A) f(sum alpha B) [+ mu].

    ``keep_mu`` attaches the offset as a bias; otherwise it is dropped, which is
    exact only when mu is zero.
    """
    mu = None
    if keep_mu or stats.mu_matrix is not None:
        mu = np.broadcast_to(stats.offset, (factors.p, factors.d)).astype(np.float64)
    return dataclasses.replace(factors, a=factors.a * stats.sigma, mu=mu)


def identity_stats():
    """Stats of a pass-through (un-normalized) layer."""
    return WeightStats(mu=0.0, sigma=1.0)

