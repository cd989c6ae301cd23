"""Comparison methods: per-expert truncated SVD, shared-latent SVD over stacked groups (MoLAE-style),
and shared weighted mean plus low-rank deltas (D2-MoE-style, uniform weights unless supplied).

Every result is expressed in the common factorized container with f = none, so
the reported error is an exact Eckart-Young residual.
"""

import logging
import math
from functools import partial
from dataclasses import dataclass

import numpy as np

from .activations import Activation
from .errors import ArgumentError
from .models import FACTORIZED_TYPES, FactorizedWeights, FactorSpec, Method, MoBELayer, MoBEModel, expert_groups
from .tensor_linalg import low_rank_factors, svd

logger = logging.getLogger(__name__)


@dataclass
class BaselineResult:
    method: Method
    weights: FactorizedWeights
    sq_error: float
    param_count: int


def _check_rank(rank, p, d, name="rank"):
    if not 1 <= rank <= min(p, d):
        raise ArgumentError(f"{name} must be in [1, {min(p, d)}], got {rank}")


def _linear_factors(a, basis, groups, mu=None):
    n = a.shape[0]
    return FactorizedWeights(
        a=a, basis=basis, logits=np.zeros((n, basis.shape[0] // groups)),
        activation=Activation.NONE, group_split=groups, mu=mu,
    ).check()


def svd_per_expert(experts, rank):
    experts = np.asarray(experts, dtype=np.float64)
    n, p, d = experts.shape
    _check_rank(rank, p, d)
    a = np.empty((n, p, rank))
    basis = np.empty((n, rank, d))
    sq_error = 0.0
    for i in range(n):
        result = svd(experts[i])
        a[i], basis[i] = low_rank_factors(result, rank)
        sq_error += float(np.sum(result.s[rank:] ** 2))
    return BaselineResult(
        method=Method.SVD,
        weights=_linear_factors(a, basis, groups=n),
        sq_error=sq_error,
        param_count=n * rank * (p + d),
    )


def contiguous_groups(n, latent_count):
    return expert_groups(n, latent_count)


def molae_compress(experts, latent_count, rank, grouping=contiguous_groups):
    """Per group, stack members vertically and keep the top-``rank`` right factor as the shared latent.

    ``grouping(n, latent_count)`` returns one index set per group; only contiguous
    slices can be written to a checkpoint.
    """
    experts = np.asarray(experts, dtype=np.float64)
    n, p, d = experts.shape
    if not 1 <= latent_count <= n:
        raise ArgumentError(f"latent count must be in [1, {n}], got {latent_count}")
    _check_rank(rank, p, d)
    groups = grouping(n, latent_count)
    if len(groups) != latent_count:
        raise ArgumentError(f"grouping returned {len(groups)} groups, expected {latent_count}")

    a = np.empty((n, p, rank))
    basis = np.empty((latent_count, rank, d))
    sq_error = 0.0
    for k, members in enumerate(groups):
        stacked = experts[members].reshape(-1, d)
        result = svd(stacked)
        left, basis[k] = low_rank_factors(result, rank)
        a[members] = left.reshape(-1, p, rank)
        sq_error += float(np.sum(result.s[rank:] ** 2))
    return BaselineResult(
        method=Method.MOLAE,
        weights=_linear_factors(a, basis, groups=latent_count),
        sq_error=sq_error,
        param_count=n * p * rank + latent_count * rank * d,
    )


def d2moe_compress(experts, delta_rank, weights=None):
    """shared = sum_i w_i W^i / sum_i w_i (kept dense); each delta W^i - shared is truncated to ``delta_rank``."""
    experts = np.asarray(experts, dtype=np.float64)
    n, p, d = experts.shape
    _check_rank(delta_rank, p, d, name="delta rank")
    if weights is None:
        weights = np.ones(n)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (n,) or np.any(weights < 0) or not np.any(weights > 0) or not np.all(np.isfinite(weights)):
        raise ArgumentError("expert weights must be n finite non-negative scalars, not all zero")

    shared = np.tensordot(weights, experts, axes=1) / weights.sum()
    a = np.empty((n, p, delta_rank))
    basis = np.empty((n, delta_rank, d))
    sq_error = 0.0
    for i in range(n):
        result = svd(experts[i] - shared)
        a[i], basis[i] = low_rank_factors(result, delta_rank)
        sq_error += float(np.sum(result.s[delta_rank:] ** 2))
    return BaselineResult(
        method=Method.D2MOE,
        weights=_linear_factors(a, basis, groups=n, mu=shared),
        sq_error=sq_error,
        param_count=p * d + n * delta_rank * (p + d),
    )


def baseline_param_count(method, n, p, d, rank, latent_count=None):
    method = Method.parse(method)
    if method is Method.SVD:
        return n * rank * (p + d)
    if method is Method.MOLAE:
        return n * p * rank + latent_count * rank * d
    if method is Method.D2MOE:
        return p * d + n * rank * (p + d)
    raise ArgumentError(f"{method.value} is not a baseline")


def equal_budget_rank(method, n, p, d, target, latent_count=None):
    """Smallest rank whose parameter count is >= ``target`` (per matrix type per layer)."""
    method = Method.parse(method)
    if method is Method.SVD:
        rank = math.ceil(target / (n * (p + d)))
    elif method is Method.MOLAE:
        rank = math.ceil(target / (n * p + latent_count * d))
    elif method is Method.D2MOE:
        rank = math.ceil((target - p * d) / (n * (p + d)))
    else:
        raise ArgumentError(f"{method.value} is not a baseline")
    cap = min(p, d)
    if rank > cap:
        logger.warning("%s rank %d for budget %d exceeds min(p, d); clamped to %d", method.value, rank, target, cap)
        rank = cap
    return max(1, rank)


def mobe_budget(n, p, d, rank, basis_count):
    """MoBE parameter count for one matrix type in one layer: n p r + m r d."""
    return n * p * rank + basis_count * rank * d


def compress_model(model, method, rank, latent_count=None, weights=None):
    """Apply a baseline to gate/up of every layer; down and router are copied.

    Returns ``(MoBEModel, {(layer, type): BaselineResult})``.
    """
    method = Method.parse(method)
    config = model.config
    n = config.experts
    if method is Method.SVD:
        run = partial(svd_per_expert, rank=rank)
        basis_count = groups = n
    elif method is Method.MOLAE:
        if latent_count is None:
            raise ArgumentError("molae needs a latent count")
        run = partial(molae_compress, latent_count=latent_count, rank=rank)
        basis_count = groups = latent_count
    elif method is Method.D2MOE:
        run = partial(d2moe_compress, delta_rank=rank, weights=weights)
        basis_count = groups = n
    else:
        raise ArgumentError(f"{method.value} is not a baseline")

    layers, results = [], {}
    for idx, layer in enumerate(model.layers):
        factors = {}
        for kind in FACTORIZED_TYPES:
            result = run(layer.experts(kind))
            results[(idx, kind.value)] = result
            factors[kind] = result.weights
            logger.info("layer %d %s: %s squared error %.6e", idx, kind.value, method.label, result.sq_error)
        layers.append(MoBELayer(gate=factors[FACTORIZED_TYPES[0]], up=factors[FACTORIZED_TYPES[1]],
                                down=np.array(layer.down), router=np.array(layer.router)))

    spec = FactorSpec(rank=rank, basis_count=basis_count, group_split=groups, activation=Activation.NONE,
                      mu_present=method is Method.D2MOE, method=method)
    return MoBEModel(config=config, spec=spec, layers=layers), results
