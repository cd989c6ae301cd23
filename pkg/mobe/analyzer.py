"""Effective rank, parameter accounting and per-layer reconstruction error reports."""

import csv
import logging
from dataclasses import asdict, dataclass, fields
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import ArgumentError, DegenerateInputError, ShapeError
from .models import FACTORIZED_TYPES, Method, MoBEModel
from .tensor_linalg import svd

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.95
RANK_SLACK = 1e-9


def effective_rank(matrix, threshold=DEFAULT_THRESHOLD):
    """Smallest k whose leading squared singular values carry strictly more than ``threshold`` of the energy."""
    if not 0 < threshold < 1:
        raise ArgumentError(f"threshold must be in (0, 1), got {threshold}")
    energy = svd(matrix).energy()
    total = float(energy.sum())
    if total <= 0.0:
        raise DegenerateInputError("effective rank of a zero matrix is undefined")
    # ties at the boundary are not "strictly more" at any scale; the slack absorbs summation rounding
    above = np.flatnonzero(np.cumsum(energy) > (threshold + RANK_SLACK) * total)
    return int(above[0]) + 1 if above.size else len(energy)


def svd_threshold(p, d):
    """Rank below which a two-factor split of a p x d matrix saves parameters: p d / (p + d)."""
    if p < 1 or d < 1:
        raise ArgumentError(f"dimensions must be >= 1, got ({p}, {d})")
    return p * d / (p + d)


@dataclass(frozen=True)
class RankRow:
    layer: int
    type: str
    mean_re: float
    min_re: int
    max_re: int
    threshold: float


def rank_report(model, threshold=DEFAULT_THRESHOLD):
    """Per layer and matrix type: mean/min/max effective rank over experts plus the SVD threshold."""
    rows = []
    p, d = model.config.intermediate, model.config.hidden
    limit = svd_threshold(p, d)
    for idx, layer in enumerate(model.layers):
        for kind in FACTORIZED_TYPES:
            ranks = [effective_rank(w, threshold) for w in layer.experts(kind)]
            rows.append(RankRow(layer=idx, type=kind.value, mean_re=float(np.mean(ranks)),
                                min_re=int(min(ranks)), max_re=int(max(ranks)), threshold=limit))
            if max(ranks) < limit:
                logger.info("layer %d %s: every expert's effective rank is below the SVD threshold %.1f",
                            idx, kind.value, limit)
    return rows


@dataclass(frozen=True)
class ParamAccount:
    """Per-layer parameter counts for MoE, MoBE and MoBE-dagger (reduced activated experts)."""
    n: int
    d: int
    p: int
    r: int
    m: int
    k: int
    k_prime: int
    moe_total: int
    moe_activated: int
    mobe_total: int
    mobe_activated: int
    mobe_dagger_activated: int

    @property
    def gamma(self):
        return Fraction(self.mobe_total, self.moe_total)

    def gamma_terms(self):
        """1/3, 2r/(3d), 2mr/(3np): the three summands of gamma."""
        return (
            Fraction(1, 3),
            Fraction(2 * self.r, 3 * self.d),
            Fraction(2 * self.m * self.r, 3 * self.n * self.p),
        )

    @property
    def compression(self):
        return 1 - self.gamma

    def rows(self, layers=1):
        """(method, total, activated, gamma) rows, scaled to ``layers`` MoE layers."""
        return [
            ("moe", self.moe_total * layers, self.moe_activated * layers, 1.0),
            ("mobe", self.mobe_total * layers, self.mobe_activated * layers, float(self.gamma)),
            ("mobe_dagger", self.mobe_total * layers, self.mobe_dagger_activated * layers, float(self.gamma)),
        ]


def param_account(config, factorize_config=None, *, rank=None, basis_count=None, k_prime=None):
    """Totals and activated counts per layer for MoE, MoBE and MoBE with k' experts.

    Rank and basis count come from ``factorize_config`` (r defaults to p there) or are given directly.
    """
    n, d, p, k = config.experts, config.hidden, config.intermediate, config.top_k
    if factorize_config is not None:
        rank = factorize_config.rank_for(p) if rank is None else rank
        basis_count = factorize_config.m if basis_count is None else basis_count
    if rank is None or basis_count is None:
        raise ArgumentError("parameter accounting needs a rank and a basis count")
    k_prime = config.activated_experts if k_prime is None else k_prime
    if not 1 <= rank <= p:
        raise ArgumentError(f"rank must be in [1, {p}], got {rank}")
    if basis_count < 1:
        raise ArgumentError(f"basis count must be >= 1, got {basis_count}")
    if not 1 <= k_prime <= k:
        raise ArgumentError(f"k' must be in [1, {k}], got {k_prime}")
    r, m = rank, basis_count
    return ParamAccount(
        n=n, d=d, p=p, r=r, m=m, k=k, k_prime=k_prime,
        moe_total=3 * n * d * p,
        moe_activated=3 * k * d * p,
        mobe_total=n * d * p + 2 * n * p * r + 2 * m * r * d,
        mobe_activated=k * d * p + 2 * k * p * r + 2 * k * r * d,
        mobe_dagger_activated=k_prime * d * p + 2 * k_prime * p * r + 2 * k_prime * r * d,
    )


def account_for_model(model):
    """ParamAccount of a factorized model, cross-checked against its tensor element counts."""
    if not isinstance(model, MoBEModel):
        raise ArgumentError("parameter accounting needs a factorized model")
    account = param_account(model.config, rank=model.spec.rank, basis_count=model.spec.basis_count)
    serialized = model.element_count() // model.config.layers
    if model.method is Method.MOBE and not model.spec.mu_present and serialized != account.mobe_total:
        raise ShapeError("serialized element count disagrees with the parameter formula",
                         (serialized,), (account.mobe_total,))
    return account


@dataclass(frozen=True)
class ParamRow:
    method: str
    total: int
    activated: int
    gamma: float


def activated_count(model):
    """Parameters touched per token across all layers (down included, router excluded)."""
    config = model.config
    n, d, p, k = config.experts, config.hidden, config.intermediate, config.activated_experts
    if not isinstance(model, MoBEModel):
        return 3 * k * d * p * config.layers
    spec = model.spec
    r, m = spec.rank, spec.basis_count
    per_type = {
        Method.MOBE: k * p * r + k * r * d,
        Method.SVD: k * r * (p + d),
        Method.MOLAE: k * p * r + min(k, m) * r * d,
        Method.D2MOE: k * r * (p + d),
    }[spec.method]
    if spec.mu_present:
        per_type += p * d
    return (k * d * p + 2 * per_type) * config.layers


def variant_params(original, variants):
    """Parameter table rows: the dense model first, then every variant with gamma = total / dense total."""
    base = original.element_count()
    rows = [ParamRow(method="moe", total=base, activated=activated_count(original), gamma=1.0)]
    for variant in variants:
        name, model = variant if isinstance(variant, tuple) else (_variant_name(variant), variant)
        if (isinstance(model, MoBEModel) and model.method is Method.MOBE
                and model.config.activated_experts < model.config.top_k):
            name = f"{name}_dagger"
        total = model.element_count()
        rows.append(ParamRow(method=name, total=total, activated=activated_count(model), gamma=total / base))
    return rows


@dataclass(frozen=True)
class MseRow:
    layer: int
    type: str
    method: str
    mse: float
    frob_sq: float


def _variant_name(variant):
    return variant.method.value if isinstance(variant, MoBEModel) else "original"


def mse_report(original, variants):
    """Per layer, type and variant: sum_i ||W^i - W_hat^i||^2 / (n p d) and the raw sum.

    ``variants`` is a list of models or ``(name, model)`` pairs.
    """
    rows = []
    n, d, p = original.config.experts, original.config.hidden, original.config.intermediate
    for variant in variants:
        name, model = variant if isinstance(variant, tuple) else (_variant_name(variant), variant)
        if len(model.layers) != len(original.layers):
            raise ShapeError(f"variant {name} layer count differs", (len(model.layers),), (len(original.layers),))
        for idx, (ref, layer) in enumerate(zip(original.layers, model.layers)):
            for kind in FACTORIZED_TYPES:
                truth = ref.experts(kind)
                approx = layer.experts(kind)
                if approx.shape != truth.shape:
                    raise ShapeError(f"variant {name} layer {idx} {kind.value} shape differs",
                                     approx.shape, truth.shape)
                frob_sq = float(np.sum((truth - approx) ** 2))
                rows.append(MseRow(layer=idx, type=kind.value, method=name,
                                   mse=frob_sq / (n * p * d), frob_sq=frob_sq))
    return rows


def write_rows(path, rows, columns=None):
    """Write dataclass rows (or plain tuples with ``columns``) as CSV."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if rows and columns is None:
            columns = [f.name for f in fields(rows[0])]
        if columns:
            writer.writerow(columns)
        for row in rows:
            writer.writerow(list(asdict(row).values()) if hasattr(row, "__dataclass_fields__") else list(row))
    return path
