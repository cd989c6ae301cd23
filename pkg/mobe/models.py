import enum
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import activations
from .activations import Activation
from .errors import ArgumentError, ShapeError
from .tensor_linalg import softmax_rows

__all__ = [
    "Activation", "MatrixType", "Method", "MoEConfig", "FactorSpec", "MoELayer",
    "FactorizedWeights", "MoBELayer", "MoEModel", "MoBEModel", "expert_groups", "group_slices",
]


class MatrixType(enum.Enum):
    """Enum for the three projection matrices of a SwiGLU expert"""
    GATE = "gate"
    UP = "up"
    DOWN = "down"


FACTORIZED_TYPES = (MatrixType.GATE, MatrixType.UP)


class Method(enum.Enum):
    """Enum for compression methods; all are stored in the same factorized container"""
    MOBE = "mobe"
    SVD = "svd"
    MOLAE = "molae"
    D2MOE = "d2moe"

    @property
    def tag(self):
        return list(Method).index(self)

    @property
    def label(self):
        return {
            Method.MOBE: "MoBE",
            Method.SVD: "SVD",
            Method.MOLAE: "MoLAE",
            Method.D2MOE: "D2-MoE (uniform)",
        }[self]

    @classmethod
    def from_tag(cls, tag):
        members = list(cls)
        if not 0 <= tag < len(members):
            raise ArgumentError(f"unknown method tag {tag}")
        return members[tag]

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ArgumentError(f"unknown method {value!r}") from None


@dataclass(frozen=True)
class MoEConfig:
    """Shape of one MoE model: L layers of n SwiGLU experts (p x d gate/up, d x p down)."""
    layers: int
    experts: int
    hidden: int
    intermediate: int
    top_k: int
    activated_override: int = None

    def validate(self):
        errors = []
        if self.layers < 1:
            errors.append("layers must be >= 1")
        if self.experts < 2:
            errors.append("experts (n) must be >= 2")
        if self.hidden < 1:
            errors.append("hidden (d) must be >= 1")
        if self.intermediate < 1:
            errors.append("intermediate (p) must be >= 1")
        if not 1 <= self.top_k <= self.experts:
            errors.append(f"top_k must be in [1, {self.experts}], got {self.top_k}")
        if self.activated_override is not None and not 1 <= self.activated_override <= self.top_k:
            errors.append(f"activated_override must be in [1, {self.top_k}], got {self.activated_override}")
        if errors:
            raise ArgumentError("; ".join(errors))
        return self

    @property
    def activated_experts(self):
        return self.activated_override or self.top_k

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ArgumentError(f"unknown MoEConfig fields: {', '.join(sorted(unknown))}")
        try:
            return cls(**data).validate()
        except TypeError as exc:
            raise ArgumentError(f"incomplete MoEConfig: {exc}") from None


@dataclass(frozen=True)
class FactorSpec:
    """Header-level description of a factorized container."""
    rank: int
    basis_count: int
    group_split: int = 1
    activation: Activation = Activation.SILU
    mu_present: bool = False
    method: Method = Method.MOBE

    @property
    def bases_per_group(self):
        return self.basis_count // self.group_split


def expert_groups(n, groups):
    """Contiguous, near-equal partition of ``range(n)`` into ``groups`` slices."""
    if not 1 <= groups <= n:
        raise ArgumentError(f"group count must be in [1, {n}], got {groups}")
    # array_split semantics: the first n % groups groups get one extra member
    chunks = np.array_split(np.arange(n), groups)
    return [slice(int(chunk[0]), int(chunk[-1]) + 1) for chunk in chunks]


def group_slices(n, basis_count, groups):
    """[(expert slice, basis slice)] pairing each contiguous expert group with its own bases."""
    per_group = basis_count // groups
    return [
        (experts, slice(k * per_group, (k + 1) * per_group))
        for k, experts in enumerate(expert_groups(n, groups))
    ]


@dataclass
class MoELayer:
    gate: np.ndarray  # (n, p, d)
    up: np.ndarray  # (n, p, d)
    down: np.ndarray  # (n, d, p)
    router: np.ndarray  # (n, d)

    def experts(self, kind):
        return getattr(self, MatrixType(kind).value)

    def check(self, config):
        n, d, p = config.experts, config.hidden, config.intermediate
        expected = {"gate": (n, p, d), "up": (n, p, d), "down": (n, d, p), "router": (n, d)}
        for name, shape in expected.items():
            actual = np.shape(getattr(self, name))
            if actual != shape:
                raise ShapeError(f"{name} tensor does not match config", actual, shape)
            if not np.all(np.isfinite(getattr(self, name))):
                raise ArgumentError(f"{name} tensor contains non-finite values")
        return self


@dataclass
class FactorizedWeights:
    """Per-matrix-type factors: W^i ~ A^i f(sum_j alpha^{i,j} B^j) [+ mu].

    Experts are split into ``group_split`` contiguous groups; group k mixes only
    its own ``m / g`` bases, so ``logits`` is n x (m / g).
    """
    a: np.ndarray  # (n, p, r)
    basis: np.ndarray  # (m, r, d)
    logits: np.ndarray  # (n, m // g)
    activation: Activation = Activation.SILU
    group_split: int = 1
    mu: np.ndarray = None  # (p, d) or None
    _mix_cache: np.ndarray = field(default=None, init=False, repr=False, compare=False)

    @property
    def n(self):
        return self.a.shape[0]

    @property
    def p(self):
        return self.a.shape[1]

    @property
    def r(self):
        return self.a.shape[2]

    @property
    def m(self):
        return self.basis.shape[0]

    @property
    def d(self):
        return self.basis.shape[2]

    def check(self):
        n, p, r = np.shape(self.a)
        m, r_b, d = np.shape(self.basis)
        g = self.group_split
        if r_b != r:
            raise ShapeError("transform/basis rank mismatch", self.a.shape, self.basis.shape)
        if g < 1 or m % g:
            raise ArgumentError(f"basis count {m} is not divisible by group split {g}")
        if np.shape(self.logits) != (n, m // g):
            raise ShapeError("logits shape mismatch", np.shape(self.logits), (n, m // g))
        if self.mu is not None and np.shape(self.mu) != (p, d):
            raise ShapeError("mu shape mismatch", np.shape(self.mu), (p, d))
        return self

    def group_slices(self):
        return group_slices(self.n, self.m, self.group_split)

    def coefficients(self):
        return softmax_rows(self.logits)

    def premix(self):
        """sum_j alpha^{i,j} B^j for every expert, before the activation: (n, r, d)."""
        alpha = self.coefficients()
        mixed = np.empty((self.n, self.r, self.d))
        for experts, bases in self.group_slices():
            mixed[experts] = np.einsum("nm,mrd->nrd", alpha[experts], self.basis[bases])
        return mixed

    def mixed(self):
        """f(sum_j alpha^{i,j} B^j) per expert, computed once and reused."""
        if self._mix_cache is None:
            self._mix_cache = activations.apply(self.activation, self.premix())
        return self._mix_cache

    def materialize(self):
        """Dense reconstruction of every expert matrix: (n, p, d)."""
        dense = np.matmul(self.a, self.mixed())
        if self.mu is not None:
            dense = dense + self.mu
        return dense

    def element_count(self):
        count = self.a.size + self.basis.size
        if self.mu is not None:
            count += self.mu.size
        return int(count)


@dataclass
class MoBELayer:
    gate: FactorizedWeights
    up: FactorizedWeights
    down: np.ndarray  # (n, d, p)
    router: np.ndarray  # (n, d)

    def factors(self, kind):
        return getattr(self, MatrixType(kind).value)

    def experts(self, kind):
        """Dense expert matrices, materialized for gate/up."""
        kind = MatrixType(kind)
        if kind is MatrixType.DOWN:
            return self.down
        return self.factors(kind).materialize()


@dataclass
class MoEModel:
    config: MoEConfig
    layers: list

    def element_count(self):
        return int(sum(l.gate.size + l.up.size + l.down.size for l in self.layers))


@dataclass
class MoBEModel:
    config: MoEConfig
    spec: FactorSpec
    layers: list

    @property
    def method(self):
        return self.spec.method

    def element_count(self):
        return int(sum(
            l.gate.element_count() + l.up.element_count() + l.down.size for l in self.layers
        ))
