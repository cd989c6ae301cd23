"""Elementwise activations applied to the mixed basis, with derivatives for the closed-form gradients."""

import enum

import numpy as np
from scipy.special import erf, expit

from .errors import ArgumentError


class Activation(enum.Enum):
    """Activation f in W = A f(sum_j alpha_j B_j); ``tag`` is the on-disk u32 code."""
    NONE = "none"
    SILU = "silu"
    TANH = "tanh"
    GELU = "gelu"
    RELU = "relu"
    SIGMOID = "sigmoid"

    @property
    def tag(self):
        return list(Activation).index(self)

    @classmethod
    def from_tag(cls, tag):
        members = list(cls)
        if not 0 <= tag < len(members):
            raise ArgumentError(f"unknown activation tag {tag}")
        return members[tag]

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            choices = ", ".join(a.value for a in cls)
            raise ArgumentError(f"unknown activation {value!r} (choose from {choices})") from None


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def _gelu_grad(x):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


def _silu(x):
    return x * expit(x)


def _silu_grad(x):
    sig = expit(x)
    return sig * (1.0 + x * (1.0 - sig))


def _sigmoid_grad(x):
    sig = expit(x)
    return sig * (1.0 - sig)


def _tanh_grad(x):
    t = np.tanh(x)
    return 1.0 - t * t


_FUNCTIONS = {
    Activation.NONE: (lambda x: x, np.ones_like),
    Activation.SILU: (_silu, _silu_grad),
    Activation.TANH: (np.tanh, _tanh_grad),
    Activation.GELU: (_gelu, _gelu_grad),
    # relu'(0) = 0
    Activation.RELU: (lambda x: np.maximum(x, 0.0), lambda x: (x > 0.0).astype(x.dtype)),
    Activation.SIGMOID: (expit, _sigmoid_grad),
}


def apply(activation, x):
    return _FUNCTIONS[Activation.parse(activation)][0](x)


def derivative(activation, x):
    return _FUNCTIONS[Activation.parse(activation)][1](x)


def silu(x):
    return _silu(x)
