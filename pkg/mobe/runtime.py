"""SwiGLU MoE forward passes over dense and factorized checkpoints."""

import logging
from dataclasses import dataclass

import numpy as np

from .activations import silu
from .errors import ArgumentError, ShapeError
from .models import MoBELayer, MoBEModel
from .tensor_linalg import softmax_rows

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RoutingDecision:
    indices: np.ndarray  # (t, k) expert ids, best first
    gates: np.ndarray  # (t, k) softmax probabilities of the chosen experts


def as_tokens(batch, d):
    tokens = np.asarray(batch, dtype=np.float64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2 or tokens.shape[1] != d:
        raise ShapeError("token batch does not match hidden size", tokens.shape, ("t", d))
    if not np.all(np.isfinite(tokens)):
        raise ArgumentError("token batch contains non-finite values")
    return tokens


def route(router, x, k, renorm=False):
    """Softmax over the n router logits, then the top-k experts per token.

    Ties go to the lower expert index. Gates are the raw probabilities unless
    ``renorm`` rescales them to sum to one over the selected experts.
    """
    router = np.asarray(router, dtype=np.float64)
    n, d = router.shape
    if not 1 <= k <= n:
        raise ArgumentError(f"k must be in [1, {n}], got {k}")
    tokens = as_tokens(x, d)
    probs = softmax_rows(tokens @ router.T)
    # stable sort on -p keeps equal probabilities in index order
    indices = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    gates = np.take_along_axis(probs, indices, axis=1)
    if renorm:
        gates = gates / gates.sum(axis=1, keepdims=True)
    return RoutingDecision(indices=indices, gates=gates)


def expert_forward(gate, up, down, x):
    """W_down (W_up x * SiLU(W_gate x)) for a d-vector or a (t, d) batch."""
    gate, up, down = (np.asarray(w, dtype=np.float64) for w in (gate, up, down))
    x = np.asarray(x, dtype=np.float64)
    if gate.shape != up.shape or down.shape != gate.shape[::-1]:
        raise ShapeError("expert matrices disagree", gate.shape, up.shape, down.shape)
    if x.shape[-1] != gate.shape[1]:
        raise ShapeError("token does not match expert input size", x.shape, gate.shape)
    hidden = (x @ up.T) * silu(x @ gate.T)
    return hidden @ down.T


def _factorized_projection(factors):
    mixed = factors.mixed()

    def project(i, x):
        out = (x @ mixed[i].T) @ factors.a[i].T
        if factors.mu is not None:
            out = out + x @ factors.mu.T
        return out

    return project


def _dense_projection(weights):
    return lambda i, x: x @ weights[i].T


def layer_forward(layer, batch, k, renorm_topk=False, materialize=False):
    """sum over the routed experts of G^i(x) E^i(x), token by token: (t, d)."""
    decision = route(layer.router, batch, k, renorm=renorm_topk)
    tokens = as_tokens(batch, layer.router.shape[1])
    if isinstance(layer, MoBELayer) and not materialize:
        gate_proj = _factorized_projection(layer.gate)
        up_proj = _factorized_projection(layer.up)
    else:
        gate_proj = _dense_projection(layer.experts("gate"))
        up_proj = _dense_projection(layer.experts("up"))

    out = np.zeros_like(tokens)
    for i in np.unique(decision.indices):
        rows, slots = np.nonzero(decision.indices == i)
        x = tokens[rows]
        hidden = up_proj(i, x) * silu(gate_proj(i, x))
        out[rows] += decision.gates[rows, slots][:, None] * (hidden @ layer.down[i].T)
    return out


def moe_forward(model, batch, k_override=None, renorm_topk=False, materialize=False):
    """Every layer evaluated on the same token batch: (L, t, d).

    ``k_override`` activates fewer experts than the config's top-k (the reduced
    activation variant); by default a factorized model uses its stored override.
    """
    config = model.config
    k = config.activated_experts if k_override is None else k_override
    if not 1 <= k <= config.top_k:
        raise ArgumentError(f"k override must be in [1, {config.top_k}], got {k}")
    tokens = as_tokens(batch, config.hidden)
    if materialize and not isinstance(model, MoBEModel):
        logger.debug("materialize has no effect on a dense model")
    return np.stack([
        layer_forward(layer, tokens, k, renorm_topk=renorm_topk, materialize=materialize)
        for layer in model.layers
    ])


@dataclass(frozen=True)
class OutputDelta:
    max_abs: float
    relative: float

    def within(self, atol, rtol):
        return self.max_abs <= atol or self.relative <= rtol


def compare_outputs(reference, other):
    """Max absolute difference and ||ref - other||_F / ||ref||_F (0 when both vanish)."""
    reference = np.asarray(reference, dtype=np.float64)
    other = np.asarray(other, dtype=np.float64)
    if reference.shape != other.shape:
        raise ShapeError("outputs differ in shape", reference.shape, other.shape)
    diff = reference - other
    max_abs = float(np.max(np.abs(diff))) if diff.size else 0.0
    norm = float(np.linalg.norm(reference))
    err = float(np.linalg.norm(diff))
    relative = err / norm if norm else (0.0 if err == 0.0 else float("inf"))
    return OutputDelta(max_abs=max_abs, relative=relative)


def random_tokens(count, d, seed):
    """``count`` N(0, 1) tokens from a fixed seed."""
    if count < 1:
        raise ArgumentError(f"token count must be >= 1, got {count}")
    return np.random.default_rng(seed).standard_normal((count, d))
