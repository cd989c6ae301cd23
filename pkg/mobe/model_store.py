"""Binary checkpoint containers and the synthetic-model generator.

Layout (all little-endian):

    magic      4 ASCII bytes, b"MOEW" (dense MoE) or b"MOBE" (factorized)
    version    u32 = 1
    config     10 x u32: L, n, d, p, k, r, m, g, activation tag, mu_present
    tensors    raw row-major float32, per layer:

      MOEW: for i in experts: gate^i (p x d), up^i (p x d), down^i (d x p);
            router (n x d)
      MOBE: for t in (gate, up): A^i (p x r) for every i, B^j (r x d) for every j,
            logits (n x m/g), mu (p x d) when mu_present;
            then down^i (d x p) for every i, router (n x d)
    trailer    2 x u32 after the last tensor: method tag, activated_override (0 = unset)

Dense containers write zeros for r, m, g, activation, mu_present and the method tag.
The trailer keeps tensor offsets identical to a reader that only knows the config block.
"""

import dataclasses
import logging
import struct
from pathlib import Path

import numpy as np

from .activations import Activation
from .errors import (
    ArgumentError,
    BadMagicError,
    CheckpointError,
    DimensionMismatchError,
    ShapeError,
    TruncatedFileError,
    VersionMismatchError,
)
from .models import (
    FACTORIZED_TYPES,
    FactorizedWeights,
    FactorSpec,
    Method,
    MoBELayer,
    MoBEModel,
    MoEConfig,
    MoELayer,
    MoEModel,
    expert_groups,
)

logger = logging.getLogger(__name__)

MOE_MAGIC = b"MOEW"
MOBE_MAGIC = b"MOBE"
TOKEN_MAGIC = b"MOET"
VERSION = 1

_HEADER = struct.Struct("<4sI")
_CONFIG = struct.Struct("<10I")
_TRAILER = struct.Struct("<II")
_TOKEN_HEADER = struct.Struct("<II")
_F32 = np.dtype("<f4")


class _Reader:
    """Sequential reader over an in-memory checkpoint."""

    def __init__(self, data, path):
        self._data = data
        self._offset = 0
        self.path = path

    def unpack(self, fmt):
        if self._offset + fmt.size > len(self._data):
            raise TruncatedFileError(f"{self.path}: file ends inside a {fmt.size}-byte record at offset {self._offset}")
        values = fmt.unpack_from(self._data, self._offset)
        self._offset += fmt.size
        return values

    def tensor(self, *shape, what="tensor"):
        count = int(np.prod(shape))
        nbytes = count * _F32.itemsize
        if self._offset + nbytes > len(self._data):
            raise TruncatedFileError(
                f"{self.path}: file ends inside {what} (needs {nbytes} bytes at offset {self._offset}, "
                f"{len(self._data) - self._offset} left)"
            )
        arr = np.frombuffer(self._data, dtype=_F32, count=count, offset=self._offset)
        self._offset += nbytes
        return arr.reshape(shape).astype(np.float64)

    def finish(self):
        extra = len(self._data) - self._offset
        if extra:
            raise DimensionMismatchError(f"{self.path}: {extra} trailing bytes beyond the declared tensors")


def _write_tensor(fh, arr):
    fh.write(np.ascontiguousarray(arr, dtype=_F32).tobytes())


def _write_config(fh, magic, config, spec=None):
    fh.write(_HEADER.pack(magic, VERSION))
    fields = [config.layers, config.experts, config.hidden, config.intermediate, config.top_k]
    if spec is None:
        fields += [0, 0, 0, 0, 0]
    else:
        fields += [spec.rank, spec.basis_count, spec.group_split, spec.activation.tag, int(spec.mu_present)]
    fh.write(_CONFIG.pack(*fields))


def _write_trailer(fh, config, spec=None):
    fh.write(_TRAILER.pack(0 if spec is None else spec.method.tag, config.activated_override or 0))


def _check_factors(factors, config, spec, where):
    n, p, d = config.experts, config.intermediate, config.hidden
    expected = {
        "A": ((n, p, spec.rank), factors.a),
        "B": ((spec.basis_count, spec.rank, d), factors.basis),
        "logits": ((n, spec.bases_per_group), factors.logits),
    }
    for name, (shape, arr) in expected.items():
        if np.shape(arr) != shape:
            raise DimensionMismatchError(f"{where} {name} shape {np.shape(arr)} does not match header {shape}")
    if (factors.mu is not None) != spec.mu_present:
        raise DimensionMismatchError(f"{where} mu presence disagrees with header")
    if factors.group_split != spec.group_split or factors.activation is not spec.activation:
        raise DimensionMismatchError(f"{where} group split / activation disagree with header")


def write_checkpoint(path, config, layers, spec=None):
    """Write a MOEW container, or a MOBE container when ``spec`` is given."""
    config.validate()
    if len(layers) != config.layers:
        raise DimensionMismatchError(f"config declares {config.layers} layers, got {len(layers)}")
    path = Path(path)
    with path.open("wb") as fh:
        if spec is None:
            _write_config(fh, MOE_MAGIC, config)
            for idx, layer in enumerate(layers):
                try:
                    layer.check(config)
                except (ShapeError, ArgumentError) as exc:
                    raise DimensionMismatchError(f"layer {idx}: {exc}") from None
                for i in range(config.experts):
                    _write_tensor(fh, layer.gate[i])
                    _write_tensor(fh, layer.up[i])
                    _write_tensor(fh, layer.down[i])
                _write_tensor(fh, layer.router)
            _write_trailer(fh, config)
        else:
            _write_config(fh, MOBE_MAGIC, config, spec)
            n, d, p = config.experts, config.hidden, config.intermediate
            for idx, layer in enumerate(layers):
                for kind in FACTORIZED_TYPES:
                    factors = layer.factors(kind)
                    _check_factors(factors, config, spec, f"layer {idx} {kind.value}")
                    for i in range(n):
                        _write_tensor(fh, factors.a[i])
                    for j in range(spec.basis_count):
                        _write_tensor(fh, factors.basis[j])
                    _write_tensor(fh, factors.logits)
                    if spec.mu_present:
                        _write_tensor(fh, factors.mu)
                if np.shape(layer.down) != (n, d, p) or np.shape(layer.router) != (n, d):
                    raise DimensionMismatchError(f"layer {idx}: down/router shapes do not match header")
                for i in range(n):
                    _write_tensor(fh, layer.down[i])
                _write_tensor(fh, layer.router)
            _write_trailer(fh, config, spec)
    logger.debug("wrote %s (%d layers)", path, len(layers))


def _read_header(reader):
    magic, version = reader.unpack(_HEADER)
    if magic not in (MOE_MAGIC, MOBE_MAGIC):
        raise BadMagicError(f"{reader.path}: bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"{reader.path}: unsupported version {version} (expected {VERSION})")
    L, n, d, p, k, r, m, g, act, mu_present = reader.unpack(_CONFIG)
    try:
        config = MoEConfig(layers=L, experts=n, hidden=d, intermediate=p, top_k=k).validate()
    except ArgumentError as exc:
        raise DimensionMismatchError(f"{reader.path}: invalid header ({exc})") from None
    spec = None
    if magic == MOBE_MAGIC:
        try:
            spec = FactorSpec(
                rank=r, basis_count=m, group_split=g, activation=Activation.from_tag(act),
                mu_present=bool(mu_present),
            )
        except ArgumentError as exc:
            raise DimensionMismatchError(f"{reader.path}: invalid header ({exc})") from None
        if r < 1 or m < 1 or g < 1 or m % g or g > n:
            raise DimensionMismatchError(f"{reader.path}: invalid factor header r={r} m={m} g={g}")
    return config, spec


def _read_trailer(reader, config, spec):
    method, k_override = reader.unpack(_TRAILER)
    try:
        config = dataclasses.replace(config, activated_override=k_override or None).validate()
        if spec is not None:
            spec = dataclasses.replace(spec, method=Method.from_tag(method))
    except ArgumentError as exc:
        raise DimensionMismatchError(f"{reader.path}: invalid trailer ({exc})") from None
    return config, spec


def load_model(path):
    """Read either container; returns ``MoEModel`` or ``MoBEModel``."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"{path}: no such file") from None
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc.strerror or exc}") from None
    reader = _Reader(data, path)
    config, spec = _read_header(reader)
    n, d, p = config.experts, config.hidden, config.intermediate
    layers = []
    for idx in range(config.layers):
        if spec is None:
            gate, up, down = (np.empty((n, p, d)), np.empty((n, p, d)), np.empty((n, d, p)))
            for i in range(n):
                what = f"layer {idx} expert block {i}"
                gate[i] = reader.tensor(p, d, what=what)
                up[i] = reader.tensor(p, d, what=what)
                down[i] = reader.tensor(d, p, what=what)
            router = reader.tensor(n, d, what=f"layer {idx} router")
            layers.append(MoELayer(gate=gate, up=up, down=down, router=router))
        else:
            factors = {}
            for kind in FACTORIZED_TYPES:
                what = f"layer {idx} {kind.value} factors"
                a = np.stack([reader.tensor(p, spec.rank, what=what) for _ in range(n)])
                basis = np.stack([reader.tensor(spec.rank, d, what=what) for _ in range(spec.basis_count)])
                logits = reader.tensor(n, spec.bases_per_group, what=what)
                mu = reader.tensor(p, d, what=what) if spec.mu_present else None
                factors[kind] = FactorizedWeights(
                    a=a, basis=basis, logits=logits, activation=spec.activation,
                    group_split=spec.group_split, mu=mu,
                )
            down = np.stack([reader.tensor(d, p, what=f"layer {idx} down") for _ in range(n)])
            router = reader.tensor(n, d, what=f"layer {idx} router")
            layers.append(MoBELayer(gate=factors[FACTORIZED_TYPES[0]], up=factors[FACTORIZED_TYPES[1]],
                                    down=down, router=router))
    config, spec = _read_trailer(reader, config, spec)
    reader.finish()
    if spec is None:
        return MoEModel(config=config, layers=layers)
    return MoBEModel(config=config, spec=spec, layers=layers)


def read_checkpoint(path):
    """``(config, layers)`` of a container; see :func:`load_model` for the factor spec."""
    model = load_model(path)
    return model.config, model.layers


def save_model(path, model):
    if isinstance(model, MoBEModel):
        write_checkpoint(path, model.config, model.layers, spec=model.spec)
    else:
        write_checkpoint(path, model.config, model.layers)


# --- token batches ---

def write_tokens(path, tokens):
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ShapeError("token batch must be 2-D (t, d)", tokens.shape)
    with Path(path).open("wb") as fh:
        fh.write(TOKEN_MAGIC)
        fh.write(_TOKEN_HEADER.pack(*tokens.shape))
        _write_tensor(fh, tokens)


def read_tokens(path):
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"{path}: no such file") from None
    if data[:4] != TOKEN_MAGIC:
        raise BadMagicError(f"{path}: bad magic {data[:4]!r}")
    reader = _Reader(data[4:], path)
    t, d = reader.unpack(_TOKEN_HEADER)
    tokens = reader.tensor(t, d, what="token batch")
    reader.finish()
    return tokens


# --- synthetic models ---

def _planted_factors(rng, config, basis_count, rank, activation, group_split):
    n, d, p = config.experts, config.hidden, config.intermediate
    basis = rng.standard_normal((basis_count, rank, d))
    a = rng.standard_normal((n, p, rank)) / np.sqrt(rank)
    per_group = basis_count // group_split
    alpha = rng.dirichlet(np.ones(per_group), size=n)
    # softmax(log alpha) recovers alpha; the floor keeps logits finite
    logits = np.log(np.maximum(alpha, 1e-30))
    logits -= logits.max(axis=1, keepdims=True)
    return FactorizedWeights(
        a=a, basis=basis, logits=logits, activation=activation, group_split=group_split,
    ).check()


def generate_synthetic(config, seed, mode="gaussian", basis_count=None, rank=None,
                       activation=Activation.SILU, group_split=1, std=2.3e-2):
    """Deterministic synthetic experts.

    ``gaussian`` draws every entry i.i.d. N(0, std^2). ``planted`` builds gate/up
    exactly as A^i f(sum_j alpha^{i,j} B^j) with Dirichlet(1) coefficients and returns
    ``(model, truth)`` where ``truth`` is the matching ``MoBEModel``; gaussian mode
    returns ``(model, None)``.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    n, d, p = config.experts, config.hidden, config.intermediate

    if mode == "gaussian":
        layers = [
            MoELayer(
                gate=rng.standard_normal((n, p, d)) * std,
                up=rng.standard_normal((n, p, d)) * std,
                down=rng.standard_normal((n, d, p)) * std,
                router=rng.standard_normal((n, d)) / np.sqrt(d),
            )
            for _ in range(config.layers)
        ]
        return MoEModel(config=config, layers=layers), None

    if mode != "planted":
        raise ArgumentError(f"unknown generator mode {mode!r} (choose gaussian or planted)")
    activation = Activation.parse(activation)
    rank = p if rank is None else rank
    if basis_count is None:
        raise ArgumentError("planted mode needs a basis count m")
    if basis_count >= n:
        raise ArgumentError(f"basis count m={basis_count} must be < experts n={n}; no compression possible")
    if not 1 <= rank <= p:
        raise ArgumentError(f"rank r must be in [1, {p}], got {rank}")
    if group_split < 1 or basis_count % group_split:
        raise ArgumentError(f"basis count {basis_count} is not divisible by group split {group_split}")
    sizes = [s.stop - s.start for s in expert_groups(n, group_split)]
    if min(sizes) <= basis_count // group_split:
        raise ArgumentError("every group needs more experts than bases")

    layers, truth_layers = [], []
    for _ in range(config.layers):
        gate = _planted_factors(rng, config, basis_count, rank, activation, group_split)
        up = _planted_factors(rng, config, basis_count, rank, activation, group_split)
        down = rng.standard_normal((n, d, p)) / np.sqrt(p)
        router = rng.standard_normal((n, d)) / np.sqrt(d)
        layers.append(MoELayer(gate=gate.materialize(), up=up.materialize(), down=down, router=router))
        truth_layers.append(MoBELayer(gate=gate, up=up, down=down.copy(), router=router.copy()))

    spec = FactorSpec(rank=rank, basis_count=basis_count, group_split=group_split,
                      activation=activation, mu_present=False, method=Method.MOBE)
    truth = MoBEModel(config=config, spec=spec, layers=truth_layers)
    return MoEModel(config=config, layers=layers), truth

