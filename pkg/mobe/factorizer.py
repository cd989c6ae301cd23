"""Learn W^i ~ A^i f(sum_j alpha^{i,j} B^j) per layer by minimizing sum_i ||W^i - W_hat^i||_F^2 with Adam."""

import dataclasses
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field

import numpy as np
from tqdm import tqdm

from . import activations
from .activations import Activation
from .errors import ArgumentError, DegenerateInputError, DivergenceError, NonFiniteLossError, ShapeError, ToolkitError
from .models import FACTORIZED_TYPES, FactorizedWeights, FactorSpec, Method, MoBELayer, MoBEModel, group_slices
from .normalizer import fold_sigma, identity_stats, zscore
from .optimizer import Adam
from .tensor_linalg import softmax_rows, svd

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FactorizeConfig:
    m: int
    r: int = None  # None means r = p
    activation: Activation = Activation.SILU
    lr: float = 0.07
    steps: int = 5000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    group_split: int = 1
    normalize: bool = True
    keep_mu: bool = False
    mu_matrix: bool = False
    early_stop: bool = False
    weight_decay: float = 0.0
    init_jitter: float = 1e-3
    divergence_factor: float = 1e3
    divergence_patience: int = 200
    early_stop_window: int = 200
    early_stop_tol: float = 1e-7
    # lr holds at `lr`, then cosine-decays over the last `decay_fraction` of the steps
    decay_fraction: float = 0.3
    final_lr_ratio: float = 0.01
    refit_transforms: bool = True

    def __post_init__(self):
        object.__setattr__(self, "activation", Activation.parse(self.activation))

    def rank_for(self, p):
        return p if self.r is None else self.r

    def problems(self, n, p):
        """Every violated precondition for factorizing n experts with p rows."""
        errors = []
        r = self.rank_for(p)
        if not 1 <= self.m < n:
            errors.append(f"basis count m must satisfy 1 <= m < n={n}, got m={self.m}")
        if not 1 <= r <= p:
            errors.append(f"rank r must be in [1, {p}], got {r}")
        if self.steps < 1:
            errors.append(f"steps must be >= 1, got {self.steps}")
        if not self.lr > 0:
            errors.append(f"lr must be > 0, got {self.lr}")
        if self.group_split < 1 or self.group_split > n:
            errors.append(f"group split must be in [1, {n}], got {self.group_split}")
        elif self.m % self.group_split:
            errors.append(f"basis count {self.m} is not divisible by group split {self.group_split}")
        elif (n // self.group_split) <= self.m // self.group_split:
            errors.append("every expert group needs more experts than bases")
        if not 0.0 <= self.decay_fraction <= 1.0:
            errors.append(f"decay fraction must be in [0, 1], got {self.decay_fraction}")
        if not 0.0 < self.final_lr_ratio <= 1.0:
            errors.append(f"final lr ratio must be in (0, 1], got {self.final_lr_ratio}")
        return errors

    def to_dict(self):
        data = dataclasses.asdict(self)
        data["activation"] = self.activation.value
        return data

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ArgumentError(f"unknown FactorizeConfig fields: {', '.join(sorted(unknown))}")
        return cls(**data)


@dataclass
class TrainTrace:
    losses: list
    final_loss: float
    per_expert_sq_error: tuple
    target_energy: float
    normalized_energy: float
    stopped_early: bool = False
    wall_time: float = field(default=0.0, compare=False)

    @property
    def relative_loss(self):
        """Final objective over the energy of the (normalized) target it was fitted to."""
        return self.final_loss / self.normalized_energy if self.normalized_energy else 0.0

    @property
    def relative_error(self):
        """sum_i ||W^i - W_hat^i||^2 / sum_i ||W^i||^2 in original units, after the fold."""
        return sum(self.per_expert_sq_error) / self.target_energy if self.target_energy else 0.0


# --- objective ---

def _mix(params, activation, group_split):
    a, basis, logits = params["a"], params["basis"], params["logits"]
    n, _, r = a.shape
    m, _, d = basis.shape
    alpha = softmax_rows(logits)
    pre = np.empty((n, r, d))
    for experts, bases in group_slices(n, m, group_split):
        pre[experts] = np.einsum("nm,mrd->nrd", alpha[experts], basis[bases])
    return alpha, pre, activations.apply(activation, pre)


def _check_params(experts, params, group_split):
    a, basis, logits = params["a"], params["basis"], params["logits"]
    n, p, d = experts.shape
    if a.ndim != 3 or a.shape[:2] != (n, p):
        raise ShapeError("transforms do not match experts", a.shape, experts.shape)
    if basis.ndim != 3 or basis.shape[1:] != (a.shape[2], d):
        raise ShapeError("basis does not match transforms/experts", basis.shape, (basis.shape[0], a.shape[2], d))
    if group_split < 1 or basis.shape[0] % group_split:
        raise ArgumentError(f"basis count {basis.shape[0]} is not divisible by group split {group_split}")
    if logits.shape != (n, basis.shape[0] // group_split):
        raise ShapeError("logits shape mismatch", logits.shape, (n, basis.shape[0] // group_split))


def reconstruct(a, basis, logits, activation=Activation.SILU):
    """One expert: a @ f(sum_j softmax(logits)_j B^j)."""
    a = np.asarray(a, dtype=np.float64)
    basis = np.asarray(basis, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    if a.ndim != 2 or basis.ndim != 3 or basis.shape[1] != a.shape[1]:
        raise ShapeError("reconstruct shape mismatch", a.shape, basis.shape)
    if logits.shape[0] != basis.shape[0]:
        raise ShapeError("one logit per basis matrix expected", logits.shape, basis.shape)
    alpha = softmax_rows(logits)
    return a @ activations.apply(activation, np.tensordot(alpha, basis, axes=1))


def objective(experts, params, activation, group_split=1):
    _, _, mixed = _mix(params, activation, group_split)
    resid = np.matmul(params["a"], mixed) - experts
    return float(np.sum(resid * resid))


def loss_and_grads(experts, params, activation=Activation.SILU, group_split=1, step=None):
    """Loss sum_i ||W^i - W_hat^i||_F^2 and its closed-form gradients.

    ``params`` holds ``a`` (n, p, r), ``basis`` (m, r, d) and ``logits`` (n, m/g).
    """
    experts = np.asarray(experts, dtype=np.float64)
    _check_params(experts, params, group_split)
    a, basis = params["a"], params["basis"]
    n = a.shape[0]
    m = basis.shape[0]

    alpha, pre, mixed = _mix(params, activation, group_split)
    resid = np.matmul(a, mixed) - experts
    loss = float(np.sum(resid * resid))
    if not np.isfinite(loss):
        raise NonFiniteLossError(step, loss)

    g_out = 2.0 * resid
    g_a = np.matmul(g_out, mixed.transpose(0, 2, 1))
    g_pre = np.matmul(a.transpose(0, 2, 1), g_out) * activations.derivative(activation, pre)

    g_basis = np.zeros_like(basis)
    g_alpha = np.empty_like(alpha)
    for experts_slice, bases in group_slices(n, m, group_split):
        g_basis[bases] = np.einsum("nm,nrd->mrd", alpha[experts_slice], g_pre[experts_slice])
        g_alpha[experts_slice] = np.einsum("nrd,mrd->nm", g_pre[experts_slice], basis[bases])
    # softmax Jacobian-vector product
    g_logits = alpha * (g_alpha - np.sum(alpha * g_alpha, axis=1, keepdims=True))
    return loss, {"a": g_a, "basis": g_basis, "logits": g_logits}


# --- training ---

def learning_rate(config, step):
    """Step size for 0-based ``step``: constant, then a cosine tail down to ``final_lr_ratio * lr``."""
    decay_steps = int(round(config.decay_fraction * config.steps))
    start = config.steps - decay_steps
    if decay_steps == 0 or step < start:
        return config.lr
    floor = config.final_lr_ratio * config.lr
    progress = min(1.0, (step - start + 1) / decay_steps)
    return floor + 0.5 * (config.lr - floor) * (1.0 + math.cos(math.pi * progress))


def refit_transforms(experts, params, activation, group_split=1):
    """Replace every A^i by the least-squares solution against its mixed basis; never raises the loss."""
    _, _, mixed = _mix(params, activation, group_split)
    for i in range(params["a"].shape[0]):
        solution, *_ = np.linalg.lstsq(mixed[i].T, experts[i].T, rcond=None)
        params["a"][i] = solution.T
    return params


class LayerFactorizer:
    def __init__(self, experts, config, seed=None):
        self.experts = np.asarray(experts, dtype=np.float64)
        self.config = config
        self.errors = []
        self.rng = np.random.default_rng(config.seed if seed is None else seed)

        if self.experts.ndim == 3:
            self.n, self.p, self.d = self.experts.shape
        else:
            self.n = self.p = self.d = 0
        self.r = config.rank_for(self.p)

    def validate(self):
        self.errors = []
        if self.experts.ndim != 3:
            self.errors.append(f"experts must be a stack of matrices, got shape {self.experts.shape}")
            return False
        if not np.all(np.isfinite(self.experts)):
            self.errors.append("expert weights contain non-finite values")
            return False
        self.errors.extend(self.config.problems(self.n, self.p))
        return not self.errors

    def _normalized_target(self):
        if not self.config.normalize:
            return self.experts, identity_stats()
        try:
            return zscore(self.experts, mu_matrix=self.config.mu_matrix)
        except DegenerateInputError as exc:
            logger.warning("%s; factorizing this layer unnormalized", exc)
            return self.experts, identity_stats()

    def _initial_params(self, target):
        cfg = self.config
        r = self.r
        per_group = cfg.m // cfg.group_split
        a = np.empty((self.n, self.p, r))
        right = np.empty((self.n, r, self.d))
        for i in range(self.n):
            result = svd(target[i])
            k = min(r, len(result.s))
            root = np.sqrt(result.s[:k])
            a[i, :, :k] = result.u[:, :k] * root
            right[i, :k] = root[:, None] * result.vt[:k]
            if k < r:
                # not enough singular directions; start the spare rank from noise
                a[i, :, k:] = cfg.init_jitter * self.rng.standard_normal((self.p, r - k))
                right[i, k:] = cfg.init_jitter * self.rng.standard_normal((r - k, self.d))

        basis = np.empty((cfg.m, r, self.d))
        for experts, bases in group_slices(self.n, cfg.m, cfg.group_split):
            members = np.arange(experts.start, experts.stop)
            picks = self.rng.choice(members, size=per_group, replace=False)
            basis[bases] = right[picks] + cfg.init_jitter * self.rng.standard_normal((per_group, r, self.d))

        logits = np.zeros((self.n, per_group))
        return {"a": a, "basis": basis, "logits": logits}

    def run(self):
        if not self.validate():
            raise ArgumentError("; ".join(self.errors))
        cfg = self.config
        start = time.perf_counter()

        target, stats = self._normalized_target()
        params = self._initial_params(target)
        adam = Adam(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, epsilon=cfg.eps,
                    weight_decay=cfg.weight_decay, decay_keys=("a", "basis"))

        losses = []
        initial = None
        above = 0
        stopped_early = False
        for step in range(cfg.steps):
            loss, grads = loss_and_grads(target, params, cfg.activation, cfg.group_split, step=step)
            if initial is None:
                initial = loss
            losses.append(loss)

            if loss > cfg.divergence_factor * initial:
                above += 1
                if above >= cfg.divergence_patience:
                    raise DivergenceError(step, loss, initial)
            else:
                above = 0

            if cfg.early_stop and step >= cfg.early_stop_window:
                old = losses[step - cfg.early_stop_window]
                if old - loss <= cfg.early_stop_tol * old:
                    logger.info("early stop at step %d (loss %.6e)", step, loss)
                    stopped_early = True
                    break

            adam.lr = learning_rate(cfg, step)
            adam.step(params, grads)

        if cfg.refit_transforms:
            refit_transforms(target, params, cfg.activation, cfg.group_split)
        final_loss = objective(target, params, cfg.activation, cfg.group_split)
        if not np.isfinite(final_loss):
            raise NonFiniteLossError(len(losses), final_loss)

        factors = FactorizedWeights(
            a=params["a"], basis=params["basis"], logits=params["logits"],
            activation=cfg.activation, group_split=cfg.group_split,
        ).check()
        keep_mu = cfg.normalize and (cfg.keep_mu or cfg.mu_matrix)
        factors = fold_sigma(factors, stats, keep_mu=keep_mu)

        per_expert = np.sum((self.experts - factors.materialize()) ** 2, axis=(1, 2))
        trace = TrainTrace(
            losses=losses,
            final_loss=final_loss,
            per_expert_sq_error=tuple(float(e) for e in per_expert),
            target_energy=float(np.sum(self.experts ** 2)),
            normalized_energy=float(np.sum(target ** 2)),
            stopped_early=stopped_early,
            wall_time=time.perf_counter() - start,
        )
        return factors, trace


def factorize_layer(experts, config, seed=None):
    """zscore -> SVD warm start -> Adam for ``config.steps`` -> refit A -> fold sigma."""
    factorizer = LayerFactorizer(experts, config, seed=seed)
    if not factorizer.validate():
        raise ArgumentError("; ".join(factorizer.errors))
    return factorizer.run()


def task_seed(seed, layer, kind):
    """Seed for one (layer, matrix type) task, independent of scheduling order."""
    return np.random.SeedSequence([seed, layer, FACTORIZED_TYPES.index(kind)])


def convert_model(model, config, jobs=1, progress=False, activated_override=None):
    """Factorize gate/up of every layer; down matrices and router are copied verbatim.

    Returns ``(MoBEModel, {(layer, type): TrainTrace})``.
    """
    moe_config = model.config
    problems = config.problems(moe_config.experts, moe_config.intermediate)
    if problems:
        raise ArgumentError("; ".join(problems))
    if activated_override is not None:
        moe_config = dataclasses.replace(moe_config, activated_override=activated_override).validate()

    tasks = [(idx, kind) for idx in range(len(model.layers)) for kind in FACTORIZED_TYPES]

    def work(task):
        idx, kind = task
        experts = model.layers[idx].experts(kind)
        try:
            return factorize_layer(experts, config, seed=task_seed(config.seed, idx, kind))
        except ToolkitError as exc:
            exc.layer = idx
            exc.matrix_type = kind.value
            exc.args = (f"layer {idx} {kind.value}: {exc}",)
            raise

    results = {}
    with tqdm(total=len(tasks), desc="factorize", unit="task", disable=not progress or None) as bar:
        if jobs <= 1:
            for task in tasks:
                results[task] = work(task)
                bar.update(1)
        else:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                futures = {pool.submit(work, task): task for task in tasks}
                for future in as_completed(futures):
                    results[futures[future]] = future.result()
                    bar.update(1)

    layers = []
    traces = {}
    for idx, layer in enumerate(model.layers):
        gate, gate_trace = results[(idx, FACTORIZED_TYPES[0])]
        up, up_trace = results[(idx, FACTORIZED_TYPES[1])]
        traces[(idx, "gate")] = gate_trace
        traces[(idx, "up")] = up_trace
        logger.info("layer %d: gate rel. error %.3e, up rel. error %.3e",
                    idx, gate_trace.relative_error, up_trace.relative_error)
        layers.append(MoBELayer(gate=gate, up=up, down=np.array(layer.down), router=np.array(layer.router)))

    spec = FactorSpec(
        rank=config.rank_for(moe_config.intermediate),
        basis_count=config.m,
        group_split=config.group_split,
        activation=config.activation,
        mu_present=config.normalize and (config.keep_mu or config.mu_matrix),
        method=Method.MOBE,
    )
    return MoBEModel(config=moe_config, spec=spec, layers=layers), traces
