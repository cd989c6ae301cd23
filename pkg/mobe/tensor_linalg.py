"""Dense real-matrix kernels shared by every other module.

Matrices are plain 2-D ``numpy`` arrays in float64. Checkpoints store float32;
conversion happens at the I/O boundary only.
"""

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.special

from .errors import ArgumentError, ConvergenceError, NumericError, ShapeError

logger = logging.getLogger(__name__)

# gesdd is fast but occasionally fails to converge; gesvd is the slower, sturdier fallback
SVD_DRIVERS = ("gesdd", "gesvd")


def as_matrix(data, copy=False):
    """Coerce ``data`` to a finite float64 matrix."""
    arr = np.array(data, dtype=np.float64, copy=copy) if copy else np.asarray(data, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError("expected a non-empty 2-D matrix", arr.shape)
    if not np.all(np.isfinite(arr)):
        raise NumericError("matrix contains NaN or Inf values")
    return arr


def matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul dimension mismatch", a.shape, b.shape)
    return a @ b


def _frozen(arr):
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "u", _frozen(self.u))
        object.__setattr__(self, "s", _frozen(self.s))
        object.__setattr__(self, "vt", _frozen(self.vt))

    @property
    def shape(self):
        return (self.u.shape[0], self.vt.shape[1])

    def energy(self):
        """Squared singular values."""
        return self.s * self.s


def svd(a):
    """Thin SVD ``a = u @ diag(s) @ vt`` with ``s`` non-increasing."""
    a = as_matrix(a)
    last_error = None
    for driver in SVD_DRIVERS:
        try:
            u, s, vt = scipy.linalg.svd(
                a, full_matrices=False, compute_uv=True, lapack_driver=driver, check_finite=False
            )
        except np.linalg.LinAlgError as exc:
            logger.warning("SVD driver %s failed on %s matrix: %s", driver, a.shape, exc)
            last_error = exc
            continue
        # LAPACK already returns s sorted and non-negative; clip guards -0.0
        return SvdResult(u=u, s=np.maximum(s, 0.0), vt=vt)
    # nothing was reconstructed, so the relative residual is the whole matrix
    raise ConvergenceError(f"SVD did not converge ({last_error})", residual=1.0)


def truncated_reconstruction(result, rank):
    """Best rank-``rank`` approximation and its squared Frobenius residual (Eckart-Young)."""
    q = len(result.s)
    if not 1 <= rank <= q:
        raise ArgumentError(f"rank must be in [1, {q}], got {rank}")
    approx = (result.u[:, :rank] * result.s[:rank]) @ result.vt[:rank]
    residual_sq = float(np.sum(result.s[rank:] ** 2))
    return approx, residual_sq


def low_rank_factors(result, rank, balanced=False):
    """Split the truncated SVD into (left, right) factors.

    ``balanced`` puts ``s**0.5`` on each side; otherwise ``s`` goes to the left factor.
    """
    if not 1 <= rank <= len(result.s):
        raise ArgumentError(f"rank must be in [1, {len(result.s)}], got {rank}")
    s = result.s[:rank]
    if balanced:
        root = np.sqrt(s)
        return result.u[:, :rank] * root, root[:, None] * result.vt[:rank]
    return result.u[:, :rank] * s, np.array(result.vt[:rank])


def softmax_rows(logits):
    """Row-wise softmax; every row is a point on the probability simplex."""
    return scipy.special.softmax(np.asarray(logits, dtype=np.float64), axis=-1)
