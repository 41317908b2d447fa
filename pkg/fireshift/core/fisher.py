"""Empirical Fisher information: estimation, algebra and preconditioning.

Three representations share one interface: Full (packed symmetric), Diagonal
and LowRank (k orthonormal rows plus descending eigenvalues). All of them are
PSD by construction and immutable. Low-rank sums are formed exactly in the
joint row span and truncated back to a fixed rank.
"""
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from fractions import Fraction
from typing import ClassVar, Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PositiveInt

from .errors import ContractViolation, DataError, DimensionError
from .model import Fragment, ModelSpec, per_sample_scores
from .numkernel import ParamVec, SymMatrix, as_param_vec, eig_psd_dense

logger = logging.getLogger("Fisher")

FisherKind = Literal["full", "diagonal", "lowrank"]
BYTES_PER_VALUE = 8
_WIRE_DTYPE = np.dtype("<f8")


# ----------------------------------------------------
# CONFIG
# ----------------------------------------------------

class FisherConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    variant_kind: FisherKind = "diagonal"
    rank_k: PositiveInt = 50
    momentum_alpha: float = Field(0.9, ge=0.0, lt=1.0)
    mix_mu: float = Field(0.5, ge=0.0, le=1.0)
    # None: the validation FIM is computed once at the initial parameters
    refresh_every_batches: Optional[PositiveInt] = None


# ----------------------------------------------------
# ESTIMATES
# ----------------------------------------------------

class FisherEstimate(ABC):
    kind: ClassVar[str]
    dim: int
    sample_count: int

    @abstractmethod
    def matvec(self, v: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def trace(self) -> float: ...

    @abstractmethod
    def to_dense(self) -> np.ndarray: ...

    @abstractmethod
    def spectral_norm(self) -> float: ...

    @abstractmethod
    def _wire_values(self) -> np.ndarray: ...

    @property
    @abstractmethod
    def payload_values(self) -> int: ...

    @property
    def payload_bytes(self) -> int:
        return BYTES_PER_VALUE * self.payload_values

    def to_payload(self) -> bytes:
        """Little-endian float64 wire form."""
        return self._wire_values().astype(_WIRE_DTYPE).tobytes()

    def _check_vec(self, v: np.ndarray) -> None:
        if v.shape != (self.dim,):
            raise DimensionError(f"{self.kind} FIM of dim {self.dim} applied to shape {v.shape}")


@dataclass(frozen=True, eq=False)
class FullFisher(FisherEstimate):
    kind: ClassVar[str] = "full"
    matrix: SymMatrix
    sample_count: int = 0

    @property
    def dim(self) -> int:
        return self.matrix.dim

    def matvec(self, v):
        self._check_vec(v)
        return self.matrix.matvec(v)

    def trace(self) -> float:
        return float(np.trace(self.matrix.to_dense()))

    def to_dense(self):
        return self.matrix.to_dense()

    def spectral_norm(self) -> float:
        return float(max(np.linalg.eigvalsh(self.to_dense())[-1], 0.0))

    def _wire_values(self):
        return self.matrix.entries

    @property
    def payload_values(self) -> int:
        return self.dim * (self.dim + 1) // 2


@dataclass(frozen=True, eq=False)
class DiagonalFisher(FisherEstimate):
    kind: ClassVar[str] = "diagonal"
    diag: np.ndarray
    sample_count: int = 0

    def __post_init__(self):
        if self.diag.ndim != 1:
            raise DimensionError("diagonal FIM needs a 1-D vector")
        if np.any(self.diag < 0):
            raise ContractViolation("diagonal FIM has negative entries")
        self.diag.flags.writeable = False

    @property
    def dim(self) -> int:
        return int(self.diag.shape[0])

    def matvec(self, v):
        self._check_vec(v)
        return self.diag * v

    def trace(self) -> float:
        return float(self.diag.sum())

    def to_dense(self):
        return np.diag(self.diag)

    def spectral_norm(self) -> float:
        return float(self.diag.max())

    def _wire_values(self):
        return self.diag

    @property
    def payload_values(self) -> int:
        return self.dim


@dataclass(frozen=True, eq=False)
class LowRankFisher(FisherEstimate):
    """factor^T diag(eigenvalues) factor with orthonormal factor rows."""

    kind: ClassVar[str] = "lowrank"
    factor: np.ndarray
    eigenvalues: np.ndarray
    sample_count: int = 0

    def __post_init__(self):
        if self.factor.ndim != 2 or self.factor.shape[0] != self.eigenvalues.shape[0]:
            raise DimensionError(
                f"low-rank factor {self.factor.shape} does not match {self.eigenvalues.shape} eigenvalues"
            )
        if np.any(self.eigenvalues < 0):
            raise ContractViolation("low-rank FIM has negative eigenvalues")
        if np.any(np.diff(self.eigenvalues) > 0):
            raise ContractViolation("low-rank eigenvalues must be sorted descending")
        self.factor.flags.writeable = False
        self.eigenvalues.flags.writeable = False

    @property
    def dim(self) -> int:
        return int(self.factor.shape[1])

    @property
    def rank(self) -> int:
        return int(self.factor.shape[0])

    def matvec(self, v):
        self._check_vec(v)
        return self.factor.T @ (self.eigenvalues * (self.factor @ v))

    def trace(self) -> float:
        return float(self.eigenvalues.sum())

    def to_dense(self):
        return (self.factor.T * self.eigenvalues) @ self.factor

    def spectral_norm(self) -> float:
        return float(self.eigenvalues[0]) if self.rank else 0.0

    def orthonormality_error(self) -> float:
        return float(np.abs(self.factor @ self.factor.T - np.eye(self.rank)).max())

    def _wire_values(self):
        return np.concatenate([[float(self.rank)], self.eigenvalues, self.factor.reshape(-1)])

    @property
    def payload_values(self) -> int:
        return self.rank * self.dim + self.rank + 1


def from_payload(kind: FisherKind, dim: int, data: bytes, sample_count: int = 0) -> FisherEstimate:
    values = np.frombuffer(data, dtype=_WIRE_DTYPE).astype(np.float64)
    if kind == "full":
        return FullFisher(SymMatrix(dim, values.copy()), sample_count)
    if kind == "diagonal":
        if values.shape[0] != dim:
            raise DimensionError(f"diagonal payload has {values.shape[0]} values, expected {dim}")
        return DiagonalFisher(values.copy(), sample_count)
    k = int(values[0])
    if values.shape[0] != k * dim + k + 1:
        raise DimensionError(f"low-rank payload size {values.shape[0]} does not fit k={k}, d={dim}")
    eigenvalues = values[1:k + 1].copy()
    factor = values[k + 1:].reshape(k, dim).copy()
    return LowRankFisher(factor, eigenvalues, sample_count)


# ----------------------------------------------------
# LOW-RANK HELPERS
# ----------------------------------------------------

def _complete_rows(rows: np.ndarray, k: int, dim: int) -> np.ndarray:
    """Extend orthonormal rows to k rows with standard-basis directions."""
    basis = [r for r in rows]
    j = 0
    while len(basis) < k and j < dim:
        v = np.zeros(dim)
        v[j] = 1.0
        for _ in range(2):
            for b in basis:
                v -= (b @ v) * b
        norm = np.linalg.norm(v)
        if norm > 1e-6:
            basis.append(v / norm)
        j += 1
    if not basis:
        return np.zeros((0, dim))
    return np.vstack(basis)


def _rayleigh_ritz(rows: np.ndarray, apply_block) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormalize `rows` and diagonalize the operator restricted to them.

    `apply_block(Q)` must return M @ Q for a d x r block Q.
    """
    q, _ = np.linalg.qr(rows.T)
    small = q.T @ apply_block(q)
    values, vectors = eig_psd_dense(0.5 * (small + small.T))
    return values, (q @ vectors).T


def _lowrank_from_scores(scores: np.ndarray, rank_k: int) -> LowRankFisher:
    n, d = scores.shape
    k = min(rank_k, n, d)
    if rank_k > min(n, d):
        logger.warning(
            f"⚠️ rank_k={rank_k} exceeds min(n={n}, d={d}); using effective rank {k}"
        )
    gram = scores @ scores.T / n
    values, vectors = eig_psd_dense(gram)
    keep = np.flatnonzero(values[:k] > 0)
    if keep.size == 0:
        return zero_fisher("lowrank", d, k, sample_count=n)

    rows = (scores.T @ vectors[:, keep] / np.sqrt(n * values[keep])).T
    values, rows = _rayleigh_ritz(rows, lambda q: scores.T @ (scores @ q) / n)
    rows = _complete_rows(rows, k, d)
    eigenvalues = np.concatenate([values, np.zeros(rows.shape[0] - values.shape[0])])
    return LowRankFisher(rows, eigenvalues, sample_count=n)


def _lowrank_sum(terms: Sequence[tuple[float, LowRankFisher]], rank: int) -> LowRankFisher:
    dim = terms[0][1].dim
    stacked = np.vstack([est.factor for _, est in terms])
    weights = np.concatenate([coef * est.eigenvalues for coef, est in terms])
    q, r = np.linalg.qr(stacked.T)
    small = (r * weights) @ r.T
    values, vectors = eig_psd_dense(0.5 * (small + small.T))
    keep = min(rank, values.shape[0])
    rows = (q @ vectors[:, :keep]).T
    values = values[:keep]
    rows = _complete_rows(rows, min(rank, dim), dim)
    eigenvalues = np.concatenate([values, np.zeros(rows.shape[0] - keep)])
    return LowRankFisher(rows, eigenvalues)


# ----------------------------------------------------
# CONSTRUCTION
# ----------------------------------------------------

def zero_fisher(kind: FisherKind, dim: int, rank_k: int = 50, sample_count: int = 0) -> FisherEstimate:
    if kind == "full":
        return FullFisher(SymMatrix.zeros(dim), sample_count)
    if kind == "diagonal":
        return DiagonalFisher(np.zeros(dim), sample_count)
    k = min(rank_k, dim)
    return LowRankFisher(_complete_rows(np.zeros((0, dim)), k, dim), np.zeros(k), sample_count)


def fisher_from_scores(scores: np.ndarray, cfg: FisherConfig) -> FisherEstimate:
    """(1/n) sum s s^T over the rows of `scores`, in the configured variant."""
    n = scores.shape[0]
    if n == 0:
        raise DataError("cannot estimate a FIM from zero samples")
    diag = np.einsum("ij,ij->j", scores, scores) / n
    if cfg.variant_kind == "diagonal":
        return DiagonalFisher(diag, sample_count=n)
    if cfg.variant_kind == "full":
        dense = scores.T @ scores / n
        np.fill_diagonal(dense, diag)
        return FullFisher(SymMatrix.from_dense(dense), sample_count=n)
    return _lowrank_from_scores(scores, cfg.rank_k)


def empirical_fim(spec: ModelSpec, theta: ParamVec, frag: Fragment, cfg: FisherConfig) -> FisherEstimate:
    """Empirical FIM of the fragment's realized (x, y) pairs at theta."""
    return fisher_from_scores(per_sample_scores(spec, theta, frag), cfg)


# ----------------------------------------------------
# ALGEBRA
# ----------------------------------------------------

def _check_compatible(estimates: Sequence[FisherEstimate]) -> None:
    kinds = {e.kind for e in estimates}
    dims = {e.dim for e in estimates}
    if len(kinds) > 1:
        raise ContractViolation(f"FIM variant mismatch: {sorted(kinds)}")
    if len(dims) > 1:
        raise DimensionError(f"FIM dimension mismatch: {sorted(dims)}")


def combine(terms: Sequence[tuple[float, FisherEstimate]], rank: int | None = None) -> FisherEstimate:
    """Non-negative linear combination sum c_j * I_j."""
    estimates = [e for _, e in terms]
    _check_compatible(estimates)
    count = sum(e.sample_count for e in estimates)
    first = estimates[0]
    if first.kind == "full":
        entries = sum(c * e.matrix.entries for c, e in terms)
        return FullFisher(SymMatrix(first.dim, np.asarray(entries, dtype=np.float64)), count)
    if first.kind == "diagonal":
        diag = sum(c * e.diag for c, e in terms)
        return DiagonalFisher(np.asarray(diag, dtype=np.float64), count)
    rank = rank or max(e.rank for e in estimates)
    summed = _lowrank_sum(terms, rank)
    return LowRankFisher(summed.factor, summed.eigenvalues, count)


def mix_fim(i_batch: FisherEstimate, i_val: FisherEstimate, mu: float) -> FisherEstimate:
    """mu * I_B + (1 - mu) * I_V."""
    if not 0.0 <= mu <= 1.0:
        raise ContractViolation(f"mixing weight mu={mu} outside [0, 1]")
    _check_compatible([i_batch, i_val])
    if mu == 1.0:
        return i_batch
    if mu == 0.0:
        return i_val
    return combine([(mu, i_batch), (1.0 - mu, i_val)])


def ema_update(i_global: FisherEstimate, i_new: FisherEstimate, alpha: float) -> FisherEstimate:
    """alpha * I_G + (1 - alpha) * I_new."""
    if not 0.0 <= alpha < 1.0:
        raise ContractViolation(f"momentum alpha={alpha} outside [0, 1)")
    _check_compatible([i_global, i_new])
    if alpha == 0.0:
        return i_new
    return combine([(alpha, i_global), (1.0 - alpha, i_new)])


def aggregate_fims(locals_: Sequence[tuple[FisherEstimate, int]]) -> FisherEstimate:
    """Sample-weighted average sum (n_k / N) I_k."""
    if not locals_:
        raise ContractViolation("aggregate_fims needs at least one local FIM")
    total = sum(int(n) for _, n in locals_)
    if total <= 0:
        raise ContractViolation("aggregate_fims: total sample weight is zero")
    if len(locals_) == 1:
        return locals_[0][0]
    # weights reduced as exact rationals so they sum to one before conversion
    terms = [(float(Fraction(int(n), total)), est) for est, n in locals_]
    return combine(terms)


def apply_preconditioner(i_g: FisherEstimate, grad: ParamVec, lam: float) -> ParamVec:
    """(I + lambda * I_G) g."""
    if lam < 0:
        raise ContractViolation(f"penalty lambda={lam} must be non-negative")
    if grad.shape != (i_g.dim,):
        raise DimensionError(f"gradient shape {grad.shape} vs FIM dim {i_g.dim}")
    if lam == 0.0:
        return grad
    return as_param_vec(grad + lam * i_g.matvec(grad), copy=False)


def trace_penalty(i: FisherEstimate) -> float:
    return max(i.trace(), 0.0)
