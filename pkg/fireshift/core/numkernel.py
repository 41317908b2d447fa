"""Deterministic numeric primitives shared by every other module.

ParamVec is a read-only float64 numpy vector. SymMatrix stores the upper
triangle only. Rng wraps a PCG64 generator whose sub-streams are keyed by
(experiment seed, module tag, entity index), so the order in which clients
or batches are visited never changes what any of them draws.
"""
import logging
import zlib
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Protocol

import numpy as np
import numpy.typing as npt

from .errors import ContractViolation, DimensionError, NonConvergenceError, NonFiniteError

logger = logging.getLogger("NumKernel")

ParamVec = npt.NDArray[np.float64]

EIG_MAX_DIM = 4096
EIG_REL_TOL = 1e-10


# ----------------------------------------------------
# PARAM VECTORS
# ----------------------------------------------------

def as_param_vec(values, copy: bool = True) -> ParamVec:
    """Build a frozen 1-D float64 vector; rejects NaN/Inf."""
    arr = np.array(values, dtype=np.float64) if copy else np.asarray(values, dtype=np.float64)
    arr = arr.reshape(-1)
    ensure_finite(arr, "parameter vector")
    arr.flags.writeable = False
    return arr


def ensure_finite(arr: np.ndarray, what: str, step: int | None = None) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}", step=step)


@contextmanager
def at_step(step: int):
    """Tag a step-less NonFiniteError raised inside the block with `step`."""
    try:
        yield
    except NonFiniteError as e:
        if e.step is not None:
            raise
        raise NonFiniteError(str(e), step=step) from e


def check_same_length(x: np.ndarray, y: np.ndarray, what: str = "vectors") -> None:
    if x.shape != y.shape:
        raise DimensionError(f"{what} differ in shape: {x.shape} vs {y.shape}")


def axpy(alpha: float, x: ParamVec, y: ParamVec) -> ParamVec:
    """alpha * x + y, element-wise."""
    check_same_length(x, y, "axpy operands")
    return as_param_vec(alpha * x + y, copy=False)


# ----------------------------------------------------
# SYMMETRIC MATRICES
# ----------------------------------------------------

class LinearOperator(Protocol):
    dim: int

    def matvec(self, v: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class SymMatrix:
    """Dense symmetric matrix, row-major upper triangle (d(d+1)/2 entries)."""

    dim: int
    entries: np.ndarray

    def __post_init__(self):
        if self.dim <= 0:
            raise DimensionError(f"SymMatrix dim must be positive, got {self.dim}")
        expected = self.dim * (self.dim + 1) // 2
        if self.entries.shape != (expected,):
            raise DimensionError(
                f"SymMatrix of dim {self.dim} needs {expected} entries, got {self.entries.shape}"
            )
        self.entries.flags.writeable = False

    @classmethod
    def from_dense(cls, a: np.ndarray) -> "SymMatrix":
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DimensionError(f"expected a square matrix, got shape {a.shape}")
        sym = 0.5 * (a + a.T)
        rows, cols = np.triu_indices(a.shape[0])
        return cls(dim=a.shape[0], entries=sym[rows, cols].copy())

    @classmethod
    def zeros(cls, dim: int) -> "SymMatrix":
        return cls(dim=dim, entries=np.zeros(dim * (dim + 1) // 2))

    @classmethod
    def identity(cls, dim: int) -> "SymMatrix":
        return cls.from_dense(np.eye(dim))

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.dim, self.dim))
        rows, cols = np.triu_indices(self.dim)
        out[rows, cols] = self.entries
        out[cols, rows] = self.entries
        return out

    def matvec(self, v: np.ndarray) -> np.ndarray:
        if v.shape != (self.dim,):
            raise DimensionError(f"matvec expects length {self.dim}, got {v.shape}")
        return self.to_dense() @ v

    def frobenius(self) -> float:
        return float(np.linalg.norm(self.to_dense()))


# ----------------------------------------------------
# EIGENDECOMPOSITION
# ----------------------------------------------------

def sym_eig_small(g: SymMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Eigenpairs of a small PSD matrix, eigenvalues descending.

    Returns (eigenvalues, eigenvectors) with eigenvectors as orthonormal
    columns. Eigenvalues with magnitude below 1e-10*||A||_F are clamped to
    zero; anything more negative than that is a contract violation.
    """
    if g.dim > EIG_MAX_DIM:
        raise DimensionError(f"sym_eig_small supports dim <= {EIG_MAX_DIM}, got {g.dim}")
    return eig_psd_dense(g.to_dense())


def eig_psd_dense(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ensure_finite(a, "eigen input")
    scale = float(np.linalg.norm(a))
    try:
        values, vectors = np.linalg.eigh(a)
    except np.linalg.LinAlgError as e:
        raise NonConvergenceError(f"symmetric eigensolver failed: {e}") from e

    tol = EIG_REL_TOL * scale
    if values.size and values[0] < -tol:
        raise ContractViolation(
            f"matrix documented PSD has eigenvalue {values[0]:.3e} (tolerance {tol:.3e})"
        )
    values = np.where(np.abs(values) <= tol, 0.0, values)
    order = np.argsort(-values, kind="stable")
    return values[order], vectors[:, order]


# ----------------------------------------------------
# QUADRATIC FORMS
# ----------------------------------------------------

def quad_form(m: LinearOperator, v: ParamVec) -> float:
    """v^T M v for any operator exposing `dim` and `matvec`."""
    if v.shape != (m.dim,):
        raise DimensionError(f"quad_form: operator dim {m.dim} vs vector {v.shape}")
    return float(v @ m.matvec(v))


# ----------------------------------------------------
# RANDOMNESS
# ----------------------------------------------------

def _tag_key(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


class Rng:
    """Single-owner PCG64 stream. Use `derive` for independent sub-streams."""

    ALGORITHM = "PCG64"

    def __init__(self, seed: int, tag: str = "root", index: int = 0):
        self.seed = int(seed)
        self.tag = tag
        self.index = int(index)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=(_tag_key(tag), self.index))
        self.generator = np.random.Generator(np.random.PCG64(seq))

    @classmethod
    def derive(cls, seed: int, tag: str, index: int = 0) -> "Rng":
        return cls(seed, tag, index)

    def split(self, tag: str, index: int = 0) -> "Rng":
        """Sub-stream keyed by this stream's seed, independent of draws made so far."""
        return Rng(self.seed, f"{self.tag}/{tag}", index)

    def uniform(self, low: float, high: float, size=None):
        return self.generator.uniform(low, high, size)

    def beta(self, a: float, b: float, size=None):
        return self.generator.beta(a, b, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def dirichlet(self, alpha, size=None):
        return self.generator.dirichlet(alpha, size)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self.generator.choice(n, size=size, replace=replace)

    def integers(self, low: int, high: int | None = None, size=None):
        return self.generator.integers(low, high, size)

    def rademacher(self, size) -> np.ndarray:
        return self.generator.integers(0, 2, size) * 2.0 - 1.0

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, tag={self.tag!r}, index={self.index})"
