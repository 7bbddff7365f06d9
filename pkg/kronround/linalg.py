"""
Dense linear-algebra kernels: symmetric factorizations, eigendecomposition,
Kronecker utilities and matrix functionals
"""
import logging
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.linalg import solve_triangular

import settings
from kronround.errors import BadBlockSize, NoConvergence, NotPositiveDefinite, ShapeMismatch, ZeroMatrix

logger = logging.getLogger(__name__)

# Hessian regularization, applied as reg * (tr(H)/n) * I
DEFAULT_REG = settings.default_reg

# Eigenvalues below this fraction of lambda_max count as zero in trace_sqrt
EIG_CLAMP_TOL = 1e-12


@dataclass(frozen=True)
class SymMatrix:
    """Dense symmetric matrix; storage is symmetrized on construction"""
    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ShapeMismatch(f"SymMatrix needs a square matrix, got shape {a.shape}")
        # (A + A^T)/2 is exactly symmetric in floating point
        sym = (a + a.T) / 2.0
        sym.setflags(write=False)
        object.__setattr__(self, 'data', sym)

    @property
    def n(self) -> int:
        return self.data.shape[0]


MatrixLike = Union[SymMatrix, np.ndarray]


def as_array(H: MatrixLike) -> np.ndarray:
    """Return the dense float64 array behind a SymMatrix or array"""
    if isinstance(H, SymMatrix):
        return H.data
    return np.asarray(H, dtype=np.float64)


@dataclass(frozen=True)
class LDLFactors:
    """H = L diag(D) L^T with L unit lower triangular"""
    L: np.ndarray
    D: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.L * self.D) @ self.L.T


@dataclass(frozen=True)
class BlockLDLFactors:
    """H = L D L^T with L block unit lower triangular and D block diagonal"""
    L: np.ndarray
    D: np.ndarray
    g: int

    def reconstruct(self) -> np.ndarray:
        return self.L @ self.D @ self.L.T

    @property
    def trace_d(self) -> float:
        return float(np.trace(self.D))


@dataclass(frozen=True)
class EigenDecomp:
    """H = Q diag(eigenvalues) Q^T, eigenvalues descending"""
    Q: np.ndarray
    eigenvalues: np.ndarray


def regularize(H: MatrixLike, reg: float) -> np.ndarray:
    """Add reg * (tr(H)/n) to the diagonal"""
    A = as_array(H)
    if reg < 0:
        raise ValueError(f"reg must be nonnegative, got {reg}")
    if reg == 0:
        return A.copy()
    n = A.shape[0]
    return A + (reg * np.trace(A) / n) * np.eye(n)


def block_ldl(H: MatrixLike, g: int, reg: float = DEFAULT_REG) -> BlockLDLFactors:
    """Block LDL decomposition with g x g pivot blocks.

    Computed from the Cholesky factor C of the regularized matrix: with B the
    block diagonal of C, L = C B^{-1} and D = B B^T.
    """
    A = regularize(H, reg)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeMismatch(f"block_ldl needs a square matrix, got shape {A.shape}")
    n = A.shape[0]
    if g < 1 or n % g:
        raise BadBlockSize(f"block size {g} does not divide dimension {n}")

    try:
        C = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as e:
        raise NotPositiveDefinite(f"matrix of size {n} is not positive definite after reg={reg}: {e}")

    L = np.zeros_like(C)
    D = np.zeros_like(C)
    for start in range(0, n, g):
        blk = slice(start, start + g)
        B = C[blk, blk]
        if np.any(np.diag(B) <= 0):
            raise NotPositiveDefinite(f"non-positive pivot in block starting at {start}")
        # L[:, blk] = C[:, blk] B^{-1}, only rows at or below the block are nonzero
        L[start:, blk] = solve_triangular(B, C[start:, blk].T, lower=True, trans='T').T
        L[blk, blk] = np.eye(g)
        D[blk, blk] = B @ B.T

    logger.debug(f"block_ldl: n={n}, g={g}, reg={reg}, tr(D)={np.trace(D):.6g}")
    return BlockLDLFactors(L=L, D=D, g=g)


def ldl(H: MatrixLike, reg: float = DEFAULT_REG) -> LDLFactors:
    """Scalar LDL decomposition (block_ldl with g=1)"""
    factors = block_ldl(H, 1, reg)
    return LDLFactors(L=factors.L, D=np.diag(factors.D).copy())


def sym_eigen(H: MatrixLike) -> EigenDecomp:
    """Symmetric eigendecomposition with eigenvalues sorted descending"""
    A = as_array(H)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeMismatch(f"sym_eigen needs a square matrix, got shape {A.shape}")
    try:
        lam, Q = np.linalg.eigh(A)
    except np.linalg.LinAlgError as e:
        raise NoConvergence(f"symmetric eigensolver did not converge: {e}")
    return EigenDecomp(Q=Q[:, ::-1].copy(), eigenvalues=lam[::-1].copy())


def _clamped_eigenvalues(H: MatrixLike) -> np.ndarray:
    lam = sym_eigen(H).eigenvalues
    if lam.size == 0:
        return lam
    cutoff = EIG_CLAMP_TOL * max(lam[0], 0.0)
    return np.where(lam > cutoff, lam, 0.0)


def trace_sqrt(H: MatrixLike) -> float:
    """tr(H^{1/2}) = sum of sqrt of the (clamped) eigenvalues"""
    return float(np.sum(np.sqrt(_clamped_eigenvalues(H))))


def numerical_rank(H: MatrixLike, rel_tol: float = 1e-6) -> int:
    """Number of eigenvalues above rel_tol * lambda_max"""
    lam = sym_eigen(H).eigenvalues
    if lam.size == 0 or lam[0] <= 0:
        return 0
    return int(np.sum(lam > rel_tol * lam[0]))


def kron(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Kronecker product A (x) B"""
    return np.kron(as_array(A), as_array(B))


def frob_inner(A: np.ndarray, B: np.ndarray) -> float:
    a, b = as_array(A), as_array(B)
    if a.shape != b.shape:
        raise ShapeMismatch(f"inner product of shapes {a.shape} and {b.shape}")
    return float(np.vdot(a, b))


def frob_cosine(A: np.ndarray, B: np.ndarray) -> float:
    """<A, B>_F / (||A||_F ||B||_F)"""
    a, b = as_array(A), as_array(B)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ZeroMatrix("cosine similarity of a zero matrix")
    c = frob_inner(a, b) / (na * nb)
    return float(np.clip(c, -1.0, 1.0))


def vec(W: np.ndarray, order: str = "C") -> np.ndarray:
    """Flatten an m x n matrix, output-channel (row) index slowest.

    With this convention vec(A^T X B) = vec(X) (A (x) B) for row vectors,
    which is the arrangement the two-sided rounding update relies on.
    """
    w = np.asarray(W, dtype=np.float64)
    if w.ndim != 2:
        raise ShapeMismatch(f"vec expects a 2-D matrix, got shape {w.shape}")
    return w.reshape(-1, order=order).copy()


def unvec(v: np.ndarray, m: int, n: int, order: str = "C") -> np.ndarray:
    """Inverse of vec"""
    a = np.asarray(v, dtype=np.float64)
    if a.size != m * n:
        raise ShapeMismatch(f"cannot reshape vector of length {a.size} into {m}x{n}")
    return a.reshape((m, n), order=order).copy()
