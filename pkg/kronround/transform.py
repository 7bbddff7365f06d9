"""
Randomized Hadamard transforms (RHT) for incoherence processing of weights
and both Hessian factors, plus incoherence measurement
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Optional, Tuple

import numpy as np
from scipy.linalg import hadamard as sylvester_hadamard

from kronround.errors import NotPowerOfTwo, ShapeMismatch, ZeroMatrix
from kronround.linalg import DEFAULT_REG, MatrixLike, SymMatrix, as_array, block_ldl, kron, sym_eigen

logger = logging.getLogger(__name__)


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _check_power_of_two(n: int):
    if not is_power_of_two(n):
        raise NotPowerOfTwo(f"dimension {n} is not a power of two")


def hadamard(n: int) -> np.ndarray:
    """Normalized Sylvester Hadamard matrix H_n with entries +-1/sqrt(n)"""
    _check_power_of_two(n)
    return sylvester_hadamard(n).astype(np.float64) / np.sqrt(n)


def fast_hadamard(x: np.ndarray) -> np.ndarray:
    """Normalized Walsh-Hadamard transform along the last axis, O(n log n)"""
    a = np.array(x, dtype=np.float64)
    n = a.shape[-1]
    _check_power_of_two(n)
    lead = a.shape[:-1]
    h = 1
    while h < n:
        a = a.reshape(*lead, n // (2 * h), 2, h)
        lo, hi = a[..., 0, :], a[..., 1, :]
        a = np.stack((lo + hi, lo - hi), axis=-2)
        h *= 2
    return a.reshape(*lead, n) / np.sqrt(n)


@dataclass(frozen=True)
class RHT:
    """U = H_n diag(signs)"""
    signs: np.ndarray
    seed: Optional[int] = None

    def __post_init__(self):
        s = np.asarray(self.signs, dtype=np.float64).reshape(-1)
        _check_power_of_two(s.size)
        if not np.all(np.abs(s) == 1.0):
            raise ValueError("RHT signs must all be +1 or -1")
        s.setflags(write=False)
        object.__setattr__(self, 'signs', s)

    @property
    def n(self) -> int:
        return self.signs.size

    @classmethod
    def random(cls, n: int, seed: int) -> "RHT":
        _check_power_of_two(n)
        rng = np.random.default_rng(seed)
        return cls(rng.integers(0, 2, size=n) * 2.0 - 1.0, seed=seed)

    @classmethod
    def identity_signs(cls, n: int) -> "RHT":
        return cls(np.ones(n))

    def matrix(self) -> np.ndarray:
        return hadamard(self.n) * self.signs[None, :]

    def apply(self, x: np.ndarray) -> np.ndarray:
        """U x for every vector along the last axis"""
        return fast_hadamard(np.asarray(x, dtype=np.float64) * self.signs)

    def left(self, A: np.ndarray) -> np.ndarray:
        """U A"""
        return self.apply(np.asarray(A, dtype=np.float64).T).T

    def right_transpose(self, A: np.ndarray) -> np.ndarray:
        """A U^T"""
        return self.apply(A)

    def left_transpose(self, A: np.ndarray) -> np.ndarray:
        """U^T A"""
        return self.signs[:, None] * fast_hadamard(np.asarray(A, dtype=np.float64).T).T

    def right(self, A: np.ndarray) -> np.ndarray:
        """A U"""
        return fast_hadamard(A) * self.signs

    def conjugate(self, H: MatrixLike) -> SymMatrix:
        """U H U^T"""
        return SymMatrix(self.right_transpose(self.left(as_array(H))))


@dataclass
class IncoherenceTransforms:
    """Output-side (m) and input-side (n) transforms of one layer"""
    U: RHT
    V: RHT
    meta: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {'ip_seed_out': self.U.seed, 'ip_seed_in': self.V.seed, 'm': self.U.n, 'n': self.V.n}

    def conjugate_dense(self, H: MatrixLike) -> SymMatrix:
        """(U (x) V) H (U (x) V)^T, the mn x mn Hessian of the processed weights"""
        A = as_array(H)
        m, n = self.U.n, self.V.n
        if A.shape != (m * n, m * n):
            raise ShapeMismatch(f"Hessian of shape {A.shape} does not match {m}x{n} transforms")
        T = kron(self.U.matrix(), self.V.matrix())
        return SymMatrix(T @ A @ T.T)


def incoherence_process(W: np.ndarray, sketch, seeds: Tuple[int, int]):
    """(W', sketch', transforms) with W' = U W V^T, H_O' = U H_O U^T, H_I' = V H_I V^T"""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape != (sketch.m, sketch.n):
        raise ShapeMismatch(f"weights of shape {W.shape} do not match sketch {(sketch.m, sketch.n)}")
    m, n = W.shape
    _check_power_of_two(m)
    _check_power_of_two(n)
    U = RHT.random(m, seeds[0])
    V = RHT.random(n, seeds[1])
    W_ip = V.right_transpose(U.left(W))
    meta = dict(sketch.meta)
    meta.update({'ip_seed_out': seeds[0], 'ip_seed_in': seeds[1]})
    sketch_ip = replace(sketch, H_O=U.conjugate(sketch.H_O), H_I=V.conjugate(sketch.H_I), meta=meta)
    logger.debug(f"incoherence_process: {m}x{n}, seeds={seeds}")
    return W_ip, sketch_ip, IncoherenceTransforms(U=U, V=V)


def restore_weights(W_ip: np.ndarray, transforms: IncoherenceTransforms) -> np.ndarray:
    """U^T W' V, mapping weights from the processed space back"""
    return transforms.V.right(transforms.U.left_transpose(W_ip))


def incoherence_mu(H: MatrixLike) -> float:
    """sqrt(n) * max |Q_ij| over the computed eigenbasis"""
    Q = sym_eigen(H).Q
    return float(np.sqrt(Q.shape[0]) * np.max(np.abs(Q)))


def weight_mu(W: np.ndarray) -> float:
    """sqrt(mn) * max |W_ij| / ||W||_F"""
    W = np.asarray(W, dtype=np.float64)
    norm = np.linalg.norm(W)
    if norm == 0:
        raise ZeroMatrix("weight incoherence of a zero matrix")
    return float(np.sqrt(W.size) * np.max(np.abs(W)) / norm)


def trace_ratio_diagnostic(before, after, reg: float = DEFAULT_REG, block_shape: Tuple[int, int] = (1, 1)) -> float:
    """tr(D_O') tr(D_I') / (tr(D_O) tr(D_I)); below 1 means a smaller error bound"""
    gx, gy = block_shape
    num = block_ldl(after.H_O, gx, reg).trace_d * block_ldl(after.H_I, gy, reg).trace_d
    den = block_ldl(before.H_O, gx, reg).trace_d * block_ldl(before.H_I, gy, reg).trace_d
    return float(num / den)
