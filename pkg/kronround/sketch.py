"""
Kronecker-factored sketches H_O (x) H_I of a layer's Fisher.

Dense sketches (power iteration, Van Loan) work on the rearrangement
R[(a,c),(b,d)] = H[(a,b),(c,d)], in which a Kronecker product is the rank-1
matrix vec(H_O) vec(H_I)^T. Model-based sketches (A, B) accumulate over
backward passes without ever forming H.
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
from scipy.sparse.linalg import svds

from kronround.errors import ShapeMismatch, TooLarge, ZeroMatrix
from kronround.linalg import SymMatrix, as_array, frob_cosine, frob_inner, kron, numerical_rank, sym_eigen
from kronround.model import (
    EXACT, MAX_FISHER_DIM, Dataset, FisherEstimate, ToyModel, gradient_samples, layer_input_hessian,
    true_layer_hessian,
)
from kronround.transform import incoherence_mu

logger = logging.getLogger(__name__)

ALTERNATING = "alternating"
SIMULTANEOUS = "simultaneous"

# Factor norms below this are treated as an underflow to zero
NORM_FLOOR = 1e-300

# Dense SVD is used for rearrangements up to this many rows/cols
DENSE_SVD_LIMIT = 256

SKETCH_METHODS = ("ldlq", "a", "b", "powerfull", "vanloan")


@dataclass
class KronSketch:
    H_O: SymMatrix
    H_I: SymMatrix
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.H_O, SymMatrix):
            self.H_O = SymMatrix(self.H_O)
        if not isinstance(self.H_I, SymMatrix):
            self.H_I = SymMatrix(self.H_I)

    @property
    def m(self) -> int:
        return self.H_O.n

    @property
    def n(self) -> int:
        return self.H_I.n

    @classmethod
    def identity(cls, m: int, n: int) -> "KronSketch":
        return cls(np.eye(m), np.eye(n), {'method': 'identity'})

    def dense(self) -> np.ndarray:
        return kron(self.H_O.data, self.H_I.data)

    def scaled(self, alpha: float) -> "KronSketch":
        """(alpha H_O, H_I / alpha): the same product"""
        return KronSketch(self.H_O.data * alpha, self.H_I.data / alpha, dict(self.meta))

    def finalize(self) -> "KronSketch":
        """Clamp negative eigenvalues and move all scale into H_I so ||H_O||_F = 1"""
        H_O = _clamp_psd(self.H_O.data)
        H_I = _clamp_psd(self.H_I.data)
        scale = np.linalg.norm(H_O)
        if scale < NORM_FLOOR or np.linalg.norm(H_I) < NORM_FLOOR:
            raise ZeroMatrix("sketch factor vanished")
        meta = dict(self.meta)
        meta.update({'scale': float(scale), 'normalized': True})
        return KronSketch(H_O / scale, H_I * scale, meta)


def _clamp_psd(A: np.ndarray) -> np.ndarray:
    decomp = sym_eigen(A)
    if decomp.eigenvalues.size == 0 or decomp.eigenvalues[-1] >= 0:
        return A
    lam = np.maximum(decomp.eigenvalues, 0.0)
    return (decomp.Q * lam) @ decomp.Q.T


def _check_fisher(H: FisherEstimate, m: Optional[int], n: Optional[int]):
    m = H.m if m is None else m
    n = H.n if n is None else n
    if m * n > MAX_FISHER_DIM:
        raise TooLarge(f"dense sketching of size {m * n} exceeds {MAX_FISHER_DIM}")
    if H.H.n != m * n:
        raise ShapeMismatch(f"Fisher of size {H.H.n} does not factor as {m}x{n}")
    return m, n


def rearrange(H: Any, m: int, n: int) -> np.ndarray:
    """m^2 x n^2 rearrangement with R[(a,c),(b,d)] = H[(a,b),(c,d)]"""
    A = as_array(H.H if isinstance(H, FisherEstimate) else H)
    return A.reshape(m, n, m, n).transpose(0, 2, 1, 3).reshape(m * m, n * n)


def _normalized_objective(R: np.ndarray, h_O: np.ndarray, h_I: np.ndarray) -> float:
    return float(h_O @ R @ h_I / (np.linalg.norm(h_O) * np.linalg.norm(h_I)))


def power_iterate_full(H: FisherEstimate, m: Optional[int] = None, n: Optional[int] = None,
                       iters: int = 10, schedule: str = ALTERNATING) -> KronSketch:
    """Power iteration on the full Fisher.

    Each update contracts H against the current co-factor:
    H_I <- <H, H_O>_blocks / ||H_O||^2 and H_O <- <H, H_I>_blocks / ||H_I||^2.
    """
    m, n = _check_fisher(H, m, n)
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    if schedule not in (ALTERNATING, SIMULTANEOUS):
        raise ValueError(f"unknown schedule {schedule!r}")
    R = rearrange(H, m, n)
    h_O = np.eye(m).reshape(-1)
    h_I = np.eye(n).reshape(-1)
    history: List[float] = []

    for it in range(iters):
        if schedule == ALTERNATING:
            h_I = _contract(R.T, h_O)
            h_O = _contract(R, h_I)
        else:
            h_I, h_O = _contract(R.T, h_O), _contract(R, h_I)
        history.append(_normalized_objective(R, h_O, h_I))
        logger.debug(f"power_iterate_full: iter={it + 1}, normalized cosine={history[-1]:.12g}")

    sketch = KronSketch(h_O.reshape(m, m), h_I.reshape(n, n), {
        'method': 'powerfull', 'iterations': iters, 'schedule': schedule, 'objective': history,
    })
    return sketch.finalize()


def _contract(R: np.ndarray, h: np.ndarray) -> np.ndarray:
    norm_sq = float(h @ h)
    if norm_sq < NORM_FLOOR:
        raise ZeroMatrix("power iteration factor underflowed to zero")
    out = R @ h / norm_sq
    if np.linalg.norm(out) < NORM_FLOOR:
        raise ZeroMatrix("power iteration produced a zero factor")
    return out


def van_loan_optimal(H: FisherEstimate, m: Optional[int] = None, n: Optional[int] = None) -> KronSketch:
    """Best Frobenius Kronecker approximation: leading singular pair of the rearrangement"""
    m, n = _check_fisher(H, m, n)
    R = rearrange(H, m, n)
    if min(R.shape) <= DENSE_SVD_LIMIT:
        U, s, Vt = np.linalg.svd(R, full_matrices=False)
        u, sigma, v = U[:, 0], s[0], Vt[0]
    else:
        v0 = np.full(min(R.shape), 1.0 / np.sqrt(min(R.shape)))
        U, s, Vt = svds(R, k=1, v0=v0)
        u, sigma, v = U[:, 0], s[0], Vt[0]
    if sigma < NORM_FLOOR:
        raise ZeroMatrix("Fisher is zero")
    H_O = u.reshape(m, m)
    H_I = sigma * v.reshape(n, n)
    if np.trace(H_O) < 0:
        H_O, H_I = -H_O, -H_I
    sketch = KronSketch(H_O, H_I, {'method': 'vanloan', 'singular_value': float(sigma)})
    return sketch.finalize()


def token_independent_fisher(model: ToyModel, layer: int, data: Dataset, label_mode: str = EXACT,
                             samples: int = 1, seed: int = 0) -> FisherEstimate:
    """Fisher with the cross-token terms of every sequence dropped"""
    m, n = model.layer_shape(layer)
    if m * n > MAX_FISHER_DIM:
        raise TooLarge(f"dense Fisher of size {m * n} exceeds {MAX_FISHER_DIM}")
    w, X, Dy = gradient_samples(model, layer, data, label_mode, samples, seed).token_terms()
    vecs = (Dy[:, :, None] * X[:, None, :]).reshape(len(w), m * n)
    H = (vecs * w[:, None]).T @ vecs
    return FisherEstimate(H=SymMatrix(H), m=m, n=n, provenance='token-independent', samples=len(w))


def ldlq_sketch(model: ToyModel, layer: int, data: Dataset) -> KronSketch:
    """(I, H_1): the sketch LDLQ implicitly uses"""
    m, _ = model.layer_shape(layer)
    H_1 = layer_input_hessian(model, layer, data)
    return KronSketch(np.eye(m), H_1, {'method': 'ldlq'}).finalize()


def sketch_a(model: ToyModel, layer: int, data: Dataset, iters: int = 2, rng_seed: int = 0,
             label_mode: str = EXACT, samples: int = 1) -> KronSketch:
    """Power iteration on the token-independent Fisher, accumulated per token.

    Starts from (H_O, H_I) = (I, H_1) and alternates
    H_O <- E[(x^T H_I x) dy dy^T] / ||H_I||^2, then
    H_I <- E[(dy^T H_O dy) x x^T] / ||H_O||^2.
    """
    m, n = model.layer_shape(layer)
    H_O = np.eye(m)
    H_I = layer_input_hessian(model, layer, data)
    if iters > 0:
        w, X, Dy = gradient_samples(model, layer, data, label_mode, samples, rng_seed).token_terms()
        for it in range(iters):
            xHx = np.einsum('ti,ij,tj->t', X, H_I, X)
            H_O = _weighted_outer(Dy, w * xHx) / _norm_sq(H_I)
            dHd = np.einsum('ti,ij,tj->t', Dy, H_O, Dy)
            H_I = _weighted_outer(X, w * dHd) / _norm_sq(H_O)
            logger.debug(f"sketch_a: layer={layer}, iter={it + 1}, |H_O|={np.linalg.norm(H_O):.6g}, |H_I|={np.linalg.norm(H_I):.6g}")
    meta = {'method': 'a', 'iterations': iters, 'label_mode': label_mode, 'provenance': 'token-independent'}
    return KronSketch(H_O, H_I, meta).finalize()


def sketch_b(model: ToyModel, layer: int, data: Dataset, rng_seed: int = 0,
             label_mode: str = EXACT, samples: int = 1) -> KronSketch:
    """One round from identity on the per-sequence Fisher:
    H_I = E[G^T G] / m, H_O = E[G G^T] / n"""
    m, n = model.layer_shape(layer)
    grads = gradient_samples(model, layer, data, label_mode, samples, rng_seed)
    G = grads.gradients()
    w = grads.weights
    H_I = np.einsum('s,sai,saj->ij', w, G, G) / m
    H_O = np.einsum('s,sia,sja->ij', w, G, G) / n
    if np.linalg.norm(H_O) < NORM_FLOOR:
        raise ZeroMatrix("all layer gradients are zero")
    meta = {'method': 'b', 'iterations': 1, 'label_mode': label_mode,
            'normalization': 'per-sequence gradient, weights sum to 1 over tokens',
            'samples': int(len(w))}
    return KronSketch(H_O, H_I, meta).finalize()


def _weighted_outer(V: np.ndarray, weights: np.ndarray) -> np.ndarray:
    out = (V * weights[:, None]).T @ V
    if np.linalg.norm(out) < NORM_FLOOR:
        raise ZeroMatrix("sketch update is zero; the layer gradients vanish")
    return out


def _norm_sq(A: np.ndarray) -> float:
    return float(np.sum(A * A))


def guidedquant_blocks(H: FisherEstimate, m: int, n: int, groups: int) -> List[np.ndarray]:
    """Shared n x n input Hessian per output-channel group, from the diagonal blocks of H"""
    if groups < 1 or m % groups:
        raise ShapeMismatch(f"{groups} groups do not divide {m} output channels")
    A = as_array(H.H if isinstance(H, FisherEstimate) else H)
    if A.shape != (m * n, m * n):
        raise ShapeMismatch(f"Fisher of shape {A.shape} does not factor as {m}x{n}")
    diag_blocks = A.reshape(m, n, m, n)[np.arange(m), :, np.arange(m), :]
    size = m // groups
    return [diag_blocks[j * size:(j + 1) * size].mean(axis=0) for j in range(groups)]


@dataclass
class SketchQuality:
    cosine: float
    normalized_cosine: float
    residual: float
    residual_best_scale: float
    mu_O: float
    mu_I: float
    rank_O: int
    rank_I: int

    def to_dict(self) -> Dict[str, Any]:
        return dict(self.__dict__)


def sketch_quality(H: FisherEstimate, s: KronSketch) -> SketchQuality:
    """Cosine, normalized cosine <H, H_O (x) H_I>/(||H_O|| ||H_I||), residuals, incoherence and ranks"""
    _check_fisher(H, s.m, s.n)
    Hd = H.H.data
    K = s.dense()
    inner = frob_inner(Hd, K)
    k_norm = np.linalg.norm(K)
    best = inner / (k_norm ** 2) if k_norm > 0 else 0.0
    return SketchQuality(
        cosine=frob_cosine(Hd, K),
        normalized_cosine=float(inner / (np.linalg.norm(s.H_O.data) * np.linalg.norm(s.H_I.data))),
        residual=float(np.linalg.norm(Hd - K)),
        residual_best_scale=float(np.linalg.norm(Hd - best * K)),
        mu_O=incoherence_mu(s.H_O),
        mu_I=incoherence_mu(s.H_I),
        rank_O=numerical_rank(s.H_O),
        rank_I=numerical_rank(s.H_I),
    )


def build_sketch(method: str, model: ToyModel, layer: int, data: Dataset, iters: int = 2, seed: int = 0,
                 label_mode: str = EXACT, samples: int = 1, fisher: Optional[FisherEstimate] = None) -> KronSketch:
    """Dispatch on the method names accepted by the command line"""
    if method == "ldlq":
        return ldlq_sketch(model, layer, data)
    if method == "a":
        return sketch_a(model, layer, data, iters, seed, label_mode, samples)
    if method == "b":
        return sketch_b(model, layer, data, seed, label_mode, samples)
    if method in ("powerfull", "vanloan"):
        if fisher is None:
            fisher = true_layer_hessian(model, layer, data, label_mode, samples, seed)
        if method == "powerfull":
            return power_iterate_full(fisher, iters=max(iters, 1))
        return van_loan_optimal(fisher)
    raise ValueError(f"unknown sketch method {method!r}; expected one of {', '.join(SKETCH_METHODS)}")
