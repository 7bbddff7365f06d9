"""
Adaptive rounding with LDL feedback.

All algorithms solve the same fixed point
    W = Q(W* + L_O'^T D L_I' + L_O'^T D + D L_I'),   D = W* - W,
with L' = L - I from (block) LDL factors of the sketch. Entry (i, j) only
receives feedback from entries at larger row and column indices, so the
iteration settles after at most snd(L_O (x) L_I) sweeps.
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

import settings
from kronround.errors import BadBlockSize, NoConvergence, ShapeMismatch, TooLarge
from kronround.linalg import DEFAULT_REG, MatrixLike, as_array, block_ldl, kron, ldl, unvec, vec
from kronround.quantize import GridQuantizer, QuantizedWeights, QuantizerSpec
from kronround.sketch import KronSketch
from kronround.snd import kron_snd_bound, support_of

logger = logging.getLogger(__name__)

ORACLE_SIZE_CAP = settings.oracle_size_cap


@dataclass
class RoundingProblem:
    W_star: np.ndarray
    sketch: KronSketch
    spec: QuantizerSpec
    reg: float = DEFAULT_REG
    seed: int = 0

    def __post_init__(self):
        self.W_star = np.asarray(self.W_star, dtype=np.float64)
        if self.W_star.ndim != 2:
            raise ShapeMismatch(f"weights must be 2-D, got shape {self.W_star.shape}")
        if (self.sketch.m, self.sketch.n) != self.W_star.shape:
            raise ShapeMismatch(f"sketch {(self.sketch.m, self.sketch.n)} does not match weights {self.W_star.shape}")

    @property
    def m(self) -> int:
        return self.W_star.shape[0]

    @property
    def n(self) -> int:
        return self.W_star.shape[1]

    @classmethod
    def with_input_hessian(cls, W_star: np.ndarray, H_I: MatrixLike, spec: QuantizerSpec,
                           reg: float = DEFAULT_REG, seed: int = 0) -> "RoundingProblem":
        """LDLQ problem: H_O = I"""
        m = np.asarray(W_star).shape[0]
        return cls(W_star, KronSketch(np.eye(m), as_array(H_I)), spec, reg, seed)

    def quantizer(self) -> GridQuantizer:
        return GridQuantizer.for_weights(self.spec, self.W_star, seed=self.seed)


@dataclass
class RoundingResult:
    W_hat: QuantizedWeights
    sweeps: int
    proxy_error: float
    converged: bool
    algorithm: str = ""
    meta: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        out = {
            'algorithm': self.algorithm,
            'sweeps': self.sweeps,
            'proxy_error': self.proxy_error,
            'converged': self.converged,
            'shape': list(self.W_hat.codes.shape),
        }
        out.update(self.meta)
        return out


def proxy_error(W_star: np.ndarray, W_hat: Union[np.ndarray, QuantizedWeights], sketch: KronSketch) -> float:
    """tr(D^T H_O D H_I) with D = W* - W_hat"""
    W_hat = W_hat.values if isinstance(W_hat, QuantizedWeights) else np.asarray(W_hat, dtype=np.float64)
    W_star = np.asarray(W_star, dtype=np.float64)
    if W_star.shape != W_hat.shape or W_star.shape != (sketch.m, sketch.n):
        raise ShapeMismatch(f"shapes {W_star.shape}, {W_hat.shape} and sketch {(sketch.m, sketch.n)} disagree")
    delta = W_star - W_hat
    return float(np.sum((sketch.H_O.data @ delta) * (delta @ sketch.H_I.data)))


def _feedback(delta: np.ndarray, LO_off: np.ndarray, LI_off: np.ndarray) -> np.ndarray:
    return LO_off.T @ delta @ LI_off + LO_off.T @ delta + delta @ LI_off


def _offsets(problem: RoundingProblem):
    gx, gy = problem.spec.block_shape
    if problem.m % gx or problem.n % gy:
        raise BadBlockSize(f"block shape {(gx, gy)} does not tile weights {problem.W_star.shape}")
    L_O = block_ldl(problem.sketch.H_O, gx, problem.reg).L
    L_I = block_ldl(problem.sketch.H_I, gy, problem.reg).L
    return L_O - np.eye(problem.m), L_I - np.eye(problem.n), L_O, L_I


def _fixed_point(W_star: np.ndarray, Q: GridQuantizer, LO_off: np.ndarray, LI_off: np.ndarray,
                 max_sweeps: int, rows: slice = slice(None)):
    """Synchronous sweeps from Q(W*) until a sweep leaves the codes unchanged"""
    codes = Q.codes(W_star, rows=rows)
    for sweep in range(1, max_sweeps + 1):
        delta = W_star - Q.values(codes, rows=rows)
        new_codes = Q.codes(W_star + _feedback(delta, LO_off, LI_off), rows=rows)
        if np.array_equal(new_codes, codes):
            return codes, sweep
        codes = new_codes
    raise NoConvergence(f"no fixed point after {max_sweeps} sweeps; the quantizer is probably not idempotent")


def _result(problem: RoundingProblem, Q: GridQuantizer, codes: np.ndarray, sweeps: int, algorithm: str,
            meta: Optional[Dict[str, Any]] = None) -> RoundingResult:
    W_hat = QuantizedWeights(values=Q.values(codes), codes=codes, scales=Q.scales.copy())
    return RoundingResult(
        W_hat=W_hat,
        sweeps=sweeps,
        proxy_error=proxy_error(problem.W_star, W_hat, problem.sketch),
        converged=True,
        algorithm=algorithm,
        meta=meta or {},
    )


def nearest_round(problem: RoundingProblem) -> RoundingResult:
    """Q(W*) without feedback"""
    Q = problem.quantizer()
    return _result(problem, Q, Q.codes(problem.W_star), 1, "nearest")


def _check_identity_output(problem: RoundingProblem, tol: float = 1e-10):
    H_O = problem.sketch.H_O.data
    d = np.diag(H_O)
    if d[0] <= 0 or np.max(np.abs(H_O - d[0] * np.eye(problem.m))) > tol * d[0]:
        raise ValueError("ldlq needs an output factor proportional to the identity")


def ldlq(problem: RoundingProblem) -> RoundingResult:
    """One-sided fixed point W = Q(W* + (W* - W)(L_I - I))"""
    _check_identity_output(problem)
    gy = problem.spec.block_shape[1]
    if problem.n % gy:
        raise BadBlockSize(f"block width {gy} does not divide {problem.n} columns")
    L_I = block_ldl(problem.sketch.H_I, gy, problem.reg).L
    Q = problem.quantizer()
    codes, sweeps = _fixed_point(problem.W_star, Q, np.zeros((problem.m, problem.m)), L_I - np.eye(problem.n),
                                 problem.m + problem.n)
    logger.debug(f"ldlq: {problem.m}x{problem.n}, sweeps={sweeps}")
    return _result(problem, Q, codes, sweeps, "ldlq")


def yaqa_round(problem: RoundingProblem) -> RoundingResult:
    """Two-sided Kronecker fixed point by synchronous sweeps"""
    LO_off, LI_off, L_O, L_I = _offsets(problem)
    Q = problem.quantizer()
    codes, sweeps = _fixed_point(problem.W_star, Q, LO_off, LI_off, problem.m + problem.n)
    bound = kron_snd_bound(support_of(L_O), support_of(L_I))
    logger.debug(f"yaqa_round: {problem.m}x{problem.n}, sweeps={sweeps}, snd bound={bound}")
    return _result(problem, Q, codes, sweeps, "yaqa", {'sweep_bound': bound})


def yaqa_round_wavefront(problem: RoundingProblem) -> RoundingResult:
    """Single pass over g_x x g_y blocks along anti-diagonals from the bottom-right.

    Blocks on one anti-diagonal only see feedback from finalized blocks, so the
    whole diagonal is quantized at once.
    """
    LO_off, LI_off, _, _ = _offsets(problem)
    gx, gy = problem.spec.block_shape
    m, n = problem.m, problem.n
    Q = problem.quantizer()
    W_star = problem.W_star

    block_rows = np.arange(m)[:, None] // gx
    block_cols = np.arange(n)[None, :] // gy
    level = block_rows + block_cols
    codes = np.zeros((m, n), dtype=np.int64)
    done = np.zeros((m, n), dtype=bool)
    diagonals = 0
    for d in range(int(level.max()), -1, -1):
        delta = np.where(done, W_star - Q.values(codes), 0.0)
        target = W_star + _feedback(delta, LO_off, LI_off)
        current = level == d
        codes[current] = Q.codes(target)[current]
        done |= current
        diagonals += 1
    logger.debug(f"yaqa_round_wavefront: {m}x{n}, blocks {gx}x{gy}, diagonals={diagonals}")
    return _result(problem, Q, codes, 1, "yaqa-wavefront", {'diagonals': diagonals})


def _oracle_feedback(H_tilde: Union[MatrixLike, KronSketch], spec: QuantizerSpec, reg: float):
    """Dense Hessian and L - I for the vectorized fixed point.

    A KronSketch is regularized factor by factor and its feedback is
    L_O (x) L_I - I from the block LDL of each factor, the same matrices
    yaqa_round uses. A dense matrix gets one scalar LDL of H + reg*tr(H)/mn*I.
    """
    if isinstance(H_tilde, KronSketch):
        gx, gy = spec.block_shape
        L = kron(block_ldl(H_tilde.H_O, gx, reg).L, block_ldl(H_tilde.H_I, gy, reg).L)
        return H_tilde.dense(), L - np.eye(L.shape[0])
    H = as_array(H_tilde)
    return H, ldl(H, reg).L - np.eye(H.shape[0])


def vec_ldlq_oracle(W_star: np.ndarray, H_tilde: Union[MatrixLike, KronSketch], spec: QuantizerSpec,
                    reg: float = DEFAULT_REG, seed: int = 0, order: str = "C",
                    size_cap: Optional[int] = None) -> RoundingResult:
    """Brute-force fixed point on the full mn x mn matrix:
    vec(W) = Q(vec(W*) + vec(W* - W)(L - I))"""
    W_star = np.asarray(W_star, dtype=np.float64)
    m, n = W_star.shape
    size_cap = ORACLE_SIZE_CAP if size_cap is None else size_cap
    if m * n > size_cap:
        raise TooLarge(f"oracle size {m * n} exceeds cap {size_cap}")
    if isinstance(H_tilde, KronSketch):
        if (H_tilde.m, H_tilde.n) != (m, n):
            raise ShapeMismatch(f"sketch {(H_tilde.m, H_tilde.n)} does not match {m}x{n} weights")
    elif as_array(H_tilde).shape != (m * n, m * n):
        raise ShapeMismatch(f"H_tilde of shape {as_array(H_tilde).shape} does not match {m}x{n} weights")
    H, N = _oracle_feedback(H_tilde, spec, reg)
    Q = GridQuantizer.for_weights(spec, W_star, seed=seed)
    w_star = vec(W_star, order)

    codes = Q.codes(W_star)
    for sweep in range(1, m * n + 2):
        delta = w_star - vec(Q.values(codes), order)
        new_codes = Q.codes(unvec(w_star + delta @ N, m, n, order))
        if np.array_equal(new_codes, codes):
            W_hat = QuantizedWeights(values=Q.values(codes), codes=codes, scales=Q.scales.copy())
            d = vec(W_star - W_hat.values, order)
            return RoundingResult(W_hat=W_hat, sweeps=sweep, proxy_error=float(d @ H @ d),
                                  converged=True, algorithm="vec-oracle")
        codes = new_codes
    raise NoConvergence(f"oracle did not settle within {m * n + 1} sweeps")


def guidedquant_round(problem: RoundingProblem, groups: int,
                      blocks: Optional[Sequence[MatrixLike]] = None) -> RoundingResult:
    """LDLQ run independently per output-channel group, each with its own n x n input Hessian"""
    m, n = problem.m, problem.n
    if groups < 1 or m % groups:
        raise BadBlockSize(f"{groups} groups do not divide {m} output channels")
    if blocks is None:
        blocks = [problem.sketch.H_I] * groups
    if len(blocks) != groups:
        raise ShapeMismatch(f"expected {groups} Hessian blocks, got {len(blocks)}")
    gy = problem.spec.block_shape[1]
    if n % gy:
        raise BadBlockSize(f"block width {gy} does not divide {n} columns")

    Q = problem.quantizer()
    size = m // groups
    codes = np.zeros((m, n), dtype=np.int64)
    sweeps: List[int] = []
    for j, block in enumerate(blocks):
        if as_array(block).shape != (n, n):
            raise ShapeMismatch(f"group {j} Hessian must be {n}x{n}")
        rows = slice(j * size, (j + 1) * size)
        L_I = block_ldl(block, gy, problem.reg).L
        codes[rows], s = _fixed_point(problem.W_star[rows], Q, np.zeros((size, size)), L_I - np.eye(n),
                                      size + n, rows=rows)
        sweeps.append(s)
    logger.debug(f"guidedquant_round: {m}x{n}, groups={groups}, sweeps={sweeps}")
    return _result(problem, Q, codes, max(sweeps), f"guidedquant({groups})", {'groups': groups})


ALGORITHMS = ("nearest", "ldlq", "yaqa", "yaqa-wavefront", "guidedquant")


def parse_algorithm(name: str):
    """'guidedquant(4)' -> ('guidedquant', 4); other names carry no group count"""
    if name.startswith("guidedquant(") and name.endswith(")"):
        return "guidedquant", int(name[len("guidedquant("):-1])
    if name not in ALGORITHMS or name == "guidedquant":
        raise ValueError(f"unknown algorithm {name!r}")
    return name, None


def round_with(name: str, problem: RoundingProblem, blocks: Optional[Sequence[MatrixLike]] = None) -> RoundingResult:
    algorithm, groups = parse_algorithm(name)
    if algorithm == "nearest":
        return nearest_round(problem)
    if algorithm == "ldlq":
        return ldlq(problem)
    if algorithm == "yaqa":
        return yaqa_round(problem)
    if algorithm == "yaqa-wavefront":
        return yaqa_round_wavefront(problem)
    return guidedquant_round(problem, groups, blocks)
