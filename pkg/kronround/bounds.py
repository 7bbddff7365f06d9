"""
Numeric evaluation of the rounding error bounds.

All unsubscripted norms are Frobenius norms; every report records this in
its `norm` field.
"""
import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, NamedTuple, Optional, Union

import numpy as np

from kronround.errors import ShapeMismatch, ZeroMatrix
from kronround.linalg import DEFAULT_REG, MatrixLike, as_array, block_ldl, frob_cosine, numerical_rank, regularize, trace_sqrt, vec
from kronround.model import FisherEstimate
from kronround.quantize import QuantizerSpec, sigma_sq_bound
from kronround.sketch import KronSketch
from kronround.transform import incoherence_mu

logger = logging.getLogger(__name__)

NORM = "frobenius"

# Relative slack when checking that the incoherence form dominates tr(D)
DOMINANCE_TOL = 1e-9


class ProxyBounds(NamedTuple):
    trace_d: float
    mu: float


class GapCheck(NamedTuple):
    bound: float
    measured: float
    holds: bool


class Eq8Ratio(NamedTuple):
    ratio: float
    rank_threshold: float
    k_O: int
    rank_O: int
    favorable: bool


@dataclass
class BoundReport:
    proxy_error: float
    proxy_bound_trD: float
    proxy_bound_mu: float
    true_error: float
    theorem1_bound: float
    cosine: float
    mu_O: float
    mu_I: float
    sigma_sq: float
    gx: int = 1
    gy: int = 1
    ratio_eq8: Optional[float] = None
    rank_condition_k: Optional[int] = None
    mu_dominates: bool = True
    norm: str = NORM

    @property
    def slack(self) -> float:
        return self.theorem1_bound - self.true_error

    def to_row(self) -> Dict[str, Any]:
        row = asdict(self)
        row['slack'] = self.slack
        return row


def _sigma_sq(spec: Union[QuantizerSpec, float], scales: Optional[np.ndarray]) -> float:
    if isinstance(spec, QuantizerSpec):
        return sigma_sq_bound(spec, scales)
    return float(spec)


def _block_shape(spec: Union[QuantizerSpec, float]):
    return spec.block_shape if isinstance(spec, QuantizerSpec) else (1, 1)


def proxy_bounds(sketch: KronSketch, spec: Union[QuantizerSpec, float], mu_O: Optional[float] = None,
                 mu_I: Optional[float] = None, reg: float = DEFAULT_REG,
                 scales: Optional[np.ndarray] = None) -> ProxyBounds:
    """tr(D_I) tr(D_O) g_x g_y s2 and its incoherence form
    (g_x g_y mu_I^2 mu_O^2 / mn) tr(H_I^1/2)^2 tr(H_O^1/2)^2 s2, on the regularized factors"""
    gx, gy = _block_shape(spec)
    s2 = _sigma_sq(spec, scales)
    m, n = sketch.m, sketch.n
    H_O = regularize(sketch.H_O, reg)
    H_I = regularize(sketch.H_I, reg)
    tr_d = block_ldl(H_O, gx, 0.0).trace_d * block_ldl(H_I, gy, 0.0).trace_d
    mu_O = incoherence_mu(H_O) if mu_O is None else mu_O
    mu_I = incoherence_mu(H_I) if mu_I is None else mu_I
    mu_form = gx * gy * mu_I ** 2 * mu_O ** 2 / (m * n) * trace_sqrt(H_I) ** 2 * trace_sqrt(H_O) ** 2 * s2
    return ProxyBounds(trace_d=float(gx * gy * tr_d * s2), mu=float(mu_form))


def _dense(H: Union[FisherEstimate, MatrixLike]) -> np.ndarray:
    return H.H.data if isinstance(H, FisherEstimate) else as_array(H)


def cosine_gap_bound(H: Union[FisherEstimate, MatrixLike], sketch: KronSketch, delta: np.ndarray) -> GapCheck:
    """|x^T (A/|A|) x - x^T (B/|B|) x| <= |x|^2 sqrt(2 - 2c) with x = vec(delta), B = H_O (x) H_I"""
    A = _dense(H)
    B = sketch.dense()
    x = vec(delta)
    if A.shape != B.shape or x.size != A.shape[0]:
        raise ShapeMismatch(f"H {A.shape}, sketch {B.shape} and delta {np.shape(delta)} disagree")
    na, nb = np.linalg.norm(A), np.linalg.norm(B)
    if na == 0 or nb == 0:
        raise ZeroMatrix("cosine gap of a zero matrix")
    c = frob_cosine(A, B)
    x_sq = float(x @ x)
    bound = x_sq * np.sqrt(max(2.0 - 2.0 * c, 0.0))
    measured = abs(x @ A @ x / na - x @ B @ x / nb)
    return GapCheck(bound=float(bound), measured=float(measured), holds=bool(measured <= bound + 1e-12 * max(x_sq, 1.0)))


def theorem1_bound(H: Union[FisherEstimate, MatrixLike], sketch: KronSketch, spec: Union[QuantizerSpec, float],
                   delta: np.ndarray, reg: float = DEFAULT_REG, mu_O: Optional[float] = None,
                   mu_I: Optional[float] = None, scales: Optional[np.ndarray] = None,
                   H_1: Optional[MatrixLike] = None) -> BoundReport:
    """End-to-end bound
    |H| (|delta|^2 sqrt(2 - 2c) + mu_I^2 mu_O^2 / (mn |H_I| |H_O|) tr(H_I^1/2)^2 tr(H_O^1/2)^2 s2)
    together with the measured vec(delta) H vec(delta)^T"""
    A = _dense(H)
    delta = np.asarray(delta, dtype=np.float64)
    m, n = sketch.m, sketch.n
    if delta.shape != (m, n) or A.shape != (m * n, m * n):
        raise ShapeMismatch(f"delta {delta.shape} and H {A.shape} do not match a {m}x{n} sketch")
    gx, gy = _block_shape(spec)
    s2 = _sigma_sq(spec, scales)
    H_O = regularize(sketch.H_O, reg)
    H_I = regularize(sketch.H_I, reg)
    mu_O = incoherence_mu(H_O) if mu_O is None else mu_O
    mu_I = incoherence_mu(H_I) if mu_I is None else mu_I
    bounds = proxy_bounds(sketch, spec, mu_O, mu_I, reg, scales)

    c = frob_cosine(A, sketch.dense())
    h_norm = float(np.linalg.norm(A))
    mu_term = bounds.mu / (np.linalg.norm(H_I) * np.linalg.norm(H_O))
    gap_term = float(np.sum(delta ** 2)) * np.sqrt(max(2.0 - 2.0 * c, 0.0))
    x = vec(delta)
    dominates = bounds.trace_d <= bounds.mu * (1.0 + DOMINANCE_TOL)
    if not dominates:
        logger.debug(f"theorem1_bound: tr(D) bound {bounds.trace_d:.6g} exceeds incoherence form {bounds.mu:.6g} at block {(gx, gy)}")

    report = BoundReport(
        proxy_error=float(np.sum((sketch.H_O.data @ delta) * (delta @ sketch.H_I.data))),
        proxy_bound_trD=bounds.trace_d,
        proxy_bound_mu=bounds.mu,
        true_error=float(x @ A @ x),
        theorem1_bound=float(h_norm * (gap_term + mu_term)),
        cosine=c,
        mu_O=float(mu_O),
        mu_I=float(mu_I),
        sigma_sq=s2,
        gx=gx,
        gy=gy,
        mu_dominates=bool(dominates),
    )
    if H_1 is not None:
        eq8 = eq8_ratio(sketch, H_1)
        report.ratio_eq8 = eq8.ratio
        report.rank_condition_k = eq8.k_O
    return report


def eq8_ratio(sketch: KronSketch, H_1: MatrixLike, mu_O: Optional[float] = None, mu_I: Optional[float] = None,
              mu_1: Optional[float] = None) -> Eq8Ratio:
    """Ratio of the Kronecker-sketch bound to the LDLQ (I, H_1) bound, and the H_O rank below which it is <= 1.

    ratio = mu_O^2 mu_I^2 tr(H_I^1/2)^2 |H_1| tr(H_O^1/2)^2
            / (m sqrt(m) mu_1^2 tr(H_1^1/2)^2 |H_I| |H_O|)
    The rank threshold replaces tr(H_O^1/2)^2 by its Cauchy-Schwarz bound k_O tr(H_O).
    """
    H_1 = as_array(H_1)
    m, n = sketch.m, sketch.n
    if H_1.shape != (n, n):
        raise ShapeMismatch(f"H_1 of shape {H_1.shape} does not match input size {n}")
    H_O, H_I = sketch.H_O.data, sketch.H_I.data
    mu_O = incoherence_mu(H_O) if mu_O is None else mu_O
    mu_I = incoherence_mu(H_I) if mu_I is None else mu_I
    mu_1 = incoherence_mu(H_1) if mu_1 is None else mu_1

    common = mu_O ** 2 * mu_I ** 2 * trace_sqrt(H_I) ** 2 * np.linalg.norm(H_1)
    denom = m * np.sqrt(m) * mu_1 ** 2 * trace_sqrt(H_1) ** 2 * np.linalg.norm(H_I) * np.linalg.norm(H_O)
    if denom == 0:
        raise ZeroMatrix("ratio denominator vanished")
    ratio = common * trace_sqrt(H_O) ** 2 / denom
    threshold = denom / (common * np.trace(H_O))
    return Eq8Ratio(
        ratio=float(ratio),
        rank_threshold=float(threshold),
        k_O=int(np.floor(threshold)),
        rank_O=numerical_rank(H_O),
        favorable=bool(ratio <= 1.0),
    )
