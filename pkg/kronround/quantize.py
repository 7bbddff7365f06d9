"""
Scalar grid quantizers used inside the rounding iterations
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

import numpy as np

from kronround.errors import ShapeMismatch

logger = logging.getLogger(__name__)

NEAREST = "nearest"
STOCHASTIC = "stochastic"

# Scaled inputs this close to an integer are treated as lying on the grid
GRID_SNAP_TOL = 1e-9


@dataclass(frozen=True)
class QuantizerSpec:
    """Signed integer grid with a fixed step or groupwise absmax scales"""
    bits: int = 4
    mode: str = NEAREST
    step: Optional[float] = 1.0
    group_len: Optional[int] = None
    block_shape: Tuple[int, int] = (1, 1)

    def __post_init__(self):
        if self.bits < 1:
            raise ValueError(f"bits must be >= 1, got {self.bits}")
        if self.mode not in (NEAREST, STOCHASTIC):
            raise ValueError(f"unknown rounding mode {self.mode!r}")
        if self.group_len is None:
            if self.step is None or not self.step > 0:
                raise ValueError(f"fixed-step quantizer needs step > 0, got {self.step}")
        else:
            if self.group_len < 1:
                raise ValueError(f"group_len must be >= 1, got {self.group_len}")
            if self.bits < 2:
                raise ValueError("groupwise absmax scaling needs bits >= 2")
        gx, gy = self.block_shape
        if gx < 1 or gy < 1:
            raise ValueError(f"block shape must be positive, got {self.block_shape}")
        object.__setattr__(self, 'block_shape', (int(gx), int(gy)))

    @property
    def groupwise(self) -> bool:
        return self.group_len is not None

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bits - 1))

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1

    @classmethod
    def from_dict(cls, config: Dict[str, Any]) -> "QuantizerSpec":
        """Build from the JSON form {"bits":4,"mode":"nearest","scale":{"groupwise":32},"block":[1,1]}"""
        scale = config.get('scale', {'step': 1.0})
        group_len = scale.get('groupwise')
        step = None if group_len is not None else float(scale.get('step', 1.0))
        return cls(
            bits=int(config.get('bits', 4)),
            mode=config.get('mode', NEAREST),
            step=step,
            group_len=group_len,
            block_shape=tuple(config.get('block', (1, 1))),
        )

    def to_dict(self) -> Dict[str, Any]:
        scale = {'groupwise': self.group_len} if self.groupwise else {'step': self.step}
        return {'bits': self.bits, 'mode': self.mode, 'scale': scale, 'block': list(self.block_shape)}


@dataclass
class QuantizedWeights:
    """Dequantized values together with their grid codes and scales"""
    values: np.ndarray
    codes: np.ndarray
    scales: np.ndarray = field(default_factory=lambda: np.ones(1))


def groupwise_scales(W: np.ndarray, group_len: int, bits: int = 4) -> np.ndarray:
    """Absmax / qmax for each contiguous length-group_len row segment"""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise ShapeMismatch(f"groupwise scales need a 2-D matrix, got shape {W.shape}")
    m, n = W.shape
    if group_len < 1 or n % group_len:
        raise ShapeMismatch(f"group length {group_len} does not divide {n} columns")
    qmax = 2 ** (bits - 1) - 1
    absmax = np.abs(W).reshape(m, n // group_len, group_len).max(axis=2)
    # all-zero groups get unit scale so their codes are zero
    return np.where(absmax > 0, absmax / qmax, 1.0)


def expand_scales(scales: np.ndarray, group_len: int) -> np.ndarray:
    """Per-group scales -> per-entry step matrix"""
    return np.repeat(scales, group_len, axis=1)


def dequantize(codes: np.ndarray, scales: np.ndarray, group_len: Optional[int] = None) -> np.ndarray:
    if group_len is None:
        return codes * float(np.asarray(scales).reshape(-1)[0])
    return codes * expand_scales(scales, group_len)


def sigma_sq_bound(spec: QuantizerSpec, scales: Optional[np.ndarray] = None) -> float:
    """Worst-case E[(Q(x) - x)^2] for in-range inputs: step^2 / 4"""
    if not spec.groupwise:
        return spec.step ** 2 / 4.0
    if scales is None:
        raise ValueError("groupwise quantizers need their scales to bound the error")
    return float(np.max(scales)) ** 2 / 4.0


class GridQuantizer:
    """The fixed map Q applied during rounding.

    Scales are frozen from the original weights; stochastic rounding draws one
    uniform per entry from a Philox counter stream keyed by the seed, so Q is a
    deterministic function of (seed, row, col, value).
    """

    def __init__(self, spec: QuantizerSpec, shape: Tuple[int, int], scales: Optional[np.ndarray] = None, seed: int = 0):
        self.spec = spec
        self.shape = tuple(shape)
        self.seed = seed
        m, n = self.shape
        if spec.groupwise:
            if scales is None:
                raise ValueError("groupwise quantizer needs frozen scales")
            self.scales = np.asarray(scales, dtype=np.float64)
            self.steps = expand_scales(self.scales, spec.group_len)
        else:
            self.scales = np.array([spec.step], dtype=np.float64)
            self.steps = np.full((m, n), spec.step)
        if self.steps.shape != self.shape:
            raise ShapeMismatch(f"scales of shape {self.steps.shape} do not cover weights of shape {self.shape}")
        self.uniforms = None
        if spec.mode == STOCHASTIC:
            # counter position row*n + col holds the uniform of entry (row, col)
            self.uniforms = np.random.Generator(np.random.Philox(key=seed)).random((m, n))

    @classmethod
    def for_weights(cls, spec: QuantizerSpec, W: np.ndarray, seed: int = 0) -> "GridQuantizer":
        W = np.asarray(W, dtype=np.float64)
        scales = groupwise_scales(W, spec.group_len, spec.bits) if spec.groupwise else None
        return cls(spec, W.shape, scales=scales, seed=seed)

    def codes(self, X: np.ndarray, rows: slice = slice(None), cols: slice = slice(None)) -> np.ndarray:
        """Grid codes of X, where X sits at [rows, cols] of the full weight matrix"""
        steps = self.steps[rows, cols]
        t = np.asarray(X, dtype=np.float64) / steps
        nearest = np.rint(t)
        if self.spec.mode == NEAREST:
            q = nearest
        else:
            lower = np.floor(t)
            q = lower + (self.uniforms[rows, cols] < (t - lower))
            q = np.where(np.abs(t - nearest) <= GRID_SNAP_TOL, nearest, q)
        return np.clip(q, self.spec.qmin, self.spec.qmax).astype(np.int64)

    def values(self, codes: np.ndarray, rows: slice = slice(None), cols: slice = slice(None)) -> np.ndarray:
        return codes * self.steps[rows, cols]

    def __call__(self, X: np.ndarray) -> QuantizedWeights:
        codes = self.codes(X)
        return QuantizedWeights(values=self.values(codes), codes=codes, scales=self.scales.copy())


def _as_matrix(x: np.ndarray) -> Tuple[np.ndarray, Tuple[int, ...]]:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        return arr, arr.shape
    return arr.reshape(1, -1), arr.shape


def quantize_nearest(x: np.ndarray, spec: QuantizerSpec) -> QuantizedWeights:
    """Round each entry to the closest grid point (ties half-to-even, saturating)"""
    if spec.mode != NEAREST:
        raise ValueError(f"quantize_nearest needs mode 'nearest', got {spec.mode!r}")
    X, shape = _as_matrix(x)
    result = GridQuantizer.for_weights(spec, X)(X)
    return QuantizedWeights(result.values.reshape(shape), result.codes.reshape(shape), result.scales)


def quantize_stochastic(x: np.ndarray, spec: QuantizerSpec, rng_seed: int = 0) -> QuantizedWeights:
    """Unbiased stochastic rounding between the two neighbouring grid points"""
    if spec.mode != STOCHASTIC:
        raise ValueError(f"quantize_stochastic needs mode 'stochastic', got {spec.mode!r}")
    X, shape = _as_matrix(x)
    result = GridQuantizer.for_weights(spec, X, seed=rng_seed)(X)
    return QuantizedWeights(result.values.reshape(shape), result.codes.reshape(shape), result.scales)
