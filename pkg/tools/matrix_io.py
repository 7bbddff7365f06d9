"""
Matrix storage: the KRND binary container, debug CSV, problem bundles and
toy-model manifests
"""
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
import pandas as pd

from kronround.model import ToyModel
from kronround.snd import SupportPattern

logger = logging.getLogger(__name__)

MAGIC = b"KRND"
VERSION = 1
# magic, version u32, rows u64, cols u64
HEADER = struct.Struct("<4sIQQ")

WEIGHTS_FILE = "weights.krnd"
H_IN_FILE = "h_in.krnd"
H_OUT_FILE = "h_out.krnd"
FISHER_FILE = "fisher.krnd"
H1_FILE = "h1.krnd"
META_FILE = "meta.json"
MODEL_MANIFEST = "model.json"

PathLike = Union[str, Path]


@dataclass
class ProblemBundle:
    """Weights plus Kronecker factors; h_out defaults to the identity"""
    weights: np.ndarray
    h_in: np.ndarray
    h_out: Optional[np.ndarray] = None
    fisher: Optional[np.ndarray] = None
    h1: Optional[np.ndarray] = None
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.h_out is None:
            self.h_out = np.eye(self.weights.shape[0])


class MatrixStore:
    """Reads and writes matrices, bundles and models on disk"""

    def __init__(self):
        self.supported_extensions = {'.krnd', '.csv'}

    def write_matrix(self, path: PathLike, A: np.ndarray):
        A = np.asarray(A, dtype=np.float64)
        if A.ndim == 1:
            A = A[None, :]
        if A.ndim != 2:
            raise ValueError(f"only 2-D matrices can be stored, got shape {A.shape}")
        rows, cols = A.shape
        with open(path, 'wb') as f:
            f.write(HEADER.pack(MAGIC, VERSION, rows, cols))
            f.write(np.ascontiguousarray(A, dtype='<f8').tobytes())

    def read_matrix(self, path: PathLike) -> np.ndarray:
        with open(path, 'rb') as f:
            raw = f.read()
        if len(raw) < HEADER.size:
            raise ValueError(f"{path}: file too short for a KRND header")
        magic, version, rows, cols = HEADER.unpack_from(raw)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        if version != VERSION:
            raise ValueError(f"{path}: unsupported container version {version}")
        expected = rows * cols * 8
        payload = raw[HEADER.size:]
        if len(payload) != expected:
            raise ValueError(f"{path}: payload has {len(payload)} bytes, expected {expected} for {rows}x{cols}")
        return np.frombuffer(payload, dtype='<f8').reshape(rows, cols).astype(np.float64)

    def write_csv(self, path: PathLike, A: np.ndarray):
        pd.DataFrame(np.asarray(A, dtype=np.float64)).to_csv(path, index=False, header=False, float_format='%.17g')

    def read_csv(self, path: PathLike) -> np.ndarray:
        return pd.read_csv(path, header=None).to_numpy(dtype=np.float64)

    def read_pattern_csv(self, path: PathLike) -> SupportPattern:
        """0/1 CSV mask of L - I"""
        return SupportPattern(self.read_csv(path) != 0)

    def load(self, path: PathLike) -> np.ndarray:
        """Read either format, chosen by extension"""
        suffix = Path(path).suffix.lower()
        if suffix not in self.supported_extensions:
            raise ValueError(f"unsupported matrix file type: {suffix}")
        return self.read_csv(path) if suffix == '.csv' else self.read_matrix(path)

    def write_bundle(self, directory: PathLike, bundle: ProblemBundle):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.write_matrix(d / WEIGHTS_FILE, bundle.weights)
        self.write_matrix(d / H_IN_FILE, bundle.h_in)
        self.write_matrix(d / H_OUT_FILE, bundle.h_out)
        if bundle.fisher is not None:
            self.write_matrix(d / FISHER_FILE, bundle.fisher)
        if bundle.h1 is not None:
            self.write_matrix(d / H1_FILE, bundle.h1)
        with open(d / META_FILE, 'w') as f:
            json.dump(bundle.meta, f, indent=2, sort_keys=True)
        logger.info(f"Wrote problem bundle to {d}")

    def read_bundle(self, directory: PathLike) -> ProblemBundle:
        d = Path(directory)
        if not (d / WEIGHTS_FILE).exists() or not (d / H_IN_FILE).exists():
            raise FileNotFoundError(f"{d} is not a problem bundle (needs {WEIGHTS_FILE} and {H_IN_FILE})")

        def optional(name):
            return self.read_matrix(d / name) if (d / name).exists() else None

        meta = {}
        if (d / META_FILE).exists():
            with open(d / META_FILE, 'r') as f:
                meta = json.load(f)
        return ProblemBundle(
            weights=self.read_matrix(d / WEIGHTS_FILE),
            h_in=self.read_matrix(d / H_IN_FILE),
            h_out=optional(H_OUT_FILE),
            fisher=optional(FISHER_FILE),
            h1=optional(H1_FILE),
            meta=meta,
        )

    def save_model(self, directory: PathLike, model: ToyModel):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for i, W in enumerate(model.weights):
            self.write_matrix(d / f"layer_{i}.krnd", W)
        manifest = {'dims': model.dims, 'activation': 'tanh', 'mix': model.mix, 'seed': model.seed,
                    'layers': model.num_layers}
        with open(d / MODEL_MANIFEST, 'w') as f:
            json.dump(manifest, f, indent=2)

    def load_model(self, directory: PathLike) -> ToyModel:
        d = Path(directory)
        with open(d / MODEL_MANIFEST, 'r') as f:
            manifest = json.load(f)
        weights = tuple(self.read_matrix(d / f"layer_{i}.krnd") for i in range(manifest['layers']))
        return ToyModel(weights, mix=manifest.get('mix', 0.0), seed=manifest.get('seed'))

    def describe(self, path: PathLike) -> Dict[str, Any]:
        """Shape and summary statistics of a stored matrix"""
        if not Path(path).exists():
            return {'success': False, 'error': f'File {path} does not exist'}
        try:
            A = self.load(path)
            summary = pd.Series(A.reshape(-1)).describe().to_dict()
            return {
                'success': True,
                'file_path': str(path),
                'shape': list(A.shape),
                'symmetric': bool(A.shape[0] == A.shape[1] and np.array_equal(A, A.T)),
                'frobenius_norm': float(np.linalg.norm(A)),
                'summary': summary,
            }
        except Exception as e:
            logger.error(f"Error reading matrix file {path}: {str(e)}")
            return {'success': False, 'error': str(e)}
