"""
Rounding tool: quantize a problem bundle with one of the rounding algorithms
"""
import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np

import settings
from kronround.quantize import QuantizerSpec
from kronround.rounding import RoundingProblem, RoundingResult, proxy_error, round_with, vec_ldlq_oracle
from kronround.sketch import KronSketch
from kronround.transform import incoherence_process, restore_weights
from tools.matrix_io import MatrixStore, ProblemBundle

logger = logging.getLogger(__name__)

DEFAULT_QUANTIZER = {'bits': 4, 'mode': 'nearest', 'scale': {'step': 1.0}, 'block': [1, 1]}

CODES_FILE = "codes.krnd"
WEIGHTS_HAT_FILE = "weights_hat.krnd"
RESULT_FILE = "result.json"


class RoundingTool:
    """Rounds bundles from disk and writes codes plus a JSON result"""

    def __init__(self, store: Optional[MatrixStore] = None, reg: Optional[float] = None,
                 oracle_size_cap: Optional[int] = None):
        self.store = store or MatrixStore()
        self.reg = settings.default_reg if reg is None else reg
        self.oracle_size_cap = settings.oracle_size_cap if oracle_size_cap is None else oracle_size_cap

    def _problem(self, bundle: ProblemBundle, quantizer: Optional[Dict[str, Any]], reg: Optional[float],
                 seed: int) -> RoundingProblem:
        spec = QuantizerSpec.from_dict(quantizer or DEFAULT_QUANTIZER)
        sketch = KronSketch(bundle.h_out, bundle.h_in, dict(bundle.meta.get('sketch', {})))
        return RoundingProblem(bundle.weights, sketch, spec, self.reg if reg is None else reg, seed)

    def round_problem(self, problem: RoundingProblem, algorithm: str, ip: bool = False,
                      ip_seeds: Tuple[int, int] = (0, 1)) -> Tuple[RoundingResult, np.ndarray, Dict[str, Any]]:
        """Round, optionally in the incoherence-processed space; returns weights in the original space"""
        if not ip:
            result = round_with(algorithm, problem)
            return result, result.W_hat.values, {}
        W_ip, sketch_ip, transforms = incoherence_process(problem.W_star, problem.sketch, ip_seeds)
        processed = RoundingProblem(W_ip, sketch_ip, problem.spec, problem.reg, problem.seed)
        result = round_with(algorithm, processed)
        W_hat = restore_weights(result.W_hat.values, transforms)
        extra = transforms.to_dict()
        extra['proxy_error_original'] = proxy_error(problem.W_star, W_hat, problem.sketch)
        return result, W_hat, extra

    def round_bundle(self, bundle_dir: str, algorithm: str = 'yaqa', quantizer: Optional[Dict[str, Any]] = None,
                     reg: Optional[float] = None, seed: int = 0, ip: bool = False,
                     ip_seeds: Tuple[int, int] = (0, 1), out_dir: Optional[str] = None) -> Dict[str, Any]:
        bundle = self.store.read_bundle(bundle_dir)
        problem = self._problem(bundle, quantizer, reg, seed)
        logger.info(f"Rounding {bundle_dir} ({problem.m}x{problem.n}) with {algorithm}")
        result, W_hat, extra = self.round_problem(problem, algorithm, ip, tuple(ip_seeds))

        summary = result.to_dict()
        summary.update(extra)
        summary.update({'seed': seed, 'quantizer': problem.spec.to_dict(), 'ip': ip})
        files = []
        if out_dir:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            self.store.write_matrix(out / CODES_FILE, result.W_hat.codes.astype(np.float64))
            self.store.write_matrix(out / WEIGHTS_HAT_FILE, W_hat)
            with open(out / RESULT_FILE, 'w') as f:
                json.dump(summary, f, indent=2, sort_keys=True)
            files = [str(out / CODES_FILE), str(out / WEIGHTS_HAT_FILE), str(out / RESULT_FILE)]
        return {'success': True, 'result': summary, 'files': files}

    def oracle_bundle(self, bundle_dir: str, quantizer: Optional[Dict[str, Any]] = None, reg: Optional[float] = None,
                      seed: int = 0, hessian: str = 'auto') -> Dict[str, Any]:
        """Brute-force vectorized rounding of a bundle.

        hessian='fisher' uses the dense Fisher, 'sketch' uses H_O (x) H_I with
        each factor regularized as yaqa_round does, 'auto' prefers the Fisher.
        """
        bundle = self.store.read_bundle(bundle_dir)
        spec = QuantizerSpec.from_dict(quantizer or DEFAULT_QUANTIZER)
        if hessian not in ('auto', 'fisher', 'sketch'):
            raise ValueError(f"unknown hessian source {hessian!r}")
        if hessian == 'fisher' and bundle.fisher is None:
            raise FileNotFoundError(f"{bundle_dir} has no dense Fisher")
        use_fisher = bundle.fisher is not None and hessian != 'sketch'
        H = bundle.fisher if use_fisher else KronSketch(bundle.h_out, bundle.h_in)
        result = vec_ldlq_oracle(bundle.weights, H, spec, self.reg if reg is None else reg, seed,
                                 size_cap=self.oracle_size_cap)
        summary = result.to_dict()
        summary['hessian'] = 'fisher' if use_fisher else 'sketch'
        return {'success': True, 'result': summary, 'codes': result.W_hat.codes.tolist()}

    def process_request(self, operation: str, **kwargs) -> Dict[str, Any]:
        try:
            if operation == 'round':
                return self.round_bundle(**kwargs)
            elif operation == 'oracle':
                return self.oracle_bundle(**kwargs)
            else:
                return {'success': False, 'error': f'Unsupported operation: {operation}'}
        except Exception as e:
            logger.error(f"Error in rounding operation {operation}: {str(e)}")
            return {'success': False, 'error': str(e), 'error_type': type(e).__name__}
