"""
Bound checking: repeated (stochastic) rounding of a bundle, one BoundReport
row per trial
"""
import logging
from typing import Any, Dict, Optional

import numpy as np
import pandas as pd

import settings
from kronround.bounds import NORM, theorem1_bound
from kronround.quantize import QuantizerSpec
from kronround.rounding import RoundingProblem, round_with
from kronround.sketch import KronSketch
from tools.matrix_io import MatrixStore

logger = logging.getLogger(__name__)

# Expectation bounds are checked against trial means with this multiplier
MEAN_SLACK = 1.05

DEFAULT_QUANTIZER = {'bits': 8, 'mode': 'stochastic', 'scale': {'step': 1.0}, 'block': [1, 1]}


class BoundTool:
    """Evaluates the proxy and end-to-end bounds on a problem bundle"""

    def __init__(self, store: Optional[MatrixStore] = None, reg: Optional[float] = None):
        self.store = store or MatrixStore()
        self.reg = settings.default_reg if reg is None else reg

    def check(self, bundle_dir: str, quantizer: Optional[Dict[str, Any]] = None, trials: int = 50,
              seed: int = 0, algorithm: str = 'yaqa', reg: Optional[float] = None,
              out_csv: Optional[str] = None) -> Dict[str, Any]:
        bundle = self.store.read_bundle(bundle_dir)
        spec = QuantizerSpec.from_dict(quantizer or DEFAULT_QUANTIZER)
        reg = self.reg if reg is None else reg
        sketch = KronSketch(bundle.h_out, bundle.h_in)
        H = bundle.fisher if bundle.fisher is not None else sketch.dense()
        logger.info(f"Bound check on {bundle_dir}: {trials} trials of {algorithm}")

        rows = []
        for t in range(trials):
            problem = RoundingProblem(bundle.weights, sketch, spec, reg, seed + t)
            result = round_with(algorithm, problem)
            report = theorem1_bound(H, sketch, spec, bundle.weights - result.W_hat.values, reg=reg,
                                    scales=result.W_hat.scales, H_1=bundle.h1)
            row = report.to_row()
            row['trial'] = t
            row['seed'] = seed + t
            rows.append(row)
        frame = pd.DataFrame(rows)
        if out_csv:
            frame.to_csv(out_csv, index=False, float_format='%.17g')

        mean_proxy = float(frame['proxy_error'].mean())
        mean_true = float(frame['true_error'].mean())
        mean_rhs = float(frame['theorem1_bound'].mean())
        trd = float(frame['proxy_bound_trD'].iloc[0])
        return {
            'success': True,
            'trials': trials,
            'norm': NORM,
            'mean_proxy_error': mean_proxy,
            'proxy_bound_trD': trd,
            'proxy_bound_mu': float(frame['proxy_bound_mu'].iloc[0]),
            'proxy_bound_holds': bool(mean_proxy <= trd * MEAN_SLACK),
            'mean_true_error': mean_true,
            'mean_theorem1_bound': mean_rhs,
            'end_to_end_bound_holds': bool(mean_true <= mean_rhs * MEAN_SLACK),
            'mu_dominates': bool(frame['mu_dominates'].all()),
            'rows': rows if not out_csv else [],
            'files': [out_csv] if out_csv else [],
        }

    def process_request(self, operation: str, **kwargs) -> Dict[str, Any]:
        try:
            if operation == 'check':
                return self.check(**kwargs)
            else:
                return {'success': False, 'error': f'Unsupported operation: {operation}'}
        except Exception as e:
            logger.error(f"Error in bound operation {operation}: {str(e)}")
            return {'success': False, 'error': str(e), 'error_type': type(e).__name__}
