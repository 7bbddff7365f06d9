"""
Sketch tool: build a Kronecker sketch for one layer of a configured toy model
and save it as a problem bundle
"""
import logging
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np

from experiment_config import ExperimentConfig
from kronround.linalg import kron
from kronround.model import layer_input_hessian, make_dataset, make_toy_model, true_layer_hessian
from kronround.sketch import build_sketch, sketch_quality
from kronround.transform import incoherence_process
from tools.matrix_io import MatrixStore, ProblemBundle

logger = logging.getLogger(__name__)


class SketchTool:
    """Builds sketches and writes bundles the rounding tool can consume"""

    def __init__(self, store: Optional[MatrixStore] = None):
        self.store = store or MatrixStore()

    def build(self, config: ExperimentConfig, method: Optional[str] = None, iters: Optional[int] = None,
              seed: int = 0, out_dir: Optional[str] = None, ip: bool = False) -> Dict[str, Any]:
        method = method or config.sketch.method
        iters = config.sketch.iters if iters is None else iters
        layer = config.layer
        model = make_toy_model(config.model.dims, seed=config.model.seed, weight_scale=config.model.weight_scale,
                               mix=config.model.mix)
        data = make_dataset(config.model.dims[0], config.data.count, config.data.seq_len, config.data.correlation,
                            seed=config.data.seed)
        logger.info(f"Building {method} sketch for layer {layer} of {model.dims}")

        fisher = true_layer_hessian(model, layer, data, config.sketch.label_mode, config.sketch.samples, seed)
        sketch = build_sketch(method, model, layer, data, iters, seed, config.sketch.label_mode,
                              config.sketch.samples, fisher=fisher)
        quality = sketch_quality(fisher, sketch)
        W = model.weights[layer]
        H_1 = layer_input_hessian(model, layer, data)
        H = fisher.H.data

        meta = {
            'sketch': _json_safe(sketch.meta),
            'quality': quality.to_dict(),
            'model': {'dims': model.dims, 'seed': config.model.seed, 'mix': model.mix},
            'layer': layer,
            'fisher_provenance': fisher.provenance,
        }
        if ip:
            W, sketch, transforms = incoherence_process(W, sketch, (seed, seed + 1))
            UV = kron(transforms.U.matrix(), transforms.V.matrix())
            H = UV @ H @ UV.T
            H_1 = transforms.V.conjugate(H_1).data
            meta['ip'] = transforms.to_dict()

        files = []
        if out_dir:
            bundle = ProblemBundle(weights=W, h_in=sketch.H_I.data, h_out=sketch.H_O.data, fisher=H, h1=H_1,
                                   meta=meta)
            self.store.write_bundle(out_dir, bundle)
            self.store.save_model(Path(out_dir) / 'model', model)
            files = [str(out_dir)]
        return {'success': True, 'method': method, 'quality': quality.to_dict(), 'meta': meta, 'files': files}

    def process_request(self, operation: str, **kwargs) -> Dict[str, Any]:
        try:
            if operation == 'build':
                return self.build(**kwargs)
            else:
                return {'success': False, 'error': f'Unsupported operation: {operation}'}
        except Exception as e:
            logger.error(f"Error in sketch operation {operation}: {str(e)}")
            return {'success': False, 'error': str(e), 'error_type': type(e).__name__}


def _json_safe(meta: Dict[str, Any]) -> Dict[str, Any]:
    out = {}
    for key, value in meta.items():
        if isinstance(value, np.generic):
            value = value.item()
        out[key] = value
    return out
