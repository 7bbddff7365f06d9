"""
Quantization server: tool registry over the rounding, sketching, bound,
experiment and verification tools
"""
import asyncio
import logging
from typing import Any, Dict, Optional

from pydantic import ValidationError

import settings
from experiment_config import ExperimentConfigLoader, validation_details
from tools.bound_tool import BoundTool
from tools.experiment_tool import ExperimentTool
from tools.matrix_io import MatrixStore
from tools.rounding_tool import RoundingTool
from tools.sketch_tool import SketchTool
from tools.verify_tool import VerifyTool

logger = logging.getLogger(__name__)


def _validation_error(e: ValidationError) -> Dict[str, Any]:
    details = validation_details(e)
    logger.error(f"Invalid configuration: {'; '.join(details)}")
    return {'success': False, 'error': 'invalid configuration', 'error_type': 'validation', 'details': details}


class QuantServer:
    """Dispatches tool calls by name; every handler returns a result dictionary"""

    def __init__(self, reg: Optional[float] = None, threads: Optional[int] = None):
        self.reg = settings.default_reg if reg is None else reg
        self.threads = settings.default_threads if threads is None else threads
        self.store = MatrixStore()
        self.rounding_tool = RoundingTool(self.store, reg=self.reg, oracle_size_cap=settings.oracle_size_cap)
        self.sketch_tool = SketchTool(self.store)
        self.bound_tool = BoundTool(self.store, reg=self.reg)
        self.experiment_tool = ExperimentTool()
        self.verify_tool = VerifyTool()
        self._init_tools()

    def _init_tools(self):
        self.tools = {
            'round': {
                'name': 'round',
                'description': 'Round the weights of a problem bundle with nearest, ldlq, yaqa, yaqa-wavefront or guidedquant(g)',
                'handler': self._handle_round,
                'parameters': {
                    'bundle_dir': {'type': 'string', 'required': True},
                    'algorithm': {'type': 'string', 'default': 'yaqa'},
                    'quantizer': {'type': 'object', 'required': False, 'description': '{"bits":4,"mode":"nearest","scale":{"step":1.0},"block":[1,1]}'},
                    'seed': {'type': 'integer', 'default': 0},
                    'ip': {'type': 'boolean', 'default': False, 'description': 'Round in the incoherence-processed space'},
                    'out_dir': {'type': 'string', 'required': False},
                }
            },
            'oracle': {
                'name': 'oracle',
                'description': 'Brute-force vectorized rounding on the dense Hessian of a small bundle',
                'handler': self._handle_oracle,
                'parameters': {
                    'bundle_dir': {'type': 'string', 'required': True},
                    'quantizer': {'type': 'object', 'required': False},
                    'seed': {'type': 'integer', 'default': 0},
                    'hessian': {'type': 'string', 'default': 'auto', 'choices': ['auto', 'fisher', 'sketch']},
                }
            },
            'sketch': {
                'name': 'sketch',
                'description': 'Build a Kronecker Hessian sketch for a toy-model layer and write it as a bundle',
                'handler': self._handle_sketch,
                'parameters': {
                    'config_file': {'type': 'string', 'required': True},
                    'method': {'type': 'string', 'required': False, 'choices': ['ldlq', 'a', 'b', 'powerfull', 'vanloan']},
                    'iters': {'type': 'integer', 'required': False},
                    'seed': {'type': 'integer', 'default': 0},
                    'ip': {'type': 'boolean', 'default': False},
                    'out_dir': {'type': 'string', 'required': False},
                }
            },
            'bound_check': {
                'name': 'bound_check',
                'description': 'Measure proxy and end-to-end errors against their bounds over repeated stochastic rounding',
                'handler': self._handle_bound_check,
                'parameters': {
                    'bundle_dir': {'type': 'string', 'required': True},
                    'quantizer': {'type': 'object', 'required': False},
                    'trials': {'type': 'integer', 'default': 50},
                    'seed': {'type': 'integer', 'default': 0},
                    'algorithm': {'type': 'string', 'default': 'yaqa'},
                    'out_csv': {'type': 'string', 'required': False},
                }
            },
            'run_experiment': {
                'name': 'run_experiment',
                'description': 'Run an experiment config and write results.csv, timings.csv and summary.json',
                'handler': self._handle_run_experiment,
                'parameters': {
                    'config_file': {'type': 'string', 'required': True},
                    'overrides': {'type': 'object', 'required': False},
                    'out_dir': {'type': 'string', 'required': False},
                    'threads': {'type': 'integer', 'required': False},
                }
            },
            'verify': {
                'name': 'verify',
                'description': 'Run property suites and report failures with reproduction seeds',
                'handler': self._handle_verify,
                'parameters': {
                    'suite': {'type': 'string', 'default': 'all', 'choices': ['snd', 'oracle', 'bounds', 'sketch', 'transform', 'model', 'e2e', 'all']},
                    'seed': {'type': 'integer', 'default': 0},
                }
            },
            'matrix_info': {
                'name': 'matrix_info',
                'description': 'Describe a .krnd or .csv matrix file',
                'handler': self._handle_matrix_info,
                'parameters': {
                    'path': {'type': 'string', 'required': True},
                }
            },
        }

    def _load_config(self, config_file: str, overrides: Optional[Dict[str, Any]] = None):
        return ExperimentConfigLoader(config_file).load_config(overrides)

    async def _handle_round(self, **kwargs) -> Dict[str, Any]:
        if not kwargs.get('bundle_dir'):
            return {'success': False, 'error': 'bundle_dir is required'}
        return await asyncio.to_thread(self.rounding_tool.process_request, 'round', **kwargs)

    async def _handle_oracle(self, **kwargs) -> Dict[str, Any]:
        if not kwargs.get('bundle_dir'):
            return {'success': False, 'error': 'bundle_dir is required'}
        return await asyncio.to_thread(self.rounding_tool.process_request, 'oracle', **kwargs)

    async def _handle_sketch(self, **kwargs) -> Dict[str, Any]:
        try:
            config = self._load_config(kwargs.pop('config_file'), kwargs.pop('overrides', None))
        except ValidationError as e:
            return _validation_error(e)
        except Exception as e:
            logger.error(f"Error loading sketch config: {str(e)}")
            return {'success': False, 'error': str(e)}
        return await asyncio.to_thread(self.sketch_tool.process_request, 'build', config=config, **kwargs)

    async def _handle_bound_check(self, **kwargs) -> Dict[str, Any]:
        if not kwargs.get('bundle_dir'):
            return {'success': False, 'error': 'bundle_dir is required'}
        return await asyncio.to_thread(self.bound_tool.process_request, 'check', **kwargs)

    async def _handle_run_experiment(self, **kwargs) -> Dict[str, Any]:
        try:
            config = self._load_config(kwargs['config_file'], kwargs.get('overrides'))
            threads = kwargs.get('threads') or self.threads
            return await self.experiment_tool.run(config, kwargs.get('out_dir'), threads)
        except ValidationError as e:
            return _validation_error(e)
        except Exception as e:
            logger.error(f"Error in experiment handler: {str(e)}")
            return {'success': False, 'error': str(e), 'error_type': type(e).__name__}

    async def _handle_verify(self, **kwargs) -> Dict[str, Any]:
        return await asyncio.to_thread(self.verify_tool.process_request, 'run', **kwargs)

    async def _handle_matrix_info(self, **kwargs) -> Dict[str, Any]:
        try:
            return self.store.describe(kwargs['path'])
        except Exception as e:
            logger.error(f"Error describing matrix: {str(e)}")
            return {'success': False, 'error': str(e)}

    async def list_tools(self) -> Dict[str, Any]:
        return {
            'success': True,
            'tools': [
                {
                    'name': tool_info['name'],
                    'description': tool_info['description'],
                    'parameters': tool_info['parameters']
                }
                for tool_info in self.tools.values()
            ]
        }

    async def call_tool(self, tool_name: str, **kwargs) -> Dict[str, Any]:
        if tool_name not in self.tools:
            return {
                'success': False,
                'error': f'Tool {tool_name} not found. Available tools: {list(self.tools.keys())}'
            }
        try:
            handler = self.tools[tool_name]['handler']
            return await handler(**kwargs)
        except Exception as e:
            logger.error(f"Error calling tool {tool_name}: {str(e)}")
            return {'success': False, 'error': str(e)}

    async def close(self):
        logger.info("Quantization server closed")
