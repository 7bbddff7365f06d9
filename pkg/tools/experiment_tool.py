"""
Experiment driver: toy model -> Fisher and sketch -> optional incoherence
processing -> rounding -> metrics, one result row per (trial, bits, algorithm)
"""
import asyncio
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from experiment_config import ExperimentConfig
from kronround.bounds import theorem1_bound
from kronround.model import (
    Dataset, FisherEstimate, ToyModel, kl_to_reference, layer_input_hessian, make_dataset, make_toy_model,
    second_order_error, true_layer_hessian, with_layer,
)
from kronround.rounding import RoundingProblem, parse_algorithm, round_with
from kronround.sketch import KronSketch, build_sketch, guidedquant_blocks, ldlq_sketch
from kronround.transform import incoherence_process, restore_weights

logger = logging.getLogger(__name__)

RESULTS_HEADER = "# kronround results v1"
RESULT_COLUMNS = [
    'trial', 'algorithm', 'sketch', 'bits', 'proxy_error', 'true_second_order_error', 'kl',
    'theorem1_bound', 'cosine', 'sweeps',
]
TIMING_COLUMNS = ['trial', 'algorithm', 'bits', 'wall_time']


@dataclass
class TrialSetup:
    """Everything one trial needs before rounding"""
    trial: int
    model: ToyModel
    data: Dataset
    eval_data: Dataset
    fisher: FisherEstimate
    H_1: np.ndarray
    sketch: KronSketch
    ldlq_sketch: KronSketch
    round_seed: int
    ip_seeds: Tuple[int, int]


def trial_seeds(config: ExperimentConfig, trial: int) -> List[int]:
    """model, data, eval data, rounding, ip (out), ip (in) seeds for one trial"""
    ss = np.random.SeedSequence([config.seed, trial, config.model.seed, config.data.seed])
    return [int(s) for s in ss.generate_state(6)]


def setup_trial(config: ExperimentConfig, trial: int) -> TrialSetup:
    s_model, s_data, s_eval, s_round, s_ip_out, s_ip_in = trial_seeds(config, trial)
    model = make_toy_model(config.model.dims, seed=s_model, weight_scale=config.model.weight_scale, mix=config.model.mix)
    dim = config.model.dims[0]
    data = make_dataset(dim, config.data.count, config.data.seq_len, config.data.correlation, seed=s_data)
    eval_data = make_dataset(dim, config.data.eval_count, config.data.seq_len, config.data.correlation,
                             seed=s_eval, mixing_seed=s_data)
    sk = config.sketch
    fisher = true_layer_hessian(model, config.layer, data)
    sketch = build_sketch(sk.method, model, config.layer, data, sk.iters, s_round, sk.label_mode, sk.samples,
                          fisher=fisher)
    return TrialSetup(
        trial=trial,
        model=model,
        data=data,
        eval_data=eval_data,
        fisher=fisher,
        H_1=layer_input_hessian(model, config.layer, data),
        sketch=sketch,
        ldlq_sketch=ldlq_sketch(model, config.layer, data),
        round_seed=s_round,
        ip_seeds=(s_ip_out, s_ip_in),
    )


class ExperimentTool:
    """Runs experiment configs and writes results.csv, timings.csv and summary.json"""

    def run_trial(self, config: ExperimentConfig, trial: int) -> Tuple[List[Dict[str, Any]], List[Dict[str, Any]]]:
        setup = setup_trial(config, trial)
        layer = config.layer
        W_star = setup.model.weights[layer]
        m, n = W_star.shape
        rows, timings = [], []

        for bits in config.bit_list():
            spec = config.quantizer.to_spec(bits)
            for name in config.algorithms:
                algorithm, groups = parse_algorithm(name)
                sketch = setup.ldlq_sketch if algorithm == 'ldlq' else setup.sketch
                blocks = guidedquant_blocks(setup.fisher, m, n, groups) if groups else None
                problem = RoundingProblem(W_star, sketch, spec, config.reg, setup.round_seed)

                start = time.perf_counter()
                if config.incoherence:
                    W_ip, sketch_ip, transforms = incoherence_process(W_star, sketch, setup.ip_seeds)
                    if groups:
                        # U mixes output channels, so the blocks come from the processed Fisher
                        blocks = guidedquant_blocks(transforms.conjugate_dense(setup.fisher.H), m, n, groups)
                    processed = RoundingProblem(W_ip, sketch_ip, spec, config.reg, setup.round_seed)
                    result = round_with(name, processed, blocks)
                    W_hat = restore_weights(result.W_hat.values, transforms)
                else:
                    result = round_with(name, problem, blocks)
                    W_hat = result.W_hat.values
                wall_time = time.perf_counter() - start

                delta = W_star - W_hat
                report = theorem1_bound(setup.fisher, sketch, spec, delta, reg=config.reg, scales=result.W_hat.scales)
                rows.append({
                    'trial': trial,
                    'algorithm': name,
                    'sketch': 'ldlq' if algorithm == 'ldlq' else config.sketch.method,
                    'bits': bits,
                    'proxy_error': report.proxy_error,
                    'true_second_order_error': second_order_error(setup.model, layer, W_hat, setup.fisher),
                    'kl': kl_to_reference(setup.model, with_layer(setup.model, layer, W_hat), setup.eval_data),
                    'theorem1_bound': report.theorem1_bound,
                    'cosine': report.cosine,
                    'sweeps': result.sweeps,
                })
                timings.append({'trial': trial, 'algorithm': name, 'bits': bits, 'wall_time': wall_time})
        logger.info(f"Trial {trial} finished: {len(rows)} rows")
        return rows, timings

    async def run(self, config: ExperimentConfig, out_dir: Optional[str] = None, threads: int = 1) -> Dict[str, Any]:
        """Run all trials, at most `threads` at a time; rows are ordered by trial index"""
        semaphore = asyncio.Semaphore(max(1, threads))

        async def one(trial: int):
            async with semaphore:
                return await asyncio.to_thread(self.run_trial, config, trial)

        outcomes = await asyncio.gather(*(one(t) for t in range(config.trials)))
        rows = [row for trial_rows, _ in outcomes for row in trial_rows]
        timings = [t for _, trial_timings in outcomes for t in trial_timings]
        results = pd.DataFrame(rows, columns=RESULT_COLUMNS)
        summary = self.summarize(config, results)

        out = Path(out_dir or config.output)
        out.mkdir(parents=True, exist_ok=True)
        write_results_csv(out / 'results.csv', results)
        pd.DataFrame(timings, columns=TIMING_COLUMNS).to_csv(out / 'timings.csv', index=False)
        with open(out / 'summary.json', 'w') as f:
            json.dump(summary, f, indent=2, sort_keys=True)
        logger.info(f"Experiment written to {out}")
        return {'success': True, 'output_dir': str(out), 'rows': len(results), 'summary': summary}

    def summarize(self, config: ExperimentConfig, results: pd.DataFrame) -> Dict[str, Any]:
        """Medians per (bits, algorithm)"""
        medians = (
            results.groupby(['bits', 'algorithm'], sort=True)[['kl', 'proxy_error', 'true_second_order_error']]
            .median()
            .reset_index()
        )
        return {
            'config': config.model_dump(mode='json'),
            'trials': config.trials,
            'medians': medians.to_dict('records'),
        }


def write_results_csv(path, results: pd.DataFrame):
    with open(path, 'w', newline='') as f:
        f.write(RESULTS_HEADER + "\n")
        results.to_csv(f, index=False, float_format='%.17g')


def read_results_csv(path) -> pd.DataFrame:
    return pd.read_csv(path, comment='#')
