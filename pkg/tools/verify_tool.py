"""
Property suites behind `verify`: seeded checks of the rounding, sketching,
bound and model machinery. Every failed check records the seed that
reproduces it.
"""
import logging
from dataclasses import asdict, dataclass
from typing import Any, Callable, Dict, List

import numpy as np

from experiment_config import DataSpec, ExperimentConfig, ModelSpec, QuantizerConfig, SketchSpec
from kronround.bounds import cosine_gap_bound, proxy_bounds, theorem1_bound
from kronround.linalg import DEFAULT_REG, SymMatrix, frob_cosine, kron, vec
from kronround.model import (
    FisherEstimate, cross_entropy, kl_to_reference, layer_grad, make_dataset, make_toy_model, true_layer_hessian,
    with_layer,
)
from kronround.quantize import QuantizerSpec
from kronround.rounding import RoundingProblem, ldlq, vec_ldlq_oracle, yaqa_round, yaqa_round_wavefront
from kronround.sketch import KronSketch, ldlq_sketch, power_iterate_full, sketch_a, sketch_b, van_loan_optimal
from kronround.snd import SupportPattern, kron_snd_bound, kron_support, snd, snd_by_powers
from kronround.transform import hadamard, incoherence_process, restore_weights, trace_ratio_diagnostic
from tools.experiment_tool import ExperimentTool

logger = logging.getLogger(__name__)

SUITES = ('snd', 'oracle', 'bounds', 'sketch', 'transform', 'model', 'e2e')

UNIT_GRID = QuantizerSpec(bits=8, mode='nearest', step=1.0)


@dataclass
class Check:
    name: str
    passed: bool
    seed: int
    detail: str = ""


def random_pd(rng: np.random.Generator, n: int, ridge: float = 0.1) -> np.ndarray:
    A = rng.standard_normal((n, n))
    return A @ A.T / n + ridge * np.eye(n)


def spiked(rng: np.random.Generator, n: int) -> np.ndarray:
    """Small random p.d. part plus a few large spikes on coordinate axes"""
    H = 0.01 * random_pd(rng, n)
    for i in rng.choice(n, size=max(1, n // 4), replace=False):
        H[i, i] += 10.0 * (1.0 + rng.random())
    return H


def _dense_fisher(H: np.ndarray, m: int, n: int) -> FisherEstimate:
    return FisherEstimate(H=SymMatrix(H), m=m, n=n, provenance='synthetic')


class VerifyTool:
    """Runs the property suites; `vec_order` only exists to build a failing negative control"""

    def __init__(self, vec_order: str = "C"):
        self.vec_order = vec_order
        self.suites: Dict[str, Callable[[int], List[Check]]] = {
            'snd': self.snd_suite,
            'oracle': self.oracle_suite,
            'bounds': self.bounds_suite,
            'sketch': self.sketch_suite,
            'transform': self.transform_suite,
            'model': self.model_suite,
            'e2e': self.e2e_suite,
        }

    def run(self, suite: str = 'all', seed: int = 0) -> Dict[str, Any]:
        names = list(SUITES) if suite == 'all' else [suite]
        unknown = [n for n in names if n not in self.suites]
        if unknown:
            return {'success': False, 'error': f"unknown suite {unknown[0]!r}; expected one of {', '.join(SUITES)} or all"}
        checks: List[Check] = []
        for name in names:
            logger.info(f"Running verify suite {name} (seed {seed})")
            checks.extend(self.suites[name](seed))
        failures = [asdict(c) for c in checks if not c.passed]
        for failure in failures:
            logger.error(f"Check failed: {failure['name']} (seed {failure['seed']}): {failure['detail']}")
        return {
            'success': not failures,
            'suite': suite,
            'checks': [asdict(c) for c in checks],
            'failures': failures,
        }

    def snd_suite(self, seed: int) -> List[Check]:
        checks = []
        mismatches = []
        for i in range(500):
            s = seed + i
            rng = np.random.default_rng(s)
            n = int(rng.integers(1, 65))
            mask = np.tril(rng.random((n, n)) < rng.random() * 0.3, -1)
            pattern = SupportPattern(mask)
            if snd(pattern) != snd_by_powers(pattern):
                mismatches.append(s)
        checks.append(Check('snd_dag_matches_powers', not mismatches, mismatches[0] if mismatches else seed,
                            f"{len(mismatches)} of 500 masks disagree"))

        violations = []
        for i in range(200):
            s = seed + i
            rng = np.random.default_rng(s)
            a = SupportPattern(np.tril(rng.random((int(rng.integers(1, 7)),) * 2) < 0.4, -1))
            b = SupportPattern(np.tril(rng.random((int(rng.integers(1, 7)),) * 2) < 0.4, -1))
            if snd(kron_support(a, b)) > kron_snd_bound(a, b):
                violations.append(s)
        checks.append(Check('snd_kron_bound', not violations, violations[0] if violations else seed,
                            f"{len(violations)} of 200 pairs exceed snd(a)+snd(b)-1"))
        dense = snd(SupportPattern.dense(5))
        checks.append(Check('snd_dense_5', dense == 5, seed, f"snd={dense}"))
        return checks

    def oracle_suite(self, seed: int) -> List[Check]:
        """Entry-identical codes from the sweep, wavefront and vectorized forms"""
        bad_yaqa, bad_wave, bad_ldlq, bad_bound, bad_block, bad_reg = [], [], [], [], [], []
        for i in range(100):
            s = seed + i
            rng = np.random.default_rng(s)
            m, n = (int(v) for v in rng.choice([2, 3, 4], size=2))
            H_O, H_I = random_pd(rng, m), random_pd(rng, n)
            W = rng.standard_normal((m, n)) * 3.0
            problem = RoundingProblem(W, KronSketch(H_O, H_I), UNIT_GRID, reg=0.0, seed=s)
            sweep = yaqa_round(problem)
            wave = yaqa_round_wavefront(problem)
            oracle = vec_ldlq_oracle(W, kron(H_O, H_I), UNIT_GRID, reg=0.0, seed=s, order=self.vec_order)
            if not np.array_equal(sweep.W_hat.codes, oracle.W_hat.codes):
                bad_yaqa.append(s)
            if not np.array_equal(wave.W_hat.codes, sweep.W_hat.codes):
                bad_wave.append(s)
            if sweep.sweeps > sweep.meta['sweep_bound']:
                bad_bound.append(s)

            regularized = RoundingProblem(W, KronSketch(H_O, H_I), UNIT_GRID, reg=DEFAULT_REG, seed=s)
            oracle_r = vec_ldlq_oracle(W, regularized.sketch, UNIT_GRID, reg=DEFAULT_REG, seed=s, order=self.vec_order)
            if not np.array_equal(yaqa_round(regularized).W_hat.codes, oracle_r.W_hat.codes):
                bad_reg.append(s)

            one_sided = RoundingProblem.with_input_hessian(W, H_I, UNIT_GRID, reg=0.0, seed=s)
            oracle_1 = vec_ldlq_oracle(W, kron(np.eye(m), H_I), UNIT_GRID, reg=0.0, seed=s, order=self.vec_order)
            if not np.array_equal(ldlq(one_sided).W_hat.codes, oracle_1.W_hat.codes):
                bad_ldlq.append(s)

            if m % 2 == 0 and n % 2 == 0:
                blocked = QuantizerSpec(bits=8, mode='nearest', step=1.0, block_shape=(2, 2))
                bp = RoundingProblem(W, KronSketch(H_O, H_I), blocked, reg=0.0, seed=s)
                if not np.array_equal(yaqa_round(bp).W_hat.codes, yaqa_round_wavefront(bp).W_hat.codes):
                    bad_block.append(s)

        def check(name, bad, what):
            return Check(name, not bad, bad[0] if bad else seed, f"{len(bad)} of 100 instances: {what}")

        return [
            check('oracle_yaqa_matches_vectorized', bad_yaqa, 'yaqa_round differs from the vectorized fixed point'),
            check('oracle_wavefront_matches_sweeps', bad_wave, 'wavefront differs from sweeps'),
            check('oracle_ldlq_matches_vectorized', bad_ldlq, 'ldlq differs from the I (x) H_I fixed point'),
            check('oracle_sweep_bound', bad_bound, 'sweeps exceed snd(L_O)+snd(L_I)-1'),
            check('oracle_block_wavefront', bad_block, '2x2 block wavefront differs from sweeps'),
            check('oracle_regularized_sketch', bad_reg, 'yaqa_round differs from the factor-regularized fixed point'),
        ]

    def bounds_suite(self, seed: int) -> List[Check]:
        checks = []
        violations = []
        for i in range(50):
            s = seed + i
            rng = np.random.default_rng(s)
            m, n = (int(v) for v in rng.choice([2, 4], size=2))
            block = (2, 2) if i % 2 else (1, 1)
            spec = QuantizerSpec(bits=8, mode='stochastic', step=1.0, block_shape=block)
            sketch = KronSketch(random_pd(rng, m), random_pd(rng, n))
            W = rng.standard_normal((m, n)) * 3.0
            errors = [yaqa_round(RoundingProblem(W, sketch, spec, seed=s * 1000 + t)).proxy_error for t in range(200)]
            bound = proxy_bounds(sketch, spec).trace_d
            if np.mean(errors) > bound * 1.05:
                violations.append((s, float(np.mean(errors)), bound))
        checks.append(Check('proxy_error_bound', not violations, violations[0][0] if violations else seed,
                            f"{len(violations)} of 50 instances; first: {violations[0][1:] if violations else ''}"))

        gap_failures = []
        for i in range(100):
            s = seed + i
            rng = np.random.default_rng(s)
            m, n = (int(v) for v in rng.integers(2, 5, size=2))
            H = random_pd(rng, m * n, ridge=0.01)
            sketch = KronSketch(random_pd(rng, m), random_pd(rng, n))
            if not cosine_gap_bound(H, sketch, rng.standard_normal((m, n))).holds:
                gap_failures.append(s)
        checks.append(Check('cosine_gap_bound', not gap_failures, gap_failures[0] if gap_failures else seed,
                            f"{len(gap_failures)} of 100 instances"))

        t1_failures = []
        for i in range(20):
            s = seed + i
            model = make_toy_model([4, 4, 3], seed=s, weight_scale=1.5, mix=0.5)
            data = make_dataset(4, 16, 3, 0.5, seed=s)
            layer = i % 2
            fisher = true_layer_hessian(model, layer, data)
            sketch = van_loan_optimal(fisher)
            W = model.weights[layer]
            spec = QuantizerSpec(bits=8, mode='stochastic', step=0.05)
            true_errors, rhs = [], []
            for t in range(50):
                result = yaqa_round(RoundingProblem(W, sketch, spec, seed=s * 1000 + t))
                report = theorem1_bound(fisher, sketch, spec, W - result.W_hat.values)
                true_errors.append(report.true_error)
                rhs.append(report.theorem1_bound)
            if np.mean(true_errors) > np.mean(rhs):
                t1_failures.append(s)
        checks.append(Check('end_to_end_bound', not t1_failures, t1_failures[0] if t1_failures else seed,
                            f"{len(t1_failures)} of 20 toy layers"))
        return checks

    def sketch_suite(self, seed: int) -> List[Check]:
        checks = []
        gap, nonmonotone, unrecovered = [], [], []
        for i in range(50):
            s = seed + i
            rng = np.random.default_rng(s)
            m, n = (int(v) for v in rng.choice([2, 3, 4, 6, 8], size=2))
            H = kron(random_pd(rng, m), random_pd(rng, n))
            H += 0.3 * kron(random_pd(rng, m), random_pd(rng, n))
            B = rng.standard_normal((m * n, m * n))
            H += 0.01 * B @ B.T / (m * n)
            fisher = _dense_fisher(H, m, n)
            optimal = van_loan_optimal(fisher).meta['singular_value']
            powered = power_iterate_full(fisher, iters=60)
            history = powered.meta['objective']
            if abs(history[-1] - optimal) > 1e-6 * optimal:
                gap.append(s)
            if any(b < a - 1e-12 * abs(a) for a, b in zip(history, history[1:])):
                nonmonotone.append(s)

            exact = _dense_fisher(kron(random_pd(rng, m), random_pd(rng, n)), m, n)
            for sk in (van_loan_optimal(exact), power_iterate_full(exact, iters=5)):
                if frob_cosine(exact.H.data, sk.dense()) < 1.0 - 1e-9:
                    unrecovered.append(s)
                    break
        checks.append(Check('power_iteration_reaches_optimum', not gap, gap[0] if gap else seed,
                            f"{len(gap)} of 50 instances off by more than 1e-6"))
        checks.append(Check('power_iteration_monotone', not nonmonotone, nonmonotone[0] if nonmonotone else seed,
                            f"{len(nonmonotone)} of 50 instances"))
        checks.append(Check('exact_kronecker_recovered', not unrecovered, unrecovered[0] if unrecovered else seed,
                            f"{len(unrecovered)} of 50 instances"))

        ldlq_worse, b_beats_a = 0, 0
        for i in range(20):
            s = seed + i
            model = make_toy_model([8, 8, 4], seed=s, weight_scale=1.5, mix=0.5)
            data = make_dataset(8, 32, 4, 0.8, seed=s)
            H = true_layer_hessian(model, 0, data).H.data
            c_ldlq = frob_cosine(H, ldlq_sketch(model, 0, data).dense())
            c_a = frob_cosine(H, sketch_a(model, 0, data, iters=2).dense())
            c_b = frob_cosine(H, sketch_b(model, 0, data).dense())
            ldlq_worse += c_ldlq < c_a and c_ldlq < c_b

            ample = make_dataset(8, 256, 4, 0.8, seed=s)
            H = true_layer_hessian(model, 0, ample).H.data
            b_beats_a += (frob_cosine(H, sketch_b(model, 0, ample).dense())
                          >= frob_cosine(H, sketch_a(model, 0, ample, iters=2).dense()))
        checks.append(Check('sketches_beat_ldlq', ldlq_worse >= 18, seed, f"{ldlq_worse} of 20 seeds"))
        checks.append(Check('sketch_b_beats_a_with_ample_data', b_beats_a > 10, seed, f"{b_beats_a} of 20 seeds"))
        return checks

    def transform_suite(self, seed: int) -> List[Check]:
        ratios = []
        invariant_failures = []
        for i in range(100):
            s = seed + i
            rng = np.random.default_rng(s)
            m, n = (int(v) for v in rng.choice([4, 8, 16], size=2))
            sketch = KronSketch(spiked(rng, m), spiked(rng, n))
            W = rng.standard_normal((m, n))
            W_ip, sketch_ip, transforms = incoherence_process(W, sketch, (s, s + 10_000))
            ratios.append(trace_ratio_diagnostic(sketch, sketch_ip))

            U, V = transforms.U.matrix(), transforms.V.matrix()
            x = rng.standard_normal(m)
            problems = []
            if np.max(np.abs(U @ U.T - np.eye(m))) > 1e-9:
                problems.append('U not orthogonal')
            if np.max(np.abs(transforms.U.apply(x) - U @ x)) > 1e-9:
                problems.append('fast transform differs from dense')
            if np.max(np.abs(hadamard(m) @ hadamard(m) - np.eye(m))) > 1e-9:
                problems.append('Hadamard matrix not involutory')
            eig = np.linalg.eigvalsh(sketch.H_O.data)
            eig_ip = np.linalg.eigvalsh(sketch_ip.H_O.data)
            if np.max(np.abs(eig - eig_ip)) > 1e-9 * max(1.0, eig[-1]):
                problems.append('spectrum changed')
            if np.max(np.abs(restore_weights(W_ip, transforms) - W)) > 1e-9:
                problems.append('weights not restored')
            UV = kron(U, V)
            if np.max(np.abs(UV @ sketch.dense() @ UV.T - sketch_ip.dense())) > 1e-9 * np.linalg.norm(sketch.dense()):
                problems.append('Kronecker product not conjugated')
            if problems:
                invariant_failures.append((s, problems))
        median = float(np.median(ratios))
        return [
            Check('incoherence_trace_ratio', median < 1.0, seed, f"median ratio {median:.6g} over 100 seeds"),
            Check('rht_invariants', not invariant_failures, invariant_failures[0][0] if invariant_failures else seed,
                  f"{invariant_failures[0][1] if invariant_failures else 'all hold'}"),
        ]

    def model_suite(self, seed: int) -> List[Check]:
        grad_failures, taylor_failures, first_order_failures = [], [], []
        for i in range(10):
            s = seed + i
            rng = np.random.default_rng(s)
            model = make_toy_model([5, 6, 4], seed=s, weight_scale=1.5, mix=0.5)
            layer = i % 2
            tokens = rng.standard_normal((3, 5))
            labels = rng.integers(0, 4, size=3)
            G = layer_grad(model, layer, tokens, labels)
            W = model.weights[layer]
            G_fd = np.zeros_like(W)
            eps = 1e-6
            for a in range(W.shape[0]):
                for b in range(W.shape[1]):
                    E = np.zeros_like(W)
                    E[a, b] = eps
                    plus = cross_entropy(with_layer(model, layer, W + E), tokens, labels)
                    minus = cross_entropy(with_layer(model, layer, W - E), tokens, labels)
                    G_fd[a, b] = (plus - minus) / (2 * eps)
            rel = np.linalg.norm(G - G_fd) / max(np.linalg.norm(G), 1e-12)
            if rel > 1e-5:
                grad_failures.append((s, rel))

            data = make_dataset(5, 8, 3, 0.5, seed=s)
            fisher = true_layer_hessian(model, layer, data)
            D = rng.standard_normal(W.shape)
            d = vec(D)
            quad = 0.5 * float(d @ fisher.H.data @ d)
            t = 1e-3
            kl = kl_to_reference(model, with_layer(model, layer, W + t * D), data)
            if abs(kl - t * t * quad) > 0.05 * t * t * quad:
                taylor_failures.append((s, kl / (t * t * quad)))

            t = 1e-5
            odd = (kl_to_reference(model, with_layer(model, layer, W + t * D), data)
                   - kl_to_reference(model, with_layer(model, layer, W - t * D), data)) / (2 * t)
            if abs(odd) > 1e-8:
                first_order_failures.append((s, odd))

        def check(name, failures, what):
            return Check(name, not failures, failures[0][0] if failures else seed,
                         f"{len(failures)} of 10 models {what}; first: {failures[0][1] if failures else ''}")

        return [
            check('model_gradients_finite_difference', grad_failures, 'exceed 1e-5 relative'),
            check('model_kl_taylor', taylor_failures, 'outside 5% of the quadratic term'),
            check('model_kl_first_order', first_order_failures, 'have a first-order term above 1e-8'),
        ]

    def e2e_suite(self, seed: int, trials: int = 20) -> List[Check]:
        """Median KL of yaqa (Van Loan sketch) against ldlq at 2, 3 and 4 bits"""
        config = ExperimentConfig(
            model=ModelSpec(dims=[8, 8, 4], seed=seed),
            data=DataSpec(count=64, seq_len=4, correlation=0.5, seed=seed + 1),
            sketch=SketchSpec(method='vanloan'),
            quantizer=QuantizerConfig(bits=4, mode='nearest', scale={'groupwise': 8}),
            algorithms=['ldlq', 'yaqa'],
            bit_widths=[2, 3, 4],
            trials=trials,
            seed=seed,
        )
        tool = ExperimentTool()
        rows = [row for t in range(trials) for row in tool.run_trial(config, t)[0]]
        checks = []
        for bits in config.bit_widths:
            kl = {name: float(np.median([r['kl'] for r in rows if r['bits'] == bits and r['algorithm'] == name]))
                  for name in config.algorithms}
            passed = kl['yaqa'] < kl['ldlq'] if bits == 2 else kl['yaqa'] <= kl['ldlq']
            checks.append(Check(f'e2e_kl_{bits}bit', passed, seed,
                                f"median KL yaqa {kl['yaqa']:.6g} vs ldlq {kl['ldlq']:.6g}"))
        return checks

    def process_request(self, operation: str = 'run', **kwargs) -> Dict[str, Any]:
        try:
            if operation == 'run':
                return self.run(**kwargs)
            else:
                return {'success': False, 'error': f'Unsupported operation: {operation}'}
        except Exception as e:
            logger.error(f"Error in verify operation {operation}: {str(e)}")
            return {'success': False, 'error': str(e), 'error_type': type(e).__name__}
