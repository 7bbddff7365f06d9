import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal
from scipy.linalg import block_diag

from conftest import make_pd
from kronround.errors import BadBlockSize, ShapeMismatch, TooLarge
from kronround.linalg import DEFAULT_REG, kron, vec
from kronround.quantize import QuantizerSpec, quantize_nearest
from kronround.rounding import (
    RoundingProblem, guidedquant_round, ldlq, nearest_round, parse_algorithm, proxy_error, round_with,
    vec_ldlq_oracle, yaqa_round, yaqa_round_wavefront,
)
from kronround.sketch import KronSketch

UNIT = QuantizerSpec(bits=8, mode='nearest', step=1.0)


def weights(m, n, seed, scale=3.0):
    return np.random.default_rng(seed).standard_normal((m, n)) * scale


def problem(m, n, seed, spec=UNIT, reg=0.0):
    return RoundingProblem(weights(m, n, seed), KronSketch(make_pd(m, seed + 1), make_pd(n, seed + 2)), spec,
                           reg=reg, seed=seed)


def test_ldlq_diagonal_hessian_is_nearest():
    W = weights(3, 4, 0)
    result = ldlq(RoundingProblem.with_input_hessian(W, np.diag([1.0, 2.0, 3.0, 4.0]), UNIT))
    assert_array_equal(result.W_hat.codes, quantize_nearest(W, UNIT).codes)
    assert result.sweeps == 1


def test_ldlq_single_entry():
    result = ldlq(RoundingProblem.with_input_hessian(np.array([[2.3]]), np.array([[5.0]]), UNIT))
    assert_array_equal(result.W_hat.codes, [[2]])


@pytest.mark.parametrize("seed", range(10))
def test_ldlq_matches_oracle(seed):
    W, H_I = weights(2, 3, seed), make_pd(3, seed)
    result = ldlq(RoundingProblem.with_input_hessian(W, H_I, UNIT, reg=0.0, seed=seed))
    oracle = vec_ldlq_oracle(W, kron(np.eye(2), H_I), UNIT, reg=0.0, seed=seed)
    assert_array_equal(result.W_hat.codes, oracle.W_hat.codes)


def test_oracle_identity_is_nearest():
    W = weights(3, 3, 4)
    oracle = vec_ldlq_oracle(W, np.eye(9), UNIT, reg=0.0)
    assert_array_equal(oracle.W_hat.codes, quantize_nearest(W, UNIT).codes)


@pytest.mark.parametrize("seed", range(10))
def test_yaqa_identity_output_matches_ldlq(seed):
    W, H_I = weights(3, 4, seed), make_pd(4, seed)
    one_sided = RoundingProblem.with_input_hessian(W, H_I, UNIT, reg=0.0, seed=seed)
    assert_array_equal(yaqa_round(one_sided).W_hat.codes, ldlq(one_sided).W_hat.codes)


def diagonally_dominant(n, rng):
    C = rng.uniform(-1.0, 1.0, size=(n, n))
    C = (C + C.T) / 2
    np.fill_diagonal(C, 0.0)
    return C + np.diag(np.abs(C).sum(axis=1) + rng.uniform(0.1, 1.0, size=n))


def test_ldlq_median_benefit_over_nearest():
    gaps = []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        p = RoundingProblem.with_input_hessian(rng.standard_normal((4, 6)) * 3, diagonally_dominant(6, rng), UNIT,
                                               reg=0.0, seed=seed)
        gaps.append(ldlq(p).proxy_error - nearest_round(p).proxy_error)
    assert np.median(gaps) <= 0.0


def test_yaqa_diagonal_factors_are_nearest():
    W = weights(3, 4, 2)
    result = yaqa_round(RoundingProblem(W, KronSketch(np.diag([1.0, 2.0, 3.0]), np.diag([4.0, 1.0, 2.0, 3.0])), UNIT))
    assert_array_equal(result.W_hat.codes, quantize_nearest(W, UNIT).codes)
    assert result.sweeps == 1


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 31), m=st.integers(1, 4), n=st.integers(1, 4))
def test_yaqa_matches_oracle(seed, m, n):
    p = problem(m, n, seed)
    result = yaqa_round(p)
    oracle = vec_ldlq_oracle(p.W_star, p.sketch.dense(), UNIT, reg=0.0, seed=seed)
    assert_array_equal(result.W_hat.codes, oracle.W_hat.codes)
    assert result.sweeps <= result.meta['sweep_bound']


@pytest.mark.parametrize("seed", range(300))
def test_yaqa_matches_sketch_oracle_at_default_reg(seed):
    rng = np.random.default_rng(seed)
    m, n = (int(v) for v in rng.choice([2, 3, 4], size=2))
    p = problem(m, n, seed, reg=DEFAULT_REG)
    oracle = vec_ldlq_oracle(p.W_star, p.sketch, UNIT, reg=DEFAULT_REG, seed=seed)
    assert_array_equal(yaqa_round(p).W_hat.codes, oracle.W_hat.codes)
    assert oracle.proxy_error == pytest.approx(proxy_error(p.W_star, oracle.W_hat, p.sketch))


@pytest.mark.parametrize("seed", range(20))
def test_blocked_yaqa_matches_sketch_oracle(seed):
    spec = QuantizerSpec(bits=8, mode='nearest', step=1.0, block_shape=(2, 2))
    p = problem(4, 4, seed, spec, reg=DEFAULT_REG)
    oracle = vec_ldlq_oracle(p.W_star, p.sketch, spec, reg=DEFAULT_REG, seed=seed)
    assert_array_equal(yaqa_round(p).W_hat.codes, oracle.W_hat.codes)


def test_sketch_oracle_shape_check():
    with pytest.raises(ShapeMismatch):
        vec_ldlq_oracle(np.zeros((2, 3)), KronSketch.identity(3, 2), UNIT)


def test_column_major_oracle_disagrees():
    # the wrong vec convention must be detectable
    mismatches = 0
    for seed in range(20):
        p = problem(3, 4, seed)
        oracle = vec_ldlq_oracle(p.W_star, p.sketch.dense(), UNIT, reg=0.0, seed=seed, order="F")
        mismatches += not np.array_equal(yaqa_round(p).W_hat.codes, oracle.W_hat.codes)
    assert mismatches > 0


def test_wavefront_single_row_matches_ldlq():
    W, H_I = weights(1, 6, 3), make_pd(6, 3)
    p = RoundingProblem.with_input_hessian(W, H_I, UNIT, reg=0.0)
    assert_array_equal(yaqa_round_wavefront(p).W_hat.codes, ldlq(p).W_hat.codes)


@pytest.mark.parametrize("seed", range(10))
def test_wavefront_matches_sweeps(seed):
    p = problem(4, 4, seed)
    wave = yaqa_round_wavefront(p)
    assert_array_equal(wave.W_hat.codes, yaqa_round(p).W_hat.codes)
    assert wave.meta['diagonals'] == 7


@pytest.mark.parametrize("seed", range(10))
def test_wavefront_blocks_match_sweeps(seed):
    spec = QuantizerSpec(bits=8, mode='nearest', step=1.0, block_shape=(2, 2))
    p = problem(4, 4, seed, spec)
    wave = yaqa_round_wavefront(p)
    assert_array_equal(wave.W_hat.codes, yaqa_round(p).W_hat.codes)
    assert wave.meta['diagonals'] == 3


@pytest.mark.parametrize("seed", range(5))
def test_stochastic_yaqa_matches_oracle(seed):
    spec = QuantizerSpec(bits=8, mode='stochastic', step=1.0)
    p = problem(3, 3, seed, spec)
    oracle = vec_ldlq_oracle(p.W_star, p.sketch.dense(), spec, reg=0.0, seed=seed)
    assert_array_equal(yaqa_round(p).W_hat.codes, oracle.W_hat.codes)


def test_sketch_scale_does_not_change_codes():
    p = problem(3, 4, 8, reg=1e-4)
    scaled = RoundingProblem(p.W_star, p.sketch.scaled(4.0), UNIT, reg=1e-4)
    assert_array_equal(yaqa_round(scaled).W_hat.codes, yaqa_round(p).W_hat.codes)


def test_guidedquant_single_group_is_ldlq():
    W, H_I = weights(4, 3, 1), make_pd(3, 1)
    p = RoundingProblem.with_input_hessian(W, H_I, UNIT, reg=0.0)
    assert_array_equal(guidedquant_round(p, 1, [H_I]).W_hat.codes, ldlq(p).W_hat.codes)
    assert_array_equal(guidedquant_round(p, 4, [H_I] * 4).W_hat.codes, ldlq(p).W_hat.codes)


@pytest.mark.parametrize("seed", range(5))
def test_guidedquant_matches_block_diagonal_oracle(seed):
    m, n, groups = 4, 3, 2
    W = weights(m, n, seed)
    blocks = [make_pd(n, seed + 10), make_pd(n, seed + 20)]
    p = RoundingProblem.with_input_hessian(W, np.eye(n), UNIT, reg=0.0, seed=seed)
    result = guidedquant_round(p, groups, blocks)
    H = block_diag(*(kron(np.eye(m // groups), B) for B in blocks))
    oracle = vec_ldlq_oracle(W, H, UNIT, reg=0.0, seed=seed)
    assert_array_equal(result.W_hat.codes, oracle.W_hat.codes)
    assert result.algorithm == "guidedquant(2)"


def test_guidedquant_group_checks():
    p = RoundingProblem.with_input_hessian(weights(4, 3, 0), make_pd(3, 0), UNIT)
    with pytest.raises(BadBlockSize):
        guidedquant_round(p, 3)
    with pytest.raises(ShapeMismatch):
        guidedquant_round(p, 2, [np.eye(3)])


def test_proxy_error():
    sketch = KronSketch(make_pd(3, 1), make_pd(4, 2))
    W = weights(3, 4, 0)
    assert proxy_error(W, W, sketch) == 0.0
    delta = weights(3, 4, 1, scale=1.0)
    assert proxy_error(W, W - delta, KronSketch.identity(3, 4)) == pytest.approx(np.sum(delta ** 2))
    d = vec(delta)
    assert proxy_error(W, W - delta, sketch) == pytest.approx(d @ sketch.dense() @ d, rel=1e-10)


def test_result_proxy_error_nonnegative():
    result = yaqa_round(problem(4, 4, 2))
    assert result.proxy_error >= 0
    assert result.converged
    assert result.to_dict()['shape'] == [4, 4]


def test_nearest_round():
    p = problem(3, 4, 5)
    assert_array_equal(nearest_round(p).W_hat.codes, quantize_nearest(p.W_star, UNIT).codes)


def test_ldlq_rejects_non_identity_output():
    with pytest.raises(ValueError):
        ldlq(problem(3, 3, 0))


def test_ldlq_accepts_scaled_identity_output():
    W, H_I = weights(2, 3, 0), make_pd(3, 0)
    p = RoundingProblem(W, KronSketch(4.0 * np.eye(2), H_I), UNIT, reg=0.0)
    ref = RoundingProblem.with_input_hessian(W, H_I, UNIT, reg=0.0)
    assert_array_equal(ldlq(p).W_hat.codes, ldlq(ref).W_hat.codes)


def test_bad_block_shape():
    spec = QuantizerSpec(bits=8, step=1.0, block_shape=(2, 2))
    with pytest.raises(BadBlockSize):
        yaqa_round(problem(3, 4, 0, spec))


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        RoundingProblem(np.zeros((2, 3)), KronSketch.identity(3, 3), UNIT)


def test_oracle_size_cap():
    with pytest.raises(TooLarge):
        vec_ldlq_oracle(np.zeros((4, 4)), np.eye(16), UNIT, size_cap=8)


def test_parse_algorithm():
    assert parse_algorithm("guidedquant(4)") == ("guidedquant", 4)
    assert parse_algorithm("yaqa") == ("yaqa", None)
    with pytest.raises(ValueError):
        parse_algorithm("gptq")
    with pytest.raises(ValueError):
        parse_algorithm("guidedquant")


def test_round_with_dispatch():
    p = problem(2, 2, 0)
    assert round_with("yaqa-wavefront", p).algorithm == "yaqa-wavefront"
    assert round_with("nearest", p).sweeps == 1
