import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import make_pd
from kronround.errors import ShapeMismatch, TooLarge, ZeroMatrix
from kronround.linalg import SymMatrix, frob_cosine, kron
from kronround.model import (
    FisherEstimate, ToyModel, gradient_samples, layer_input_hessian, make_dataset, make_toy_model, true_layer_hessian,
)
from kronround.sketch import (
    SIMULTANEOUS, KronSketch, build_sketch, guidedquant_blocks, ldlq_sketch, power_iterate_full, rearrange,
    sketch_a, sketch_b, sketch_quality, token_independent_fisher, van_loan_optimal,
)


def fisher(H, m, n):
    return FisherEstimate(H=SymMatrix(H), m=m, n=n, provenance='synthetic')


def noisy_kronecker(m, n, seed):
    rng = np.random.default_rng(seed)
    H = kron(make_pd(m, seed), make_pd(n, seed + 1)) + 0.3 * kron(make_pd(m, seed + 2), make_pd(n, seed + 3))
    B = rng.standard_normal((m * n, m * n))
    return H + 0.01 * B @ B.T / (m * n)


def test_rearrange_of_kronecker_is_rank_one():
    A, B = make_pd(2, 0), make_pd(3, 1)
    assert_allclose(rearrange(kron(A, B), 2, 3), np.outer(A.reshape(-1), B.reshape(-1)))


def test_finalize_normalizes_output_factor():
    s = KronSketch(3.0 * np.eye(2), make_pd(3, 0)).finalize()
    assert np.linalg.norm(s.H_O.data) == pytest.approx(1.0)
    assert s.meta['scale'] == pytest.approx(3.0 * np.sqrt(2))
    assert_allclose(s.dense(), kron(3.0 * np.eye(2), make_pd(3, 0)), atol=1e-12)


def test_finalize_clamps_negative_eigenvalues():
    s = KronSketch(np.diag([1.0, -0.5]), np.eye(2)).finalize()
    assert np.all(np.linalg.eigvalsh(s.H_O.data) >= -1e-15)
    with pytest.raises(ZeroMatrix):
        KronSketch(-np.eye(2), np.eye(2)).finalize()


@pytest.mark.parametrize("method", ["powerfull", "vanloan"])
def test_exact_kronecker_recovered(method):
    A, B = make_pd(3, 4), make_pd(4, 5)
    H = fisher(kron(A, B), 3, 4)
    s = power_iterate_full(H, iters=1) if method == "powerfull" else van_loan_optimal(H)
    assert frob_cosine(H.H.data, s.dense()) >= 1.0 - 1e-9
    assert sketch_quality(H, s).cosine == pytest.approx(1.0, abs=1e-9)


def test_identity_fisher_gives_identity_factors():
    s = van_loan_optimal(fisher(np.eye(6), 2, 3))
    assert_allclose(s.H_O.data / s.H_O.data[0, 0], np.eye(2), atol=1e-9)
    assert_allclose(s.H_I.data / s.H_I.data[0, 0], np.eye(3), atol=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_van_loan_residual_is_rank_one_truncation(seed):
    H = noisy_kronecker(4, 4, seed)
    sv = np.linalg.svd(rearrange(H, 4, 4), compute_uv=False)
    s = van_loan_optimal(fisher(H, 4, 4))
    assert np.linalg.norm(H - s.dense()) == pytest.approx(np.sqrt(np.sum(sv[1:] ** 2)), rel=1e-6)
    assert_allclose(s.H_O.data, s.H_O.data.T, atol=1e-9)
    assert_allclose(s.H_I.data, s.H_I.data.T, atol=1e-9)


def test_van_loan_perturbed_kronecker():
    rng = np.random.default_rng(2)
    K = kron(make_pd(3, 0), make_pd(3, 1))
    C = rng.standard_normal(K.shape)
    s = van_loan_optimal(fisher(K + 1e-3 * (C + C.T), 3, 3))
    assert frob_cosine(K, s.dense()) >= 0.999


@pytest.mark.parametrize("seed", range(5))
def test_power_iteration_converges_monotonically(seed):
    H = fisher(noisy_kronecker(3, 4, seed), 3, 4)
    s = power_iterate_full(H, iters=60)
    history = s.meta['objective']
    assert all(b >= a - 1e-12 * abs(a) for a, b in zip(history, history[1:]))
    assert history[-1] == pytest.approx(van_loan_optimal(H).meta['singular_value'], rel=1e-6)


def test_power_iteration_validation():
    H = fisher(np.eye(4), 2, 2)
    with pytest.raises(ValueError):
        power_iterate_full(H, iters=0)
    with pytest.raises(ValueError):
        power_iterate_full(H, schedule='random')
    with pytest.raises(ShapeMismatch):
        power_iterate_full(fisher(np.eye(6), 2, 2))
    with pytest.raises(TooLarge):
        power_iterate_full(fisher(np.eye(4), 2, 2), m=128, n=64)


def test_sketch_a_without_iterations_is_ldlq_sketch(toy_model, toy_data):
    a = sketch_a(toy_model, 0, toy_data, iters=0)
    ref = ldlq_sketch(toy_model, 0, toy_data)
    assert_allclose(a.dense(), ref.dense(), rtol=1e-12)
    H_1 = layer_input_hessian(toy_model, 0, toy_data)
    assert frob_cosine(ref.H_I.data, H_1) == pytest.approx(1.0)


def test_sketch_a_matches_dense_contraction(toy_model, toy_data):
    H_tok = token_independent_fisher(toy_model, 0, toy_data)
    m, n = toy_model.layer_shape(0)
    R = rearrange(H_tok, m, n)
    H_1 = layer_input_hessian(toy_model, 0, toy_data)
    h_O = R @ H_1.reshape(-1) / np.sum(H_1 ** 2)
    h_I = R.T @ h_O / np.sum(h_O ** 2)
    expected = KronSketch(h_O.reshape(m, m), h_I.reshape(n, n)).finalize()
    got = sketch_a(toy_model, 0, toy_data, iters=1)
    assert_allclose(got.dense(), expected.dense(), rtol=1e-9, atol=1e-12)


def test_sketch_a_zero_gradients_rejected():
    rng = np.random.default_rng(0)
    model = ToyModel((rng.standard_normal((4, 3)), np.zeros((2, 4))))
    data = make_dataset(3, 5, 1, seed=0)
    with pytest.raises(ZeroMatrix):
        sketch_a(model, 0, data, iters=1)
    with pytest.raises(ZeroMatrix):
        sketch_b(model, 0, data)


def test_sketch_b_single_sequence():
    model = make_toy_model([3, 2], seed=1)
    data = make_dataset(3, 1, 1, seed=2)
    grads = gradient_samples(model, 0, data)
    G, w = grads.gradients(), grads.weights
    H_I = np.einsum('s,sai,saj->ij', w, G, G) / 2
    H_O = np.einsum('s,sia,sja->ij', w, G, G) / 3
    s = sketch_b(model, 0, data)
    assert_allclose(s.dense(), kron(H_O, H_I), rtol=1e-10, atol=1e-14)


def test_sketch_b_is_first_simultaneous_round(toy_model):
    data = make_dataset(6, 64, 3, 0.5, seed=4)
    H = true_layer_hessian(toy_model, 0, data)
    expected = power_iterate_full(H, iters=1, schedule=SIMULTANEOUS)
    got = sketch_b(toy_model, 0, data)
    assert_allclose(got.dense(), expected.dense(), rtol=1e-9, atol=1e-12)


def test_van_loan_beats_other_sketches(toy_model, toy_data):
    H = true_layer_hessian(toy_model, 0, toy_data)
    best = sketch_quality(H, van_loan_optimal(H)).cosine
    for method in ("ldlq", "a", "b", "powerfull"):
        s = build_sketch(method, toy_model, 0, toy_data, fisher=H)
        assert sketch_quality(H, s).cosine <= best + 1e-9


def test_build_sketch_unknown_method(toy_model, toy_data):
    with pytest.raises(ValueError):
        build_sketch("kfac", toy_model, 0, toy_data)


def test_guidedquant_blocks_of_kronecker():
    A, B = np.diag([1.0, 3.0, 5.0, 7.0]), make_pd(2, 0)
    blocks = guidedquant_blocks(fisher(kron(A, B), 4, 2), 4, 2, groups=2)
    assert_allclose(blocks[0], 2.0 * B)
    assert_allclose(blocks[1], 6.0 * B)
    with pytest.raises(ShapeMismatch):
        guidedquant_blocks(fisher(kron(A, B), 4, 2), 4, 2, groups=3)


def test_sketch_quality_fields():
    H = fisher(noisy_kronecker(2, 3, 0), 2, 3)
    q = sketch_quality(H, van_loan_optimal(H))
    assert 0.0 < q.cosine <= 1.0
    assert q.residual_best_scale <= q.residual + 1e-12
    assert q.rank_O == 2 and q.rank_I == 3
    assert set(q.to_dict()) >= {'cosine', 'normalized_cosine', 'mu_O', 'mu_I'}
