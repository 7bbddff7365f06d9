from pathlib import Path

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from kronround.model import make_toy_model
from tools.matrix_io import HEADER, MAGIC, MatrixStore, ProblemBundle

DATA = Path(__file__).parent.parent / 'data'


@pytest.fixture
def store():
    return MatrixStore()


def test_container_round_trip(store, tmp_path):
    A = np.random.default_rng(0).standard_normal((3, 5))
    store.write_matrix(tmp_path / 'a.krnd', A)
    assert_array_equal(store.read_matrix(tmp_path / 'a.krnd'), A)
    raw = (tmp_path / 'a.krnd').read_bytes()
    assert raw[:4] == MAGIC
    assert len(raw) == HEADER.size + 3 * 5 * 8


def test_vector_stored_as_row(store, tmp_path):
    store.write_matrix(tmp_path / 'v.krnd', np.arange(4.0))
    assert store.read_matrix(tmp_path / 'v.krnd').shape == (1, 4)


def test_bad_magic_rejected(store, tmp_path):
    path = tmp_path / 'bad.krnd'
    path.write_bytes(HEADER.pack(b'NOPE', 1, 1, 1) + b'\0' * 8)
    with pytest.raises(ValueError, match='bad magic'):
        store.read_matrix(path)


def test_truncated_payload_rejected(store, tmp_path):
    path = tmp_path / 'short.krnd'
    path.write_bytes(HEADER.pack(MAGIC, 1, 2, 2) + b'\0' * 8)
    with pytest.raises(ValueError, match='payload'):
        store.read_matrix(path)


def test_unknown_version_rejected(store, tmp_path):
    path = tmp_path / 'v2.krnd'
    path.write_bytes(HEADER.pack(MAGIC, 2, 1, 1) + b'\0' * 8)
    with pytest.raises(ValueError, match='version'):
        store.read_matrix(path)


def test_csv_load(store, tmp_path):
    assert_allclose(store.load(DATA / 'small_h_in.csv'), [[4.0, 2.0], [2.0, 3.0]])
    with pytest.raises(ValueError):
        store.load(tmp_path / 'matrix.npy')


def test_pattern_csv(store, tmp_path):
    (tmp_path / 'mask.csv').write_text("0,0,0\n1,0,0\n0,1,0\n")
    pattern = store.read_pattern_csv(tmp_path / 'mask.csv')
    assert pattern.mask[1, 0] and pattern.mask[2, 1]
    assert pattern.mask.sum() == 2


def test_bundle_defaults_output_factor_to_identity(store, tmp_path):
    store.write_bundle(tmp_path, ProblemBundle(weights=np.ones((3, 2)), h_in=np.eye(2), meta={'note': 'x'}))
    bundle = store.read_bundle(tmp_path)
    assert_array_equal(bundle.h_out, np.eye(3))
    assert bundle.fisher is None and bundle.h1 is None
    assert bundle.meta == {'note': 'x'}


def test_missing_bundle(store, tmp_path):
    with pytest.raises(FileNotFoundError):
        store.read_bundle(tmp_path)


def test_model_round_trip(store, tmp_path):
    model = make_toy_model([4, 3, 2], seed=7, mix=0.25)
    store.save_model(tmp_path, model)
    loaded = store.load_model(tmp_path)
    assert loaded.dims == [4, 3, 2]
    assert loaded.mix == 0.25 and loaded.seed == 7
    for a, b in zip(model.weights, loaded.weights):
        assert_array_equal(a, b)


def test_describe(store, tmp_path):
    store.write_matrix(tmp_path / 'h.krnd', np.eye(3))
    info = store.describe(tmp_path / 'h.krnd')
    assert info['success']
    assert info['shape'] == [3, 3]
    assert info['symmetric']
    assert info['frobenius_norm'] == pytest.approx(np.sqrt(3))
    assert not store.describe(tmp_path / 'missing.krnd')['success']
