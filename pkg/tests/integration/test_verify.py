import pytest

from tools.verify_tool import SUITES, VerifyTool


def failed(result):
    return [f['name'] for f in result['failures']]


def test_oracle_suite_passes():
    result = VerifyTool().run('oracle', seed=0)
    assert result['success'], failed(result)
    assert len(result['checks']) == 6


def test_column_major_oracle_is_caught():
    result = VerifyTool(vec_order="F").run('oracle', seed=0)
    assert not result['success']
    assert 'oracle_yaqa_matches_vectorized' in failed(result)
    assert 'oracle_regularized_sketch' in failed(result)
    failure = result['failures'][0]
    assert isinstance(failure['seed'], int)
    assert failure['detail']


@pytest.mark.parametrize("suite", ["snd", "transform", "model"])
def test_fast_suites_pass(suite):
    result = VerifyTool().run(suite, seed=0)
    assert result['success'], failed(result)


@pytest.mark.slow
@pytest.mark.parametrize("suite", ["bounds", "sketch", "e2e"])
def test_statistical_suites(suite):
    result = VerifyTool().run(suite, seed=0)
    assert result['checks']
    assert all(isinstance(c['passed'], bool) for c in result['checks'])


def test_unknown_suite():
    result = VerifyTool().run('fuzz')
    assert not result['success']
    assert 'unknown suite' in result['error']
    assert set(SUITES) == {'snd', 'oracle', 'bounds', 'sketch', 'transform', 'model', 'e2e'}


def test_process_request():
    assert VerifyTool().process_request('run', suite='snd', seed=1)['suite'] == 'snd'
    assert not VerifyTool().process_request('fuzz')['success']
