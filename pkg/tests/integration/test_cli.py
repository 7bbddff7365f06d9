import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

import main
from main import cli
from tools.matrix_io import MatrixStore

DATA = Path(__file__).parent.parent / 'data'
TINY = str(DATA / 'tiny_config.json')


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def bundle(runner, tmp_path):
    out = tmp_path / 'bundle'
    result = runner.invoke(cli, ['sketch', '--config', TINY, '--method', 'vanloan', '--out', str(out)])
    assert result.exit_code == 0, result.output
    return out


def test_sketch_writes_bundle(runner, bundle):
    assert (bundle / 'weights.krnd').exists()
    assert (bundle / 'fisher.krnd').exists()
    assert (bundle / 'model' / 'model.json').exists()
    meta = json.loads((bundle / 'meta.json').read_text())
    assert meta['sketch']['method'] == 'vanloan'
    assert 0.0 < meta['quality']['cosine'] <= 1.0


def test_round_bundle(runner, bundle, tmp_path):
    out = tmp_path / 'rounded'
    result = runner.invoke(cli, ['round', '--bundle', str(bundle), '--config', TINY, '--out', str(out)])
    assert result.exit_code == 0, result.output
    payload = json.loads(result.output)
    assert payload['success']
    assert payload['result']['quantizer']['bits'] == 4
    assert (out / 'codes.krnd').exists()
    assert (out / 'result.json').exists()


def test_round_with_incoherence(runner, bundle):
    result = runner.invoke(cli, ['round', '--bundle', str(bundle), '--bits', '8', '--ip', 'on'])
    assert result.exit_code == 0, result.output
    assert 'proxy_error_original' in json.loads(result.output)['result']


def test_unknown_algorithm_exits_with_error(runner, bundle):
    result = runner.invoke(cli, ['round', '--bundle', str(bundle), '--algorithm', 'gptq'])
    assert result.exit_code == 1
    assert 'gptq' in json.loads(result.output)['error']


def test_oracle_matches_round(runner, bundle, tmp_path):
    out = tmp_path / 'rounded'
    rounded = runner.invoke(cli, ['round', '--bundle', str(bundle), '--config', TINY, '--out', str(out)])
    assert rounded.exit_code == 0, rounded.output
    oracle = runner.invoke(cli, ['oracle', '--bundle', str(bundle), '--config', TINY, '--hessian', 'sketch'])
    assert oracle.exit_code == 0, oracle.output
    payload = json.loads(oracle.output)
    assert payload['result']['algorithm'] == 'vec-oracle'
    assert payload['result']['hessian'] == 'sketch'
    codes = MatrixStore().read_matrix(out / 'codes.krnd')
    assert np.array_equal(np.array(payload['codes']), codes)


def test_oracle_prefers_fisher(runner, bundle):
    result = runner.invoke(cli, ['oracle', '--bundle', str(bundle), '--bits', '8'])
    assert result.exit_code == 0, result.output
    assert json.loads(result.output)['result']['hessian'] == 'fisher'


def test_bound_check(runner, bundle, tmp_path):
    out = tmp_path / 'bounds.csv'
    result = runner.invoke(cli, ['bound-check', '--bundle', str(bundle), '--trials', '5', '--out', str(out)])
    assert result.exit_code == 0, result.output
    assert json.loads(result.output)['trials'] == 5
    assert out.exists()


def test_invalid_config_exits_with_validation_error(runner, tmp_path):
    result = runner.invoke(cli, ['run', '--config', str(DATA / 'invalid_config.json'), '--out', str(tmp_path)])
    assert result.exit_code == 1
    payload = json.loads(result.output)
    assert payload['error_type'] == 'validation'
    assert any(d.startswith('quantizer.bits') for d in payload['details'])


def test_run_writes_results(runner, tmp_path):
    result = runner.invoke(cli, ['run', '--config', TINY, '--out', str(tmp_path), '--threads', '2'])
    assert result.exit_code == 0, result.output
    assert (tmp_path / 'results.csv').read_text().startswith('# kronround results v1')


def test_verify_snd_passes(runner):
    result = runner.invoke(cli, ['verify', '--suite', 'snd'])
    assert result.exit_code == 0, result.output
    assert json.loads(result.output)['failures'] == []


def test_verify_failure_exit_code(runner, monkeypatch):
    monkeypatch.setattr(main, 'call', lambda tool, **kwargs: {'success': False, 'failures': [{'name': 'x', 'seed': 3}]})
    result = runner.invoke(cli, ['verify', '--suite', 'oracle'])
    assert result.exit_code == 2


def test_list_tools(runner):
    result = runner.invoke(cli, ['list-tools'])
    assert result.exit_code == 0
    for name in ('round', 'oracle', 'sketch', 'bound_check', 'run_experiment', 'verify', 'matrix_info'):
        assert f"\n{name}:" in result.output
