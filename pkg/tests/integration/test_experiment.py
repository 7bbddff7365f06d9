import asyncio
import json
from pathlib import Path

import pytest
from numpy.testing import assert_allclose

from experiment_config import ExperimentConfig, ExperimentConfigLoader
from kronround.rounding import round_with
from kronround.transform import RHT, IncoherenceTransforms
from tools import experiment_tool
from tools.experiment_tool import (
    RESULT_COLUMNS, RESULTS_HEADER, ExperimentTool, read_results_csv, setup_trial, trial_seeds,
)

DATA = Path(__file__).parent.parent / 'data'


@pytest.fixture
def config():
    return ExperimentConfigLoader(str(DATA / 'tiny_config.json')).load_config()


def run(config, out_dir, threads=1):
    return asyncio.run(ExperimentTool().run(config, str(out_dir), threads))


def test_results_layout(config, tmp_path):
    result = run(config, tmp_path)
    assert result['success']
    assert result['rows'] == config.trials * 2 * len(config.algorithms)
    lines = (tmp_path / 'results.csv').read_text().splitlines()
    assert lines[0] == RESULTS_HEADER
    assert lines[1].split(',') == RESULT_COLUMNS
    results = read_results_csv(tmp_path / 'results.csv')
    assert list(results['trial'].unique()) == [0, 1]
    assert set(results.loc[results['algorithm'] == 'ldlq', 'sketch']) == {'ldlq'}
    assert set(results.loc[results['algorithm'] == 'yaqa', 'sketch']) == {'vanloan'}
    assert (results['kl'] >= 0).all()
    assert (results['proxy_error'] >= 0).all()
    assert (tmp_path / 'timings.csv').exists()


def test_summary_medians(config, tmp_path):
    run(config, tmp_path)
    with open(tmp_path / 'summary.json') as f:
        summary = json.load(f)
    assert summary['trials'] == 2
    assert len(summary['medians']) == 2 * len(config.algorithms)
    assert summary['config']['model']['dims'] == [4, 4, 3]


def test_results_are_deterministic(config, tmp_path):
    run(config, tmp_path / 'a', threads=1)
    run(config, tmp_path / 'b', threads=2)
    assert (tmp_path / 'a' / 'results.csv').read_bytes() == (tmp_path / 'b' / 'results.csv').read_bytes()


def test_seed_changes_results(config, tmp_path):
    run(config, tmp_path / 'a')
    run(config.model_copy(update={'seed': 1}), tmp_path / 'b')
    assert (tmp_path / 'a' / 'results.csv').read_bytes() != (tmp_path / 'b' / 'results.csv').read_bytes()


def test_trial_seeds_are_distinct(config):
    assert trial_seeds(config, 0) != trial_seeds(config, 1)
    assert len(set(trial_seeds(config, 0))) == 6


def test_fine_grid_gives_near_zero_kl(tmp_path):
    config = ExperimentConfig.model_validate({
        'model': {'dims': [4, 4, 3]},
        'data': {'count': 8, 'seq_len': 2, 'eval_count': 16},
        'quantizer': {'bits': 16, 'mode': 'nearest', 'scale': {'step': 1e-4}},
        'algorithms': ['nearest', 'yaqa'],
        'trials': 1,
    })
    rows, _ = ExperimentTool().run_trial(config, 0)
    for row in rows:
        assert row['kl'] < 1e-6
        assert row['proxy_error'] < 1e-6


def test_incoherence_processing_run(config):
    rows, timings = ExperimentTool().run_trial(config.model_copy(update={'incoherence': True}), 0)
    assert len(rows) == len(timings) == 2 * len(config.algorithms)
    assert all(row['kl'] >= 0 for row in rows)


def test_incoherence_guidedquant_blocks_come_from_processed_fisher(config, monkeypatch):
    config = config.model_copy(update={'incoherence': True, 'algorithms': ['guidedquant(4)'], 'bit_widths': [4]})
    seen = []

    def capture(name, problem, blocks=None):
        seen.append(blocks)
        return round_with(name, problem, blocks)

    monkeypatch.setattr(experiment_tool, 'round_with', capture)
    ExperimentTool().run_trial(config, 0)

    setup = setup_trial(config, 0)
    transforms = IncoherenceTransforms(RHT.random(4, setup.ip_seeds[0]), RHT.random(4, setup.ip_seeds[1]))
    H_ip = transforms.conjugate_dense(setup.fisher.H).data.reshape(4, 4, 4, 4)
    assert len(seen) == 1 and len(seen[0]) == 4
    for j, block in enumerate(seen[0]):
        assert_allclose(block, H_ip[j, :, j, :], atol=1e-12)


def test_missing_config_is_created(tmp_path):
    path = tmp_path / 'experiment_config.json'
    config = ExperimentConfigLoader(str(path)).load_config()
    assert path.exists()
    assert config == ExperimentConfig()


def test_overrides_merge_over_file():
    config = ExperimentConfigLoader(str(DATA / 'tiny_config.json')).load_config({'seed': 5, 'data': {'count': 4}})
    assert config.seed == 5
    assert config.data.count == 4
    assert config.data.seq_len == 2
