"""Command-line surface and end-to-end training runs"""

import json
import os

import pandas as pd
import pytest

from conftest import EXPERIMENTS_DIR, REPO_ROOT
from experiment_loader import ExperimentConfig
from main_controller import main, parse_overrides, replicate_seeds
from training_engine import TrainingEngine
from utils.errors import ConfigurationError

SETTINGS = os.path.join(REPO_ROOT, 'config.yaml')


def run_cli(*args):
    return main(['--settings', SETTINGS, *args])


@pytest.fixture
def trained_run(tiny_moons_config, tmp_path, monkeypatch):
    monkeypatch.delenv('NPN_OUT_DIR', raising=False)
    assert run_cli('train', '--config', tiny_moons_config) == 0
    return tmp_path / 'runs' / 'tiny_moons' / 'seed0'


class TestUtilityCommands:

    def test_count_params(self, capsys):
        assert run_cli('count-params', '--template', 'lenet5', '--arch', '7-9-109-30') == 0
        assert capsys.readouterr().out.strip().endswith('5320')

    @pytest.mark.parametrize('arch', ['7-9', '7-x-109-30', '21-50-800-500'])
    def test_count_params_rejects_bad_arch(self, arch):
        assert run_cli('count-params', '--template', 'lenet5', '--arch', arch) == 2

    def test_verify_arm(self, capsys):
        assert run_cli('verify-arm', '--vars', '4', '--samples', '2000', '--objective', 'constant') == 0
        assert 'PASS' in capsys.readouterr().out

    @pytest.mark.parametrize('num_vars, seed', [('5', '4'), ('8', '0'), ('8', '3'), ('8', '7')])
    def test_verify_arm_constant_objective_seeds(self, num_vars, seed, capsys):
        assert run_cli('verify-arm', '--vars', num_vars, '--samples', '10000', '--k', '1', '--gate', 'sigmoid',
                       '--seed', seed, '--objective', 'constant') == 0
        assert 'PASS' in capsys.readouterr().out

    def test_export_moons(self, tmp_path):
        out = tmp_path / 'moons.csv'
        assert run_cli('export-moons', '--n', '100', '--seed', '3', '--out', str(out)) == 0
        assert len(pd.read_csv(out)) == 100

    def test_export_moons_odd_size(self, tmp_path):
        assert run_cli('export-moons', '--n', '7', '--out', str(tmp_path / 'm.csv')) == 2

    def test_parse_overrides(self):
        assert parse_overrides(['optim.lr=0.01', 'mode = expand']) == {'optim.lr': '0.01', 'mode': 'expand'}
        with pytest.raises(ConfigurationError):
            parse_overrides(['optim.lr'])


class TestTrainCommand:

    def test_run_directory(self, trained_run):
        for name in ('metrics.csv', 'stages.csv', 'arch.json', 'config.yaml', 'checkpoint.npn',
                     'checkpoint_epoch1.npn', 'boundary.csv', 'gate_histogram.csv', 'moons.csv'):
            assert (trained_run / name).exists(), name
        metrics = pd.read_csv(trained_run / 'metrics.csv')
        assert len(metrics) == 6
        assert metrics['stage'].tolist() == ['pretrain'] * 2 + ['adapt'] * 2 + ['finetune'] * 2
        assert metrics['k'].tolist() == [5000.0, 5000.0, 7.0, 7.0, 5000.0, 5000.0]
        assert (metrics['mask_disagreement'][metrics['stage'] != 'adapt'] == 0.0).all()
        assert len(pd.read_csv(trained_run / 'stages.csv')) == 3
        assert len(pd.read_csv(trained_run / 'boundary.csv')) == 100 * 100

    def test_failed_check_exit_code(self, tiny_moons_config, monkeypatch):
        monkeypatch.delenv('NPN_OUT_DIR', raising=False)
        assert run_cli('train', '--config', tiny_moons_config, '--set', 'check.min_test_acc=1.5', '--check') == 4

    @pytest.mark.parametrize('override', ['penalty.lambdas=[1, 2, 3]', 'optim.lr', 'stage.k_adapt=-1'])
    def test_invalid_config_exit_code(self, tiny_moons_config, override):
        assert run_cli('train', '--config', tiny_moons_config, '--set', override) == 2

    def test_missing_config(self, tmp_path):
        assert run_cli('train', '--config', str(tmp_path / 'absent.yaml')) == 2

    def test_exports_from_checkpoint(self, trained_run):
        checkpoint = str(trained_run / 'checkpoint.npn')
        boundary = trained_run / 'grid.csv'
        assert run_cli('export-boundary', '--checkpoint', checkpoint, '--resolution', '5',
                       '--out', str(boundary)) == 0
        assert len(pd.read_csv(boundary)) == 25
        histogram = trained_run / 'hist.csv'
        assert run_cli('export-histogram', '--checkpoint', checkpoint, '--bins', '4',
                       '--out', str(histogram)) == 0
        assert len(pd.read_csv(histogram)) == 8

    def test_pretrain_checkpoint_histogram_uses_adapt_k(self, trained_run):
        checkpoint = str(trained_run / 'checkpoint_epoch1.npn')
        histogram = trained_run / 'pretrain_hist.csv'
        assert run_cli('export-histogram', '--checkpoint', checkpoint, '--bins', '100',
                       '--out', str(histogram)) == 0
        rows = pd.read_csv(histogram)
        for _, layer in rows.groupby('layer'):
            assert layer['count'].to_numpy().argmax() == 95
        explicit = trained_run / 'saturated_hist.csv'
        assert run_cli('export-histogram', '--checkpoint', checkpoint, '--bins', '100', '--k', '5000',
                       '--out', str(explicit)) == 0
        for _, layer in pd.read_csv(explicit).groupby('layer'):
            assert layer['count'].to_numpy().argmax() == 99

    def test_corrupt_checkpoint_exit_code(self, tmp_path):
        path = tmp_path / 'broken.npn'
        path.write_bytes(b'garbage')
        assert run_cli('export-histogram', '--checkpoint', str(path)) == 2

    def test_seed_replicates_write_one_directory_each(self, tiny_moons_config, tmp_path, monkeypatch, capsys):
        monkeypatch.delenv('NPN_OUT_DIR', raising=False)
        assert run_cli('train', '--config', tiny_moons_config, '--set', 'check.min_test_acc=0.0',
                       '--check', '--seeds', '0', '1') == 0
        assert 'runs: 2' in capsys.readouterr().out
        for base in (0, 1):
            run_dir = tmp_path / 'runs' / 'tiny_moons' / f"seed{base}"
            with open(run_dir / 'arch.json') as f:
                payload = json.load(f)
            assert 'test_acc' in payload and 'midband_fraction' in payload
            config = ExperimentConfig.from_yaml(str(run_dir / 'config.yaml'))
            assert {key: config[key] for key in replicate_seeds(base)} == replicate_seeds(base)


class TestReplicateSeeds:

    def test_deterministic(self):
        assert replicate_seeds(5) == replicate_seeds(5)

    def test_neighbouring_bases_share_no_seed(self):
        seen = [value for base in range(10) for value in replicate_seeds(base).values()]
        assert len(set(seen)) == len(seen)

    def test_seeds_are_valid_config_values(self):
        config = ExperimentConfig.from_flat({}).with_overrides(replicate_seeds(3))
        assert all(0 <= config[key] < 2 ** 32 for key in ('seeds.model', 'seeds.gates', 'seeds.data'))


class TestTrainingEngine:

    def test_runs_are_reproducible(self, tiny_moons_config, tmp_path):
        config = ExperimentConfig.from_yaml(tiny_moons_config)
        engine = TrainingEngine()
        first = engine.run(config, run_dir=str(tmp_path / 'a'))
        second = engine.run(config, run_dir=str(tmp_path / 'b'))
        assert (tmp_path / 'a' / 'metrics.csv').read_text() == (tmp_path / 'b' / 'metrics.csv').read_text()
        assert first.summary()['arch'] == second.summary()['arch']

    def test_expand_run_grows(self, tmp_path):
        config = ExperimentConfig.from_flat({
            'experiment.name': 'tiny_expand', 'mode': 'expand',
            'stage.pretrain_epochs': 1, 'stage.adapt_epochs': 4, 'stage.finetune_epochs': 1,
            'stage.k_adapt': 0.5, 'expansion.initial_arch': '3-3', 'expansion.plateau_window': 1,
            'expansion.plateau_rel_tol': 1.0, 'penalty.lambdas': [-0.01, -0.01], 'penalty.scale': 'per_sample',
            'optim.batch_size': 50, 'data.n_samples': 200,
        })
        result = TrainingEngine().run(config, run_dir=str(tmp_path))
        assert result.expansions
        assert result.initial_param_count == 15
        assert result.peak_adapt_param_count > result.initial_param_count
        assert result.growth_factor > 1.0

    def test_mnist_run(self, mnist_dir, tmp_path):
        config = ExperimentConfig.from_flat({
            'experiment.name': 'tiny_mnist', 'dataset': 'mnist', 'template': 'lenet5',
            'stage.pretrain_epochs': 1, 'stage.adapt_epochs': 1, 'stage.finetune_epochs': 1,
            'penalty.lambdas': [0.1], 'optim.batch_size': 10, 'data.mnist_dir': str(mnist_dir),
        })
        result = TrainingEngine({'histogram_bins': 5}).run(config, run_dir=str(tmp_path / 'run'))
        assert len(result.records) == 3
        assert len(result.finalize.arch.counts) == 4
        assert 0.0 <= result.test_acc <= 1.0
        assert not (tmp_path / 'run' / 'boundary.csv').exists()
        assert len(pd.read_csv(tmp_path / 'run' / 'gate_histogram.csv')) == 20


@pytest.mark.slow
class TestShippedExperiments:

    @pytest.mark.parametrize('name', ['moons_sparsify', 'moons_expand', 'moons_baseline'])
    def test_moons_checks_hold_over_three_seeds(self, name, tmp_path, monkeypatch):
        monkeypatch.setenv('NPN_OUT_DIR', str(tmp_path))
        assert run_cli('train', '--config', os.path.join(EXPERIMENTS_DIR, name), '--check',
                       '--seeds', '0', '1', '2') == 0

    def test_mnist_reduced(self, tmp_path, monkeypatch):
        if not os.environ.get('NPN_MNIST_DIR'):
            pytest.skip('NPN_MNIST_DIR not set')
        monkeypatch.setenv('NPN_OUT_DIR', str(tmp_path))
        assert run_cli('train', '--config', os.path.join(EXPERIMENTS_DIR, 'mnist_reduced'), '--check') == 0
