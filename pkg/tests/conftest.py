"""Shared fixtures: small models, moons data, synthetic IDX files and run configs"""

import gzip
import os
import struct
import tempfile

# log files of the test session stay out of the repository
os.environ.setdefault('NPN_LOG_DIR', tempfile.mkdtemp(prefix='npn-test-logs-'))

import numpy as np
import pytest
import yaml

from data_loader import DataLoader, fixed_projection
from gates import K_INFINITY
from lifecycle import RunMode, StagePlan, initialize_gates
from plastic_net import build_model
from utils.logger import setup_logger

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
EXPERIMENTS_DIR = os.path.join(REPO_ROOT, 'experiments')


@pytest.fixture(scope='session', autouse=True)
def file_only_loggers():
    """Named loggers write to NPN_LOG_DIR only, so captured stdout stays clean"""
    for name in ('controller', 'training', 'performance', 'error'):
        setup_logger(name, log_to_console=False)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def projection():
    return fixed_projection(0)


@pytest.fixture
def moons_model(projection):
    """Moons MLP straight out of build_model (every gate active at phi = 0)"""
    return build_model('moons-mlp', k=K_INFINITY, seed_model=0, seed_gates=1, projection=projection)


@pytest.fixture
def sparsify_model(moons_model):
    """Moons MLP initialized for sparsification (phi = 3/7) at the pretrain k"""
    initialize_gates(moons_model, StagePlan(mode=RunMode.SPARSIFY, k_adapt=7.0))
    return moons_model


@pytest.fixture(scope='session')
def moons_split():
    train, test, stats = DataLoader().load_moons(1000, 0.1, seed=2)
    return train, test, stats


def write_idx_images(path: str, images: np.ndarray, compress: bool = False) -> str:
    count, rows, cols = images.shape
    blob = struct.pack('>iiii', 2051, count, rows, cols) + images.astype(np.uint8).tobytes()
    opener = gzip.open if compress else open
    with opener(path, 'wb') as f:
        f.write(blob)
    return path


def write_idx_labels(path: str, labels: np.ndarray, magic: int = 2049, compress: bool = False) -> str:
    blob = struct.pack('>ii', magic, len(labels)) + np.asarray(labels, dtype=np.uint8).tobytes()
    opener = gzip.open if compress else open
    with opener(path, 'wb') as f:
        f.write(blob)
    return path


@pytest.fixture
def mnist_dir(tmp_path):
    """Directory with tiny standard-named MNIST files (20 train, 10 test images)"""
    generator = np.random.default_rng(7)
    for split, count in (('train', 20), ('t10k', 10)):
        images = generator.integers(0, 256, size=(count, 28, 28))
        labels = np.arange(count) % 10
        write_idx_images(str(tmp_path / f"{split}-images-idx3-ubyte"), images)
        write_idx_labels(str(tmp_path / f"{split}-labels-idx1-ubyte"), labels)
    return tmp_path


def write_config(path, values: dict) -> str:
    with open(path, 'w') as f:
        yaml.safe_dump(values, f)
    return str(path)


@pytest.fixture
def tiny_moons_config(tmp_path):
    """Flat config for a six-epoch moons sparsify run writing under tmp_path"""
    values = {
        'experiment.name': 'tiny_moons',
        'dataset': 'moons',
        'template': 'moons-mlp',
        'mode': 'sparsify',
        'stage.pretrain_epochs': 2,
        'stage.adapt_epochs': 2,
        'stage.finetune_epochs': 2,
        'penalty.lambdas': [1.0, 1.0],
        'penalty.scale': 'per_sample',
        'optim.batch_size': 50,
        'data.n_samples': 200,
        'output.dir': str(tmp_path / 'runs'),
        'output.snapshot_epochs': [1],
    }
    return write_config(tmp_path / 'tiny_moons.yaml', values)
