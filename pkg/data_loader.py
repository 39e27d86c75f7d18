"""
Data Loader - Two-moons generation, fixed random projection, MNIST IDX parsing and batching
Every generator is a pure function of its parameters and seed
"""

import gzip
import logging
import os
import struct
from dataclasses import dataclass
from typing import Any, Dict, Iterator, Optional, Tuple, Union

import numpy as np
import pandas as pd
from sklearn.datasets import make_moons as sklearn_make_moons

from utils.data_processor import DataProcessor
from utils.errors import ConfigurationError, ParseError, UsageError

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049

MNIST_FILES = {
    'train': ('train-images-idx3-ubyte', 'train-labels-idx1-ubyte'),
    'test': ('t10k-images-idx3-ubyte', 't10k-labels-idx1-ubyte'),
}

logger = logging.getLogger(__name__)


@dataclass
class Dataset:
    """Inputs with one integer label per row"""
    inputs: np.ndarray
    labels: np.ndarray
    split: str = 'train'
    classes: int = 2

    def __post_init__(self):
        valid, message = DataProcessor.validate_arrays(self.inputs, self.labels, self.classes)
        if not valid:
            raise ConfigurationError(f"invalid {self.split} dataset: {message}")

    def __len__(self) -> int:
        return int(self.labels.shape[0])


def make_moons(n: int, noise_std: float = 0.1, seed: int = 0) -> Dataset:
    """
    Two interleaving half circles, n/2 points each

    Class 0 is the upper unit arc centred at the origin, class 1 the lower
    unit arc centred at (1, 0.5).

    Args:
        n: Total number of points (even)
        noise_std: Std of the isotropic Gaussian noise
        seed: Random seed

    Returns:
        Dataset
    """
    if n <= 0 or n % 2:
        raise UsageError(f"moons needs a positive even number of points, got {n}")
    if noise_std < 0:
        raise ConfigurationError("moons noise std must be non-negative")
    inputs, labels = sklearn_make_moons(n_samples=n, noise=noise_std or None, random_state=seed)
    return Dataset(inputs.astype(np.float64), labels.astype(np.int64), split='all', classes=2)


def split_moons(ds: Dataset, seed: int = 0, train_size: int = 500) -> Tuple[Dataset, Dataset]:
    """
    Disjoint uniform random train/test split

    Args:
        ds: Full moons dataset
        seed: Random seed for the permutation
        train_size: Number of training points

    Returns:
        Tuple (train, test)
    """
    if not 0 < train_size <= len(ds):
        raise UsageError(f"train size {train_size} outside [1, {len(ds)}]")
    order = np.random.default_rng(seed).permutation(len(ds))
    train_idx, test_idx = order[:train_size], order[train_size:]
    return (Dataset(ds.inputs[train_idx], ds.labels[train_idx], split='train', classes=ds.classes),
            Dataset(ds.inputs[test_idx], ds.labels[test_idx], split='test', classes=ds.classes))


def fixed_projection(seed: Union[int, np.random.SeedSequence], in_features: int = 2,
                     out_features: int = 100) -> np.ndarray:
    """Standard normal in_features x out_features matrix, frozen by the model that uses it"""
    return np.random.default_rng(seed).standard_normal((in_features, out_features))


def _open(path: str):
    return gzip.open(path, 'rb') if path.endswith('.gz') else open(path, 'rb')


def _read_idx(path: str, expected_magic: int) -> Tuple[Tuple[int, ...], bytes]:
    with _open(path) as f:
        blob = f.read()
    if len(blob) < 8:
        raise ParseError(f"{path}: truncated IDX header", offset=len(blob))
    magic = struct.unpack('>i', blob[:4])[0]
    if magic != expected_magic:
        raise ParseError(f"{path}: bad IDX magic {magic}, expected {expected_magic}", offset=0)
    ndim = blob[3]
    header_end = 4 + 4 * ndim
    if len(blob) < header_end:
        raise ParseError(f"{path}: truncated IDX header", offset=len(blob))
    dims = struct.unpack(f'>{ndim}i', blob[4:header_end])
    needed = header_end + int(np.prod(dims))
    if len(blob) < needed:
        raise ParseError(f"{path}: truncated IDX body, expected {needed} bytes", offset=len(blob))
    return tuple(dims), blob[header_end:needed]


def mnist_load(images_path: str, labels_path: str, limit: Optional[int] = None,
               split: str = 'train') -> Dataset:
    """
    MNIST images and labels from IDX files (plain or gzip)

    Args:
        images_path: IDX3 image file
        labels_path: IDX1 label file
        limit: Keep only the first `limit` items
        split: Split tag

    Returns:
        Dataset with inputs of shape (N, 1, rows, cols) scaled to [0, 1]
    """
    image_dims, pixels = _read_idx(images_path, IMAGE_MAGIC)
    label_dims, raw_labels = _read_idx(labels_path, LABEL_MAGIC)
    if len(image_dims) != 3 or len(label_dims) != 1:
        raise ParseError(f"unexpected IDX ranks {len(image_dims)} / {len(label_dims)}", offset=3)
    if image_dims[0] != label_dims[0]:
        raise ParseError(f"{image_dims[0]} images but {label_dims[0]} labels", offset=4)

    count, rows, cols = image_dims
    inputs = np.frombuffer(pixels, dtype=np.uint8).reshape(count, 1, rows, cols) / 255.0
    labels = np.frombuffer(raw_labels, dtype=np.uint8).astype(np.int64)
    inputs, labels = DataProcessor.take_subset(inputs, labels, limit)
    logger.info(f"Loaded {len(labels)} MNIST {split} items from {os.path.basename(images_path)}")
    return Dataset(inputs, labels, split=split, classes=10)


def find_mnist_files(directory: str, split: str) -> Tuple[str, str]:
    """Locate the standard IDX file pair (optionally .gz) for a split"""
    paths = []
    for base in MNIST_FILES[split]:
        candidates = [os.path.join(directory, base + suffix) for suffix in ('', '.gz')]
        found = next((p for p in candidates if os.path.exists(p)), None)
        if found is None:
            raise ConfigurationError(f"MNIST file {base} not found in {directory}")
        paths.append(found)
    return paths[0], paths[1]


def batches(ds: Dataset, batch_size: int, seed: int, epoch: int) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """
    Shuffled minibatches covering every item once; the last partial batch is kept

    Args:
        ds: Dataset
        batch_size: Items per batch
        seed: Data-order seed
        epoch: Epoch index (mixed into the shuffle)

    Yields:
        Tuple (inputs, labels)
    """
    if batch_size < 1:
        raise ConfigurationError(f"batch size must be positive, got {batch_size}")
    order = np.random.default_rng([seed, epoch]).permutation(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = order[start:start + batch_size]
        yield ds.inputs[idx], ds.labels[idx]


def export_moons_csv(ds: Dataset, path: str) -> str:
    """Write (x1, x2, label) rows"""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    pd.DataFrame({'x1': ds.inputs[:, 0], 'x2': ds.inputs[:, 1], 'label': ds.labels}).to_csv(path, index=False)
    return path


class DataLoader:
    """Builds the train/test datasets an experiment needs"""

    def __init__(self):
        self.logger = logging.getLogger(__name__)
        self.processor = DataProcessor()

    def load_moons(self, n_samples: int, noise_std: float, seed: int) -> Tuple[Dataset, Dataset, Dict[str, Any]]:
        """
        Moons split with inputs standardized on the training half

        Args:
            n_samples: Total points
            noise_std: Noise std
            seed: Data seed

        Returns:
            Tuple (train, test, standardization stats)
        """
        full = make_moons(n_samples, noise_std, seed)
        train, test = split_moons(full, seed, train_size=n_samples // 2)
        train.inputs, mean, std = self.processor.standardize(train.inputs)
        test.inputs = self.processor.apply_standardization(test.inputs, mean, std)
        self.processor.get_data_statistics(train.inputs, train.labels)
        self.logger.info(f"Moons data ready: {len(train)} train / {len(test)} test (noise {noise_std})")
        return train, test, {'input_mean': mean.tolist(), 'input_std': std.tolist()}

    def load_mnist(self, directory: str, train_subset: Optional[int] = None,
                   test_subset: Optional[int] = None) -> Tuple[Dataset, Dataset]:
        """
        MNIST train/test splits from a directory of IDX files

        Args:
            directory: Directory holding the four standard files
            train_subset: Keep the first N training images
            test_subset: Keep the first N test images

        Returns:
            Tuple (train, test)
        """
        if not directory or not os.path.isdir(directory):
            raise ConfigurationError(f"MNIST directory not found: {directory}")
        train = mnist_load(*find_mnist_files(directory, 'train'), limit=train_subset, split='train')
        test = mnist_load(*find_mnist_files(directory, 'test'), limit=test_subset, split='test')
        self.processor.get_data_statistics(train.inputs, train.labels)
        return train, test
