"""
Data Processor - Utility functions for input validation, standardization and subsetting
Handles all array preparation between the loaders and the models
"""

import logging
from typing import Any, Dict, Optional, Tuple

import numpy as np
import pandas as pd


class DataProcessor:
    """Prepares input arrays and labels for training"""

    def __init__(self):
        self.logger = logging.getLogger(__name__)

    @staticmethod
    def validate_arrays(inputs: np.ndarray,
                        labels: np.ndarray,
                        classes: Optional[int] = None) -> Tuple[bool, str]:
        """
        Validate an (inputs, labels) pair

        Args:
            inputs: Input rows (first axis is the item axis)
            labels: Integer labels, one per row
            classes: Number of classes, if known

        Returns:
            Tuple[bool, str]: (is_valid, error_message)
        """
        if inputs is None or labels is None:
            return False, "inputs or labels missing"

        if inputs.shape[0] != labels.shape[0]:
            return False, f"{inputs.shape[0]} inputs but {labels.shape[0]} labels"

        if not np.all(np.isfinite(inputs)):
            return False, "non-finite input values"

        if labels.size and not np.issubdtype(labels.dtype, np.integer):
            return False, f"labels must be integers, got {labels.dtype}"

        if classes is not None and labels.size:
            if labels.min() < 0 or labels.max() >= classes:
                return False, f"labels outside [0, {classes})"

        return True, "arrays are valid"

    @staticmethod
    def standardize(inputs: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Zero-mean / unit-variance columns

        Args:
            inputs: Array of shape (n, features)

        Returns:
            Tuple (standardized, mean, std); zero-variance columns keep std = 1
        """
        mean = inputs.mean(axis=0)
        std = inputs.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        return (inputs - mean) / std, mean, std

    @staticmethod
    def apply_standardization(inputs: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
        return (inputs - np.asarray(mean)) / np.asarray(std)

    @staticmethod
    def one_hot(labels: np.ndarray, classes: int) -> np.ndarray:
        return np.eye(classes)[np.asarray(labels, dtype=np.int64)]

    @staticmethod
    def take_subset(inputs: np.ndarray, labels: np.ndarray,
                    limit: Optional[int]) -> Tuple[np.ndarray, np.ndarray]:
        """First `limit` items (all items when limit is None or larger than the set)"""
        if limit is None or limit >= len(labels):
            return inputs, labels
        return inputs[:limit], labels[:limit]

    def get_data_statistics(self, inputs: np.ndarray, labels: np.ndarray) -> Dict[str, Any]:
        """
        Summary of a dataset for logging

        Args:
            inputs: Input rows
            labels: Integer labels

        Returns:
            Dict: item count, feature shape, value range and class balance
        """
        counts = pd.Series(labels).value_counts().sort_index()
        stats = {
            'items': int(len(labels)),
            'feature_shape': tuple(int(d) for d in inputs.shape[1:]),
            'min': float(inputs.min()) if inputs.size else float('nan'),
            'max': float(inputs.max()) if inputs.size else float('nan'),
            'class_counts': {int(k): int(v) for k, v in counts.items()},
        }
        self.logger.debug(f"Dataset statistics: {stats}")
        return stats
