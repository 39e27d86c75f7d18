"""
Run Report - Writes every artifact of a training run into its run directory
metrics.csv, stages.csv, arch.json, config.yaml plus boundary and histogram exports
"""

import json
import logging
import os
from datetime import datetime
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from gates import expected_mask, gate_prob
from lifecycle import FinalizeResult, TrainRecord
from plastic_net import PlasticModel, predict_proba
from utils.data_processor import DataProcessor

METRICS_COLUMNS = ['epoch', 'stage', 'k', 'train_loss', 'penalty', 'test_acc',
                   'active_counts', 'param_count', 'mask_disagreement']

STAGE_COLUMNS = ['stage', 'last_epoch', 'k', 'active_counts', 'arch', 'param_count', 'test_acc',
                 'midband_fraction']

# moons decision-boundary window in raw input coordinates
BOUNDARY_X1 = (-2.5, 3.5)
BOUNDARY_X2 = (-2.0, 2.5)


def metrics_frame(records: Sequence[TrainRecord]) -> pd.DataFrame:
    return pd.DataFrame([r.to_row() for r in records], columns=METRICS_COLUMNS)


def decision_boundary_grid(model: PlasticModel, resolution: int, tau: float = 0.5) -> pd.DataFrame:
    """
    Class-1 probability of the deterministic model on a uniform grid

    Args:
        model: Two-input model (moons); inputs are standardized with the
            statistics stored in model.metadata
        resolution: Points per axis
        tau: Threshold for unfrozen banks

    Returns:
        pd.DataFrame: resolution^2 rows of (x1, x2, p_class1)
    """
    if resolution < 2:
        raise ValueError("grid resolution must be at least 2")
    xs = np.linspace(*BOUNDARY_X1, resolution)
    ys = np.linspace(*BOUNDARY_X2, resolution)
    grid_x, grid_y = np.meshgrid(xs, ys)
    points = np.column_stack([grid_x.ravel(), grid_y.ravel()])
    inputs = points
    if 'input_mean' in model.metadata:
        inputs = DataProcessor.apply_standardization(points, model.metadata['input_mean'],
                                                     model.metadata['input_std'])
    probs = predict_proba(model, inputs, tau)
    return pd.DataFrame({'x1': points[:, 0], 'x2': points[:, 1], 'p_class1': probs[:, 1]})


def gate_histogram(model: PlasticModel, bins: int, k: Optional[float] = None) -> pd.DataFrame:
    """
    Per-layer histogram of expected_mask values of active units over [0, 1]

    Args:
        model: Plastic model
        bins: Number of equal-width bins
        k: Gate scale to evaluate g(phi) at (default: each bank's current k)

    Returns:
        pd.DataFrame: (layer, bin_low, bin_high, count, fraction) rows
    """
    if bins < 1:
        raise ValueError("histogram needs at least one bin")
    edges = np.linspace(0.0, 1.0, bins + 1)
    rows = []
    for index, bank in enumerate(model.banks):
        if k is None:
            values = expected_mask(bank)[bank.active]
        else:
            values = np.asarray(gate_prob(bank.phis.data, k, bank.kind))[bank.active]
        counts, _ = np.histogram(values, bins=edges)
        total = max(int(values.size), 1)
        for low, high, count in zip(edges[:-1], edges[1:], counts):
            rows.append({'layer': index, 'bin_low': low, 'bin_high': high,
                         'count': int(count), 'fraction': count / total})
    return pd.DataFrame(rows, columns=['layer', 'bin_low', 'bin_high', 'count', 'fraction'])


class RunReport:
    """Writes the files of one run directory"""

    def __init__(self, run_dir: str):
        self.logger = logging.getLogger(__name__)
        self.run_dir = run_dir
        os.makedirs(run_dir, exist_ok=True)

    def path(self, filename: str) -> str:
        return os.path.join(self.run_dir, filename)

    def write_metrics(self, records: Sequence[TrainRecord]) -> str:
        """One row per epoch with the stable metrics header"""
        target = self.path('metrics.csv')
        metrics_frame(records).to_csv(target, index=False)
        self.logger.debug(f"Saved {len(records)} epoch rows to {target}")
        return target

    def write_stages(self, stage_rows: List[Dict[str, Any]]) -> str:
        target = self.path('stages.csv')
        pd.DataFrame(stage_rows, columns=STAGE_COLUMNS).to_csv(target, index=False)
        return target

    def write_config(self, config) -> str:
        return config.to_yaml(self.path('config.yaml'))

    def write_arch(self, finalize: FinalizeResult, summary: Dict[str, Any]) -> str:
        """
        Final architecture summary

        Args:
            finalize: Result of finalize_architecture
            summary: Additional run facts (seeds, accuracy, growth)

        Returns:
            str: Path written
        """
        payload = {
            'arch': finalize.arch.to_string(),
            'active_counts': finalize.arch.counts,
            'param_count': finalize.arch.param_count,
            'full_param_count': finalize.full_param_count,
            'pruned_fraction': finalize.pruned_fraction,
            'per_layer': finalize.per_layer,
            **summary,
        }
        target = self.path('arch.json')
        with open(target, 'w', encoding='utf-8') as f:
            json.dump(payload, f, indent=2, sort_keys=True)
        return target

    def write_failure(self, error: Exception, epoch: Optional[int], diagnostics: Dict[str, Any]) -> str:
        target = self.path('failure.json')
        with open(target, 'w', encoding='utf-8') as f:
            json.dump({'error': str(error), 'type': type(error).__name__, 'epoch': epoch,
                       'diagnostics': diagnostics,
                       'written': datetime.now().strftime('%Y-%m-%d %H:%M:%S')},
                      f, indent=2, default=str)
        self.logger.error(f"Run failed at epoch {epoch}: {error}")
        return target

    def write_boundary(self, model: PlasticModel, resolution: int, tau: float = 0.5,
                       filename: str = 'boundary.csv') -> str:
        target = self.path(filename)
        decision_boundary_grid(model, resolution, tau).to_csv(target, index=False)
        return target

    def write_histogram(self, model: PlasticModel, bins: int, filename: str = 'gate_histogram.csv',
                        k: Optional[float] = None) -> str:
        target = self.path(filename)
        gate_histogram(model, bins, k).to_csv(target, index=False)
        return target

    @staticmethod
    def generate_quick_summary(result: Dict[str, Any]) -> str:
        """Short human-readable run summary"""
        lines = [
            f"📊 {result.get('name', 'run')} ({result.get('mode', '?')})",
            f"   Final arch:    {result.get('arch', '?')} ({result.get('param_count', 0)} params)",
            f"   Pruned:        {result.get('pruned_fraction', 0.0):.1%}",
            f"   Test accuracy: {result.get('test_acc', float('nan')):.4f}",
        ]
        if result.get('growth_factor') is not None:
            lines.append(f"   Growth factor: {result['growth_factor']:.1f}x")
        lines.append(f"   Run directory: {result.get('run_dir', '')}")
        return "\n".join(lines)
