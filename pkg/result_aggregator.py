"""
Result Aggregator - Collects, summarizes and checks finished training runs
Per-stage summaries, multi-seed medians and the acceptance bounds of an experiment
"""

import json
import logging
import os
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Dict, List, Sequence

import numpy as np
import pandas as pd

# check key -> (summary field, comparison)
CHECKS = {
    'min_test_acc': ('test_acc', 'min'),
    'min_pruned_fraction': ('pruned_fraction', 'min'),
    'min_params': ('param_count', 'min'),
    'max_params': ('param_count', 'max'),
    'min_growth_factor': ('growth_factor', 'min'),
    'max_midband_fraction': ('midband_fraction', 'max'),
}

MEDIAN_FIELDS = ('test_acc', 'pruned_fraction', 'param_count', 'growth_factor', 'midband_fraction')


@dataclass
class CheckOutcome:
    """Result of evaluating acceptance bounds against a run summary"""
    passed: bool
    summary: Dict[str, Any]
    failures: List[str] = field(default_factory=list)
    evaluated: Dict[str, bool] = field(default_factory=dict)


class ResultAggregator:
    """Aggregates run summaries and evaluates acceptance bounds"""

    def __init__(self):
        self.logger = logging.getLogger(__name__)

    def summarize_stages(self, metrics: pd.DataFrame) -> pd.DataFrame:
        """
        Last row of every stage plus the epoch span it covered

        Args:
            metrics: metrics.csv contents

        Returns:
            pd.DataFrame: One row per stage in plan order
        """
        if metrics.empty:
            return pd.DataFrame(columns=['stage', 'first_epoch', 'last_epoch', 'k', 'active_counts',
                                         'param_count', 'test_acc', 'max_param_count'])
        groups = metrics.groupby('stage', sort=False)
        summary = groups.agg(first_epoch=('epoch', 'min'), last_epoch=('epoch', 'max'),
                             max_param_count=('param_count', 'max')).reset_index()
        last_rows = metrics.loc[groups['epoch'].idxmax(),
                                ['stage', 'k', 'active_counts', 'param_count', 'test_acc']]
        summary = summary.merge(last_rows, on='stage')
        return summary.sort_values('first_epoch').reset_index(drop=True)

    @staticmethod
    def read_metrics(run_dir: str) -> pd.DataFrame:
        return pd.read_csv(os.path.join(run_dir, 'metrics.csv'))

    @staticmethod
    def read_summary(run_dir: str) -> Dict[str, Any]:
        """arch.json of a finished run"""
        with open(os.path.join(run_dir, 'arch.json'), 'r', encoding='utf-8') as f:
            return json.load(f)

    def median_over_runs(self, summaries: Sequence[Dict[str, Any]]) -> Dict[str, Any]:
        """
        Median of every headline metric across runs (e.g. three seeds)

        Args:
            summaries: Run summaries (RunResult.summary() or arch.json contents)

        Returns:
            Dict[str, Any]: Medians plus the run count; metrics missing from
            every run are None
        """
        if not summaries:
            self.logger.warning("No runs to aggregate")
            return {'runs': 0, **{name: None for name in MEDIAN_FIELDS}}
        frame = pd.DataFrame(list(summaries))
        medians: Dict[str, Any] = {'runs': len(frame)}
        for name in MEDIAN_FIELDS:
            if name not in frame:
                medians[name] = None
                continue
            values = pd.to_numeric(frame[name], errors='coerce').dropna()
            medians[name] = float(np.median(values)) if len(values) else None
        self.logger.debug(f"Median over {len(frame)} runs: {medians}")
        return medians

    def check_acceptance(self, summary: Dict[str, Any], checks: Dict[str, Any]) -> CheckOutcome:
        """
        Compare a (median) run summary with configured bounds

        Args:
            summary: Values keyed like RunResult.summary()
            checks: Bounds keyed like the experiment's check.* entries

        Returns:
            CheckOutcome
        """
        failures = []
        evaluated = {}
        for key, bound in checks.items():
            if bound is None:
                continue
            if key not in CHECKS:
                failures.append(f"unknown check '{key}'")
                evaluated[key] = False
                continue
            field_name, direction = CHECKS[key]
            value = summary.get(field_name)
            if value is None or (isinstance(value, float) and np.isnan(value)):
                ok = False
                failures.append(f"{key}: {field_name} not available")
            else:
                ok = value >= bound if direction == 'min' else value <= bound
                if not ok:
                    relation = '>=' if direction == 'min' else '<='
                    failures.append(f"{key}: {field_name} = {value:g}, expected {relation} {bound:g}")
            evaluated[key] = ok
        outcome = CheckOutcome(passed=not failures, summary=dict(summary), failures=failures,
                               evaluated=evaluated)
        if outcome.passed:
            self.logger.info(f"Acceptance checks passed ({len(evaluated)} bounds)")
        else:
            self.logger.warning(f"Acceptance checks failed: {'; '.join(failures)}")
        return outcome

    def generate_detailed_report(self, outcome: CheckOutcome) -> str:
        """
        Text report of a check outcome

        Args:
            outcome: Result of check_acceptance

        Returns:
            str: Formatted report text
        """
        report = ["=" * 60, "NEURAL PLASTICITY RUN CHECK", "=" * 60,
                  f"Time: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}"]

        report.append("\n📊 SUMMARY:")
        for name in ('runs',) + MEDIAN_FIELDS:
            if name in outcome.summary and outcome.summary[name] is not None:
                report.append(f"  {name}: {outcome.summary[name]}")

        report.append("\n🎯 CHECKS:")
        for key, ok in outcome.evaluated.items():
            report.append(f"  {'✅' if ok else '❌'} {key}")
        for failure in outcome.failures:
            report.append(f"  - {failure}")

        report.append(f"\n{'✅ PASSED' if outcome.passed else '❌ FAILED'}")
        report.append("=" * 60)
        return "\n".join(report)
