"""
Training Engine - Runs one experiment through its pretrain / adapt / finetune stages
Owns the epoch loop, expansion events, snapshots and the run directory
"""

import os
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from checkpoint import save_checkpoint
from data_loader import DataLoader, Dataset, batches, export_moons_csv, fixed_projection, make_moons
from experiment_loader import ExperimentConfig
from gates import GateKind
from lifecycle import (FinalizeResult, RunMode, Stage, TrainRecord, current_stage, enter_finetune,
                       expansion_step, finalize_architecture, initialize_gates, midband_fraction,
                       thresholded_arch)
from plastic_net import PlasticModel, build_model, evaluate_accuracy, train_step
from run_report import RunReport
from tensor_core import Adam
from utils.errors import NumericFailure
from utils.logger import get_logger, log_epoch, log_expansion, log_performance, log_stage_transition

MNIST_DIR_ENV = 'NPN_MNIST_DIR'


@dataclass
class RunResult:
    """Everything a finished run produced"""
    name: str
    mode: str
    run_dir: str
    records: List[TrainRecord]
    stage_rows: List[Dict[str, Any]]
    finalize: FinalizeResult
    test_acc: float
    midband_fraction: float
    initial_param_count: int
    peak_adapt_param_count: int
    expansions: List[Tuple[int, int, List[int]]] = field(default_factory=list)

    @property
    def growth_factor(self) -> Optional[float]:
        if self.mode != RunMode.EXPAND.value or self.initial_param_count <= 0:
            return None
        return self.peak_adapt_param_count / self.initial_param_count

    def summary(self) -> Dict[str, Any]:
        return {
            'name': self.name,
            'mode': self.mode,
            'run_dir': self.run_dir,
            'arch': self.finalize.arch.to_string(),
            'param_count': self.finalize.arch.param_count,
            'pruned_fraction': self.finalize.pruned_fraction,
            'test_acc': self.test_acc,
            'midband_fraction': self.midband_fraction,
            'initial_param_count': self.initial_param_count,
            'peak_adapt_param_count': self.peak_adapt_param_count,
            'growth_factor': self.growth_factor,
        }


class TrainingEngine:
    """Engine that trains a plastic model under the learning stage scheduler"""

    def __init__(self, exports: Optional[Dict[str, Any]] = None):
        """
        Args:
            exports: Export settings (boundary_resolution, histogram_bins)
        """
        self.logger = get_logger('training')
        self.data_loader = DataLoader()
        self.exports = exports or {}

    def run(self, config: ExperimentConfig, run_dir: Optional[str] = None) -> RunResult:
        """
        Execute the full stage plan of an experiment

        Args:
            config: Validated experiment configuration
            run_dir: Output directory (default: <output root>/<name>/seed<model>)

        Returns:
            RunResult
        """
        started = datetime.now()
        run_dir = run_dir or os.path.join(config.output_root(), config.name, f"seed{config['seeds.model']}")
        report = RunReport(run_dir)
        report.write_config(config)
        self.logger.info(f"Starting run {config.name} -> {run_dir}")

        train, test, projection, metadata = self._load_data(config, report)
        model = build_model(config['template'], kind=GateKind.parse(config['gates.kind']),
                            k=config['stage.k_pretrain'], seed_model=config['seeds.model'],
                            seed_gates=config['seeds.gates'], projection=projection)
        model.metadata.update(metadata)

        plan = config.stage_plan()
        # histograms read g(phi) at the adapt scale
        model.metadata['k_adapt'] = plan.k_adapt
        initialize_gates(model, plan, scheme=config['gates.init'], initial_arch=config.initial_arch())
        lambdas = np.zeros(len(model.banks)) if plan.mode is RunMode.BASELINE else config.lambdas(len(train))
        optimizer = Adam(model.parameters() + model.gate_parameters(), lr=config['optim.lr'])

        tau = config['gates.tau']
        initial_count = thresholded_arch(model, tau).param_count
        state = {'epoch': None}
        try:
            result = self._train(config, model, plan, train, test, lambdas, optimizer, report, state)
        except NumericFailure as e:
            report.write_failure(e, state['epoch'], e.diagnostics)
            raise

        records, stage_rows, midband, expansions = result
        finalize = finalize_architecture(model, tau)
        save_checkpoint(model, report.path('checkpoint.npn'),
                        extra={'epoch': plan.total_epochs - 1, 'name': config.name})
        test_acc = records[-1].test_acc if records else evaluate_accuracy(model, test.inputs, test.labels, tau)
        adapt_counts = [r.param_count for r in records if r.stage == Stage.ADAPT.value]

        run = RunResult(name=config.name, mode=plan.mode.value, run_dir=run_dir, records=records,
                        stage_rows=stage_rows, finalize=finalize, test_acc=test_acc,
                        midband_fraction=midband, initial_param_count=initial_count,
                        peak_adapt_param_count=max(adapt_counts) if adapt_counts else initial_count,
                        expansions=expansions)

        report.write_metrics(records)
        report.write_stages(stage_rows)
        report.write_arch(finalize, {key: value for key, value in run.summary().items()
                                     if key not in ('arch', 'param_count', 'pruned_fraction')})
        report.write_histogram(model, bins=int(self.exports.get('histogram_bins', 20)), k=plan.k_adapt)
        if config['dataset'] == 'moons':
            report.write_boundary(model, resolution=int(self.exports.get('boundary_resolution', 100)),
                                  tau=tau)

        log_performance(f"train {config.name}", started,
                        details={'epochs': plan.total_epochs, 'arch': finalize.arch.to_string()})
        print(report.generate_quick_summary(run.summary()))
        return run

    def _load_data(self, config: ExperimentConfig,
                   report: RunReport) -> Tuple[Dataset, Dataset, Optional[np.ndarray], Dict[str, Any]]:
        if config['dataset'] == 'moons':
            train, test, stats = self.data_loader.load_moons(config['data.n_samples'], config['data.noise_std'],
                                                             config['seeds.data'])
            export_moons_csv(make_moons(config['data.n_samples'], config['data.noise_std'],
                                        config['seeds.data']), report.path('moons.csv'))
            projection_seed = np.random.SeedSequence(config['seeds.data']).spawn(1)[0]
            return train, test, fixed_projection(projection_seed), stats

        directory = config['data.mnist_dir'] or os.environ.get(MNIST_DIR_ENV, '')
        train, test = self.data_loader.load_mnist(directory, config['data.train_subset'],
                                                  config['data.test_subset'])
        return train, test, None, {}

    def _train(self, config: ExperimentConfig, model: PlasticModel, plan, train: Dataset, test: Dataset,
               lambdas: np.ndarray, optimizer: Adam, report: RunReport, state: Dict[str, Any]):
        tau = config['gates.tau']
        policy = config.expansion_policy()
        snapshots = set(config['output.snapshot_epochs'])
        mode = config['gates.estimator']

        records: List[TrainRecord] = []
        stage_rows: List[Dict[str, Any]] = []
        expansions: List[Tuple[int, int, List[int]]] = []
        history: List[float] = []
        growth_done = False
        midband = None
        previous_stage: Optional[Stage] = None

        for epoch in range(plan.total_epochs):
            state['epoch'] = epoch
            stage, k = current_stage(plan, epoch)
            if stage is not previous_stage:
                # midband is read before finetune freezes the logits
                if previous_stage is Stage.ADAPT:
                    midband = midband_fraction(model)
                if stage is Stage.FINETUNE:
                    enter_finetune(model)
                model.set_k(k)
                log_stage_transition(previous_stage.value if previous_stage else None, stage.value, k)
                previous_stage = stage

            loss_sum = penalty = 0.0
            disagreements = gated = 0
            for batch in batches(train, config['optim.batch_size'], config['seeds.data'], epoch):
                step = train_step(model, batch, lambdas, optimizer, mode)
                loss_sum += step.data_loss * len(batch[1])
                # penalty depends only on phi; keep the epoch's last value
                penalty = step.penalty
                disagreements += step.disagreement
                gated += step.gated_units
            train_loss = loss_sum / len(train)

            if stage is Stage.ADAPT and plan.mode is RunMode.EXPAND and not growth_done:
                activated, terminated = expansion_step(model, policy, history, train_loss + penalty)
                if activated:
                    log_expansion(epoch, activated)
                    expansions.extend((epoch, layer, unit_ids) for layer, unit_ids in activated)
                if terminated:
                    growth_done = True
                    self.logger.info(f"Expansion terminated at epoch {epoch}")

            # param_count follows the thresholded architecture, not the allocation
            arch = thresholded_arch(model, tau)
            record = TrainRecord(epoch=epoch, stage=stage.value, k=k, train_loss=train_loss,
                                 penalty=penalty,
                                 test_acc=evaluate_accuracy(model, test.inputs, test.labels, tau),
                                 active_counts=arch.counts, param_count=arch.param_count,
                                 mask_disagreement=disagreements / gated if gated else 0.0)
            records.append(record)
            log_epoch(record)

            if epoch in snapshots:
                save_checkpoint(model, report.path(f"checkpoint_epoch{epoch}.npn"),
                                extra={'epoch': epoch, 'stage': stage.value, 'name': config.name})

            if epoch == plan.total_epochs - 1 or current_stage(plan, epoch + 1)[0] is not stage:
                stage_rows.append({'stage': stage.value, 'last_epoch': epoch, 'k': k,
                                   'active_counts': ";".join(str(c) for c in arch.counts),
                                   'arch': arch.to_string(), 'param_count': arch.param_count,
                                   'test_acc': record.test_acc,
                                   'midband_fraction': midband_fraction(model) if stage is Stage.ADAPT else None})

        if midband is None:
            midband = midband_fraction(model)
        return records, stage_rows, midband, expansions
