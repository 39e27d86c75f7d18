#!/usr/bin/env python3
"""
Main Controller - Neural Plasticity Network runner
Command-line entry point: training runs, estimator verification and artifact exports
"""

import argparse
import os
import sys
from datetime import datetime
from typing import Dict, List, Optional, Sequence

import numpy as np

from arm_grad import QuadraticMaskObjective, verify_arm
from checkpoint import load_checkpoint
from data_loader import export_moons_csv, make_moons
from experiment_loader import ExperimentLoader, load_global_config
from plastic_net import count_params
from result_aggregator import ResultAggregator
from run_report import RunReport
from training_engine import TrainingEngine
from utils.errors import (EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, ConfigurationError,
                          NumericFailure, ParseError, UsageError)
from utils.logger import configure_logging, log_exception, set_log_level, setup_logger


class MainController:
    """Main controller that dispatches every CLI subcommand"""

    def __init__(self, config_path: str = 'config.yaml', log_level: Optional[str] = None):
        """
        Initialize the main controller

        Args:
            config_path: Global YAML settings
            log_level: Overrides the configured controller and training levels
        """
        self.settings = load_global_config(config_path)
        log_settings = self.settings.get('logging', {})
        configure_logging(os.environ.get('NPN_LOG_DIR') or log_settings.get('log_directory'))
        handler_options = {
            'log_to_console': log_settings.get('log_to_console', True),
            'log_to_file': log_settings.get('log_to_file', True),
            'max_file_size_mb': log_settings.get('max_log_size_mb', 10),
            'backup_count': log_settings.get('backup_count', 5),
        }
        self.logger = setup_logger('controller', level=log_settings.get('controller_level', 'INFO'),
                                   **handler_options)
        setup_logger('training', level=log_settings.get('training_level', 'INFO'), **handler_options)
        if log_level:
            for name in ('controller', 'training'):
                set_log_level(name, log_level)

        self.exports = self.settings.get('exports', {})
        experiments_dir = self.settings.get('experiments', {}).get('directory', 'experiments')
        self.experiment_loader = ExperimentLoader(experiments_dir)
        self.result_aggregator = ResultAggregator()
        self.training_engine = TrainingEngine(self.exports)
        self.logger.info("Main Controller initialized")

    # --- train ---------------------------------------------------------------

    def run_train(self, reference: str, overrides: Dict[str, str], check: bool = False,
                  seeds: Optional[Sequence[int]] = None) -> int:
        """
        Train an experiment (optionally over several seeds) and evaluate its checks

        Args:
            reference: Config file path or shipped experiment name
            overrides: Dotted-key overrides from --set
            check: Evaluate the experiment's check.* bounds afterwards
            seeds: Seed replicates; each base seed spawns its own (model, gates, data) streams

        Returns:
            int: Process exit code
        """
        config = self.experiment_loader.resolve(reference)
        if overrides:
            config = config.with_overrides(overrides)

        # (config, run directory or None for the engine default)
        runs = [(config, None)]
        if seeds:
            runs = [(config.with_overrides(replicate_seeds(s)),
                     os.path.join(config.output_root(), config.name, f"seed{s}")) for s in seeds]

        run_dirs = []
        for run_config, run_dir in runs:
            print(f"🚀 Training {run_config.name} (seeds {run_config['seeds.model']}/"
                  f"{run_config['seeds.gates']}/{run_config['seeds.data']})")
            result = self.training_engine.run(run_config, run_dir=run_dir)
            run_dirs.append(result.run_dir)
            print(f"✅ Run written to {result.run_dir}")

        # aggregate from what the runs wrote to disk
        summaries = [self.result_aggregator.read_summary(d) for d in run_dirs]
        for run_dir in run_dirs:
            stages = self.result_aggregator.summarize_stages(self.result_aggregator.read_metrics(run_dir))
            self.logger.info(f"{run_dir}: " + ", ".join(
                f"{row.stage} -> {row.param_count} params, acc {row.test_acc:.4f}"
                for row in stages.itertuples()))

        if not check:
            return EXIT_OK

        summary = summaries[0] if len(summaries) == 1 else self.result_aggregator.median_over_runs(summaries)
        outcome = self.result_aggregator.check_acceptance(summary, config.checks())
        print(self.result_aggregator.generate_detailed_report(outcome))
        return EXIT_OK if outcome.passed else EXIT_CHECK_FAILED

    # --- verification and exports -----------------------------------------------

    def run_verify_arm(self, num_vars: int, samples: int, k: float, gate: str, seed: int,
                       objective: str = 'quadratic') -> int:
        """Monte-Carlo ARM mean against the enumeration oracle"""
        started = datetime.now()
        fixed = None
        if objective == 'constant':
            fixed = QuadraticMaskObjective(constant=1.0, linear=np.zeros(num_vars),
                                           quadratic=np.zeros((num_vars, num_vars)))
        report = verify_arm(num_vars, samples, k, gate, seed, objective=fixed)

        print(f"📊 ARM verification: V={num_vars}, samples={samples}, k={k:g}, gate={report.kind}")
        for j, (oracle, estimate, err, z) in enumerate(zip(report.oracle, report.estimate,
                                                           report.stderr, report.z_scores)):
            print(f"   [{j}] oracle {oracle:+.6f}  mc {estimate:+.6f}  se {err:.2e}  z {z:+.2f}")
        print(f"   max |z| = {report.max_z:.3f}")
        if not np.isnan(report.max_rel_error):
            print(f"   max relative error = {report.max_rel_error:.4f}")
        print(f"   sign agreement = {report.sign_agreement}")
        for note in report.notes:
            print(f"   note: {note}")
        print("✅ PASS" if report.passed else "❌ FAIL")
        self.logger.info(f"verify-arm finished in {(datetime.now() - started).total_seconds():.1f}s "
                         f"(passed={report.passed})")
        return EXIT_OK if report.passed else EXIT_CHECK_FAILED

    def run_export_boundary(self, checkpoint: str, resolution: int, out: Optional[str]) -> int:
        model = load_checkpoint(checkpoint)
        if model.template_name != 'moons-mlp':
            raise UsageError("decision boundaries are only defined for two-input (moons) models")
        report = RunReport(os.path.dirname(out or checkpoint) or '.')
        target = report.write_boundary(model, resolution,
                                       filename=os.path.basename(out) if out else 'boundary.csv')
        print(f"✅ Boundary grid ({resolution}x{resolution}) written to {target}")
        return EXIT_OK

    def run_export_histogram(self, checkpoint: str, bins: int, out: Optional[str], k: Optional[float] = None) -> int:
        model = load_checkpoint(checkpoint)
        # a pretrain or finetune checkpoint sits at k = 5000; read it at the adapt scale
        k = k if k is not None else model.metadata.get('k_adapt')
        report = RunReport(os.path.dirname(out or checkpoint) or '.')
        target = report.write_histogram(model, bins, k=k,
                                        filename=os.path.basename(out) if out else 'gate_histogram.csv')
        scale = f"k={k:g}" if k is not None else "checkpoint k"
        print(f"✅ Gate histogram ({bins} bins, {scale}) written to {target}")
        return EXIT_OK

    def run_count_params(self, template: str, arch: str) -> int:
        print(count_params(arch, template))
        return EXIT_OK

    def run_export_moons(self, n: int, noise: float, seed: int, out: str) -> int:
        target = export_moons_csv(make_moons(n, noise, seed), out)
        print(f"✅ {n} moons points written to {target}")
        return EXIT_OK

    def dispatch(self, args: argparse.Namespace) -> int:
        """
        Run one subcommand and map failures to exit codes

        Args:
            args: Parsed command line

        Returns:
            int: Process exit code
        """
        try:
            if args.command == 'train':
                return self.run_train(args.config, parse_overrides(args.set), args.check, args.seeds)
            if args.command == 'verify-arm':
                return self.run_verify_arm(args.vars, args.samples, args.k, args.gate, args.seed,
                                           args.objective)
            if args.command == 'export-boundary':
                resolution = args.resolution or int(self.exports.get('boundary_resolution', 100))
                return self.run_export_boundary(args.checkpoint, resolution, args.out)
            if args.command == 'export-histogram':
                bins = args.bins or int(self.exports.get('histogram_bins', 20))
                return self.run_export_histogram(args.checkpoint, bins, args.out, args.k)
            if args.command == 'count-params':
                return self.run_count_params(args.template, args.arch)
            if args.command == 'export-moons':
                return self.run_export_moons(args.n, args.noise, args.seed, args.out)
            raise UsageError(f"unknown command '{args.command}'")
        except NumericFailure as e:
            print(f"❌ Numeric failure: {e}")
            log_exception(e, context=args.command, logger_name='controller')
            return EXIT_NUMERIC
        except (ConfigurationError, UsageError, ParseError) as e:
            print(f"❌ {type(e).__name__}: {e}")
            self.logger.error(f"{args.command} failed: {e}")
            return EXIT_CONFIG


def replicate_seeds(base: int) -> Dict[str, int]:
    """
    Independent (model, gates, data) seeds for one replicate

    Spawned from SeedSequence(base), so neighbouring base seeds share no stream.
    """
    children = np.random.SeedSequence(base).spawn(3)
    model, gates, data = (int(child.generate_state(1)[0]) for child in children)
    return {'seeds.model': model, 'seeds.gates': gates, 'seeds.data': data}


def parse_overrides(pairs: Optional[List[str]]) -> Dict[str, str]:
    """KEY=VALUE strings from --set"""
    overrides = {}
    for pair in pairs or []:
        key, sep, value = pair.partition('=')
        if not sep or not key:
            raise ConfigurationError(f"--set expects key=value, got '{pair}'")
        overrides[key.strip()] = value.strip()
    return overrides


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Neural Plasticity Network runner")
    parser.add_argument('--settings', default='config.yaml', help='Global settings file (default: config.yaml)')
    parser.add_argument('--log-level', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'],
                        help='Level for the controller and training loggers')
    sub = parser.add_subparsers(dest='command', required=True)

    train = sub.add_parser('train', help='Run an experiment through its learning stages')
    train.add_argument('--config', required=True, help='Experiment YAML file or shipped experiment name')
    train.add_argument('--check', action='store_true', help="Evaluate the experiment's check.* bounds")
    train.add_argument('--set', action='append', metavar='KEY=VALUE', help='Override a dotted config key')
    train.add_argument('--seeds', type=int, nargs='+', help='Seed replicates (checks use the median)')

    verify = sub.add_parser('verify-arm', help='Compare ARM against exact enumeration')
    verify.add_argument('--vars', type=int, default=8)
    verify.add_argument('--samples', type=int, default=200000)
    verify.add_argument('--k', type=float, default=1.0)
    verify.add_argument('--gate', choices=['sigmoid', 'hard'], default='sigmoid')
    verify.add_argument('--seed', type=int, default=0)
    verify.add_argument('--objective', choices=['quadratic', 'constant'], default='quadratic')

    boundary = sub.add_parser('export-boundary', help='Class-1 probability grid of a moons checkpoint')
    boundary.add_argument('--checkpoint', required=True)
    boundary.add_argument('--resolution', type=int, help='Points per axis (default: exports.boundary_resolution)')
    boundary.add_argument('--out', help='Output CSV (default: boundary.csv next to the checkpoint)')

    histogram = sub.add_parser('export-histogram', help='Per-layer histogram of gate probabilities')
    histogram.add_argument('--checkpoint', required=True)
    histogram.add_argument('--bins', type=int, help='Bin count (default: exports.histogram_bins)')
    histogram.add_argument('--k', type=float, help='Gate scale for g(phi) (default: the run\'s adapt k)')
    histogram.add_argument('--out', help='Output CSV (default: gate_histogram.csv next to the checkpoint)')

    counting = sub.add_parser('count-params', help='Effective parameter count of an architecture')
    counting.add_argument('--template', required=True, choices=['moons-mlp', 'lenet5'])
    counting.add_argument('--arch', required=True, help='Dash-separated active counts, e.g. 7-9-109-30')

    moons = sub.add_parser('export-moons', help='Write a two-moons dataset as CSV')
    moons.add_argument('--n', type=int, default=1000)
    moons.add_argument('--noise', type=float, default=0.1)
    moons.add_argument('--seed', type=int, default=0)
    moons.add_argument('--out', default='moons.csv')
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point"""
    args = build_parser().parse_args(argv)
    try:
        controller = MainController(args.settings, log_level=args.log_level)
    except ConfigurationError as e:
        print(f"❌ Failed to load settings: {e}")
        return EXIT_CONFIG
    return controller.dispatch(args)


if __name__ == "__main__":
    sys.exit(main())
