"""
Experiment Loader - Discovers, parses and validates experiment configurations
Each experiments/<name>/experiment_config.yaml describes one reproducible run
"""

import copy
import logging
import os
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import yaml

from arm_grad import EstimatorMode
from gates import K_INFINITY, GateKind
from lifecycle import ExpansionPolicy, RunMode, StagePlan
from plastic_net import ArchSpec, TEMPLATES, get_template
from utils.errors import ConfigurationError

OUT_DIR_ENV = 'NPN_OUT_DIR'
CONFIG_FILENAME = 'experiment_config.yaml'

DATASET_TEMPLATES = {'moons': 'moons-mlp', 'mnist': 'lenet5'}


def _optional(cast: Callable[[Any], Any]) -> Callable[[Any], Any]:
    return lambda value: None if value is None or value == '' else cast(value)


def _int(value: Any) -> int:
    if isinstance(value, bool):
        raise ValueError("boolean where an integer is expected")
    if isinstance(value, float) and not value.is_integer():
        raise ValueError(f"{value} is not an integer")
    return int(value)


def _bool(value: Any) -> bool:
    if not isinstance(value, bool):
        raise ValueError(f"{value!r} is not a boolean")
    return value


def _float_list(value: Any) -> List[float]:
    if isinstance(value, (list, tuple)):
        return [float(v) for v in value]
    return [float(value)]


def _int_list(value: Any) -> List[int]:
    if value is None:
        return []
    if isinstance(value, (list, tuple)):
        return [_int(v) for v in value]
    return [_int(value)]


def _arch(value: Any) -> str:
    if isinstance(value, (list, tuple)):
        return "-".join(str(_int(v)) for v in value)
    text = str(value)
    ArchSpec.parse_counts(text)
    return text


# dotted key -> (parser, default)
KEY_MAP: Dict[str, Tuple[Callable[[Any], Any], Any]] = {
    'experiment.name': (str, ''),
    'dataset': (str, 'moons'),
    'template': (str, 'moons-mlp'),
    'mode': (str, RunMode.SPARSIFY.value),

    'stage.pretrain_epochs': (_int, 100),
    'stage.adapt_epochs': (_int, 250),
    'stage.finetune_epochs': (_int, 150),
    'stage.k_pretrain': (float, K_INFINITY),
    'stage.k_adapt': (float, 7.0),
    'stage.k_finetune': (float, K_INFINITY),

    'expansion.plateau_window': (_int, 5),
    'expansion.plateau_rel_tol': (float, 1e-3),
    'expansion.growth_per_event': (_int, 1),
    'expansion.initial_arch': (_optional(_arch), None),
    'expansion.upper_bound': (_optional(_arch), None),
    'expansion.restart_after_growth': (_bool, True),

    'gates.kind': (str, GateKind.SCALED_SIGMOID.value),
    'gates.init': (str, 'fixed'),
    'gates.tau': (float, 0.5),
    'gates.estimator': (str, EstimatorMode.PAPER_LITERAL.value),

    'penalty.lambdas': (_float_list, [0.0]),
    'penalty.scale': (str, 'none'),

    'optim.lr': (float, 0.001),
    'optim.batch_size': (_int, 128),

    'seeds.model': (_int, 0),
    'seeds.gates': (_int, 1),
    'seeds.data': (_int, 2),

    'data.n_samples': (_int, 1000),
    'data.noise_std': (float, 0.1),
    'data.mnist_dir': (str, ''),
    'data.train_subset': (_optional(_int), None),
    'data.test_subset': (_optional(_int), None),

    'output.dir': (str, 'runs'),
    'output.snapshot_epochs': (_int_list, []),

    'check.min_test_acc': (_optional(float), None),
    'check.min_pruned_fraction': (_optional(float), None),
    'check.min_params': (_optional(_int), None),
    'check.max_params': (_optional(_int), None),
    'check.min_growth_factor': (_optional(float), None),
    'check.max_midband_fraction': (_optional(float), None),
}


def flatten_config(data: Dict[str, Any], prefix: str = '') -> Dict[str, Any]:
    """
    Nested YAML maps and dotted keys flattened into one dotted namespace

    Args:
        data: Parsed YAML mapping
        prefix: Key prefix for recursion

    Returns:
        Dict[str, Any]: Dotted key -> value
    """
    flat: Dict[str, Any] = {}
    for key, value in (data or {}).items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten_config(value, prefix=f"{dotted}."))
        else:
            if dotted in flat:
                raise ConfigurationError(f"duplicate config key '{dotted}'")
            flat[dotted] = value
    return flat


@dataclass
class ExperimentConfig:
    """Validated dotted-key configuration of one experiment"""
    values: Dict[str, Any]
    source: str = ''

    @classmethod
    def from_flat(cls, flat: Dict[str, Any], source: str = '') -> 'ExperimentConfig':
        """
        Parse a dotted-key mapping, filling defaults

        Args:
            flat: Dotted key -> raw value
            source: Where the values came from (for messages)

        Returns:
            ExperimentConfig: Validated configuration
        """
        unknown = sorted(set(flat) - set(KEY_MAP))
        if unknown:
            raise ConfigurationError(f"unknown config keys in {source or 'config'}: {', '.join(unknown)}")
        values = {}
        for key, (parse, default) in KEY_MAP.items():
            raw = flat.get(key, copy.deepcopy(default))
            if raw is None and default is not None:
                raise ConfigurationError(f"config key '{key}' needs a value")
            try:
                values[key] = parse(raw) if raw is not None else None
            except (TypeError, ValueError, ConfigurationError) as e:
                raise ConfigurationError(f"bad value for '{key}': {raw!r} ({e})") from None
        config = cls(values=values, source=source)
        config.validate()
        return config

    @classmethod
    def from_yaml(cls, path: str) -> 'ExperimentConfig':
        try:
            with open(path, 'r') as f:
                data = yaml.safe_load(f)
        except FileNotFoundError:
            raise ConfigurationError(f"config file not found: {path}") from None
        except yaml.YAMLError as e:
            raise ConfigurationError(f"YAML parsing error in {path}: {e}") from None
        if not isinstance(data, dict):
            raise ConfigurationError(f"invalid config format in {path}")
        return cls.from_flat(flatten_config(data), source=path)

    def to_flat(self) -> Dict[str, Any]:
        return copy.deepcopy(self.values)

    def to_yaml(self, path: str) -> str:
        with open(path, 'w') as f:
            yaml.safe_dump(self.to_flat(), f, sort_keys=True, default_flow_style=None)
        return path

    def with_overrides(self, overrides: Dict[str, Any]) -> 'ExperimentConfig':
        """Copy with dotted-key overrides applied (string values are YAML-parsed)"""
        flat = self.to_flat()
        for key, value in overrides.items():
            flat[key] = yaml.safe_load(value) if isinstance(value, str) else value
        return ExperimentConfig.from_flat(flat, source=self.source)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def get(self, key: str, default: Any = None) -> Any:
        return self.values.get(key, default)

    @property
    def name(self) -> str:
        return self.values['experiment.name'] or os.path.splitext(os.path.basename(self.source))[0]

    @property
    def mode(self) -> RunMode:
        return RunMode(self.values['mode'])

    @property
    def gated_layers(self) -> int:
        return len(get_template(self.values['template']).gated_slots)

    def validate(self) -> None:
        """Cross-field checks; raises ConfigurationError"""
        v = self.values
        if v['dataset'] not in DATASET_TEMPLATES:
            raise ConfigurationError(f"unknown dataset '{v['dataset']}'")
        if v['template'] not in TEMPLATES:
            raise ConfigurationError(f"unknown template '{v['template']}'")
        if DATASET_TEMPLATES[v['dataset']] != v['template']:
            raise ConfigurationError(f"template '{v['template']}' does not fit dataset '{v['dataset']}'")
        try:
            RunMode(v['mode'])
        except ValueError:
            raise ConfigurationError(f"unknown mode '{v['mode']}'") from None
        kind = GateKind.parse(v['gates.kind'])
        mode = EstimatorMode.parse(v['gates.estimator'])
        if mode is EstimatorMode.LOGIT_EXACT and kind is not GateKind.SCALED_SIGMOID:
            raise ConfigurationError("gates.estimator logit-exact needs gates.kind sigmoid")
        if v['gates.init'] not in ('fixed', 'normal'):
            raise ConfigurationError(f"unknown gates.init '{v['gates.init']}'")
        if not 0.0 <= v['gates.tau'] <= 1.0:
            raise ConfigurationError("gates.tau must lie in [0, 1]")
        if v['penalty.scale'] not in ('none', 'per_sample'):
            raise ConfigurationError(f"unknown penalty.scale '{v['penalty.scale']}'")
        if len(v['penalty.lambdas']) not in (1, self.gated_layers):
            raise ConfigurationError(
                f"penalty.lambdas needs 1 or {self.gated_layers} values, got {len(v['penalty.lambdas'])}")
        if v['optim.lr'] <= 0:
            raise ConfigurationError("optim.lr must be positive")
        if v['optim.batch_size'] < 1:
            raise ConfigurationError("optim.batch_size must be positive")
        if min(v['seeds.model'], v['seeds.gates'], v['seeds.data']) < 0:
            raise ConfigurationError("seeds must be non-negative")
        if v['dataset'] == 'moons' and (v['data.n_samples'] < 2 or v['data.n_samples'] % 2):
            raise ConfigurationError("data.n_samples must be a positive even number")
        if v['data.noise_std'] < 0:
            raise ConfigurationError("data.noise_std must be non-negative")

        plan = self.stage_plan()
        for epoch in v['output.snapshot_epochs']:
            if not 0 <= epoch < plan.total_epochs:
                raise ConfigurationError(f"snapshot epoch {epoch} outside the plan")

        template = get_template(v['template'])
        for key in ('expansion.initial_arch', 'expansion.upper_bound'):
            if v[key] is None:
                continue
            counts = ArchSpec.parse_counts(v[key])
            if len(counts) != self.gated_layers:
                raise ConfigurationError(f"{key} needs {self.gated_layers} entries")
            if any(c < 0 or c > b for c, b in zip(counts, template.upper_bound)):
                raise ConfigurationError(f"{key} exceeds the template bound {template.upper_bound}")
        if plan.mode is RunMode.EXPAND and v['expansion.initial_arch'] is None:
            raise ConfigurationError("expand mode needs expansion.initial_arch")
        self.expansion_policy()

    def stage_plan(self) -> StagePlan:
        v = self.values
        return StagePlan(pretrain_epochs=v['stage.pretrain_epochs'],
                         adapt_epochs=v['stage.adapt_epochs'],
                         finetune_epochs=v['stage.finetune_epochs'],
                         k_pretrain=v['stage.k_pretrain'],
                         k_adapt=v['stage.k_adapt'],
                         k_finetune=v['stage.k_finetune'],
                         mode=RunMode(v['mode']))

    def expansion_policy(self) -> ExpansionPolicy:
        v = self.values
        bound = v['expansion.upper_bound']
        return ExpansionPolicy(plateau_window=v['expansion.plateau_window'],
                               plateau_rel_tol=v['expansion.plateau_rel_tol'],
                               growth_per_event=v['expansion.growth_per_event'],
                               upper_bound=ArchSpec.parse_counts(bound) if bound else None,
                               k_adapt=v['stage.k_adapt'],
                               restart_after_growth=v['expansion.restart_after_growth'])

    def initial_arch(self) -> Optional[List[int]]:
        text = self.values['expansion.initial_arch']
        return ArchSpec.parse_counts(text) if text else None

    def lambdas(self, train_size: int) -> np.ndarray:
        """
        Per-gated-layer lambda, divided by N under penalty.scale = per_sample

        Args:
            train_size: Number of training items N

        Returns:
            np.ndarray: One lambda per gated layer
        """
        values = np.asarray(self.values['penalty.lambdas'], dtype=np.float64)
        values = np.broadcast_to(values, (self.gated_layers,)).copy()
        if self.values['penalty.scale'] == 'per_sample':
            values /= max(train_size, 1)
        return values

    def output_root(self) -> str:
        return os.environ.get(OUT_DIR_ENV) or self.values['output.dir']

    def checks(self) -> Dict[str, Any]:
        return {key.split('.', 1)[1]: value for key, value in self.values.items()
                if key.startswith('check.') and value is not None}


class ExperimentLoader:
    """Loads and manages shipped experiment configurations"""

    def __init__(self, experiments_directory: str = 'experiments'):
        """
        Initialize the experiment loader

        Args:
            experiments_directory: Directory holding one subdirectory per experiment
        """
        self.logger = logging.getLogger(__name__)
        self.experiments_directory = experiments_directory
        self.experiments: Dict[str, ExperimentConfig] = {}

    def load_all_experiments(self) -> bool:
        """
        Load every experiment configuration under the experiments directory

        Returns:
            bool: True if at least one experiment loaded
        """
        if not os.path.isdir(self.experiments_directory):
            self.logger.error(f"Experiments directory not found: {self.experiments_directory}")
            return False

        experiment_dirs = self._discover_experiment_directories()
        if not experiment_dirs:
            self.logger.warning(f"No experiment directories found in {self.experiments_directory}")
            return False

        for directory in experiment_dirs:
            name = os.path.basename(directory)
            try:
                self.experiments[name] = ExperimentConfig.from_yaml(os.path.join(directory, CONFIG_FILENAME))
                self.logger.debug(f"Loaded experiment: {name}")
            except ConfigurationError as e:
                self.logger.error(f"Error loading experiment {name}: {e}")

        self.logger.info(f"Successfully loaded {len(self.experiments)}/{len(experiment_dirs)} experiments")
        return bool(self.experiments)

    def _discover_experiment_directories(self) -> List[str]:
        found = []
        for item in sorted(os.listdir(self.experiments_directory)):
            path = os.path.join(self.experiments_directory, item)
            if os.path.isdir(path):
                if os.path.exists(os.path.join(path, CONFIG_FILENAME)):
                    found.append(path)
                else:
                    self.logger.warning(f"Invalid experiment directory structure: {item}")
        return found

    def resolve(self, reference: str) -> ExperimentConfig:
        """
        Config from a file path or a shipped experiment name

        Args:
            reference: Path to a YAML file, or a directory name under experiments/

        Returns:
            ExperimentConfig
        """
        if os.path.isfile(reference):
            return ExperimentConfig.from_yaml(reference)
        if os.path.isdir(reference):
            return ExperimentConfig.from_yaml(os.path.join(reference, CONFIG_FILENAME))
        candidate = os.path.join(self.experiments_directory, reference, CONFIG_FILENAME)
        if os.path.isfile(candidate):
            return ExperimentConfig.from_yaml(candidate)
        raise ConfigurationError(f"no experiment config found for '{reference}'")

    def get_experiment_names(self) -> List[str]:
        return sorted(self.experiments)


def load_global_config(path: str = 'config.yaml') -> Dict[str, Any]:
    """
    Global settings (logging, output root, experiments directory)

    Args:
        path: Global YAML file; a missing file yields an empty dict

    Returns:
        Dict[str, Any]: Parsed settings
    """
    if not os.path.exists(path):
        return {}
    try:
        with open(path, 'r') as f:
            data = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigurationError(f"YAML parsing error in {path}: {e}") from None
    if not isinstance(data, dict):
        raise ConfigurationError(f"invalid global config format in {path}")
    return data
