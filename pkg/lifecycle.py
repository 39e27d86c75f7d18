"""
Lifecycle - Learning stage scheduler, expansion controller and architecture extraction
The gate scale k moves each run through pretrain -> adapt -> finetune
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from gates import K_INFINITY, PHI_INIT_LOGIT, initial_phis, threshold_mask
from plastic_net import ArchSpec, PlasticModel, count_params, get_template
from utils.errors import ConfigurationError, UsageError

logger = logging.getLogger(__name__)


class Stage(str, Enum):
    PRETRAIN = 'pretrain'
    ADAPT = 'adapt'
    FINETUNE = 'finetune'


class RunMode(str, Enum):
    SPARSIFY = 'sparsify'
    EXPAND = 'expand'
    BASELINE = 'baseline'


@dataclass
class StagePlan:
    """Epoch budget and gate scale of each learning stage"""
    pretrain_epochs: int = 100
    adapt_epochs: int = 250
    finetune_epochs: int = 150
    k_pretrain: float = K_INFINITY
    k_adapt: float = 7.0
    k_finetune: float = K_INFINITY
    mode: RunMode = RunMode.SPARSIFY

    def __post_init__(self):
        self.mode = RunMode(self.mode)
        for name in ('pretrain_epochs', 'adapt_epochs', 'finetune_epochs'):
            if int(getattr(self, name)) < 0:
                raise ConfigurationError(f"stage.{name} must be non-negative")
        for name in ('k_pretrain', 'k_adapt', 'k_finetune'):
            if float(getattr(self, name)) < 0:
                raise ConfigurationError(f"stage.{name} must be non-negative")

    @property
    def total_epochs(self) -> int:
        return self.pretrain_epochs + self.adapt_epochs + self.finetune_epochs

    def boundaries(self) -> List[Tuple[Stage, int, int, float]]:
        """(stage, first epoch, end epoch exclusive, k) for each non-empty stage"""
        spans = []
        start = 0
        for stage, length, k in ((Stage.PRETRAIN, self.pretrain_epochs, self.k_pretrain),
                                 (Stage.ADAPT, self.adapt_epochs, self.k_adapt),
                                 (Stage.FINETUNE, self.finetune_epochs, self.k_finetune)):
            if length > 0:
                spans.append((stage, start, start + length, float(k)))
            start += length
        return spans


@dataclass
class ExpansionPolicy:
    """When and how hibernated units are woken up"""
    plateau_window: int = 5
    plateau_rel_tol: float = 1e-3
    growth_per_event: int = 1
    upper_bound: Optional[List[int]] = None
    k_adapt: float = 0.5
    # a growth event starts a fresh plateau window
    restart_after_growth: bool = True

    def __post_init__(self):
        if self.plateau_window < 1:
            raise ConfigurationError("expansion.plateau_window must be at least 1")
        if self.growth_per_event < 1:
            raise ConfigurationError("expansion.growth_per_event must be positive")

    @property
    def phi_activate(self) -> float:
        return PHI_INIT_LOGIT / self.k_adapt if self.k_adapt > 0 else PHI_INIT_LOGIT

    @property
    def phi_hibernate(self) -> float:
        return -self.phi_activate


@dataclass
class TrainRecord:
    """One row of metrics.csv"""
    epoch: int
    stage: str
    k: float
    train_loss: float
    penalty: float
    test_acc: float
    active_counts: List[int]
    param_count: int
    mask_disagreement: float

    def to_row(self) -> Dict[str, Any]:
        return {
            'epoch': self.epoch,
            'stage': self.stage,
            'k': self.k,
            'train_loss': self.train_loss,
            'penalty': self.penalty,
            'test_acc': self.test_acc,
            'active_counts': ";".join(str(c) for c in self.active_counts),
            'param_count': self.param_count,
            'mask_disagreement': self.mask_disagreement,
        }


@dataclass
class FinalizeResult:
    """Thresholded architecture plus pruning statistics"""
    arch: ArchSpec
    full_param_count: int
    pruned_fraction: float
    per_layer: List[Dict[str, int]] = field(default_factory=list)


def current_stage(plan: StagePlan, epoch: int) -> Tuple[Stage, float]:
    """
    Stage containing an epoch and the k used in it

    Args:
        plan: Stage plan
        epoch: Zero-based epoch index

    Returns:
        Tuple (stage, k)
    """
    if epoch < 0 or epoch >= plan.total_epochs:
        raise UsageError(f"epoch {epoch} outside the plan's {plan.total_epochs} epochs")
    for stage, start, end, k in plan.boundaries():
        if start <= epoch < end:
            return stage, k
    raise UsageError(f"epoch {epoch} falls in no stage")


def initialize_gates(model: PlasticModel, plan: StagePlan, scheme: str = 'fixed',
                     initial_arch: Optional[Sequence[int]] = None) -> None:
    """
    Set every bank's logits and unit states for the chosen run mode

    sparsify: every unit active at phi = +3/k_adapt (or the 'normal' scheme).
    expand: initial_arch units per layer drawn at random from the bank's stream
    are active at +3/k_adapt, the rest hibernate at -3/k_adapt.
    baseline: all-ones masks frozen from the start.

    Args:
        model: Freshly built model
        plan: Stage plan (mode and k_adapt)
        scheme: 'fixed' or 'normal'
        initial_arch: Active units per gated layer for expand mode
    """
    k_ref = plan.k_adapt if plan.k_adapt > 0 else 1.0
    phi_on = PHI_INIT_LOGIT / k_ref
    banks = model.banks

    if plan.mode is RunMode.BASELINE:
        for bank in banks:
            bank.activate(slice(None), phi_on)
            bank.freeze(np.ones(bank.size))
        return

    if plan.mode is RunMode.SPARSIFY:
        for bank in banks:
            bank.activate(slice(None), 0.0)
            bank.phis.data[:] = initial_phis(bank.size, k_ref, scheme, bank.rng, bank.kind)
        return

    if initial_arch is None or len(initial_arch) != len(banks):
        raise ConfigurationError(f"expand mode needs expansion.initial_arch with {len(banks)} entries")
    for bank, count in zip(banks, initial_arch):
        if not 0 < count <= bank.size:
            raise ConfigurationError(f"initial active count {count} outside [1, {bank.size}]")
        bank.hibernate(slice(None), -phi_on)
        chosen = bank.rng.choice(bank.size, size=int(count), replace=False)
        bank.activate(np.sort(chosen), phi_on)


def enter_finetune(model: PlasticModel) -> List[np.ndarray]:
    """
    Freeze every bank at the deterministic mask 1[phi > 0] over active units

    Returns:
        List[np.ndarray]: The frozen masks
    """
    masks = []
    for bank in model.banks:
        if not bank.frozen:
            bank.freeze(np.where(bank.phis.data > 0.0, 1.0, 0.0))
        masks.append(bank.fixed_mask)
    return masks


def detect_plateau(history: Sequence[float], window: int, rel_tol: float) -> bool:
    """
    Whether the mean of the last window stopped improving on the window before it

    Args:
        history: Per-epoch L0-regularized losses
        window: Window length in epochs
        rel_tol: Required relative improvement

    Returns:
        bool: False while history holds fewer than window + 1 entries
    """
    if len(history) < window + 1:
        return False
    values = np.asarray(history, dtype=np.float64)
    recent = values[-window:].mean()
    previous = values[-window - 1:-1].mean()
    # |previous| keeps the rule meaningful for negative losses (lambda < 0)
    return bool(recent >= previous - rel_tol * abs(previous))


def _layer_can_grow(bank, bound: int) -> bool:
    if bank.frozen or bank.active_count >= bound or bank.active_count >= bank.size:
        return False
    g = bank.probs()[bank.active]
    return not np.any(g <= 0.5)


def _bounds(model: PlasticModel, policy: ExpansionPolicy) -> List[int]:
    if policy.upper_bound is None:
        return [bank.size for bank in model.banks]
    if len(policy.upper_bound) != len(model.banks):
        raise ConfigurationError(f"expansion.upper_bound needs {len(model.banks)} entries")
    return [min(int(b), bank.size) for b, bank in zip(policy.upper_bound, model.banks)]


def maybe_expand(model: PlasticModel, policy: ExpansionPolicy,
                 history: Sequence[float]) -> List[Tuple[int, List[int]]]:
    """
    Wake hibernated units in every layer that has headroom and no redundant unit

    Args:
        model: Model in the expand adapt stage
        policy: Expansion policy
        history: Per-epoch L0-regularized losses of the adapt stage

    Returns:
        List of (gated layer index, activated unit indices); empty without a plateau
    """
    if not detect_plateau(history, policy.plateau_window, policy.plateau_rel_tol):
        return []
    activations = []
    for index, (bank, bound) in enumerate(zip(model.banks, _bounds(model, policy))):
        if not _layer_can_grow(bank, bound):
            continue
        hibernated = np.flatnonzero(~bank.active)
        take = min(policy.growth_per_event, bound - bank.active_count, hibernated.size)
        chosen = np.sort(bank.rng.choice(hibernated, size=take, replace=False))
        bank.activate(chosen, policy.phi_activate)
        activations.append((index, [int(i) for i in chosen]))
    return activations


def expansion_terminated(model: PlasticModel, policy: ExpansionPolicy, history: Sequence[float]) -> bool:
    """Plateau reached and no layer can grow any more"""
    if not detect_plateau(history, policy.plateau_window, policy.plateau_rel_tol):
        return False
    return not any(_layer_can_grow(bank, bound) for bank, bound in zip(model.banks, _bounds(model, policy)))


def expansion_step(model: PlasticModel, policy: ExpansionPolicy, history: List[float],
                   objective: float) -> Tuple[List[Tuple[int, List[int]]], bool]:
    """
    One epoch of the expansion controller

    Appends the epoch's L0-regularized loss, wakes units on a plateau and
    reports termination. With policy.restart_after_growth the history is
    emptied after a growth event, so the next event needs a full new window.

    Args:
        model: Model in the expand adapt stage
        policy: Expansion policy
        history: Loss history of the adapt stage (modified in place)
        objective: This epoch's L0-regularized loss

    Returns:
        Tuple (activations, terminated)
    """
    history.append(float(objective))
    activated = maybe_expand(model, policy, history)
    if activated and policy.restart_after_growth:
        history.clear()
    return activated, expansion_terminated(model, policy, history)


def finalize_masks(model: PlasticModel, tau: float = 0.5) -> List[np.ndarray]:
    """Threshold masks; frozen banks at tau = 0.5 yield their fine-tune support"""
    return [bank.fixed_mask if bank.frozen else threshold_mask(bank, tau) for bank in model.banks]


def thresholded_arch(model: PlasticModel, tau: float = 0.5) -> ArchSpec:
    counts = [int(np.count_nonzero(mask)) for mask in finalize_masks(model, tau)]
    return ArchSpec(counts=counts, param_count=count_params(counts, model.template_name))


def finalize_architecture(model: PlasticModel, tau: float = 0.5) -> FinalizeResult:
    """
    Per-layer surviving units after thresholding, with count_params and pruned fraction

    Args:
        model: Trained model
        tau: Threshold applied to unfrozen banks

    Returns:
        FinalizeResult
    """
    arch = thresholded_arch(model, tau)
    template = get_template(model.template_name)
    full = template.full_param_count
    per_layer = [{'layer': i, 'allocated': bank.size, 'active': bank.active_count, 'kept': kept}
                 for i, (bank, kept) in enumerate(zip(model.banks, arch.counts))]
    pruned = 1.0 - arch.param_count / full if full else 0.0
    logger.info(f"Finalized architecture {arch.to_string()} ({arch.param_count} params, "
                f"{pruned:.1%} pruned)")
    return FinalizeResult(arch=arch, full_param_count=full, pruned_fraction=pruned, per_layer=per_layer)


def midband_fraction(model: PlasticModel, low: float = 0.25, high: float = 0.75) -> float:
    """Share of active-unit g(phi) values inside [low, high]"""
    values = np.concatenate([bank.probs()[bank.active] for bank in model.banks]) if model.banks else np.array([])
    if values.size == 0:
        return 0.0
    return float(np.mean((values >= low) & (values <= high)))
