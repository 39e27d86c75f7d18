"""
Plastic Net - Gated model assembly, the L0-regularized objective and the joint training step
Also owns the model templates (moons MLP, LeNet5-Caffe) and the parameter-counting convention
"""

import copy
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from arm_grad import EstimatorMode, arm_gradient_from_losses, penalty_gradient, penalty_value
from gates import K_INFINITY, GateBank, GateKind, sample_antithetic, threshold_mask
from tensor_core import (Adam, ParamTensor, Tensor, apply_gate, backward, conv2d_forward,
                         dense_forward, flatten, maxpool2x2, mse_loss, no_grad,
                         softmax_cross_entropy)
from utils.data_processor import DataProcessor
from utils.errors import ConfigurationError, NumericFailure, UsageError


class LayerKind(str, Enum):
    DENSE = 'dense'
    CONV2D = 'conv2d'
    FLATTEN_GATE = 'flatten-gate'
    FIXED_PROJECTION = 'fixed-projection'


class LossKind(str, Enum):
    CROSS_ENTROPY = 'softmax-cross-entropy'
    MSE = 'mean-squared-error'


@dataclass
class GatedLayer:
    """
    One layer of a PlasticModel; the bank (if any) gates the layer's output units

    Output (classifier) layers carry no bank. Conv layers gate whole channels
    and may be followed by 2x2 max pooling.
    """
    kind: LayerKind
    weight: Optional[ParamTensor] = None
    bias: Optional[ParamTensor] = None
    bank: Optional[GateBank] = None
    activation: str = 'relu'
    stride: int = 1
    pool: bool = False
    name: str = ''

    @property
    def units(self) -> int:
        if self.kind is LayerKind.CONV2D:
            return int(self.weight.shape[0])
        if self.kind is LayerKind.FLATTEN_GATE:
            return self.bank.size
        return int(self.weight.shape[1])

    def parameters(self) -> List[ParamTensor]:
        return [p for p in (self.weight, self.bias) if p is not None and not p.frozen]

    def forward(self, x: Tensor, mask=None) -> Tensor:
        if self.kind is LayerKind.CONV2D:
            out = conv2d_forward(x, self.weight, self.bias, self.stride)
            if self.activation == 'relu':
                out = out.relu()
        elif self.kind is LayerKind.FLATTEN_GATE:
            out = flatten(x)
        else:
            out = dense_forward(x, self.weight, self.bias, self.activation)
        if self.bank is not None and mask is not None:
            out = apply_gate(out, mask)
        if self.pool:
            out = maxpool2x2(out)
        return out


@dataclass
class ArchSpec:
    """Active-unit count per gated layer and the resulting effective parameter count"""
    counts: List[int]
    param_count: int = 0

    def to_string(self) -> str:
        return "-".join(str(c) for c in self.counts)

    @staticmethod
    def parse_counts(text: str) -> List[int]:
        try:
            counts = [int(part) for part in str(text).strip().split('-')]
        except ValueError:
            raise ConfigurationError(f"architecture string '{text}' is not a dash-separated integer list") from None
        if any(c < 0 for c in counts):
            raise ConfigurationError(f"architecture string '{text}' has negative counts")
        return counts


@dataclass(frozen=True)
class LayerSlot:
    """Counting view of one template layer"""
    kind: LayerKind
    units: int
    kernel_area: int = 1
    gated: bool = True


@dataclass(frozen=True)
class ModelTemplate:
    """Upper-bound topology of a model family"""
    name: str
    input_shape: Tuple[int, ...]
    input_units: int
    slots: Tuple[LayerSlot, ...]
    classes: int

    @property
    def gated_slots(self) -> List[LayerSlot]:
        return [s for s in self.slots if s.gated]

    @property
    def upper_bound(self) -> List[int]:
        return [s.units for s in self.gated_slots]

    @property
    def full_param_count(self) -> int:
        return count_params(self.upper_bound, self)


TEMPLATES: Dict[str, ModelTemplate] = {
    # 2-100 (fixed)-80-2
    'moons-mlp': ModelTemplate(
        name='moons-mlp',
        input_shape=(2,),
        input_units=2,
        slots=(LayerSlot(LayerKind.FIXED_PROJECTION, 100),
               LayerSlot(LayerKind.DENSE, 80),
               LayerSlot(LayerKind.DENSE, 2, gated=False)),
        classes=2),
    # LeNet5-Caffe: conv 20 (5x5) - pool - conv 50 (5x5) - pool - flatten 800 - fc 500 - fc 10
    'lenet5': ModelTemplate(
        name='lenet5',
        input_shape=(1, 28, 28),
        input_units=1,
        slots=(LayerSlot(LayerKind.CONV2D, 20, kernel_area=25),
               LayerSlot(LayerKind.CONV2D, 50, kernel_area=25),
               LayerSlot(LayerKind.FLATTEN_GATE, 800),
               LayerSlot(LayerKind.DENSE, 500),
               LayerSlot(LayerKind.DENSE, 10, gated=False)),
        classes=10),
}


def get_template(template: Union[str, ModelTemplate]) -> ModelTemplate:
    if isinstance(template, ModelTemplate):
        return template
    try:
        return TEMPLATES[template]
    except KeyError:
        raise ConfigurationError(
            f"unknown template '{template}' (known: {', '.join(sorted(TEMPLATES))})") from None


def count_params(arch: Union[ArchSpec, Sequence[int], str], template: Union[str, ModelTemplate]) -> int:
    """
    Effective parameter count: a weight counts iff both endpoint units are active

    Conv weights count (active filters) x (active input channels) x kh x kw;
    the flatten gate prunes fully connected inputs; fixed-projection weights
    and all biases are excluded.

    Args:
        arch: Active counts per gated layer (ArchSpec, list or dash string)
        template: Template name or object

    Returns:
        int: Effective parameter count
    """
    template = get_template(template)
    if isinstance(arch, ArchSpec):
        counts = list(arch.counts)
    elif isinstance(arch, str):
        counts = ArchSpec.parse_counts(arch)
    else:
        counts = [int(c) for c in arch]

    gated = template.gated_slots
    if len(counts) != len(gated):
        raise UsageError(f"template '{template.name}' has {len(gated)} gated layers, got {len(counts)} counts")
    for count, slot in zip(counts, gated):
        if count < 0 or count > slot.units:
            raise UsageError(f"active count {count} outside [0, {slot.units}] for a {slot.kind.value} layer")

    total = 0
    feeding = template.input_units
    remaining = iter(counts)
    for slot in template.slots:
        active = next(remaining) if slot.gated else slot.units
        if slot.kind is LayerKind.CONV2D:
            total += active * feeding * slot.kernel_area
        elif slot.kind is LayerKind.DENSE:
            total += feeding * active
        feeding = active
    return total


class PlasticModel:
    """
    Ordered gated layers computing h(x; theta ⊙ z)

    Args:
        layers: Layers in evaluation order
        loss_kind: Data loss used by the objective
        template_name: Template the model was built from
    """

    def __init__(self, layers: List[GatedLayer], loss_kind: LossKind = LossKind.CROSS_ENTROPY,
                 template_name: str = '', metadata: Optional[Dict[str, Any]] = None):
        self.layers = layers
        self.loss_kind = LossKind(loss_kind)
        self.template_name = template_name
        self.metadata = metadata or {}

    @property
    def gated_layers(self) -> List[GatedLayer]:
        return [layer for layer in self.layers if layer.bank is not None]

    @property
    def banks(self) -> List[GateBank]:
        return [layer.bank for layer in self.gated_layers]

    def parameters(self) -> List[ParamTensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def gate_parameters(self) -> List[ParamTensor]:
        return [bank.phis for bank in self.banks]

    def set_k(self, k: float) -> None:
        for bank in self.banks:
            bank.set_k(k)

    def active_counts(self) -> List[int]:
        return [bank.active_count for bank in self.banks]

    def ones_masks(self) -> List[np.ndarray]:
        return [np.where(bank.active, 1.0, 0.0) for bank in self.banks]

    def data_loss(self, logits: Tensor, labels: np.ndarray) -> Tensor:
        if self.loss_kind is LossKind.CROSS_ENTROPY:
            return softmax_cross_entropy(logits, labels)
        return mse_loss(logits, DataProcessor.one_hot(labels, logits.shape[1]))


def _random_weight(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def build_model(template: Union[str, ModelTemplate], kind: Union[str, GateKind] = GateKind.SCALED_SIGMOID,
                k: float = K_INFINITY, seed_model: int = 0, seed_gates: int = 1,
                projection: Optional[np.ndarray] = None,
                loss_kind: LossKind = LossKind.CROSS_ENTROPY) -> PlasticModel:
    """
    Allocate a template at its upper-bound size with every gate active at phi = 0

    Args:
        template: Template name or object
        kind: Gate function for every bank
        k: Initial gate scale
        seed_model: Seed for weight initialization
        seed_gates: Seed from which every bank's uniform stream is spawned
        projection: Frozen input projection for templates that start with one
        loss_kind: Data loss

    Returns:
        PlasticModel
    """
    template = get_template(template)
    rng = np.random.default_rng(seed_model)
    gate_seeds = iter(np.random.SeedSequence(seed_gates).spawn(len(template.gated_slots)))

    layers: List[GatedLayer] = []
    channels = template.input_shape[0]
    spatial = template.input_shape[1:] if len(template.input_shape) == 3 else None
    features = template.input_units

    for index, slot in enumerate(template.slots):
        name = f"layer{index}"
        bank = (GateBank.create(slot.units, kind, k, seed=next(gate_seeds), name=name)
                if slot.gated else None)
        is_output = not slot.gated

        if slot.kind is LayerKind.FIXED_PROJECTION:
            if projection is None:
                raise ConfigurationError(f"template '{template.name}' needs a fixed projection matrix")
            if projection.shape != (features, slot.units):
                raise ConfigurationError(
                    f"projection shape {projection.shape} does not match ({features}, {slot.units})")
            layers.append(GatedLayer(LayerKind.FIXED_PROJECTION,
                                     weight=ParamTensor(projection, name=f"{name}.weight", frozen=True),
                                     bank=bank, activation='relu', name=name))
            features = slot.units

        elif slot.kind is LayerKind.CONV2D:
            side = int(round(np.sqrt(slot.kernel_area)))
            weight = _random_weight(rng, (slot.units, channels, side, side), channels * slot.kernel_area)
            layers.append(GatedLayer(LayerKind.CONV2D,
                                     weight=ParamTensor(weight, name=f"{name}.weight"),
                                     bias=ParamTensor(np.zeros(slot.units), name=f"{name}.bias"),
                                     bank=bank, activation='relu', pool=True, name=name))
            channels = slot.units
            spatial = tuple((extent - side + 1) // 2 for extent in spatial)
            features = channels * int(np.prod(spatial))

        elif slot.kind is LayerKind.FLATTEN_GATE:
            if features != slot.units:
                raise ConfigurationError(f"flatten width {features} does not match template {slot.units}")
            layers.append(GatedLayer(LayerKind.FLATTEN_GATE, bank=bank, activation='identity', name=name))

        else:
            weight = _random_weight(rng, (features, slot.units), features)
            layers.append(GatedLayer(LayerKind.DENSE,
                                     weight=ParamTensor(weight, name=f"{name}.weight"),
                                     bias=ParamTensor(np.zeros(slot.units), name=f"{name}.bias"),
                                     bank=bank, activation='identity' if is_output else 'relu',
                                     name=name))
            features = slot.units

    return PlasticModel(layers, loss_kind=loss_kind, template_name=template.name)


def _check_masks(model: PlasticModel, masks: Optional[Sequence]) -> List:
    banks = model.banks
    if masks is None:
        return [np.ones(bank.size) for bank in banks]
    masks = list(masks)
    if len(masks) != len(banks):
        raise ConfigurationError(f"got {len(masks)} masks for {len(banks)} gated layers")
    for mask, bank in zip(masks, banks):
        values = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
        if values.shape != (bank.size,):
            raise ConfigurationError(f"mask of shape {values.shape} does not match {bank.size} gates")
        if np.any(values < 0.0) or np.any(values > 1.0):
            raise ConfigurationError("mask entries must lie in [0, 1]")
    return masks


def model_forward(model: PlasticModel, x, masks: Optional[Sequence] = None) -> Tensor:
    """
    Logits of the gated network; each gated layer's output is multiplied by its mask

    Args:
        model: Plastic model
        x: Input batch (array or Tensor)
        masks: One real vector per gated layer (None means all ones)

    Returns:
        Tensor: Logits
    """
    masks = iter(_check_masks(model, masks))
    out = x if isinstance(x, Tensor) else Tensor(x)
    for layer in model.layers:
        out = layer.forward(out, next(masks) if layer.bank is not None else None)
    return out


def _lambda_list(model: PlasticModel, lambdas) -> List[Union[float, np.ndarray]]:
    banks = model.banks
    if np.isscalar(lambdas):
        return [float(lambdas)] * len(banks)
    lambdas = list(lambdas)
    if len(lambdas) != len(banks):
        raise ConfigurationError(f"got {len(lambdas)} lambda values for {len(banks)} gated layers")
    return lambdas


def l0_objective(model: PlasticModel, batch: Tuple[np.ndarray, np.ndarray], masks: Optional[Sequence],
                 lambdas) -> Tuple[float, float]:
    """
    Data loss at the given masks and the expected-L0 penalty

    Args:
        model: Plastic model
        batch: (inputs, labels)
        masks: Sampled or deterministic masks per gated layer
        lambdas: Scalar or one lambda per gated layer

    Returns:
        Tuple (data_loss, penalty)
    """
    x, y = batch
    with no_grad():
        data = model.data_loss(model_forward(model, x, masks), y).item()
    penalty = sum(penalty_value(bank, lam) for bank, lam in zip(model.banks, _lambda_list(model, lambdas)))
    return data, float(penalty)


def inference_masks(model: PlasticModel, tau: float = 0.5) -> List[np.ndarray]:
    """Deterministic masks: the frozen fine-tune mask, else the threshold mask"""
    return [bank.fixed_mask if bank.frozen else threshold_mask(bank, tau) for bank in model.banks]


def predict_proba(model: PlasticModel, x: np.ndarray, tau: float = 0.5, batch_size: int = 1000) -> np.ndarray:
    """Class probabilities under the deterministic inference masks"""
    masks = inference_masks(model, tau)
    chunks = []
    with no_grad():
        for start in range(0, len(x), batch_size):
            logits = model_forward(model, x[start:start + batch_size], masks).data
            shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
            chunks.append(shifted / shifted.sum(axis=1, keepdims=True))
    return np.concatenate(chunks) if chunks else np.zeros((0, 0))


def evaluate_accuracy(model: PlasticModel, x: np.ndarray, y: np.ndarray, tau: float = 0.5) -> float:
    if len(x) == 0:
        return float('nan')
    return float(np.mean(predict_proba(model, x, tau).argmax(axis=1) == y))


@dataclass
class StepResult:
    """What one joint (theta, phi) update produced"""
    data_loss: float
    penalty: float
    disagreement: int
    gated_units: int


def train_step(model: PlasticModel, batch: Tuple[np.ndarray, np.ndarray], lambdas, optimizer: Adam,
               mode: Union[str, EstimatorMode] = EstimatorMode.PAPER_LITERAL) -> StepResult:
    """
    One joint update of the weights (backprop through m_minus) and gate logits (ARM + penalty)

    Args:
        model: Plastic model; each bank's current k is used
        batch: (inputs, labels)
        lambdas: Scalar or one lambda per gated layer
        optimizer: Adam over model.parameters() and model.gate_parameters()
        mode: ARM estimator mode

    Returns:
        StepResult
    """
    x, y = batch
    banks = model.banks
    lambdas = _lambda_list(model, lambdas)

    uniforms, plus_masks, minus_masks = [], [], []
    for bank in banks:
        if bank.frozen:
            uniforms.append(None)
            plus_masks.append(bank.fixed_mask)
            minus_masks.append(bank.fixed_mask)
        else:
            u = bank.draw_uniforms()
            m_plus, m_minus = sample_antithetic(u, bank)
            uniforms.append(u)
            plus_masks.append(m_plus)
            minus_masks.append(m_minus)

    # weights learn through m_minus only
    optimizer.zero_grad()
    loss = model.data_loss(model_forward(model, x, minus_masks), y)
    f_minus = loss.item()
    if not np.isfinite(f_minus):
        raise NumericFailure("non-finite data loss at the m_minus mask",
                             {'loss': f_minus, 'k': [bank.k for bank in banks],
                              'active_counts': model.active_counts()})
    if loss.requires_grad:
        backward(loss)

    disagreement = int(sum(np.count_nonzero(p != m) for p, m in zip(plus_masks, minus_masks)))
    if disagreement:
        with no_grad():
            f_plus = model.data_loss(model_forward(model, x, plus_masks), y).item()
        if not np.isfinite(f_plus):
            raise NumericFailure("non-finite data loss at the m_plus mask",
                                 {'loss': f_plus, 'k': [bank.k for bank in banks],
                                  'active_counts': model.active_counts()})
    else:
        f_plus = f_minus
    # identical masks give a zero ARM term

    penalty = 0.0
    for bank, u, lam in zip(banks, uniforms, lambdas):
        if bank.frozen:
            continue
        # overwrites: phi gets no backprop gradient
        bank.phis.grad = (arm_gradient_from_losses(f_plus, f_minus, bank, u, mode)
                          + penalty_gradient(bank, lam))
        penalty += penalty_value(bank, lam)

    optimizer.step()
    return StepResult(data_loss=f_minus, penalty=penalty, disagreement=disagreement,
                      gated_units=sum(bank.active_count for bank in banks if not bank.frozen))


def fold_masks(model: PlasticModel, masks: Sequence[np.ndarray]) -> PlasticModel:
    """
    Copy of the model with the masks scaled into weights and biases

    Running the copy with all-ones masks reproduces the original under the
    given masks (structured pruning: zero masks remove whole rows/filters).

    Args:
        model: Plastic model
        masks: Non-negative mask per gated layer

    Returns:
        PlasticModel: Folded copy
    """
    masks = [np.asarray(m, dtype=np.float64) for m in _check_masks(model, masks)]
    folded = copy.deepcopy(model)
    mask_iter = iter(masks)
    pending_rows = None
    for layer in folded.layers:
        if pending_rows is not None and layer.weight is not None:
            layer.weight.data *= pending_rows[:, None]
            pending_rows = None
        if layer.bank is None:
            continue
        mask = next(mask_iter)
        if layer.kind is LayerKind.FLATTEN_GATE:
            pending_rows = mask
        elif layer.kind is LayerKind.CONV2D:
            layer.weight.data *= mask[:, None, None, None]
            if layer.bias is not None:
                layer.bias.data *= mask
        else:
            layer.weight.data *= mask[None, :]
            if layer.bias is not None:
                layer.bias.data *= mask
    return folded
