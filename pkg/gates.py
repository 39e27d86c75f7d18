"""
Gates - Antithetic gate probability functions and Bernoulli mask sampling
Each gated layer owns one GateBank: logits, gate kind, scale k and unit lifecycle state
"""

from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
from scipy.special import expit, logit

from tensor_core import ParamTensor
from utils.errors import ConfigurationError, UsageError


# k=5000 stands in for k=infinity
K_INFINITY = 5000.0

# g(phi) = clip((k/7) phi + 1/2) so that the hard gate tracks sigmoid(phi) at k=1
HARD_SIGMOID_DIVISOR = 7.0

# phi = +-3/k gives sigmoid(3) ~ 0.95
PHI_INIT_LOGIT = 3.0

ArrayLike = Union[float, np.ndarray]


class GateKind(str, Enum):
    SCALED_SIGMOID = 'sigmoid'
    HARD_SIGMOID = 'hard'

    @classmethod
    def parse(cls, value: Union[str, 'GateKind']) -> 'GateKind':
        if isinstance(value, GateKind):
            return value
        aliases = {
            'sigmoid': cls.SCALED_SIGMOID,
            'scaled-sigmoid': cls.SCALED_SIGMOID,
            'hard': cls.HARD_SIGMOID,
            'hard-sigmoid': cls.HARD_SIGMOID,
        }
        try:
            return aliases[str(value).lower()]
        except KeyError:
            raise ConfigurationError(f"unknown gate kind '{value}'") from None


class UnitState(IntEnum):
    HIBERNATED = 0
    ACTIVE = 1


def gate_prob(phi: ArrayLike, k: float, kind: Union[str, GateKind] = GateKind.SCALED_SIGMOID) -> ArrayLike:
    """
    Gate activation probability g(phi) for a scaled sigmoid or centered hard sigmoid

    The value for negative phi is computed as 1 - g(|phi|), so
    g(phi) + g(-phi) == 1 holds exactly in floating point.

    Args:
        phi: Gate logit(s)
        k: Non-negative scale; k = 0 returns 0.5 everywhere
        kind: Gate function

    Returns:
        Probability (scalar or array) in [0, 1]
    """
    kind = GateKind.parse(kind)
    if k < 0:
        raise ConfigurationError(f"gate scale k must be non-negative, got {k}")
    phi_arr = np.asarray(phi, dtype=np.float64)
    if k == 0:
        result = np.full(phi_arr.shape, 0.5)
    else:
        magnitude = np.abs(phi_arr) * k
        if kind is GateKind.SCALED_SIGMOID:
            upper = expit(magnitude)
        else:
            upper = np.minimum(1.0, 0.5 + magnitude / HARD_SIGMOID_DIVISOR)
        result = np.where(phi_arr >= 0, upper, 1.0 - upper)
    return float(result) if np.ndim(phi) == 0 else result


def gate_prob_derivative(phi: ArrayLike, k: float,
                         kind: Union[str, GateKind] = GateKind.SCALED_SIGMOID) -> ArrayLike:
    """
    dg/dphi; the hard sigmoid uses 0 at its two kinks

    Args:
        phi: Gate logit(s)
        k: Non-negative scale
        kind: Gate function

    Returns:
        Derivative (scalar or array)
    """
    kind = GateKind.parse(kind)
    g = np.asarray(gate_prob(phi, k, kind), dtype=np.float64)
    if kind is GateKind.SCALED_SIGMOID:
        result = k * g * (1.0 - g)
    else:
        inside = (g > 0.0) & (g < 1.0)
        result = np.where(inside, k / HARD_SIGMOID_DIVISOR, 0.0)
    return float(result) if np.ndim(phi) == 0 else result


def phi_for_prob(prob: ArrayLike, k: float, kind: Union[str, GateKind] = GateKind.SCALED_SIGMOID) -> ArrayLike:
    """Inverse of gate_prob inside the open interval (0, 1)"""
    kind = GateKind.parse(kind)
    if k <= 0:
        raise ConfigurationError("phi_for_prob needs k > 0")
    prob = np.asarray(prob, dtype=np.float64)
    if kind is GateKind.SCALED_SIGMOID:
        return logit(prob) / k
    return (prob - 0.5) * HARD_SIGMOID_DIVISOR / k


def initial_phis(size: int, k_ref: float, scheme: str, rng: np.random.Generator,
                 kind: Union[str, GateKind] = GateKind.SCALED_SIGMOID) -> np.ndarray:
    """
    Initial logits for a bank

    Args:
        size: Number of units
        k_ref: Scale the initial probabilities refer to (the adapt-stage k)
        scheme: 'fixed' puts every unit at phi = +3/k_ref; 'normal' draws
            g(phi) from N(0.5, 0.01) and inverts it at k_ref
        rng: Random stream used by the 'normal' scheme
        kind: Gate function

    Returns:
        np.ndarray: Logits of length size
    """
    if k_ref <= 0:
        raise ConfigurationError("initial logits need a positive reference k")
    if scheme == 'fixed':
        return np.full(size, PHI_INIT_LOGIT / k_ref)
    if scheme == 'normal':
        probs = np.clip(rng.normal(0.5, 0.01, size=size), 1e-6, 1.0 - 1e-6)
        return np.asarray(phi_for_prob(probs, k_ref, kind), dtype=np.float64)
    raise ConfigurationError(f"unknown gate init scheme '{scheme}'")


@dataclass
class GateBank:
    """
    Gate logits of one layer plus per-unit lifecycle state

    Hibernated units always produce mask 0 and add nothing to the penalty.
    Once frozen (fine-tuning) the bank serves fixed_mask and its logits stop learning.
    """
    phis: ParamTensor
    kind: GateKind
    k: float
    state: np.ndarray
    rng: np.random.Generator
    frozen: bool = False
    fixed_mask: Optional[np.ndarray] = None
    name: str = ''

    @classmethod
    def create(cls, size: int, kind: Union[str, GateKind], k: float,
               seed: Union[int, np.random.SeedSequence], phi: float = 0.0, name: str = '') -> 'GateBank':
        return cls(phis=ParamTensor(np.full(size, float(phi)), name=f"{name}.phi"),
                   kind=GateKind.parse(kind),
                   k=float(k),
                   state=np.full(size, UnitState.ACTIVE, dtype=np.int8),
                   rng=np.random.default_rng(seed),
                   name=name)

    def __post_init__(self):
        if self.state.shape != self.phis.shape:
            raise ConfigurationError(
                f"gate bank '{self.name}' has {self.state.shape[0]} states for {self.phis.shape[0]} logits")

    @property
    def size(self) -> int:
        return int(self.phis.shape[0])

    @property
    def active(self) -> np.ndarray:
        return self.state == UnitState.ACTIVE

    @property
    def active_count(self) -> int:
        return int(np.count_nonzero(self.active))

    def probs(self) -> np.ndarray:
        """Raw g(phi) for every unit, hibernated ones included"""
        return gate_prob(self.phis.data, self.k, self.kind)

    def set_k(self, k: float) -> None:
        if k < 0:
            raise ConfigurationError(f"gate scale k must be non-negative, got {k}")
        self.k = float(k)

    def draw_uniforms(self) -> np.ndarray:
        """One Uniform(0,1) per unit from this bank's own stream"""
        return self.rng.random(self.size)

    def activate(self, indices, phi: float) -> None:
        self.state[indices] = UnitState.ACTIVE
        self.phis.data[indices] = phi

    def hibernate(self, indices, phi: float) -> None:
        self.state[indices] = UnitState.HIBERNATED
        self.phis.data[indices] = phi

    def freeze(self, fixed_mask: np.ndarray) -> None:
        fixed_mask = np.asarray(fixed_mask, dtype=np.float64)
        if fixed_mask.shape != self.phis.shape:
            raise ConfigurationError(f"fixed mask shape {fixed_mask.shape} does not match bank '{self.name}'")
        self.fixed_mask = np.where(self.active, fixed_mask, 0.0)
        self.frozen = True
        self.phis.freeze()

    def rng_state(self) -> Dict[str, Any]:
        return self.rng.bit_generator.state

    def set_rng_state(self, state: Dict[str, Any]) -> None:
        self.rng.bit_generator.state = state


def sample_antithetic(u: np.ndarray, bank: GateBank) -> Tuple[np.ndarray, np.ndarray]:
    """
    Antithetic mask pair m_plus = 1[u > g(-phi)], m_minus = 1[u < g(phi)]

    Args:
        u: One uniform per unit
        bank: Gate bank supplying phi, k and unit states

    Returns:
        Tuple of float 0/1 masks (m_plus, m_minus); hibernated units are 0 in both
    """
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (bank.size,):
        raise UsageError(f"got {u.shape[0] if u.ndim else 'scalar'} uniforms for {bank.size} gates")
    g = bank.probs()
    active = bank.active
    m_plus = ((u > 1.0 - g) & active).astype(np.float64)
    m_minus = ((u < g) & active).astype(np.float64)
    return m_plus, m_minus


def expected_mask(bank: GateBank) -> np.ndarray:
    """E[z] = g(phi) for active units, 0 for hibernated ones"""
    return np.where(bank.active, bank.probs(), 0.0)


def threshold_mask(bank: GateBank, tau: float = 0.5) -> np.ndarray:
    """
    Deterministic inference mask: 0 where g(phi) <= tau, else the fractional g(phi)

    Args:
        bank: Gate bank
        tau: Threshold in [0, 1]

    Returns:
        np.ndarray: Mask values
    """
    if not 0.0 <= tau <= 1.0:
        raise ConfigurationError(f"threshold tau must lie in [0, 1], got {tau}")
    g = expected_mask(bank)
    return np.where(g > tau, g, 0.0)
