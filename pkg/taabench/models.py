from dataclasses import dataclass, field
from typing import Callable, Dict, List, Literal, Optional, Sequence

import numpy as np

from taabench import tensor_core as tc

# L1 norms below this are treated as a zero gradient
L1_FLOOR = 1e-12


@dataclass(frozen=True)
class AttackBudget:
    """L-infinity budget shared by every attack; alpha defaults to epsilon / iterations."""

    epsilon: float
    iterations: int = 10
    step_size: Optional[float] = None
    lower: float = 0.0
    upper: float = 1.0

    def __post_init__(self):
        # epsilon == 0 is admitted as the degenerate no-perturbation budget
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")
        if not self.lower < self.upper:
            raise ValueError(f"pixel bounds must satisfy lower < upper, got [{self.lower}, {self.upper}]")

    @property
    def alpha(self) -> float:
        return self.step_size if self.step_size is not None else self.epsilon / self.iterations

    def project(self, x_adv: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Clip delta into [-eps, eps], then the image into the pixel bounds."""
        delta = np.clip(x_adv - x, -self.epsilon, self.epsilon)
        return np.clip(x + delta, self.lower, self.upper)

    def holds(self, x_adv: np.ndarray, x: np.ndarray, tolerance: float = 1e-12) -> bool:
        return bool(
            np.abs(x_adv - x).max(initial=0.0) <= self.epsilon + tolerance
            and x_adv.min(initial=self.lower) >= self.lower
            and x_adv.max(initial=self.upper) <= self.upper
        )


def l1_normalized(grad: np.ndarray) -> np.ndarray:
    norm = np.abs(grad).sum()
    if norm < L1_FLOOR:
        return np.zeros_like(grad)
    return grad / norm


@dataclass
class MomentumState:
    """Accumulated direction g (or v), decay mu and optional Nesterov look-ahead length."""

    velocity: np.ndarray
    decay: float
    lookahead: float = 0.0

    @classmethod
    def zeros(cls, shape, decay: float, lookahead: float = 0.0) -> "MomentumState":
        if decay < 0:
            raise ValueError(f"momentum must be >= 0, got {decay}")
        return cls(np.zeros(shape), decay, lookahead)

    def accumulate(self, grad: np.ndarray, normalize: bool = True) -> np.ndarray:
        if grad.shape != self.velocity.shape:
            raise ValueError(f"gradient shape {grad.shape} does not match state {self.velocity.shape}")
        term = l1_normalized(grad) if normalize else grad
        self.velocity = self.decay * self.velocity + term
        return self.velocity

    def lookahead_point(self, x: np.ndarray) -> np.ndarray:
        return x + self.lookahead * self.decay * self.velocity


@dataclass
class AdversarialExample:
    x: np.ndarray
    x_adv: np.ndarray
    label: int
    surrogate_pred_before: int
    surrogate_pred_after: int
    attack: str = ""
    stationary: bool = False
    target_preds: Dict[str, int] = field(default_factory=dict)
    trace: List[float] = field(default_factory=list)
    # ensemble attacks: member name -> [prediction on x, prediction on x']
    member_preds: Dict[str, List[int]] = field(default_factory=dict)

    @property
    def delta(self) -> np.ndarray:
        return self.x_adv - self.x

    @property
    def linf(self) -> float:
        return float(np.abs(self.delta).max(initial=0.0))

    @property
    def l2(self) -> float:
        return float(np.sqrt((self.delta ** 2).sum()))

    @property
    def fooled_surrogate(self) -> bool:
        return self.surrogate_pred_after != self.label


@dataclass(frozen=True)
class DiverseInputParams:
    probability: float = 0.5
    low: float = 0.8
    high: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"probability must lie in [0, 1], got {self.probability}")
        if not 0.0 < self.low <= self.high <= 1.0:
            raise ValueError(f"resize range must satisfy 0 < low <= high <= 1, got [{self.low}, {self.high}]")


@dataclass(frozen=True)
class SpectrumTransformParams:
    """Noise std sigma for xi, mask half-width rho (M ~ U[1-rho, 1+rho]), sample count N."""

    sigma: float
    rho: float = 0.5
    samples: int = 20

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        if self.samples < 1:
            raise ValueError(f"samples must be >= 1, got {self.samples}")

    @classmethod
    def for_budget(cls, budget: AttackBudget, rho: float = 0.5, samples: int = 20) -> "SpectrumTransformParams":
        return cls(sigma=budget.epsilon, rho=rho, samples=samples)

    @property
    def is_identity(self) -> bool:
        return self.sigma == 0 and self.rho == 0


@dataclass(frozen=True)
class SpectrumSaliencyMap:
    values: np.ndarray

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True, eq=False)
class PathSpec:
    baseline: Optional[np.ndarray] = None   # None means the all-black image
    steps: int = 30
    kind: Literal["straight", "ascent"] = "straight"
    ascent_lr: float = 0.0
    ascent_steps: int = 10

    def __post_init__(self):
        if self.kind not in ("straight", "ascent"):
            raise ValueError(f"unknown path kind '{self.kind}'")
        if self.kind == "straight" and self.steps < 2:
            raise ValueError(f"a straight path needs at least 2 steps, got {self.steps}")
        if self.kind == "ascent" and self.ascent_steps < 1:
            raise ValueError(f"ascent_steps must be >= 1, got {self.ascent_steps}")
        if self.ascent_lr < 0:
            raise ValueError(f"ascent_lr must be >= 0, got {self.ascent_lr}")
        if self.baseline is not None and (self.baseline.min() < 0 or self.baseline.max() > 1):
            raise ValueError("baseline must lie within [0, 1]")

    def baseline_for(self, x: np.ndarray) -> np.ndarray:
        if self.baseline is None:
            return np.zeros_like(x)
        if self.baseline.shape != x.shape:
            raise ValueError(f"baseline shape {self.baseline.shape} does not match input {x.shape}")
        return self.baseline


def _identity(t):
    return t


def weighted_attribution(attribution, gamma: float, positive: Callable = _identity,
                         negative: Callable = _identity):
    """
    WA_y = sum over A >= 0 of f_p(A) - gamma * sum over A < 0 of f_n(-A).

    `attribution` is a Tensor; f_p and f_n map Tensors to Tensors elementwise
    and must send 0 to 0.
    """
    a = attribution.data
    pos = tc.sum(positive(tc.multiply(attribution, (a >= 0).astype(np.float64))))
    neg = tc.sum(negative(tc.scale(tc.multiply(attribution, (a < 0).astype(np.float64)), -1.0)))
    return tc.subtract(pos, tc.scale(neg, gamma))


@dataclass(eq=False)
class NeuronAttribution:
    layer: str
    attribution: np.ndarray            # A = delta * IA
    delta: np.ndarray                  # y_j(x) - y_j(baseline)
    integrated_attention: np.ndarray   # IA(y_j)
    gamma: float = 1.0
    positive: Callable = _identity     # f_p
    negative: Callable = _identity     # f_n

    @property
    def weighted(self) -> float:
        with tc.no_grad():
            return weighted_attribution(tc.Tensor(self.attribution), self.gamma, self.positive,
                                        self.negative).item()


@dataclass(frozen=True, eq=False)
class EnsembleSpec:
    models: Sequence                   # J_1..J_k
    weights: Optional[Sequence[float]] = None
    lam: float = 0.0
    distance: Literal["l2", "l2-squared"] = "l2"
    fusion: Literal["probabilities", "losses"] = "probabilities"

    def __post_init__(self):
        if len(self.models) < 1:
            raise ValueError("an ensemble needs at least one model")
        if self.weights is None:
            object.__setattr__(self, "weights", tuple([1.0 / len(self.models)] * len(self.models)))
        else:
            object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if self.distance not in ("l2", "l2-squared"):
            raise ValueError(f"unknown distance '{self.distance}'")
        if self.fusion not in ("probabilities", "losses"):
            raise ValueError(f"unknown fusion '{self.fusion}'")
        self.validate()

    @property
    def k(self) -> int:
        return len(self.models)

    def validate(self) -> None:
        if len(self.weights) != len(self.models):
            raise ValueError(f"{len(self.weights)} weights for {len(self.models)} models")
        if any(w < 0 for w in self.weights):
            raise ValueError(f"ensemble weights must be >= 0, got {list(self.weights)}")
        total = float(np.sum(self.weights))
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"ensemble weights must sum to 1, got {total!r}")


@dataclass(frozen=True, eq=False)
class GeDirection:
    direction: np.ndarray              # entries in {-1, 0, +1}
    samples: int
    sample_inputs: Optional[np.ndarray] = None

    @classmethod
    def from_gradients(cls, grads: np.ndarray, sample_inputs: Optional[np.ndarray] = None) -> "GeDirection":
        """-sign of the mean over the leading (sample) axis."""
        return cls(-np.sign(grads.mean(axis=0)), grads.shape[0], sample_inputs)


# ---------------------------------------------------------------------------
# Report records
# ---------------------------------------------------------------------------

@dataclass
class SampleRecord:
    sample_id: int
    label: int
    surrogate_before: int
    surrogate_after: int
    linf: float
    l2: float
    stationary: bool
    target_clean: Dict[str, int] = field(default_factory=dict)
    target_adv: Dict[str, int] = field(default_factory=dict)
    member_preds: Dict[str, List[int]] = field(default_factory=dict)


@dataclass
class TransferCell:
    attack: str
    surrogate: str
    target: str
    asr: Optional[float]               # None when no clean-correct sample exists
    asr_unfiltered: float
    clean_accuracy: float
    clean_correct: int
    fooled: int
    mean_linf: float
    mean_l2: float
    wall_time: float


@dataclass
class AttackRow:
    attack: str
    surrogate: str
    members: List[str]
    wall_time: float
    records: List[SampleRecord] = field(default_factory=list)
    settings: Dict[str, object] = field(default_factory=dict)


@dataclass
class TransferReport:
    plan: Dict[str, object]
    targets: List[str]
    rows: List[AttackRow] = field(default_factory=list)
    cells: List[TransferCell] = field(default_factory=list)
    flags: List[Dict[str, object]] = field(default_factory=list)
    generated_at: str = ""

    def cell(self, attack: str, surrogate: str, target: str) -> TransferCell:
        for c in self.cells:
            if (c.attack, c.surrogate, c.target) == (attack, surrogate, target):
                return c
        raise KeyError(f"no cell for ({attack}, {surrogate}, {target})")
