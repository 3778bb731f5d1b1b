"""
Attribution-driven attacks: integrated gradients (MIG) and neuron
attribution (NAA, and DANAA with a gradient-ascent path).
"""

from typing import Callable, Dict, Optional, Tuple

import numpy as np

from taabench import tensor_core as tc
from taabench.attacks.common import finish, prepare_input, sign_step
from taabench.model_zoo import Model, input_gradient
from taabench.models import (AdversarialExample, AttackBudget, MomentumState, NeuronAttribution, PathSpec,
                             weighted_attribution)
from taabench.tensor_core import Tensor


def _identity(t):
    return t


def _square(t):
    return tc.multiply(t, t)


# f_p / f_n choices; each maps 0 to 0 and is increasing on [0, inf)
ATTRIBUTION_TRANSFORMS: Dict[str, Callable[[Tensor], Tensor]] = {
    "identity": _identity,
    "square": _square,
    "tanh": tc.tanh,
}


def attribution_transform(name: str) -> Callable[[Tensor], Tensor]:
    if name not in ATTRIBUTION_TRANSFORMS:
        raise ValueError(f"unknown attribution transform '{name}', expected one of {sorted(ATTRIBUTION_TRANSFORMS)}")
    return ATTRIBUTION_TRANSFORMS[name]


def ascent_path(model: Model, y: int, baseline: np.ndarray, lr: float, steps: int) -> np.ndarray:
    """Points visited by `steps` clipped sign-ascent moves on the loss, starting at the baseline."""
    points = []
    p = baseline
    for _ in range(steps):
        grad = input_gradient(model, p[None], [y])[0]
        p = np.clip(p + lr * np.sign(grad), 0.0, 1.0)
        points.append(p)
    return np.stack(points)


def path_points(model: Model, x: np.ndarray, y: int, path: PathSpec) -> np.ndarray:
    base = path.baseline_for(x)
    if path.kind == "ascent":
        return ascent_path(model, y, base, path.ascent_lr, path.ascent_steps)
    alphas = (np.arange(path.steps) + 0.5) / path.steps
    return base[None] + alphas.reshape((-1,) + (1,) * x.ndim) * (x - base)[None]


def integrated_gradients(model: Model, x: np.ndarray, y: int, path: PathSpec = PathSpec(),
                         objective: Optional[Callable[[Tensor], Tensor]] = None) -> np.ndarray:
    """
    (x - baseline) * mean of the loss gradient at the midpoints of n equal
    subintervals of the straight path.
    """
    if path.kind != "straight":
        raise ValueError("integrated gradients needs a straight path")
    points = path_points(model, x, y, path)
    grads = input_gradient(model, points, np.full(len(points), y), objective)
    return (x - path.baseline_for(x)) * grads.mean(axis=0)


def integrated_attention(model: Model, points: np.ndarray, y: int, layer: str) -> np.ndarray:
    """Mean over path points of d(true-class logit)/d(activation at layer)."""
    with tc.no_grad():
        activations = model.forward(points, stop=layer).data
    labels = np.full(len(points), y)

    def true_logit(acts):
        return tc.sum(tc.select(model.forward(acts, start=layer), labels))

    _, grad = tc.grad_of(true_logit, activations)
    return grad.mean(axis=0)


def _activation(model: Model, x: np.ndarray, layer: str) -> np.ndarray:
    with tc.no_grad():
        return model.forward(x[None], stop=layer).data[0]


def neuron_attribution(model: Model, x: np.ndarray, y: int, layer: Optional[str] = None,
                       path: PathSpec = PathSpec(), gamma: float = 1.0,
                       positive: Callable = _identity, negative: Callable = _identity) -> NeuronAttribution:
    """A = (y_j(x) - y_j(baseline)) * IA(y_j)."""
    layer = layer or model.arch.default_tap
    model.arch.check_tap(layer)
    x = np.asarray(x, dtype=np.float64)
    ia = integrated_attention(model, path_points(model, x, y, path), y, layer)
    delta = _activation(model, x, layer) - _activation(model, path.baseline_for(x), layer)
    return NeuronAttribution(layer, delta * ia, delta, ia, gamma, positive, negative)


def weighted_attribution_gradient(model: Model, x: np.ndarray, layer: str, baseline_activation: np.ndarray,
                                  attention: np.ndarray, gamma: float, positive: Callable = _identity,
                                  negative: Callable = _identity) -> Tuple[float, np.ndarray]:
    """WA_y at x with the integrated attention held fixed, and its input gradient."""

    def objective(batch):
        act = model.forward(batch, stop=layer)
        attribution = tc.multiply(tc.subtract(act, baseline_activation[None]), attention[None])
        return weighted_attribution(attribution, gamma, positive, negative)

    value, grad = tc.grad_of(objective, x[None])
    return value, grad[0]


def _attribution_attack(name: str, model: Model, x: np.ndarray, y: int, budget: AttackBudget,
                        layer: Optional[str], gamma: float, path: PathSpec, positive: Callable,
                        negative: Callable) -> AdversarialExample:
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    x = prepare_input(x, budget)
    layer = layer or model.arch.default_tap
    model.arch.check_tap(layer)
    base_act = _activation(model, path.baseline_for(x), layer)
    # the ascent path starts at the baseline, so it does not move with x_t
    fixed = path_points(model, x, y, path) if path.kind == "ascent" else None

    def attention_at(point):
        points = fixed if fixed is not None else path_points(model, point, y, path)
        return integrated_attention(model, points, y, layer)

    x_t, moved, trace = x.copy(), False, []
    for _ in range(budget.iterations):
        value, grad = weighted_attribution_gradient(model, x_t, layer, base_act, attention_at(x_t), gamma,
                                                   positive, negative)
        trace.append(value)
        moved |= bool(np.any(grad != 0))
        x_t = sign_step(x_t, -grad, x, budget)
    final, _ = weighted_attribution_gradient(model, x_t, layer, base_act, attention_at(x_t), gamma,
                                             positive, negative)
    trace.append(final)
    return finish(name, model, x, x_t, y, moved, trace)


def attack_naa(model: Model, x: np.ndarray, y: int, budget: AttackBudget, layer: Optional[str] = None,
               gamma: float = 1.0, path: PathSpec = PathSpec(), positive: Callable = _identity,
               negative: Callable = _identity) -> AdversarialExample:
    """Sign-step descent on the weighted neuron attribution, straight path."""
    return _attribution_attack("naa", model, x, y, budget, layer, gamma, path, positive, negative)


def attack_danaa(model: Model, x: np.ndarray, y: int, budget: AttackBudget, layer: Optional[str] = None,
                 gamma: float = 1.0, ascent_lr: Optional[float] = None, ascent_steps: int = 10,
                 baseline: Optional[np.ndarray] = None, positive: Callable = _identity,
                 negative: Callable = _identity) -> AdversarialExample:
    """NAA over the recorded gradient-ascent trajectory from the baseline (ascent_lr defaults to eps/10)."""
    lr = budget.epsilon / 10 if ascent_lr is None else ascent_lr
    path = PathSpec(baseline=baseline, kind="ascent", ascent_lr=lr, ascent_steps=ascent_steps)
    return _attribution_attack("danaa", model, x, y, budget, layer, gamma, path, positive, negative)


def attack_mig(model: Model, x: np.ndarray, y: int, budget: AttackBudget, momentum: float = 1.0,
               path: PathSpec = PathSpec(), objective=None) -> AdversarialExample:
    """m <- mu * m + IG / ||IG||_1 at the current point, step along sign(m)."""
    x = prepare_input(x, budget)
    state = MomentumState.zeros(x.shape, momentum)
    x_t, moved = x.copy(), False
    for _ in range(budget.iterations):
        direction = state.accumulate(integrated_gradients(model, x_t, y, path, objective))
        moved |= bool(np.any(direction != 0))
        x_t = sign_step(x_t, direction, x, budget)
    return finish("mig", model, x, x_t, y, moved)
