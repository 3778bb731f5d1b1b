"""
Multi-surrogate attacks: the fused ensemble objective and SVRE's
variance-reduced two-level loop.
"""

from typing import List, Literal, Optional, Tuple

import numpy as np

from taabench import tensor_core as tc
from taabench.attacks.common import finish, prepare_input, sample_gradient, sign_step
from taabench.model_zoo import input_gradient, predict
from taabench.models import AdversarialExample, AttackBudget, EnsembleSpec, MomentumState
from taabench.tensor_core import Tensor


def _distance(spec: EnsembleSpec, batch: Tensor, origin: np.ndarray) -> Tensor:
    diff = tc.subtract(batch, origin)
    if spec.distance == "l2-squared":
        return tc.sum(tc.multiply(diff, diff))
    return tc.sum(tc.l2_norm(diff, axis=tuple(range(1, diff.ndim))))


def ensemble_loss(spec: EnsembleSpec, x, y, x_orig: Optional[np.ndarray] = None) -> Tensor:
    """
    -log(sum_i alpha_i * softmax(J_i(x))[y]) + lam * d(x, x_orig), summed over the batch.

    The mixture is evaluated as a logsumexp of log-probabilities; models with
    zero weight are skipped. With fusion="losses" the first term becomes
    sum_i alpha_i * CE(J_i(x), y).
    """
    spec.validate()
    batch = tc.as_tensor(x)
    single = batch.ndim == 3
    if single:
        batch = tc.reshape(batch, (1,) + batch.shape)
    labels = np.full(batch.shape[0], y) if np.isscalar(y) else np.asarray(y)
    members = [(m, w) for m, w in zip(spec.models, spec.weights) if w > 0]

    if spec.fusion == "losses":
        total = None
        for model, weight in members:
            term = tc.scale(tc.cross_entropy(model.forward(batch), labels, reduction="sum"), weight)
            total = term if total is None else tc.add(total, term)
    else:
        columns = [tc.add(tc.select(tc.log_softmax(model.forward(batch)), labels), float(np.log(weight)))
                   for model, weight in members]
        total = tc.scale(tc.sum(tc.logsumexp(tc.stack(columns, axis=-1))), -1.0)

    if spec.lam != 0 and x_orig is not None:
        origin = np.asarray(x_orig)
        origin = origin[None] if origin.ndim == 3 else origin
        total = tc.add(total, tc.scale(_distance(spec, batch, origin), spec.lam))
    return total


def model_gradients(spec: EnsembleSpec, x: np.ndarray, y: int) -> List[np.ndarray]:
    """Per-model loss gradients at x, in model-index order."""
    return [sample_gradient(model, x, y) for model in spec.models]


def fused_gradient(spec: EnsembleSpec, grads: List[np.ndarray]) -> np.ndarray:
    """sum_i alpha_i * g_i, reduced in model-index order."""
    total = np.zeros_like(grads[0])
    for weight, grad in zip(spec.weights, grads):
        total = total + weight * grad
    return total


def ensemble_gradient(spec: EnsembleSpec, x: np.ndarray, y: int, x_orig: Optional[np.ndarray] = None) -> np.ndarray:
    if spec.fusion == "losses":
        grad = fused_gradient(spec, model_gradients(spec, x, y))
        if spec.lam != 0 and x_orig is not None:
            _, penalty = tc.grad_of(lambda b: tc.scale(_distance(spec, b, x_orig[None]), spec.lam), x[None])
            grad = grad + penalty[0]
        return grad
    labels = np.array([y])
    return input_gradient(spec.models[0], x[None], labels,
                          lambda batch: ensemble_loss(spec, batch, labels, x_orig))[0]


def _finish_ensemble(name: str, spec: EnsembleSpec, x: np.ndarray, x_adv: np.ndarray, y: int,
                     moved: bool) -> AdversarialExample:
    """Surrogate predictions come from the first member; every member's pair lands in member_preds."""
    example = finish(name, spec.models[0], x, x_adv, y, moved)
    names = [model.name for model in spec.models]
    for i, model in enumerate(spec.models):
        key = model.name if model.name and names.count(model.name) == 1 else f"{model.name or 'member'}#{i}"
        before, after = predict(model, np.stack([x, x_adv]))
        example.member_preds[key] = [int(before), int(after)]
    return example


def attack_ensemble(spec: EnsembleSpec, x: np.ndarray, y: int, budget: AttackBudget,
                    momentum: float = 1.0) -> AdversarialExample:
    """MI-FGSM on the ensemble objective."""
    x = prepare_input(x, budget)
    state = MomentumState.zeros(x.shape, momentum)
    x_t, moved = x.copy(), False
    for _ in range(budget.iterations):
        direction = state.accumulate(ensemble_gradient(spec, x_t, y, x))
        moved |= bool(np.any(direction != 0))
        x_t = sign_step(x_t, direction, x, budget)
    return _finish_ensemble("ensemble", spec, x, x_t, y, moved)


def variance_reduced_gradient(spec: EnsembleSpec, j: int, x_hat: np.ndarray, x_anchor: np.ndarray, y: int,
                              full_grad: Optional[np.ndarray] = None,
                              anchor_grad: Optional[np.ndarray] = None) -> np.ndarray:
    """grad L_j(x_hat) - grad L_j(x_anchor) + full gradient at the anchor."""
    model = spec.models[j]
    if anchor_grad is None:
        anchor_grad = sample_gradient(model, x_anchor, y)
    if full_grad is None:
        full_grad = fused_gradient(spec, model_gradients(spec, x_anchor, y))
    return sample_gradient(model, x_hat, y) - anchor_grad + full_grad


def _inner_loop(spec: EnsembleSpec, x: np.ndarray, x_t: np.ndarray, y: int, budget: AttackBudget,
                anchors: List[np.ndarray], full: np.ndarray, momentum: float, iterations: int,
                rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    inner = MomentumState.zeros(x.shape, momentum)
    x_hat = x_t.copy()
    probabilities = np.asarray(spec.weights)
    for _ in range(iterations):
        j = int(rng.choice(spec.k, p=probabilities))
        g = variance_reduced_gradient(spec, j, x_hat, x_t, y, full, anchors[j])
        x_hat = sign_step(x_hat, inner.accumulate(g), x, budget)
    return inner.velocity, x_hat


def attack_svre(spec: EnsembleSpec, x: np.ndarray, y: int, budget: AttackBudget, momentum_outer: float = 1.0,
                momentum_inner: float = 1.0, inner_iters: Optional[int] = None,
                rng: Optional[np.random.Generator] = None,
                outer_direction: Literal["accumulated", "final_point"] = "accumulated") -> AdversarialExample:
    """
    Outer loop: full gradient at x_t over all models. Inner loop: inner_iters
    variance-reduced steps on a copy, each on a model drawn by ensemble weight.
    The inner accumulated direction (or the inner displacement) feeds the
    outer momentum and a projected sign step.
    """
    if outer_direction not in ("accumulated", "final_point"):
        raise ValueError(f"unknown outer_direction '{outer_direction}'")
    x = prepare_input(x, budget)
    inner_iters = 2 * spec.k if inner_iters is None else inner_iters
    if inner_iters < 0:
        raise ValueError(f"inner_iters must be >= 0, got {inner_iters}")
    rng = rng if rng is not None else np.random.default_rng(0)

    outer = MomentumState.zeros(x.shape, momentum_outer)
    x_t, moved = x.copy(), False
    for _ in range(budget.iterations):
        anchors = model_gradients(spec, x_t, y)
        full = fused_gradient(spec, anchors)
        if inner_iters == 0:
            direction = full
        else:
            accumulated, x_hat = _inner_loop(spec, x, x_t, y, budget, anchors, full,
                                             momentum_inner, inner_iters, rng)
            direction = accumulated if outer_direction == "accumulated" else x_hat - x_t
        step = outer.accumulate(direction)
        moved |= bool(np.any(step != 0))
        x_t = sign_step(x_t, step, x, budget)
    return _finish_ensemble("svre", spec, x, x_t, y, moved)
