"""
FGSM-family iterative attacks.

Every attack takes T sign steps of size alpha and projects onto the
epsilon-ball around the clean image (intersected with the pixel range)
after each step.
"""

from typing import Optional, Sequence, Tuple

import numpy as np

from taabench import tensor_core as tc
from taabench.attacks.common import finish, prepare_input, sample_gradient, sign_step
from taabench.model_zoo import Model, input_gradient
from taabench.models import (AdversarialExample, AttackBudget, DiverseInputParams, MomentumState,
                             SpectrumTransformParams)
from taabench.transforms import diverse_input, scale_copies, spectrum_transform


def ifgsm_batch(model: Model, xs: np.ndarray, ys: Sequence[int],
                budget: AttackBudget) -> Tuple[np.ndarray, np.ndarray]:
    """I-FGSM on a whole batch at once; returns x' and a per-row 'moved' flag."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys)
    x_t = xs.copy()
    moved = np.zeros(len(xs), dtype=bool)
    for _ in range(budget.iterations):
        grad = input_gradient(model, x_t, ys)
        moved |= np.any(grad != 0, axis=tuple(range(1, grad.ndim)))
        x_t = sign_step(x_t, grad, xs, budget)
    return x_t, moved


def attack_ifgsm(model: Model, x: np.ndarray, y: int, budget: AttackBudget) -> AdversarialExample:
    x = prepare_input(x, budget)
    x_adv, moved = ifgsm_batch(model, x[None], [y], budget)
    return finish("ifgsm", model, x, x_adv[0], y, bool(moved[0]))


def attack_mifgsm(model: Model, x: np.ndarray, y: int, budget: AttackBudget,
                  momentum: float = 1.0, objective=None) -> AdversarialExample:
    """g <- mu * g + grad / ||grad||_1, step along sign(g)."""
    x = prepare_input(x, budget)
    state = MomentumState.zeros(x.shape, momentum)
    x_t, moved = x.copy(), False
    for _ in range(budget.iterations):
        direction = state.accumulate(sample_gradient(model, x_t, y, objective))
        moved |= bool(np.any(direction != 0))
        x_t = sign_step(x_t, direction, x, budget)
    return finish("mifgsm", model, x, x_t, y, moved)


def attack_difgsm(model: Model, x: np.ndarray, y: int, budget: AttackBudget,
                  params: DiverseInputParams = DiverseInputParams(),
                  rng: Optional[np.random.Generator] = None) -> AdversarialExample:
    """I-FGSM whose gradient is taken through a random resize-and-pad of the input."""
    x = prepare_input(x, budget)
    rng = rng if rng is not None else np.random.default_rng(0)
    labels = np.array([y])

    def objective(batch):
        return tc.cross_entropy(model.forward(diverse_input(batch, params, rng)), labels, reduction="sum")

    x_t, moved = x.copy(), False
    for _ in range(budget.iterations):
        grad = sample_gradient(model, x_t, y, objective)
        moved |= bool(np.any(grad != 0))
        x_t = sign_step(x_t, grad, x, budget)
    return finish("difgsm", model, x, x_t, y, moved)


def scale_averaged_gradient(model: Model, x: np.ndarray, y: int, copies: int,
                            objective=None) -> np.ndarray:
    """Mean over scale copies x / 2**i of the loss gradient with respect to x."""
    labels = np.array([y])
    if objective is None:
        def objective(batch):
            return tc.cross_entropy(model.forward(batch), labels, reduction="sum")

    def total(batch):
        losses = [objective(copy) for copy in scale_copies(batch, copies)]
        out = losses[0]
        for term in losses[1:]:
            out = tc.add(out, term)
        return out

    _, grad = tc.grad_of(total, x[None])
    return grad[0] / copies


def attack_sinifgsm(model: Model, x: np.ndarray, y: int, budget: AttackBudget,
                    momentum: float = 1.0, copies: int = 5, nesterov: bool = True) -> AdversarialExample:
    """
    Each step: look ahead to x + alpha * mu * v, average the gradient over
    scale copies there, then v <- mu * v + g and step along sign(v).
    """
    x = prepare_input(x, budget)
    state = MomentumState.zeros(x.shape, momentum, lookahead=budget.alpha if nesterov else 0.0)
    x_t, moved = x.copy(), False
    for _ in range(budget.iterations):
        probe = state.lookahead_point(x_t) if nesterov else x_t
        velocity = state.accumulate(scale_averaged_gradient(model, probe, y, copies), normalize=False)
        moved |= bool(np.any(velocity != 0))
        x_t = sign_step(x_t, velocity, x, budget)
    return finish("sinifgsm", model, x, x_t, y, moved)


def spectrum_gradient(model: Model, x: np.ndarray, y: int, params: SpectrumTransformParams,
                      rng: np.random.Generator) -> np.ndarray:
    """
    Mean loss gradient over N spectrum-transformed draws of x, each taken
    with respect to its transformed sample.
    """
    if params.is_identity:
        return sample_gradient(model, x, y)
    with tc.no_grad():
        draws = spectrum_transform(np.repeat(x[None], params.samples, axis=0), params, rng).data
    return input_gradient(model, draws, np.full(params.samples, y)).mean(axis=0)


def attack_ssa(model: Model, x: np.ndarray, y: int, budget: AttackBudget, momentum: float = 1.0,
               params: Optional[SpectrumTransformParams] = None,
               rng: Optional[np.random.Generator] = None) -> AdversarialExample:
    """MI-FGSM driven by the spectrum-simulated gradient."""
    x = prepare_input(x, budget)
    params = params or SpectrumTransformParams.for_budget(budget)
    rng = rng if rng is not None else np.random.default_rng(0)
    state = MomentumState.zeros(x.shape, momentum)
    x_t, moved = x.copy(), False
    for _ in range(budget.iterations):
        direction = state.accumulate(spectrum_gradient(model, x_t, y, params, rng))
        moved |= bool(np.any(direction != 0))
        x_t = sign_step(x_t, direction, x, budget)
    return finish("ssa", model, x, x_t, y, moved)
