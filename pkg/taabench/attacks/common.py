"""Pieces shared by every iterative attack: input checks, sign steps, result assembly."""

from typing import List, Optional

import numpy as np

from taabench.config import IMAGE_CHANNELS, IMAGE_SIZE
from taabench.errors import ShapeError
from taabench.model_zoo import Model, input_gradient, predict
from taabench.models import AdversarialExample, AttackBudget

IMAGE_SHAPE = (IMAGE_SIZE, IMAGE_SIZE, IMAGE_CHANNELS)


def prepare_input(x: np.ndarray, budget: AttackBudget) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    if x.shape != IMAGE_SHAPE:
        raise ShapeError("attack input", x.shape, IMAGE_SHAPE)
    if x.min() < budget.lower or x.max() > budget.upper:
        raise ValueError(f"attack input must lie in [{budget.lower}, {budget.upper}]")
    return x


def sample_gradient(model: Model, x: np.ndarray, y: int, objective=None) -> np.ndarray:
    """Loss gradient of a single image, evaluated as a batch of one."""
    return input_gradient(model, x[None], [y], objective)[0]


def sign_step(x_t: np.ndarray, direction: np.ndarray, x: np.ndarray, budget: AttackBudget) -> np.ndarray:
    """x_t + alpha * sign(direction), projected onto the budget around x."""
    return budget.project(x_t + budget.alpha * np.sign(direction), x)


def finish(name: str, model: Model, x: np.ndarray, x_adv: np.ndarray, y: int, moved: bool,
           trace: Optional[List[float]] = None) -> AdversarialExample:
    before, after = predict(model, np.stack([x, x_adv]))
    return AdversarialExample(
        x=x,
        x_adv=x_adv,
        label=int(y),
        surrogate_pred_before=int(before),
        surrogate_pred_after=int(after),
        attack=name,
        stationary=not moved,
        trace=list(trace or []),
    )
