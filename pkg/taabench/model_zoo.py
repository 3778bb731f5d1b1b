"""
Small differentiable classifiers: architectures, training, inference, persistence.

An architecture is an ordered list of named stages; every stage name is a
tap, so attribution attacks can split the forward pass at any stage.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from taabench import tensor_core as tc
from taabench.config import IMAGE_CHANNELS, IMAGE_SIZE, NUM_CLASSES, PREDICT_BATCH
from taabench.errors import (NonFiniteError, ShapeError, TrainingDivergedError,
                             UnknownNameError, UnknownTapError, WeightFileError)
from taabench.tensor_core import Tensor
from taabench.weights import read_weights, write_weights

logger = logging.getLogger(__name__)

INPUT_SHAPE = (IMAGE_SIZE, IMAGE_SIZE, IMAGE_CHANNELS)

StageFn = Callable[[Dict[str, Tensor], Tensor], Tensor]
# (batch of images, labels) -> (batch, labels); used to mix adversarial examples into training
BatchHook = Callable[[Dict[str, np.ndarray], np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]]


# ---------------------------------------------------------------------------
# Stage builders
# ---------------------------------------------------------------------------

def conv_stage(name: str, activation: bool = True) -> StageFn:
    def run(params, h):
        out = tc.add(tc.conv2d(h, params[f"{name}.w"]), params[f"{name}.b"])
        return tc.relu(out) if activation else out
    return run


def dense_stage(name: str, activation: bool = False) -> StageFn:
    def run(params, h):
        out = tc.add(tc.matmul(h, params[f"{name}.w"]), params[f"{name}.b"])
        return tc.relu(out) if activation else out
    return run


def flatten_stage(params, h):
    return tc.reshape(h, (h.shape[0], -1))


def mean_pool_stage(params, h):
    return tc.mean(h, axis=(1, 2))


@dataclass(frozen=True, eq=False)
class Architecture:
    arch_id: str
    param_shapes: Tuple[Tuple[str, Tuple[int, ...]], ...]
    stages: Tuple[Tuple[str, StageFn], ...]
    default_tap: str
    adversarial: bool = False
    input_shape: Tuple[int, ...] = INPUT_SHAPE
    description: str = ""

    @property
    def tap_names(self) -> List[str]:
        return [name for name, _ in self.stages]

    @property
    def parameter_count(self) -> int:
        return int(sum(np.prod(shape) for _, shape in self.param_shapes))

    def init_params(self, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        """He-normal weights, zero biases."""
        params = {}
        for name, shape in self.param_shapes:
            if name.endswith(".b"):
                params[name] = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[:-1]))
                params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        return params

    def check_tap(self, layer: str) -> None:
        if layer not in self.tap_names:
            raise UnknownTapError(layer, self.tap_names)

    def run(self, params: Dict[str, Tensor], h: Tensor, start: Optional[str] = None,
            stop: Optional[str] = None) -> Tensor:
        """
        Forward pass over the stages strictly after `start` up to and including `stop`.

        With start set, h is the activation of that stage rather than an image.
        """
        for name in (start, stop):
            if name is not None:
                self.check_tap(name)
        active = start is None
        for name, stage in self.stages:
            if active:
                h = stage(params, h)
                if name == stop:
                    return h
            elif name == start:
                active = True
        return h


def _cnn(arch_id: str, c1: int, c2: int, adversarial: bool = False, description: str = "") -> Architecture:
    return Architecture(
        arch_id=arch_id,
        param_shapes=(
            ("conv1.w", (3, 3, IMAGE_CHANNELS, c1)), ("conv1.b", (c1,)),
            ("conv2.w", (3, 3, c1, c2)), ("conv2.b", (c2,)),
            ("fc.w", (c2, NUM_CLASSES)), ("fc.b", (NUM_CLASSES,)),
        ),
        stages=(
            ("conv1", conv_stage("conv1")),
            ("conv2", conv_stage("conv2")),
            ("pool", mean_pool_stage),
            ("logits", dense_stage("fc")),
        ),
        default_tap="conv2",
        adversarial=adversarial,
        description=description,
    )


_PIXELS = IMAGE_SIZE * IMAGE_SIZE * IMAGE_CHANNELS

ARCHITECTURES: Dict[str, Architecture] = {
    "mlp-256": Architecture(
        arch_id="mlp-256",
        param_shapes=(
            ("fc1.w", (_PIXELS, 256)), ("fc1.b", (256,)),
            ("fc2.w", (256, NUM_CLASSES)), ("fc2.b", (NUM_CLASSES,)),
        ),
        stages=(
            ("flatten", flatten_stage),
            ("fc1", dense_stage("fc1", activation=True)),
            ("logits", dense_stage("fc2")),
        ),
        default_tap="fc1",
        description="flatten -> 256 -> 10",
    ),
    "tinycnn-a": _cnn("tinycnn-a", 8, 16, description="conv8 -> relu -> conv16 -> relu -> meanpool -> dense10"),
    "tinycnn-b": _cnn("tinycnn-b", 12, 24, description="conv12 -> relu -> conv24 -> relu -> meanpool -> dense10"),
    "tinycnn-a-adv": _cnn("tinycnn-a-adv", 8, 16, adversarial=True,
                          description="tinycnn-a trained with I-FGSM adversarial training"),
}


def register_architecture(arch: Architecture) -> Architecture:
    ARCHITECTURES[arch.arch_id] = arch
    return arch


def get_architecture(arch_id: str) -> Architecture:
    try:
        return ARCHITECTURES[arch_id]
    except KeyError:
        raise UnknownNameError("architecture", arch_id, ARCHITECTURES) from None


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Model:
    """Trained classifier; treated as read-only once training returns."""

    arch: Architecture
    params: Dict[str, np.ndarray]
    train_accuracy: Optional[float] = None
    test_accuracy: Optional[float] = None
    seed: Optional[int] = None
    name: str = ""
    _constants: Dict[str, Tensor] = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        if not self.name:
            self.name = self.arch.arch_id
        expected = dict(self.arch.param_shapes)
        for key, shape in expected.items():
            if key not in self.params:
                raise ShapeError(f"{self.arch.arch_id}: missing parameter '{key}'", shape)
            if tuple(self.params[key].shape) != tuple(shape):
                raise ShapeError(f"{self.arch.arch_id}: parameter '{key}'", self.params[key].shape, shape)
        self._constants = {key: Tensor(value) for key, value in self.params.items()}

    @property
    def arch_id(self) -> str:
        return self.arch.arch_id

    def forward(self, x: Union[Tensor, np.ndarray], start: Optional[str] = None,
                stop: Optional[str] = None) -> Tensor:
        return self.arch.run(self._constants, tc.as_tensor(x), start=start, stop=stop)

    def metadata(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "train_accuracy": self.train_accuracy,
            "test_accuracy": self.test_accuracy,
        }


def batched(model: Model, x) -> Tuple[Tensor, bool]:
    x = tc.as_tensor(x)
    shape = tuple(model.arch.input_shape)
    if x.shape == shape:
        return tc.reshape(x, (1,) + shape), True
    if x.ndim == len(shape) + 1 and x.shape[1:] == shape:
        return x, False
    raise ShapeError("model input", x.shape, shape)


def logits(model: Model, x) -> Tensor:
    batch, single = batched(model, x)
    out = model.forward(batch)
    return tc.reshape(out, out.shape[1:]) if single else out


def loss(model: Model, x, y) -> Tensor:
    """Mean cross-entropy L(theta, x, y)."""
    batch, _ = batched(model, x)
    return tc.cross_entropy(model.forward(batch), np.atleast_1d(y))


def tap(model: Model, x, layer: str) -> Tensor:
    model.arch.check_tap(layer)
    batch, single = batched(model, x)
    out = model.forward(batch, stop=layer)
    return tc.reshape(out, out.shape[1:]) if single else out


def predict(model: Model, x) -> Union[int, np.ndarray]:
    """argmax of the logits; np.argmax resolves ties toward the lower index."""
    batch, single = batched(model, x)
    data = batch.data
    preds = []
    with tc.no_grad():
        for start in range(0, data.shape[0], PREDICT_BATCH):
            preds.append(np.argmax(model.forward(data[start:start + PREDICT_BATCH]).data, axis=-1))
    result = np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)
    return int(result[0]) if single else result


def accuracy(model: Model, images: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return 0.0
    return float(np.mean(predict(model, images) == labels))


def input_gradient(model: Model, xs: np.ndarray, labels: Sequence[int],
                   objective: Optional[Callable[[Tensor], Tensor]] = None) -> np.ndarray:
    """
    Per-row gradient of a batch objective with respect to the input batch.

    The default objective is cross-entropy summed over rows, so each row's
    gradient is that sample's own loss gradient.
    """
    labels = np.atleast_1d(labels)
    if objective is None:
        def objective(batch):
            return tc.cross_entropy(model.forward(batch), labels, reduction="sum")
    _, grad = tc.grad_of(objective, xs)
    return grad


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

class SGDMomentum:
    """v = mu * v + g; theta -= lr * v"""

    def __init__(self, params: Dict[str, np.ndarray], lr: float, momentum: float = 0.9,
                 velocity: Optional[Dict[str, np.ndarray]] = None):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = velocity or {key: np.zeros_like(value) for key, value in params.items()}

    def step(self, grads: Dict[str, Optional[np.ndarray]]) -> None:
        for key, grad in grads.items():
            if grad is None:
                continue
            self.velocity[key] = self.momentum * self.velocity[key] + grad
            self.params[key] -= self.lr * self.velocity[key]


def _fit(arch: Architecture, data, epochs: int, lr: float, seed: int, batch_size: int,
         momentum: float, batch_hook: Optional[BatchHook] = None) -> Model:
    images, labels = data.train_images, data.train_labels
    if len(labels) == 0:
        raise ValueError("cannot train on an empty dataset")
    if epochs < 0:
        raise ValueError(f"epochs must be >= 0, got {epochs}")

    rng = np.random.default_rng(seed)
    params = arch.init_params(rng)
    optimizer = SGDMomentum(params, lr, momentum)

    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(labels))
        total, seen = 0.0, 0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            xb, yb = images[idx], labels[idx]
            if batch_hook is not None:
                xb, yb = batch_hook(params, xb, yb)
            leaves = {key: Tensor(value, requires_grad=True) for key, value in params.items()}
            try:
                with tc.Tape():
                    batch_loss = tc.cross_entropy(arch.run(leaves, Tensor(xb)), yb)
                    tc.backward(batch_loss)
            except NonFiniteError as e:
                raise TrainingDivergedError(epoch, "loss", str(e)) from e
            optimizer.step({key: leaf.grad for key, leaf in leaves.items()})
            total += batch_loss.item() * len(yb)
            seen += len(yb)
        mean_loss = total / seen
        if not np.isfinite(mean_loss) or not all(np.isfinite(v).all() for v in params.values()):
            raise TrainingDivergedError(epoch, "loss")
        logger.info(f"📈 {arch.arch_id} epoch {epoch}/{epochs} loss={mean_loss:.4f}")

    model = Model(arch, params, seed=seed)
    model.train_accuracy = accuracy(model, images, labels)
    model.test_accuracy = accuracy(model, data.test_images, data.test_labels)
    logger.info(f"✅ {arch.arch_id} trained: train acc {model.train_accuracy:.3f}, "
                f"test acc {model.test_accuracy:.3f}")
    return model


def train(arch: Union[str, Architecture], data, epochs: int = 10, lr: float = 0.05, seed: int = 0,
          batch_size: int = 32, momentum: float = 0.9) -> Model:
    """SGD with momentum on cross-entropy; returns a Model with recorded accuracies."""
    arch = get_architecture(arch) if isinstance(arch, str) else arch
    return _fit(arch, data, epochs, lr, seed, batch_size, momentum)


def train_adversarial(arch: Union[str, Architecture], data, epochs: int = 10, lr: float = 0.05,
                      seed: int = 0, budget=None, batch_size: int = 32, momentum: float = 0.9) -> Model:
    """
    Like train, but each batch is the clean batch followed by its I-FGSM
    counterpart crafted on the current weights.
    """
    from taabench.attacks.gradient import ifgsm_batch
    from taabench.models import AttackBudget

    arch = get_architecture(arch) if isinstance(arch, str) else arch
    budget = budget or AttackBudget(epsilon=8 / 255, iterations=5)

    def mix(params, xb, yb):
        if budget.epsilon == 0:
            adv = xb.copy()
        else:
            adv, _ = ifgsm_batch(Model(arch, params), xb, yb, budget)
        return np.concatenate([xb, adv]), np.concatenate([yb, yb])

    return _fit(arch, data, epochs, lr, seed, batch_size, momentum, batch_hook=mix)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save(model: Model, path):
    return write_weights(path, model.arch_id, model.params, meta=model.metadata())


def load(path, expected_arch: Optional[str] = None) -> Model:
    arch_id, arrays, meta = read_weights(path, expected_arch=expected_arch)
    if arch_id not in ARCHITECTURES:
        raise WeightFileError(f"{path}: unknown architecture '{arch_id}'")
    arch = ARCHITECTURES[arch_id]
    expected = dict(arch.param_shapes)
    if set(arrays) != set(expected) or any(arrays[k].shape != tuple(expected[k]) for k in expected):
        raise WeightFileError(f"{path}: parameter names or shapes do not match '{arch_id}'")
    return Model(
        arch,
        {key: arrays[key] for key, _ in arch.param_shapes},
        train_accuracy=meta.get("train_accuracy"),
        test_accuracy=meta.get("test_accuracy"),
        seed=meta.get("seed"),
        name=meta.get("name") or arch_id,
    )
