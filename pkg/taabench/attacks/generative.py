"""
Generative attacks: an AdvGAN generator/discriminator pair and the
gradient-edited (GE) variant of its generator update.

The generator maps an image to a perturbation c * tanh(raw(x)); the
adversarial image is clip(x + G(x), 0, 1). Both nets train with the same
SGD-with-momentum optimizer as the model zoo.
"""

import logging
import threading
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from taabench import tensor_core as tc
from taabench.attacks.common import IMAGE_SHAPE, finish, prepare_input
from taabench.config import IMAGE_CHANNELS
from taabench.errors import NonFiniteError, TrainingDivergedError, WeightFileError
from taabench.model_zoo import (Architecture, Model, SGDMomentum, conv_stage, dense_stage,
                                input_gradient, mean_pool_stage)
from taabench.models import AdversarialExample, AttackBudget, GeDirection, SpectrumTransformParams
from taabench.tensor_core import Tensor
from taabench.transforms import spectrum_transform
from taabench.weights import read_weights, write_weights

logger = logging.getLogger(__name__)

PAIR_ARCH_ID = "gan-pair"

GENERATOR = Architecture(
    arch_id="gan-generator",
    param_shapes=(
        ("conv1.w", (3, 3, IMAGE_CHANNELS, 8)), ("conv1.b", (8,)),
        ("conv2.w", (3, 3, 8, 8)), ("conv2.b", (8,)),
        ("conv3.w", (3, 3, 8, IMAGE_CHANNELS)), ("conv3.b", (IMAGE_CHANNELS,)),
    ),
    stages=(
        ("conv1", conv_stage("conv1")),
        ("conv2", conv_stage("conv2")),
        ("raw", conv_stage("conv3", activation=False)),
    ),
    default_tap="conv2",
    description="3-layer conv net, image -> raw perturbation",
)

DISCRIMINATOR = Architecture(
    arch_id="gan-discriminator",
    param_shapes=(
        ("conv1.w", (3, 3, IMAGE_CHANNELS, 8)), ("conv1.b", (8,)),
        ("conv2.w", (3, 3, 8, 16)), ("conv2.b", (16,)),
        ("score.w", (16, 1)), ("score.b", (1,)),
    ),
    stages=(
        ("conv1", conv_stage("conv1")),
        ("conv2", conv_stage("conv2")),
        ("pool", mean_pool_stage),
        ("score", dense_stage("score")),
    ),
    default_tap="conv2",
    description="conv8 -> conv16 -> meanpool -> dense1 (logit of 'real')",
)


def _leaves(params: Dict[str, np.ndarray]) -> Dict[str, Tensor]:
    return {key: Tensor(value, requires_grad=True) for key, value in params.items()}


def bounded_perturbation(params: Dict[str, Tensor], x, bound: float) -> Tensor:
    """c * tanh(raw(x)); every entry lies in [-c, c]."""
    return tc.scale(tc.tanh(GENERATOR.run(params, tc.as_tensor(x))), bound)


@dataclass(eq=False)
class GanPair:
    generator: Model
    discriminator: Model
    bound: float                       # c
    lambda_adv: float = 10.0
    hinge_weight: float = 1.0
    hinge_l2: Optional[float] = None   # h; defaults to c * sqrt(pixels) / 2
    gradient_editing: bool = False
    epoch: int = 0
    history: List[dict] = field(default_factory=list)
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)
    generator_calls: int = field(default=0, init=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, init=False, repr=False)

    def __post_init__(self):
        if self.hinge_l2 is None:
            self.hinge_l2 = self.bound * float(np.sqrt(np.prod(IMAGE_SHAPE))) / 2.0

    @classmethod
    def initialize(cls, rng: np.random.Generator, bound: float, **settings) -> "GanPair":
        generator = Model(GENERATOR, GENERATOR.init_params(rng), name="generator")
        discriminator = Model(DISCRIMINATOR, DISCRIMINATOR.init_params(rng), name="discriminator")
        return cls(generator, discriminator, bound, **settings)

    def perturbation(self, xs: np.ndarray) -> np.ndarray:
        """G(x) for a batch, without recording; one generator forward pass."""
        with self._lock:
            self.generator_calls += 1
        with tc.no_grad():
            return bounded_perturbation(self.generator._constants, xs, self.bound).data

    def discriminate(self, xs: np.ndarray) -> np.ndarray:
        """D(x) in (0, 1), probability of 'real'."""
        with tc.no_grad():
            return tc.sigmoid(self.discriminator.forward(xs)).data[:, 0]

    def discriminator_accuracy(self, real: np.ndarray, fake: np.ndarray) -> float:
        hits = np.concatenate([self.discriminate(real) > 0.5, self.discriminate(fake) <= 0.5])
        return float(hits.mean())


# ---------------------------------------------------------------------------
# Gradient editing
# ---------------------------------------------------------------------------

def _exploration_draws(xs: np.ndarray, params: SpectrumTransformParams, samples: int,
                       rng: np.random.Generator) -> np.ndarray:
    repeated = np.repeat(xs, samples, axis=0)
    if params.is_identity:
        return repeated
    with tc.no_grad():
        return spectrum_transform(repeated, params, rng).data


def ge_edit_direction(model: Model, x: np.ndarray, y: int, params: SpectrumTransformParams,
                      samples: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> GeDirection:
    """-sign of the mean loss gradient over N frequency-exploration samples of x."""
    samples = params.samples if samples is None else samples
    if samples < 1:
        raise ValueError(f"need at least one exploration sample, got {samples}")
    rng = rng if rng is not None else np.random.default_rng(0)
    draws = _exploration_draws(np.asarray(x, dtype=np.float64)[None], params, samples, rng)
    grads = input_gradient(model, draws, np.full(samples, y))
    return GeDirection.from_gradients(grads, draws)


def _edit_directions(model: Model, xs: np.ndarray, ys: np.ndarray, params: SpectrumTransformParams,
                     samples: int, rng: np.random.Generator) -> np.ndarray:
    draws = _exploration_draws(xs, params, samples, rng)
    grads = input_gradient(model, draws, np.repeat(ys, samples))
    return -np.sign(grads.reshape((len(xs), samples) + xs.shape[1:]).mean(axis=1))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _discriminator_step(pair: GanPair, optimizer: SGDMomentum, real: np.ndarray,
                        fake: np.ndarray) -> Tuple[float, float]:
    leaves = _leaves(pair.discriminator.params)
    ones, zeros = np.ones((len(real), 1)), np.zeros((len(fake), 1))
    with tc.Tape():
        real_logit = DISCRIMINATOR.run(leaves, Tensor(real))
        fake_logit = DISCRIMINATOR.run(leaves, Tensor(fake))
        d_loss = tc.add(tc.binary_cross_entropy_with_logits(real_logit, ones),
                        tc.binary_cross_entropy_with_logits(fake_logit, zeros))
        tc.backward(d_loss)
    optimizer.step({key: leaf.grad for key, leaf in leaves.items()})
    accuracy = np.concatenate([real_logit.data[:, 0] > 0, fake_logit.data[:, 0] <= 0]).mean()
    return d_loss.item(), float(accuracy)


def _train_pair(target: Model, data, epochs: int, seed: int, bound: float, lambda_adv: float,
                hinge_weight: float, hinge_l2: Optional[float], lr: float, batch_size: int,
                edit: Optional[Tuple[SpectrumTransformParams, int]] = None) -> GanPair:
    images, labels = data.train_images, data.train_labels
    if len(labels) == 0:
        raise ValueError("cannot train on an empty dataset")
    init_rng, shuffle_rng, edit_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
    pair = GanPair.initialize(init_rng, bound, lambda_adv=lambda_adv, hinge_weight=hinge_weight,
                              hinge_l2=hinge_l2, gradient_editing=edit is not None)
    g_opt = SGDMomentum(pair.generator.params, lr)
    d_opt = SGDMomentum(pair.discriminator.params, lr)
    kind = "GE-AdvGAN" if edit is not None else "AdvGAN"

    for epoch in range(1, epochs + 1):
        order = shuffle_rng.permutation(len(labels))
        sums = {"d_loss": 0.0, "g_gan": 0.0, "g_adv": 0.0, "g_hinge": 0.0, "d_accuracy": 0.0}
        batches = 0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            xb, yb = images[idx], labels[idx]
            g_leaves = _leaves(pair.generator.params)
            term = "generator"
            try:
                with tc.Tape():
                    delta = bounded_perturbation(g_leaves, xb, bound)
                    x_adv = tc.clamp(tc.add(Tensor(xb), delta), 0.0, 1.0)

                    term = "discriminator"
                    d_loss, d_acc = _discriminator_step(pair, d_opt, xb, x_adv.data)

                    term = "L_GAN"
                    g_gan = tc.binary_cross_entropy_with_logits(pair.discriminator.forward(x_adv),
                                                                np.ones((len(xb), 1)))
                    term = "L_hinge"
                    norms = tc.l2_norm(delta, axis=(1, 2, 3))
                    g_hinge = tc.mean(tc.relu(tc.subtract(norms, pair.hinge_l2)))
                    total = tc.add(g_gan, tc.scale(g_hinge, hinge_weight))

                    term = "L_adv"
                    if edit is None:
                        g_adv = tc.scale(tc.cross_entropy(target.forward(x_adv), yb), -1.0)
                        g_adv_value = g_adv.item()
                        if lambda_adv != 0:
                            total = tc.add(total, tc.scale(g_adv, lambda_adv))
                    else:
                        total, g_adv_value = _edited_adversarial_term(target, total, delta, x_adv.data, xb, yb,
                                                                      lambda_adv, edit, edit_rng)
                    tc.backward(total)
            except NonFiniteError as e:
                raise TrainingDivergedError(epoch, term, str(e)) from e
            g_opt.step({key: leaf.grad for key, leaf in g_leaves.items()})

            sums["d_loss"] += d_loss
            sums["g_gan"] += g_gan.item()
            sums["g_adv"] += g_adv_value
            sums["g_hinge"] += g_hinge.item()
            sums["d_accuracy"] += d_acc
            batches += 1

        entry = {"epoch": epoch, **{key: value / batches for key, value in sums.items()}}
        for key, value in entry.items():
            if not np.isfinite(value):
                raise TrainingDivergedError(epoch, key)
        pair.history.append(entry)
        pair.epoch = epoch
        logger.info(f"📈 {kind} epoch {epoch}/{epochs} d_loss={entry['d_loss']:.4f} "
                    f"L_GAN={entry['g_gan']:.4f} L_adv={entry['g_adv']:.4f} "
                    f"L_hinge={entry['g_hinge']:.4f} d_acc={entry['d_accuracy']:.3f}")

    pair.velocity = {**{f"G.{k}": v for k, v in g_opt.velocity.items()},
                     **{f"D.{k}": v for k, v in d_opt.velocity.items()}}
    return pair


def _edited_adversarial_term(target: Model, total: Tensor, delta: Tensor, x_adv: np.ndarray, xb: np.ndarray,
                             yb: np.ndarray, lambda_adv: float, edit: Tuple[SpectrumTransformParams, int],
                             rng: np.random.Generator) -> Tuple[Tensor, float]:
    """
    Adds sum(delta * U) where U = mean|dL_adv/dx_adv| * d per sample: the
    factor d(x + G(x))/dG(x) is replaced by the GE direction d.
    """
    params, samples = edit

    def attack_loss(batch):
        return tc.scale(tc.cross_entropy(target.forward(batch), yb), -lambda_adv)

    value, upstream = tc.grad_of(attack_loss, x_adv)
    magnitude = np.abs(upstream).mean(axis=tuple(range(1, upstream.ndim)), keepdims=True)
    direction = _edit_directions(target, xb, yb, params, samples, rng)
    edited = tc.sum(tc.multiply(delta, Tensor(magnitude * direction)))
    adv_value = value / lambda_adv if lambda_adv != 0 else -tc.cross_entropy(target.forward(x_adv), yb).item()
    return tc.add(total, edited), adv_value


def train_advgan(target: Model, data, epochs: int = 20, seed: int = 0, bound: float = 16 / 255,
                 lambda_adv: float = 10.0, hinge_weight: float = 1.0, hinge_l2: Optional[float] = None,
                 lr: float = 0.01, batch_size: int = 32) -> GanPair:
    """Alternating D/G updates; G minimises L_GAN - lambda * CE(f(x + G(x)), y) + L_hinge."""
    return _train_pair(target, data, epochs, seed, bound, lambda_adv, hinge_weight, hinge_l2, lr, batch_size)


def train_ge_advgan(target: Model, data, epochs: int = 20, seed: int = 0,
                    spectrum_params: Optional[SpectrumTransformParams] = None, samples: Optional[int] = None,
                    bound: float = 16 / 255, lambda_adv: float = 10.0, hinge_weight: float = 1.0,
                    hinge_l2: Optional[float] = None, lr: float = 0.01, batch_size: int = 32) -> GanPair:
    spectrum_params = spectrum_params or SpectrumTransformParams(sigma=bound, samples=10)
    samples = spectrum_params.samples if samples is None else samples
    if samples < 1:
        raise ValueError(f"need at least one exploration sample, got {samples}")
    return _train_pair(target, data, epochs, seed, bound, lambda_adv, hinge_weight, hinge_l2, lr, batch_size,
                       edit=(spectrum_params, samples))


def generate_adversarial(pair: GanPair, x: np.ndarray, budget: AttackBudget, model: Optional[Model] = None,
                         y: int = -1) -> AdversarialExample:
    """x' = project(x + G(x)); one generator pass, nothing recorded."""
    x = prepare_input(x, budget)
    x_adv = budget.project(x + pair.perturbation(x[None])[0], x)
    moved = bool(np.any(x_adv != x))
    if model is None:
        return AdversarialExample(x, x_adv, int(y), -1, -1, attack="advgan", stationary=not moved)
    name = "ge-advgan" if pair.gradient_editing else "advgan"
    return finish(name, model, x, x_adv, y, moved)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_pair(pair: GanPair, path):
    arrays = {f"G.{k}": v for k, v in pair.generator.params.items()}
    arrays.update({f"D.{k}": v for k, v in pair.discriminator.params.items()})
    arrays.update({f"opt.{k}": v for k, v in pair.velocity.items()})
    meta = {
        "bound": pair.bound,
        "lambda_adv": pair.lambda_adv,
        "hinge_weight": pair.hinge_weight,
        "hinge_l2": pair.hinge_l2,
        "gradient_editing": pair.gradient_editing,
        "epoch": pair.epoch,
        "history": pair.history,
    }
    return write_weights(path, PAIR_ARCH_ID, arrays, meta)


def load_pair(path) -> GanPair:
    _, arrays, meta = read_weights(path, expected_arch=PAIR_ARCH_ID)

    def part(prefix: str, arch: Architecture) -> Dict[str, np.ndarray]:
        params = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
        if set(params) != {name for name, _ in arch.param_shapes}:
            raise WeightFileError(f"{path}: {arch.arch_id} parameters do not match")
        return params

    try:
        return GanPair(
            generator=Model(GENERATOR, part("G.", GENERATOR), name="generator"),
            discriminator=Model(DISCRIMINATOR, part("D.", DISCRIMINATOR), name="discriminator"),
            bound=meta["bound"],
            lambda_adv=meta["lambda_adv"],
            hinge_weight=meta["hinge_weight"],
            hinge_l2=meta["hinge_l2"],
            gradient_editing=meta["gradient_editing"],
            epoch=meta["epoch"],
            history=meta["history"],
            velocity={k[len("opt."):]: v for k, v in arrays.items() if k.startswith("opt.")},
        )
    except KeyError as e:
        raise WeightFileError(f"{path}: missing metadata field {e}") from e
