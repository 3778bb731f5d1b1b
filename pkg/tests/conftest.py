import numpy as np
import pytest

from taabench import dataset, model_zoo
from taabench import tensor_core as tc
from taabench.config import NUM_CLASSES
from taabench.model_zoo import Architecture, Model, dense_stage, flatten_stage

PIXELS = 16 * 16

# flatten -> logits; every gradient is constant in x
LINEAR = Architecture(
    arch_id="toy-linear",
    param_shapes=(("fc.w", (PIXELS, NUM_CLASSES)), ("fc.b", (NUM_CLASSES,))),
    stages=(("flatten", flatten_stage), ("logits", dense_stage("fc"))),
    default_tap="flatten",
)


def _tanh_stage(params, h):
    return tc.tanh(h)


def _square_stage(params, h):
    return tc.multiply(h, h)


# flatten -> 2 tanh neurons (tap "hidden") -> square -> logits
TWO_NEURON = Architecture(
    arch_id="toy-two-neuron",
    param_shapes=(("h.w", (PIXELS, 2)), ("h.b", (2,)), ("out.w", (2, NUM_CLASSES)), ("out.b", (NUM_CLASSES,))),
    stages=(
        ("flatten", flatten_stage),
        ("pre", dense_stage("h")),
        ("hidden", _tanh_stage),
        ("square", _square_stage),
        ("logits", dense_stage("out")),
    ),
    default_tap="hidden",
)


@pytest.fixture(scope="session")
def small_data():
    return dataset.generate(seed=7, n_train=300, n_test=60)


@pytest.fixture(scope="session")
def mlp(small_data):
    return model_zoo.train("mlp-256", small_data, epochs=3, lr=0.05, seed=1)


@pytest.fixture(scope="session")
def quick_cnn_a(small_data):
    return model_zoo.train("tinycnn-a", small_data, epochs=2, lr=0.05, seed=2)


@pytest.fixture(scope="session")
def cnn_a():
    arch = model_zoo.get_architecture("tinycnn-a")
    return Model(arch, arch.init_params(np.random.default_rng(11)), name="cnn-a")


@pytest.fixture(scope="session")
def cnn_b():
    arch = model_zoo.get_architecture("tinycnn-b")
    return Model(arch, arch.init_params(np.random.default_rng(12)), name="cnn-b")


@pytest.fixture
def linear_model():
    rng = np.random.default_rng(3)
    return Model(LINEAR, {"fc.w": rng.normal(0.0, 0.1, size=(PIXELS, NUM_CLASSES)),
                          "fc.b": np.zeros(NUM_CLASSES)}, name="linear")


@pytest.fixture
def two_neuron_model():
    rng = np.random.default_rng(5)
    w = np.zeros((PIXELS, 2))
    w[:, 0] = 0.4 / 128
    w[:, 1] = -0.3 / 128
    return Model(TWO_NEURON, {"h.w": w, "h.b": np.zeros(2), "out.w": rng.normal(size=(2, NUM_CLASSES)),
                              "out.b": np.zeros(NUM_CLASSES)}, name="two-neuron")


@pytest.fixture
def zero_model():
    arch = model_zoo.get_architecture("tinycnn-a")
    return Model(arch, {name: np.zeros(shape) for name, shape in arch.param_shapes}, name="zero")


@pytest.fixture
def image():
    return np.random.default_rng(21).uniform(0.05, 0.95, size=(16, 16, 1))


@pytest.fixture(scope="session")
def anchor_data():
    return dataset.generate(seed=0, n_train=2000, n_test=500)


@pytest.fixture(scope="session")
def trained_cnn_a(anchor_data):
    return model_zoo.train("tinycnn-a", anchor_data, epochs=10, lr=0.05, seed=0)
