import numpy as np
import pytest

from taabench import tensor_core as tc
from taabench.attacks.attribution import (ascent_path, attack_danaa, attack_mig, attack_naa, attribution_transform,
                                          integrated_gradients, neuron_attribution, path_points)
from taabench.attacks.gradient import attack_mifgsm
from taabench.errors import UnknownTapError
from taabench.model_zoo import Model, loss
from taabench.models import AttackBudget, PathSpec
from taabench.utils.seeding import pick_samples
from tests.conftest import TWO_NEURON

BUDGET = AttackBudget(epsilon=8 / 255, iterations=4)


def _logit(model, c):
    def objective(batch):
        return tc.sum(tc.select(model.forward(batch), [c] * batch.shape[0]))
    return objective


def test_integrated_gradients_on_linear_logit_is_exact(linear_model, image):
    ig = integrated_gradients(linear_model, image, 2, PathSpec(steps=7), objective=_logit(linear_model, 2))
    weights = linear_model.params["fc.w"][:, 2].reshape(image.shape)
    assert np.allclose(ig, image * weights, atol=1e-12)


@pytest.mark.parametrize("index", range(5))
def test_integrated_gradients_completeness(quick_cnn_a, small_data, index):
    x, y = small_data.test_images[index], int(small_data.test_labels[index])
    ig = integrated_gradients(quick_cnn_a, x, y, PathSpec(steps=200))
    gap = loss(quick_cnn_a, x, y).item() - loss(quick_cnn_a, np.zeros_like(x), y).item()
    assert ig.sum() == pytest.approx(gap, rel=0.01)


def _ig_error(model, x, y, steps, reference):
    return np.linalg.norm(integrated_gradients(model, x, y, PathSpec(steps=steps)) - reference)


def test_integrated_gradients_refine_toward_fine_reference(quick_cnn_a, small_data):
    x, y = small_data.test_images[3], int(small_data.test_labels[3])
    reference = integrated_gradients(quick_cnn_a, x, y, PathSpec(steps=1000))
    assert _ig_error(quick_cnn_a, x, y, 20, reference) < 0.05 * np.linalg.norm(reference)
    errors = [_ig_error(quick_cnn_a, x, y, n, reference) for n in (10, 50, 200)]
    assert all(b <= a + 1e-6 for a, b in zip(errors, errors[1:]))


def test_straight_path_points_are_midpoints(image):
    points = path_points(None, image, 0, PathSpec(steps=4))
    assert np.allclose(points[:, 0, 0, 0], image[0, 0, 0] * np.array([0.125, 0.375, 0.625, 0.875]))
    distances = [np.abs(p).sum() for p in points]
    assert distances == sorted(distances)


def test_mig_with_baseline_at_input_is_stationary(cnn_a, image):
    example = attack_mig(cnn_a, image, 1, BUDGET, path=PathSpec(baseline=image))
    assert example.stationary
    assert np.array_equal(example.x_adv, image)


def test_mig_on_linear_logit_matches_mifgsm(linear_model, image):
    objective = _logit(linear_model, 6)
    mig = attack_mig(linear_model, image, 6, BUDGET, objective=objective)
    mi = attack_mifgsm(linear_model, image, 6, BUDGET, objective=objective)
    assert np.array_equal(mig.x_adv, mi.x_adv)


def test_neuron_attribution_vanishes_at_the_baseline(cnn_a, image):
    attribution = neuron_attribution(cnn_a, image, 3, path=PathSpec(baseline=image))
    assert not np.any(attribution.attribution)
    assert attribution.weighted == 0.0


def test_neuron_attribution_on_two_neurons(two_neuron_model, image):
    y = 3
    steps = 30
    attribution = neuron_attribution(two_neuron_model, image, y, path=PathSpec(steps=steps))
    assert attribution.layer == "hidden"

    w = two_neuron_model.params["h.w"][0]
    out = two_neuron_model.params["out.w"][:, y]
    total = image.sum()
    alphas = (np.arange(steps) + 0.5) / steps
    attention = np.array([np.mean(2 * out[j] * np.tanh(alphas * total * w[j])) for j in range(2)])
    delta = np.tanh(total * w)
    assert np.allclose(attribution.integrated_attention, attention, atol=1e-12)
    assert np.allclose(attribution.attribution, delta * attention, atol=1e-12)

    fine = (np.arange(20000) + 0.5) / 20000
    integral = np.array([np.mean(2 * out[j] * np.tanh(fine * total * w[j])) for j in range(2)])
    assert np.allclose(attention, integral, rtol=0.1)


def _nested_path_attribution(model, x, y, layer, steps=400):
    """sum_i x_i * integral over alpha of dF/dy_j * dy_j/dx_i along alpha * x, one neuron at a time."""
    alphas = (np.arange(steps) + 0.5) / steps
    points = alphas.reshape(-1, 1, 1, 1) * x[None]
    with tc.no_grad():
        acts = model.forward(points, stop=layer).data
    _, d_logit = tc.grad_of(lambda a: tc.sum(tc.select(model.forward(a, start=layer), [y] * steps)), acts)
    result = []
    for j in range(acts.shape[1]):
        _, d_neuron = tc.grad_of(lambda b: tc.sum(tc.select(model.forward(b, stop=layer), [j] * steps)), points)
        per_point = (d_neuron * x[None]).reshape(steps, -1).sum(axis=1)
        result.append(np.mean(d_logit[:, j] * per_point))
    return np.array(result)


def test_neuron_attribution_matches_nested_path_integral(two_neuron_model, image):
    attribution = neuron_attribution(two_neuron_model, image, 3, path=PathSpec(steps=30))
    oracle = _nested_path_attribution(two_neuron_model, image, 3, "hidden")
    assert np.all(oracle != 0)
    assert np.allclose(attribution.attribution, oracle, rtol=0.1)


def test_zero_gamma_with_negative_attribution_is_stationary(two_neuron_model, image):
    params = dict(two_neuron_model.params)
    out_w = params["out.w"].copy()
    out_w[:, 3] = -1.0
    params["out.w"] = out_w
    model = Model(TWO_NEURON, params, name="negative")
    assert np.all(neuron_attribution(model, image, 3).attribution < 0)
    example = attack_naa(model, image, 3, BUDGET, gamma=0.0)
    assert example.stationary
    assert np.array_equal(example.x_adv, image)


def test_naa_records_a_trace_and_keeps_the_budget(cnn_a, image):
    example = attack_naa(cnn_a, image, 2, BUDGET, layer="conv2", path=PathSpec(steps=5))
    assert len(example.trace) == BUDGET.iterations + 1
    assert BUDGET.holds(example.x_adv, image)


def test_naa_rejects_bad_layer_and_gamma(cnn_a, image):
    with pytest.raises(UnknownTapError):
        attack_naa(cnn_a, image, 2, BUDGET, layer="nope")
    with pytest.raises(ValueError):
        attack_naa(cnn_a, image, 2, BUDGET, gamma=-1.0)


def test_ascent_with_zero_rate_stays_at_the_baseline(cnn_a, image):
    path = PathSpec(kind="ascent", ascent_lr=0.0, ascent_steps=5)
    points = path_points(cnn_a, image, 1, path)
    assert points.shape == (5,) + image.shape
    assert not np.any(points)
    example = attack_danaa(cnn_a, image, 1, BUDGET, ascent_lr=0.0, ascent_steps=3)
    assert BUDGET.holds(example.x_adv, image)


def test_ascent_path_climbs_a_convex_loss(linear_model):
    start = np.full((16, 16, 1), 0.5)
    points = ascent_path(linear_model, 7, start, lr=0.01, steps=8)
    losses = [loss(linear_model, p, 7).item() for p in np.concatenate([start[None], points])]
    assert all(b >= a - 1e-12 for a, b in zip(losses, losses[1:]))
    assert points.min() >= 0.0 and points.max() <= 1.0


def test_danaa_is_deterministic(cnn_a, image):
    first = attack_danaa(cnn_a, image, 5, BUDGET, ascent_steps=3)
    second = attack_danaa(cnn_a, image, 5, BUDGET, ascent_steps=3)
    assert np.array_equal(first.x_adv, second.x_adv)
    assert first.trace == second.trace


def test_attribution_transform_changes_the_attack(cnn_a, image):
    square = attribution_transform("square")
    plain = attack_naa(cnn_a, image, 2, BUDGET, layer="conv2", path=PathSpec(steps=5))
    squared = attack_naa(cnn_a, image, 2, BUDGET, layer="conv2", path=PathSpec(steps=5), positive=square,
                         negative=square)
    assert plain.trace != squared.trace
    assert not np.array_equal(plain.x_adv, squared.x_adv)
    danaa = attack_danaa(cnn_a, image, 2, BUDGET, layer="conv2", ascent_steps=3, positive=square)
    assert danaa.trace != attack_danaa(cnn_a, image, 2, BUDGET, layer="conv2", ascent_steps=3).trace


def test_weighted_attribution_agrees_with_attack_objective(cnn_a, image):
    tanh = attribution_transform("tanh")
    attribution = neuron_attribution(cnn_a, image, 4, layer="conv2", path=PathSpec(steps=5), gamma=0.5,
                                     positive=tanh, negative=attribution_transform("square"))
    example = attack_naa(cnn_a, image, 4, BUDGET, layer="conv2", gamma=0.5, path=PathSpec(steps=5), positive=tanh,
                         negative=attribution_transform("square"))
    assert example.trace[0] == pytest.approx(attribution.weighted, rel=1e-12, abs=1e-12)


def test_unknown_attribution_transform():
    with pytest.raises(ValueError, match="identity"):
        attribution_transform("cube")


@pytest.mark.slow
def test_naa_objective_descends_on_most_samples(trained_cnn_a, anchor_data):
    budget = AttackBudget(epsilon=8 / 255, iterations=5)
    descending = 0
    for idx in pick_samples(len(anchor_data.test_labels), 100, 0):
        example = attack_naa(trained_cnn_a, anchor_data.test_images[idx], int(anchor_data.test_labels[idx]), budget)
        trace = example.trace
        descending += all(b <= a + 1e-9 * max(1.0, abs(a)) for a, b in zip(trace, trace[1:]))
    assert descending >= 80
