import numpy as np
import pytest

from taabench import tensor_core as tc
from taabench.attacks.ensemble import (attack_ensemble, attack_svre, ensemble_loss, fused_gradient,
                                       model_gradients, variance_reduced_gradient)
from taabench.attacks.gradient import attack_mifgsm
from taabench.config import NUM_CLASSES
from taabench.model_zoo import Model, predict
from taabench.models import AttackBudget, EnsembleSpec
from tests.conftest import LINEAR, PIXELS

BUDGET = AttackBudget(epsilon=8 / 255, iterations=4)


def _confident(label):
    bias = np.zeros(NUM_CLASSES)
    bias[label] = 1000.0
    return Model(LINEAR, {"fc.w": np.zeros((PIXELS, NUM_CLASSES)), "fc.b": bias}, name=f"sure-{label}")


def test_single_model_loss_is_cross_entropy(cnn_a, image):
    fused = ensemble_loss(EnsembleSpec([cnn_a]), image, 4).item()
    plain = tc.cross_entropy(cnn_a.forward(image[None]), [4], reduction="sum").item()
    assert fused == pytest.approx(plain, abs=1e-12)


def test_loss_vanishes_when_every_model_is_certain(image):
    spec = EnsembleSpec([_confident(2), _confident(2)], weights=[0.4, 0.6])
    assert ensemble_loss(spec, image, 2).item() == pytest.approx(0.0, abs=1e-12)


def test_mixture_loss_matches_probability_formula(cnn_a, cnn_b, image):
    spec = EnsembleSpec([cnn_a, cnn_b], weights=[0.3, 0.7])
    pa = tc.softmax(cnn_a.forward(image[None])).data[0, 1]
    pb = tc.softmax(cnn_b.forward(image[None])).data[0, 1]
    assert ensemble_loss(spec, image, 1).item() == pytest.approx(-np.log(0.3 * pa + 0.7 * pb), rel=1e-10)


def test_ensemble_gradient_matches_finite_differences(cnn_a, cnn_b, image):
    origin = np.clip(image - 0.02, 0.0, 1.0)
    spec = EnsembleSpec([cnn_a, cnn_b], weights=[0.3, 0.7], lam=0.5)
    error = tc.check_gradients(lambda t: ensemble_loss(spec, t, [6], origin[None]), image[None],
                               indices=range(0, 256, 11))
    assert error < 1e-4


def test_weights_must_sum_to_one(cnn_a, cnn_b):
    with pytest.raises(ValueError, match="sum to 1"):
        EnsembleSpec([cnn_a, cnn_b], weights=[0.5, 0.6])
    with pytest.raises(ValueError):
        EnsembleSpec([cnn_a, cnn_b], weights=[1.0])
    with pytest.raises(ValueError):
        EnsembleSpec([])


def test_single_model_ensemble_is_mifgsm(cnn_a, image):
    expected = attack_mifgsm(cnn_a, image, 3, BUDGET).x_adv
    assert np.array_equal(attack_ensemble(EnsembleSpec([cnn_a]), image, 3, BUDGET).x_adv, expected)


def test_zero_weight_members_are_skipped(cnn_a, cnn_b, image):
    single = ensemble_loss(EnsembleSpec([cnn_a]), image, 3).item()
    padded = ensemble_loss(EnsembleSpec([cnn_a, cnn_b], weights=[1.0, 0.0]), image, 3).item()
    assert padded == single


def test_variance_reduction_cancels_at_the_anchor(cnn_a, cnn_b, image):
    spec = EnsembleSpec([cnn_a, cnn_b], weights=[0.25, 0.75])
    full = fused_gradient(spec, model_gradients(spec, image, 2))
    for j in range(spec.k):
        assert np.abs(variance_reduced_gradient(spec, j, image, image, 2) - full).max() <= 1e-10


def test_variance_reduced_gradient_is_unbiased(cnn_a, cnn_b, image):
    spec = EnsembleSpec([cnn_a, cnn_b], weights=[0.25, 0.75])
    x_hat = np.clip(image + np.random.default_rng(1).uniform(-0.03, 0.03, size=image.shape), 0.0, 1.0)
    expected = fused_gradient(spec, model_gradients(spec, x_hat, 2))
    mean = sum(w * variance_reduced_gradient(spec, j, x_hat, image, 2) for j, w in enumerate(spec.weights))
    assert np.abs(mean - expected).max() <= 1e-10


def test_svre_without_inner_loop_is_the_loss_ensemble(cnn_a, cnn_b, image):
    expected = attack_ensemble(EnsembleSpec([cnn_a, cnn_b], fusion="losses"), image, 5, BUDGET).x_adv
    actual = attack_svre(EnsembleSpec([cnn_a, cnn_b]), image, 5, BUDGET, inner_iters=0).x_adv
    assert np.array_equal(actual, expected)


@pytest.mark.parametrize("outer_direction", ["accumulated", "final_point"])
def test_svre_is_seeded_and_within_budget(cnn_a, cnn_b, image, outer_direction):
    spec = EnsembleSpec([cnn_a, cnn_b])
    first = attack_svre(spec, image, 5, BUDGET, inner_iters=3, rng=np.random.default_rng(4),
                        outer_direction=outer_direction)
    second = attack_svre(spec, image, 5, BUDGET, inner_iters=3, rng=np.random.default_rng(4),
                         outer_direction=outer_direction)
    assert np.array_equal(first.x_adv, second.x_adv)
    assert BUDGET.holds(first.x_adv, image)


def test_svre_rejects_bad_settings(cnn_a, cnn_b, image):
    spec = EnsembleSpec([cnn_a, cnn_b])
    with pytest.raises(ValueError):
        attack_svre(spec, image, 0, BUDGET, inner_iters=-1)
    with pytest.raises(ValueError):
        attack_svre(spec, image, 0, BUDGET, outer_direction="sideways")


def test_every_member_prediction_is_recorded(cnn_a, cnn_b, image):
    example = attack_ensemble(EnsembleSpec([cnn_a, cnn_b]), image, 5, BUDGET)
    assert example.member_preds == {
        "cnn-a": [predict(cnn_a, image), predict(cnn_a, example.x_adv)],
        "cnn-b": [predict(cnn_b, image), predict(cnn_b, example.x_adv)],
    }
    assert example.surrogate_pred_after == predict(cnn_a, example.x_adv)
    twins = attack_svre(EnsembleSpec([cnn_a, cnn_a]), image, 5, BUDGET, inner_iters=1,
                        rng=np.random.default_rng(0))
    assert sorted(twins.member_preds) == ["cnn-a#0", "cnn-a#1"]
