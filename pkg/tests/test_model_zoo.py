import numpy as np
import pytest

from taabench import model_zoo
from taabench import tensor_core as tc
from taabench.errors import TrainingDivergedError, UnknownNameError, UnknownTapError, WeightFileError
from taabench.model_zoo import Model, accuracy, logits, loss, predict, tap
from taabench.models import AttackBudget
from taabench.weights import decode_weights, encode_weights


def test_tap_shapes_on_tinycnn_a(cnn_a, image):
    assert tap(cnn_a, image, "conv2").shape == (16, 16, 16)
    assert tap(cnn_a, image, "pool").shape == (16,)
    assert logits(cnn_a, image).shape == (10,)
    assert logits(cnn_a, np.stack([image, image])).shape == (2, 10)


def test_unknown_tap_lists_valid_names(cnn_a, image):
    with pytest.raises(UnknownTapError) as info:
        tap(cnn_a, image, "conv9")
    assert "conv1" in str(info.value) and "logits" in str(info.value)


def test_unknown_architecture():
    with pytest.raises(UnknownNameError) as info:
        model_zoo.get_architecture("resnet-50")
    assert "tinycnn-a" in str(info.value)


def test_forward_is_deterministic_and_split_at_taps(cnn_a, image):
    full = cnn_a.forward(image[None]).data
    assert np.array_equal(full, cnn_a.forward(image[None]).data)
    middle = cnn_a.forward(image[None], stop="conv2")
    assert np.array_equal(cnn_a.forward(middle, start="conv2").data, full)


def test_predict_agrees_with_softmax_argmax(mlp, small_data):
    images = small_data.test_images
    probabilities = tc.softmax(logits(mlp, images)).data
    assert np.array_equal(predict(mlp, images), np.argmax(probabilities, axis=-1))
    assert isinstance(predict(mlp, images[0]), int)


def test_loss_is_nonnegative(mlp, small_data):
    for i in range(5):
        assert loss(mlp, small_data.test_images[i], small_data.test_labels[i]).item() >= 0.0


def test_positive_logit_scaling_keeps_predictions(cnn_a, small_data):
    scaled = Model(cnn_a.arch, {k: v * (3.0 if k.startswith("fc") else 1.0) for k, v in cnn_a.params.items()})
    assert np.array_equal(predict(scaled, small_data.test_images), predict(cnn_a, small_data.test_images))


def test_zero_learning_rate_leaves_parameters(small_data):
    arch = model_zoo.get_architecture("mlp-256")
    model = model_zoo.train(arch, small_data, epochs=1, lr=0.0, seed=5)
    initial = arch.init_params(np.random.default_rng(5))
    for key, value in initial.items():
        assert np.array_equal(model.params[key], value)


def test_training_is_seed_deterministic(small_data):
    first = model_zoo.train("mlp-256", small_data, epochs=1, seed=2)
    second = model_zoo.train("mlp-256", small_data, epochs=1, seed=2)
    for key in first.params:
        assert np.array_equal(first.params[key], second.params[key])
    assert first.train_accuracy == second.train_accuracy


def test_short_training_beats_chance(mlp, small_data):
    assert mlp.train_accuracy > 0.3
    assert accuracy(mlp, small_data.test_images, small_data.test_labels) == mlp.test_accuracy


def test_distinct_seeds_disagree_on_test_data(mlp, small_data):
    other = model_zoo.train("mlp-256", small_data, epochs=3, lr=0.05, seed=4)
    images = small_data.test_images
    assert np.any(predict(mlp, images) != predict(other, images))


def test_divergence_names_the_epoch(small_data):
    with pytest.raises(TrainingDivergedError) as info:
        model_zoo.train("mlp-256", small_data, epochs=2, lr=1e6, seed=0)
    assert info.value.epoch == 1


def test_zero_budget_adversarial_training_duplicates_batches(small_data):
    arch = model_zoo.get_architecture("mlp-256")
    adversarial = model_zoo.train_adversarial(arch, small_data, epochs=1, seed=4, budget=AttackBudget(epsilon=0.0))

    def duplicate(params, xb, yb):
        return np.concatenate([xb, xb]), np.concatenate([yb, yb])

    plain = model_zoo._fit(arch, small_data, 1, 0.05, 4, 32, 0.9, batch_hook=duplicate)
    for key in plain.params:
        assert np.array_equal(adversarial.params[key], plain.params[key])


def test_save_load_round_trip(tmp_path, mlp, small_data):
    first = model_zoo.save(mlp, tmp_path / "mlp.taaw")
    loaded = model_zoo.load(first, expected_arch="mlp-256")
    second = model_zoo.save(loaded, tmp_path / "again.taaw")
    assert first.read_bytes() == second.read_bytes()
    assert np.array_equal(logits(loaded, small_data.test_images).data, logits(mlp, small_data.test_images).data)
    assert loaded.test_accuracy == mlp.test_accuracy


def test_corrupted_byte_fails_checksum(tmp_path, mlp):
    path = model_zoo.save(mlp, tmp_path / "mlp.taaw")
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(WeightFileError, match="checksum"):
        model_zoo.load(path)


def test_architecture_mismatch_is_rejected(tmp_path, mlp):
    path = model_zoo.save(mlp, tmp_path / "mlp.taaw")
    with pytest.raises(WeightFileError, match="expected 'tinycnn-a'"):
        model_zoo.load(path, expected_arch="tinycnn-a")


def test_missing_weight_file(tmp_path):
    with pytest.raises(WeightFileError):
        model_zoo.load(tmp_path / "absent.taaw")


def test_weight_codec_rejects_truncation():
    blob = encode_weights("toy", {"w": np.arange(6.0).reshape(2, 3)}, {"note": "x"})
    arch, arrays, meta = decode_weights(blob)
    assert arch == "toy" and meta == {"note": "x"}
    assert np.array_equal(arrays["w"], np.arange(6.0).reshape(2, 3))
    with pytest.raises(WeightFileError):
        decode_weights(blob[:10])


def test_input_gradient_rows_are_independent(cnn_a, small_data):
    xs, ys = small_data.test_images[:3], small_data.test_labels[:3]
    batch = model_zoo.input_gradient(cnn_a, xs, ys)
    single = model_zoo.input_gradient(cnn_a, xs[1:2], ys[1:2])
    assert np.allclose(batch[1], single[0], atol=1e-12)


@pytest.mark.slow
def test_tinycnn_a_reaches_accuracy_anchor(trained_cnn_a, anchor_data):
    assert trained_cnn_a.test_accuracy >= 0.95
    assert model_zoo.accuracy(trained_cnn_a, anchor_data.test_images, anchor_data.test_labels) >= 0.95


@pytest.mark.slow
def test_adversarial_training_resists_white_box_ifgsm(trained_cnn_a, anchor_data):
    from taabench.attacks.gradient import ifgsm_batch

    hardened = model_zoo.train_adversarial("tinycnn-a-adv", anchor_data, epochs=10, lr=0.05, seed=0)
    budget = AttackBudget(epsilon=8 / 255, iterations=10)
    xs, ys = anchor_data.test_images[:200], anchor_data.test_labels[:200]

    def white_box_asr(model):
        correct = predict(model, xs) == ys
        x_adv, _ = ifgsm_batch(model, xs[correct], ys[correct], budget)
        return np.mean(predict(model, x_adv) != ys[correct])

    assert white_box_asr(hardened) < white_box_asr(trained_cnn_a)
