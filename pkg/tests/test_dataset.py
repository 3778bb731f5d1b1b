import csv

import numpy as np
import pytest
from PIL import Image

from taabench import dataset
from taabench.dataset import CLASS_NAMES, render_glyph


def test_same_seed_gives_identical_bytes():
    first = dataset.generate(3, n_train=40, n_test=20)
    second = dataset.generate(3, n_train=40, n_test=20)
    assert first.to_bytes() == second.to_bytes()
    assert dataset.generate(4, n_train=40, n_test=20).to_bytes() != first.to_bytes()


def test_pixels_lie_in_unit_range(small_data):
    for images in (small_data.train_images, small_data.test_images):
        assert images.min() >= 0.0
        assert images.max() <= 1.0
    assert small_data.image_shape == (16, 16, 1)


@pytest.mark.parametrize("n", [300, 57])
def test_classes_are_balanced(n):
    data = dataset.generate(1, n_train=n, n_test=13)
    for split in ("train", "test"):
        counts = data.class_counts(split)
        assert counts.max() - counts.min() <= 1


def test_train_and_test_streams_differ():
    data = dataset.generate(0, n_train=20, n_test=20)
    assert not np.array_equal(data.train_images, data.test_images)


def test_every_class_renders_visible_ink():
    rng = np.random.default_rng(0)
    for label in range(len(CLASS_NAMES)):
        glyph = render_glyph(label, rng, noise_std=0.0)
        assert glyph.shape == (16, 16, 1)
        assert glyph.max() > 0.5


def test_empty_split_is_rejected():
    with pytest.raises(ValueError):
        dataset.generate(0, n_train=0, n_test=10)


def test_export_writes_pgm_files_and_labels(tmp_path):
    data = dataset.generate(2, n_train=10, n_test=5)
    out = data.export(tmp_path / "glyphs")
    with open(out / "labels.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 15
    first = rows[0]
    assert first["split"] == "train"
    assert first["class_name"] == CLASS_NAMES[int(first["label"])]
    pixels = np.asarray(Image.open(out / first["file"]))
    assert pixels.shape == (16, 16)
    assert np.array_equal(pixels, np.round(data.train_images[0, :, :, 0] * 255).astype(np.uint8))
