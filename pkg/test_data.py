"""Tests for the synthetic dataset generator, quantization, bitmaps and dataset files."""

import numpy as np
import pytest

from app.modules.data import (
    class_strokes,
    class_templates,
    export_bitmaps,
    gen_dataset,
    load_bitmap,
    load_dataset,
    quantize_8bit,
    save_dataset,
    subset,
)
from app.modules.errors import RejectedInputError, WeightFormatError
from app.modules.nn import accuracy
from config import DatasetConfig


def test_same_seed_same_dataset():
    a = gen_dataset(3, 40, 4, (1, 8, 8))
    b = gen_dataset(3, 40, 4, (1, 8, 8))
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_splits_differ_but_share_classes():
    train = gen_dataset(3, 40, 4, (1, 8, 8), "train")
    test = gen_dataset(3, 40, 4, (1, 8, 8), "test")
    assert not np.array_equal(train.images, test.images)
    assert train.classes == test.classes


def test_class_balance():
    data = gen_dataset(0, 100, 10, (1, 8, 8))
    np.testing.assert_array_equal(np.bincount(data.labels, minlength=10), np.full(10, 10))


def test_pixels_in_unit_box():
    data = gen_dataset(1, 60, 3, (3, 8, 8))
    assert data.images.min() >= 0.0
    assert data.images.max() <= 1.0
    assert data.images.shape == (60, 3, 8, 8)


@pytest.mark.parametrize("kwargs", [
    {"n": 25, "classes": 10},
    {"n": 0, "classes": 1},
    {"n": 10, "classes": 0},
    {"n": 10, "classes": 2, "split": "dev"},
    {"n": 10, "classes": 2, "shape": (1, 2, 2)},
])
def test_bad_arguments_rejected(kwargs):
    args = {"seed": 0, "shape": (1, 8, 8), **kwargs}
    with pytest.raises(RejectedInputError):
        gen_dataset(**args)


def test_subset_keeps_order():
    data = gen_dataset(0, 20, 2, (1, 4, 4))
    part = subset(data, [5, 1])
    np.testing.assert_array_equal(part.images[0], data.images[5])
    assert list(part.labels) == [data.labels[5], data.labels[1]]


def test_quantize_examples():
    assert quantize_8bit(np.array(0.5)) == pytest.approx(128 / 255, abs=0)
    np.testing.assert_array_equal(quantize_8bit(np.array([0.0, 1.0])), [0.0, 1.0])


def test_quantize_idempotent_and_bounded():
    x = np.random.default_rng(4).uniform(size=(50, 1, 8, 8))
    q = quantize_8bit(x)
    np.testing.assert_array_equal(quantize_8bit(q), q)
    assert np.max(np.abs(q - x)) <= 1 / 510 + 1e-15


def test_quantize_rejects_out_of_range():
    with pytest.raises(RejectedInputError):
        quantize_8bit(np.array([1.2]))


def test_bitmaps_round_trip_on_grid(tmp_path):
    images = quantize_8bit(np.random.default_rng(0).uniform(size=(3, 1, 8, 8)))
    paths = export_bitmaps(images, tmp_path / "png", prefix="x")
    assert [p.name for p in paths] == ["x_00000.png", "x_00001.png", "x_00002.png"]
    np.testing.assert_allclose(load_bitmap(paths[1]), images[1], rtol=0, atol=1e-12)


def test_dataset_file_round_trip(tmp_path):
    data = gen_dataset(2, 30, 3, (1, 8, 8), "test")
    path = tmp_path / "test.xfd"
    save_dataset(data, path)
    loaded = load_dataset(path, split="test")
    np.testing.assert_array_equal(loaded.images, data.images)
    np.testing.assert_array_equal(loaded.labels, data.labels)
    assert (loaded.classes, loaded.seed) == (3, 2)


def test_dataset_file_truncated(tmp_path):
    path = tmp_path / "cut.xfd"
    save_dataset(gen_dataset(2, 10, 2, (1, 4, 4)), path)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(WeightFormatError):
        load_dataset(path)


def test_linear_model_trails_small_cnn(desk_data, desk_suite):
    _, test = desk_data
    cnn = accuracy(desk_suite["vgg"], test.images, test.labels)
    linear = accuracy(desk_suite["logistic"], test.images, test.labels)
    assert cnn >= 0.8
    assert linear < cnn


def test_templates_combine_shared_and_class_strokes():
    shared, own = class_strokes(5, 3, (1, 8, 8))
    templates = class_templates(5, 3, (1, 8, 8))
    assert own.shape == (3, DatasetConfig.STROKES_PER_CLASS, 1, 8, 8)
    for k in range(3):
        expected = np.maximum(DatasetConfig.SHARED_LEVEL * shared, own[k].max(axis=0))
        np.testing.assert_array_equal(templates[k], expected)
