import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convcrf.errors import ConfigurationError, DataError, InvalidArgumentError
from convcrf.synthetic import (
    IGNORE_INDEX,
    VOC_PALETTE,
    NoiseConfig,
    corrupt_labels,
    labels_to_unary,
    load_dataset,
    load_voc_split,
    make_toy_dataset,
    read_image_png,
    read_label_png,
    synthesize_dataset,
    write_image_png,
    write_label_png,
)
from convcrf.tensor import make_rng, softmax_channels


def random_labels(seed, shape=(2, 32, 24), c=5):
    return make_rng(seed).integers(0, c, size=shape)


class TestCorruption:
    def test_no_flips_gives_blocky_copy(self):
        gt = random_labels(0)
        out = corrupt_labels(gt, NoiseConfig(8, 0.0, 5, 0))
        for bx in range(0, 32, 8):
            for by in range(0, 24, 8):
                block = out[:, bx : bx + 8, by : by + 8]
                assert np.all(block == gt[:, bx, by][:, None, None])

    def test_no_flips_is_idempotent(self):
        nc = NoiseConfig(4, 0.0, 5, 0)
        once = corrupt_labels(random_labels(1), nc)
        np.testing.assert_array_equal(corrupt_labels(once, nc), once)

    def test_certain_flip_with_two_classes_inverts(self):
        gt = random_labels(2, c=2)
        out = corrupt_labels(gt, NoiseConfig(8, 1.0, 2, 0))
        np.testing.assert_array_equal(out[:, ::8, ::8], 1 - gt[:, ::8, ::8])

    def test_flip_rate(self):
        gt = random_labels(3, shape=(1, 800, 800), c=21)
        out = corrupt_labels(gt, NoiseConfig(8, 0.1, 21, 7))
        rate = np.mean(out[:, ::8, ::8] != gt[:, ::8, ::8])
        assert abs(rate - 0.1) <= 0.01

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 6), st.floats(0, 1), st.integers(1, 5))
    def test_range_and_ignore_preserved(self, seed, c, p, f):
        gt = random_labels(seed, shape=(1, 12, 10), c=c)
        gt[0, make_rng(seed).random((12, 10)) < 0.2] = IGNORE_INDEX
        out = corrupt_labels(gt, NoiseConfig(f, p, c, seed))
        valid = out != IGNORE_INDEX
        assert np.all(out[valid] < c) and np.all(out[valid] >= 0)
        np.testing.assert_array_equal(out == IGNORE_INDEX, gt == IGNORE_INDEX)

    def test_flipped_cells_change_class(self):
        gt = random_labels(4, c=3)
        out = corrupt_labels(gt, NoiseConfig(1, 0.5, 3, 1))
        changed = out != gt
        assert changed.any()
        assert np.all(out[changed] != gt[changed])

    def test_single_class_rejected(self):
        with pytest.raises(ConfigurationError):
            NoiseConfig(8, 0.1, 1, 0)

    def test_out_of_range_labels(self):
        with pytest.raises(DataError):
            corrupt_labels(np.full((1, 8, 8), 7), NoiseConfig(8, 0.1, 5, 0))

    def test_deterministic_per_seed(self):
        gt = random_labels(5)
        nc = NoiseConfig(4, 0.3, 5, 11)
        np.testing.assert_array_equal(corrupt_labels(gt, nc), corrupt_labels(gt, nc))


class TestUnary:
    def test_softmax_reproduces_distribution(self):
        labels = random_labels(6, c=4)
        q = softmax_channels(labels_to_unary(labels, 0.9, 4).astype(np.float64))
        onehot = np.eye(4)[labels].transpose(0, 3, 1, 2)
        expected = np.where(onehot == 1, 0.9, 0.1 / 3)
        np.testing.assert_allclose(q, expected, atol=1e-6)

    def test_logit_gap(self):
        logits = labels_to_unary(np.zeros((1, 1, 1), dtype=int), 0.9, 2)
        assert logits[0, 0, 0, 0] - logits[0, 1, 0, 0] == pytest.approx(math.log(9), abs=1e-6)

    def test_argmax_round_trip(self):
        labels = random_labels(7, c=21)
        np.testing.assert_array_equal(labels_to_unary(labels, 0.6, 21).argmax(axis=1), labels)

    def test_ignore_is_uniform(self):
        labels = np.array([[[0, IGNORE_INDEX]]])
        assert np.all(labels_to_unary(labels, 0.9, 3)[0, :, 0, 1] == 0)

    @pytest.mark.parametrize("tau", [0.5, 1.0, 0.2])
    def test_confidence_bounds(self, tau):
        with pytest.raises(InvalidArgumentError):
            labels_to_unary(np.zeros((1, 2, 2), dtype=int), tau, 3)


class TestToyData:
    def test_deterministic(self):
        a = make_toy_dataset(3, 32, 32, 4, 9)
        b = make_toy_dataset(3, 32, 32, 4, 9)
        for (ia, la), (ib, lb) in zip(a, b):
            np.testing.assert_array_equal(ia, ib)
            np.testing.assert_array_equal(la, lb)

    def test_shapes_and_content(self):
        for image, labels in make_toy_dataset(5, 24, 40, 5, 1):
            assert image.shape == (1, 3, 24, 40) and image.dtype == np.float32
            assert labels.shape == (1, 24, 40)
            assert len(np.unique(labels)) >= 2
            assert np.all(image == np.rint(image)) and image.min() >= 0 and image.max() <= 255

    def test_colour_is_informative(self):
        image, labels = make_toy_dataset(1, 64, 64, 3, 2)[0]
        means = [image[0, :, labels[0] == cls].mean(axis=0) for cls in np.unique(labels)]
        for i in range(len(means)):
            for j in range(i + 1, len(means)):
                assert np.linalg.norm(means[i] - means[j]) > 40


class TestFiles:
    def test_label_png_round_trip(self, tmp_path):
        labels = random_labels(8, shape=(1, 9, 7), c=21)
        labels[0, 0, 0] = IGNORE_INDEX
        write_label_png(tmp_path / "l.png", labels)
        np.testing.assert_array_equal(read_label_png(tmp_path / "l.png"), labels)

    def test_image_png_round_trip(self, tmp_path):
        image = make_toy_dataset(1, 16, 12, 3, 0)[0][0]
        write_image_png(tmp_path / "i.png", image)
        np.testing.assert_array_equal(read_image_png(tmp_path / "i.png"), image)

    def test_synthesize_and_load(self, tmp_path):
        nc = NoiseConfig(8, 0.1, 4, 3)
        manifest = synthesize_dataset(tmp_path, 3, 32, 32, nc)
        assert manifest["count"] == 3
        loaded, items = load_dataset(tmp_path)
        assert loaded == manifest
        assert [stem for stem, *_ in items] == ["0000", "0001", "0002"]
        for _, image, labels, unary in items:
            assert image.shape == (1, 3, 32, 32)
            assert labels.shape == (1, 32, 32)
            assert unary.shape == (1, 4, 32, 32)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(tmp_path)


def test_voc_split_reader(tmp_path):
    from PIL import Image

    (tmp_path / "ImageSets" / "Segmentation").mkdir(parents=True)
    (tmp_path / "JPEGImages").mkdir()
    (tmp_path / "SegmentationClass").mkdir()
    (tmp_path / "ImageSets" / "Segmentation" / "val.txt").write_text("a\nb\n")
    for stem in "ab":
        Image.new("RGB", (10, 8), (10, 200, 30)).save(tmp_path / "JPEGImages" / f"{stem}.jpg")
        seg = Image.fromarray(np.full((8, 10), 15, dtype=np.uint8), mode="P")
        seg.putpalette(VOC_PALETTE.ravel().tolist())
        seg.save(tmp_path / "SegmentationClass" / f"{stem}.png")
    items = list(load_voc_split(tmp_path, "val", limit=1))
    assert [s for s, _, _ in items] == ["a"]
    _, image, labels = items[0]
    assert image.shape == (1, 3, 8, 10) and labels.shape == (1, 8, 10)
    assert np.all(labels == 15)
    with pytest.raises(DataError):
        list(load_voc_split(tmp_path, "train"))
