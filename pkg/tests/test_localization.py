import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from finegrain.data import DatasetSpec, generate_dataset
from finegrain.localization import (
    BoundingBox,
    LocalizationConfig,
    SmoothL1Loss,
    crop_and_resize,
    extract_bbox,
    heatmap_from_features,
    iou,
    localization_accuracy,
    minmax_normalize,
    smooth_l1_grad,
    smooth_l1_loss,
    train_localizer,
)
from finegrain.numerics import ConfigurationError, ContractViolation, finite_difference_gradient

from conftest import SEEDS, assert_grad_close


def brute_force_bbox(h, tau, image_size):
    """Enumerate every cell rectangle and keep the smallest containing all cells above tau."""
    I, J = h.shape
    hot = h > tau
    if not hot.any():
        return BoundingBox(0, 0, image_size[1], image_size[0])
    best = None
    for i0 in range(I):
        for i1 in range(i0, I):
            for j0 in range(J):
                for j1 in range(j0, J):
                    inside = np.zeros_like(hot)
                    inside[i0:i1 + 1, j0:j1 + 1] = True
                    if np.any(hot & ~inside):
                        continue
                    area = (i1 - i0 + 1) * (j1 - j0 + 1)
                    if best is None or area < best[0]:
                        best = (area, i0, j0, i1, j1)
    _, i0, j0, i1, j1 = best
    sy, sx = image_size[0] / I, image_size[1] / J
    return BoundingBox(j0 * sx, i0 * sy, (j1 + 1) * sx, (i1 + 1) * sy)


def rasterized_iou(a, b, size):
    ys, xs = np.mgrid[0:size, 0:size]

    def mask(box):
        return (xs >= box.x_min) & (xs < box.x_max) & (ys >= box.y_min) & (ys < box.y_max)

    ma, mb = mask(a), mask(b)
    union = np.sum(ma | mb)
    return np.sum(ma & mb) / union if union else 0.0


class TestHeatmap:
    def test_mean_of_two_maps(self):
        block = np.array([[[1, 3], [5, 7]], [[3, 1], [1, 1]]], dtype=float)
        assert heatmap_from_features(block).tolist() == [[2, 2], [3, 4]]

    def test_single_map(self, rng):
        block = rng.normal(size=(1, 3, 4))
        assert np.array_equal(heatmap_from_features(block), block[0])

    def test_constant_maps(self):
        assert np.all(heatmap_from_features(np.full((5, 3, 3), 2.5)) == 2.5)

    def test_batched(self, rng):
        block = rng.normal(size=(2, 4, 3, 3))
        np.testing.assert_allclose(heatmap_from_features(block)[1], block[1].mean(axis=0))


class TestMinMax:
    def test_hand_values(self):
        assert minmax_normalize(np.array([[2.0, 2.0], [3.0, 4.0]])).tolist() == [[0, 0], [0.5, 1]]

    def test_constant_is_zero(self):
        assert np.all(minmax_normalize(np.full((3, 3), 7.0)) == 0.0)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_range(self, seed):
        h = minmax_normalize(np.random.default_rng(seed).normal(size=(6, 5)))
        assert h.min() == 0.0 and h.max() == 1.0

    @given(st.integers(0, 10_000), st.floats(0.01, 100.0), st.floats(-100.0, 100.0))
    @settings(max_examples=100, deadline=None)
    def test_affine_invariance(self, seed, a, b):
        h = np.random.default_rng(seed).normal(size=(8, 8))
        n1, n2 = minmax_normalize(h), minmax_normalize(a * h + b)
        np.testing.assert_allclose(n1, n2, atol=1e-9)
        cfg = LocalizationConfig(tau=0.3)
        # cells far from the threshold give the same box under the rescaling
        if np.all(np.abs(n1 - 0.3) > 1e-6):
            assert extract_bbox(n1, cfg, 64) == extract_bbox(n2, cfg, 64)


class TestExtractBox:
    def test_single_cell(self):
        h = np.zeros((14, 14))
        h[3, 5] = 1.0
        box = extract_bbox(h, LocalizationConfig(tau=0.3), 448)
        assert (box.x_min, box.x_max - 1) == (160, 191)
        assert (box.y_min, box.y_max - 1) == (96, 127)

    def test_all_cells_hot(self):
        assert extract_bbox(np.ones((8, 8)), LocalizationConfig(), 64) == BoundingBox(0, 0, 64, 64)

    def test_no_cells_hot(self):
        assert extract_bbox(np.zeros((8, 8)), LocalizationConfig(), 64) == BoundingBox(0, 0, 64, 64)

    def test_threshold_is_strict(self):
        h = np.zeros((4, 4))
        h[1, 1] = 0.3
        h[2, 2] = 1.0
        assert extract_bbox(h, LocalizationConfig(tau=0.3), 4) == BoundingBox(2, 2, 3, 3)

    def test_rectangular_image(self):
        h = np.zeros((4, 8))
        h[1, 2] = 1.0
        assert extract_bbox(h, LocalizationConfig(), (40, 80)) == BoundingBox(20, 10, 30, 20)

    def test_matches_brute_force_on_small_maps(self, rng):
        for _ in range(50):
            h = minmax_normalize(rng.random((5, 6)) ** 4)
            tau = rng.uniform(0.05, 0.95)
            cfg = LocalizationConfig(tau=tau)
            assert extract_bbox(h, cfg, (50, 60)) == brute_force_bbox(h, tau, (50, 60))

    @pytest.mark.parametrize("tau", [0.0, 1.0])
    def test_tau_range(self, tau):
        with pytest.raises(ConfigurationError):
            LocalizationConfig(tau=tau)


class TestCrop:
    def test_identity(self, rng):
        img = rng.normal(size=(3, 7, 5))
        assert np.array_equal(crop_and_resize(img, BoundingBox(0, 0, 5, 7), (7, 5)), img)

    def test_checkerboard_upsampling(self):
        img = np.array([[[0.0, 1.0], [1.0, 0.0]]])
        out = crop_and_resize(img, BoundingBox(0, 0, 2, 2), 4)
        # half-pixel centres sample at 0, 0.25, 0.75, 1 along each axis
        expected = np.array([
            [0.0, 0.25, 0.75, 1.0],
            [0.25, 0.375, 0.625, 0.75],
            [0.75, 0.625, 0.375, 0.25],
            [1.0, 0.75, 0.25, 0.0],
        ])
        np.testing.assert_allclose(out[0], expected, atol=1e-15)

    @pytest.mark.parametrize("target", [1, 3, (5, 9), 64])
    def test_output_shape(self, rng, target):
        out = crop_and_resize(rng.normal(size=(2, 20, 30)), BoundingBox(3, 4, 17, 11), target)
        t = (target, target) if np.isscalar(target) else target
        assert out.shape == (2,) + tuple(t)

    def test_crop_sees_only_box_content(self):
        img = np.zeros((1, 10, 10))
        img[0, 2:5, 3:7] = 1.0
        out = crop_and_resize(img, BoundingBox(3, 2, 7, 5), (6, 8))
        assert np.all(out == 1.0)

    def test_degenerate_box(self):
        with pytest.raises(ConfigurationError):
            crop_and_resize(np.zeros((1, 4, 4)), BoundingBox(1, 1, 1, 3), 2)

    def test_box_outside_image(self):
        with pytest.raises(ConfigurationError):
            crop_and_resize(np.zeros((1, 4, 4)), BoundingBox(1, 1, 5, 3), 2)


class TestSmoothL1:
    def test_zero(self, rng):
        h = rng.normal(size=(4, 4))
        assert smooth_l1_loss(h, h) == 0.0

    def test_quadratic_branch(self):
        assert smooth_l1_loss(np.array([[0.5]]), np.array([[0.0]])) == 0.125

    def test_linear_branch(self):
        assert smooth_l1_loss(np.array([[2.0]]), np.array([[0.0]])) == 1.5

    def test_shape_mismatch(self):
        with pytest.raises(ContractViolation):
            smooth_l1_loss(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_continuous_derivative_at_one(self):
        t = np.zeros((1, 1))
        for side in (1.0, -1.0):
            below = smooth_l1_grad(np.array([[side * (1 - 1e-9)]]), t)
            above = smooth_l1_grad(np.array([[side * (1 + 1e-9)]]), t)
            assert abs(below - above).max() < 1e-8
            vb = smooth_l1_loss(np.array([[side * (1 - 1e-9)]]), t)
            va = smooth_l1_loss(np.array([[side * (1 + 1e-9)]]), t)
            assert abs(vb - va) < 1e-8

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        p, t = 2 * rng.normal(size=(6, 6)), rng.normal(size=(6, 6))
        op = SmoothL1Loss()
        op.forward(p, t)
        gp, gt = op.backward()
        num_p, num_t = finite_difference_gradient(smooth_l1_loss, [p, t])
        assert_grad_close(gp, num_p, "smooth l1 predicted")
        assert_grad_close(gt, num_t, "smooth l1 target")


@st.composite
def boxes(draw, size=40):
    x0 = draw(st.integers(0, size - 1))
    y0 = draw(st.integers(0, size - 1))
    x1 = draw(st.integers(x0 + 1, size))
    y1 = draw(st.integers(y0 + 1, size))
    return BoundingBox(x0, y0, x1, y1)


class TestIoU:
    def test_identical(self):
        b = BoundingBox(1, 2, 5, 9)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(BoundingBox(0, 0, 1, 1), BoundingBox(2, 2, 3, 3)) == 0.0

    def test_touching_is_disjoint(self):
        assert iou(BoundingBox(0, 0, 1, 1), BoundingBox(1, 0, 2, 1)) == 0.0

    def test_half_overlap_unit_squares(self):
        assert iou(BoundingBox(0, 0, 1, 1), BoundingBox(0.5, 0, 1.5, 1)) == pytest.approx(1 / 3)

    @given(boxes(), boxes())
    @settings(max_examples=200, deadline=None)
    def test_properties(self, a, b):
        v = iou(a, b)
        assert 0.0 <= v <= 1.0
        assert v == iou(b, a)
        assert iou(a, a) == 1.0

    def test_matches_rasterization(self, rng):
        for _ in range(500):
            x = np.sort(rng.integers(0, 41, size=(2, 2)), axis=1)
            y = np.sort(rng.integers(0, 41, size=(2, 2)), axis=1)
            x[:, 1] = np.maximum(x[:, 1], x[:, 0] + 1)
            y[:, 1] = np.maximum(y[:, 1], y[:, 0] + 1)
            a = BoundingBox(x[0, 0], y[0, 0], x[0, 1], y[0, 1])
            b = BoundingBox(x[1, 0], y[1, 0], x[1, 1], y[1, 1])
            assert abs(iou(a, b) - rasterized_iou(a, b, 42)) < 1e-9

    def test_inverted_box_rejected(self):
        with pytest.raises(ConfigurationError):
            BoundingBox(3, 0, 1, 1)


class TestLocalizationAccuracy:
    def test_all_correct(self):
        b = [BoundingBox(0, 0, 2, 2), BoundingBox(1, 1, 4, 4)]
        assert localization_accuracy(b, b) == 1.0

    def test_all_disjoint(self):
        a = [BoundingBox(0, 0, 1, 1)] * 3
        b = [BoundingBox(5, 5, 6, 6)] * 3
        assert localization_accuracy(a, b) == 0.0

    def test_half(self):
        t = [BoundingBox(0, 0, 10, 10)] * 4
        p = [BoundingBox(0, 0, 10, 10), BoundingBox(0, 0, 10, 5),
             BoundingBox(0, 0, 10, 4), BoundingBox(20, 20, 30, 30)]
        assert localization_accuracy(p, t) == 0.5

    def test_length_mismatch(self):
        with pytest.raises(ContractViolation):
            localization_accuracy([BoundingBox(0, 0, 1, 1)], [])


class FakeClassifier:
    """Stands in for a trained network: heatmaps are a fixed function of each image."""

    def __init__(self, fn, frozen=True):
        self.fn = fn
        self.frozen = frozen

    def heatmaps(self, images):
        return np.stack([self.fn(im) for im in images])


def cell_coverage(mask, cells=8):
    s = mask.shape[0] // cells
    return mask.reshape(cells, s, cells, s).mean(axis=(1, 3))


@pytest.fixture(scope="module")
def small_dataset():
    return generate_dataset(DatasetSpec(samples_per_class=12), seed=5)


class TestTrainLocalizer:
    def test_requires_frozen_classifier(self, small_dataset):
        images = np.stack([s.image for s in small_dataset[:4]])
        with pytest.raises(ContractViolation):
            train_localizer(images, FakeClassifier(lambda im: np.zeros((8, 8)), frozen=False),
                            LocalizationConfig(), epochs=1)

    def test_constant_targets_are_learned(self, small_dataset):
        images = np.stack([s.image for s in small_dataset[:28]])
        fake = FakeClassifier(lambda im: np.full((8, 8), 0.7))
        res = train_localizer(images, fake, LocalizationConfig(), epochs=40, lr=0.05)
        assert res.losses[-1] < 0.01 * res.losses[0]
        pred = res.predictor.predict(images)
        assert np.abs(pred - 0.7).mean() < 0.02

    def test_zero_epochs_keeps_initial_predictor(self, small_dataset):
        images = np.stack([s.image for s in small_dataset[:10]])
        fake = FakeClassifier(lambda im: im.mean(axis=0).reshape(8, 8, 8, 8).mean(axis=(1, 3)))
        a = train_localizer(images, fake, LocalizationConfig(), epochs=0, seed=3)
        b = train_localizer(images, fake, LocalizationConfig(), epochs=0, seed=3)
        assert a.losses == []
        pa, pb = a.predictor.predict(images), b.predictor.predict(images)
        assert np.array_equal(pa, pb)
        targets = fake.heatmaps(images)
        assert smooth_l1_loss(pa, targets) == smooth_l1_loss(pb, targets)

    def test_beats_mean_heatmap_on_held_out_data(self, small_dataset):
        fake = FakeClassifier(None)
        masks = [s.mask for s in small_dataset]
        train_imgs = np.stack([s.image for s in small_dataset[:45]])
        test_imgs = np.stack([s.image for s in small_dataset[45:]])
        train_t = np.stack([cell_coverage(m) for m in masks[:45]])
        test_t = np.stack([cell_coverage(m) for m in masks[45:]])
        res = train_localizer(train_imgs, fake, LocalizationConfig(), epochs=40, lr=0.1,
                              targets=train_t)
        model_loss = smooth_l1_loss(res.predictor.predict(test_imgs), test_t)
        baseline = smooth_l1_loss(np.broadcast_to(train_t.mean(axis=0), test_t.shape), test_t)
        assert model_loss < baseline

    def test_mismatched_heatmap_size(self, small_dataset):
        images = np.stack([s.image for s in small_dataset[:4]])
        fake = FakeClassifier(lambda im: np.zeros((4, 4)))
        with pytest.raises(ConfigurationError):
            train_localizer(images, fake, LocalizationConfig(), epochs=1)


def test_ground_truth_mask_recovers_box(small_dataset):
    cfg = LocalizationConfig(tau=0.3)
    for s in small_dataset:
        h = minmax_normalize(s.mask.astype(float))
        box = extract_bbox(h, cfg, s.image.shape[1:])
        assert iou(box, s.truth_box) >= 0.9
