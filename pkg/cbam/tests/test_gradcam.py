import os
import tempfile
from pathlib import Path
from unittest import skipUnless

import numpy as np
from django.test import SimpleTestCase, override_settings
from numpy.testing import assert_allclose, assert_array_equal

from cbam.exceptions import ClassOutOfRange
from cbam.services import tensor as T
from cbam.services.attention import CbamVariant
from cbam.services.data import SyntheticSpec, generate_synthetic, patch_cell, split_train_val
from cbam.services.gradcam import (
    compute_gradcam,
    gradcam,
    read_heatmap,
    upsample_nearest,
    write_heatmap,
)
from cbam.services.serialization import read_netpbm
from cbam.services.training import TrainConfig, predict, train
from cbam.services.zoo import AttentionKind, TinyNetSpec, init_params, net_forward, zero_params

SPEC = TinyNetSpec.from_dict({
    "in_channels": 3,
    "stem_channels": 4,
    "blocks": [
        {"in_channels": 4, "out_channels": 4, "stride": 1},
        {"in_channels": 4, "out_channels": 6, "stride": 2},
    ],
    "num_classes": 3,
}).with_attention(AttentionKind.CBAM, CbamVariant(kernel_size=3, reduction_ratio=2))


class GradCamTests(SimpleTestCase):
    def setUp(self):
        self.params = init_params(SPEC, 0)
        self.image = T.normal((1, 3, 8, 8), 1.0, np.random.default_rng(0))

    def test_extents_match_last_block(self):
        heatmap = gradcam(SPEC, self.params, self.image, 1)
        _, features = net_forward(self.image, SPEC, self.params, return_features=True)
        self.assertEqual(heatmap.values.shape, (1, 1, *features.shape[2:]))
        self.assertEqual(heatmap.values.shape, (1, 1, 4, 4))

    def test_values_are_normalised(self):
        heatmap = gradcam(SPEC, self.params, self.image, 2)
        self.assertGreaterEqual(heatmap.pixels.min(), 0.0)
        self.assertLessEqual(heatmap.pixels.max(), 1.0)
        self.assertTrue(heatmap.pixels.max() in (0.0, 1.0))
        self.assertTrue(0.0 < heatmap.score < 1.0)

    def test_zero_network_gives_zero_map(self):
        heatmap = gradcam(SPEC, zero_params(SPEC), self.image, 0)
        assert_array_equal(heatmap.pixels, np.zeros((4, 4)))
        self.assertAlmostEqual(heatmap.score, 1 / 3)

    def test_positive_scaling_leaves_map_unchanged(self):
        def forward(x, factor=1.0):
            logits, features = net_forward(x, SPEC, self.params, return_features=True)
            return T.scale(logits, factor), features

        base = compute_gradcam(forward, self.image, 1)
        scaled = compute_gradcam(lambda x: forward(x, 7.5), self.image, 1)
        assert_allclose(scaled.pixels, base.pixels, atol=1e-12)

    def test_class_out_of_range(self):
        with self.assertRaises(ClassOutOfRange):
            gradcam(SPEC, self.params, self.image, 3)
        with self.assertRaises(ClassOutOfRange):
            gradcam(SPEC, self.params, self.image, -1)

    def test_peak_maps_back_to_image(self):
        heatmap = gradcam(SPEC, self.params, self.image, 0)
        row, col = heatmap.peak()
        self.assertEqual(heatmap.pixels[row, col], heatmap.pixels.max())
        self.assertEqual(heatmap.peak_in_image(8, 8), (2 * row + 1, 2 * col + 1))


class RenderingTests(SimpleTestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)
        self.heatmap = gradcam(SPEC, init_params(SPEC, 1), T.normal((1, 3, 8, 8), 1.0, np.random.default_rng(1)), 0)

    def tearDown(self):
        self._tmp.cleanup()

    def test_pgm_round_trip_within_one_level(self):
        write_heatmap(self.heatmap, self.tmp / "cam.pgm")
        back = read_heatmap(self.tmp / "cam.pgm")
        self.assertLessEqual(np.abs(back.pixels - self.heatmap.pixels).max(), 1 / 255)

    def test_overlay_has_image_extents(self):
        image = T.normal((1, 3, 8, 8), 1.0, np.random.default_rng(2))
        write_heatmap(self.heatmap, self.tmp / "cam.ppm", image)
        self.assertEqual(read_netpbm(self.tmp / "cam.ppm").shape, (8, 8, 3))

    def test_nearest_upsampling(self):
        up = upsample_nearest(np.array([[0.0, 1.0], [2.0, 3.0]]), 4, 4)
        assert_array_equal(up[:2, :2], np.zeros((2, 2)))
        assert_array_equal(up[2:, 2:], np.full((2, 2), 3.0))


@skipUnless(os.environ.get("CBAM_SLOW_TESTS") == "1", "set CBAM_SLOW_TESTS=1 for desk-scale runs")
@override_settings(CBAM_SEED=None)
class PatchLocalisationTests(SimpleTestCase):
    def test_heatmap_peaks_in_the_patch_cell(self):
        synth = SyntheticSpec(num_samples=1024, num_classes=4, seed=0)
        train_set, val_set = split_train_val(generate_synthetic(synth))
        spec = TinyNetSpec.default(4).with_attention(AttentionKind.CBAM, CbamVariant())
        cfg = TrainConfig(epochs=15, batch_size=32, lr0=0.1, lr_drop_every=10, seed=0)
        params = train(spec, init_params(spec, 0), train_set, cfg).params

        predictions = predict(spec, params, val_set).argmax(axis=1)
        hits = total = 0
        for i, label in enumerate(val_set.labels):
            if predictions[i] != label:
                continue
            image, _ = val_set.batch([i])
            heatmap = gradcam(spec, params, image, label)
            total += 1
            hits += patch_cell(synth, *heatmap.peak_in_image(synth.height, synth.width)) == label
        self.assertGreater(total, 0)
        self.assertGreaterEqual(hits / total, 0.6)
