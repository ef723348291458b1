import json
import tempfile
from pathlib import Path
from unittest import mock

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_array_equal

from cbam.exceptions import ConfigError, ShapeMismatch
from cbam.services import tensor as T
from cbam.services.attention import Arrangement, CbamVariant, PoolingMode, param_count
from cbam.services.tensor import GradTape, Tensor
from cbam.services.zoo import (
    AttentionKind,
    ResidualBlockSpec,
    TinyNetSpec,
    block_forward,
    count_params,
    init_params,
    load_checkpoint,
    net_forward,
    net_macs,
    save_checkpoint,
    spec_param_count,
    zero_params,
)

SMALL_CBAM = CbamVariant(kernel_size=3, reduction_ratio=2)


def small_net(attention=AttentionKind.CBAM, cbam=SMALL_CBAM) -> TinyNetSpec:
    blocks = [
        ResidualBlockSpec(2, 2, attention, cbam if attention is AttentionKind.CBAM else None, 1, 2),
        ResidualBlockSpec(2, 3, attention, cbam if attention is AttentionKind.CBAM else None, 2, 2),
    ]
    return TinyNetSpec(in_channels=2, stem_channels=2, blocks=tuple(blocks), num_classes=3)


def zero_convs(params: dict, prefix: str) -> dict:
    out = dict(params)
    for name, t in params.items():
        if name.startswith(prefix) and ".conv" in name:
            out[name] = T.zeros_like(t)
    return out


class BlockTests(SimpleTestCase):
    def setUp(self):
        self.x = T.normal((2, 4, 5, 5), 1.0, np.random.default_rng(0))

    def _block_params(self, block):
        net = TinyNetSpec(in_channels=4, stem_channels=4, blocks=(block,), num_classes=2)
        return zero_convs(init_params(net, 1), "blocks.0.")

    def test_zero_path_plain_block_is_relu(self):
        block = ResidualBlockSpec(4, 4)
        out = block_forward(self.x, block, self._block_params(block))
        assert_array_equal(out.data, T.relu(self.x).data)

    def test_zero_path_cbam_block_is_relu(self):
        block = ResidualBlockSpec(4, 4, AttentionKind.CBAM, CbamVariant(reduction_ratio=2))
        out = block_forward(self.x, block, self._block_params(block))
        assert_array_equal(out.data, T.relu(self.x).data)

    @mock.patch("cbam.services.attention.sigmoid", lambda t: T.ones(t.shape))
    def test_open_gates_reduce_cbam_block_to_plain_block(self):
        for arrangement in Arrangement:
            for stride, out_channels in ((1, 4), (2, 6)):
                cbam = CbamVariant(arrangement=arrangement, kernel_size=3, reduction_ratio=2)
                plain = ResidualBlockSpec(4, out_channels, stride=stride)
                gated = ResidualBlockSpec(4, out_channels, AttentionKind.CBAM, cbam, stride=stride)
                net = TinyNetSpec(in_channels=4, stem_channels=4, blocks=(gated,), num_classes=2)
                params = init_params(net, 3)
                assert_array_equal(block_forward(self.x, gated, params).data,
                                   block_forward(self.x, plain, params).data)

    def test_stride_two_halves_extents(self):
        block = ResidualBlockSpec(4, 6, stride=2)
        net = TinyNetSpec(in_channels=4, stem_channels=4, blocks=(block,), num_classes=2)
        out = block_forward(self.x, block, init_params(net, 0))
        self.assertEqual(out.shape, (2, 6, 3, 3))

    def test_wrong_input_channels(self):
        block = ResidualBlockSpec(3, 3)
        with self.assertRaises(ShapeMismatch):
            block_forward(self.x, block, {})

    def test_cbam_requires_variant(self):
        with self.assertRaises(ConfigError):
            ResidualBlockSpec(4, 4, AttentionKind.CBAM)


class NetForwardTests(SimpleTestCase):
    def setUp(self):
        self.spec = small_net()
        self.params = init_params(self.spec, 3)
        self.images = T.normal((4, 2, 6, 6), 1.0, np.random.default_rng(4))

    def test_output_shape(self):
        self.assertEqual(net_forward(self.images, self.spec, self.params).shape, (4, 3))

    def test_batch_order_is_preserved(self):
        logits = net_forward(self.images, self.spec, self.params).data
        order = [2, 0, 3, 1]
        permuted = net_forward(Tensor(self.images.data[order]), self.spec, self.params).data
        np.testing.assert_allclose(permuted, logits[order], rtol=0, atol=1e-12)

    def test_zero_params_give_uniform_softmax(self):
        logits = net_forward(self.images, self.spec, zero_params(self.spec))
        assert_array_equal(logits.data, np.zeros((4, 3)))
        assert_array_equal(T.softmax(logits.data), np.full((4, 3), 1 / 3))

    def test_features_are_last_block_output(self):
        _, features = net_forward(self.images, self.spec, self.params, return_features=True)
        self.assertEqual(features.shape, (4, 3, 3, 3))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        image = Tensor(rng.permutation(np.linspace(-2, 2, 72)).reshape(1, 2, 6, 6))
        direction = Tensor(rng.uniform(-1, 1, size=(1, 3)))

        def loss(x, params=self.params):
            return T.sum_all(T.broadcast_mul(net_forward(x, self.spec, params), direction))

        with GradTape() as tape:
            watched = tape.watch(image)
            fc = tape.watch(self.params["fc.weight"])
            total = loss(watched, {**self.params, "fc.weight": fc})
        grads = T.backward(tape, total)

        numeric = T.finite_diff_grad(loss, image)
        self.assertLess(T.relative_error(grads[watched.node_id], numeric), 1e-4)
        numeric_fc = T.finite_diff_grad(lambda w: loss(image, {**self.params, "fc.weight": w}),
                                        self.params["fc.weight"])
        self.assertLess(T.relative_error(grads[fc.node_id], numeric_fc), 1e-4)


class ParameterTests(SimpleTestCase):
    def test_spec_count_matches_allocation(self):
        base = TinyNetSpec.default(num_classes=4)
        variants = [
            base,
            base.with_attention(AttentionKind.SE, reduction_ratio=16),
            base.with_attention(AttentionKind.CBAM, CbamVariant()),
            base.with_attention(AttentionKind.CBAM, CbamVariant(arrangement=Arrangement.CHANNEL_ONLY,
                                                                channel_pooling=PoolingMode.MAX_ONLY)),
            base.with_attention(AttentionKind.CBAM, CbamVariant(spatial_descriptor="one_by_one", kernel_size=3)),
        ]
        for spec in variants:
            self.assertEqual(spec_param_count(spec), count_params(init_params(spec, 0)))

    def test_attention_overhead_is_sum_of_block_counts(self):
        base = TinyNetSpec.default(num_classes=4)
        for variant in (CbamVariant(), CbamVariant(arrangement=Arrangement.PARALLEL, kernel_size=3),
                        CbamVariant(spatial_descriptor="one_by_one", reduction_ratio=4)):
            gated = base.with_attention(AttentionKind.CBAM, variant)
            delta = count_params(init_params(gated, 0)) - count_params(init_params(base, 0))
            expected = sum(param_count(b.cbam, b.out_channels) for b in gated.blocks)
            self.assertEqual(delta, expected)
            self.assertEqual(spec_param_count(gated) - spec_param_count(base), expected)

    def test_init_is_seeded(self):
        spec = small_net()
        a, b = init_params(spec, 7), init_params(spec, 7)
        self.assertEqual(list(a), list(b))
        for name in a:
            assert_array_equal(a[name].data, b[name].data)
        self.assertFalse(np.array_equal(init_params(spec, 8)["stem.weight"].data, a["stem.weight"].data))

    def test_backbone_is_shared_across_attention_kinds(self):
        plain, gated = init_params(small_net(AttentionKind.NONE), 2), init_params(small_net(), 2)
        for name, t in plain.items():
            assert_array_equal(gated[name].data, t.data)

    def test_macs_include_attention(self):
        self.assertGreater(net_macs(small_net(), 8, 8), net_macs(small_net(AttentionKind.NONE), 8, 8))

    def test_spec_round_trip(self):
        spec = small_net()
        self.assertEqual(TinyNetSpec.from_dict(json.loads(json.dumps(spec.to_dict()))), spec)

    def test_spec_rejects_broken_channel_chain(self):
        with self.assertRaises(ConfigError):
            TinyNetSpec(in_channels=3, stem_channels=4, blocks=(ResidualBlockSpec(8, 8),))
        with self.assertRaises(ConfigError):
            TinyNetSpec.from_dict({"in_channels": 3, "depth": 50})


class CheckpointTests(SimpleTestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.root = Path(self._tmp.name) / "ckpt"

    def tearDown(self):
        self._tmp.cleanup()

    def test_round_trip_is_bit_exact(self):
        spec = small_net()
        params = init_params(spec, 11)
        save_checkpoint(self.root, spec, params, extra={"note": "x"})
        loaded_spec, loaded, manifest = load_checkpoint(self.root)
        self.assertEqual(loaded_spec, spec)
        self.assertEqual(list(loaded), list(params))
        for name, t in params.items():
            self.assertEqual(loaded[name].data.tobytes(), t.data.tobytes())
        self.assertEqual(manifest["extra"], {"note": "x"})

    def test_manifest_shape_mismatch(self):
        spec = small_net()
        save_checkpoint(self.root, spec, init_params(spec, 0))
        manifest = json.loads((self.root / "manifest.json").read_text())
        manifest["tensors"]["fc.bias"]["shape"] = [4]
        (self.root / "manifest.json").write_text(json.dumps(manifest))
        with self.assertRaises(ShapeMismatch):
            load_checkpoint(self.root)

    def test_not_a_checkpoint(self):
        self.root.mkdir(parents=True)
        (self.root / "manifest.json").write_text('{"format": "other"}')
        with self.assertRaises(ConfigError):
            load_checkpoint(self.root)
