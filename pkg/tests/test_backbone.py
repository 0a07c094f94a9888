import numpy as np
import pytest

from somtp.backbone import build_encoder, build_fcn, build_heads, build_resnet
from somtp.numcore import Linear, finite_diff_check


def conv_bn(k_in, k_out, w):
    return k_out * k_in * w + k_out + 2 * k_out


def fcn_count(d):
    return conv_bn(d, 128, 9) + conv_bn(128, 256, 5) + conv_bn(256, 256, 3)


def resnet_count(d):
    total, k_in = 0, d
    for width in (64, 128, 256):
        total += conv_bn(k_in, width, 9) + conv_bn(width, width, 5) + conv_bn(width, width, 3)
        if k_in != width:
            total += conv_bn(k_in, width, 1)
        k_in = width
    return total


class TestFCN:
    def test_output_shape(self, rng):
        enc = build_fcn(1, rng)
        assert enc.forward(rng.normal(size=(2, 1, 24))).shape == (2, 256, 24)

    def test_multichannel_input(self, rng):
        enc = build_fcn(65, rng)
        assert enc.forward(rng.normal(size=(1, 65, 10))).shape == (1, 256, 10)

    def test_parameter_count(self):
        assert build_fcn(1).num_parameters() == fcn_count(1) == 363520
        assert build_fcn(3).num_parameters() == fcn_count(3)

    def test_seeded_builds_identical(self, rng):
        x = rng.normal(size=(2, 1, 16))
        a = build_fcn(1, np.random.default_rng(10)).forward(x)
        b = build_fcn(1, np.random.default_rng(10)).forward(x)
        np.testing.assert_array_equal(a, b)

    def test_output_nonnegative(self, rng):
        assert build_fcn(1, rng).forward(rng.normal(size=(2, 1, 12))).min() >= 0.0


class TestResNet:
    def test_output_shape(self, rng):
        assert build_resnet(1, rng).forward(rng.normal(size=(2, 1, 30))).shape == (2, 256, 30)

    def test_parameter_count_includes_projection_shortcuts(self):
        assert build_resnet(1).num_parameters() == resnet_count(1) == 1103744

    def test_identity_shortcut_when_widths_match(self):
        enc = build_encoder("resnet", 8, widths=(8, 8, 8), kernels=(3, 3, 3))
        assert all(block.shortcut is None for block in enc.layers)

    def test_gradient_flows_through_shortcut(self, rng):
        enc = build_resnet(2, rng, None)
        for block in enc.layers:
            for layer in block.branch.layers:
                if "weight" in layer.params:
                    layer.params["weight"][...] = 0.0
        x = rng.normal(size=(1, 2, 8))
        out = enc.forward(x)
        gx = enc.backward(np.ones_like(out))
        assert np.abs(gx).max() > 0

    def test_input_gradient_small_model(self, rng):
        enc = build_encoder("resnet", 2, np.random.default_rng(4), widths=(3, 4, 4), kernels=(3, 3, 3))
        enc.eval()  # fixed batch statistics keep the probe smooth
        for _, m, n in enc.named_buffers():
            m.buffers[n][...] = rng.uniform(0.5, 1.5, m.buffers[n].shape) if n == "running_var" else rng.normal(size=m.buffers[n].shape)
        x = rng.normal(size=(2, 2, 9))
        G = rng.normal(size=(2, 4, 9))
        enc.forward(x)
        gx = enc.backward(G)
        rep = finite_diff_check(lambda z: float((enc.forward(z) * G).sum()), x, gx)
        assert rep.max_rel_error < 1e-6 or not rep.checkable

    def test_unknown_backbone(self):
        with pytest.raises(ValueError, match="unknown backbone"):
            build_encoder("lstm", 1)


class TestHeads:
    def test_cls_dims(self):
        cls_head, dpln = build_heads(4, 3)
        dims = [(l.m, l.out) for l in cls_head.layers if isinstance(l, Linear)]
        assert dims == [(1024, 512), (512, 1024), (1024, 3)]
        assert dpln.layers[0].m == 3072

    def test_single_segment(self):
        cls_head, _ = build_heads(1, 2)
        assert cls_head.layers[0].m == 256

    def test_relu_between_only(self):
        cls_head, _ = build_heads(2, 2)
        kinds = [type(l).__name__ for l in cls_head.layers]
        assert kinds == ["Linear", "ReLU", "Linear", "ReLU", "Linear"]

    def test_invalid(self):
        with pytest.raises(ValueError):
            build_heads(0, 2)
        with pytest.raises(ValueError):
            build_heads(2, 1)
