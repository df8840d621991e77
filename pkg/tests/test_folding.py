import numpy as np
import pytest

import cost_model
import folding
from cost_model import TensorShape, conv2d, dense, global_pool, FP16
from folding import FoldingConfig

from conftest import MOBILEBLOCK


def single_conv(cin=16, cout=32):
    return cost_model.NetworkSpec("block", TensorShape(1, cin, 8, 8), FP16, [conv2d(cin, cout)])


def classifier():
    return cost_model.NetworkSpec(
        "classifier", TensorShape(1, 3, 16, 16), FP16,
        [conv2d(3, 16), conv2d(16, 32, stride=2), global_pool(), dense(32, 10)])


class TestFoldingConfig:
    @pytest.mark.parametrize("f", [0, -2, 1.5])
    def test_bad_factor(self, f):
        with pytest.raises((TypeError, ValueError)):
            FoldingConfig(f)

    def test_bad_rounding(self):
        with pytest.raises(ValueError):
            FoldingConfig(4, width_rounding=0)


class TestScaleWidth:
    def test_exact(self):
        assert folding.scale_width(24, FoldingConfig(9)) == 72

    def test_inexact_without_rounding(self):
        with pytest.raises(folding.FoldingError, match="sqrt"):
            folding.scale_width(24, FoldingConfig(2))

    def test_rounding(self):
        cfg = FoldingConfig(2, width_rounding=8, round_widths=True)
        # 24 * sqrt(2) = 33.9 -> 32, 30 * sqrt(2) = 42.4 -> 40
        assert folding.scale_width(24, cfg) == 32
        assert folding.scale_width(30, cfg) == 40
        assert folding.scale_width(1, cfg) == 8

    def test_round_half_up(self):
        cfg = FoldingConfig(4, width_rounding=4, round_widths=True)
        # 3 * 2 = 6 is halfway between 4 and 8
        assert folding.scale_width(3, cfg) == 8


class TestFoldNetwork:
    def test_identity(self):
        net = classifier()
        assert folding.fold_network(net, 8, FoldingConfig(1)) == (net, 8)

    def test_batch_must_divide(self):
        with pytest.raises(folding.FoldingError, match="divisible"):
            folding.fold_network(classifier(), 6, FoldingConfig(4))

    def test_interior_conv(self):
        folded, batch = folding.fold_network(single_conv(), 8, FoldingConfig(4, interior=True))
        assert batch == 2
        assert folded.layers == (conv2d(32, 64),)
        assert folded.input_shape == TensorShape(1, 32, 8, 8)

    def test_stacked_input_and_head(self):
        folded, batch = folding.fold_network(classifier(), 8, FoldingConfig(4))
        assert batch == 2
        assert folded.name == "classifier-folded-f4"
        assert folded.input_shape.channels == 12
        assert folded.layers[0] == conv2d(12, 32)
        assert folded.layers[1] == conv2d(32, 64, stride=2)
        assert folded.layers[2] == global_pool()
        assert folded.layers[3] == dense(64, 10)

    def test_depthwise_follows_input(self):
        folded, _ = folding.fold_network(
            cost_model.load_network(MOBILEBLOCK), 4, FoldingConfig(4))
        depthwise = [l for l in folded.layers if l.kind == cost_model.DEPTHWISE_CONV2D]
        assert [l.in_channels for l in depthwise] == [64, 128]
        assert all(l.in_channels == l.out_channels for l in depthwise)
        assert folded.layers[-1].out_features == 1000

    def test_inexact_factor(self):
        with pytest.raises(folding.FoldingError):
            folding.fold_network(classifier(), 8, FoldingConfig(2))
        folded, batch = folding.fold_network(
            classifier(), 8, FoldingConfig(2, width_rounding=8, round_widths=True))
        assert batch == 4
        assert folded.layers[0].out_channels == 24

    def test_matches_manual_net(self):
        # folding then costing equals costing the hand-built folded net
        folded, batch = folding.fold_network(classifier(), 8, FoldingConfig(4))
        manual = cost_model.NetworkSpec(
            "manual", TensorShape(1, 12, 16, 16), FP16,
            [conv2d(12, 32), conv2d(32, 64, stride=2), global_pool(), dense(64, 10)])
        assert cost_model.network_cost(folded, batch).per_layer == \
            cost_model.network_cost(manual, 2).per_layer


class TestFoldingReport:
    def test_interior_conv(self):
        report = folding.folding_report(single_conv(), 8, FoldingConfig(4, interior=True))
        assert report.flops_ratio == 1.0
        assert report.activation_bytes_ratio == 0.5
        assert report.weight_bytes_ratio == 4.0
        # at batch 8 the weights still outweigh the activation savings
        assert report.intensity_ratio < 1

    def test_interior_conv_large_batch(self):
        report = folding.folding_report(single_conv(), 64, FoldingConfig(4, interior=True))
        assert report.flops_ratio == 1.0
        assert 1 < report.intensity_ratio <= 2

    def test_first_layer_flops_change(self):
        report = folding.folding_report(classifier(), 8, FoldingConfig(4))
        # input channels grow by f=4, output channels by 2
        assert report.layer_flops_ratios[0] == pytest.approx(2.0)
        assert report.layer_flops_ratios[1] == pytest.approx(1.0)
        assert report.layer_flops_ratios[3] == pytest.approx(0.5)

    def test_activation_dominated_limit(self):
        # a 1x1 conv over a large image: weights are negligible next to activations
        net = cost_model.NetworkSpec(
            "pointwise", TensorShape(1, 4, 512, 512), FP16, [conv2d(4, 4, kernel=1)])
        report = folding.folding_report(net, 64, FoldingConfig(4, interior=True))
        assert report.intensity_ratio == pytest.approx(2.0, rel=1e-5)
        assert report.intensity_ratio < 2.0

    def test_identity_report(self):
        report = folding.folding_report(classifier(), 4, FoldingConfig(1))
        assert report.flops_ratio == report.bytes_ratio == report.intensity_ratio == 1.0

    @pytest.mark.parametrize("seed", range(100))
    def test_interior_fold_properties(self, network_factory, seed):
        rng = np.random.default_rng(seed)
        net = network_factory(rng, interior=True)
        batch = 4 * int(rng.integers(1, 9))
        report = folding.folding_report(net, batch, FoldingConfig(4, interior=True))
        original, folded = report.original, report.folded
        assert folded.total_flops == original.total_flops
        assert 2 * folded.activation_bytes == original.activation_bytes
        assert folded.weight_bytes == 4 * original.weight_bytes
        activation = original.activation_bytes
        weight = original.weight_bytes
        assert report.intensity_ratio == pytest.approx(
            (activation + weight) / (activation / 2 + 4 * weight))
        assert report.intensity_ratio <= 2.0
        assert (report.intensity_ratio > 1) == (activation / 2 > 3 * weight)


class TestFoldPairs:
    def test_memory_bound_nets_only(self, v100):
        wide = cost_model.NetworkSpec(
            "wide", TensorShape(1, 512, 14, 14), FP16, [conv2d(512, 512)])
        frame = folding.fold_pairs([classifier(), wide], 64, FoldingConfig(4), v100)
        assert list(frame["name"]) == ["classifier"]
        row = frame.iloc[0]
        assert row["source"] == "modeled"
        assert row["intensity_after"] > row["intensity_before"]
        assert row["utilization_after"] > row["utilization_before"]
        assert row["utilization_after"] <= 1.0

    def test_utilization_matches_roofline(self, v100):
        frame = folding.fold_pairs([classifier()], 64, FoldingConfig(4), v100)
        row = frame.iloc[0]
        bandwidth = v100.mem_bandwidth_bytes_per_sec
        assert row["utilization_before"] == pytest.approx(
            min(1.0, row["intensity_before"] * bandwidth / v100.peak_flops_per_sec))
