"""
Folding: trade batch size for layer width. A batch of N images becomes N/f
inputs with f images stacked along the channel dimension, and every layer
grows by a factor of sqrt(f) so the network does roughly the same work on
fewer, wider tensors.
"""
import logging
import math

import attr
import pandas as pd

import cost_model
import roofline


class FoldingError(ValueError):
    """
    The requested fold cannot be applied to this network or batch.
    """


def _positive_int(instance, attribute, value):
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise ValueError("{} must be a positive integer, got {!r}".format(attribute.name, value))


@attr.s(frozen=True)
class FoldingConfig(object):
    """
    ``f`` is the fold factor. Widths are scaled by sqrt(f); unless
    ``round_widths`` is set, sqrt(f) must be an integer. With rounding,
    widths go to the nearest multiple of ``width_rounding`` (halves round up).
    An ``interior`` fold treats the network as a block inside a larger folded
    network: its input channels grow by sqrt(f) rather than f and its output
    layer is widened like the rest.
    """
    f = attr.ib(validator=_positive_int)
    width_rounding = attr.ib(default=1, validator=_positive_int)
    round_widths = attr.ib(default=False, validator=attr.validators.instance_of(bool))
    interior = attr.ib(default=False, validator=attr.validators.instance_of(bool))

    @property
    def scale(self):
        return math.sqrt(self.f)

    @property
    def exact(self):
        return math.isqrt(self.f) ** 2 == self.f


@attr.s(frozen=True)
class FoldingReport(object):
    """
    Cost of a network before and after folding. Every ratio is folded over
    original; ``weight_bytes_ratio`` is None for networks without weights.
    """
    original = attr.ib()
    folded = attr.ib()
    flops_ratio = attr.ib()
    bytes_ratio = attr.ib()
    intensity_ratio = attr.ib()
    activation_bytes_ratio = attr.ib()
    weight_bytes_ratio = attr.ib()
    layer_flops_ratios = attr.ib(converter=tuple)


def scale_width(width, cfg):
    if cfg.f == 1:
        return width
    if not cfg.round_widths:
        if not cfg.exact:
            raise FoldingError(
                "sqrt({}) is not an integer; enable width rounding to fold by it".format(cfg.f))
        return width * math.isqrt(cfg.f)
    m = cfg.width_rounding
    return max(m, m * math.floor(width * cfg.scale / m + 0.5))


def _weighted_indexes(net):
    return [j for j, layer in enumerate(net.layers) if layer.kind in cost_model.WEIGHTED_KINDS]


def fold_network(net, batch, cfg):
    """
    Returns the folded network and the folded batch size.
    """
    if batch % cfg.f != 0:
        raise FoldingError("batch {} is not divisible by the fold factor {}".format(
            batch, cfg.f))
    if cfg.f == 1:
        return net, batch
    shapes = cost_model.validate_network(net)
    weighted = _weighted_indexes(net)
    head = None if cfg.interior or not weighted else weighted[-1]

    if cfg.interior:
        channels = scale_width(net.input_shape.channels, cfg)
    else:
        channels = net.input_shape.channels * cfg.f
    input_shape = attr.evolve(net.input_shape, channels=channels)

    layers = []
    for index, layer in enumerate(net.layers):
        before = net.input_shape if index == 0 else shapes[index - 1]
        if layer.kind == cost_model.CONV2D:
            out = layer.out_channels if index == head else scale_width(layer.out_channels, cfg)
            layer = attr.evolve(layer, in_channels=channels, out_channels=out)
            channels = out
        elif layer.kind == cost_model.DEPTHWISE_CONV2D:
            # one filter per channel, so the width follows the input
            layer = attr.evolve(layer, in_channels=channels, out_channels=channels)
        elif layer.kind == cost_model.DENSE:
            out = layer.out_features if index == head else scale_width(layer.out_features, cfg)
            layer = attr.evolve(
                layer, in_features=channels * before.height * before.width, out_features=out)
            channels = out
        layers.append(layer)

    folded = cost_model.NetworkSpec(
        "{}-folded-f{}".format(net.name, cfg.f), input_shape, net.scalar_width, layers)
    cost_model.validate_network(folded)
    logging.debug("Folded {} by {}: input channels {} -> {}".format(
        net.name, cfg.f, net.input_shape.channels, input_shape.channels))
    return folded, batch // cfg.f


def _ratio(after, before):
    if before == 0:
        return None
    return after / before


def folding_report(net, batch, cfg):
    folded_net, folded_batch = fold_network(net, batch, cfg)
    original = cost_model.network_cost(net, batch)
    folded = cost_model.network_cost(folded_net, folded_batch)
    return FoldingReport(
        original=original,
        folded=folded,
        flops_ratio=folded.total_flops / original.total_flops,
        bytes_ratio=folded.total_bytes / original.total_bytes,
        intensity_ratio=(
            cost_model.arithmetic_intensity(folded)
            / cost_model.arithmetic_intensity(original)),
        activation_bytes_ratio=_ratio(folded.activation_bytes, original.activation_bytes),
        weight_bytes_ratio=_ratio(folded.weight_bytes, original.weight_bytes),
        layer_flops_ratios=[
            _ratio(after.flops, before.flops)
            for before, after in zip(original.per_layer, folded.per_layer)])


def fold_pairs(nets, batch, cfg, device):
    """
    Modeled throughput and utilization of every memory-bound network before
    and after folding. Throughput is counted in original images per second.
    Networks already above the device CMR are skipped.
    """
    rows = []
    threshold = roofline.cmr(device)
    for net in nets:
        before = cost_model.network_cost(net, batch)
        intensity = cost_model.arithmetic_intensity(before)
        if intensity >= threshold:
            logging.info("Skipping {}: intensity {:.4g} already reaches CMR {:.4g}".format(
                net.name, intensity, threshold))
            continue
        folded_net, folded_batch = fold_network(net, batch, cfg)
        after = cost_model.network_cost(folded_net, folded_batch)
        tput_before = roofline.predicted_throughput(net, batch, device)
        tput_after = roofline.predicted_throughput(folded_net, folded_batch, device) * cfg.f
        rows.append({
            "name": net.name,
            "f": cfg.f,
            "intensity_before": intensity,
            "intensity_after": cost_model.arithmetic_intensity(after),
            "throughput_before": tput_before,
            "throughput_after": tput_after,
            "utilization_before": roofline.utilization_from_throughput(
                tput_before, before.flops_per_image, device).utilization_fraction,
            "utilization_after": roofline.utilization_from_throughput(
                tput_after, after.flops_per_image / cfg.f, device).utilization_fraction,
            "source": "modeled",
        })
    columns = [
        "name", "f", "intensity_before", "intensity_after", "throughput_before",
        "throughput_after", "utilization_before", "utilization_after", "source"]
    return pd.DataFrame(rows, columns=columns)
