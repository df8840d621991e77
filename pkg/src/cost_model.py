"""
FLOP and memory-traffic accounting for CNN inference.

A network is an ordered list of layers threaded through a tensor shape. For
every layer we count the FLOPs it performs (one multiply-accumulate counts as
2 FLOPs) and the bytes it moves to and from memory, split into input
activations, weights and output activations. Activations are always written
out by one layer and re-read by the next; the only free operations are
activations fused into the preceding layer.
"""
import functools
import json
import logging

import attr

CONV2D = "conv2d"
DEPTHWISE_CONV2D = "depthwise_conv2d"
DENSE = "dense"
GLOBAL_POOL = "global_pool"
ELEMENTWISE = "elementwise"
LAYER_KINDS = (CONV2D, DEPTHWISE_CONV2D, DENSE, GLOBAL_POOL, ELEMENTWISE)
WEIGHTED_KINDS = (CONV2D, DEPTHWISE_CONV2D, DENSE)

SAME = "same"
VALID = "valid"

# keys allowed in a layer object of the network spec file
LAYER_KEYS = (
    "kind", "in_channels", "out_channels", "kernel_h", "kernel_w", "stride",
    "padding", "in_features", "out_features", "bias", "fused_activation")


class ShapeError(ValueError):
    """
    A layer cannot consume the tensor it has been given.
    """


class NetworkSpecError(ValueError):
    """
    A network spec is malformed: unknown fields, missing parameters or no layers.
    """


class UndefinedIntensityError(ValueError):
    """
    Arithmetic intensity was requested for something that moves no bytes.
    """


def _at_least_one(instance, attribute, value):
    if isinstance(value, bool) or not isinstance(value, int):
        raise TypeError("{} must be an integer, got {!r}".format(attribute.name, value))
    if value < 1:
        raise ValueError("{} must be >= 1, got {}".format(attribute.name, value))


def _optional_at_least_one(instance, attribute, value):
    if value is not None:
        _at_least_one(instance, attribute, value)


def _non_negative(instance, attribute, value):
    if value < 0:
        raise ValueError("{} must be >= 0, got {}".format(attribute.name, value))


@attr.s(frozen=True)
class TensorShape(object):
    """
    An NCHW activation tensor.
    """
    batch = attr.ib(validator=_at_least_one)
    channels = attr.ib(validator=_at_least_one)
    height = attr.ib(validator=_at_least_one)
    width = attr.ib(validator=_at_least_one)

    @property
    def per_image(self):
        return self.channels * self.height * self.width

    @property
    def elements(self):
        return self.batch * self.per_image

    def with_batch(self, batch):
        return attr.evolve(self, batch=batch)


@attr.s(frozen=True)
class ScalarWidth(object):
    bytes_per_scalar = attr.ib(validator=attr.validators.in_([1, 2, 4, 8]))


FP16 = ScalarWidth(2)
FP32 = ScalarWidth(4)


@attr.s(frozen=True)
class LayerSpec(object):
    """
    One layer of a network. Which parameters are meaningful depends on the kind:
    conv2d and depthwise_conv2d use the channel, kernel, stride and padding
    fields, dense uses the feature fields, and global_pool / elementwise take
    their width from whatever they are fed.
    """
    kind = attr.ib(validator=attr.validators.in_(LAYER_KINDS))
    in_channels = attr.ib(default=None, validator=_optional_at_least_one)
    out_channels = attr.ib(default=None, validator=_optional_at_least_one)
    kernel_h = attr.ib(default=None, validator=_optional_at_least_one)
    kernel_w = attr.ib(default=None, validator=_optional_at_least_one)
    stride = attr.ib(default=1, validator=_at_least_one)
    padding = attr.ib(default=SAME, validator=attr.validators.in_([SAME, VALID]))
    in_features = attr.ib(default=None, validator=_optional_at_least_one)
    out_features = attr.ib(default=None, validator=_optional_at_least_one)
    bias = attr.ib(default=False, validator=attr.validators.instance_of(bool))
    fused_activation = attr.ib(default=False, validator=attr.validators.instance_of(bool))

    def __attrs_post_init__(self):
        if self.kind in (CONV2D, DEPTHWISE_CONV2D):
            required = ("in_channels", "out_channels", "kernel_h", "kernel_w")
        elif self.kind == DENSE:
            required = ("in_features", "out_features")
        else:
            required = ()
        missing = [name for name in required if getattr(self, name) is None]
        if missing:
            raise NetworkSpecError("{} layer is missing {}".format(
                self.kind, ", ".join(missing)))
        if self.kind == DEPTHWISE_CONV2D and self.in_channels != self.out_channels:
            raise NetworkSpecError(
                "depthwise_conv2d needs in_channels == out_channels, got {} and {}".format(
                    self.in_channels, self.out_channels))

    @property
    def declared_inputs(self):
        """
        The channel (conv) or feature (dense) count this layer expects, or
        None for layers that adapt to their input.
        """
        if self.kind == DENSE:
            return self.in_features
        return self.in_channels

    @property
    def declared_outputs(self):
        if self.kind == DENSE:
            return self.out_features
        return self.out_channels


def conv2d(in_channels, out_channels, kernel=3, stride=1, padding=SAME,
           bias=False, fused_activation=False):
    return LayerSpec(
        CONV2D, in_channels=in_channels, out_channels=out_channels,
        kernel_h=kernel, kernel_w=kernel, stride=stride, padding=padding,
        bias=bias, fused_activation=fused_activation)


def depthwise_conv2d(channels, kernel=3, stride=1, padding=SAME,
                     bias=False, fused_activation=False):
    return LayerSpec(
        DEPTHWISE_CONV2D, in_channels=channels, out_channels=channels,
        kernel_h=kernel, kernel_w=kernel, stride=stride, padding=padding,
        bias=bias, fused_activation=fused_activation)


def dense(in_features, out_features, bias=False, fused_activation=False):
    return LayerSpec(
        DENSE, in_features=in_features, out_features=out_features,
        bias=bias, fused_activation=fused_activation)


def global_pool():
    return LayerSpec(GLOBAL_POOL)


def elementwise(fused_activation=False):
    return LayerSpec(ELEMENTWISE, fused_activation=fused_activation)


def _single_image(instance, attribute, value):
    if value.batch != 1:
        raise NetworkSpecError("input_shape carries no batch; expected N=1, got {}".format(
            value.batch))


@attr.s(frozen=True)
class NetworkSpec(object):
    name = attr.ib(validator=attr.validators.instance_of(str))
    input_shape = attr.ib(validator=[attr.validators.instance_of(TensorShape), _single_image])
    scalar_width = attr.ib(default=FP16, validator=attr.validators.instance_of(ScalarWidth))
    layers = attr.ib(default=(), converter=tuple)


@attr.s(frozen=True)
class LayerCost(object):
    flops = attr.ib(validator=_non_negative)
    input_bytes = attr.ib(validator=_non_negative)
    weight_bytes = attr.ib(validator=_non_negative)
    output_bytes = attr.ib(validator=_non_negative)

    @property
    def total_bytes(self):
        return self.input_bytes + self.weight_bytes + self.output_bytes

    @property
    def activation_bytes(self):
        return self.input_bytes + self.output_bytes


@attr.s(frozen=True)
class CostSummary(object):
    """
    Per-layer costs of a network at one batch size, with the totals the
    aggregate arithmetic intensity is built from. ``aggregate_intensity`` is
    None when the network moves no bytes at all.
    """
    per_layer = attr.ib(converter=tuple)
    batch = attr.ib()
    total_flops = attr.ib()
    input_bytes = attr.ib()
    weight_bytes = attr.ib()
    output_bytes = attr.ib()
    aggregate_intensity = attr.ib()
    flops_per_image = attr.ib()

    @property
    def total_bytes(self):
        return self.input_bytes + self.weight_bytes + self.output_bytes

    @property
    def activation_bytes(self):
        return self.input_bytes + self.output_bytes


@attr.s(frozen=True)
class BatchSweep(object):
    points = attr.ib(converter=tuple)
    asymptote = attr.ib()


def _conv_extent(size, kernel, stride, padding):
    if padding == SAME:
        return -(-size // stride)
    if size < kernel:
        return 0
    return (size - kernel) // stride + 1


def _where(index):
    return "" if index is None else "layer {}: ".format(index)


def output_shape(layer, input, index=None):
    """
    Returns the TensorShape that ``layer`` produces from ``input``. ``index``
    is only used to name the layer in error messages.
    """
    if layer.kind in (CONV2D, DEPTHWISE_CONV2D):
        if input.channels != layer.in_channels:
            raise ShapeError("{}{} expects {} input channels, got {}".format(
                _where(index), layer.kind, layer.in_channels, input.channels))
        height = _conv_extent(input.height, layer.kernel_h, layer.stride, layer.padding)
        width = _conv_extent(input.width, layer.kernel_w, layer.stride, layer.padding)
        if height < 1 or width < 1:
            raise ShapeError("{}{}x{} valid convolution does not fit a {}x{} input".format(
                _where(index), layer.kernel_h, layer.kernel_w, input.height, input.width))
        return TensorShape(input.batch, layer.out_channels, height, width)
    if layer.kind == DENSE:
        if input.per_image != layer.in_features:
            raise ShapeError("{}dense expects {} input features, got {} ({}x{}x{})".format(
                _where(index), layer.in_features, input.per_image,
                input.channels, input.height, input.width))
        return TensorShape(input.batch, layer.out_features, 1, 1)
    if layer.kind == GLOBAL_POOL:
        return TensorShape(input.batch, input.channels, 1, 1)
    return input


@functools.lru_cache(maxsize=4096)
def layer_cost(layer, input, width):
    """
    Returns the LayerCost of running ``layer`` over ``input`` with scalars
    of the given ScalarWidth.
    """
    out = output_shape(layer, input)
    scalar = width.bytes_per_scalar
    if layer.kind == ELEMENTWISE and layer.fused_activation:
        return LayerCost(0, 0, 0, 0)
    weights = 0
    if layer.kind == CONV2D:
        macs = out.elements * layer.in_channels * layer.kernel_h * layer.kernel_w
        weights = layer.out_channels * layer.in_channels * layer.kernel_h * layer.kernel_w
    elif layer.kind == DEPTHWISE_CONV2D:
        macs = out.elements * layer.kernel_h * layer.kernel_w
        weights = layer.out_channels * layer.kernel_h * layer.kernel_w
    elif layer.kind == DENSE:
        macs = out.elements * layer.in_features
        weights = layer.in_features * layer.out_features
    flops = 2 * macs if layer.kind in WEIGHTED_KINDS else input.elements
    if layer.bias and layer.kind in WEIGHTED_KINDS:
        flops += out.elements
        weights += layer.declared_outputs
    return LayerCost(
        flops=flops,
        input_bytes=input.elements * scalar,
        weight_bytes=weights * scalar,
        output_bytes=out.elements * scalar)


def arithmetic_intensity(cost):
    """
    FLOPs per byte of a LayerCost or CostSummary.
    """
    flops = cost.total_flops if isinstance(cost, CostSummary) else cost.flops
    if cost.total_bytes <= 0:
        raise UndefinedIntensityError(
            "arithmetic intensity is undefined for zero bytes moved ({} FLOPs)".format(flops))
    return flops / cost.total_bytes


def network_cost(net, batch):
    """
    Threads a batch of ``batch`` images through ``net`` and returns the
    CostSummary.
    """
    if isinstance(batch, bool) or not isinstance(batch, int) or batch < 1:
        raise ValueError("batch must be a positive integer, got {!r}".format(batch))
    if len(net.layers) == 0:
        raise NetworkSpecError("empty network")
    shape = net.input_shape.with_batch(batch)
    per_layer = []
    for index, layer in enumerate(net.layers):
        out = output_shape(layer, shape, index=index)
        per_layer.append(layer_cost(layer, shape, net.scalar_width))
        shape = out
    total_flops = sum(c.flops for c in per_layer)
    input_bytes = sum(c.input_bytes for c in per_layer)
    weight_bytes = sum(c.weight_bytes for c in per_layer)
    output_bytes = sum(c.output_bytes for c in per_layer)
    total_bytes = input_bytes + weight_bytes + output_bytes
    summary = CostSummary(
        per_layer=per_layer,
        batch=batch,
        total_flops=total_flops,
        input_bytes=input_bytes,
        weight_bytes=weight_bytes,
        output_bytes=output_bytes,
        aggregate_intensity=total_flops / total_bytes if total_bytes > 0 else None,
        flops_per_image=total_flops / batch)
    logging.debug("{} at batch {}: {} FLOPs, {} bytes".format(
        net.name, batch, total_flops, total_bytes))
    return summary


def validate_network(net):
    """
    Checks the shape chain of ``net`` for a single image and returns the
    shape after every layer.
    """
    if len(net.layers) == 0:
        raise NetworkSpecError("empty network")
    shapes = []
    shape = net.input_shape
    for index, layer in enumerate(net.layers):
        shape = output_shape(layer, shape, index=index)
        shapes.append(shape)
    return shapes


def batch_sweep(net, batches):
    """
    Aggregate intensity of ``net`` at each batch size, plus the value it tends
    to as the batch grows and weight traffic becomes negligible.
    """
    batches = list(batches)
    if len(batches) == 0:
        raise ValueError("batch sweep needs at least one batch size")
    points = []
    for batch in batches:
        points.append((batch, arithmetic_intensity(network_cost(net, batch))))
    single = network_cost(net, 1)
    if single.activation_bytes == 0:
        raise UndefinedIntensityError(
            "{} moves no activation bytes, the large-batch limit is undefined".format(net.name))
    return BatchSweep(points=points, asymptote=single.total_flops / single.activation_bytes)


def network_from_dict(doc):
    if not isinstance(doc, dict):
        raise NetworkSpecError("network spec must be a JSON object, got {}".format(
            type(doc).__name__))
    try:
        name = doc["name"]
        scalar_bytes = doc["scalar_bytes"]
        dims = doc["input"]
        layer_docs = doc["layers"]
    except KeyError as e:
        raise NetworkSpecError("network spec is missing field {}".format(e))
    if not isinstance(layer_docs, list):
        raise NetworkSpecError("layers of {} must be a list, got {}".format(
            name, type(layer_docs).__name__))
    try:
        input_shape = TensorShape(1, dims["c"], dims["h"], dims["w"])
        width = ScalarWidth(scalar_bytes)
    except (KeyError, TypeError, ValueError) as e:
        raise NetworkSpecError("bad input or scalar_bytes in {}: {}".format(name, e))
    layers = []
    for index, layer_doc in enumerate(layer_docs):
        if not isinstance(layer_doc, dict):
            raise NetworkSpecError("layer {}: must be a JSON object, got {}".format(
                index, type(layer_doc).__name__))
        unknown = sorted(set(layer_doc) - set(LAYER_KEYS))
        if unknown:
            raise NetworkSpecError("layer {}: unknown field(s) {}".format(
                index, ", ".join(unknown)))
        try:
            layers.append(LayerSpec(**layer_doc))
        except (TypeError, ValueError) as e:
            raise NetworkSpecError("layer {}: {}".format(index, e))
    return NetworkSpec(name, input_shape, width, layers)


def network_to_dict(net):
    layers = []
    defaults = LayerSpec(GLOBAL_POOL)
    for layer in net.layers:
        doc = {"kind": layer.kind}
        for key in LAYER_KEYS[1:]:
            value = getattr(layer, key)
            if value is not None and value != getattr(defaults, key):
                doc[key] = value
        layers.append(doc)
    return {
        "name": net.name,
        "scalar_bytes": net.scalar_width.bytes_per_scalar,
        "input": {
            "c": net.input_shape.channels,
            "h": net.input_shape.height,
            "w": net.input_shape.width},
        "layers": layers,
    }


def load_network(path):
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise NetworkSpecError("{} is not valid JSON: {}".format(path, e))
    net = network_from_dict(doc)
    logging.info("Loaded network {} ({} layers) from {}".format(
        net.name, len(net.layers), path))
    return net


def save_network(net, path):
    with open(path, "w") as f:
        json.dump(network_to_dict(net), f, indent=2)
        f.write("\n")
