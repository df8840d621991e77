"""
Tabular NAS search spaces over per-layer channel counts.

A tabular space stores the accuracy, throughput and cost of every candidate
up front so searches can be simulated by lookup. Spaces are either loaded
from a CSV table, or synthesised: costs from the cost model, throughput from
the roofline, and accuracy from a log-FLOPs curve with per-architecture noise.

The default size space has 5 searchable layers with 8 channel choices each,
8**5 = 32768 candidates. (Published descriptions of this space quote 32767.)
"""
import itertools
import logging
import math
import multiprocessing

import attr
import numpy as np
import pandas as pd
import tqdm

import cost_model
import roofline
import tables
from tables import TableError

DEFAULT_LAYERS = 5
DEFAULT_CHOICES = (8, 16, 24, 32, 40, 48, 56, 64)
TABLE_COLUMNS = ("arch", "accuracy", "throughput", "flops_per_input")

# strides of the searchable layers in the synthetic template; layers past
# the end of this list use stride 1
TEMPLATE_STRIDES = (1, 1, 2, 1, 2)


@attr.s(frozen=True)
class ArchId(object):
    channels = attr.ib(converter=tuple)

    def __str__(self):
        return ":".join(str(c) for c in self.channels)

    def __len__(self):
        return len(self.channels)

    @classmethod
    def parse(cls, text):
        try:
            channels = tuple(int(part) for part in text.strip().split(":"))
        except ValueError:
            raise ValueError("bad architecture id '{}'".format(text))
        if any(c < 1 for c in channels):
            raise ValueError("bad architecture id '{}': channels must be >= 1".format(text))
        return cls(channels)


@attr.s(frozen=True)
class Candidate(object):
    arch = attr.ib()
    accuracy = attr.ib(converter=float)
    throughput = attr.ib(converter=float)
    flops_per_input = attr.ib(converter=float)
    utilization_fraction = attr.ib(converter=float)

    @accuracy.validator
    def _check_accuracy(self, attribute, value):
        if not 0 <= value <= 100:
            raise ValueError("accuracy of {} must be in [0, 100], got {}".format(self.arch, value))

    @throughput.validator
    def _check_throughput(self, attribute, value):
        if not value > 0:
            raise ValueError("throughput of {} must be > 0, got {}".format(self.arch, value))

    @flops_per_input.validator
    def _check_flops(self, attribute, value):
        if not value > 0:
            raise ValueError("flops_per_input of {} must be > 0, got {}".format(self.arch, value))


@attr.s(frozen=True)
class TabularSpace(object):
    layer_count = attr.ib()
    channel_choices = attr.ib(converter=tuple)
    candidates = attr.ib()
    device = attr.ib()

    def __attrs_post_init__(self):
        choices = set(self.channel_choices)
        for arch in self.candidates:
            if len(arch) != self.layer_count or not choices.issuperset(arch.channels):
                raise ValueError("{} is not in the {}-layer space over {}".format(
                    arch, self.layer_count, list(self.channel_choices)))

    def __len__(self):
        return len(self.candidates)

    def archs(self):
        return list(self.candidates)

    def frame(self):
        rows = [
            (str(c.arch), c.accuracy, c.throughput, c.flops_per_input, c.utilization_fraction)
            for c in self.candidates.values()]
        return pd.DataFrame(rows, columns=list(TABLE_COLUMNS) + ["utilization"])


@attr.s(frozen=True)
class OracleConstants(object):
    """
    Knobs of the synthetic accuracy/throughput oracle. Accuracy (%) is
    a + b * ln(FLOPs per input) plus N(0, sigma) noise; throughput is
    ``efficiency`` times the roofline bound at ``batch``.
    """
    a = attr.ib(default=51.0)
    b = attr.ib(default=2.25)
    sigma = attr.ib(default=1.0)
    efficiency = attr.ib(default=0.6)
    batch = attr.ib(default=256)
    classes = attr.ib(default=10)


def enumerate_size_space(layer_count, channel_choices):
    channel_choices = list(channel_choices)
    if layer_count < 1:
        raise ValueError("layer_count must be >= 1, got {}".format(layer_count))
    if len(channel_choices) == 0:
        raise ValueError("channel_choices must not be empty")
    if len(set(channel_choices)) != len(channel_choices):
        raise ValueError("channel_choices contains duplicates: {}".format(channel_choices))
    return [ArchId(c) for c in itertools.product(channel_choices, repeat=layer_count)]


def network_template(arch, classes=10):
    """
    The CIFAR-sized network a synthetic candidate stands for: one 3x3
    convolution per searchable layer, then global pooling and a linear
    classifier.
    """
    layers = []
    in_channels = 3
    for index, out_channels in enumerate(arch.channels):
        stride = TEMPLATE_STRIDES[index] if index < len(TEMPLATE_STRIDES) else 1
        layers.append(cost_model.conv2d(
            in_channels, out_channels, kernel=3, stride=stride, fused_activation=True))
        in_channels = out_channels
    layers.append(cost_model.global_pool())
    layers.append(cost_model.dense(in_channels, classes))
    return cost_model.NetworkSpec(
        "net-{}".format(arch), cost_model.TensorShape(1, 3, 32, 32), cost_model.FP16, layers)


def synthetic_oracle(arch, seed, device, constants=OracleConstants()):
    summary = cost_model.network_cost(network_template(arch, constants.classes), constants.batch)
    flops = summary.flops_per_image
    bound = roofline.attainable_flops(cost_model.arithmetic_intensity(summary), device)
    throughput = constants.efficiency * bound / flops
    # noise is keyed by the architecture, not drawn from a shared stream
    rng = np.random.default_rng([seed] + list(arch.channels))
    accuracy = constants.a + constants.b * math.log(flops) + rng.normal(0, constants.sigma)
    accuracy = min(100.0, max(0.0, accuracy))
    estimate = roofline.utilization_from_throughput(throughput, flops, device)
    return Candidate(arch, accuracy, throughput, flops, estimate.utilization_fraction)


def _oracle_worker(args):
    return synthetic_oracle(*args)


def synthetic_space(
        layer_count=DEFAULT_LAYERS, channel_choices=DEFAULT_CHOICES, seed=0, device=None,
        constants=OracleConstants(), workers=1, show_progress=False):
    device = device or roofline.PRESETS["v100-fp16"]
    archs = enumerate_size_space(layer_count, channel_choices)
    work = ((arch, seed, device, constants) for arch in archs)
    progress = tqdm.tqdm(total=len(archs), disable=not show_progress)
    candidates = {}
    if workers > 1:
        logging.info("Building synthetic space using {} processes".format(workers))
        with multiprocessing.Pool(processes=workers) as pool:
            for candidate in pool.imap(_oracle_worker, work, chunksize=256):
                candidates[candidate.arch] = candidate
                progress.update()
    else:
        logging.info("Building synthetic space using a single process")
        for candidate in map(_oracle_worker, work):
            candidates[candidate.arch] = candidate
            progress.update()
    progress.close()
    return TabularSpace(layer_count, channel_choices, candidates, device)


def load_table(path, device=None):
    """
    Reads a benchmark table. The layer count and channel choices are taken
    from the architectures present; utilization is recomputed for ``device``.
    """
    device = device or roofline.PRESETS["v100-fp16"]
    frame = tables.read_table(path, TABLE_COLUMNS)
    if len(frame) == 0:
        raise TableError("{} has no candidates".format(path))
    archs = []
    for line, text in frame["arch"].items():
        try:
            archs.append(ArchId.parse(text))
        except ValueError as e:
            raise TableError(str(e), line, "arch")
    layer_count = len(archs[0])
    seen = set()
    for line, arch in zip(frame.index, archs):
        if len(arch) != layer_count:
            raise TableError("expected {} layers, got {}".format(layer_count, len(arch)),
                             line, "arch")
        if arch in seen:
            raise TableError("duplicate architecture {}".format(arch), line, "arch")
        seen.add(arch)
    accuracy = tables.numeric_column(frame, "accuracy")
    tables.check_column(
        frame, "accuracy", accuracy, (accuracy >= 0) & (accuracy <= 100), "must be in [0, 100]")
    throughput = tables.numeric_column(frame, "throughput")
    tables.check_column(frame, "throughput", throughput, throughput > 0, "must be > 0")
    flops = tables.numeric_column(frame, "flops_per_input")
    tables.check_column(frame, "flops_per_input", flops, flops > 0, "must be > 0")

    candidates = {}
    for arch, acc, tput, f in zip(archs, accuracy, throughput, flops):
        estimate = roofline.utilization_from_throughput(tput, f, device)
        candidates[arch] = Candidate(arch, acc, tput, f, estimate.utilization_fraction)
    choices = sorted({c for arch in archs for c in arch.channels})
    logging.info("Loaded {} candidates over {} layers from {}".format(
        len(candidates), layer_count, path))
    return TabularSpace(layer_count, choices, candidates, device)


def save_table(space, out, manifest=None):
    frame = space.frame()[list(TABLE_COLUMNS)]
    tables.write_table(frame, out, manifest, float_format=None)
