"""
Roofline model of a single accelerator: compute-to-memory-bandwidth ratio,
attainable FLOPs/sec and utilization.
"""
import json
import logging
import os

import attr

import cost_model

DEVICE_DIR_ENV = "UTILSCOPE_DEVICE_DIR"


def _positive(instance, attribute, value):
    if not value > 0:
        raise ValueError("{} must be > 0, got {}".format(attribute.name, value))


@attr.s(frozen=True)
class DeviceSpec(object):
    name = attr.ib(validator=attr.validators.instance_of(str))
    peak_flops_per_sec = attr.ib(converter=float, validator=_positive)
    mem_bandwidth_bytes_per_sec = attr.ib(converter=float, validator=_positive)


@attr.s(frozen=True)
class UtilizationEstimate(object):
    """
    Achieved FLOPs/sec and its fraction of the device peak. Fractions above 1
    are kept as they are and flagged by ``exceeds_peak``; ``compute_bound`` is
    None when no arithmetic intensity was supplied.
    """
    achieved_flops_per_sec = attr.ib()
    utilization_fraction = attr.ib()
    compute_bound = attr.ib(default=None)

    @property
    def exceeds_peak(self):
        return self.utilization_fraction > 1.0


# The V100 sustains about 100 TFLOPs/sec in FP16 with TensorRT; the bandwidth
# is the value that puts the CMR at exactly 139.
PRESETS = {
    "v100-fp16": DeviceSpec("v100-fp16", 100e12, 100e12 / 139),
}


def cmr(device):
    return device.peak_flops_per_sec / device.mem_bandwidth_bytes_per_sec


def _check_intensity(intensity):
    if intensity < 0:
        raise ValueError("arithmetic intensity must be >= 0, got {}".format(intensity))


def is_compute_bound(intensity, device):
    _check_intensity(intensity)
    return intensity > cmr(device)


def attainable_flops(intensity, device):
    _check_intensity(intensity)
    return min(device.peak_flops_per_sec, intensity * device.mem_bandwidth_bytes_per_sec)


def predicted_throughput(net, batch, device):
    """
    Images/sec the roofline allows for ``net`` at ``batch``. This is an upper
    bound: a kernel meeting the compute-bound condition may still fall short
    of the peak.
    """
    summary = cost_model.network_cost(net, batch)
    intensity = cost_model.arithmetic_intensity(summary)
    return attainable_flops(intensity, device) / summary.flops_per_image


def utilization_fraction(achieved_flops_per_sec, device):
    return achieved_flops_per_sec / device.peak_flops_per_sec


def utilization_from_throughput(throughput, flops_per_image, device, intensity=None):
    if throughput < 0:
        raise ValueError("throughput must be >= 0, got {}".format(throughput))
    if not flops_per_image > 0:
        raise ValueError("flops_per_image must be > 0, got {}".format(flops_per_image))
    achieved = throughput * flops_per_image
    compute_bound = None
    if intensity is not None:
        compute_bound = is_compute_bound(intensity, device)
    return UtilizationEstimate(
        achieved_flops_per_sec=achieved,
        utilization_fraction=utilization_fraction(achieved, device),
        compute_bound=compute_bound)


def device_from_dict(doc, source="<dict>"):
    try:
        return DeviceSpec(
            doc["name"], doc["peak_flops_per_sec"], doc["mem_bandwidth_bytes_per_sec"])
    except KeyError as e:
        raise ValueError("device spec {} is missing field {}".format(source, e))
    except TypeError as e:
        raise ValueError("bad device spec {}: {}".format(source, e))


def _read_device(path):
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ValueError("{} is not valid JSON: {}".format(path, e))
    return device_from_dict(doc, path)


def load_device(name_or_path):
    """
    Resolves a device by bundled preset name, then by ``<name>.json`` in the
    directories listed in UTILSCOPE_DEVICE_DIR, then as a file path.
    """
    if name_or_path in PRESETS:
        return PRESETS[name_or_path]
    for directory in os.environ.get(DEVICE_DIR_ENV, "").split(os.pathsep):
        if not directory:
            continue
        candidate = os.path.join(directory, name_or_path + ".json")
        if os.path.exists(candidate):
            logging.debug("Device {} found in {}".format(name_or_path, directory))
            return _read_device(candidate)
    if os.path.exists(name_or_path):
        return _read_device(name_or_path)
    raise ValueError("unknown device '{}': not a preset ({}), not in ${} and not a file".format(
        name_or_path, ", ".join(sorted(PRESETS)), DEVICE_DIR_ENV))
