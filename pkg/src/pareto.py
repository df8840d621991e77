"""
Two-dimensional Pareto frontiers with both axes maximised. To minimise a
metric, negate it before building the points.
"""
import logging
import math

import attr
import numpy as np
import pandas as pd

import roofline
import tables

MAXIMIZE = "maximize"

SURVEY_COLUMNS = ("name", "accuracy", "throughput", "tflops_per_sec")

# frontier_membership output columns, paired with the (x, y) record fields
MEMBERSHIP_FRONTIERS = (
    ("on_throughput_accuracy", "throughput", "accuracy"),
    ("on_utilization_accuracy", "utilization", "accuracy"),
    ("on_throughput_utilization", "throughput", "utilization"),
)


class DominationError(ValueError):
    """
    A reference point is not dominated by the frontier, or two frontiers are
    over different metrics.
    """


class DuplicateIdError(ValueError):
    pass


def _finite(instance, attribute, value):
    if not math.isfinite(value):
        raise ValueError("{} must be finite, got {}".format(attribute.name, value))


@attr.s(frozen=True)
class MetricPoint(object):
    id = attr.ib(converter=str)
    x = attr.ib(converter=float, validator=_finite)
    y = attr.ib(converter=float, validator=_finite)


@attr.s(frozen=True)
class ParetoFrontier(object):
    """
    The non-dominated subset of a point set. ``points`` holds the members
    ordered by decreasing x.
    """
    members = attr.ib(converter=frozenset)
    metric_x = attr.ib(default="x")
    metric_y = attr.ib(default="y")
    directions = attr.ib(default=(MAXIMIZE, MAXIMIZE))
    points = attr.ib(default=(), converter=tuple)

    def __len__(self):
        return len(self.members)

    def __contains__(self, id):
        return id in self.members


@attr.s(frozen=True)
class MeasuredModelRecord(object):
    """
    One surveyed model: top-1 accuracy (%), throughput (images/s) and the
    sustained TFLOPs/sec measured while running it.
    """
    name = attr.ib()
    accuracy = attr.ib()
    throughput = attr.ib()
    tflops_per_sec = attr.ib()

    def utilization(self, device=roofline.PRESETS["v100-fp16"]):
        return roofline.utilization_fraction(self.tflops_per_sec * 1e12, device)


def non_dominated_mask(xs, ys):
    """
    Boolean mask of the points not dominated by any other. A point is
    dominated when another has x and y at least as large and is strictly
    larger in one of them; exact duplicates are all kept.
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    n = len(xs)
    order = np.lexsort((-ys, -xs))
    sx = xs[order]
    sy = ys[order]
    new_group = np.r_[True, sx[1:] != sx[:-1]]
    group_start = np.maximum.accumulate(np.where(new_group, np.arange(n), 0))
    # best y among points with strictly larger x
    best_before = np.r_[-np.inf, np.maximum.accumulate(sy)][group_start]
    on = (sy > best_before) & (sy == sy[group_start])
    mask = np.empty(n, dtype=bool)
    mask[order] = on
    return mask


def frontier(points, metric_x="x", metric_y="y"):
    points = list(points)
    if len(points) == 0:
        raise ValueError("cannot build a Pareto frontier from no points")
    seen = set()
    for p in points:
        if p.id in seen:
            raise DuplicateIdError("duplicate point id '{}'".format(p.id))
        seen.add(p.id)
    mask = non_dominated_mask([p.x for p in points], [p.y for p in points])
    kept = [p for p, on in zip(points, mask) if on]
    kept.sort(key=lambda p: (-p.x, -p.y, p.id))
    return ParetoFrontier(
        members=[p.id for p in kept], metric_x=metric_x, metric_y=metric_y, points=kept)


def hypervolume(frontier_points, reference):
    """
    Area dominated by the points and bounded below by ``reference``.
    """
    if isinstance(frontier_points, ParetoFrontier):
        frontier_points = frontier_points.points
    points = list(frontier_points)
    for p in points:
        if p.x < reference.x or p.y < reference.y:
            raise DominationError(
                "reference ({}, {}) is not dominated by point {} ({}, {})".format(
                    reference.x, reference.y, p.id, p.x, p.y))
    if len(points) == 0:
        return 0.0
    xs = np.array([p.x for p in points])
    ys = np.array([p.y for p in points])
    order = np.argsort(-xs, kind="stable")
    xs = xs[order]
    heights = np.maximum.accumulate(ys[order]) - reference.y
    widths = xs - np.r_[xs[1:], reference.x]
    return float(np.sum(widths * heights))


def frontier_membership(records, device=roofline.PRESETS["v100-fp16"]):
    """
    Marks every record's membership of the throughput-accuracy,
    utilization-accuracy and throughput-utilization frontiers, plus ``on_all``
    for models on all three.
    """
    records = list(records)
    names = [r.name for r in records]
    if len(set(names)) != len(names):
        dups = sorted({n for n in names if names.count(n) > 1})
        raise DuplicateIdError("duplicate model name(s): {}".format(", ".join(dups)))
    values = {
        "throughput": np.array([r.throughput for r in records], dtype=float),
        "accuracy": np.array([r.accuracy for r in records], dtype=float),
        "utilization": np.array([r.utilization(device) for r in records], dtype=float),
    }
    result = pd.DataFrame({"name": names})
    for column, x, y in MEMBERSHIP_FRONTIERS:
        result[column] = non_dominated_mask(values[x], values[y])
    result["on_all"] = result[[c for c, _, _ in MEMBERSHIP_FRONTIERS]].all(axis=1)
    logging.info("{} of {} models lie on all three frontiers".format(
        int(result["on_all"].sum()), len(result)))
    return result


def read_survey(path):
    frame = tables.read_table(path, SURVEY_COLUMNS)
    names = frame["name"].str.strip()
    tables.check_column(frame, "name", names, names != "", "must not be empty")
    accuracy = tables.numeric_column(frame, "accuracy")
    tables.check_column(
        frame, "accuracy", accuracy, (accuracy >= 0) & (accuracy <= 100), "must be in [0, 100]")
    throughput = tables.numeric_column(frame, "throughput")
    tables.check_column(frame, "throughput", throughput, throughput > 0, "must be > 0")
    tflops = tables.numeric_column(frame, "tflops_per_sec")
    tables.check_column(frame, "tflops_per_sec", tflops, tflops >= 0, "must be >= 0")
    duplicated = names.duplicated()
    tables.check_column(frame, "name", names, ~duplicated, "must be unique")
    return [
        MeasuredModelRecord(n, a, t, u)
        for n, a, t, u in zip(names, accuracy, throughput, tflops)]
