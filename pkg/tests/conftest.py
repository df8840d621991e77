import os

import numpy as np
import pytest

import cost_model
import pareto
import roofline
import search_space

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DATA_DIR = os.path.join(ROOT, "data")
TEST_DATA_DIR = os.path.join(ROOT, "tests", "data")
SURVEY_TABLE = os.path.join(DATA_DIR, "survey_v100_fp16.csv")
SURVEY_MARKS = os.path.join(TEST_DATA_DIR, "survey_marks.csv")
TOYCONV = os.path.join(DATA_DIR, "networks", "toyconv.json")
MOBILEBLOCK = os.path.join(DATA_DIR, "networks", "mobileblock.json")


@pytest.fixture
def v100():
    return roofline.PRESETS["v100-fp16"]


@pytest.fixture
def toy_net():
    return cost_model.NetworkSpec(
        "toyconv", cost_model.TensorShape(1, 3, 32, 32), cost_model.FP16,
        [cost_model.conv2d(3, 8, kernel=3)])


def random_network(rng, interior=False, bias=False):
    """
    A random chain of conv2d layers, optionally ending in global pooling and
    a dense layer. With ``interior`` every layer is conv2d/dense with widths
    that survive folding by 4 exactly.
    """
    size = int(rng.choice([4, 8, 16, 32]))
    channels = int(rng.integers(1, 33))
    layers = []
    in_channels = channels
    for _ in range(int(rng.integers(1, 5))):
        out_channels = int(rng.integers(1, 65))
        kernel = int(rng.choice([1, 3]))
        layers.append(cost_model.conv2d(in_channels, out_channels, kernel=kernel, bias=bias))
        in_channels = out_channels
    if rng.random() < 0.5:
        if not interior:
            layers.append(cost_model.global_pool())
            layers.append(cost_model.dense(in_channels, int(rng.integers(1, 101)), bias=bias))
        else:
            layers.append(cost_model.dense(
                in_channels * size * size, int(rng.integers(1, 101)), bias=bias))
    return cost_model.NetworkSpec(
        "random", cost_model.TensorShape(1, channels, size, size), cost_model.FP16, layers)


@pytest.fixture
def network_factory():
    return random_network


def brute_force_frontier(points):
    """
    Ids of the points no other point dominates, by pairwise comparison.
    """
    kept = set()
    for p in points:
        dominated = False
        for q in points:
            if q.x >= p.x and q.y >= p.y and (q.x > p.x or q.y > p.y):
                dominated = True
                break
        if not dominated:
            kept.add(p.id)
    return kept


@pytest.fixture
def frontier_oracle():
    return brute_force_frontier


def random_points(rng, n, grid=None):
    if grid is None:
        xs = rng.normal(size=n)
        ys = rng.normal(size=n)
    else:
        # coarse grids produce ties on one or both axes
        xs = rng.integers(0, grid, size=n)
        ys = rng.integers(0, grid, size=n)
    return [pareto.MetricPoint("p{}".format(j), x, y) for j, (x, y) in enumerate(zip(xs, ys))]


@pytest.fixture
def point_factory():
    return random_points


@pytest.fixture(scope="session")
def default_space():
    return search_space.synthetic_space(seed=0)


@pytest.fixture(scope="session")
def small_space():
    return search_space.synthetic_space(3, (8, 16, 32), seed=1)
