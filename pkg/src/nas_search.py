"""
Simulated sample-based neural architecture search over a tabular space.

Evaluations are lookups in the table; their cost is charged to a simulated
clock instead of being spent. Two kinds of search are provided: a budgeted
sample-evaluate loop with a random or REINFORCE sampler, and approximate
filtering, which evaluates a cheap proxy on every candidate first and only
spends accuracy evaluations on the throughput-proxy Pareto frontier.
"""
import logging
import multiprocessing

import attr
import numpy as np
import pandas as pd
import tqdm

import pareto
import search_space
import tables

RANDOM = "random"
REINFORCE = "reinforce"
SAMPLERS = (RANDOM, REINFORCE)

UTILIZATION = "utilization"
FLOPS = "flops"
PROXIES = (UTILIZATION, FLOPS)

TRACE_COLUMNS = (
    "step", "sim_time", "arch", "accuracy", "throughput", "rank", "on_frontier")
FRONTIER_COLUMNS = ("arch", "throughput", "accuracy")

# draws allowed to find an architecture present in a partial table
MAX_REDRAWS = 10000


class BudgetError(ValueError):
    """
    The time budget cannot cover the minimum work of a search.
    """


def _positive(instance, attribute, value):
    if not value > 0:
        raise ValueError("{} must be > 0, got {}".format(attribute.name, value))


@attr.s(frozen=True)
class SearchConfig(object):
    """
    Simulated costs are in abstract time units. By default an accuracy
    evaluation costs 100 times a throughput measurement, and the two run
    side by side when ``parallel_evals`` is set.
    """
    time_budget = attr.ib(default=110000, validator=_positive)
    eval_time_acc = attr.ib(default=100, validator=_positive)
    eval_time_tput = attr.ib(default=1, validator=_positive)
    goal_tput = attr.ib(default=175000, validator=_positive)
    weight_w = attr.ib(default=0.07)
    sampler = attr.ib(default=RANDOM, validator=attr.validators.in_(SAMPLERS))
    seed = attr.ib(default=0)
    parallel_evals = attr.ib(default=True)
    learning_rate = attr.ib(default=0.01, validator=_positive)
    baseline_decay = attr.ib(default=0.9)
    workers = attr.ib(default=1)

    def __attrs_post_init__(self):
        if self.eval_time_acc < self.eval_time_tput:
            raise ValueError("eval_time_acc ({}) must be >= eval_time_tput ({})".format(
                self.eval_time_acc, self.eval_time_tput))
        if not 0 <= self.baseline_decay < 1:
            raise ValueError("baseline_decay must be in [0, 1), got {}".format(
                self.baseline_decay))
        if self.workers < 1:
            raise ValueError("workers must be >= 1, got {}".format(self.workers))

    @property
    def step_time(self):
        if self.parallel_evals:
            return max(self.eval_time_acc, self.eval_time_tput)
        return self.eval_time_acc + self.eval_time_tput


@attr.s(frozen=True)
class TraceRow(object):
    step = attr.ib()
    sim_time = attr.ib()
    arch = attr.ib()
    accuracy = attr.ib()
    throughput = attr.ib()
    rank_value = attr.ib()
    on_frontier = attr.ib()


@attr.s(frozen=True)
class SearchTrace(object):
    rows = attr.ib(converter=tuple)
    frontier = attr.ib()
    n_acc_evals = attr.ib()
    n_tput_evals = attr.ib()
    exhausted = attr.ib(default=False)
    method = attr.ib(default=RANDOM)

    def frame(self):
        return pd.DataFrame(
            [(r.step, r.sim_time, str(r.arch), r.accuracy, r.throughput, r.rank_value,
              r.on_frontier) for r in self.rows],
            columns=list(TRACE_COLUMNS))


@attr.s(frozen=True)
class FilterResult(object):
    proxy = attr.ib()
    proxy_frontier = attr.ib()
    evaluated = attr.ib(converter=tuple)
    final_frontier = attr.ib()
    time_spent = attr.ib()
    n_acc_evals = attr.ib()
    n_tput_evals = attr.ib()
    trace = attr.ib()


@attr.s(frozen=True)
class FrontierComparison(object):
    """
    ``shared`` holds the ids on both frontiers, ``only_a`` and ``only_b`` the
    ids found by one side alone.
    """
    hypervolume_a = attr.ib()
    hypervolume_b = attr.ib()
    ratio = attr.ib()
    max_gap = attr.ib()
    shared = attr.ib(default=frozenset(), converter=frozenset)
    only_a = attr.ib(default=frozenset(), converter=frozenset)
    only_b = attr.ib(default=frozenset(), converter=frozenset)


def rank(accuracy, throughput, goal, w):
    """
    Reward trading accuracy (%) against throughput relative to a goal;
    ``w`` sets how much throughput counts.
    """
    if not 0 <= accuracy <= 100:
        raise ValueError("accuracy must be in [0, 100], got {}".format(accuracy))
    if not throughput > 0:
        raise ValueError("throughput must be > 0, got {}".format(throughput))
    if not goal > 0:
        raise ValueError("goal throughput must be > 0, got {}".format(goal))
    return (accuracy / 100) * (throughput / goal) ** w


class RunningFrontier(object):
    """
    Throughput-accuracy frontier of the samples seen so far.
    """
    def __init__(self):
        self.members = {}

    def add(self, point):
        """
        Adds ``point`` and returns whether it is on the frontier afterwards.
        Members it dominates are dropped.
        """
        if point.id in self.members:
            return True
        for q in self.members.values():
            if q.x >= point.x and q.y >= point.y and (q.x > point.x or q.y > point.y):
                return False
        self.members = {
            id: q for id, q in self.members.items()
            if not (point.x >= q.x and point.y >= q.y and (point.x > q.x or point.y > q.y))}
        self.members[point.id] = point
        return True

    def to_frontier(self):
        return pareto.frontier(self.members.values(), "throughput", "accuracy")


class RandomSampler(object):
    """
    Uniform sampling without replacement.
    """
    def __init__(self, space, seed):
        self.archs = space.archs()
        rng = np.random.default_rng(seed)
        self.order = rng.permutation(len(self.archs))
        self.position = 0

    def sample(self):
        if self.position >= len(self.order):
            return None
        arch = self.archs[self.order[self.position]]
        self.position += 1
        return arch

    def update(self, arch, reward):
        pass


class ReinforceSampler(object):
    """
    Policy-gradient sampler with one independent categorical distribution
    over channel choices per layer. Samples are drawn with replacement.
    The baseline is an exponential moving average of past rewards.
    """
    def __init__(self, space, seed, learning_rate=0.01, baseline_decay=0.9):
        self.space = space
        self.choices = list(space.channel_choices)
        self.rng = np.random.default_rng(seed)
        self.learning_rate = learning_rate
        self.baseline_decay = baseline_decay
        self.logits = np.zeros((space.layer_count, len(self.choices)))
        self.baseline = 0.0

    def probabilities(self):
        shifted = self.logits - self.logits.max(axis=1, keepdims=True)
        weights = np.exp(shifted)
        return weights / weights.sum(axis=1, keepdims=True)

    def log_probability(self, arch):
        probs = self.probabilities()
        indexes = [self.choices.index(c) for c in arch.channels]
        return float(np.sum(np.log(probs[np.arange(len(indexes)), indexes])))

    def sample(self):
        probs = self.probabilities()
        for _ in range(MAX_REDRAWS):
            indexes = [self.rng.choice(len(self.choices), p=p) for p in probs]
            arch = search_space.ArchId(self.choices[i] for i in indexes)
            if arch in self.space.candidates:
                return arch
        raise ValueError("no architecture in the table after {} draws".format(MAX_REDRAWS))

    def update(self, arch, reward):
        indexes = [self.choices.index(c) for c in arch.channels]
        advantage = reward - self.baseline
        probs = self.probabilities()
        onehot = np.zeros_like(probs)
        onehot[np.arange(len(indexes)), indexes] = 1.0
        self.logits += self.learning_rate * advantage * (onehot - probs)
        self.baseline = self.baseline_decay * self.baseline + (1 - self.baseline_decay) * reward


def random_sampler(space, seed):
    return RandomSampler(space, seed)


def reinforce_sampler(space, seed, learning_rate=0.01, baseline_decay=0.9):
    return ReinforceSampler(space, seed, learning_rate, baseline_decay)


def make_sampler(space, cfg):
    if cfg.sampler == REINFORCE:
        return reinforce_sampler(space, cfg.seed, cfg.learning_rate, cfg.baseline_decay)
    return random_sampler(space, cfg.seed)


def run_search(space, cfg, sampler=None):
    """
    Repeatedly samples an architecture, evaluates its accuracy and
    throughput, scores it and feeds the score back to the sampler, until the
    next evaluation would overrun the time budget or the sampler runs dry.
    """
    if len(space) == 0:
        raise ValueError("cannot search an empty space")
    step = cfg.step_time
    if cfg.time_budget < step:
        raise BudgetError("a budget of {} cannot cover one evaluation ({})".format(
            cfg.time_budget, step))
    sampler = sampler or make_sampler(space, cfg)
    running = RunningFrontier()
    rows = []
    exhausted = False
    sim_time = 0
    while sim_time + step <= cfg.time_budget:
        arch = sampler.sample()
        if arch is None:
            exhausted = True
            logging.info("Search space exhausted after {} samples".format(len(rows)))
            break
        candidate = space.candidates[arch]
        sim_time += step
        reward = rank(candidate.accuracy, candidate.throughput, cfg.goal_tput, cfg.weight_w)
        on = running.add(pareto.MetricPoint(str(arch), candidate.throughput, candidate.accuracy))
        sampler.update(arch, reward)
        rows.append(TraceRow(
            len(rows), sim_time, arch, candidate.accuracy, candidate.throughput, reward, on))
    logging.info("{} search: {} evaluations, {} on the final frontier".format(
        cfg.sampler, len(rows), len(running.members)))
    return SearchTrace(
        rows=rows, frontier=running.to_frontier(), n_acc_evals=len(rows),
        n_tput_evals=len(rows), exhausted=exhausted, method=cfg.sampler)


def _proxy_value(candidate, proxy):
    if proxy == UTILIZATION:
        return candidate.utilization_fraction
    return candidate.flops_per_input


def _measure(args):
    candidate, proxy = args
    return candidate.throughput, _proxy_value(candidate, proxy)


def approximate_filter_search(space, cfg, proxy=UTILIZATION, show_progress=False):
    """
    Phase 1 measures throughput and the proxy metric on every candidate and
    keeps their throughput-proxy Pareto frontier. Phase 2 evaluates accuracy
    on that frontier in decreasing order of the proxy until the budget runs
    out.
    """
    if proxy not in PROXIES:
        raise ValueError("unknown proxy '{}', choose from {}".format(proxy, ", ".join(PROXIES)))
    if len(space) == 0:
        raise ValueError("cannot search an empty space")
    n = len(space)
    phase_one = n * cfg.eval_time_tput
    if phase_one + cfg.eval_time_acc > cfg.time_budget:
        raise BudgetError(
            "budget {} is too small: measuring {} candidates and one accuracy evaluation "
            "needs at least {}".format(cfg.time_budget, n, phase_one + cfg.eval_time_acc))

    candidates = list(space.candidates.values())
    work = ((c, proxy) for c in candidates)
    progress = tqdm.tqdm(total=n, disable=not show_progress)
    measured = []
    if cfg.workers > 1:
        logging.info("Measuring proxies using {} processes".format(cfg.workers))
        with multiprocessing.Pool(processes=cfg.workers) as pool:
            for result in pool.imap(_measure, work, chunksize=512):
                measured.append(result)
                progress.update()
    else:
        for result in map(_measure, work):
            measured.append(result)
            progress.update()
    progress.close()

    points = [
        pareto.MetricPoint(str(c.arch), tput, value)
        for c, (tput, value) in zip(candidates, measured)]
    proxy_frontier = pareto.frontier(points, "throughput", proxy)
    logging.info("Proxy frontier holds {} of {} candidates".format(len(proxy_frontier), n))

    by_id = {str(c.arch): c for c in candidates}
    shortlist = sorted(proxy_frontier.points, key=lambda p: (-p.y, -p.x, p.id))
    running = RunningFrontier()
    evaluated = []
    rows = []
    sim_time = phase_one
    for point in shortlist:
        if sim_time + cfg.eval_time_acc > cfg.time_budget:
            logging.info("Budget exhausted after {} of {} accuracy evaluations".format(
                len(evaluated), len(shortlist)))
            break
        candidate = by_id[point.id]
        sim_time += cfg.eval_time_acc
        evaluated.append(candidate)
        on = running.add(
            pareto.MetricPoint(point.id, candidate.throughput, candidate.accuracy))
        rows.append(TraceRow(
            len(rows), sim_time, candidate.arch, candidate.accuracy, candidate.throughput,
            rank(candidate.accuracy, candidate.throughput, cfg.goal_tput, cfg.weight_w), on))

    final_frontier = running.to_frontier()
    trace = SearchTrace(
        rows=rows, frontier=final_frontier, n_acc_evals=len(evaluated), n_tput_evals=n,
        method="filter-{}".format(proxy))
    return FilterResult(
        proxy=proxy,
        proxy_frontier=proxy_frontier,
        evaluated=evaluated,
        final_frontier=final_frontier,
        time_spent=phase_one + len(evaluated) * cfg.eval_time_acc,
        n_acc_evals=len(evaluated),
        n_tput_evals=n,
        trace=trace)


def true_frontier(space):
    """
    Throughput-accuracy frontier over every candidate in the table.
    """
    return pareto.frontier(
        [pareto.MetricPoint(str(c.arch), c.throughput, c.accuracy)
         for c in space.candidates.values()],
        "throughput", "accuracy")


def compare_frontiers(a, b, reference=None):
    """
    Hypervolume of both frontiers, their ratio (a over b) and the largest
    amount by which b beats a point of a on y at the same or higher x.
    """
    if (a.metric_x, a.metric_y) != (b.metric_x, b.metric_y):
        raise pareto.DominationError("cannot compare a {}-{} frontier with a {}-{} one".format(
            a.metric_x, a.metric_y, b.metric_x, b.metric_y))
    reference = reference or pareto.MetricPoint("reference", 0, 0)
    hv_a = pareto.hypervolume(a.points, reference)
    hv_b = pareto.hypervolume(b.points, reference)
    gap = 0.0
    for p in a.points:
        better = [q.y for q in b.points if q.x >= p.x]
        if better:
            gap = max(gap, max(better) - p.y)
    return FrontierComparison(
        hypervolume_a=hv_a,
        hypervolume_b=hv_b,
        ratio=hv_a / hv_b if hv_b > 0 else None,
        max_gap=gap,
        shared=a.members & b.members,
        only_a=a.members - b.members,
        only_b=b.members - a.members)


def membership_frame(a, b):
    """
    Every point of either frontier labelled ``in_both``, ``only_a`` or
    ``only_b``, in decreasing x.
    """
    rows = {}
    for p in b.points:
        rows[p.id] = (p.id, p.x, p.y, "only_b")
    for p in a.points:
        rows[p.id] = (p.id, p.x, p.y, "in_both" if p.id in b else "only_a")
    ordered = sorted(rows.values(), key=lambda row: (-row[1], -row[2], row[0]))
    return pd.DataFrame(ordered, columns=list(FRONTIER_COLUMNS) + ["label"])


def accuracy_utilization_correlation(space):
    accuracy = [c.accuracy for c in space.candidates.values()]
    utilization = [c.utilization_fraction for c in space.candidates.values()]
    return float(np.corrcoef(accuracy, utilization)[0, 1])


def frontier_frame(frontier):
    return pd.DataFrame(
        [(p.id, p.x, p.y) for p in frontier.points], columns=list(FRONTIER_COLUMNS))


def read_frontier(path):
    frame = tables.read_table(path, FRONTIER_COLUMNS)
    if len(frame) == 0:
        raise tables.TableError("{} holds no frontier points".format(path))
    throughput = tables.numeric_column(frame, "throughput")
    accuracy = tables.numeric_column(frame, "accuracy")
    return pareto.frontier(
        [pareto.MetricPoint(id, x, y)
         for id, x, y in zip(frame["arch"].str.strip(), throughput, accuracy)],
        "throughput", "accuracy")
