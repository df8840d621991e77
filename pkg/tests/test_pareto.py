import numpy as np
import pandas as pd
import pytest

import pareto
import tables
from pareto import MetricPoint

from conftest import SURVEY_TABLE, SURVEY_MARKS


def points(*coords):
    return [MetricPoint("p{}".format(j), x, y) for j, (x, y) in enumerate(coords)]


class TestFrontier:
    def test_mutually_non_dominated(self):
        result = pareto.frontier(points((1, 3), (2, 2), (3, 1)))
        assert result.members == {"p0", "p1", "p2"}
        assert [p.x for p in result.points] == [3, 2, 1]

    def test_dominated(self):
        assert pareto.frontier(points((1, 1), (2, 2))).members == {"p1"}

    def test_survey_subset(self):
        result = pareto.frontier([
            MetricPoint("tresnet_m", 8444.73, 83.08),
            MetricPoint("gernet_m", 12411.49, 80.73),
            MetricPoint("seresnet50", 6059.46, 80.27)], "throughput", "accuracy")
        assert result.members == {"tresnet_m", "gernet_m"}
        assert (result.metric_x, result.metric_y) == ("throughput", "accuracy")

    def test_exact_ties_kept(self):
        assert pareto.frontier(points((2, 2), (2, 2), (1, 1))).members == {"p0", "p1"}

    def test_tie_on_one_axis(self):
        assert pareto.frontier(points((2, 2), (2, 1), (1, 2))).members == {"p0"}

    def test_empty(self):
        with pytest.raises(ValueError):
            pareto.frontier([])

    def test_duplicate_ids(self):
        with pytest.raises(pareto.DuplicateIdError):
            pareto.frontier([MetricPoint("a", 1, 1), MetricPoint("a", 2, 2)])

    def test_non_finite(self):
        with pytest.raises(ValueError):
            MetricPoint("a", float("nan"), 1)

    @pytest.mark.parametrize("seed", range(1000))
    def test_matches_brute_force(self, seed, point_factory, frontier_oracle):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 201))
        grid = None if seed % 2 == 0 else int(rng.integers(2, 20))
        pts = point_factory(rng, n, grid)
        result = pareto.frontier(pts)
        assert set(result.members) == frontier_oracle(pts)
        # idempotent
        assert pareto.frontier(result.points).members == result.members
        # permutation invariant
        shuffled = [pts[j] for j in rng.permutation(n)]
        assert pareto.frontier(shuffled).members == result.members
        # invariant under a strictly increasing transform of one axis
        transformed = [MetricPoint(p.id, np.exp(p.x / 4), p.y) for p in pts]
        assert pareto.frontier(transformed).members == result.members


class TestHypervolume:
    def test_single_point(self):
        assert pareto.hypervolume(points((2, 2)), MetricPoint("r", 0, 0)) == 4

    def test_two_points(self):
        assert pareto.hypervolume(points((1, 3), (3, 1)), MetricPoint("r", 0, 0)) == 5

    def test_matches_rasterization(self):
        rng = np.random.default_rng(7)
        coords = rng.integers(1, 20, size=(15, 2))
        pts = points(*[tuple(c) for c in coords])
        grid = np.zeros((20, 20), dtype=bool)
        for x, y in coords:
            grid[:x, :y] = True
        assert pareto.hypervolume(pts, MetricPoint("r", 0, 0)) == grid.sum()

    def test_offset_reference(self):
        assert pareto.hypervolume(points((3, 3)), MetricPoint("r", 1, 2)) == 2

    def test_reference_not_dominated(self):
        with pytest.raises(pareto.DominationError):
            pareto.hypervolume(points((1, 3), (3, 1)), MetricPoint("r", 2, 0))

    def test_empty(self):
        assert pareto.hypervolume([], MetricPoint("r", 0, 0)) == 0

    def test_monotone(self):
        rng = np.random.default_rng(3)
        pts = points(*[tuple(c) for c in rng.uniform(0, 10, size=(50, 2))])
        reference = MetricPoint("r", 0, 0)
        whole = pareto.frontier(pts)
        part = pareto.frontier(pts[:25])
        assert pareto.hypervolume(part, reference) <= pareto.hypervolume(whole, reference)
        # dominated points add no area
        assert pareto.hypervolume(pts, reference) == pytest.approx(
            pareto.hypervolume(whole, reference))


class TestSurvey:
    def test_read_survey(self):
        records = pareto.read_survey(SURVEY_TABLE)
        assert len(records) == 93
        first = records[0]
        assert (first.name, first.accuracy, first.throughput, first.tflops_per_sec) == (
            "tresnet_m", 83.08, 8444.73, 96.86)

    def test_membership_reproduces_marks(self):
        marks = pareto.frontier_membership(pareto.read_survey(SURVEY_TABLE))
        expected = pd.read_csv(SURVEY_MARKS)
        assert list(marks["name"]) == list(expected["name"])
        for column in expected.columns[1:]:
            assert list(marks[column]) == list(expected[column]), column

    def test_only_tresnet_m_on_all(self):
        marks = pareto.frontier_membership(pareto.read_survey(SURVEY_TABLE))
        assert list(marks.loc[marks["on_all"], "name"]) == ["tresnet_m"]

    def test_single_frontier_models(self):
        marks = pareto.frontier_membership(pareto.read_survey(SURVEY_TABLE)).set_index("name")
        assert list(marks.loc["resnet18"].iloc[:3]) == [False, False, True]
        assert list(marks.loc["resnetrs270"].iloc[:3]) == [False, True, False]

    def test_duplicate_names(self):
        record = pareto.MeasuredModelRecord("a", 70, 100, 10)
        with pytest.raises(pareto.DuplicateIdError):
            pareto.frontier_membership([record, record])

    def test_bad_row_reports_line(self, tmp_path):
        path = tmp_path / "survey.csv"
        path.write_text(
            "# comment\nname,accuracy,throughput,tflops_per_sec\n"
            "a,70,100,10\nb,101,100,10\n")
        with pytest.raises(tables.TableError) as info:
            pareto.read_survey(str(path))
        assert info.value.line == 4
        assert info.value.column == "accuracy"

    def test_blank_lines_keep_line_numbers(self, tmp_path):
        path = tmp_path / "survey.csv"
        path.write_text(
            "name,accuracy,throughput,tflops_per_sec\n\na,70,100,10\n\n\nb,101,100,10\n\n")
        with pytest.raises(tables.TableError) as info:
            pareto.read_survey(str(path))
        assert info.value.line == 6
        assert info.value.column == "accuracy"

    def test_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "survey.csv"
        path.write_text("name,accuracy,throughput,tflops_per_sec\na,70,100,10\n\nb,71,90,12\n")
        records = pareto.read_survey(str(path))
        assert [r.name for r in records] == ["a", "b"]

    def test_non_numeric(self, tmp_path):
        path = tmp_path / "survey.csv"
        path.write_text("name,accuracy,throughput,tflops_per_sec\na,70,fast,10\n")
        with pytest.raises(tables.TableError, match="line 2, column 'throughput'"):
            pareto.read_survey(str(path))

    def test_bad_header(self, tmp_path):
        path = tmp_path / "survey.csv"
        path.write_text("model,accuracy,throughput\na,70,100\n")
        with pytest.raises(tables.TableError, match="header"):
            pareto.read_survey(str(path))
