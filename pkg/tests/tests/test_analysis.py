"""Tests for sensitivity curves and income comparisons."""

import numpy as np
import pytest

from e3.dtr.analysis import (
    AnalysisError,
    Dominance,
    IncomeComparisonTable,
    InvalidEntryError,
    dominance_summary,
    income_comparison,
    mean_absolute_gap,
    regression_slope,
    sensitivity_curve,
    treatment_proportions,
)
from e3.dtr.cohort import fixed_income_cohort
from e3.dtr.config import load_config
from e3.dtr.experiment import Experiment, read_comparison, read_curve
from e3.dtr.policy import (
    ModelConfigurationError,
    NonAdaptivePlanner,
    RewardParameters,
)
from e3.dtr.running_status import RunningStatus

from .utils import DEFAULT_PARAMS, DEFAULT_SPEC, constant_models, true_models


# Treatment proportions of two income groups (10000 and 80000), rows are
# epochs 1..7 and columns stages 1..3.
PUBLISHED_LOW = [
    [0.00, 0.00, 0.00],
    [0.00, 0.00, 0.00],
    [0.01, 0.00, 0.00],
    [0.03, 0.04, 0.09],
    [0.06, 0.09, 0.43],
    [0.09, 0.12, 0.72],
    [0.01, 0.00, 0.00],
]
PUBLISHED_HIGH = [
    [0.06, 0.18, 0.06],
    [0.07, 0.22, 0.19],
    [0.09, 0.30, 0.29],
    [0.12, 0.32, 0.42],
    [0.17, 0.36, 0.47],
    [0.18, 0.38, 0.48],
    [0.09, 0.29, 0.35],
]

ENTRIES = ((4, 1), (3, 2), (2, 3), (5, 3))


def always_treat():
    return NonAdaptivePlanner(
        constant_models(
            treated_row=(0.6, 0.3, 0.1), untreated_row=(0.1, 0.3, 0.6)
        ),
        RewardParameters(costs=(0.0, 0.0)),
    )


def never_treat():
    return NonAdaptivePlanner(
        true_models(), RewardParameters(costs=(0.0, 1e15))
    )


def table(low, high, low_income=10000.0, high_income=80000.0):
    return IncomeComparisonTable(
        low_income, high_income, np.array(low), np.array(high), 100
    )


def test_regression_slope():
    assert regression_slope([0.0, 1.0, 2.0], [1.0, 3.0, 5.0]) == (
        pytest.approx(2.0)
    )
    assert regression_slope([1.0], [0.5]) == 0.0


class TestSensitivity:
    def test_always_treated(self):
        grid = DEFAULT_SPEC.default_grid("age", 5)
        curve = sensitivity_curve(
            always_treat(), DEFAULT_SPEC, "age", grid, (2, 2), 10, seed=1
        )
        assert np.all(curve.proportions == 1.0)
        assert np.all(curve.lower == 1.0) and np.all(curve.upper == 1.0)
        assert curve.slope() == pytest.approx(0.0, abs=1e-12)

    def test_never_treated(self):
        grid = DEFAULT_SPEC.default_grid("bp", 5)
        curve = sensitivity_curve(
            never_treat(), DEFAULT_SPEC, "bp", grid, (4, 1), 10, seed=1
        )
        assert np.all(curve.proportions == 0.0)
        assert np.all(curve.upper == 0.0)

    def test_curve_shape(self):
        grid = DEFAULT_SPEC.default_grid("bp", 7)
        planner = NonAdaptivePlanner(true_models(), DEFAULT_PARAMS)
        curve = sensitivity_curve(
            planner, DEFAULT_SPEC, "bp", grid, (3, 2), 20, seed=4
        )
        assert curve.covariate == "bp"
        assert curve.entry == (3, 2)
        assert curve.replications == 20
        assert np.array_equal(curve.grid, grid)
        counts = curve.proportions * 20
        assert np.allclose(counts, np.round(counts), atol=1e-12)
        assert np.all(curve.lower <= curve.proportions)
        assert np.all(curve.proportions <= curve.upper)
        assert np.all((curve.lower >= 0.0) & (curve.upper <= 1.0))
        frame = curve.to_frame()
        assert list(frame.columns) == ["bp", "proportion", "lower", "upper"]
        assert len(frame) == 7

    def test_determinism(self):
        grid = DEFAULT_SPEC.default_grid("age", 4)
        planner = NonAdaptivePlanner(true_models(), DEFAULT_PARAMS)
        first, second = (
            sensitivity_curve(
                planner, DEFAULT_SPEC, "age", grid, (5, 3), 15, seed=8, jobs=j
            )
            for j in (1, 3)
        )
        assert first.proportions.tobytes() == second.proportions.tobytes()

    def test_invalid_requests(self):
        planner = NonAdaptivePlanner(true_models(), DEFAULT_PARAMS)
        grid = [100.0, 110.0]
        for entry in ((0, 1), (8, 1), (1, 4)):
            with pytest.raises(InvalidEntryError):
                sensitivity_curve(planner, DEFAULT_SPEC, "bp", grid, entry)
        with pytest.raises(ModelConfigurationError):
            sensitivity_curve(planner, DEFAULT_SPEC, "income", grid, (1, 1))
        with pytest.raises(AnalysisError):
            sensitivity_curve(
                planner, DEFAULT_SPEC, "bp", [110.0, 100.0], (1, 1)
            )
        with pytest.raises(AnalysisError):
            sensitivity_curve(planner, DEFAULT_SPEC, "bp", [], (1, 1))
        with pytest.raises(AnalysisError):
            sensitivity_curve(
                planner, DEFAULT_SPEC, "bp", grid, (1, 1), replications=0
            )

    @pytest.mark.slow
    def test_blood_pressure_pattern(self):
        """Treatment gets less frequent as blood pressure increases."""
        planner = NonAdaptivePlanner(true_models(), DEFAULT_PARAMS)
        grid = DEFAULT_SPEC.default_grid("bp")
        for entry in ENTRIES:
            curve = sensitivity_curve(
                planner, DEFAULT_SPEC, "bp", grid, entry, 100, seed=3
            )
            assert curve.slope() < 0.0, entry

    @pytest.mark.slow
    def test_age_pattern(self):
        """Older patients are treated less, except in the worst stage."""
        planner = NonAdaptivePlanner(true_models(), DEFAULT_PARAMS)
        grid = DEFAULT_SPEC.default_grid("age")
        slopes = {
            entry: sensitivity_curve(
                planner, DEFAULT_SPEC, "age", grid, entry, 100, seed=3
            ).slope()
            for entry in ENTRIES
        }
        assert slopes[(4, 1)] < 0.0
        assert slopes[(3, 2)] < 0.0
        assert slopes[(2, 3)] > 0.0
        assert slopes[(5, 3)] > 0.0


class TestIncomeComparison:
    def test_same_income(self):
        planner = NonAdaptivePlanner(true_models(), DEFAULT_PARAMS)
        result = income_comparison(
            planner, DEFAULT_SPEC, 30000.0, 30000.0, 20, seed=2
        )
        assert np.array_equal(result.low, result.high)
        assert all(
            d.dominance is Dominance.TIE for d in dominance_summary(result)
        )

    def test_free_treatment(self):
        """Without treatment cost, income does not matter."""
        planner = NonAdaptivePlanner(
            true_models(), RewardParameters(costs=(0.0, 0.0))
        )
        result = income_comparison(
            planner, DEFAULT_SPEC, 10000.0, 80000.0, 20, seed=2
        )
        assert np.array_equal(result.low, result.high)
        assert mean_absolute_gap(result) == 0.0

    def test_table_shape(self):
        planner = NonAdaptivePlanner(true_models(), DEFAULT_PARAMS)
        result = income_comparison(
            planner, DEFAULT_SPEC, 10000.0, 80000.0, 10, seed=2
        )
        assert result.low.shape == (7, 3)
        assert result.high.shape == (7, 3)
        assert result.group_size == 10
        assert np.allclose(result.low * 10, np.round(result.low * 10))
        frame = result.to_frame()
        assert list(frame.columns) == [
            "t",
            "stage",
            "income_10000",
            "income_80000",
        ]
        assert frame["t"].tolist()[:4] == [1, 1, 1, 2]
        assert frame["stage"].tolist()[:4] == [1, 2, 3, 1]

    def test_determinism(self):
        planner = NonAdaptivePlanner(true_models(), DEFAULT_PARAMS)
        first = income_comparison(
            planner, DEFAULT_SPEC, 10000.0, 80000.0, 10, seed=5
        )
        second = income_comparison(
            planner, DEFAULT_SPEC, 10000.0, 80000.0, 10, seed=5, jobs=4
        )
        assert first.low.tobytes() == second.low.tobytes()
        assert first.high.tobytes() == second.high.tobytes()

    def test_invalid(self):
        planner = NonAdaptivePlanner(true_models(), DEFAULT_PARAMS)
        with pytest.raises(AnalysisError):
            income_comparison(planner, DEFAULT_SPEC, 80000.0, 10000.0)
        with pytest.raises(AnalysisError):
            income_comparison(planner, DEFAULT_SPEC, 0.0, 10000.0)
        with pytest.raises(AnalysisError):
            income_comparison(
                planner, DEFAULT_SPEC, 10000.0, 80000.0, group_size=0
            )

    @pytest.mark.slow
    def test_income_pattern(self):
        """Richer patients are treated more, and the gap shrinks with the
        difference between incomes."""
        planner = NonAdaptivePlanner(true_models(), DEFAULT_PARAMS)
        wide = income_comparison(
            planner, DEFAULT_SPEC, 10000.0, 80000.0, 100, seed=6
        )
        summary = dominance_summary(wide)
        assert summary[0].dominance in (Dominance.HIGH, Dominance.TIE)
        assert summary[1].dominance in (Dominance.HIGH, Dominance.TIE)
        low_rate, high_rate = wide.treatment_rates()
        assert high_rate > low_rate
        narrow = income_comparison(
            planner, DEFAULT_SPEC, 40000.0, 45000.0, 100, seed=6
        )
        assert mean_absolute_gap(narrow) < mean_absolute_gap(wide)


class TestDominance:
    def test_published_table(self):
        summary = dominance_summary(table(PUBLISHED_LOW, PUBLISHED_HIGH))
        assert [d.stage for d in summary] == [1, 2, 3]
        assert summary[0].dominance is Dominance.HIGH
        assert summary[1].dominance is Dominance.HIGH
        assert summary[0].crossovers == ()
        assert summary[2].dominance is Dominance.MIXED
        assert summary[2].crossovers == ((5, 6), (6, 7))

    def test_reversed_table(self):
        summary = dominance_summary(table(PUBLISHED_HIGH, PUBLISHED_LOW))
        assert summary[0].dominance is Dominance.LOW
        assert summary[2].crossovers == ((5, 6), (6, 7))

    def test_ties_are_skipped(self):
        low = np.full((5, 1), 0.2)
        high = np.array([[0.3], [0.2], [0.2], [0.1], [0.2]])
        summary = dominance_summary(table(low, high))
        assert summary[0].dominance is Dominance.MIXED
        assert summary[0].crossovers == ((1, 4),)

    def test_gap(self):
        result = table(PUBLISHED_LOW, PUBLISHED_HIGH)
        expected = np.abs(
            np.array(PUBLISHED_HIGH) - np.array(PUBLISHED_LOW)
        ).mean()
        assert mean_absolute_gap(result) == pytest.approx(expected)
        assert mean_absolute_gap(table(PUBLISHED_LOW, PUBLISHED_LOW)) == 0.0


def test_treatment_proportions(tmp_path):
    planner = NonAdaptivePlanner(true_models(), DEFAULT_PARAMS)
    cohort = fixed_income_cohort(DEFAULT_SPEC, 20000.0, 8, 3)
    status = RunningStatus(str(tmp_path / "status"))
    proportions = treatment_proportions(planner, cohort, status=status)
    expected = np.mean(
        [planner.decisions(profile) == 2 for profile in cohort], axis=0
    )
    assert np.array_equal(proportions, expected)
    assert (tmp_path / "status").read_text().startswith(
        "Work units: 8 / 8 completed"
    )
    with pytest.raises(AnalysisError):
        treatment_proportions(planner, [])


@pytest.mark.slow
class TestFittedPipeline:
    """Patterns of the bundled experiment, on models fitted from its cohort."""

    @pytest.fixture(scope="class")
    def output_dir(self, request, tmp_path_factory):
        if request.config.getoption("ci"):
            pytest.skip("slow test")
        out = tmp_path_factory.mktemp("experiment")
        experiment = Experiment(load_config(output_dir=str(out)), jobs=4)
        for command in ("simulate", "fit", "compare", "sensitivity"):
            experiment.run(command)
        return out

    def test_income_dominance(self, output_dir):
        table = read_comparison(
            str(output_dir / "compare/income_10000_80000.csv")
        )
        assert table.group_size == 100
        summary = dominance_summary(table)
        assert summary[0].dominance == Dominance.HIGH
        assert summary[1].dominance == Dominance.HIGH
        assert table.high.mean() > table.low.mean()

    def test_income_gap(self, output_dir):
        wide = read_comparison(
            str(output_dir / "compare/income_10000_80000.csv")
        )
        narrow = read_comparison(
            str(output_dir / "compare/income_40000_45000.csv")
        )
        assert mean_absolute_gap(narrow) < mean_absolute_gap(wide)

    def test_sensitivity_slopes(self, output_dir):
        for t, stage in ENTRIES:
            bp = read_curve(
                str(output_dir / f"sensitivity/bp_{t}_{stage}.csv")
            )
            assert bp.slope() < 0
            age = read_curve(
                str(output_dir / f"sensitivity/age_{t}_{stage}.csv")
            )
            if stage == 3:
                assert age.slope() > 0
            else:
                assert age.slope() < 0
