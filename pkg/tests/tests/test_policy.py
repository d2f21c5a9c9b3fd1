"""Tests for covariate-adjusted treatment policies."""

import json
import os

import numpy as np
import pytest

from e3.dtr.cohort import TrajectoryDataset
from e3.dtr.mdp import ActionSet, enumerate_optimal
from e3.dtr.ordinal import FittedOrdinalModel
from e3.dtr.policy import (
    ActionMatrix,
    AdaptivePlanner,
    AugmentedStateSpace,
    CovariateGrid,
    CovariateProfile,
    GridDimension,
    ModelConfigurationError,
    NonAdaptivePlanner,
    RewardParameters,
    SOLUTION_CACHE_SIZE,
    TransitionModelSet,
    UnestimableRowError,
    action_matrix,
    build_adaptive_mdp,
    build_nonadaptive_mdp,
    compare_policies,
    count_transitions,
    initial_cell_distribution,
    reward_spec,
    stage_reward,
    terminal_reward,
)

from .utils import DEFAULT_PARAMS, constant_models, profile, true_models


WORSENING = (0.1, 0.3, 0.6)
IMPROVING = (0.6, 0.3, 0.1)


def small_dataset():
    """Three patients over three epochs, binned on exposure.

    The third patient gets exposed between the two records.
    """
    return TrajectoryDataset(
        patient_id=[1, 1, 2, 2, 3, 3],
        t=[1, 2, 1, 2, 1, 2],
        state=[1, 2, 2, 1, 1, 1],
        action=[2, 1, 1, 1, 1, 1],
        next_state=[2, 2, 1, 1, 1, 1],
        covariates=[[0.0], [0.0], [1.0], [1.0], [0.0], [1.0]],
        covariate_names=("exposure",),
        stages=3,
        horizon=3,
    )


EXPOSURE_GRID = CovariateGrid([GridDimension("exposure", (0.5,))])


class TestProfile:
    def test_accessors(self):
        p = profile(age=60.0)
        assert p["age"] == 60.0
        assert p.income == 80000.0
        assert p.vector(["bp", "age"]).tolist() == [110.0, 60.0]
        assert p.replace(bp=120.0)["bp"] == 120.0
        assert p.replace(bp=120.0).indicators == p.indicators

    def test_invalid(self):
        with pytest.raises(ModelConfigurationError):
            profile(exposure=0.5)
        with pytest.raises(ModelConfigurationError):
            profile(age=float("inf"))
        with pytest.raises(ModelConfigurationError):
            profile(income=0.0)
        with pytest.raises(ModelConfigurationError):
            profile()["weight"]
        with pytest.raises(ModelConfigurationError):
            profile().replace(weight=1.0)
        with pytest.raises(ModelConfigurationError):
            CovariateProfile(("age", "age"), (1.0, 2.0))

    def test_no_income(self):
        assert CovariateProfile.from_mapping({"age": 40.0}).income is None


class TestRewards:
    def test_stage_reward(self):
        params = DEFAULT_PARAMS
        for t in range(1, 8):
            assert stage_reward(2, 2, 1, t, params) == 0.0
        assert stage_reward(2, 1, 2, 1, params) == pytest.approx(
            0.1561754, abs=1e-6
        )
        assert stage_reward(1, 3, 1, 2, params) == pytest.approx(
            -0.1555556, abs=1e-7
        )

    def test_terminal_reward(self):
        params = DEFAULT_PARAMS
        assert terminal_reward(3, params) == 0.0
        assert terminal_reward(1, params) == pytest.approx(0.0172840, abs=1e-7)
        assert terminal_reward(2, params) == pytest.approx(0.0086420, abs=1e-7)

    def test_out_of_range(self):
        params = DEFAULT_PARAMS
        with pytest.raises(ModelConfigurationError):
            stage_reward(0, 1, 1, 1, params)
        with pytest.raises(ModelConfigurationError):
            stage_reward(1, 4, 1, 1, params)
        with pytest.raises(ModelConfigurationError):
            stage_reward(1, 1, 3, 1, params)
        with pytest.raises(ModelConfigurationError):
            stage_reward(1, 1, 1, 8, params)
        with pytest.raises(ModelConfigurationError):
            terminal_reward(4, params)

    def test_reward_spec(self):
        """Reward arrays agree with the scalar formulas."""
        params = RewardParameters(income=30000.0, decay=0.5)
        spec = reward_spec(params)
        assert spec.stage.shape == (7, 3, 2, 3)
        for t in range(1, 8):
            for i in range(1, 4):
                for a in (1, 2):
                    for j in range(1, 4):
                        assert spec.stage[t - 1, i - 1, a - 1, j - 1] == (
                            pytest.approx(
                                stage_reward(i, j, a, t, params), abs=1e-15
                            )
                        )
        assert spec.terminal.tolist() == pytest.approx(
            [terminal_reward(j, params) for j in (1, 2, 3)]
        )

    def test_invalid_parameters(self):
        for kwargs in (
            {"weight": 0.0},
            {"decay": -1.0},
            {"income": -5.0},
            {"horizon": 1},
            {"costs": (1.0, 5000.0)},
            {"costs": (0.0, float("nan"))},
        ):
            with pytest.raises(ModelConfigurationError):
                RewardParameters(**kwargs)

    def test_with_income(self):
        params = DEFAULT_PARAMS.with_income(1000.0)
        assert params.income == 1000.0
        assert params.costs == DEFAULT_PARAMS.costs
        assert params.actions == (1, 2)


class TestNonAdaptive:
    def test_action_matrix_shape(self):
        planner = NonAdaptivePlanner(true_models(), DEFAULT_PARAMS)
        decisions = planner.decisions(profile())
        assert decisions.shape == (7, 3)
        assert set(decisions.ravel()) <= {1, 2}

    def test_inert_covariates(self):
        """Without slopes, profiles with the same income get one policy."""
        models = constant_models(
            treated_row=IMPROVING, untreated_row=WORSENING
        )
        first, second = (
            action_matrix(
                build_nonadaptive_mdp(models, profile(age=age), DEFAULT_PARAMS)
            )
            for age in (30.0, 70.0)
        )
        assert np.array_equal(first.decisions, second.decisions)
        assert np.array_equal(first.solution.values, second.solution.values)

    def test_income_in_reward_only(self):
        models = true_models()
        low = build_nonadaptive_mdp(models, profile(), DEFAULT_PARAMS)
        high = build_nonadaptive_mdp(
            models, profile(income=160000.0), DEFAULT_PARAMS
        )
        assert np.array_equal(
            low.kernel.probabilities, high.kernel.probabilities
        )
        assert np.array_equal(
            low.rewards.stage[:, :, 0], high.rewards.stage[:, :, 0]
        )
        cost_low = low.rewards.stage[:, :, 1] - low.rewards.stage[:, :, 0]
        cost_high = high.rewards.stage[:, :, 1] - high.rewards.stage[:, :, 0]
        assert np.allclose(cost_low, 2 * cost_high, rtol=1e-9, atol=0.0)
        assert np.array_equal(low.rewards.terminal, high.rewards.terminal)

    def test_covariates_in_kernel_only(self):
        models = true_models()
        first = build_nonadaptive_mdp(models, profile(), DEFAULT_PARAMS)
        second = build_nonadaptive_mdp(
            models, profile(age=58.0, exposure=1.0), DEFAULT_PARAMS
        )
        assert np.array_equal(first.rewards.stage, second.rewards.stage)
        assert not np.array_equal(
            first.kernel.probabilities, second.kernel.probabilities
        )

    def test_prohibitive_cost(self):
        params = RewardParameters(costs=(0.0, 1e12))
        planner = NonAdaptivePlanner(true_models(), params)
        for age in (44.0, 50.0, 56.0):
            assert np.all(planner.decisions(profile(age=age)) == 1)

    def test_free_dominating_treatment(self):
        params = RewardParameters(costs=(0.0, 0.0), horizon=4)
        models = constant_models(
            treated_row=IMPROVING, untreated_row=WORSENING
        )
        mdp = build_nonadaptive_mdp(models, profile(), params)
        solution = action_matrix(mdp).solution
        assert np.all(solution.policy.decisions == 2)
        oracle = enumerate_optimal(mdp)
        for s in (1, 2, 3):
            assert oracle.value(1, s) == pytest.approx(
                solution.value(1, s), abs=1e-9
            )

    def test_cost_monotonicity(self):
        models = true_models()
        previous = None
        for cost in (0.0, 1000.0, 5000.0, 20000.0, 1e5, 1e12):
            params = RewardParameters(costs=(0.0, cost))
            mdp = build_nonadaptive_mdp(models, profile(), params)
            values = action_matrix(mdp).solution.values
            if previous is not None:
                assert np.all(values <= previous + 1e-12)
            previous = values

    def test_compare_policies(self):
        mdp = build_nonadaptive_mdp(true_models(), profile(), DEFAULT_PARAMS)
        solution = action_matrix(mdp).solution
        values = compare_policies(mdp, solution.policy)
        assert list(values) == ["optimal", "remission", "treatment"]
        assert np.allclose(values["optimal"], solution.values[0], atol=1e-12)
        for name in ("remission", "treatment"):
            assert values[name].shape == (3,)
            assert np.all(values[name] <= values["optimal"] + 1e-12)

    def test_compare_free_treatment(self):
        """When treating is free and always better, it is the optimum."""
        models = constant_models(
            treated_row=IMPROVING, untreated_row=WORSENING
        )
        params = RewardParameters(costs=(0.0, 0.0), horizon=4)
        mdp = build_nonadaptive_mdp(models, profile(), params)
        values = compare_policies(mdp, action_matrix(mdp).solution.policy)
        assert np.allclose(values["treatment"], values["optimal"])
        assert np.all(values["remission"] < values["optimal"])

    def test_missing_model(self):
        models = true_models()
        del models.models[(3, 2)]
        with pytest.raises(ModelConfigurationError) as exc:
            build_nonadaptive_mdp(models, profile(), DEFAULT_PARAMS)
        assert "(3, 2)" in str(exc.value)

    def test_stage_mismatch(self):
        with pytest.raises(ModelConfigurationError):
            build_nonadaptive_mdp(
                true_models(), profile(), RewardParameters(stages=4)
            )

    def test_per_epoch_models(self):
        base = constant_models(treated_row=IMPROVING, untreated_row=WORSENING)
        models = TransitionModelSet(
            {
                (t, s, a): base.models[(s, a)]
                for t in range(1, 8)
                for s in range(1, 4)
                for a in (1, 2)
            },
            base.covariates,
            base.actions,
            per_epoch=True,
            epochs=7,
        )
        first = build_nonadaptive_mdp(models, profile(), DEFAULT_PARAMS)
        second = build_nonadaptive_mdp(base, profile(), DEFAULT_PARAMS)
        assert np.array_equal(
            first.kernel.probabilities, second.kernel.probabilities
        )
        with pytest.raises(ModelConfigurationError):
            build_nonadaptive_mdp(
                models, profile(), RewardParameters(horizon=10)
            )


class TestTransitionModelSet:
    def test_dimension_check(self):
        model = FittedOrdinalModel.from_parameters([0.0, 1.0], [0.1, 0.2])
        with pytest.raises(ModelConfigurationError):
            TransitionModelSet(
                {(1, 1): model}, ("age",), ActionSet.uniform(3, (1, 2))
            )
        with pytest.raises(ModelConfigurationError):
            TransitionModelSet(
                {(1, 1): model}, ("age", "bp"), ActionSet.uniform(2, (1, 2))
            )

    def test_save_and_load(self, tmp_path):
        models = true_models()
        filename = models.save(str(tmp_path), {"config": "abc", "seed": 3})
        assert os.path.basename(filename) == TransitionModelSet.INDEX_FILENAME
        with open(filename) as f:
            assert json.load(f)["config"] == "abc"
        loaded = TransitionModelSet.load(str(tmp_path))
        assert loaded.covariates == models.covariates
        assert loaded.actions == models.actions
        x = profile().vector(models.covariates)
        assert np.array_equal(loaded.kernel(x, 7), models.kernel(x, 7))

    def test_malformed_document(self):
        with pytest.raises(ModelConfigurationError):
            TransitionModelSet.from_json({"models": []})


class TestGrid:
    def test_from_profiles(self):
        profiles = [
            profile(age=age, exposure=float(k % 2))
            for k, age in enumerate(range(40, 70))
        ]
        grid = CovariateGrid.from_profiles(profiles, ["age", "exposure"])
        assert grid.names == ("age", "exposure")
        assert grid.shape == (3, 2)
        assert grid.size == 6
        assert grid.dimensions[1].edges == (0.5,)
        cells = [grid.cell_of(p) for p in profiles]
        assert set(cells) == set(range(6))
        assert grid.describe(grid.cell_of(profiles[-1])) == {
            "age": 2,
            "exposure": 1,
        }

    def test_coinciding_quantiles(self):
        profiles = [profile(age=50.0)] * 5 + [profile(age=60.0)]
        grid = CovariateGrid.from_profiles(profiles, ["age"], levels=3)
        assert grid.size == 2

    def test_invalid(self):
        with pytest.raises(ModelConfigurationError):
            CovariateGrid.from_profiles([profile()], ["age"], levels=0)
        with pytest.raises(ModelConfigurationError):
            CovariateGrid.from_profiles([], ["age"])
        with pytest.raises(ModelConfigurationError):
            CovariateGrid(
                [GridDimension("age", (50.0,)), GridDimension("age", ())]
            )

    def test_document(self):
        grid = CovariateGrid(
            [GridDimension("age", (48.0, 52.0)), GridDimension("bp", ())]
        )
        doc = json.loads(json.dumps(grid.to_json()))
        assert CovariateGrid.from_json(doc).dimensions == grid.dimensions

    def test_single_cell(self):
        grid = CovariateGrid([])
        assert grid.size == 1
        assert grid.cell_of(profile()) == 0


class TestAugmentedStateSpace:
    def test_round_trip(self):
        space = AugmentedStateSpace(3, 2)
        assert space.size == 6
        indices = [space.index(s, c) for c in range(2) for s in (1, 2, 3)]
        assert indices == list(range(1, 7))
        for index in indices:
            assert space.index(*space.decode(index)) == index
        assert space.stage_map().tolist() == [1, 2, 3, 1, 2, 3]

    def test_out_of_range(self):
        space = AugmentedStateSpace(3, 2)
        with pytest.raises(ModelConfigurationError):
            space.index(4, 0)
        with pytest.raises(ModelConfigurationError):
            space.index(1, 2)
        with pytest.raises(ModelConfigurationError):
            space.decode(7)


class TestCounts:
    def test_pooled(self):
        counts = count_transitions(small_dataset(), EXPOSURE_GRID)
        assert counts.shape == (1, 6, 2, 6)
        assert counts.sum() == 6
        assert counts[0, 0, 1, 1] == 1
        assert counts[0, 1, 0, 1] == 1
        assert counts[0, 4, 0, 3] == 1
        assert counts[0, 3, 0, 3] == 2
        # Destination cell follows the covariates of the next epoch
        assert counts[0, 0, 0, 3] == 1

    def test_per_epoch(self):
        counts = count_transitions(
            small_dataset(), EXPOSURE_GRID, per_epoch=True
        )
        assert counts.shape == (2, 6, 2, 6)
        assert counts[0].sum() == 3
        assert counts[1, 1, 0, 1] == 1
        assert counts[1, 3, 0, 3] == 2

    def test_initial_cells(self):
        cells = initial_cell_distribution(small_dataset(), EXPOSURE_GRID)
        assert cells.tolist() == pytest.approx([2 / 3, 1 / 3])


class TestAdaptive:
    @staticmethod
    def counts():
        c = np.ones((1, 6, 2, 6), dtype=np.int64)
        c[0, 0, 0] = (2, 1, 1, 0, 0, 0)
        return c

    def test_relative_frequencies(self):
        mdp = build_adaptive_mdp(
            self.counts(), AugmentedStateSpace(3, 2), DEFAULT_PARAMS
        )
        assert mdp.size == 6
        assert mdp.horizon == 8
        for t in range(7):
            assert mdp.kernel.probabilities[t, 0, 0].tolist() == [
                0.5,
                0.25,
                0.25,
                0.0,
                0.0,
                0.0,
            ]

    def test_reward_invariance(self):
        """Stage rewards do not depend on covariate cells."""
        space = AugmentedStateSpace(3, 2)
        stage = build_adaptive_mdp(
            self.counts(), space, DEFAULT_PARAMS
        ).rewards.stage
        reference = reward_spec(DEFAULT_PARAMS).stage
        for x in range(2):
            for y in range(2):
                for i in (1, 2, 3):
                    for j in (1, 2, 3):
                        origin = space.index(i, x) - 1
                        target = space.index(j, y) - 1
                        assert np.array_equal(
                            stage[:, origin, :, target],
                            reference[:, i - 1, :, j - 1],
                        )

    def test_empty_rows(self):
        counts = self.counts()
        counts[0, 4, 1] = 0
        space = AugmentedStateSpace(3, 2)
        mdp = build_adaptive_mdp(counts, space, DEFAULT_PARAMS)
        assert np.allclose(mdp.kernel.probabilities[:, 4, 1], 1 / 6)
        with pytest.raises(UnestimableRowError) as exc:
            build_adaptive_mdp(counts, space, DEFAULT_PARAMS, smoothing=False)
        assert "stage=2, cell=1" in str(exc.value)
        assert "action 2" in str(exc.value)

    def test_invalid_counts(self):
        space = AugmentedStateSpace(3, 2)
        with pytest.raises(ModelConfigurationError):
            build_adaptive_mdp(np.ones((1, 3, 2, 3)), space, DEFAULT_PARAMS)
        with pytest.raises(ModelConfigurationError):
            build_adaptive_mdp(-self.counts(), space, DEFAULT_PARAMS)
        with pytest.raises(ModelConfigurationError):
            build_adaptive_mdp(np.ones((3, 6, 2, 6)), space, DEFAULT_PARAMS)

    def test_single_cell_reduction(self):
        """A one-cell grid gives the plain MDP with the same kernel."""
        counts = np.zeros((1, 3, 2, 3), dtype=np.int64)
        counts[0, :, 0] = (1, 3, 6)
        counts[0, :, 1] = (6, 3, 1)
        adaptive = AdaptivePlanner(counts, CovariateGrid([]), DEFAULT_PARAMS)
        plain = NonAdaptivePlanner(
            constant_models(treated_row=IMPROVING, untreated_row=WORSENING),
            DEFAULT_PARAMS,
        )
        assert np.array_equal(
            adaptive.decisions(profile()), plain.decisions(profile())
        )
        assert np.allclose(
            adaptive.solve(profile()).solution.values,
            action_matrix(plain.build_mdp(profile())).solution.values,
            atol=1e-12,
        )

    def test_planner(self):
        planner = AdaptivePlanner(
            self.counts(), EXPOSURE_GRID, DEFAULT_PARAMS
        )
        solved = planner.solve(profile())
        assert planner.solve(profile(age=30.0)) is solved
        assert planner.solve(profile(income=1000.0)) is not solved
        assert solved.stage_projection().shape == (7, 3, 2)
        assert np.array_equal(
            planner.decisions(profile(exposure=1.0)), solved.for_cell(1)
        )
        assert np.array_equal(
            solved.stage_projection()[:, :, 1], solved.for_cell(1)
        )
        doc = planner.to_json()
        assert doc["grid"] == EXPOSURE_GRID.to_json()
        assert np.array_equal(np.array(doc["counts"]), self.counts())

    def test_bounded_cache(self):
        """Every patient has its own income: old solutions are dropped."""
        planner = AdaptivePlanner(
            self.counts(), EXPOSURE_GRID, DEFAULT_PARAMS
        )
        incomes = 20000.0 + 1000.0 * np.arange(SOLUTION_CACHE_SIZE + 8)
        for income in incomes:
            planner.decisions(profile(income=float(income)))
        assert planner.cached_solutions() == SOLUTION_CACHE_SIZE
        last = profile(income=float(incomes[-1]))
        assert planner.solve(last) is planner.solve(last)


class TestActionMatrix:
    def test_plain(self):
        mdp = build_nonadaptive_mdp(true_models(), profile(), DEFAULT_PARAMS)
        matrix = action_matrix(mdp)
        assert isinstance(matrix, ActionMatrix)
        assert np.array_equal(matrix.for_cell(0), matrix.decisions)
        assert matrix.stage_projection().shape == (7, 3, 1)
        with pytest.raises(ModelConfigurationError):
            matrix.for_cell(1)

    def test_space_mismatch(self):
        mdp = build_nonadaptive_mdp(true_models(), profile(), DEFAULT_PARAMS)
        with pytest.raises(ModelConfigurationError):
            action_matrix(mdp, AugmentedStateSpace(3, 2))
