"""Tests for finite-horizon MDPs and their solvers."""

import json

import numpy as np
import pytest

from e3.dtr.mdp import (
    ActionSet,
    FiniteHorizonMDP,
    InvalidDistributionError,
    InvalidMDPError,
    InvalidPolicyError,
    Policy,
    RewardSpec,
    SizeLimitError,
    StateSpace,
    TransitionKernel,
    backward_induction,
    check_distribution,
    dump_mdp,
    enumerate_optimal,
    evaluate_policy,
    expected_stage_reward,
    load_mdp,
    mdp_from_json,
    mdp_to_json,
    policy_count,
    policy_values,
)

from .utils import chain_mdp, random_mdp, two_state_mdp


def random_policy(rng, mdp):
    """Draw an admissible policy uniformly at random."""
    return Policy(
        [
            [rng.choice(mdp.actions.for_state(s)) for s in mdp.states.labels]
            for _ in range(mdp.horizon - 1)
        ]
    )


class TestComponents:
    """Validation of the MDP building blocks."""

    def test_state_space(self):
        assert list(StateSpace(3).labels) == [1, 2, 3]
        with pytest.raises(InvalidMDPError):
            StateSpace(0)
        with pytest.raises(InvalidMDPError):
            StateSpace(2).check(3)

    def test_action_set(self):
        actions = ActionSet(((2, 1), (1,)))
        assert actions.admissible == ((1, 2), (1,))
        assert actions.count == 2
        assert actions.is_admissible(1, 2)
        assert not actions.is_admissible(2, 2)
        assert actions.mask().tolist() == [[True, True], [True, False]]
        with pytest.raises(InvalidMDPError):
            ActionSet(((1,), ()))
        with pytest.raises(InvalidMDPError):
            ActionSet(((0, 1),))

    def test_check_distribution(self):
        assert check_distribution([0.25, 0.75]).tolist() == [0.25, 0.75]
        with pytest.raises(InvalidDistributionError):
            check_distribution([0.5, 0.6])
        with pytest.raises(InvalidDistributionError):
            check_distribution([1.5, -0.5])
        with pytest.raises(InvalidDistributionError):
            check_distribution([])

    def test_kernel_renormalizes_small_drift(self):
        p = np.array([[[[0.5 + 5e-7, 0.5]], [[0.0, 1.0]]]])
        kernel = TransitionKernel(p, ActionSet.uniform(2, (1,)))
        assert kernel.row(1, 1, 1).sum() == pytest.approx(1.0, abs=1e-15)
        assert kernel.row(1, 1, 1)[0] > kernel.row(1, 1, 1)[1]

    def test_kernel_rejects_large_drift(self):
        p = np.array([[[[0.5 + 1e-3, 0.5]], [[0.0, 1.0]]]])
        with pytest.raises(InvalidDistributionError) as exc:
            TransitionKernel(p, ActionSet.uniform(2, (1,)))
        assert "t=1, s=1, a=1" in str(exc.value)

    def test_kernel_ignores_inadmissible_rows(self):
        p = np.zeros((1, 2, 2, 2))
        p[0, :, 0, 0] = 1.0
        p[0, 0, 1] = (0.3, 0.7)
        p[0, 1, 1] = (7.0, 7.0)
        kernel = TransitionKernel(p, ActionSet(((1, 2), (1,))))
        assert kernel.probabilities[0, 1, 1].tolist() == [0.0, 0.0]
        with pytest.raises(InvalidMDPError):
            kernel.row(1, 2, 2)

    def test_kernel_is_frozen(self):
        kernel = two_state_mdp().kernel
        with pytest.raises(ValueError):
            kernel.probabilities[0, 0, 0, 0] = 0.5

    def test_kernel_shape(self):
        with pytest.raises(InvalidMDPError):
            TransitionKernel(np.ones((1, 2, 2)), ActionSet.uniform(2, (1,)))

    def test_rewards_shape(self):
        mdp = two_state_mdp()
        with pytest.raises(InvalidMDPError):
            FiniteHorizonMDP(
                mdp.kernel, RewardSpec(np.zeros((1, 2, 2, 2)), [0])
            )
        with pytest.raises(InvalidMDPError):
            FiniteHorizonMDP(
                mdp.kernel, RewardSpec(np.zeros((2, 2, 2, 2)), [0, 0])
            )


class TestExpectedStageReward:
    rewards = RewardSpec(np.array([1.0, 0.0, -1.0]).reshape(1, 1, 1, 3), [0])

    def test_degenerate_row(self):
        assert expected_stage_reward(self.rewards, [1, 0, 0], 1, 1, 1) == 1.0

    def test_dot_product(self):
        value = expected_stage_reward(self.rewards, [0.5, 0.3, 0.2], 1, 1, 1)
        assert value == pytest.approx(0.3, abs=1e-15)

    def test_invalid_row(self):
        with pytest.raises(InvalidDistributionError):
            expected_stage_reward(self.rewards, [0.5, 0.3, 0.3], 1, 1, 1)


class TestBackwardInduction:
    def test_two_state_example(self):
        solution = backward_induction(two_state_mdp())
        assert solution.policy.action(1, 1) == 1
        assert solution.value(1, 1) == pytest.approx(0.9, abs=1e-12)
        assert solution.optimal_set(1, 1) == frozenset({1})

    def test_other_action_value(self):
        """Forcing action 2 gives 0.6 - 0.1."""
        mdp = two_state_mdp()
        forced = Policy([[2, 2]])
        assert evaluate_policy(mdp, forced, 1) == pytest.approx(0.5)

    def test_terminal_values(self):
        mdp = random_mdp(np.random.default_rng(1), 3, 2, 4)
        solution = backward_induction(mdp)
        assert np.array_equal(solution.values[-1], mdp.rewards.terminal)

    def test_single_action(self):
        mdp = random_mdp(np.random.default_rng(2), 3, 1, 5)
        solution = backward_induction(mdp)
        assert np.all(solution.policy.decisions == 1)
        for s in mdp.states.labels:
            assert evaluate_policy(
                mdp, solution.policy, s
            ) == pytest.approx(solution.value(1, s), abs=1e-9)

    def test_ties_pick_lowest_action(self):
        kernel = np.full((2, 2, 2, 2), 0.5)
        mdp = FiniteHorizonMDP.from_arrays(
            kernel, np.zeros(kernel.shape), [1.0, 0.0]
        )
        solution = backward_induction(mdp)
        assert np.all(solution.policy.decisions == 1)
        assert solution.optimal_set(1, 2) == frozenset({1, 2})

    def test_bellman_consistency(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            mdp = random_mdp(rng, sparse=True)
            solution = backward_induction(mdp)
            p = mdp.kernel.probabilities
            r = mdp.rewards.stage
            for t in range(1, mdp.horizon):
                for s in mdp.states.labels:
                    q = [
                        p[t - 1, s - 1, a - 1]
                        @ (r[t - 1, s - 1, a - 1] + solution.values[t])
                        for a in mdp.actions.for_state(s)
                    ]
                    assert solution.value(t, s) == pytest.approx(
                        max(q), abs=1e-9
                    )

    def test_determinism(self):
        mdp = random_mdp(np.random.default_rng(4), 3, 2, 5)
        first, second = backward_induction(mdp), backward_induction(mdp)
        assert first.values.tobytes() == second.values.tobytes()
        assert first.policy == second.policy
        assert first.optimal_actions == second.optimal_actions

    def test_policy_values(self):
        mdp = random_mdp(np.random.default_rng(5), 3, 2, 5)
        solution = backward_induction(mdp)
        assert np.allclose(
            policy_values(mdp, solution.policy), solution.values, atol=1e-12
        )


class TestOracle:
    """Exhaustive enumeration agrees with backward induction."""

    def test_two_state_example(self):
        mdp = two_state_mdp()
        assert policy_count(mdp) == 4
        solution = enumerate_optimal(mdp)
        assert solution.value(1, 1) == pytest.approx(0.9, abs=1e-12)
        assert solution.policy == backward_induction(mdp).policy

    def test_single_action(self):
        mdp = chain_mdp()
        solution = enumerate_optimal(mdp)
        assert solution.value(1, 2) == pytest.approx(
            evaluate_policy(mdp, Policy(np.ones((3, 3), dtype=int)), 2)
        )

    def test_random_instances(self):
        rng = np.random.default_rng(20240521)
        worst = 0.0
        for k in range(100):
            mdp = random_mdp(rng, sparse=k % 2 == 1)
            oracle = enumerate_optimal(mdp)
            solution = backward_induction(mdp)
            worst = max(
                worst, float(np.abs(oracle.values - solution.values).max())
            )
            for s in mdp.states.labels:
                assert evaluate_policy(
                    mdp, solution.policy, s
                ) == pytest.approx(oracle.value(1, s), abs=1e-9)
        assert worst < 1e-9

    def test_size_limit(self):
        mdp = random_mdp(np.random.default_rng(6), 3, 2, 9)
        with pytest.raises(SizeLimitError):
            enumerate_optimal(mdp)


class TestProperties:
    def test_chain_value(self):
        """Three sure rewards of 0.2 and a terminal reward of 1."""
        mdp = chain_mdp()
        policy = Policy(np.ones((3, 3), dtype=int))
        assert evaluate_policy(mdp, policy, 3) == pytest.approx(1.6)

    def test_dominance(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            mdp = random_mdp(rng, sparse=True)
            solution = backward_induction(mdp)
            policy = random_policy(rng, mdp)
            for s in mdp.states.labels:
                assert (
                    evaluate_policy(mdp, policy, s)
                    <= solution.value(1, s) + 1e-9
                )

    def test_terminal_shift(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            mdp = random_mdp(rng, 3, 2)
            shifted = FiniteHorizonMDP(
                mdp.kernel,
                RewardSpec(mdp.rewards.stage, mdp.rewards.terminal + 2.5),
            )
            base, moved = backward_induction(mdp), backward_induction(shifted)
            assert np.allclose(moved.values, base.values + 2.5, atol=1e-9)
            assert moved.optimal_actions == base.optimal_actions

    def test_more_actions_never_hurt(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            kernel = rng.dirichlet(np.ones(3), size=(4, 3, 2))
            stage = rng.normal(size=(4, 3, 2, 3))
            terminal = rng.normal(size=3)
            restricted = FiniteHorizonMDP.from_arrays(
                kernel, stage, terminal, ActionSet(((1,), (1, 2), (2,)))
            )
            full = FiniteHorizonMDP.from_arrays(kernel, stage, terminal)
            assert np.all(
                backward_induction(full).values
                >= backward_induction(restricted).values - 1e-12
            )

    def test_inadmissible_policy(self):
        mdp = FiniteHorizonMDP.from_arrays(
            np.full((1, 2, 2, 2), 0.5),
            np.zeros((1, 2, 2, 2)),
            [0.0, 0.0],
            ActionSet(((1, 2), (1,))),
        )
        with pytest.raises(InvalidPolicyError):
            evaluate_policy(mdp, Policy([[1, 2]]), 1)
        with pytest.raises(InvalidPolicyError):
            evaluate_policy(mdp, Policy([[1, 1], [1, 1]]), 1)


class TestSerialization:
    def test_document(self):
        mdp = FiniteHorizonMDP.from_arrays(
            np.full((1, 2, 2, 2), 0.5),
            np.ones((1, 2, 2, 2)),
            [1.0, 0.0],
            ActionSet(((1, 2), (1,))),
        )
        doc = mdp_to_json(mdp)
        assert doc["J"] == 2
        assert doc["N"] == 2
        assert doc["actions"] == [[1, 2], [1]]
        assert doc["kernel"][0][1][1] is None
        assert doc["stage_reward"][0][0][1] == [1.0, 1.0]

    def test_file(self):
        mdp = random_mdp(np.random.default_rng(10), 3, 2, 4, sparse=True)
        dump_mdp(mdp, "mdp.json")
        with open("mdp.json") as f:
            assert json.load(f)["N"] == 4
        loaded = load_mdp("mdp.json")
        assert loaded.actions == mdp.actions
        assert np.array_equal(
            backward_induction(loaded).values, backward_induction(mdp).values
        )

    def test_hand_written_document(self):
        doc = {
            "J": 2,
            "N": 2,
            "actions": [[1, 2], [1]],
            "kernel": [[[[1.0, 0.0], [0.0, 1.0]], [[0.5, 0.5], None]]],
            "stage_reward": [[[[0.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], None]]],
            "terminal_reward": [1.0, 0.0],
        }
        mdp = mdp_from_json(doc)
        assert mdp.size == 2
        assert mdp.horizon == 2
        solution = backward_induction(mdp)
        assert solution.policy.decisions.tolist() == [[1, 1]]
        assert solution.value(1, 2) == pytest.approx(0.5)

    def test_malformed_document(self):
        doc = mdp_to_json(chain_mdp())
        del doc["N"]
        with pytest.raises(InvalidMDPError):
            mdp_from_json(doc)
        doc = mdp_to_json(chain_mdp())
        doc["J"] = 4
        with pytest.raises(InvalidMDPError):
            mdp_from_json(doc)
