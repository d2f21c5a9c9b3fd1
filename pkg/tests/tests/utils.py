"""Helpers for testcases."""

import numpy as np

from e3.dtr.cohort import CovariateSpec, GroundTruthDynamics
from e3.dtr.mdp import ActionSet, FiniteHorizonMDP
from e3.dtr.ordinal import FittedOrdinalModel, OrdinalDataset
from e3.dtr.policy import (
    CovariateProfile,
    RewardParameters,
    TransitionModelSet,
)


def random_mdp(rng, states=None, actions=None, horizon=None, sparse=False):
    """Draw a random MDP with J <= 3, |A| <= 2 and N <= 5.

    :param rng: numpy Generator.
    :param sparse: If true, some states only admit a subset of the actions.
    """
    J = states or int(rng.integers(1, 4))
    A = actions or int(rng.integers(1, 3))
    N = horizon or int(rng.integers(2, 6))
    if sparse and A > 1:
        # State 1 admits every action so that the action axis keeps size A
        admissible = ActionSet(
            tuple(
                tuple(
                    a
                    for a in range(1, A + 1)
                    if a == 1 or s == 0 or rng.random() < 0.5
                )
                for s in range(J)
            )
        )
    else:
        admissible = ActionSet.uniform(J, range(1, A + 1))
    kernel = rng.dirichlet(np.ones(J), size=(N - 1, J, A))
    stage = rng.normal(size=(N - 1, J, A, J))
    terminal = rng.normal(size=J)
    return FiniteHorizonMDP.from_arrays(kernel, stage, terminal, admissible)


def two_state_mdp(terminal=(1.0, 0.0)):
    """2-state, 2-action, N=2 MDP with a known optimal decision.

    From state 1, action 1 leads to (0.9, 0.1) for free and action 2 to
    (0.6, 0.4) for a cost of 0.1. State 2 behaves the same.
    """
    kernel = np.array([[[[0.9, 0.1], [0.6, 0.4]], [[0.9, 0.1], [0.6, 0.4]]]])
    stage = np.zeros((1, 2, 2, 2))
    stage[:, :, 1, :] = -0.1
    return FiniteHorizonMDP.from_arrays(kernel, stage, terminal)


def chain_mdp(states=3, horizon=4, reward=0.2, terminal=1.0):
    """Single-action MDP where every state moves to state 1 for sure.

    Each transition yields ``reward`` and state 1 yields ``terminal`` at the
    horizon; other terminal rewards are zero.
    """
    kernel = np.zeros((horizon - 1, states, 1, states))
    kernel[..., 0] = 1.0
    stage = np.full((horizon - 1, states, 1, states), reward)
    final = np.zeros(states)
    final[0] = terminal
    return FiniteHorizonMDP.from_arrays(kernel, stage, final)


def simulate_ordinal(rng, alpha, beta, n):
    """Draw a dataset from a proportional-odds model.

    Covariates are standard normal; ``logit P(y <= j) = alpha_j + beta . x``.
    """
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    X = rng.standard_normal((n, beta.size))
    eta = X @ beta
    cumulative = 1.0 / (1.0 + np.exp(-(alpha[None, :] + eta[:, None])))
    u = rng.random(n)
    y = 1 + (u[:, None] > cumulative).sum(axis=1)
    return OrdinalDataset(X, y, alpha.size + 1)


def profile(**values):
    """Create a profile with the reference covariates, updated by values."""
    base = {
        "age": 50.0,
        "bp": 110.0,
        "exposure": 0.0,
        "hormone": 700.0,
        "income": 80000.0,
    }
    base.update(values)
    return CovariateProfile.from_mapping(base)


def true_models(truth=None, covariates=("age", "bp", "exposure", "hormone")):
    """Return the transition models of the ground-truth dynamics.

    This gives a non-adaptive planner that knows the exact dynamics.
    """
    truth = truth or GroundTruthDynamics.default()
    models = {
        (s, a): truth.model(s, a)
        for s in range(1, truth.stages + 1)
        for a in truth.actions
    }
    return TransitionModelSet(
        models, covariates, ActionSet.uniform(truth.stages, truth.actions)
    )


def constant_models(stages=3, treated_row=None, untreated_row=None):
    """Return covariate-free models with fixed transition rows.

    Rows default to staying in place.
    """

    def model(row):
        cumulative = np.clip(np.cumsum(row)[:-1], 1e-12, 1 - 1e-12)
        alpha = np.log(cumulative / (1 - cumulative))
        return FittedOrdinalModel.from_parameters(alpha, np.zeros(1))

    models = {}
    for s in range(1, stages + 1):
        stay = np.full(stages, 1e-9)
        stay[s - 1] = 1.0
        stay /= stay.sum()
        models[(s, 1)] = model(
            stay if untreated_row is None else untreated_row
        )
        models[(s, 2)] = model(stay if treated_row is None else treated_row)
    return TransitionModelSet(
        models, ("age",), ActionSet.uniform(stages, (1, 2))
    )


DEFAULT_SPEC = CovariateSpec()
DEFAULT_PARAMS = RewardParameters()
