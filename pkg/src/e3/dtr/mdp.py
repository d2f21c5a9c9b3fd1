"""Finite-horizon Markov decision processes.

States are numbered 1..J (1 is the best health status), actions are global
identifiers 1..|A| among which each state admits a subset, and decision epochs
are numbered 1..N-1, N being the terminal epoch.

Arrays are stored zero-based: ``kernel[t - 1, i - 1, a - 1, j - 1]`` is the
probability to move from state i to state j when taking action a at epoch t.
Rows for inadmissible (state, action) couples are all zeros.
"""

from __future__ import annotations

from dataclasses import dataclass
import itertools
import json
import logging
import math
from typing import Any, Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from e3.dtr import DTRError


logger = logging.getLogger("dtr.mdp")

PROBABILITY_TOLERANCE = 1e-9
"""Maximum deviation from 1 for the sum of a probability vector."""

RENORMALIZE_TOLERANCE = 1e-6
"""Kernel rows whose sum deviates from 1 by less than this are renormalized."""

VALUE_TOLERANCE = 1e-9
"""Actions whose Q-value is within this of the maximum are optimal too."""

ENUMERATION_LIMIT = 10**6
"""Maximum number of policies that ``enumerate_optimal`` accepts to try."""

_ENUMERATION_CHUNK = 1 << 14


class InvalidMDPError(DTRError):
    """Raised when MDP components are inconsistent."""


class InvalidDistributionError(DTRError):
    """Raised when a vector is not a probability distribution."""


class InvalidPolicyError(DTRError):
    """Raised when a policy does not fit the MDP it is used with."""


class SizeLimitError(DTRError):
    """Raised when exhaustive policy enumeration would be too expensive."""


def _frozen(array: Any, dtype: Any = float) -> np.ndarray:
    result = np.array(array, dtype=dtype)
    result.setflags(write=False)
    return result


def check_distribution(
    row: Any, what: str = "probability vector"
) -> np.ndarray:
    """Check that ``row`` is a probability vector and return it as an array.

    :param row: Sequence of probabilities.
    :param what: Description of the vector, for error messages.
    :raise InvalidDistributionError: If ``row`` has negative or non-finite
        entries, or if it does not sum to 1 within PROBABILITY_TOLERANCE.
    """
    result = np.asarray(row, dtype=float)
    if result.ndim != 1 or result.size == 0:
        raise InvalidDistributionError(
            f"{what} must be a non-empty vector", origin="check_distribution"
        )
    if not np.all(np.isfinite(result)) or np.any(
        result < -PROBABILITY_TOLERANCE
    ):
        raise InvalidDistributionError(
            f"{what} has negative or non-finite entries: {result.tolist()}",
            origin="check_distribution",
        )
    total = float(result.sum())
    if abs(total - 1.0) > PROBABILITY_TOLERANCE:
        raise InvalidDistributionError(
            f"{what} sums to {total!r} instead of 1",
            origin="check_distribution",
        )
    return result


@dataclass(frozen=True)
class StateSpace:
    """Health statuses 1..size, 1 being the best one."""

    size: int

    def __post_init__(self) -> None:
        if self.size < 1:
            raise InvalidMDPError(
                f"state space needs at least one state, got {self.size}",
                origin="StateSpace",
            )

    @property
    def labels(self) -> range:
        return range(1, self.size + 1)

    def check(self, state: int) -> None:
        """Raise an InvalidMDPError if ``state`` is not a valid state."""
        if not 1 <= state <= self.size:
            raise InvalidMDPError(
                f"state {state} out of range 1..{self.size}",
                origin="StateSpace",
            )


@dataclass(frozen=True)
class ActionSet:
    """Admissible actions per state.

    ``admissible[s - 1]`` is the sorted tuple of action identifiers that
    state s admits. Action identifiers are global integers starting at 1.
    """

    admissible: Tuple[Tuple[int, ...], ...]

    def __post_init__(self) -> None:
        normalized = tuple(
            tuple(sorted({int(a) for a in actions}))
            for actions in self.admissible
        )
        if not normalized:
            raise InvalidMDPError(
                "action set needs at least one state", origin="ActionSet"
            )
        for state, actions in enumerate(normalized, 1):
            if not actions:
                raise InvalidMDPError(
                    f"state {state} has no admissible action",
                    origin="ActionSet",
                )
            if actions[0] < 1:
                raise InvalidMDPError(
                    f"state {state}: action identifiers start at 1",
                    origin="ActionSet",
                )
        object.__setattr__(self, "admissible", normalized)

    @classmethod
    def uniform(cls, states: int, actions: Sequence[int]) -> ActionSet:
        """Create an action set where all states admit the same actions."""
        return cls(tuple(tuple(actions) for _ in range(states)))

    @property
    def states(self) -> int:
        """Number of states this action set covers."""
        return len(self.admissible)

    @property
    def count(self) -> int:
        """Largest action identifier, i.e. the size of the action axis."""
        return max(actions[-1] for actions in self.admissible)

    def for_state(self, state: int) -> Tuple[int, ...]:
        return self.admissible[state - 1]

    def is_admissible(self, state: int, action: int) -> bool:
        return (
            1 <= state <= self.states
            and action in self.admissible[state - 1]
        )

    def mask(self) -> np.ndarray:
        """Boolean (J, |A|) array telling which couples are admissible."""
        result = np.zeros((self.states, self.count), dtype=bool)
        for state, actions in enumerate(self.admissible):
            result[state, [a - 1 for a in actions]] = True
        return result


class TransitionKernel:
    """Time-dependent transition probabilities p_t(j | i, a)."""

    def __init__(self, probabilities: Any, actions: ActionSet) -> None:
        """Validate and freeze transition probabilities.

        :param probabilities: Array-like of shape (N-1, J, |A|, J).
        :param actions: Admissible actions. Rows for inadmissible couples are
            ignored and stored as zeros.
        :raise InvalidMDPError: If the shape does not match ``actions``.
        :raise InvalidDistributionError: If an admissible row is not a
            probability distribution (up to RENORMALIZE_TOLERANCE).
        """
        p = np.array(probabilities, dtype=float)
        expected = (actions.states, actions.count, actions.states)
        if p.ndim != 4 or p.shape[0] < 1 or p.shape[1:] != expected:
            raise InvalidMDPError(
                f"kernel shape {p.shape} does not match (N-1, J, |A|, J)"
                f" with (J, |A|, J) = {expected}",
                origin="TransitionKernel",
            )

        mask = actions.mask()
        rows = p[:, mask, :]
        if not np.all(np.isfinite(rows)) or np.any(
            rows < -PROBABILITY_TOLERANCE
        ):
            raise InvalidDistributionError(
                "kernel has negative or non-finite admissible entries",
                origin="TransitionKernel",
            )
        sums = rows.sum(axis=-1)
        deviation = np.abs(sums - 1.0)
        worst = int(np.argmax(deviation))
        if deviation.flat[worst] > RENORMALIZE_TOLERANCE:
            t, k = np.unravel_index(worst, deviation.shape)
            i, a = np.argwhere(mask)[k]
            raise InvalidDistributionError(
                f"row (t={t + 1}, s={i + 1}, a={a + 1}) sums to"
                f" {sums[t, k]!r} instead of 1",
                origin="TransitionKernel",
            )

        drifting = (deviation > 0.0) | np.any(rows < 0.0, axis=-1)
        if np.any(drifting):
            logger.debug(
                "renormalizing %d kernel rows (max drift %.3g)",
                int(drifting.sum()),
                float(deviation.max()),
            )
            fixed = np.clip(rows[drifting], 0.0, None)
            rows[drifting] = fixed / fixed.sum(axis=-1, keepdims=True)

        p[:, mask, :] = rows
        p[:, ~mask, :] = 0.0

        self.actions = actions
        self.probabilities = _frozen(p)

    @property
    def epochs(self) -> int:
        """Number of decision epochs (N-1)."""
        return self.probabilities.shape[0]

    def row(self, t: int, state: int, action: int) -> np.ndarray:
        """Return the distribution of the next state.

        :param t: Decision epoch in 1..N-1.
        :param state: Current state.
        :param action: Action taken, must be admissible in ``state``.
        """
        if not self.actions.is_admissible(state, action):
            raise InvalidMDPError(
                f"action {action} is not admissible in state {state}",
                origin="TransitionKernel",
            )
        return self.probabilities[t - 1, state - 1, action - 1]


class RewardSpec:
    """Stage and terminal rewards.

    ``stage[t - 1, i - 1, a - 1, j - 1]`` is the reward collected at epoch t
    when moving from i to j under action a, ``terminal[j - 1]`` the reward
    collected at epoch N in state j.
    """

    def __init__(self, stage: Any, terminal: Any) -> None:
        self.stage = _frozen(stage)
        self.terminal = _frozen(terminal)
        if self.stage.ndim != 4:
            raise InvalidMDPError(
                f"stage rewards must have 4 dimensions, got {self.stage.ndim}",
                origin="RewardSpec",
            )
        if self.terminal.ndim != 1 or not np.all(
            np.isfinite(self.terminal)
        ):
            raise InvalidMDPError(
                "terminal rewards must be a finite vector",
                origin="RewardSpec",
            )


def expected_stage_reward(
    rewards: RewardSpec, row: Any, t: int, i: int, a: int
) -> float:
    """Return the expected reward of epoch t in state i under action a.

    :param rewards: Reward specification.
    :param row: Distribution of the next state.
    :param t: Decision epoch.
    :param i: Current state.
    :param a: Action taken.
    :raise InvalidDistributionError: If ``row`` is not a distribution.
    """
    dist = check_distribution(row, "transition row")
    stage = rewards.stage[t - 1, i - 1, a - 1]
    if stage.shape != dist.shape:
        raise InvalidMDPError(
            f"transition row has {dist.size} entries, expected {stage.size}",
            origin="expected_stage_reward",
        )
    return float(np.dot(stage, dist))


class FiniteHorizonMDP:
    """Finite-horizon MDP: states, actions, kernel and rewards."""

    def __init__(self, kernel: TransitionKernel, rewards: RewardSpec) -> None:
        actions = kernel.actions
        self.states = StateSpace(actions.states)
        self.actions = actions
        self.horizon = kernel.epochs + 1
        """Terminal epoch N."""

        self.kernel = kernel

        if rewards.stage.shape != kernel.probabilities.shape:
            raise InvalidMDPError(
                f"stage rewards shape {rewards.stage.shape} does not match"
                f" kernel shape {kernel.probabilities.shape}",
                origin="FiniteHorizonMDP",
            )
        if rewards.terminal.shape != (actions.states,):
            raise InvalidMDPError(
                f"terminal rewards must have {actions.states} entries",
                origin="FiniteHorizonMDP",
            )
        mask = actions.mask()
        stage = np.array(rewards.stage)
        if not np.all(np.isfinite(stage[:, mask, :])):
            raise InvalidMDPError(
                "stage rewards must be finite for admissible couples",
                origin="FiniteHorizonMDP",
            )
        stage[:, ~mask, :] = 0.0
        self.rewards = RewardSpec(stage, rewards.terminal)

    @classmethod
    def from_arrays(
        cls,
        kernel: Any,
        stage_reward: Any,
        terminal_reward: Any,
        actions: Optional[ActionSet] = None,
    ) -> FiniteHorizonMDP:
        """Build an MDP from raw arrays.

        :param actions: Admissible actions. If left to None, all states admit
            all actions of the kernel's action axis.
        """
        p = np.asarray(kernel, dtype=float)
        if actions is None:
            if p.ndim != 4:
                raise InvalidMDPError(
                    f"kernel must have 4 dimensions, got {p.ndim}",
                    origin="FiniteHorizonMDP",
                )
            actions = ActionSet.uniform(p.shape[1], range(1, p.shape[2] + 1))
        return cls(
            TransitionKernel(p, actions),
            RewardSpec(stage_reward, terminal_reward),
        )

    @property
    def size(self) -> int:
        """Number of states J."""
        return self.states.size


class Policy:
    """Deterministic Markov policy: one action per (epoch, state)."""

    def __init__(self, decisions: Any) -> None:
        """
        :param decisions: Integer array-like of shape (N-1, J) where
            ``decisions[t - 1][s - 1]`` is the action taken at epoch t in
            state s.
        """
        self.decisions = _frozen(decisions, dtype=np.int64)
        if self.decisions.ndim != 2 or 0 in self.decisions.shape:
            raise InvalidPolicyError(
                f"decision matrix must be 2D and non-empty, got shape"
                f" {self.decisions.shape}",
                origin="Policy",
            )

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Policy) and np.array_equal(
            self.decisions, other.decisions
        )

    def __hash__(self) -> int:
        return hash(self.decisions.tobytes())

    def __repr__(self) -> str:
        return f"Policy({self.decisions.tolist()})"

    def action(self, t: int, state: int) -> int:
        return int(self.decisions[t - 1, state - 1])

    def check(self, mdp: FiniteHorizonMDP) -> None:
        """Raise an InvalidPolicyError if this policy does not fit ``mdp``."""
        expected = (mdp.horizon - 1, mdp.size)
        if self.decisions.shape != expected:
            raise InvalidPolicyError(
                f"policy shape {self.decisions.shape} does not match"
                f" (N-1, J) = {expected}",
                origin="Policy",
            )
        mask = mdp.actions.mask()
        for (t, s), a in np.ndenumerate(self.decisions):
            if not (1 <= a <= mask.shape[1] and mask[s, a - 1]):
                raise InvalidPolicyError(
                    f"action {a} at (t={t + 1}, s={s + 1}) is not admissible",
                    origin="Policy",
                )


@dataclass(frozen=True, eq=False)
class PolicySolution:
    """Optimal policy of an MDP with its value table."""

    policy: Policy

    values: np.ndarray
    """(N, J) array: ``values[t - 1, s - 1]`` is the optimal expected total
    reward from epoch t in state s."""

    optimal_actions: Tuple[Tuple[FrozenSet[int], ...], ...]
    """``optimal_actions[t - 1][s - 1]`` is the set of optimal actions."""

    def value(self, t: int, state: int) -> float:
        return float(self.values[t - 1, state - 1])

    def optimal_set(self, t: int, state: int) -> FrozenSet[int]:
        return self.optimal_actions[t - 1][state - 1]


def backward_induction(mdp: FiniteHorizonMDP) -> PolicySolution:
    """Solve ``mdp`` by backward induction.

    The value table is filled from the terminal epoch backwards. Among the
    actions whose Q-value is within VALUE_TOLERANCE of the best one, the
    policy picks the lowest action identifier; all of them are recorded as
    optimal.
    """
    J = mdp.size
    N = mdp.horizon
    p = mdp.kernel.probabilities
    r = mdp.rewards.stage
    mask = mdp.actions.mask()
    states = np.arange(J)

    values = np.empty((N, J))
    values[N - 1] = mdp.rewards.terminal
    decisions = np.empty((N - 1, J), dtype=np.int64)
    optimal: List[Tuple[FrozenSet[int], ...]] = []

    for t in range(N - 2, -1, -1):
        q = np.einsum("iaj,iaj->ia", p[t], r[t] + values[t + 1])
        q = np.where(mask, q, -np.inf)
        best = q.max(axis=1)
        near = q >= (best - VALUE_TOLERANCE)[:, None]
        chosen = near.argmax(axis=1)
        decisions[t] = chosen + 1
        values[t] = q[states, chosen]
        optimal.append(
            tuple(
                frozenset(int(a) + 1 for a in np.flatnonzero(near[i]))
                for i in range(J)
            )
        )
    optimal.reverse()

    logger.debug("backward induction solved MDP with J=%d, N=%d", J, N)
    return PolicySolution(
        policy=Policy(decisions),
        values=_frozen(values),
        optimal_actions=tuple(optimal),
    )


def _forward_totals(
    mdp: FiniteHorizonMDP, decisions: np.ndarray, start: int
) -> np.ndarray:
    """Evaluate a batch of policies from every state at epoch ``start``.

    :param decisions: (K, N - start, J) array of actions for epochs
        start..N-1.
    :return: (K, J) array of expected total rewards.
    """
    J = mdp.size
    p = mdp.kernel.probabilities
    r = mdp.rewards.stage
    states = np.arange(J)[None, :]
    batch = decisions.shape[0]

    dist = np.broadcast_to(np.eye(J), (batch, J, J)).copy()
    totals = np.zeros((batch, J))
    for k, t in enumerate(range(start - 1, mdp.horizon - 1)):
        a = decisions[:, k, :] - 1
        p_pi = p[t, states, a]
        r_pi = (p_pi * r[t, states, a]).sum(axis=-1)
        totals += np.einsum("kij,kj->ki", dist, r_pi)
        dist = dist @ p_pi
    totals += dist @ mdp.rewards.terminal
    return totals


def evaluate_policy(
    mdp: FiniteHorizonMDP, policy: Policy, initial_state: int
) -> float:
    """Return the exact expected total reward of ``policy``.

    This propagates the state distribution forward from ``initial_state`` at
    epoch 1, accumulating expected stage rewards and the expected terminal
    reward.
    """
    policy.check(mdp)
    mdp.states.check(initial_state)
    totals = _forward_totals(
        mdp, np.asarray(policy.decisions)[None, :, :], start=1
    )
    return float(totals[0, initial_state - 1])


def policy_values(mdp: FiniteHorizonMDP, policy: Policy) -> np.ndarray:
    """Return the (N, J) value table of ``policy`` by backward evaluation."""
    policy.check(mdp)
    J = mdp.size
    N = mdp.horizon
    p = mdp.kernel.probabilities
    r = mdp.rewards.stage
    states = np.arange(J)

    values = np.empty((N, J))
    values[N - 1] = mdp.rewards.terminal
    for t in range(N - 2, -1, -1):
        a = policy.decisions[t] - 1
        values[t] = (
            p[t, states, a] * (r[t, states, a] + values[t + 1])
        ).sum(axis=-1)
    return _frozen(values)


def policy_count(mdp: FiniteHorizonMDP) -> int:
    """Return the number of deterministic Markov policies of ``mdp``."""
    per_epoch = math.prod(len(a) for a in mdp.actions.admissible)
    return per_epoch ** (mdp.horizon - 1)


def enumerate_optimal(
    mdp: FiniteHorizonMDP, limit: int = ENUMERATION_LIMIT
) -> PolicySolution:
    """Find optimal values by trying every deterministic Markov policy.

    For each start epoch t, every tail policy (decisions for epochs t..N-1)
    is evaluated forward from every state. This gives the optimal value of
    each (t, s) and the set of actions that start an optimal tail. The
    returned policy picks the lowest optimal action everywhere.

    :param limit: Maximum number of full policies to accept.
    :raise SizeLimitError: If ``mdp`` has more than ``limit`` policies.
    """
    total = policy_count(mdp)
    if total > limit:
        raise SizeLimitError(
            f"{total} policies to enumerate, limit is {limit}",
            origin="enumerate_optimal",
        )

    J = mdp.size
    N = mdp.horizon
    values = np.empty((N, J))
    values[N - 1] = mdp.rewards.terminal
    optimal: List[Tuple[FrozenSet[int], ...]] = [()] * (N - 1)

    for start in range(N - 1, 0, -1):
        tail = N - start
        choices = list(mdp.actions.admissible) * tail
        best = np.full(J, -np.inf)
        winners: List[set] = [set() for _ in range(J)]

        combos = itertools.product(*choices)
        while True:
            chunk = list(itertools.islice(combos, _ENUMERATION_CHUNK))
            if not chunk:
                break
            decisions = np.array(chunk, dtype=np.int64).reshape(
                len(chunk), tail, J
            )
            totals = _forward_totals(mdp, decisions, start)
            for s in range(J):
                chunk_best = totals[:, s].max()
                if chunk_best > best[s] + VALUE_TOLERANCE:
                    winners[s] = set()
                best[s] = max(best[s], chunk_best)
                near = totals[:, s] >= best[s] - VALUE_TOLERANCE
                winners[s].update(int(a) for a in decisions[near, 0, s])

        values[start - 1] = best
        optimal[start - 1] = tuple(frozenset(w) for w in winners)

    decisions = np.array(
        [[min(optimal[t][s]) for s in range(J)] for t in range(N - 1)],
        dtype=np.int64,
    )
    logger.debug("enumerated %d policies (J=%d, N=%d)", total, J, N)
    return PolicySolution(
        policy=Policy(decisions),
        values=_frozen(values),
        optimal_actions=tuple(optimal),
    )


def mdp_to_json(mdp: FiniteHorizonMDP) -> Dict[str, Any]:
    """Return the JSON document that describes ``mdp``.

    Inadmissible kernel and reward rows are encoded as null.
    """
    mask = mdp.actions.mask()

    def encode(array: np.ndarray) -> list:
        return [
            [
                [
                    array[t, i, a].tolist() if mask[i, a] else None
                    for a in range(mask.shape[1])
                ]
                for i in range(mask.shape[0])
            ]
            for t in range(array.shape[0])
        ]

    return {
        "J": mdp.size,
        "N": mdp.horizon,
        "actions": [list(a) for a in mdp.actions.admissible],
        "kernel": encode(mdp.kernel.probabilities),
        "stage_reward": encode(mdp.rewards.stage),
        "terminal_reward": mdp.rewards.terminal.tolist(),
    }


def mdp_from_json(doc: Dict[str, Any]) -> FiniteHorizonMDP:
    """Build an MDP from a document created by ``mdp_to_json``."""
    try:
        J = int(doc["J"])
        N = int(doc["N"])
        actions = ActionSet(tuple(tuple(a) for a in doc["actions"]))
        kernel_doc = doc["kernel"]
        stage_doc = doc["stage_reward"]
        terminal = doc["terminal_reward"]
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidMDPError(
            f"malformed MDP document: {exc}", origin="mdp_from_json"
        )
    if actions.states != J:
        raise InvalidMDPError(
            f"{actions.states} action lists for {J} states",
            origin="mdp_from_json",
        )

    def decode(rows: Any, what: str) -> np.ndarray:
        result = np.zeros((N - 1, J, actions.count, J))
        try:
            for t in range(N - 1):
                for i in range(J):
                    for a in range(actions.count):
                        value = rows[t][i][a]
                        if value is not None:
                            result[t, i, a] = value
        except (IndexError, TypeError, ValueError) as exc:
            raise InvalidMDPError(
                f"malformed {what}: {exc}", origin="mdp_from_json"
            )
        return result

    return FiniteHorizonMDP(
        TransitionKernel(decode(kernel_doc, "kernel"), actions),
        RewardSpec(decode(stage_doc, "stage rewards"), terminal),
    )


def dump_mdp(mdp: FiniteHorizonMDP, filename: str) -> None:
    """Write ``mdp`` to ``filename`` as JSON."""
    with open(filename, "w") as f:
        json.dump(mdp_to_json(mdp), f, indent=1)


def load_mdp(filename: str) -> FiniteHorizonMDP:
    """Read an MDP from a JSON file written by ``dump_mdp``."""
    with open(filename) as f:
        return mdp_from_json(json.load(f))
