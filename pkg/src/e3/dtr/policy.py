"""Covariate-adjusted treatment policies.

Two ways to turn patient covariates into an MDP:

* the non-adaptive approach fits one ordinal model per (state, action), or
  per (epoch, state, action), and instantiates a J-state MDP for each patient
  profile;

* the adaptive approach bins covariate profiles into grid cells, estimates
  empirical transitions over the augmented (stage, cell) state space and
  solves one large MDP.
"""

from __future__ import annotations

from dataclasses import dataclass
import functools
import json
import logging
import math
import os
from typing import (
    Any,
    Dict,
    FrozenSet,
    Iterable,
    List,
    Mapping,
    Optional,
    Sequence,
    Tuple,
    TYPE_CHECKING,
)

import numpy as np

from e3.dtr import DTRError
from e3.dtr.mdp import (
    ActionSet,
    FiniteHorizonMDP,
    Policy,
    PolicySolution,
    RewardSpec,
    TransitionKernel,
    backward_induction,
    policy_values,
)
from e3.dtr.ordinal import (
    FitSettings,
    FittedOrdinalModel,
    OrdinalDataset,
    fit,
    model_from_json,
    model_to_json,
    predict_row,
)
from e3.dtr.scheduler import WorkUnit, run_work_units

if TYPE_CHECKING:
    from e3.dtr.cohort import TrajectoryDataset
    from e3.dtr.running_status import RunningStatus


logger = logging.getLogger("dtr.policy")

REMISSION = 1
"""Action identifier for remission (no treatment)."""

TREATMENT = 2
"""Action identifier for treatment."""

SOLUTION_CACHE_SIZE = 32
"""Number of incomes whose augmented MDP solution an AdaptivePlanner keeps."""


class ModelConfigurationError(DTRError):
    """Raised when models, profiles and rewards do not fit together."""


class UnestimableRowError(DTRError):
    """Raised when an empirical transition row has no observation."""


@dataclass(frozen=True)
class CovariateProfile:
    """Named covariate values for one patient."""

    names: Tuple[str, ...]
    values: Tuple[float, ...]
    indicators: FrozenSet[str] = frozenset({"exposure"})
    """Names of the binary covariates."""

    def __post_init__(self) -> None:
        names = tuple(self.names)
        values = tuple(float(v) for v in self.values)
        if len(names) != len(values) or len(set(names)) != len(names):
            raise ModelConfigurationError(
                f"invalid covariate names {names} for {len(values)} values",
                origin="CovariateProfile",
            )
        for name, value in zip(names, values):
            if not math.isfinite(value):
                raise ModelConfigurationError(
                    f"covariate {name} is not finite",
                    origin="CovariateProfile",
                )
            if name in self.indicators and value not in (0.0, 1.0):
                raise ModelConfigurationError(
                    f"indicator {name} must be 0 or 1, got {value}",
                    origin="CovariateProfile",
                )
        if "income" in names and values[names.index("income")] <= 0.0:
            raise ModelConfigurationError(
                "income must be positive", origin="CovariateProfile"
            )
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "indicators", frozenset(self.indicators))

    @classmethod
    def from_mapping(
        cls,
        mapping: Mapping[str, float],
        indicators: Iterable[str] = ("exposure",),
    ) -> CovariateProfile:
        return cls(
            tuple(mapping), tuple(mapping.values()), frozenset(indicators)
        )

    def __getitem__(self, name: str) -> float:
        try:
            return self.values[self.names.index(name)]
        except ValueError:
            raise ModelConfigurationError(
                f"profile has no covariate {name}", origin="CovariateProfile"
            )

    def as_dict(self) -> Dict[str, float]:
        return dict(zip(self.names, self.values))

    def vector(self, names: Sequence[str]) -> np.ndarray:
        """Return the values of the given covariates, in that order."""
        return np.array([self[name] for name in names], dtype=float)

    def replace(self, **changes: float) -> CovariateProfile:
        values = self.as_dict()
        for name, value in changes.items():
            if name not in values:
                raise ModelConfigurationError(
                    f"profile has no covariate {name}",
                    origin="CovariateProfile",
                )
            values[name] = value
        return CovariateProfile.from_mapping(values, self.indicators)

    @property
    def income(self) -> Optional[float]:
        return self["income"] if "income" in self.names else None


@dataclass(frozen=True)
class RewardParameters:
    """Constants of the reward function.

    The stage reward for moving from stage i to stage j under action a at
    epoch t is ``g (i - j) / (t + 1)^2 - (C_a / income) exp(-decay t)`` and
    the terminal reward in stage j is ``g (J - j) / (N + 1)^2``.
    """

    weight: float = 0.7
    """Progression weight g."""

    costs: Tuple[float, ...] = (0.0, 5000.0)
    """``costs[a - 1]`` is the cost C_a of action a."""

    decay: float = 1.2
    """Cost decay rate lambda."""

    income: float = 80000.0
    horizon: int = 8
    """Terminal epoch N."""

    stages: int = 3
    """Number J of health statuses."""

    def __post_init__(self) -> None:
        costs = tuple(float(c) for c in self.costs)
        object.__setattr__(self, "costs", costs)

        def error(message: str) -> ModelConfigurationError:
            return ModelConfigurationError(message, origin="RewardParameters")

        if not self.weight > 0.0:
            raise error(f"progression weight must be positive: {self.weight}")
        if not self.decay >= 0.0:
            raise error(f"decay must be non-negative: {self.decay}")
        if not self.income > 0.0:
            raise error(f"income must be positive: {self.income}")
        if self.horizon < 2:
            raise error(f"horizon must be at least 2: {self.horizon}")
        if self.stages < 1:
            raise error(f"need at least one stage: {self.stages}")
        if not costs or any(not (math.isfinite(c) and c >= 0) for c in costs):
            raise error(f"costs must be finite and non-negative: {costs}")
        if costs[REMISSION - 1] != 0.0:
            raise error("remission must have zero cost")

    @property
    def actions(self) -> Tuple[int, ...]:
        return tuple(range(1, len(self.costs) + 1))

    def with_income(self, income: float) -> RewardParameters:
        return RewardParameters(
            weight=self.weight,
            costs=self.costs,
            decay=self.decay,
            income=income,
            horizon=self.horizon,
            stages=self.stages,
        )

    def cost(self, action: int) -> float:
        return self.costs[action - 1]


def stage_reward(
    i: int, j: int, a: int, t: int, params: RewardParameters
) -> float:
    """Return the reward of moving from stage i to j under action a at t."""
    for name, value in (("i", i), ("j", j)):
        if not 1 <= value <= params.stages:
            raise ModelConfigurationError(
                f"stage {name}={value} out of range 1..{params.stages}",
                origin="stage_reward",
            )
    if not 1 <= t < params.horizon:
        raise ModelConfigurationError(
            f"epoch {t} out of range 1..{params.horizon - 1}",
            origin="stage_reward",
        )
    if not 1 <= a <= len(params.costs):
        raise ModelConfigurationError(
            f"unknown action {a}", origin="stage_reward"
        )
    progress = params.weight * (i - j) / (t + 1) ** 2
    return progress - params.cost(a) / params.income * math.exp(
        -params.decay * t
    )


def terminal_reward(j: int, params: RewardParameters) -> float:
    """Return the reward of ending in stage j."""
    if not 1 <= j <= params.stages:
        raise ModelConfigurationError(
            f"stage {j} out of range 1..{params.stages}",
            origin="terminal_reward",
        )
    return params.weight * (params.stages - j) / (params.horizon + 1) ** 2


def reward_spec(
    params: RewardParameters, stage_of: Optional[np.ndarray] = None
) -> RewardSpec:
    """Build reward arrays for an MDP whose states map to stages.

    :param params: Reward constants.
    :param stage_of: Stage (1..J) of each MDP state. Defaults to the identity
        mapping of the J-state MDP.
    """
    if stage_of is None:
        stage_of = np.arange(1, params.stages + 1)
    stages = np.asarray(stage_of, dtype=float)
    t = np.arange(1, params.horizon, dtype=float)

    progress = (
        params.weight
        * (stages[None, :, None, None] - stages[None, None, None, :])
        / (t[:, None, None, None] + 1.0) ** 2
    )
    cost = (
        np.array(params.costs)[None, None, :, None]
        / params.income
        * np.exp(-params.decay * t)[:, None, None, None]
    )
    stage = progress - cost
    terminal = params.weight * (params.stages - stages) / (
        params.horizon + 1
    ) ** 2
    return RewardSpec(stage, terminal)


class TransitionModelSet:
    """Fitted ordinal models for every (state, action).

    When ``per_epoch`` is true, models are indexed by (epoch, state, action)
    instead.
    """

    INDEX_FILENAME = "models.json"

    def __init__(
        self,
        models: Mapping[Tuple[int, ...], FittedOrdinalModel],
        covariates: Sequence[str],
        actions: ActionSet,
        per_epoch: bool = False,
        epochs: int = 1,
    ) -> None:
        self.models = dict(models)
        self.covariates = tuple(covariates)
        self.actions = actions
        self.per_epoch = per_epoch
        self.epochs = epochs if per_epoch else 1

        for key, model in self.models.items():
            if model.dimension != len(self.covariates):
                raise ModelConfigurationError(
                    f"model {key} has {model.dimension} coefficients for"
                    f" {len(self.covariates)} covariates",
                    origin="TransitionModelSet",
                )
            if model.categories != self.states:
                raise ModelConfigurationError(
                    f"model {key} has {model.categories} categories for"
                    f" {self.states} states",
                    origin="TransitionModelSet",
                )

    @property
    def states(self) -> int:
        return self.actions.states

    def model_for(self, t: int, state: int, action: int) -> FittedOrdinalModel:
        key = (t, state, action) if self.per_epoch else (state, action)
        try:
            return self.models[key]
        except KeyError:
            raise ModelConfigurationError(
                f"no transition model for {key}", origin="TransitionModelSet"
            )

    def kernel(self, x: np.ndarray, epochs: int) -> np.ndarray:
        """Return the (epochs, J, |A|, J) kernel for covariate vector x."""
        if self.per_epoch and epochs > self.epochs:
            raise ModelConfigurationError(
                f"models cover {self.epochs} epochs, {epochs} requested",
                origin="TransitionModelSet",
            )
        J = self.states
        result = np.zeros((epochs, J, self.actions.count, J))
        for t in range(1, (epochs if self.per_epoch else 1) + 1):
            for s in range(1, J + 1):
                for a in self.actions.for_state(s):
                    result[t - 1, s - 1, a - 1] = predict_row(
                        self.model_for(t, s, a), x
                    )
        if not self.per_epoch:
            result[1:] = result[0]
        return result

    def to_json(self) -> Dict[str, Any]:
        return {
            "covariates": list(self.covariates),
            "actions": [list(a) for a in self.actions.admissible],
            "per_epoch": self.per_epoch,
            "epochs": self.epochs,
            "models": [
                {"key": list(key), "model": model_to_json(self.models[key])}
                for key in sorted(self.models)
            ],
        }

    @classmethod
    def from_json(cls, doc: Dict[str, Any]) -> TransitionModelSet:
        try:
            return cls(
                {
                    tuple(int(k) for k in entry["key"]): model_from_json(
                        entry["model"]
                    )
                    for entry in doc["models"]
                },
                doc["covariates"],
                ActionSet(tuple(tuple(a) for a in doc["actions"])),
                per_epoch=bool(doc["per_epoch"]),
                epochs=int(doc["epochs"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelConfigurationError(
                f"malformed transition models document: {exc}",
                origin="TransitionModelSet",
            )

    def save(self, directory: str, header: Mapping[str, Any]) -> str:
        """Write the set to ``directory`` and return the filename."""
        filename = os.path.join(directory, self.INDEX_FILENAME)
        doc = dict(header)
        doc.update(self.to_json())
        with open(filename, "w") as f:
            json.dump(doc, f, indent=1)
        return filename

    @classmethod
    def load(cls, directory: str) -> TransitionModelSet:
        with open(os.path.join(directory, cls.INDEX_FILENAME)) as f:
            return cls.from_json(json.load(f))


def fit_transition_models(
    dataset: TrajectoryDataset,
    covariates: Sequence[str],
    settings: FitSettings = FitSettings(),
    per_epoch: bool = False,
    actions: Sequence[int] = (REMISSION, TREATMENT),
    jobs: int = 1,
    status: Optional[RunningStatus] = None,
) -> TransitionModelSet:
    """Fit one ordinal model per (state, action), or per (t, state, action).

    Records of every patient are pooled; the next stage is the outcome and
    the record's covariates are the predictors.
    """
    action_set = ActionSet.uniform(dataset.stages, actions)
    epochs = dataset.horizon - 1
    keys: List[Tuple[int, ...]]
    if per_epoch:
        keys = [
            (t, s, a)
            for t in range(1, epochs + 1)
            for s in range(1, dataset.stages + 1)
            for a in actions
        ]
    else:
        keys = [(s, a) for s in range(1, dataset.stages + 1) for a in actions]

    units = []
    for key in keys:
        if per_epoch:
            t, s, a = key
            context = {"epoch": t, "state": s, "action": a}
        else:
            s, a = key
            t = None
            context = {"state": s, "action": a}
        data = dataset.ordinal_dataset(s, a, covariates, epoch=t)
        if data.size == 0:
            raise ModelConfigurationError(
                f"no trajectory record for {context}",
                origin="fit_transition_models",
            )
        units.append(
            WorkUnit(
                uid="fit." + ".".join(f"{k}{v}" for k, v in context.items()),
                callback=_fit_callback(data, settings, context),
            )
        )

    results = run_work_units(units, jobs=jobs, status=status)
    logger.info(
        "fitted %d transition models on %d covariates",
        len(results),
        len(covariates),
    )
    return TransitionModelSet(
        dict(zip(keys, results)),
        covariates,
        action_set,
        per_epoch=per_epoch,
        epochs=epochs,
    )


def _fit_callback(
    data: OrdinalDataset, settings: FitSettings, context: Dict[str, int]
) -> Any:
    return lambda: fit(data, settings, context=context)


def build_nonadaptive_mdp(
    models: TransitionModelSet,
    profile: CovariateProfile,
    params: RewardParameters,
) -> FiniteHorizonMDP:
    """Instantiate the J-state MDP of one patient.

    Transition rows come from the fitted models evaluated at the profile's
    covariates. The cost term uses the profile's income when it has one.
    """
    if models.states != params.stages:
        raise ModelConfigurationError(
            f"models have {models.states} states, rewards {params.stages}",
            origin="build_nonadaptive_mdp",
        )
    if profile.income is not None:
        params = params.with_income(profile.income)
    kernel = models.kernel(
        profile.vector(models.covariates), params.horizon - 1
    )
    if kernel.shape[2] > len(params.costs):
        raise ModelConfigurationError(
            f"no cost for action {kernel.shape[2]}",
            origin="build_nonadaptive_mdp",
        )
    rewards = reward_spec(params)
    stage = rewards.stage[:, :, : kernel.shape[2], :]
    return FiniteHorizonMDP(
        TransitionKernel(kernel, models.actions),
        RewardSpec(stage, rewards.terminal),
    )


@dataclass(frozen=True)
class GridDimension:
    """Binning of one covariate.

    The level of a value is the number of edges not greater than it.
    """

    name: str
    edges: Tuple[float, ...]

    @property
    def levels(self) -> int:
        return len(self.edges) + 1

    def level_of(self, values: Any) -> np.ndarray:
        return np.searchsorted(
            np.asarray(self.edges), np.asarray(values, dtype=float), "right"
        )


class CovariateGrid:
    """Partition of the covariate space into cells.

    Cells are numbered 0..size-1 in row-major order of the dimensions.
    """

    def __init__(self, dimensions: Sequence[GridDimension]) -> None:
        self.dimensions = tuple(dimensions)
        names = [d.name for d in self.dimensions]
        if len(set(names)) != len(names):
            raise ModelConfigurationError(
                f"duplicate grid covariates: {names}", origin="CovariateGrid"
            )

    @classmethod
    def from_profiles(
        cls,
        profiles: Sequence[CovariateProfile],
        names: Sequence[str],
        levels: int = 3,
    ) -> CovariateGrid:
        """Bin each covariate at the empirical quantiles of ``profiles``.

        Indicators get two levels; continuous covariates get ``levels``
        levels (tertiles by default), fewer when quantiles coincide.
        """
        if levels < 1:
            raise ModelConfigurationError(
                f"grid needs at least one level, got {levels}",
                origin="CovariateGrid",
            )
        if not profiles:
            raise ModelConfigurationError(
                "cannot bin an empty cohort", origin="CovariateGrid"
            )
        dimensions = []
        for name in names:
            values = np.array([p[name] for p in profiles])
            if name in profiles[0].indicators:
                edges: Tuple[float, ...] = (0.5,)
            else:
                quantiles = np.arange(1, levels) / levels
                edges = tuple(np.unique(np.quantile(values, quantiles)))
            dimensions.append(GridDimension(name, edges))
        return cls(dimensions)

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(d.name for d in self.dimensions)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(d.levels for d in self.dimensions)

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    def cells_of(self, X: Any) -> np.ndarray:
        """Return the cell of each row of X (columns ordered like names)."""
        values = np.asarray(X, dtype=float)
        if values.ndim == 1:
            values = values[None, :]
        if not self.dimensions:
            return np.zeros(values.shape[0], dtype=np.int64)
        levels = tuple(
            d.level_of(values[:, k]) for k, d in enumerate(self.dimensions)
        )
        return np.ravel_multi_index(levels, self.shape).astype(np.int64)

    def cell_of(self, profile: CovariateProfile) -> int:
        return int(self.cells_of(profile.vector(self.names))[0])

    def describe(self, cell: int) -> Dict[str, int]:
        """Return the level of each covariate in ``cell``."""
        levels = np.unravel_index(cell, self.shape) if self.shape else ()
        return {d.name: int(lv) for d, lv in zip(self.dimensions, levels)}

    def to_json(self) -> List[Dict[str, Any]]:
        return [
            {"name": d.name, "edges": list(d.edges)} for d in self.dimensions
        ]

    @classmethod
    def from_json(cls, doc: List[Dict[str, Any]]) -> CovariateGrid:
        return cls(
            [
                GridDimension(
                    str(d["name"]), tuple(float(e) for e in d["edges"])
                )
                for d in doc
            ]
        )


@dataclass(frozen=True)
class AugmentedStateSpace:
    """States (stage, cell) numbered ``cell * stages + stage``."""

    stages: int
    cells: int

    @property
    def size(self) -> int:
        return self.stages * self.cells

    def index(self, stage: int, cell: int) -> int:
        if not (1 <= stage <= self.stages and 0 <= cell < self.cells):
            raise ModelConfigurationError(
                f"(stage={stage}, cell={cell}) out of range",
                origin="AugmentedStateSpace",
            )
        return cell * self.stages + stage

    def decode(self, index: int) -> Tuple[int, int]:
        if not 1 <= index <= self.size:
            raise ModelConfigurationError(
                f"state {index} out of range 1..{self.size}",
                origin="AugmentedStateSpace",
            )
        cell, stage = divmod(index - 1, self.stages)
        return stage + 1, cell

    def stage_map(self) -> np.ndarray:
        """Stage of each augmented state, in index order."""
        return np.tile(np.arange(1, self.stages + 1), self.cells)


def count_transitions(
    dataset: TrajectoryDataset,
    grid: CovariateGrid,
    actions: int = TREATMENT,
    per_epoch: bool = False,
) -> np.ndarray:
    """Count transitions between augmented states.

    The destination cell of a record is the cell of the patient's covariates
    at the next epoch; for the last epoch, covariates are assumed unchanged.

    :param actions: Size of the action axis.
    :return: (E, S, |A|, S) integer array, E being N-1 when ``per_epoch``
        and 1 otherwise.
    """
    space = AugmentedStateSpace(dataset.stages, grid.size)
    order = np.lexsort((dataset.t, dataset.patient_id))
    pid = dataset.patient_id[order]
    t = dataset.t[order]
    cells = grid.cells_of(
        dataset.covariates_for(grid.names)[order]
    )
    next_cells = cells.copy()
    follows = (pid[1:] == pid[:-1]) & (t[1:] == t[:-1] + 1)
    next_cells[:-1][follows] = cells[1:][follows]

    origin = cells * space.stages + dataset.state[order] - 1
    target = next_cells * space.stages + dataset.next_state[order] - 1
    epochs = dataset.horizon - 1 if per_epoch else 1
    counts = np.zeros((epochs, space.size, actions, space.size), np.int64)
    epoch = t - 1 if per_epoch else np.zeros_like(t)
    np.add.at(counts, (epoch, origin, dataset.action[order] - 1, target), 1)
    return counts


def initial_cell_distribution(
    dataset: TrajectoryDataset, grid: CovariateGrid
) -> np.ndarray:
    """Return the empirical distribution of grid cells at epoch 1."""
    first = dataset.t == 1
    cells = grid.cells_of(dataset.covariates_for(grid.names)[first])
    counts = np.bincount(cells, minlength=grid.size).astype(float)
    total = counts.sum()
    if total == 0:
        raise UnestimableRowError(
            "no record at epoch 1", origin="initial_cell_distribution"
        )
    return counts / total


def build_adaptive_mdp(
    counts: Any,
    space: AugmentedStateSpace,
    params: RewardParameters,
    smoothing: bool = True,
) -> FiniteHorizonMDP:
    """Build the MDP over augmented states from empirical transitions.

    :param counts: Transition counts as returned by ``count_transitions``.
    :param space: Augmented state space the counts are expressed in.
    :param params: Reward constants; rewards only depend on stages.
    :param smoothing: Whether rows without observation become uniform
        (add-one smoothing). If false, such rows raise an error.
    :raise UnestimableRowError: For a row without observation when
        ``smoothing`` is false.
    """
    c = np.asarray(counts, dtype=float)
    S = space.size
    if c.ndim != 4 or c.shape[1] != S or c.shape[3] != S:
        raise ModelConfigurationError(
            f"counts shape {c.shape} does not match {S} augmented states",
            origin="build_adaptive_mdp",
        )
    if space.stages != params.stages:
        raise ModelConfigurationError(
            f"{space.stages} stages in the state space, {params.stages} in"
            " rewards",
            origin="build_adaptive_mdp",
        )
    if np.any(c < 0):
        raise ModelConfigurationError(
            "counts must be non-negative", origin="build_adaptive_mdp"
        )
    epochs = params.horizon - 1
    if c.shape[0] not in (1, epochs):
        raise ModelConfigurationError(
            f"counts cover {c.shape[0]} epochs, expected 1 or {epochs}",
            origin="build_adaptive_mdp",
        )
    A = c.shape[2]
    if A > len(params.costs):
        raise ModelConfigurationError(
            f"no cost for action {A}", origin="build_adaptive_mdp"
        )

    totals = c.sum(axis=-1, keepdims=True)
    empty = totals[..., 0] == 0
    if np.any(empty):
        if not smoothing:
            t, i, a = np.argwhere(empty)[0]
            stage, cell = space.decode(int(i) + 1)
            raise UnestimableRowError(
                f"no observed transition from (stage={stage}, cell={cell})"
                f" under action {a + 1}"
                + (f" at epoch {t + 1}" if c.shape[0] > 1 else ""),
                origin="build_adaptive_mdp",
            )
        logger.debug(
            "smoothing %d empty rows out of %d", int(empty.sum()), empty.size
        )
    probs = np.where(totals > 0, c / np.where(totals > 0, totals, 1.0), 1 / S)
    probs = np.broadcast_to(probs, (epochs, S, A, S))

    rewards = reward_spec(params, space.stage_map())
    return FiniteHorizonMDP(
        TransitionKernel(probs, ActionSet.uniform(S, range(1, A + 1))),
        RewardSpec(rewards.stage[:, :, :A, :], rewards.terminal),
    )


@dataclass(frozen=True, eq=False)
class ActionMatrix:
    """Optimal decisions of a solved MDP, rows are epochs."""

    solution: PolicySolution
    space: Optional[AugmentedStateSpace] = None

    @property
    def decisions(self) -> np.ndarray:
        """(N-1, S) array of actions, one column per MDP state."""
        return self.solution.policy.decisions

    def for_cell(self, cell: int) -> np.ndarray:
        """Return the (N-1, J) stage-level decisions of a grid cell."""
        if self.space is None:
            if cell != 0:
                raise ModelConfigurationError(
                    "plain MDPs only have cell 0", origin="ActionMatrix"
                )
            return self.decisions
        first = self.space.index(1, cell) - 1
        return self.decisions[:, first : first + self.space.stages]

    def stage_projection(self) -> np.ndarray:
        """Return the (N-1, J, cells) array of decisions."""
        cells = 1 if self.space is None else self.space.cells
        stages = self.decisions.shape[1] // cells
        return self.decisions.reshape(-1, cells, stages).transpose(0, 2, 1)


def action_matrix(
    mdp: FiniteHorizonMDP, space: Optional[AugmentedStateSpace] = None
) -> ActionMatrix:
    """Solve ``mdp`` and return its optimal decisions.

    :param space: For MDPs over augmented states, the state space; decisions
        can then be projected per grid cell.
    """
    if space is not None and space.size != mdp.size:
        raise ModelConfigurationError(
            f"state space has {space.size} states, MDP has {mdp.size}",
            origin="action_matrix",
        )
    return ActionMatrix(backward_induction(mdp), space)


def compare_policies(
    mdp: FiniteHorizonMDP, optimal: Policy
) -> Dict[str, np.ndarray]:
    """Return the expected total utility of reference policies from t=1.

    Values are indexed by starting state. Besides ``optimal``, "remission"
    never treats and "treatment" treats in every state where it is
    admissible.
    """
    result = {"optimal": policy_values(mdp, optimal)[0]}
    for name, action in (("remission", REMISSION), ("treatment", TREATMENT)):
        decisions = np.full((mdp.horizon - 1, mdp.size), REMISSION)
        for s in mdp.states.labels:
            if action in mdp.actions.for_state(s):
                decisions[:, s - 1] = action
        result[name] = policy_values(mdp, Policy(decisions))[0]
    return result


class TreatmentPlanner:
    """Turns patient profiles into optimal stage-level action matrices."""

    def __init__(self, params: RewardParameters) -> None:
        self.params = params

    @property
    def covariates(self) -> Tuple[str, ...]:
        """Covariates that influence decisions."""
        raise NotImplementedError

    def build_mdp(self, profile: CovariateProfile) -> FiniteHorizonMDP:
        raise NotImplementedError

    def decisions(self, profile: CovariateProfile) -> np.ndarray:
        """Return the (N-1, J) optimal action matrix for ``profile``."""
        raise NotImplementedError


class NonAdaptivePlanner(TreatmentPlanner):
    """One J-state MDP per patient, from fitted ordinal models."""

    def __init__(
        self, models: TransitionModelSet, params: RewardParameters
    ) -> None:
        super().__init__(params)
        self.models = models

    @property
    def covariates(self) -> Tuple[str, ...]:
        return self.models.covariates

    def build_mdp(self, profile: CovariateProfile) -> FiniteHorizonMDP:
        return build_nonadaptive_mdp(self.models, profile, self.params)

    def decisions(self, profile: CovariateProfile) -> np.ndarray:
        return action_matrix(self.build_mdp(profile)).decisions


class AdaptivePlanner(TreatmentPlanner):
    """One augmented MDP per income, from empirical transition counts."""

    def __init__(
        self,
        counts: np.ndarray,
        grid: CovariateGrid,
        params: RewardParameters,
        smoothing: bool = True,
    ) -> None:
        super().__init__(params)
        self.counts = np.asarray(counts)
        self.grid = grid
        self.space = AugmentedStateSpace(params.stages, grid.size)
        self.smoothing = smoothing
        self._solve_income = functools.lru_cache(
            maxsize=SOLUTION_CACHE_SIZE
        )(self._solve_for_income)

    @property
    def covariates(self) -> Tuple[str, ...]:
        return self.grid.names

    def _params_for(self, profile: CovariateProfile) -> RewardParameters:
        income = profile.income
        return self.params if income is None else self.params.with_income(
            income
        )

    def build_mdp(self, profile: CovariateProfile) -> FiniteHorizonMDP:
        return build_adaptive_mdp(
            self.counts, self.space, self._params_for(profile), self.smoothing
        )

    def _solve_for_income(self, income: float) -> ActionMatrix:
        mdp = build_adaptive_mdp(
            self.counts,
            self.space,
            self.params.with_income(income),
            self.smoothing,
        )
        return action_matrix(mdp, self.space)

    def solve(self, profile: CovariateProfile) -> ActionMatrix:
        """Return the solution of the augmented MDP for the profile income.

        Solutions of the last incomes are cached: they do not depend on the
        other covariates.
        """
        return self._solve_income(self._params_for(profile).income)

    def cached_solutions(self) -> int:
        return self._solve_income.cache_info().currsize

    def decisions(self, profile: CovariateProfile) -> np.ndarray:
        return self.solve(profile).for_cell(self.grid.cell_of(profile))

    def to_json(self) -> Dict[str, Any]:
        return {
            "grid": self.grid.to_json(),
            "smoothing": self.smoothing,
            "counts": self.counts.tolist(),
        }
