"""Synthetic patient cohorts and trajectories.

Covariates follow fixed laws (see CovariateSpec) and health statuses evolve
according to ground-truth proportional-odds models (GroundTruthDynamics).
Every random draw comes from a numpy Generator seeded explicitly, so the same
seed always gives the same cohort and the same trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass
import logging
import math
from typing import (
    Any,
    Callable,
    Dict,
    FrozenSet,
    List,
    Mapping,
    Optional,
    Sequence,
    Tuple,
)

import numpy as np
import pandas as pd

from e3.dtr import DTRError
from e3.dtr.mdp import check_distribution
from e3.dtr.ordinal import FittedOrdinalModel, OrdinalDataset, predict_proba
from e3.dtr.policy import REMISSION, TREATMENT, CovariateProfile
from e3.dtr.report.tables import read_table, write_table


logger = logging.getLogger("dtr.cohort")

BASE_COVARIATES = ("age", "bp", "exposure", "hormone", "income")

TRAJECTORY_COLUMNS = ("patient_id", "t", "state", "action", "next_state")

Behavior = Callable[[np.random.Generator, int, int, Tuple[int, ...]], int]
"""Behavior policy: (rng, epoch, state, admissible actions) -> action."""


class CohortError(DTRError):
    """Raised for invalid cohort laws, dynamics or trajectory data."""


def uniform_behavior(
    rng: np.random.Generator, t: int, state: int, actions: Tuple[int, ...]
) -> int:
    """Pick an admissible action uniformly at random."""
    return actions[int(rng.integers(len(actions)))]


@dataclass(frozen=True)
class CovariateSpec:
    """Laws of the patient covariates at diagnosis.

    Blood pressure is drawn conditionally on age (mean ``age + bp_offset``),
    income is ``income_base + income_multiplier * Pareto(income_scale,
    income_shape)``.
    """

    age_mean: float = 50.0
    age_sd: float = 3.0
    bp_offset: float = 60.0
    bp_sd: float = 0.7
    exposure_rate: float = 0.1
    hormone_mean: float = 700.0
    hormone_sd: float = 20.0
    income_base: float = 10000.0
    income_multiplier: float = 1e6
    income_scale: float = 100.0
    income_shape: float = 10.0

    markers: Tuple[Tuple[str, float], ...] = ()
    """Optional binary marker-gene covariates with their prevalence."""

    drift: Tuple[Tuple[str, float], ...] = ()
    """Standard deviation of the per-epoch random walk of covariates. Empty
    means covariates stay fixed over the treatment course."""

    def __post_init__(self) -> None:
        def error(message: str) -> CohortError:
            return CohortError(message, origin="CovariateSpec")

        for name in ("age_sd", "bp_sd", "hormone_sd"):
            if not getattr(self, name) > 0.0:
                raise error(f"{name} must be positive")
        if not (self.income_scale > 0.0 and self.income_shape > 0.0):
            raise error("income scale and shape must be positive")
        if not (self.income_base >= 0.0 and self.income_multiplier >= 0.0):
            raise error("income base and multiplier must be non-negative")
        rates = [("exposure", self.exposure_rate)] + list(self.markers)
        for name, rate in rates:
            if not 0.0 <= rate <= 1.0:
                raise error(f"{name} prevalence {rate} outside [0, 1]")
        marker_names = [name for name, _ in self.markers]
        if len(set(marker_names)) != len(marker_names) or set(
            marker_names
        ) & set(BASE_COVARIATES):
            raise error(f"invalid marker names: {marker_names}")
        for name, sd in self.drift:
            if name not in ("age", "bp", "hormone"):
                raise error(f"covariate {name} cannot drift")
            if not sd >= 0.0:
                raise error(f"drift of {name} must be non-negative")

    @property
    def names(self) -> Tuple[str, ...]:
        return BASE_COVARIATES + tuple(name for name, _ in self.markers)

    @property
    def indicators(self) -> FrozenSet[str]:
        return frozenset(["exposure"] + [name for name, _ in self.markers])

    def marginal(self, name: str) -> Tuple[float, float]:
        """Return the mean and standard deviation of a covariate."""
        if name == "age":
            return self.age_mean, self.age_sd
        elif name == "bp":
            return (
                self.age_mean + self.bp_offset,
                math.hypot(self.age_sd, self.bp_sd),
            )
        elif name == "hormone":
            return self.hormone_mean, self.hormone_sd
        elif name == "income":
            a, x = self.income_shape, self.income_scale
            mean = math.inf if a <= 1 else a * x / (a - 1)
            sd = (
                math.inf
                if a <= 2
                else x / (a - 1) * math.sqrt(a / (a - 2))
            )
            return (
                self.income_base + self.income_multiplier * mean,
                self.income_multiplier * sd,
            )
        rates = dict([("exposure", self.exposure_rate)] + list(self.markers))
        if name in rates:
            rate = rates[name]
            return rate, math.sqrt(rate * (1.0 - rate))
        raise CohortError(f"unknown covariate {name}", origin="CovariateSpec")

    def default_grid(self, name: str, points: int = 21) -> np.ndarray:
        """Return evenly spaced values over +/- 3 standard deviations.

        Indicators get their two values.
        """
        if name in self.indicators:
            return np.array([0.0, 1.0])
        mean, sd = self.marginal(name)
        if not math.isfinite(sd):
            raise CohortError(
                f"{name} has no finite standard deviation",
                origin="CovariateSpec",
            )
        return np.linspace(mean - 3 * sd, mean + 3 * sd, points)


def sample_cohort(
    spec: CovariateSpec,
    n: int,
    seed: int,
    pinned: Optional[Mapping[str, float]] = None,
) -> List[CovariateProfile]:
    """Draw ``n`` independent covariate profiles.

    Draws always happen in the same order, whatever covariates are pinned:
    two calls with the same seed share all the draws of non-pinned
    covariates. Pinning age gives blood pressures drawn conditionally on the
    pinned age; pinning blood pressure leaves age with its marginal law.

    :param pinned: Covariates to set to a fixed value for every patient.
    """
    if n < 0:
        raise CohortError(f"negative cohort size {n}", origin="sample_cohort")
    pinned = dict(pinned or {})
    unknown = set(pinned) - set(spec.names)
    if unknown:
        raise CohortError(
            f"cannot pin unknown covariates {sorted(unknown)}",
            origin="sample_cohort",
        )

    rng = np.random.default_rng(seed)
    z_age = rng.standard_normal(n)
    z_bp = rng.standard_normal(n)
    u_exposure = rng.random(n)
    z_hormone = rng.standard_normal(n)
    lomax = rng.pareto(spec.income_shape, n)
    u_markers = rng.random((n, len(spec.markers)))

    columns: Dict[str, np.ndarray] = {}
    columns["age"] = spec.age_mean + spec.age_sd * z_age
    if "age" in pinned:
        columns["age"] = np.full(n, float(pinned["age"]))
    columns["bp"] = columns["age"] + spec.bp_offset + spec.bp_sd * z_bp
    columns["exposure"] = (u_exposure < spec.exposure_rate).astype(float)
    columns["hormone"] = spec.hormone_mean + spec.hormone_sd * z_hormone
    columns["income"] = spec.income_base + spec.income_multiplier * (
        spec.income_scale * (1.0 + lomax)
    )
    for k, (name, rate) in enumerate(spec.markers):
        columns[name] = (u_markers[:, k] < rate).astype(float)
    for name, value in pinned.items():
        columns[name] = np.full(n, float(value))

    names = spec.names
    matrix = np.column_stack([columns[name] for name in names])
    return [
        CovariateProfile(names, tuple(row), spec.indicators)
        for row in matrix
    ]


def fixed_income_cohort(
    spec: CovariateSpec, income: float, n: int, seed: int
) -> List[CovariateProfile]:
    """Draw ``n`` profiles that all have the given income.

    Two calls with the same seed and different incomes share every other
    covariate value.
    """
    if not income > 0.0:
        raise CohortError(
            f"income must be positive, got {income}",
            origin="fixed_income_cohort",
        )
    return sample_cohort(spec, n, seed, pinned={"income": income})


@dataclass(frozen=True, eq=False)
class GroundTruthDynamics:
    """Proportional-odds models that generate health status transitions.

    For state s and action a, ``logit P(next <= j) = alpha_j + beta . (x -
    reference)``: cut-points describe a patient with the reference profile.
    """

    covariates: Tuple[str, ...]
    reference: Tuple[float, ...]
    parameters: Mapping[Tuple[int, int], Tuple[Tuple[float, ...], ...]]
    """Map (state, action) to (alpha, beta)."""

    stages: int = 3
    actions: Tuple[int, ...] = (REMISSION, TREATMENT)

    def __post_init__(self) -> None:
        if len(self.reference) != len(self.covariates):
            raise CohortError(
                "reference profile does not match covariates",
                origin="GroundTruthDynamics",
            )
        for s in range(1, self.stages + 1):
            for a in self.actions:
                if (s, a) not in self.parameters:
                    raise CohortError(
                        f"no dynamics for state {s}, action {a}",
                        origin="GroundTruthDynamics",
                    )
                alpha, beta = self.parameters[(s, a)]
                if len(alpha) != self.stages - 1 or len(beta) != len(
                    self.covariates
                ):
                    raise CohortError(
                        f"dynamics for state {s}, action {a} have wrong"
                        " dimensions",
                        origin="GroundTruthDynamics",
                    )
                if np.any(np.diff(alpha) <= 0.0):
                    raise CohortError(
                        f"cut-points for state {s}, action {a} must be"
                        " strictly increasing",
                        origin="GroundTruthDynamics",
                    )

    @classmethod
    def default(cls, stages: int = 3) -> GroundTruthDynamics:
        """Dynamics used by the bundled experiment configuration.

        Treatment shifts cut-points towards better stages. Its benefit
        decreases with blood pressure; it decreases with age in every stage
        but the worst one, where it increases.
        """
        covariates = ("age", "bp", "exposure", "hormone")
        reference = (50.0, 110.0, 0.0, 700.0)
        parameters: Dict[Tuple[int, int], Tuple[Tuple[float, ...], ...]] = {}
        remission_beta = np.array([-0.1, 0.0, -0.8, 0.0])
        for s in range(1, stages + 1):
            alpha = tuple(1.5 * (j - s) + 1.0 for j in range(1, stages))
            parameters[(s, REMISSION)] = (alpha, tuple(remission_beta))
            age_effect = 0.9 if s == stages else 0.3
            parameters[(s, TREATMENT)] = (
                tuple(a + 0.5 for a in alpha),
                tuple(remission_beta + np.array([age_effect, -0.6, 0, 0])),
            )
        return cls(covariates, reference, parameters, stages)

    def model(self, state: int, action: int) -> FittedOrdinalModel:
        """Return the model in original units (uncentered)."""
        alpha, beta = self.parameters[(state, action)]
        b = np.array(beta, dtype=float)
        return FittedOrdinalModel.from_parameters(
            np.array(alpha) - b @ np.array(self.reference),
            b,
            self.covariates,
            {"state": state, "action": action},
        )

    def kernel_rows(self, X: Any) -> np.ndarray:
        """Return the (n, J, |A|, J) transition rows for each row of X.

        Rows for actions outside ``actions`` are zero.
        """
        values = np.asarray(X, dtype=float)
        if values.ndim == 1:
            values = values[None, :]
        J = self.stages
        result = np.zeros((values.shape[0], J, max(self.actions), J))
        for s in range(1, J + 1):
            for a in self.actions:
                result[:, s - 1, a - 1] = predict_proba(
                    self.model(s, a), values
                )
        return result

    def to_json(self) -> Dict[str, Any]:
        return {
            "covariates": list(self.covariates),
            "reference": dict(zip(self.covariates, self.reference)),
            "stages": self.stages,
            "actions": list(self.actions),
            "rows": [
                {
                    "state": s,
                    "action": a,
                    "alpha": list(alpha),
                    "beta": list(beta),
                }
                for (s, a), (alpha, beta) in sorted(self.parameters.items())
            ],
        }

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> GroundTruthDynamics:
        try:
            covariates = tuple(str(c) for c in doc["covariates"])
            reference = tuple(float(doc["reference"][c]) for c in covariates)
            parameters = {
                (int(row["state"]), int(row["action"])): (
                    tuple(float(v) for v in row["alpha"]),
                    tuple(float(v) for v in row["beta"]),
                )
                for row in doc["rows"]
            }
            return cls(
                covariates,
                reference,
                parameters,
                int(doc.get("stages", 3)),
                tuple(int(a) for a in doc.get("actions", (1, 2))),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CohortError(
                f"malformed ground truth: {exc!r}",
                origin="GroundTruthDynamics",
            )


@dataclass(frozen=True, eq=False)
class TrajectoryDataset:
    """Per-epoch records of simulated (or observed) patients.

    Records are sorted by patient and epoch. Each patient contributes at most
    N-1 records for consecutive epochs in 1..N-1, so censored trajectories
    are allowed, and the next state of a record is the state of the
    following one.
    """

    patient_id: np.ndarray
    t: np.ndarray
    state: np.ndarray
    action: np.ndarray
    next_state: np.ndarray
    covariates: np.ndarray
    """(records, p) covariates of the patient at the record's epoch."""

    covariate_names: Tuple[str, ...]
    stages: int
    horizon: int

    def __post_init__(self) -> None:
        def error(message: str) -> CohortError:
            return CohortError(message, origin="TrajectoryDataset")

        columns = {
            name: np.asarray(getattr(self, name), dtype=np.int64)
            for name in TRAJECTORY_COLUMNS
        }
        X = np.asarray(self.covariates, dtype=float)
        n = columns["patient_id"].shape[0]
        if X.ndim != 2 or X.shape != (n, len(self.covariate_names)):
            raise error(
                f"covariate matrix {X.shape} does not match {n} records and"
                f" {len(self.covariate_names)} covariates"
            )
        if any(c.shape != (n,) for c in columns.values()):
            raise error("trajectory columns have different lengths")
        if self.horizon < 2 or self.stages < 1:
            raise error("invalid horizon or number of stages")
        for name in ("state", "next_state"):
            c = columns[name]
            if n and (c.min() < 1 or c.max() > self.stages):
                raise error(f"{name} values must lie in 1..{self.stages}")
        if n and columns["action"].min() < 1:
            raise error("action identifiers start at 1")

        order = np.lexsort((columns["t"], columns["patient_id"]))
        columns = {name: c[order] for name, c in columns.items()}
        X = X[order]

        epochs = self.horizon - 1
        t = columns["t"]
        if n and (t.min() < 1 or t.max() > epochs):
            raise error(f"epochs must lie in 1..{epochs}")
        same = columns["patient_id"][1:] == columns["patient_id"][:-1]
        if np.any(same & (t[1:] != t[:-1] + 1)):
            raise error("epochs of a patient must be consecutive")
        follows = columns["next_state"][:-1] == columns["state"][1:]
        if np.any(same & ~follows):
            raise error("next_state must match the state of the next record")

        for name, c in columns.items():
            c.setflags(write=False)
            object.__setattr__(self, name, c)
        X.setflags(write=False)
        object.__setattr__(self, "covariates", X)
        object.__setattr__(
            self, "covariate_names", tuple(self.covariate_names)
        )

    @property
    def size(self) -> int:
        return self.patient_id.shape[0]

    @property
    def patients(self) -> int:
        return int(np.unique(self.patient_id).size)

    def covariates_for(self, names: Sequence[str]) -> np.ndarray:
        """Return the covariate columns for ``names``, in that order."""
        try:
            idx = [self.covariate_names.index(name) for name in names]
        except ValueError:
            raise CohortError(
                f"unknown covariates in {list(names)}, dataset has"
                f" {list(self.covariate_names)}",
                origin="TrajectoryDataset",
            )
        return self.covariates[:, idx]

    def ordinal_dataset(
        self,
        state: int,
        action: int,
        covariates: Sequence[str],
        epoch: Optional[int] = None,
    ) -> OrdinalDataset:
        """Return the transitions out of ``state`` under ``action``.

        :param epoch: If given, only keep records of that epoch.
        """
        mask = (self.state == state) & (self.action == action)
        if epoch is not None:
            mask &= self.t == epoch
        return OrdinalDataset(
            self.covariates_for(covariates)[mask],
            self.next_state[mask],
            self.stages,
            tuple(covariates),
        )

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(
            {name: getattr(self, name) for name in TRAJECTORY_COLUMNS}
        )
        for k, name in enumerate(self.covariate_names):
            frame[name] = self.covariates[:, k]
        return frame

    @classmethod
    def from_frame(
        cls, frame: pd.DataFrame, stages: int, horizon: int
    ) -> TrajectoryDataset:
        missing = [c for c in TRAJECTORY_COLUMNS if c not in frame.columns]
        if missing:
            raise CohortError(
                f"missing trajectory columns: {missing}",
                origin="TrajectoryDataset",
            )
        names = tuple(c for c in frame.columns if c not in TRAJECTORY_COLUMNS)
        return cls(
            *(frame[c].to_numpy() for c in TRAJECTORY_COLUMNS),
            covariates=frame[list(names)].to_numpy(dtype=float),
            covariate_names=names,
            stages=stages,
            horizon=horizon,
        )

    def write_csv(self, filename: str, header: Mapping[str, Any]) -> None:
        meta = {"stages": self.stages, "horizon": self.horizon}
        meta.update(header)
        write_table(filename, self.to_frame(), meta)

    @classmethod
    def read_csv(cls, filename: str) -> TrajectoryDataset:
        frame, header = read_table(filename)
        try:
            stages = int(header["stages"])
            horizon = int(header["horizon"])
        except (KeyError, ValueError):
            raise CohortError(
                f"{filename}: header lacks stages/horizon",
                origin="TrajectoryDataset",
            )
        return cls.from_frame(frame, stages, horizon)


def simulate_trajectories(
    truth: GroundTruthDynamics,
    cohort: Sequence[CovariateProfile],
    horizon: int,
    seed: int,
    behavior: Behavior = uniform_behavior,
    initial_distribution: Optional[Sequence[float]] = None,
    drift: Sequence[Tuple[str, float]] = (),
) -> TrajectoryDataset:
    """Simulate N-1 transitions for each patient of ``cohort``.

    Each patient gets its own random stream spawned from ``seed``, so a
    patient's trajectory does not depend on the other patients.

    :param truth: Transition dynamics.
    :param cohort: Patient profiles; they must all have the same covariates.
    :param horizon: Terminal epoch N.
    :param behavior: Behavior policy choosing actions.
    :param initial_distribution: Distribution of the initial stage,
        uniform by default.
    :param drift: Per-epoch standard deviation of covariate random walks.
    """
    J = truth.stages
    if initial_distribution is None:
        init = np.full(J, 1.0 / J)
    else:
        init = check_distribution(initial_distribution, "initial distribution")
        if init.size != J:
            raise CohortError(
                f"initial distribution has {init.size} entries for {J}"
                " stages",
                origin="simulate_trajectories",
            )
    if horizon < 2:
        raise CohortError(
            f"horizon must be at least 2, got {horizon}",
            origin="simulate_trajectories",
        )
    if not cohort:
        raise CohortError("empty cohort", origin="simulate_trajectories")

    names = cohort[0].names
    if any(p.names != names for p in cohort):
        raise CohortError(
            "all profiles must have the same covariates",
            origin="simulate_trajectories",
        )
    truth_idx = [names.index(c) for c in truth.covariates if c in names]
    if len(truth_idx) != len(truth.covariates):
        raise CohortError(
            f"profiles lack covariates needed by the dynamics:"
            f" {list(truth.covariates)}",
            origin="simulate_trajectories",
        )
    drift_sd = np.zeros(len(names))
    for name, sd in drift:
        drift_sd[names.index(name)] = sd
    drifting = bool(np.any(drift_sd > 0))

    epochs = horizon - 1
    n = len(cohort)
    records = np.zeros((n * epochs, len(TRAJECTORY_COLUMNS)), dtype=np.int64)
    covariates = np.zeros((n * epochs, len(names)))
    streams = np.random.SeedSequence(seed).spawn(n)

    for k, (profile, stream) in enumerate(zip(cohort, streams)):
        rng = np.random.default_rng(stream)
        x = np.array(profile.values)
        rows = truth.kernel_rows(x[truth_idx])[0]
        state = int(rng.choice(J, p=init)) + 1
        for t in range(1, epochs + 1):
            if drifting and t > 1:
                x = x + drift_sd * rng.standard_normal(len(names))
                rows = truth.kernel_rows(x[truth_idx])[0]
            action = behavior(rng, t, state, truth.actions)
            next_state = int(rng.choice(J, p=rows[state - 1, action - 1])) + 1
            r = k * epochs + t - 1
            records[r] = (k + 1, t, state, action, next_state)
            covariates[r] = x
            state = next_state

    logger.debug("simulated %d trajectories of %d epochs", n, epochs)
    return TrajectoryDataset(
        *records.T,
        covariates=covariates,
        covariate_names=names,
        stages=J,
        horizon=horizon,
    )


def write_cohort(
    profiles: Sequence[CovariateProfile],
    filename: str,
    header: Mapping[str, Any],
) -> None:
    """Write profiles as a CSV table, one row per patient."""
    if not profiles:
        raise CohortError("empty cohort", origin="write_cohort")
    names = profiles[0].names
    frame = pd.DataFrame(
        [p.values for p in profiles], columns=list(names)
    )
    frame.insert(0, "patient_id", np.arange(1, len(profiles) + 1))
    meta = {"indicators": ",".join(sorted(profiles[0].indicators))}
    meta.update(header)
    write_table(filename, frame, meta)


def read_cohort(filename: str) -> List[CovariateProfile]:
    """Read profiles written by ``write_cohort``."""
    frame, header = read_table(filename)
    indicators = frozenset(
        name for name in header.get("indicators", "").split(",") if name
    )
    names = tuple(c for c in frame.columns if c != "patient_id")
    return [
        CovariateProfile(names, tuple(row), indicators)
        for row in frame[list(names)].to_numpy(dtype=float)
    ]
