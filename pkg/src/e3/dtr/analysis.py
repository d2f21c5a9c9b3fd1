"""Sensitivity of optimal policies to covariates and income.

Both analyses replicate patients drawn from the cohort laws, solve one MDP
per patient and report the proportion of patients for which treatment is
optimal at given (epoch, stage) entries of the action matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
import logging
from typing import (
    Any,
    Callable,
    List,
    Optional,
    Sequence,
    Tuple,
    TYPE_CHECKING,
)

import numpy as np
import pandas as pd

from e3.dtr import DTRError
from e3.dtr.cohort import CovariateSpec, fixed_income_cohort, sample_cohort
from e3.dtr.ordinal import confidence_band
from e3.dtr.policy import (
    CovariateProfile,
    ModelConfigurationError,
    TREATMENT,
    TreatmentPlanner,
)
from e3.dtr.scheduler import WorkUnit, run_work_units

if TYPE_CHECKING:
    from e3.dtr.running_status import RunningStatus


logger = logging.getLogger("dtr.analysis")

GAP_TOLERANCE = 1e-12
"""Proportion differences below this are considered ties."""


class AnalysisError(DTRError):
    """Raised for invalid analysis requests."""


class InvalidEntryError(AnalysisError):
    """Raised when an (epoch, stage) entry is outside the action matrix."""


def regression_slope(x: Sequence[float], y: Sequence[float]) -> float:
    """Return the least-squares slope of y against x."""
    xs = np.asarray(x, dtype=float)
    ys = np.asarray(y, dtype=float)
    if xs.size < 2:
        return 0.0
    return float(np.polyfit(xs, ys, 1)[0])


@dataclass(frozen=True, eq=False)
class SensitivityCurve:
    """Treatment proportion at one action matrix entry against a covariate."""

    covariate: str
    entry: Tuple[int, int]
    """(epoch, stage) entry of the action matrix."""

    grid: np.ndarray
    proportions: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    replications: int

    def slope(self) -> float:
        """Least-squares slope of the proportions against the grid."""
        return regression_slope(self.grid, self.proportions)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                self.covariate: self.grid,
                "proportion": self.proportions,
                "lower": self.lower,
                "upper": self.upper,
            }
        )


@dataclass(frozen=True, eq=False)
class IncomeComparisonTable:
    """Treatment proportions of two income groups.

    ``low[t - 1, s - 1]`` is the proportion of low-income patients for which
    treatment is optimal at epoch t in stage s.
    """

    low_income: float
    high_income: float
    low: np.ndarray
    high: np.ndarray
    group_size: int

    @property
    def epochs(self) -> int:
        return self.low.shape[0]

    @property
    def stages(self) -> int:
        return self.low.shape[1]

    def treatment_rates(self) -> Tuple[float, float]:
        """Return the proportions of both groups pooled over all entries."""
        return float(self.low.mean()), float(self.high.mean())

    def to_frame(self) -> pd.DataFrame:
        epochs, stages = np.meshgrid(
            np.arange(1, self.epochs + 1),
            np.arange(1, self.stages + 1),
            indexing="ij",
        )
        return pd.DataFrame(
            {
                "t": epochs.ravel(),
                "stage": stages.ravel(),
                f"income_{self.low_income:g}": self.low.ravel(),
                f"income_{self.high_income:g}": self.high.ravel(),
            }
        )


class Dominance(Enum):
    """How two proportion series compare over all epochs."""

    HIGH = "high"
    """The high-income series is never below the low-income one."""

    LOW = "low"
    """The low-income series is never below the high-income one."""

    TIE = "tie"
    MIXED = "mixed"


@dataclass(frozen=True)
class StageDominance:
    stage: int
    dominance: Dominance
    crossovers: Tuple[Tuple[int, int], ...]
    """Consecutive epochs (t, t') between which the sign of the difference
    changes, ignoring epochs where both series are equal."""


def _check_entry(
    entry: Tuple[int, int], planner: TreatmentPlanner
) -> Tuple[int, int]:
    t, stage = entry
    epochs = planner.params.horizon - 1
    if not (1 <= t <= epochs and 1 <= stage <= planner.params.stages):
        raise InvalidEntryError(
            f"entry (t={t}, stage={stage}) outside the {epochs}x"
            f"{planner.params.stages} action matrix",
            origin="analysis",
        )
    return t, stage


def treatment_proportions(
    planner: TreatmentPlanner,
    cohort: Sequence[CovariateProfile],
    jobs: int = 1,
    status: Optional[RunningStatus] = None,
    label: str = "patient",
) -> np.ndarray:
    """Return the (N-1, J) proportions of patients to treat.

    One work unit solves the MDP of one patient.
    """
    if not cohort:
        raise AnalysisError("empty cohort", origin="treatment_proportions")
    units = [
        WorkUnit(f"{label}.{k}", _decisions_callback(planner, profile))
        for k, profile in enumerate(cohort, 1)
    ]
    decisions = run_work_units(units, jobs=jobs, status=status)
    return np.mean([d == TREATMENT for d in decisions], axis=0)


def _decisions_callback(
    planner: TreatmentPlanner, profile: CovariateProfile
) -> Callable[[], Any]:
    return lambda: planner.decisions(profile)


def _treated_share(
    planner: TreatmentPlanner,
    cohort: Sequence[CovariateProfile],
    entry: Tuple[int, int],
) -> float:
    t, stage = entry
    treated = sum(
        1
        for profile in cohort
        if planner.decisions(profile)[t - 1, stage - 1] == TREATMENT
    )
    return treated / len(cohort)


def sensitivity_curve(
    planner: TreatmentPlanner,
    spec: CovariateSpec,
    covariate: str,
    grid: Sequence[float],
    entry: Tuple[int, int],
    replications: int = 100,
    seed: int = 0,
    jobs: int = 1,
    status: Optional[RunningStatus] = None,
) -> SensitivityCurve:
    """Estimate how the treatment proportion at ``entry`` varies.

    For each grid value, ``replications`` patients are drawn from the cohort
    laws with the covariate pinned to that value. All grid values share the
    same seed, hence the same draws for the other covariates.

    :param planner: Turns profiles into action matrices.
    :param spec: Laws of the other covariates.
    :param covariate: Name of the covariate to pin.
    :param grid: Strictly increasing covariate values.
    :param entry: (epoch, stage) entry of the action matrix.
    :param replications: Number of patients per grid value.
    :param seed: Seed for the patient draws.
    """
    t, stage = _check_entry(entry, planner)
    if covariate not in planner.covariates:
        raise ModelConfigurationError(
            f"{covariate} does not influence transitions (covariates:"
            f" {', '.join(planner.covariates)})",
            origin="sensitivity_curve",
        )
    values = np.asarray(grid, dtype=float)
    if values.ndim != 1 or values.size == 0:
        raise AnalysisError(
            "grid must be a non-empty vector", origin="sensitivity_curve"
        )
    if np.any(np.diff(values) <= 0.0):
        raise AnalysisError(
            "grid must be strictly increasing", origin="sensitivity_curve"
        )
    if replications < 1:
        raise AnalysisError(
            f"need at least one replication, got {replications}",
            origin="sensitivity_curve",
        )

    units = []
    for k, value in enumerate(values):
        cohort = sample_cohort(
            spec, replications, seed, pinned={covariate: float(value)}
        )
        units.append(
            WorkUnit(
                uid=f"{covariate}.{k}",
                callback=_share_callback(planner, cohort, (t, stage)),
            )
        )
    proportions = np.array(run_work_units(units, jobs=jobs, status=status))
    bands = [confidence_band(p, replications) for p in proportions]

    curve = SensitivityCurve(
        covariate=covariate,
        entry=(t, stage),
        grid=values,
        proportions=proportions,
        lower=np.array([lo for lo, _ in bands]),
        upper=np.array([hi for _, hi in bands]),
        replications=replications,
    )
    logger.info(
        "sensitivity of (t=%d, stage=%d) to %s: slope %.4g",
        t,
        stage,
        covariate,
        curve.slope(),
    )
    return curve


def _share_callback(
    planner: TreatmentPlanner,
    cohort: Sequence[CovariateProfile],
    entry: Tuple[int, int],
) -> Callable[[], Any]:
    return lambda: _treated_share(planner, cohort, entry)


def income_comparison(
    planner: TreatmentPlanner,
    spec: CovariateSpec,
    low_income: float,
    high_income: float,
    group_size: int = 100,
    seed: int = 0,
    jobs: int = 1,
    status: Optional[RunningStatus] = None,
) -> IncomeComparisonTable:
    """Compare the treatment proportions of two income groups.

    Both groups share the same draws for every covariate but income.
    """
    if not 0.0 < low_income <= high_income:
        raise AnalysisError(
            f"incomes must satisfy 0 < low <= high, got {low_income} and"
            f" {high_income}",
            origin="income_comparison",
        )
    if group_size < 1:
        raise AnalysisError(
            f"group size must be positive, got {group_size}",
            origin="income_comparison",
        )
    low = treatment_proportions(
        planner,
        fixed_income_cohort(spec, low_income, group_size, seed),
        jobs=jobs,
        status=status,
        label=f"income{low_income:g}",
    )
    high = treatment_proportions(
        planner,
        fixed_income_cohort(spec, high_income, group_size, seed),
        jobs=jobs,
        status=status,
        label=f"income{high_income:g}",
    )
    return IncomeComparisonTable(
        low_income, high_income, low, high, group_size
    )


def dominance_summary(
    table: IncomeComparisonTable,
) -> Tuple[StageDominance, ...]:
    """Tell, for each stage, which income group treats more often."""
    result: List[StageDominance] = []
    for s in range(table.stages):
        diff = table.high[:, s] - table.low[:, s]
        signs = np.where(
            np.abs(diff) <= GAP_TOLERANCE, 0, np.sign(diff)
        ).astype(int)

        if np.all(signs == 0):
            dominance = Dominance.TIE
        elif np.all(signs >= 0):
            dominance = Dominance.HIGH
        elif np.all(signs <= 0):
            dominance = Dominance.LOW
        else:
            dominance = Dominance.MIXED

        crossovers = []
        previous: Optional[Tuple[int, int]] = None
        for t, sign in enumerate(signs, 1):
            if sign == 0:
                continue
            if previous is not None and previous[1] != sign:
                crossovers.append((previous[0], t))
            previous = (t, sign)
        result.append(StageDominance(s + 1, dominance, tuple(crossovers)))
    return tuple(result)


def mean_absolute_gap(table: IncomeComparisonTable) -> float:
    """Return the mean absolute difference between both groups."""
    return float(np.abs(table.high - table.low).mean())
