"""Pipeline of an experiment: simulate, fit, solve, analyze, report.

Each step reads the artifacts of the previous steps from the output
directory and writes its own artifacts there:

* ``simulate``: ``cohort.csv`` and ``trajectories.csv``;
* ``fit``: ``models/models.json`` (non-adaptive approach) or
  ``adaptive.json`` (adaptive approach);
* ``solve``: ``action_matrix.csv``, ``values.csv``, ``mdp.json`` and
  ``policies.csv`` for the reference profile (the last two with the
  non-adaptive approach only), ``action_matrices.csv`` for every simulated
  patient;
* ``sensitivity``: ``sensitivity/<covariate>_<t>_<stage>.{csv,svg}``;
* ``compare``: ``compare/income_<low>_<high>.{csv,svg}``;
* ``report``: ``report.txt`` and ``manifest.json``.

Every step derives its random seeds from the master seed and its own
labels, so steps can be re-run in any order with the same results.
"""

from __future__ import annotations

import glob
import json
import logging
import os
import sys
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np
import pandas as pd

from e3.fs import mkdir, rm

from e3.dtr import DTRError
from e3.dtr.analysis import (
    IncomeComparisonTable,
    SensitivityCurve,
    StageDominance,
    dominance_summary,
    income_comparison,
    mean_absolute_gap,
    sensitivity_curve,
)
from e3.dtr.cohort import (
    TrajectoryDataset,
    read_cohort,
    sample_cohort,
    simulate_trajectories,
    write_cohort,
)
from e3.dtr.config import ExperimentConfig
from e3.dtr.mdp import dump_mdp
from e3.dtr.ordinal import parameter_counts
from e3.dtr.policy import (
    AdaptivePlanner,
    CovariateGrid,
    CovariateProfile,
    NonAdaptivePlanner,
    TransitionModelSet,
    TreatmentPlanner,
    action_matrix,
    compare_policies,
    count_transitions,
    fit_transition_models,
    initial_cell_distribution,
)
from e3.dtr.report.display import generate_report
from e3.dtr.report.index import ArtifactIndex
from e3.dtr.report.plot import plot_income_comparison, plot_sensitivity
from e3.dtr.report.tables import read_header, read_table, write_table
from e3.dtr.running_status import RunningStatus
from e3.dtr.scheduler import WorkUnit, run_work_units
from e3.dtr.utils import ColorConfig, derive_seed


logger = logging.getLogger("dtr.experiment")

COMMANDS = ("simulate", "fit", "solve", "sensitivity", "compare", "report")

COHORT_FILENAME = "cohort.csv"
TRAJECTORIES_FILENAME = "trajectories.csv"
MODELS_DIR = "models"
ADAPTIVE_FILENAME = "adaptive.json"
ACTION_MATRIX_FILENAME = "action_matrix.csv"
ACTION_MATRICES_FILENAME = "action_matrices.csv"
VALUES_FILENAME = "values.csv"
POLICIES_FILENAME = "policies.csv"
MDP_FILENAME = "mdp.json"
SENSITIVITY_DIR = "sensitivity"
COMPARE_DIR = "compare"
REPORT_FILENAME = "report.txt"


class MissingArtifactError(DTRError):
    """Raised when a step needs the artifacts of a step that did not run."""


class Experiment:
    """Run the steps of an experiment in its output directory."""

    def __init__(
        self,
        config: ExperimentConfig,
        jobs: int = 1,
        colors: Optional[ColorConfig] = None,
    ) -> None:
        """Initialize an Experiment instance.

        :param config: Validated experiment configuration.
        :param jobs: Number of workers for fits and per-patient solves. Zero
            or less means one per CPU.
        :param colors: Colors for the report printed on the standard output.
            If left to None, enable them iff the standard output is a TTY.
        """
        self.config = config
        self.jobs = jobs
        self.colors = colors or ColorConfig()
        self.output_dir = config.output_dir
        self.status: Optional[RunningStatus] = None

    @property
    def header(self) -> Dict[str, Any]:
        """Metadata embedded in every artifact."""
        return {"config": self.config.hash, "seed": self.config.seed}

    def path(self, *names: str) -> str:
        return os.path.join(self.output_dir, *names)

    def seed(self, *labels: Any) -> int:
        return derive_seed(self.config.seed, *labels)

    def run(self, command: str) -> None:
        """Run one step of the pipeline."""
        if command not in COMMANDS:
            raise DTRError(
                f"unknown command {command} (expected one of"
                f" {', '.join(COMMANDS)})",
                origin="Experiment",
            )
        mkdir(self.output_dir)
        self.status = RunningStatus(self.path("status"))
        logger.info(
            "%s (config %s, seed %d)",
            command,
            self.config.hash[:12],
            self.config.seed,
        )
        getattr(self, command)()

    #
    # Access to upstream artifacts
    #

    def require(self, filename: str, command: str) -> str:
        """Return the path of an upstream artifact.

        :param filename: Artifact name, relative to the output directory.
        :param command: Step that produces the artifact.
        :raise MissingArtifactError: If the artifact does not exist.
        """
        path = self.path(filename)
        if not os.path.exists(path):
            raise MissingArtifactError(
                f"{path} not found: run the '{command}' command first",
                origin="Experiment",
            )
        return path

    def check_header(self, filename: str, header: Mapping[str, Any]) -> None:
        """Warn when an artifact comes from a different configuration."""
        if str(header.get("config")) != self.config.hash:
            logger.warning(
                "%s was produced with another configuration (%s)",
                filename,
                str(header.get("config"))[:12],
            )

    def load_trajectories(self) -> TrajectoryDataset:
        path = self.require(TRAJECTORIES_FILENAME, "simulate")
        self.check_header(path, read_header(path))
        return TrajectoryDataset.read_csv(path)

    def load_planner(self) -> TreatmentPlanner:
        """Build the planner of the configured approach from fit artifacts."""
        params = self.config.reward.parameters()
        if self.config.approach.adaptive:
            path = self.require(ADAPTIVE_FILENAME, "fit")
            with open(path) as f:
                doc = json.load(f)
            self.check_header(path, doc)
            return AdaptivePlanner(
                np.array(doc["counts"], dtype=np.int64),
                CovariateGrid.from_json(doc["grid"]),
                params,
                smoothing=bool(doc["smoothing"]),
            )
        else:
            path = self.require(
                os.path.join(MODELS_DIR, TransitionModelSet.INDEX_FILENAME),
                "fit",
            )
            with open(path) as f:
                self.check_header(path, json.load(f))
            return NonAdaptivePlanner(
                TransitionModelSet.load(self.path(MODELS_DIR)), params
            )

    #
    # Steps
    #

    def simulate(self) -> None:
        """Draw the training cohort and simulate its trajectories."""
        config = self.config
        cohort = sample_cohort(
            config.cohort, config.simulation.patients, self.seed("cohort")
        )
        dataset = simulate_trajectories(
            config.ground_truth,
            cohort,
            config.reward.horizon,
            self.seed("trajectories"),
            initial_distribution=config.simulation.initial_distribution,
            drift=config.cohort.drift,
        )
        write_cohort(cohort, self.path(COHORT_FILENAME), self.header)
        dataset.write_csv(self.path(TRAJECTORIES_FILENAME), self.header)
        logger.info(
            "simulated %d patients, %d transitions",
            dataset.patients,
            dataset.size,
        )

    def fit(self) -> None:
        """Estimate transition laws from the simulated trajectories."""
        dataset = self.load_trajectories()
        config = self.config
        if config.approach.adaptive:
            self._fit_adaptive(dataset)
            return

        models = fit_transition_models(
            dataset,
            config.fit.covariates,
            config.fit.settings,
            per_epoch=config.fit.per_epoch,
            actions=config.ground_truth.actions,
            jobs=self.jobs,
            status=self.status,
        )
        for key, model in sorted(models.models.items()):
            if not model.converged:
                logger.warning("model %s did not converge", key)
            for warning in model.warnings:
                logger.warning("model %s: %s", key, warning)

        proportional_odds, multinomial = parameter_counts(
            dataset.stages,
            len(config.fit.covariates),
            len(config.ground_truth.actions),
            dataset.horizon - 1,
        )
        logger.info(
            "%d parameters in proportional-odds models, a multinomial logit"
            " per epoch would need %d",
            proportional_odds,
            multinomial,
        )
        rm(self.path(MODELS_DIR), recursive=True)
        mkdir(self.path(MODELS_DIR))
        models.save(self.path(MODELS_DIR), self.header)

    def _fit_adaptive(self, dataset: TrajectoryDataset) -> None:
        config = self.config
        cohort = read_cohort(self.require(COHORT_FILENAME, "simulate"))
        grid = CovariateGrid.from_profiles(
            cohort,
            config.approach.grid_covariates,
            config.approach.grid_levels,
        )
        counts = count_transitions(
            dataset,
            grid,
            actions=max(config.ground_truth.actions),
            per_epoch=config.fit.per_epoch,
        )
        planner = AdaptivePlanner(
            counts,
            grid,
            config.reward.parameters(),
            smoothing=config.approach.smoothing,
        )
        empty = int((counts.sum(axis=-1) == 0).sum())
        logger.info(
            "%d grid cells, %d augmented states, %d empty rows",
            grid.size,
            planner.space.size,
            empty,
        )

        doc = dict(self.header)
        doc.update(planner.to_json())
        doc["initial_cells"] = initial_cell_distribution(
            dataset, grid
        ).tolist()
        with open(self.path(ADAPTIVE_FILENAME), "w") as f:
            json.dump(doc, f)
            f.write("\n")

    def solve(self) -> None:
        """Compute action matrices for the reference profile and cohort."""
        planner = self.load_planner()
        config = self.config
        profile = config.solve_profile
        stages = config.reward.stages
        columns = [f"stage_{s}" for s in range(1, stages + 1)]

        if isinstance(planner, AdaptivePlanner):
            rm(self.path(MDP_FILENAME))
            rm(self.path(POLICIES_FILENAME))
            matrix = planner.solve(profile)
            decisions = matrix.for_cell(planner.grid.cell_of(profile))
            values = matrix.solution.values
        else:
            mdp = planner.build_mdp(profile)
            solution = action_matrix(mdp)
            decisions = solution.decisions
            values = solution.solution.values
            dump_mdp(mdp, self.path(MDP_FILENAME))
            self.write_policies(
                compare_policies(mdp, solution.solution.policy)
            )

        write_table(
            self.path(ACTION_MATRIX_FILENAME),
            pd.DataFrame(decisions, columns=columns),
            dict(self.header, profile=_describe(profile.as_dict())),
        )
        value_frame = pd.DataFrame(
            values,
            columns=[f"state_{s}" for s in range(1, values.shape[1] + 1)],
        )
        value_frame.insert(0, "t", np.arange(1, values.shape[0] + 1))
        write_table(self.path(VALUES_FILENAME), value_frame, self.header)
        logger.info("action matrix of the reference profile:\n%s", decisions)

        cohort = read_cohort(self.require(COHORT_FILENAME, "simulate"))
        units = [
            WorkUnit(f"patient.{k}", _decisions_callback(planner, p))
            for k, p in enumerate(cohort, 1)
        ]
        matrices = run_work_units(units, jobs=self.jobs, status=self.status)
        epochs = config.reward.horizon - 1
        frame = pd.DataFrame(np.concatenate(matrices), columns=columns)
        frame.insert(0, "t", np.tile(np.arange(1, epochs + 1), len(cohort)))
        frame.insert(
            0, "patient_id", np.repeat(np.arange(1, len(cohort) + 1), epochs)
        )
        write_table(self.path(ACTION_MATRICES_FILENAME), frame, self.header)

    def write_policies(self, policies: Mapping[str, np.ndarray]) -> None:
        table = np.array(list(policies.values()))
        frame = pd.DataFrame(
            table,
            columns=[f"state_{s}" for s in range(1, table.shape[1] + 1)],
        )
        frame.insert(0, "policy", list(policies))
        write_table(self.path(POLICIES_FILENAME), frame, self.header)
        for name, values in policies.items():
            logger.info("%s policy: expected utility %s", name, values)

    def sensitivity(self) -> None:
        """Compute the requested sensitivity curves."""
        planner = self.load_planner()
        config = self.config
        rm(self.path(SENSITIVITY_DIR), recursive=True)
        mkdir(self.path(SENSITIVITY_DIR))
        for request in config.analysis.sensitivity:
            if request.grid is not None:
                grid = np.array(request.grid)
            else:
                grid = config.cohort.default_grid(
                    request.covariate, request.points
                )
            for entry in request.entries:
                curve = sensitivity_curve(
                    planner,
                    config.cohort,
                    request.covariate,
                    grid,
                    entry,
                    replications=request.replications,
                    seed=self.seed("sensitivity", request.covariate),
                    jobs=self.jobs,
                    status=self.status,
                )
                self.write_curve(curve)

    def write_curve(self, curve: SensitivityCurve) -> None:
        t, stage = curve.entry
        base = self.path(SENSITIVITY_DIR, f"{curve.covariate}_{t}_{stage}")
        write_table(
            base + ".csv",
            curve.to_frame(),
            dict(
                self.header,
                covariate=curve.covariate,
                t=t,
                stage=stage,
                replications=curve.replications,
                slope=f"{curve.slope():.12g}",
            ),
        )
        plot_sensitivity(curve, base + ".svg")

    def compare(self) -> None:
        """Compare treatment proportions of the requested income pairs.

        All pairs share the same draws for the covariates other than income.
        """
        planner = self.load_planner()
        config = self.config
        rm(self.path(COMPARE_DIR), recursive=True)
        mkdir(self.path(COMPARE_DIR))
        for low, high in config.analysis.income_pairs:
            table = income_comparison(
                planner,
                config.cohort,
                low,
                high,
                group_size=config.analysis.group_size,
                seed=self.seed("income"),
                jobs=self.jobs,
                status=self.status,
            )
            summary = dominance_summary(table)
            for verdict in summary:
                logger.info(
                    "income %g vs %g, stage %d: %s%s",
                    low,
                    high,
                    verdict.stage,
                    verdict.dominance.value,
                    "".join(
                        f", crossover t={a}..{b}"
                        for a, b in verdict.crossovers
                    ),
                )
            logger.info(
                "income %g vs %g: mean absolute gap %.4f",
                low,
                high,
                mean_absolute_gap(table),
            )
            self.write_comparison(table)

    def write_comparison(self, table: IncomeComparisonTable) -> None:
        base = self.path(
            COMPARE_DIR,
            f"income_{table.low_income:g}_{table.high_income:g}",
        )
        write_table(
            base + ".csv",
            table.to_frame(),
            dict(
                self.header,
                low_income=f"{table.low_income:g}",
                high_income=f"{table.high_income:g}",
                group_size=table.group_size,
            ),
        )
        plot_income_comparison(table, base + ".svg")

    def collect_results(
        self,
    ) -> Tuple[
        Optional[np.ndarray],
        List[SensitivityCurve],
        List[Tuple[IncomeComparisonTable, Tuple[StageDominance, ...]]],
    ]:
        """Read back the results of the solve and analysis steps."""
        decisions = None
        if os.path.exists(self.path(ACTION_MATRIX_FILENAME)):
            frame, header = read_table(self.path(ACTION_MATRIX_FILENAME))
            self.check_header(ACTION_MATRIX_FILENAME, header)
            decisions = frame.to_numpy(dtype=np.int64)
        curves = [
            read_curve(f)
            for f in sorted(glob.glob(self.path(SENSITIVITY_DIR, "*.csv")))
        ]
        tables = sorted(
            (
                read_comparison(f)
                for f in glob.glob(self.path(COMPARE_DIR, "*.csv"))
            ),
            key=lambda t: (t.low_income, t.high_income),
        )
        return (
            decisions,
            curves,
            [(table, dominance_summary(table)) for table in tables],
        )

    def read_policies(self) -> Optional[Dict[str, np.ndarray]]:
        """Read back the policy values of the reference profile, if any."""
        if not os.path.exists(self.path(POLICIES_FILENAME)):
            return None
        frame, header = read_table(self.path(POLICIES_FILENAME))
        self.check_header(POLICIES_FILENAME, header)
        values = frame.drop(columns="policy").to_numpy(dtype=float)
        return dict(zip(frame["policy"], values))

    def report(self) -> None:
        """Summarize available results and write the artifact manifest."""
        decisions, curves, comparisons = self.collect_results()
        policies = self.read_policies()
        if decisions is None and not curves and not comparisons:
            raise MissingArtifactError(
                "nothing to report: run the 'solve', 'sensitivity' or"
                " 'compare' command first",
                origin="Experiment",
            )
        with open(self.path(REPORT_FILENAME), "w") as f:
            generate_report(
                f,
                ColorConfig(False),
                self.config.hash,
                self.config.seed,
                decisions,
                curves,
                comparisons,
                policies=policies,
            )
        generate_report(
            sys.stdout,
            self.colors,
            self.config.hash,
            self.config.seed,
            decisions,
            curves,
            comparisons,
            policies=policies,
        )

        index = ArtifactIndex(
            self.output_dir, self.config.hash, self.config.seed
        )
        index.scan()
        index.write()
        logger.info(
            "manifest of %d artifacts written to %s",
            len(index.entries),
            self.path(ArtifactIndex.INDEX_FILENAME),
        )


def _decisions_callback(
    planner: TreatmentPlanner, profile: CovariateProfile
) -> Callable[[], Any]:
    return lambda: planner.decisions(profile)


def _describe(values: Mapping[str, float]) -> str:
    return ", ".join(f"{k}={v:g}" for k, v in values.items())


def read_curve(filename: str) -> SensitivityCurve:
    """Read a sensitivity curve written by the ``sensitivity`` step."""
    frame, header = read_table(filename)
    covariate = header["covariate"]
    return SensitivityCurve(
        covariate=covariate,
        entry=(int(header["t"]), int(header["stage"])),
        grid=frame[covariate].to_numpy(dtype=float),
        proportions=frame["proportion"].to_numpy(dtype=float),
        lower=frame["lower"].to_numpy(dtype=float),
        upper=frame["upper"].to_numpy(dtype=float),
        replications=int(header["replications"]),
    )


def read_comparison(filename: str) -> IncomeComparisonTable:
    """Read an income comparison written by the ``compare`` step."""
    frame, header = read_table(filename)
    low_income = float(header["low_income"])
    high_income = float(header["high_income"])
    epochs = int(frame["t"].max())
    stages = int(frame["stage"].max())

    def proportions(income: float) -> np.ndarray:
        return (
            frame[f"income_{income:g}"]
            .to_numpy(dtype=float)
            .reshape(epochs, stages)
        )

    return IncomeComparisonTable(
        low_income,
        high_income,
        proportions(low_income),
        proportions(high_income),
        int(header["group_size"]),
    )
