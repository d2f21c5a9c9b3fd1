"""Experiment configuration.

An experiment is described by one JSON (or YAML) document. Documents given
by users are merged over the bundled defaults, then command-line overrides
(``dotted.path=value``) are applied, and the result is validated into frozen
dataclasses. Validation errors name the offending field.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from importlib import resources
import json
import math
from typing import Any, Dict, List, Optional, Sequence, Set, Tuple

import yaml

from e3.dtr import DTRError
from e3.dtr.cohort import CohortError, CovariateSpec, GroundTruthDynamics
from e3.dtr.ordinal import FitSettings
from e3.dtr.policy import CovariateProfile, RewardParameters
from e3.dtr.utils import config_hash


BUNDLED_CONFIG = "defaults.json"

APPROACHES = ("nonadaptive", "adaptive")

_MISSING = object()


class ConfigError(DTRError):
    """Raised for invalid experiment configurations."""


def bundled_document() -> Dict[str, Any]:
    """Return the bundled default configuration document."""
    text = (
        resources.files("e3.dtr")
        .joinpath("data", BUNDLED_CONFIG)
        .read_text(encoding="utf-8")
    )
    return json.loads(text)


def read_document(filename: str) -> Dict[str, Any]:
    """Read a configuration document from a JSON or YAML file."""
    try:
        with open(filename) as f:
            if filename.endswith((".yaml", ".yml")):
                doc = yaml.safe_load(f)
            else:
                doc = json.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read {filename}: {exc.strerror}")
    except (ValueError, yaml.YAMLError) as exc:
        raise ConfigError(f"{filename}: invalid document: {exc}")
    if not isinstance(doc, dict):
        raise ConfigError(f"{filename}: top-level must be a mapping")
    return doc


def merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    """Return ``base`` updated recursively with ``update``.

    Mappings are merged, any other value (lists included) is replaced.
    """
    result = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(result.get(key), dict):
            result[key] = merge(result[key], value)
        else:
            result[key] = copy.deepcopy(value)
    return result


def apply_override(doc: Dict[str, Any], override: str) -> None:
    """Apply a ``dotted.path=value`` override to ``doc`` in place.

    The value is parsed as a YAML scalar or flow collection, so ``1.2``,
    ``true`` or ``[1, 2]`` have their natural types. Numeric path components
    index lists.
    """
    path, sep, text = override.partition("=")
    if not sep or not path:
        raise ConfigError(f"invalid override {override!r}: expected key=value")
    try:
        value = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid value in override {override!r}: {exc}")

    parts = path.strip().split(".")
    node: Any = doc
    for depth, part in enumerate(parts):
        where = ".".join(parts[: depth + 1])
        last = depth == len(parts) - 1
        if isinstance(node, list):
            try:
                index = int(part)
                node[index]
            except (ValueError, IndexError):
                raise ConfigError(f"{where}: no such list item")
            if last:
                node[index] = value
            else:
                node = node[index]
        elif isinstance(node, dict):
            if last:
                node[part] = value
            elif part not in node:
                raise ConfigError(f"{where}: unknown setting")
            else:
                node = node[part]
        else:
            raise ConfigError(f"{where}: cannot index a scalar setting")


class _Section:
    """Validating reader for one mapping of the document."""

    def __init__(self, doc: Any, path: str = ""):
        if not isinstance(doc, dict):
            raise ConfigError(f"{path or '<root>'}: must be a mapping")
        self.doc = doc
        self.path = path
        self.used: Set[str] = set()

    def where(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def get(self, key: str, default: Any = _MISSING) -> Any:
        self.used.add(key)
        if key in self.doc:
            return self.doc[key]
        if default is _MISSING:
            raise ConfigError(f"{self.where(key)}: missing setting")
        return default

    def section(self, key: str, default: Any = _MISSING) -> _Section:
        return _Section(self.get(key, default), self.where(key))

    def number(
        self,
        key: str,
        default: Any = _MISSING,
        minimum: Optional[float] = None,
        above: Optional[float] = None,
        maximum: Optional[float] = None,
        integer: bool = False,
    ) -> Any:
        return to_number(
            self.get(key, default),
            self.where(key),
            minimum=minimum,
            above=above,
            maximum=maximum,
            integer=integer,
        )

    def boolean(self, key: str, default: Any = _MISSING) -> bool:
        value = self.get(key, default)
        if not isinstance(value, bool):
            raise ConfigError(f"{self.where(key)}: expected true or false")
        return value

    def string(
        self,
        key: str,
        default: Any = _MISSING,
        choices: Optional[Sequence[str]] = None,
    ) -> str:
        value = self.get(key, default)
        if not isinstance(value, str):
            raise ConfigError(f"{self.where(key)}: expected a string")
        if choices is not None and value not in choices:
            raise ConfigError(
                f"{self.where(key)}: expected one of {', '.join(choices)},"
                f" got {value}"
            )
        return value

    def names(self, key: str, default: Any = _MISSING) -> Tuple[str, ...]:
        value = self.get(key, default)
        if not isinstance(value, list) or not all(
            isinstance(v, str) for v in value
        ):
            raise ConfigError(f"{self.where(key)}: expected a list of names")
        if len(set(value)) != len(value):
            raise ConfigError(f"{self.where(key)}: duplicate names")
        return tuple(value)

    def items(self, key: str, default: Any = _MISSING) -> List[Any]:
        value = self.get(key, default)
        if not isinstance(value, list):
            raise ConfigError(f"{self.where(key)}: expected a list")
        return value

    def done(self) -> None:
        """Reject settings that were never read."""
        unknown = sorted(set(self.doc) - self.used)
        if unknown:
            raise ConfigError(
                f"{self.where(unknown[0])}: unknown setting"
            )


def to_number(
    value: Any,
    where: str,
    minimum: Optional[float] = None,
    above: Optional[float] = None,
    maximum: Optional[float] = None,
    integer: bool = False,
) -> Any:
    """Validate a numeric setting.

    Strings are accepted when they parse as numbers, since YAML 1.1 reads
    values such as "1e-8" as strings.
    """
    if isinstance(value, bool):
        raise ConfigError(f"{where}: expected a number")
    if isinstance(value, str):
        try:
            value = float(value)
        except ValueError:
            raise ConfigError(f"{where}: expected a number, got {value!r}")
    if not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ConfigError(f"{where}: expected a finite number")
    if integer:
        if value != int(value):
            raise ConfigError(f"{where}: expected an integer, got {value}")
        value = int(value)
    else:
        value = float(value)
    if minimum is not None and value < minimum:
        raise ConfigError(f"{where}: must be >= {minimum}, got {value}")
    if above is not None and value <= above:
        raise ConfigError(f"{where}: must be > {above}, got {value}")
    if maximum is not None and value > maximum:
        raise ConfigError(f"{where}: must be <= {maximum}, got {value}")
    return value


@dataclass(frozen=True)
class RewardConfig:
    weight: float
    decay: float
    costs: Tuple[float, ...]
    horizon: int
    stages: int

    def parameters(self, income: float = 80000.0) -> RewardParameters:
        return RewardParameters(
            weight=self.weight,
            costs=self.costs,
            decay=self.decay,
            income=income,
            horizon=self.horizon,
            stages=self.stages,
        )


@dataclass(frozen=True)
class FitConfig:
    covariates: Tuple[str, ...]
    per_epoch: bool
    settings: FitSettings


@dataclass(frozen=True)
class ApproachConfig:
    kind: str
    """Either "nonadaptive" or "adaptive"."""

    grid_covariates: Tuple[str, ...]
    grid_levels: int
    smoothing: bool

    @property
    def adaptive(self) -> bool:
        return self.kind == "adaptive"


@dataclass(frozen=True)
class SimulationConfig:
    patients: int
    initial_distribution: Optional[Tuple[float, ...]]


@dataclass(frozen=True)
class SensitivityRequest:
    covariate: str
    entries: Tuple[Tuple[int, int], ...]
    points: int
    replications: int
    grid: Optional[Tuple[float, ...]] = None
    """Explicit grid values. Default: evenly spaced over +/- 3 SD."""


@dataclass(frozen=True)
class AnalysisConfig:
    sensitivity: Tuple[SensitivityRequest, ...]
    income_pairs: Tuple[Tuple[float, float], ...]
    group_size: int


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    """Validated experiment configuration."""

    seed: int
    output_dir: str
    cohort: CovariateSpec
    ground_truth: GroundTruthDynamics
    reward: RewardConfig
    fit: FitConfig
    approach: ApproachConfig
    simulation: SimulationConfig
    solve_profile: CovariateProfile
    analysis: AnalysisConfig
    document: Dict[str, Any]
    """Document this configuration was validated from."""

    @property
    def hash(self) -> str:
        """SHA-256 of the document, seed and output directory excluded."""
        doc = {
            k: v
            for k, v in self.document.items()
            if k not in ("seed", "output_dir")
        }
        return config_hash(doc)

    @property
    def decision_covariates(self) -> Tuple[str, ...]:
        """Covariates the configured approach makes decisions on."""
        if self.approach.adaptive:
            return self.approach.grid_covariates
        return self.fit.covariates


def _cohort_spec(section: _Section) -> CovariateSpec:
    age = section.section("age")
    bp = section.section("bp")
    exposure = section.section("exposure")
    hormone = section.section("hormone")
    income = section.section("income")
    markers = section.section("markers", {})
    drift = section.section("drift", {})
    spec_args = dict(
        age_mean=age.number("mean"),
        age_sd=age.number("sd", above=0),
        bp_offset=bp.number("offset"),
        bp_sd=bp.number("sd", above=0),
        exposure_rate=exposure.number("rate", minimum=0, maximum=1),
        hormone_mean=hormone.number("mean"),
        hormone_sd=hormone.number("sd", above=0),
        income_base=income.number("base", minimum=0),
        income_multiplier=income.number("multiplier", minimum=0),
        income_scale=income.number("scale", above=0),
        income_shape=income.number("shape", above=0),
        markers=tuple(
            (name, markers.number(name, minimum=0, maximum=1))
            for name in sorted(markers.doc)
        ),
        drift=tuple(
            (name, drift.number(name, minimum=0))
            for name in sorted(drift.doc)
        ),
    )
    for s in (age, bp, exposure, hormone, income, markers, drift):
        s.done()
    try:
        return CovariateSpec(**spec_args)
    except CohortError as exc:
        raise ConfigError(f"{section.path}: {exc}")


def _ground_truth(section: _Section) -> GroundTruthDynamics:
    try:
        return GroundTruthDynamics.from_json(section.doc)
    except CohortError as exc:
        raise ConfigError(f"{section.path}: {exc}")


def _reward(section: _Section) -> RewardConfig:
    costs = section.section("costs")
    try:
        keys = sorted(int(k) for k in costs.doc)
    except ValueError:
        raise ConfigError(f"{costs.path}: keys must be action identifiers")
    if keys != list(range(1, len(keys) + 1)):
        raise ConfigError(f"{costs.path}: actions must be numbered 1..n")
    cost_values = tuple(
        costs.number(str(k), minimum=0) for k in keys
    )
    costs.done()
    if not cost_values or cost_values[0] != 0.0:
        raise ConfigError(f"{costs.where('1')}: remission must cost 0")
    result = RewardConfig(
        weight=section.number("g", above=0),
        decay=section.number("lambda", minimum=0),
        costs=cost_values,
        horizon=section.number("horizon", minimum=2, integer=True),
        stages=section.number("stages", minimum=2, integer=True),
    )
    section.done()
    return result


def _fit(section: _Section) -> FitConfig:
    result = FitConfig(
        covariates=section.names("covariates"),
        per_epoch=section.boolean("per_epoch", False),
        settings=FitSettings(
            max_iterations=section.number(
                "max_iterations", 100, minimum=1, integer=True
            ),
            gradient_tolerance=section.number(
                "gradient_tolerance", 1e-8, above=0
            ),
            step_tolerance=section.number("step_tolerance", 1e-10, above=0),
            max_halvings=section.number(
                "max_halvings", 20, minimum=0, integer=True
            ),
            separation_bound=section.number(
                "separation_bound", 30.0, above=0
            ),
            standardize=section.boolean("standardize", True),
        ),
    )
    section.done()
    return result


def _approach(section: _Section) -> ApproachConfig:
    grid = section.section("grid")
    result = ApproachConfig(
        kind=section.string("kind", choices=APPROACHES),
        grid_covariates=grid.names("covariates"),
        grid_levels=grid.number("levels", 3, minimum=1, integer=True),
        smoothing=section.boolean("smoothing", True),
    )
    grid.done()
    section.done()
    return result


def _simulation(section: _Section, stages: int) -> SimulationConfig:
    init = section.get("initial_distribution", None)
    initial: Optional[Tuple[float, ...]] = None
    if init is not None:
        where = section.where("initial_distribution")
        if not isinstance(init, list) or len(init) != stages:
            raise ConfigError(f"{where}: expected {stages} probabilities")
        initial = tuple(
            to_number(v, f"{where}.{k}", minimum=0) for k, v in enumerate(init)
        )
        if abs(sum(initial) - 1.0) > 1e-9:
            raise ConfigError(f"{where}: probabilities must sum to 1")
    result = SimulationConfig(
        patients=section.number("patients", minimum=1, integer=True),
        initial_distribution=initial,
    )
    section.done()
    return result


def _solve_profile(
    section: _Section, cohort: CovariateSpec
) -> CovariateProfile:
    profile = section.section("profile")
    values = {
        name: profile.number(name)
        for name in cohort.names
        if name in profile.doc
    }
    profile.done()
    section.done()
    if "income" not in values:
        raise ConfigError(f"{profile.where('income')}: missing setting")
    try:
        return CovariateProfile.from_mapping(values, cohort.indicators)
    except DTRError as exc:
        raise ConfigError(f"{profile.path}: {exc}")


def _analysis(
    section: _Section, reward: RewardConfig, covariates: Tuple[str, ...]
) -> AnalysisConfig:
    requests = []
    for k, item in enumerate(section.items("sensitivity", [])):
        request = _Section(item, section.where(f"sensitivity.{k}"))
        covariate = request.string("covariate")
        if covariate not in covariates:
            raise ConfigError(
                f"{request.where('covariate')}: {covariate} is not a decision"
                f" covariate ({', '.join(covariates)})"
            )
        entries = []
        for e, entry in enumerate(request.items("entries")):
            where = request.where(f"entries.{e}")
            if not isinstance(entry, list) or len(entry) != 2:
                raise ConfigError(f"{where}: expected [epoch, stage]")
            entries.append(
                (
                    to_number(
                        entry[0],
                        where,
                        minimum=1,
                        maximum=reward.horizon - 1,
                        integer=True,
                    ),
                    to_number(
                        entry[1],
                        where,
                        minimum=1,
                        maximum=reward.stages,
                        integer=True,
                    ),
                )
            )
        grid = request.get("grid", None)
        grid_values: Optional[Tuple[float, ...]] = None
        if grid is not None:
            where = request.where("grid")
            if not isinstance(grid, list) or not grid:
                raise ConfigError(f"{where}: expected a list of values")
            grid_values = tuple(
                to_number(v, f"{where}.{i}") for i, v in enumerate(grid)
            )
            if any(b <= a for a, b in zip(grid_values, grid_values[1:])):
                raise ConfigError(f"{where}: must be strictly increasing")
        requests.append(
            SensitivityRequest(
                covariate=covariate,
                entries=tuple(entries),
                points=request.number("points", 21, minimum=2, integer=True),
                replications=request.number(
                    "replications", 100, minimum=1, integer=True
                ),
                grid=grid_values,
            )
        )
        request.done()

    pairs = []
    for k, pair in enumerate(section.items("income_pairs", [])):
        where = section.where(f"income_pairs.{k}")
        if not isinstance(pair, list) or len(pair) != 2:
            raise ConfigError(f"{where}: expected [low, high]")
        low = to_number(pair[0], where, above=0)
        high = to_number(pair[1], where, above=0)
        if not low < high:
            raise ConfigError(f"{where}: low income must be below high")
        pairs.append((low, high))

    result = AnalysisConfig(
        sensitivity=tuple(requests),
        income_pairs=tuple(pairs),
        group_size=section.number("group_size", 100, minimum=1, integer=True),
    )
    section.done()
    return result


def validate(doc: Dict[str, Any]) -> ExperimentConfig:
    """Validate a full configuration document."""
    root = _Section(doc)
    seed = root.number("seed", minimum=0, integer=True)
    output_dir = root.string("output_dir")
    cohort = _cohort_spec(root.section("cohort"))
    ground_truth = _ground_truth(root.section("ground_truth"))
    reward = _reward(root.section("reward"))
    fit = _fit(root.section("fit"))
    approach = _approach(root.section("approach"))
    simulation = _simulation(root.section("simulation"), reward.stages)

    names = set(cohort.names)
    for where, covariates in (
        ("ground_truth.covariates", ground_truth.covariates),
        ("fit.covariates", fit.covariates),
        ("approach.grid.covariates", approach.grid_covariates),
    ):
        unknown = [c for c in covariates if c not in names]
        if unknown:
            raise ConfigError(
                f"{where}: unknown covariates {', '.join(unknown)}"
            )
    if ground_truth.stages != reward.stages:
        raise ConfigError(
            f"ground_truth.stages: {ground_truth.stages} stages, reward has"
            f" {reward.stages}"
        )
    if max(ground_truth.actions) > len(reward.costs):
        raise ConfigError(
            f"reward.costs: no cost for action {max(ground_truth.actions)}"
        )

    solve_profile = _solve_profile(root.section("solve"), cohort)
    decision = (
        approach.grid_covariates if approach.adaptive else fit.covariates
    )
    missing = [c for c in decision if c not in solve_profile.names]
    if missing:
        raise ConfigError(
            f"solve.profile: missing covariates {', '.join(missing)}"
        )
    analysis = _analysis(root.section("analysis"), reward, decision)
    root.done()

    return ExperimentConfig(
        seed=seed,
        output_dir=output_dir,
        cohort=cohort,
        ground_truth=ground_truth,
        reward=reward,
        fit=fit,
        approach=approach,
        simulation=simulation,
        solve_profile=solve_profile,
        analysis=analysis,
        document=doc,
    )


def load_config(
    filename: Optional[str] = None,
    overrides: Sequence[str] = (),
    seed: Optional[int] = None,
    output_dir: Optional[str] = None,
) -> ExperimentConfig:
    """Build the configuration of an experiment.

    :param filename: Optional configuration file merged over the bundled
        defaults.
    :param overrides: ``dotted.path=value`` settings applied last.
    :param seed: If given, overrides the master seed.
    :param output_dir: If given, overrides the output directory.
    """
    doc = bundled_document()
    if filename is not None:
        doc = merge(doc, read_document(filename))
    for override in overrides:
        apply_override(doc, override)
    if seed is not None:
        doc["seed"] = seed
    if output_dir is not None:
        doc["output_dir"] = output_dir
    return validate(doc)
