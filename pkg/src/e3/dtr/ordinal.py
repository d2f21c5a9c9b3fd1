"""Proportional-odds (cumulative logit) regression.

The model for an ordinal outcome y in 1..J given covariates x is::

    logit P(y <= j | x) = alpha_j + beta . x    for j = 1..J-1

with strictly increasing cut-points alpha. With this sign convention, a
positive coefficient makes low (better) categories more likely.

Models are fitted by Fisher scoring with step-halving on standardized
covariates; estimates are reported both in standardized and original units.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import logging
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, logit
from scipy.stats import norm

from e3.dtr import DTRError


logger = logging.getLogger("dtr.ordinal")


class OrdinalError(DTRError):
    """Base class for ordinal regression errors."""


class DegenerateCategoryError(OrdinalError):
    """Raised when an outcome category has no observation."""


class InvalidParameterError(OrdinalError):
    """Raised for invalid parameters or unusable datasets."""


class DimensionMismatchError(OrdinalError):
    """Raised when covariate vectors do not have the expected length."""


@dataclass(frozen=True, eq=False)
class OrdinalDataset:
    """Covariates and ordinal outcomes of one (state, action) couple."""

    covariates: np.ndarray
    """(n, p) array of covariates in original units."""

    outcomes: np.ndarray
    """(n,) array of outcomes in 1..categories."""

    categories: int
    """Number J of ordered outcome categories."""

    covariate_names: Tuple[str, ...] = ()

    def __post_init__(self) -> None:
        X = np.array(self.covariates, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.array(self.outcomes, dtype=np.int64)
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise DimensionMismatchError(
                f"covariates {X.shape} and outcomes {y.shape} do not match",
                origin="OrdinalDataset",
            )
        if self.covariate_names and len(self.covariate_names) != X.shape[1]:
            raise DimensionMismatchError(
                f"{len(self.covariate_names)} covariate names for"
                f" {X.shape[1]} columns",
                origin="OrdinalDataset",
            )
        if not np.all(np.isfinite(X)):
            raise InvalidParameterError(
                "covariates must be finite", origin="OrdinalDataset"
            )
        if self.categories < 1:
            raise InvalidParameterError(
                "at least one outcome category is needed",
                origin="OrdinalDataset",
            )
        if y.size and (y.min() < 1 or y.max() > self.categories):
            raise InvalidParameterError(
                f"outcomes must lie in 1..{self.categories}",
                origin="OrdinalDataset",
            )
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "covariates", X)
        object.__setattr__(self, "outcomes", y)
        object.__setattr__(
            self, "covariate_names", tuple(self.covariate_names)
        )

    @property
    def size(self) -> int:
        return self.outcomes.shape[0]

    @property
    def dimension(self) -> int:
        return self.covariates.shape[1]

    def counts(self) -> np.ndarray:
        """Return the number of observations in each category."""
        return np.bincount(self.outcomes - 1, minlength=self.categories)


@dataclass(frozen=True)
class FitSettings:
    """Tuning knobs for ``fit``."""

    max_iterations: int = 100
    gradient_tolerance: float = 1e-8
    """Convergence threshold on the max-norm of the score."""

    step_tolerance: float = 1e-10
    """Convergence threshold on the max-norm of the Fisher scoring step."""

    max_halvings: int = 20
    separation_bound: float = 30.0
    """Standardized coefficients beyond this magnitude flag separation."""

    standardize: bool = True


@dataclass(frozen=True, eq=False)
class FittedOrdinalModel:
    """Estimates of a proportional-odds model."""

    alpha: np.ndarray
    """Cut-points for covariates in original units."""

    beta: np.ndarray
    """Coefficients for covariates in original units."""

    center: np.ndarray
    """Per-covariate mean used for standardization."""

    scale: np.ndarray
    """Per-covariate standard deviation used for standardization."""

    covariance: Optional[np.ndarray] = None
    """Inverse Fisher information in standardized units."""

    converged: bool = True
    iterations: int = 0
    log_likelihood: float = float("nan")
    history: Tuple[float, ...] = ()
    """Log-likelihood after each accepted Fisher scoring step."""

    warnings: Tuple[str, ...] = ()
    covariate_names: Tuple[str, ...] = ()
    context: Dict[str, int] = field(default_factory=dict)
    """Where this model applies, for instance {"state": 2, "action": 1}."""

    n_observations: int = 0

    @classmethod
    def from_parameters(
        cls,
        alpha: Sequence[float],
        beta: Sequence[float],
        covariate_names: Sequence[str] = (),
        context: Optional[Dict[str, int]] = None,
    ) -> FittedOrdinalModel:
        """Create a model with given parameters (original units)."""
        a = np.array(alpha, dtype=float)
        b = np.array(beta, dtype=float)
        _check_cut_points(a, "FittedOrdinalModel")
        return cls(
            alpha=a,
            beta=b,
            center=np.zeros_like(b),
            scale=np.ones_like(b),
            covariate_names=tuple(covariate_names),
            context=dict(context or {}),
        )

    @property
    def categories(self) -> int:
        return self.alpha.shape[0] + 1

    @property
    def dimension(self) -> int:
        return self.beta.shape[0]

    @property
    def alpha_standardized(self) -> np.ndarray:
        return self.alpha + self.beta @ self.center

    @property
    def beta_standardized(self) -> np.ndarray:
        return self.beta * self.scale

    def _transform(self) -> np.ndarray:
        """Jacobian of original-unit parameters wrt standardized ones."""
        K = self.alpha.shape[0]
        p = self.beta.shape[0]
        M = np.zeros((K + p, K + p))
        M[:K, :K] = np.eye(K)
        M[:K, K:] = -(self.center / self.scale)[None, :]
        M[K:, K:] = np.diag(1.0 / self.scale)
        return M

    @property
    def covariance_original(self) -> Optional[np.ndarray]:
        if self.covariance is None:
            return None
        M = self._transform()
        return M @ self.covariance @ M.T

    @property
    def standard_errors(self) -> Optional[np.ndarray]:
        """Standard errors of (alpha, beta) in original units."""
        cov = self.covariance_original
        return None if cov is None else np.sqrt(np.diag(cov))

    @property
    def standard_errors_standardized(self) -> Optional[np.ndarray]:
        if self.covariance is None:
            return None
        return np.sqrt(np.diag(self.covariance))

    @property
    def z_values(self) -> Optional[np.ndarray]:
        """Wald statistics of the coefficients beta."""
        se = self.standard_errors
        if se is None:
            return None
        return self.beta / se[self.alpha.shape[0]:]


def _check_cut_points(alpha: np.ndarray, origin: str) -> None:
    if alpha.ndim != 1 or not np.all(np.isfinite(alpha)):
        raise InvalidParameterError(
            "cut-points must be a finite vector", origin=origin
        )
    if np.any(np.diff(alpha) <= 0.0):
        raise InvalidParameterError(
            f"cut-points must be strictly increasing: {alpha.tolist()}",
            origin=origin,
        )


def _check_dimension(beta: np.ndarray, X: np.ndarray, origin: str) -> None:
    if X.shape[-1] != beta.shape[0]:
        raise DimensionMismatchError(
            f"covariate vector has {X.shape[-1]} entries, model expects"
            f" {beta.shape[0]}",
            origin=origin,
        )


def _category_probabilities(alpha: np.ndarray, eta: np.ndarray) -> np.ndarray:
    """Return the (n, J) matrix of category probabilities."""
    F = expit(alpha[None, :] + eta[:, None])
    n = F.shape[0]
    padded = np.hstack([np.zeros((n, 1)), F, np.ones((n, 1))])
    return np.diff(padded, axis=1)


def _log_likelihood(
    alpha: np.ndarray, beta: np.ndarray, X: np.ndarray, y: np.ndarray
) -> float:
    probs = _category_probabilities(alpha, X @ beta)
    observed = probs[np.arange(y.shape[0]), y - 1]
    if np.any(observed <= 0.0):
        return float("-inf")
    return float(np.log(observed).sum())


def _score_and_information(
    alpha: np.ndarray, beta: np.ndarray, X: np.ndarray, y: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Return the score vector and the expected information matrix.

    Parameters are ordered (alpha_1..alpha_{J-1}, beta_1..beta_p).
    """
    n, p = X.shape
    K = alpha.shape[0]
    J = K + 1

    F = expit(alpha[None, :] + (X @ beta)[:, None])
    f = F * (1.0 - F)
    zeros = np.zeros((n, 1))
    probs = np.diff(np.hstack([zeros, F, np.ones((n, 1))]), axis=1)
    probs = np.maximum(probs, np.finfo(float).tiny)
    density = np.diff(np.hstack([zeros, f, zeros]), axis=1)

    # D[n, c, :] is the gradient of P(y = c + 1) for observation n
    D = np.zeros((n, J, K + p))
    cuts = np.arange(K)
    D[:, cuts, cuts] = f
    D[:, cuts + 1, cuts] = -f
    D[:, :, K:] = density[:, :, None] * X[:, None, :]

    rows = np.arange(n)
    score = (D[rows, y - 1, :] / probs[rows, y - 1][:, None]).sum(axis=0)
    W = (D / np.sqrt(probs)[:, :, None]).reshape(n * J, K + p)
    return score, W.T @ W


def _prepare(
    alpha: Sequence[float],
    beta: Sequence[float],
    data: OrdinalDataset,
    origin: str,
) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(alpha, dtype=float)
    b = np.asarray(beta, dtype=float)
    _check_cut_points(a, origin)
    _check_dimension(b, data.covariates, origin)
    if a.shape[0] != data.categories - 1:
        raise DimensionMismatchError(
            f"{a.shape[0]} cut-points for {data.categories} categories",
            origin=origin,
        )
    return a, b


def log_likelihood(
    alpha: Sequence[float], beta: Sequence[float], data: OrdinalDataset
) -> float:
    """Return the log-likelihood of ``data`` (covariates in original units).

    Returns -inf if some observation has zero probability.

    :raise InvalidParameterError: If ``alpha`` is not strictly increasing.
    """
    a, b = _prepare(alpha, beta, data, "log_likelihood")
    return _log_likelihood(a, b, data.covariates, data.outcomes)


def score(
    alpha: Sequence[float], beta: Sequence[float], data: OrdinalDataset
) -> np.ndarray:
    """Return the gradient of ``log_likelihood`` wrt (alpha, beta)."""
    a, b = _prepare(alpha, beta, data, "score")
    return _score_and_information(a, b, data.covariates, data.outcomes)[0]


def fisher_information(
    alpha: Sequence[float], beta: Sequence[float], data: OrdinalDataset
) -> np.ndarray:
    """Return the expected information matrix wrt (alpha, beta)."""
    a, b = _prepare(alpha, beta, data, "fisher_information")
    return _score_and_information(a, b, data.covariates, data.outcomes)[1]


def fit(
    data: OrdinalDataset,
    settings: FitSettings = FitSettings(),
    context: Optional[Dict[str, int]] = None,
) -> FittedOrdinalModel:
    """Fit a proportional-odds model by Fisher scoring.

    Scoring starts from beta = 0 and cut-points at the empirical cumulative
    logits. Each step is halved until the log-likelihood does not decrease
    and the cut-points stay ordered; when that fails ``max_halvings`` times,
    the fit stops and the model is flagged as not converged.

    :param data: Observations.
    :param settings: Convergence settings.
    :param context: Optional description of what the model applies to,
        stored in the result.
    :raise DegenerateCategoryError: If some category has no observation.
    :raise InvalidParameterError: If there are too few observations or if a
        covariate is constant.
    """
    J = data.categories
    n = data.size
    p = data.dimension
    origin = "fit"
    if context:
        origin = "fit " + ", ".join(f"{k}={v}" for k, v in context.items())

    if J < 2:
        raise InvalidParameterError(
            "at least two categories are needed to fit a model", origin=origin
        )
    if n <= p + J - 1:
        raise InvalidParameterError(
            f"{n} observations for {p + J - 1} parameters", origin=origin
        )
    counts = data.counts()
    for category, count in enumerate(counts, 1):
        if count == 0:
            raise DegenerateCategoryError(
                f"category {category} has no observation", origin=origin
            )

    X = data.covariates
    constant = np.ptp(X, axis=0) == 0.0 if p else np.zeros(0, dtype=bool)
    if np.any(constant):
        k = int(np.argmax(constant))
        name = data.covariate_names[k] if data.covariate_names else str(k)
        raise InvalidParameterError(
            f"covariate {name} is constant", origin=origin
        )
    if settings.standardize and p:
        center = X.mean(axis=0)
        scale = X.std(axis=0, ddof=1)
    else:
        center = np.zeros(p)
        scale = np.ones(p)
    Z = (X - center) / scale
    y = data.outcomes

    K = J - 1
    theta = np.concatenate([logit(np.cumsum(counts)[:-1] / n), np.zeros(p)])
    ll = _log_likelihood(theta[:K], theta[K:], Z, y)
    history: List[float] = [ll]
    warnings: List[str] = []
    converged = False
    iterations = 0
    slack_factor = 64 * np.finfo(float).eps

    while True:
        grad, info = _score_and_information(theta[:K], theta[K:], Z, y)
        if np.max(np.abs(grad)) < settings.gradient_tolerance:
            converged = True
            break
        if iterations >= settings.max_iterations:
            warnings.append(
                f"no convergence after {settings.max_iterations} iterations"
            )
            break
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            warnings.append("singular information matrix")
            break
        if np.max(np.abs(step)) < settings.step_tolerance:
            converged = True
            break

        iterations += 1
        slack = slack_factor * max(1.0, abs(ll))
        factor = 1.0
        accepted = False
        for _ in range(settings.max_halvings + 1):
            candidate = theta + factor * step
            if np.all(np.diff(candidate[:K]) > 0.0):
                candidate_ll = _log_likelihood(
                    candidate[:K], candidate[K:], Z, y
                )
                if candidate_ll >= ll - slack:
                    accepted = True
                    break
            factor /= 2.0
        if not accepted:
            warnings.append(
                f"step-halving failed {settings.max_halvings} times"
            )
            break

        theta = candidate
        ll = candidate_ll
        history.append(ll)
        logger.debug(
            "%s: iteration %d, log-likelihood %.10g, step factor %g",
            origin,
            iterations,
            ll,
            factor,
        )

        if p and np.max(np.abs(theta[K:])) > settings.separation_bound:
            warnings.append(
                "possible separation: standardized coefficient beyond"
                f" {settings.separation_bound}"
            )
            break

    covariance: Optional[np.ndarray]
    try:
        _, info = _score_and_information(theta[:K], theta[K:], Z, y)
        covariance = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        covariance = None

    beta = theta[K:] / scale
    alpha = theta[:K] - beta @ center
    if not converged:
        logger.warning("%s: %s", origin, "; ".join(warnings))
    else:
        logger.debug(
            "%s: converged after %d iterations (log-likelihood %.10g)",
            origin,
            iterations,
            ll,
        )

    return FittedOrdinalModel(
        alpha=alpha,
        beta=beta,
        center=center,
        scale=scale,
        covariance=covariance,
        converged=converged,
        iterations=iterations,
        log_likelihood=ll,
        history=tuple(history),
        warnings=tuple(warnings),
        covariate_names=data.covariate_names,
        context=dict(context or {}),
        n_observations=n,
    )


def predict_proba(model: FittedOrdinalModel, X: Any) -> np.ndarray:
    """Return the (n, J) matrix of category probabilities for rows of X."""
    values = np.asarray(X, dtype=float)
    if values.ndim == 1:
        values = values[None, :]
    _check_dimension(model.beta, values, "predict_proba")
    return _category_probabilities(model.alpha, values @ model.beta)


def predict_row(model: FittedOrdinalModel, x: Any) -> np.ndarray:
    """Return the distribution of the outcome for covariates ``x``.

    :param x: Covariate vector in original units.
    :raise DimensionMismatchError: If ``x`` does not have one entry per
        model covariate.
    """
    values = np.asarray(x, dtype=float)
    if values.ndim != 1:
        raise DimensionMismatchError(
            "covariate vector must be one-dimensional", origin="predict_row"
        )
    _check_dimension(model.beta, values, "predict_row")
    return _category_probabilities(
        model.alpha, np.atleast_1d(values @ model.beta)
    )[0]


def confidence_band(
    p_hat: float, n: int, level: float = 0.95
) -> Tuple[float, float]:
    """Return the normal-approximation confidence band of a proportion.

    The band is clamped to [0, 1].
    """
    if not 0.0 <= p_hat <= 1.0:
        raise InvalidParameterError(
            f"proportion {p_hat} outside [0, 1]", origin="confidence_band"
        )
    if n < 1:
        raise InvalidParameterError(
            f"sample size must be positive, got {n}", origin="confidence_band"
        )
    if not 0.0 < level < 1.0:
        raise InvalidParameterError(
            f"confidence level {level} outside (0, 1)",
            origin="confidence_band",
        )
    z = norm.ppf(0.5 + level / 2.0)
    half_width = z * np.sqrt(p_hat * (1.0 - p_hat) / n)
    return max(0.0, p_hat - half_width), min(1.0, p_hat + half_width)


def parameter_counts(
    categories: int, covariates: int, actions: int, epochs: int
) -> Tuple[int, int]:
    """Return the number of parameters of both modelling approaches.

    :param categories: Number J of health statuses.
    :param covariates: Number p of covariates.
    :param actions: Number of actions.
    :param epochs: Number of epochs the adaptive approach fits separately.
    :return: (non-adaptive count, adaptive count).
    """
    J, p, A, T = categories, covariates, actions, epochs
    return J * (p + J - 1) * A, J * T * (J - 1) * (p + 1) * A


CONTEXT_KEYS = {"epoch": "t", "state": "s", "action": "a"}
"""Context keys of fitted models and their names in model documents."""


def _optional_list(values: Optional[np.ndarray]) -> Optional[list]:
    return None if values is None else values.tolist()


def model_to_json(model: FittedOrdinalModel) -> Dict[str, Any]:
    """Return a JSON-compatible document describing ``model``.

    Parameters are in original units; ``standardized`` holds the same
    estimates for covariates centered by ``standardization.mean`` and scaled
    by ``standardization.sd``.
    """
    return {
        "alpha": model.alpha.tolist(),
        "beta": model.beta.tolist(),
        "standardization": {
            "mean": model.center.tolist(),
            "sd": model.scale.tolist(),
        },
        "context": {
            CONTEXT_KEYS.get(k, k): v for k, v in model.context.items()
        },
        "standard_errors": _optional_list(model.standard_errors),
        "z_values": _optional_list(model.z_values),
        "standardized": {
            "alpha": model.alpha_standardized.tolist(),
            "beta": model.beta_standardized.tolist(),
            "standard_errors": _optional_list(
                model.standard_errors_standardized
            ),
        },
        "covariance": _optional_list(model.covariance),
        "converged": model.converged,
        "iterations": model.iterations,
        "log_likelihood": model.log_likelihood,
        "history": list(model.history),
        "warnings": list(model.warnings),
        "covariates": list(model.covariate_names),
        "observations": model.n_observations,
    }


def model_from_json(doc: Dict[str, Any]) -> FittedOrdinalModel:
    """Create a model from a document produced by ``model_to_json``.

    Only ``alpha`` and ``beta`` are required: models without
    ``standardization`` are taken as fitted on raw covariates.
    """
    names = {v: k for k, v in CONTEXT_KEYS.items()}
    try:
        alpha = np.array(doc["alpha"], dtype=float)
        beta = np.array(doc["beta"], dtype=float)
        standardization = doc.get("standardization") or {}
        covariance = doc.get("covariance")
        model = FittedOrdinalModel(
            alpha=alpha,
            beta=beta,
            center=np.array(
                standardization.get("mean", [0.0] * len(beta)), dtype=float
            ),
            scale=np.array(
                standardization.get("sd", [1.0] * len(beta)), dtype=float
            ),
            covariance=(
                None
                if covariance is None
                else np.array(covariance, dtype=float)
            ),
            converged=bool(doc.get("converged", True)),
            iterations=int(doc.get("iterations", 0)),
            log_likelihood=float(doc.get("log_likelihood", float("nan"))),
            history=tuple(float(v) for v in doc.get("history", [])),
            warnings=tuple(doc.get("warnings", [])),
            covariate_names=tuple(doc.get("covariates", [])),
            context={
                names.get(k, k): int(v)
                for k, v in doc.get("context", {}).items()
            },
            n_observations=int(doc.get("observations", 0)),
        )
    except (AttributeError, KeyError, TypeError, ValueError) as exc:
        raise InvalidParameterError(
            f"malformed model document: {exc}", origin="model_from_json"
        )
    if model.center.shape != beta.shape or model.scale.shape != beta.shape:
        raise DimensionMismatchError(
            f"standardization of {model.center.shape[0]} covariates for"
            f" {beta.shape[0]} coefficients",
            origin="model_from_json",
        )
    _check_cut_points(model.alpha, "model_from_json")
    return model
