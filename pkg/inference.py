"""
Uncertainty quantification on top of a trained estimator.

- bootstrap_confidence: parametric bootstrap at the point estimate,
  equal-tailed percentile intervals per coordinate
- abc_sample: rejection ABC with the estimator as summary statistic and a
  quantile-chosen tolerance
- abc_importance_refine: one refinement stage drawing from a normal
  mixture centered on the accepted draws, weighted by prior / proposal

Every operation accepts a NetworkModel or any callable batch -> (b, p)
as the estimator.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
import pandas as pd
from scipy import linalg, special, stats

import tensor_core as tc
from netbuilder import NetworkModel, as_estimator
from simulators import (
    draw_params,
    free_coordinates,
    full_coordinates,
    prior_density,
    project_params,
    simulate_datasets,
)
from utils import (
    ConfigurationError,
    DimensionError,
    InferenceError,
    validate_count,
    validate_positive,
    validate_probability,
)

logger = logging.getLogger(__name__)

MIN_REPLICATES = 10
SIMULATION_CHUNK = 1000
DENSITY_CHUNK = 256
RIDGE = 1e-8


# ==================== RESULT TYPES ====================

@dataclass
class ConfidenceResult:
    point: np.ndarray
    replicates: np.ndarray
    level: float
    intervals: np.ndarray  # (p, 2): lower, upper
    sample_size: int


@dataclass
class PriorProposal:
    """The simulator's own parameter distribution used as a proposal."""
    spec: object

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return draw_params(self.spec, rng, size)

    def density(self, params) -> np.ndarray:
        return prior_density(self.spec, params)

    def describe(self) -> str:
        return "prior"


@dataclass
class MixtureProposal:
    """
    Equal-weight mixture of normals with a common covariance.

    Lives on the unconstrained coordinates of the parameter space; sample()
    and density() work in those coordinates.
    """
    centers: np.ndarray
    covariance: np.ndarray
    scale: float
    _cholesky: np.ndarray = field(init=False, repr=False)
    _component: object = field(init=False, repr=False)

    def __post_init__(self):
        self._cholesky = linalg.cholesky(self.covariance, lower=True)
        self._component = stats.multivariate_normal(mean=np.zeros(self.dim), cov=self.covariance)

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        components = rng.integers(0, self.centers.shape[0], size=size)
        noise = rng.standard_normal((size, self.dim)) @ self._cholesky.T
        return self.centers[components] + noise

    def log_density(self, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if points.shape[1] != self.dim:
            raise DimensionError(f"parameter axis: proposal has dimension {self.dim}, got {points.shape[1]}")
        count = self.centers.shape[0]
        out = np.empty(points.shape[0])
        for start in range(0, points.shape[0], DENSITY_CHUNK):
            chunk = points[start:start + DENSITY_CHUNK]
            diffs = (chunk[:, None, :] - self.centers[None, :, :]).reshape(-1, self.dim)
            logpdf = np.asarray(self._component.logpdf(diffs)).reshape(chunk.shape[0], count)
            out[start:start + DENSITY_CHUNK] = special.logsumexp(logpdf, axis=1) - math.log(count)
        return out

    def density(self, points) -> np.ndarray:
        return np.exp(self.log_density(points))

    def describe(self) -> str:
        return f"mixture(s={self.scale:g}, centers={self.centers.shape[0]})"


@dataclass
class AbcPosterior:
    draws: np.ndarray
    weights: np.ndarray
    epsilon: float
    acceptance_rate: float
    proposal: str = "prior"
    n_proposed: int = 0

    @property
    def effective_sample_size(self) -> float:
        total = self.weights.sum()
        return float(total ** 2 / np.sum(self.weights ** 2))


@dataclass
class PosteriorSummary:
    mean: np.ndarray
    sd: np.ndarray
    probs: tuple
    quantiles: np.ndarray  # (len(probs), p)
    effective_sample_size: float


# ==================== SIMULATION HELPERS ====================

def _as_dataset(data) -> np.ndarray:
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 3 and data.shape[0] == 1:
        data = data[0]
    return tc.as_matrix2(data)


def _check_width(model, data: np.ndarray) -> None:
    if isinstance(model, NetworkModel) and data.shape[1] != model.input_cols:
        raise DimensionError(f"column axis: data has {data.shape[1]} columns, model expects {model.input_cols}")


def simulate_and_estimate(estimator: Callable, spec, params: np.ndarray, n: int,
                          rng: np.random.Generator) -> np.ndarray:
    """Estimates for one simulated dataset per parameter row, in chunks."""
    chunks = []
    for start in range(0, params.shape[0], SIMULATION_CHUNK):
        data = simulate_datasets(spec, params[start:start + SIMULATION_CHUNK], n, rng)
        chunks.append(np.asarray(estimator(data), dtype=np.float64))
    return np.concatenate(chunks, axis=0)


# ==================== BOOTSTRAP ====================

def percentile_intervals(replicates: np.ndarray, level: float) -> np.ndarray:
    """Equal-tailed percentile interval per column, shape (p, 2)."""
    alpha = 1.0 - level
    bounds = np.quantile(replicates, [alpha / 2.0, 1.0 - alpha / 2.0], axis=0)
    return bounds.T


def bootstrap_confidence(model: Union[NetworkModel, Callable], spec, data, level: float = 0.95,
                         R: int = 5000, rng: Optional[np.random.Generator] = None) -> ConfidenceResult:
    """
    Parametric bootstrap intervals for one dataset.

    Estimates theta from data, resimulates R datasets of the same size at
    that estimate (projected to a valid parameter first), estimates them in
    batched passes and reads off percentile intervals.

    Raises:
        ConfigurationError: R < 10 or level outside (0, 1)
        InferenceError: the estimate cannot be projected to a valid parameter
    """
    validate_probability(level, "level")
    if validate_count(R, "R") < MIN_REPLICATES:
        raise ConfigurationError(f"bootstrap needs R >= {MIN_REPLICATES}, got {R}")
    rng = rng if rng is not None else np.random.default_rng()
    data = _as_dataset(data)
    _check_width(model, data)
    estimator = as_estimator(model)

    point = np.asarray(estimator(data[None]), dtype=np.float64)[0]
    theta = project_params(spec, point)
    params = np.repeat(theta, R, axis=0)
    replicates = simulate_and_estimate(estimator, spec, params, data.shape[0], rng)
    return ConfidenceResult(point, replicates, level, percentile_intervals(replicates, level), data.shape[0])


def confidence_frame(result: ConfidenceResult) -> pd.DataFrame:
    """One row per parameter coordinate."""
    return pd.DataFrame({
        "parameter_index": np.arange(result.point.size),
        "estimate": result.point,
        "lower": result.intervals[:, 0],
        "upper": result.intervals[:, 1],
        "level": result.level,
    })


def replicates_frame(result: ConfidenceResult) -> pd.DataFrame:
    frame = pd.DataFrame(result.replicates, columns=[f"theta_{j}" for j in range(result.replicates.shape[1])])
    frame.insert(0, "replicate", np.arange(result.replicates.shape[0]))
    return frame


# ==================== ABC ====================

def _acceptance_count(n_draws: int, accept_quantile: float) -> int:
    validate_count(n_draws, "n_draws", 1)
    if not 0.0 < accept_quantile <= 1.0:
        raise ConfigurationError(f"accept_quantile must lie in (0, 1], got {accept_quantile}")
    if n_draws * accept_quantile < 1.0:
        raise ConfigurationError(f"n_draws * accept_quantile must be >= 1 "
                                 f"(got {n_draws} * {accept_quantile})")
    return min(n_draws, max(1, int(round(n_draws * accept_quantile))))


def abc_sample(model: Union[NetworkModel, Callable], spec, data, n_draws: int,
               accept_quantile: float = 0.05, rng: Optional[np.random.Generator] = None,
               prior_sampler=None) -> AbcPosterior:
    """
    Rejection ABC with the estimator as summary statistic.

    The accept_quantile fraction of prior draws whose simulated summaries lie
    closest (Euclidean) to the observed summary is kept; epsilon is the
    largest accepted distance. prior_sampler(rng, size) replaces the
    simulator's parameter distribution when given.
    """
    accepted_count = _acceptance_count(n_draws, accept_quantile)
    rng = rng if rng is not None else np.random.default_rng()
    data = _as_dataset(data)
    _check_width(model, data)
    estimator = as_estimator(model)
    sampler = prior_sampler or PriorProposal(spec).sample

    observed = np.asarray(estimator(data[None]), dtype=np.float64)[0]
    thetas = np.atleast_2d(sampler(rng, n_draws))
    summaries = simulate_and_estimate(estimator, spec, thetas, data.shape[0], rng)
    distances = np.linalg.norm(summaries - observed, axis=1)

    order = np.argsort(distances, kind="stable")[:accepted_count]
    epsilon = float(distances[order[-1]])
    logger.info(f"ABC accepted {accepted_count} of {n_draws} draws (epsilon {epsilon:.6g})")
    return AbcPosterior(thetas[order], np.ones(accepted_count), epsilon,
                        accepted_count / n_draws, "prior", n_draws)


def mixture_proposal(centers, s: float = 1.0) -> MixtureProposal:
    """
    Normal mixture centered on the rows of centers with covariance
    s * (centered sample covariance of centers). A singular covariance gets
    a ridge of 1e-8 * trace / p (1e-8 when the trace is zero).
    """
    centers = tc.as_matrix2(centers)
    if centers.shape[0] < 2:
        raise ConfigurationError(f"mixture proposal needs at least 2 centers, got {centers.shape[0]}")
    validate_positive(s, "s")
    p = centers.shape[1]
    covariance = s * np.atleast_2d(np.cov(centers, rowvar=False, ddof=1))

    try:
        linalg.cholesky(covariance, lower=True)
        if np.linalg.matrix_rank(covariance) < p:
            raise linalg.LinAlgError("rank deficient")
    except linalg.LinAlgError:
        trace = float(np.trace(covariance))
        ridge = RIDGE * trace / p if trace > 0 else RIDGE
        logger.warning(f"Mixture covariance is singular; adding ridge {ridge:.3g}")
        covariance = covariance + ridge * np.eye(p)
    return MixtureProposal(centers, covariance, float(s))


def abc_importance_refine(model: Union[NetworkModel, Callable], spec, data, initial: AbcPosterior,
                          s: float = 1.0, n_draws: int = 10000,
                          rng: Optional[np.random.Generator] = None,
                          prior_density_fn=None, proposal=None) -> AbcPosterior:
    """
    One importance-sampling refinement of a rejection ABC posterior.

    Draws come from mixture_proposal(initial.draws, s) (or the given
    proposal), are accepted at the initial stage's epsilon, and carry
    weight prior(theta) / proposal(theta). Mixture draws outside the
    parameter space have prior density zero and are rejected without
    simulation.

    Raises:
        ConfigurationError: fewer than 2 initial draws
        InferenceError: nothing accepted, or all weights zero
    """
    validate_count(n_draws, "n_draws", 1)
    rng = rng if rng is not None else np.random.default_rng()
    data = _as_dataset(data)
    _check_width(model, data)
    estimator = as_estimator(model)
    density_fn = prior_density_fn or (lambda params: prior_density(spec, params))

    if proposal is None:
        proposal = mixture_proposal(free_coordinates(spec, initial.draws), s)
        thetas = full_coordinates(spec, proposal.sample(rng, n_draws))
        proposal_density = proposal.density(free_coordinates(spec, thetas))
    else:
        thetas = np.atleast_2d(proposal.sample(rng, n_draws))
        proposal_density = proposal.density(thetas)

    prior = np.asarray(density_fn(thetas), dtype=np.float64)
    feasible = np.flatnonzero(prior > 0.0)
    distances = np.full(n_draws, np.inf)
    if feasible.size:
        observed = np.asarray(estimator(data[None]), dtype=np.float64)[0]
        summaries = simulate_and_estimate(estimator, spec, thetas[feasible], data.shape[0], rng)
        distances[feasible] = np.linalg.norm(summaries - observed, axis=1)

    accepted = np.flatnonzero(distances <= initial.epsilon)
    if accepted.size == 0:
        raise InferenceError(f"no proposal draw fell within epsilon {initial.epsilon:.6g}")
    weights = prior[accepted] / proposal_density[accepted]
    if not np.any(weights > 0.0):
        raise InferenceError("all importance weights are zero")

    rate = accepted.size / n_draws
    logger.info(f"ABC refinement accepted {accepted.size} of {n_draws} draws (rate {rate:.4f})")
    return AbcPosterior(thetas[accepted], weights, initial.epsilon, rate, proposal.describe(), n_draws)


# ==================== SUMMARIES ====================

def weighted_quantile(values: np.ndarray, weights: np.ndarray, prob: float) -> float:
    """Smallest value whose cumulative weight reaches prob of the total."""
    order = np.argsort(values, kind="stable")
    cumulative = np.cumsum(weights[order])
    position = np.searchsorted(cumulative, prob * cumulative[-1], side="left")
    return float(values[order][min(position, values.size - 1)])


def weighted_summary(posterior: AbcPosterior, probs=(0.025, 0.5, 0.975)) -> PosteriorSummary:
    """Self-normalized mean, sd and quantiles per coordinate."""
    weights = np.asarray(posterior.weights, dtype=np.float64)
    total = weights.sum()
    if not total > 0.0:
        raise InferenceError("posterior weights sum to zero")
    draws = posterior.draws
    mean = weights @ draws / total
    sd = np.sqrt(weights @ (draws - mean) ** 2 / total)
    quantiles = np.array([[weighted_quantile(draws[:, j], weights, prob) for j in range(draws.shape[1])]
                          for prob in probs])
    return PosteriorSummary(mean, sd, tuple(probs), quantiles, posterior.effective_sample_size)


def posterior_frame(posterior: AbcPosterior) -> pd.DataFrame:
    frame = pd.DataFrame(posterior.draws, columns=[f"theta_{j}" for j in range(posterior.draws.shape[1])])
    frame.insert(0, "draw", np.arange(posterior.draws.shape[0]))
    frame["weight"] = posterior.weights
    return frame


def posterior_metadata(posterior: AbcPosterior) -> dict:
    return {
        "epsilon": f"{posterior.epsilon:.10g}",
        "acceptance_rate": f"{posterior.acceptance_rate:.10g}",
        "proposal": posterior.proposal,
        "effective_sample_size": f"{posterior.effective_sample_size:.10g}",
    }
