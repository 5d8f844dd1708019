"""
Generative models for simsmith.

Every simulator yields (true parameter, dataset) pairs:
- RegressionSpec: intercept + exchangeable normal covariates, linear or
  logistic outcome, optional missing-at-random contamination of x1 and x2
- GeneticsSpec: haplotype frequencies from a symmetric Dirichlet, genotypes
  as locus-wise sums of two haplotypes drawn from them
- NormalMeanSpec: scalar mean with a normal prior, normal observations

All functions are pure in (spec, generator state): the same seed gives
bit-identical output. Batched functions take parameters of shape (b, p)
and return data of shape (b, n, k).

Column layouts:
- regression: y, intercept, x1..xq [, m1, m2]
- genetics: g1..gK (allele counts 0/1/2, locus 1 = leading bit)
- normal_mean: x
"""

import logging
import math
from dataclasses import dataclass, field
from functools import singledispatch
from typing import Optional

import numpy as np
import pandas as pd
from scipy import linalg, special, stats

from utils import (
    ConfigurationError,
    DimensionError,
    InferenceError,
    InputError,
    check_keys,
    on_simplex,
    validate_count,
    validate_positive,
)

logger = logging.getLogger(__name__)

SIMPLEX_TOL = 1e-9


# ==================== SPECS ====================

@dataclass(frozen=True)
class MissingnessSpec:
    """
    Logistic missingness model.

    beta_m1 applies to (1, x2) for x1-missingness, beta_m2 to
    (1, x1, x3, x1*x3) for x2-missingness.
    """
    beta_m1: tuple = (-1.0, 0.5)
    beta_m2: tuple = (0.0, 0.5, 0.25, 0.5)

    def validate(self) -> "MissingnessSpec":
        if len(self.beta_m1) != 2:
            raise ConfigurationError(f"beta_m1 must have 2 coefficients, got {len(self.beta_m1)}")
        if len(self.beta_m2) != 4:
            raise ConfigurationError(f"beta_m2 must have 4 coefficients, got {len(self.beta_m2)}")
        return self


@dataclass(frozen=True)
class RegressionSpec:
    outcome: str = "linear"
    n_covariates: int = 3
    covariate_offdiag: float = 0.1
    covariate_var: float = 1.0
    error_sd: float = 1.0
    param_prior_sd: float = math.sqrt(2.0)
    missingness: Optional[MissingnessSpec] = None

    def validate(self) -> "RegressionSpec":
        if self.outcome not in ("linear", "logistic"):
            raise ConfigurationError(f"outcome must be 'linear' or 'logistic', got {self.outcome!r}")
        validate_count(self.n_covariates, "n_covariates", 1)
        validate_positive(self.error_sd, "error_sd")
        validate_positive(self.param_prior_sd, "param_prior_sd")
        if self.missingness is not None:
            self.missingness.validate()
            if self.n_covariates != 3:
                raise ConfigurationError("missingness model needs exactly 3 covariates")
        covariate_cholesky(self)
        return self


@dataclass(frozen=True)
class GeneticsSpec:
    n_loci: int = 2
    alpha: float = 1.0

    def validate(self) -> "GeneticsSpec":
        validate_count(self.n_loci, "n_loci", 1)
        validate_positive(self.alpha, "alpha")
        return self

    @property
    def n_haplotypes(self) -> int:
        return 2 ** self.n_loci


@dataclass(frozen=True)
class NormalMeanSpec:
    """theta ~ N(prior_mean, prior_sd^2); samples ~ N(theta, noise_sd^2)."""
    prior_mean: float = 0.0
    prior_sd: float = math.sqrt(2.0)
    noise_sd: float = 1.0

    def validate(self) -> "NormalMeanSpec":
        validate_positive(self.prior_sd, "prior_sd")
        validate_positive(self.noise_sd, "noise_sd")
        return self


@dataclass
class SimulatedBatch:
    """b (parameter, dataset) pairs sharing one sample size."""
    data: np.ndarray
    params: np.ndarray
    sample_size: int

    def __post_init__(self):
        if self.data.shape[0] != self.params.shape[0]:
            raise DimensionError(f"dataset axis: {self.data.shape[0]} datasets but "
                                 f"{self.params.shape[0]} parameter rows")


SPEC_KINDS = {"regression": RegressionSpec, "genetics": GeneticsSpec, "normal_mean": NormalMeanSpec}


def spec_from_dict(data: dict, path: str = "simulator"):
    """Build and validate a simulator spec from its JSON form (key 'kind' selects the model)."""
    if not isinstance(data, dict) or data.get("kind") not in SPEC_KINDS:
        kind = data.get("kind") if isinstance(data, dict) else None
        raise ConfigurationError(f"{path}.kind: must be one of {sorted(SPEC_KINDS)}, got {kind!r}")
    cls = SPEC_KINDS[data["kind"]]
    fields = dict(data)
    fields.pop("kind")
    check_keys(fields, set(cls.__dataclass_fields__), path)
    try:
        if cls is RegressionSpec and fields.get("missingness") is not None:
            check_keys(fields["missingness"], {"beta_m1", "beta_m2"}, f"{path}.missingness")
            fields["missingness"] = MissingnessSpec(**{k: tuple(v) for k, v in fields["missingness"].items()})
        return cls(**fields).validate()
    except ConfigurationError as e:
        raise ConfigurationError(f"{path}: {e}") from e
    except TypeError as e:
        raise ConfigurationError(f"{path}: {e}") from e


def spec_to_dict(spec) -> dict:
    if isinstance(spec, RegressionSpec):
        missing = None
        if spec.missingness is not None:
            missing = {"beta_m1": list(spec.missingness.beta_m1), "beta_m2": list(spec.missingness.beta_m2)}
        return {"kind": "regression", "outcome": spec.outcome, "n_covariates": spec.n_covariates,
                "covariate_offdiag": spec.covariate_offdiag, "covariate_var": spec.covariate_var,
                "error_sd": spec.error_sd, "param_prior_sd": spec.param_prior_sd, "missingness": missing}
    if isinstance(spec, GeneticsSpec):
        return {"kind": "genetics", "n_loci": spec.n_loci, "alpha": spec.alpha}
    if isinstance(spec, NormalMeanSpec):
        return {"kind": "normal_mean", "prior_mean": spec.prior_mean, "prior_sd": spec.prior_sd,
                "noise_sd": spec.noise_sd}
    raise TypeError(f"Unknown simulator spec: {type(spec).__name__}")


# ==================== REGRESSION ====================

def draw_regression_params(spec: RegressionSpec, rng: np.random.Generator, size: Optional[int] = None):
    """Independent N(0, param_prior_sd^2) coefficients, intercept first."""
    p = spec.n_covariates + 1
    shape = (p,) if size is None else (size, p)
    return rng.normal(0.0, spec.param_prior_sd, size=shape)


def covariate_cholesky(spec: RegressionSpec) -> np.ndarray:
    """Lower Cholesky factor of the exchangeable covariate covariance."""
    q = spec.n_covariates
    cov = np.full((q, q), float(spec.covariate_offdiag))
    np.fill_diagonal(cov, float(spec.covariate_var))
    try:
        return linalg.cholesky(cov, lower=True)
    except linalg.LinAlgError as e:
        raise ConfigurationError(f"covariate covariance is not positive definite "
                                 f"(var {spec.covariate_var}, offdiag {spec.covariate_offdiag})") from e


def simulate_covariates(n: int, spec: RegressionSpec, rng: np.random.Generator,
                        size: Optional[int] = None) -> np.ndarray:
    """
    Design matrix with an intercept column of ones followed by the covariates.

    Returns (n, q+1), or (size, n, q+1) when size is given.
    """
    validate_count(n, "n", 1)
    chol = covariate_cholesky(spec)
    lead = () if size is None else (size,)
    z = rng.standard_normal(lead + (n, spec.n_covariates))
    covariates = z @ chol.T
    return np.concatenate([np.ones(lead + (n, 1)), covariates], axis=-1)


def simulate_outcome(X: np.ndarray, theta: np.ndarray, spec: RegressionSpec,
                     rng: np.random.Generator) -> np.ndarray:
    """
    Outcome for a design matrix and coefficients.

    linear: X theta + N(0, error_sd^2) noise; logistic: Bernoulli(expit(X theta)).
    Works on (n, p) / (p,) or batched (b, n, p) / (b, p).
    """
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape[-1] != X.shape[-1]:
        raise DimensionError(f"parameter axis: theta has {theta.shape[-1]} entries, X has {X.shape[-1]} columns")
    eta = (X @ theta[..., :, None])[..., 0]
    if spec.outcome == "linear":
        return eta + spec.error_sd * rng.standard_normal(eta.shape)
    return (rng.random(eta.shape) < special.expit(eta)).astype(np.float64)


def missingness_probabilities(X: np.ndarray, mspec: MissingnessSpec) -> tuple:
    """Per-row probabilities that x1 and x2 go missing, from pre-masking values."""
    x1, x2, x3 = X[..., 1], X[..., 2], X[..., 3]
    b1, b2 = mspec.beta_m1, mspec.beta_m2
    p1 = special.expit(b1[0] + b1[1] * x2)
    p2 = special.expit(b2[0] + b2[1] * x1 + b2[2] * x3 + b2[3] * x1 * x3)
    return p1, p2


def mask_covariates(X: np.ndarray, uniforms: np.ndarray, mspec: MissingnessSpec) -> np.ndarray:
    """
    Deterministic part of apply_missingness.

    uniforms has shape X.shape[:-1] + (2,); a cell goes missing when its
    uniform falls below its probability. Missing cells become 0 and the
    indicators (1 = missing) for x1 and x2 are appended.
    """
    if X.shape[-1] != 4:
        raise DimensionError(f"column axis: missingness needs (intercept, x1, x2, x3), got {X.shape[-1]} columns")
    p1, p2 = missingness_probabilities(X, mspec)
    m1 = uniforms[..., 0] < p1
    m2 = uniforms[..., 1] < p2
    masked = X.copy()
    masked[..., 1] = np.where(m1, 0.0, X[..., 1])
    masked[..., 2] = np.where(m2, 0.0, X[..., 2])
    return np.concatenate([masked, m1[..., None].astype(np.float64), m2[..., None].astype(np.float64)], axis=-1)


def apply_missingness(X: np.ndarray, mspec: MissingnessSpec, rng: np.random.Generator) -> np.ndarray:
    """Mask x1/x2 at random; returns (..., n, 6) with two indicator columns."""
    return mask_covariates(X, rng.random(X.shape[:-1] + (2,)), mspec)


def assemble_regression_dataset(y: np.ndarray, Xm: np.ndarray) -> np.ndarray:
    """Prepend the outcome as the first column."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape != Xm.shape[:-1]:
        raise DimensionError(f"sample axis: outcome has shape {y.shape}, covariates {Xm.shape[:-1]}")
    return np.concatenate([y[..., None], Xm], axis=-1)


def simulate_regression(spec: RegressionSpec, params: np.ndarray, n: int,
                        rng: np.random.Generator) -> np.ndarray:
    params = np.atleast_2d(np.asarray(params, dtype=np.float64))
    X = simulate_covariates(n, spec, rng, size=params.shape[0])
    y = simulate_outcome(X, params, spec, rng)
    if spec.missingness is not None:
        X = apply_missingness(X, spec.missingness, rng)
    return assemble_regression_dataset(y, X)


def ols_estimate(data: np.ndarray) -> np.ndarray:
    """
    Closed-form least squares on complete-data regression datasets.

    data is (b, n, 1+p) with the outcome first; returns (b, p).
    """
    data = np.asarray(data, dtype=np.float64)
    y, X = data[..., 0], data[..., 1:]
    xtx = np.swapaxes(X, -1, -2) @ X
    xty = np.swapaxes(X, -1, -2) @ y[..., None]
    return np.linalg.solve(xtx, xty)[..., 0]


# ==================== GENETICS ====================

def int2bin(i: int, digits: int) -> np.ndarray:
    """Binary digits of i, most significant first."""
    if not 0 <= i < 2 ** digits:
        raise InputError(f"{i} does not fit in {digits} binary digits")
    return (i >> np.arange(digits - 1, -1, -1)) & 1


def bin2int(bits) -> int:
    value = 0
    for bit in bits:
        value = 2 * value + int(bit)
    return value


def haplotype_bits(n_loci: int) -> np.ndarray:
    """(2^K, K) table; row h holds the alleles of haplotype h."""
    return np.array([int2bin(h, n_loci) for h in range(2 ** n_loci)], dtype=np.int64)


def simulate_htfs(spec: GeneticsSpec, rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
    """Symmetric Dirichlet(alpha) haplotype frequencies, renormalized to sum 1."""
    draws = rng.dirichlet(np.full(spec.n_haplotypes, float(spec.alpha)), size=size)
    return draws / draws.sum(axis=-1, keepdims=True)


def _check_htfs(spec: GeneticsSpec, htfs: np.ndarray) -> np.ndarray:
    htfs = np.atleast_2d(np.asarray(htfs, dtype=np.float64))
    if htfs.shape[-1] != spec.n_haplotypes:
        raise DimensionError(f"frequency axis: expected {spec.n_haplotypes} haplotype frequencies, "
                             f"got {htfs.shape[-1]}")
    if not on_simplex(htfs, SIMPLEX_TOL):
        raise InputError("haplotype frequencies must be nonnegative and sum to 1")
    return htfs


def _draw_haplotypes(htfs: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    # inverse-cdf multinomial draws, one row of frequencies per dataset
    cdf = np.cumsum(htfs, axis=1)
    cdf[:, -1] = 1.0
    u = rng.random((htfs.shape[0], count))
    return (u[:, :, None] >= cdf[:, None, :]).sum(axis=-1)


def simulate_genetics(spec: GeneticsSpec, htfs: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Genotype datasets (b, n, K) as float64, one per row of htfs."""
    htfs = _check_htfs(spec, htfs)
    haplotypes = _draw_haplotypes(htfs, 2 * n, rng)
    bits = haplotype_bits(spec.n_loci)[haplotypes]
    return (bits[:, 0::2] + bits[:, 1::2]).astype(np.float64)


def simulate_genotypes(n: int, spec: GeneticsSpec, htfs, rng: np.random.Generator) -> np.ndarray:
    """
    Genotype matrix for n individuals.

    2n haplotypes are drawn from htfs; consecutive draws form an individual
    whose genotype is the digit-wise sum of the two binary representations.
    Returns integers in {0, 1, 2}, shape (n, K).
    """
    validate_count(n, "n", 1)
    return simulate_genetics(spec, htfs, n, rng)[0].astype(np.int64)


def project_to_simplex(estimates: np.ndarray) -> np.ndarray:
    """Clamp negatives to zero and renormalize each row."""
    clamped = np.clip(np.atleast_2d(estimates), 0.0, None)
    totals = clamped.sum(axis=-1, keepdims=True)
    if np.any(totals <= 0.0):
        raise InferenceError("cannot project frequency estimate to the simplex: no positive entry")
    return clamped / totals


# ==================== NORMAL MEAN ====================

def simulate_normal_mean(spec: NormalMeanSpec, params: np.ndarray, n: int,
                         rng: np.random.Generator) -> np.ndarray:
    params = np.atleast_2d(np.asarray(params, dtype=np.float64))
    return params[:, None, :] + spec.noise_sd * rng.standard_normal((params.shape[0], n, 1))


def normal_mean_posterior(spec: NormalMeanSpec, data: np.ndarray) -> tuple:
    """Conjugate posterior (mean, sd) of theta for one dataset."""
    data = np.asarray(data, dtype=np.float64).ravel()
    precision = 1.0 / spec.prior_sd ** 2 + data.size / spec.noise_sd ** 2
    mean = (spec.prior_mean / spec.prior_sd ** 2 + data.sum() / spec.noise_sd ** 2) / precision
    return float(mean), float(1.0 / math.sqrt(precision))


# ==================== GENERIC INTERFACE ====================

@singledispatch
def param_dim(spec) -> int:
    raise TypeError(f"Unknown simulator spec: {type(spec).__name__}")


@param_dim.register
def _(spec: RegressionSpec) -> int:
    return spec.n_covariates + 1


@param_dim.register
def _(spec: GeneticsSpec) -> int:
    return spec.n_haplotypes


@param_dim.register
def _(spec: NormalMeanSpec) -> int:
    return 1


@singledispatch
def data_columns(spec) -> list:
    raise TypeError(f"Unknown simulator spec: {type(spec).__name__}")


@data_columns.register
def _(spec: RegressionSpec) -> list:
    columns = ["y", "intercept"] + [f"x{i}" for i in range(1, spec.n_covariates + 1)]
    if spec.missingness is not None:
        columns += ["m1", "m2"]
    return columns


@data_columns.register
def _(spec: GeneticsSpec) -> list:
    return [f"g{i}" for i in range(1, spec.n_loci + 1)]


@data_columns.register
def _(spec: NormalMeanSpec) -> list:
    return ["x"]


@singledispatch
def draw_params(spec, rng: np.random.Generator, size: int) -> np.ndarray:
    """(size, p) parameters from the simulator's parameter distribution."""
    raise TypeError(f"Unknown simulator spec: {type(spec).__name__}")


@draw_params.register
def _(spec: RegressionSpec, rng, size):
    return draw_regression_params(spec, rng, size)


@draw_params.register
def _(spec: GeneticsSpec, rng, size):
    return simulate_htfs(spec, rng, size)


@draw_params.register
def _(spec: NormalMeanSpec, rng, size):
    return rng.normal(spec.prior_mean, spec.prior_sd, size=(size, 1))


@singledispatch
def simulate_datasets(spec, params: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """One dataset of n samples per parameter row; returns (b, n, k)."""
    raise TypeError(f"Unknown simulator spec: {type(spec).__name__}")


@simulate_datasets.register
def _(spec: RegressionSpec, params, n, rng):
    return simulate_regression(spec, params, n, rng)


@simulate_datasets.register
def _(spec: GeneticsSpec, params, n, rng):
    return simulate_genetics(spec, params, n, rng)


@simulate_datasets.register
def _(spec: NormalMeanSpec, params, n, rng):
    return simulate_normal_mean(spec, params, n, rng)


@singledispatch
def prior_density(spec, params: np.ndarray) -> np.ndarray:
    """Density of the parameter distribution at each row of params."""
    raise TypeError(f"Unknown simulator spec: {type(spec).__name__}")


@prior_density.register
def _(spec: RegressionSpec, params):
    params = np.atleast_2d(params)
    return np.prod(stats.norm.pdf(params, 0.0, spec.param_prior_sd), axis=-1)


@prior_density.register
def _(spec: GeneticsSpec, params):
    params = np.atleast_2d(params)
    dirichlet = stats.dirichlet(np.full(spec.n_haplotypes, float(spec.alpha)))
    density = np.zeros(params.shape[0])
    inside = np.all(params > 0.0, axis=-1) & (np.abs(params.sum(axis=-1) - 1.0) <= SIMPLEX_TOL)
    for i in np.flatnonzero(inside):
        row = params[i] / params[i].sum()
        density[i] = dirichlet.pdf(row)
    return density


@prior_density.register
def _(spec: NormalMeanSpec, params):
    params = np.atleast_2d(params)
    return stats.norm.pdf(params[:, 0], spec.prior_mean, spec.prior_sd)


@singledispatch
def project_params(spec, params: np.ndarray) -> np.ndarray:
    """Map raw estimates to parameters the simulator accepts."""
    return np.atleast_2d(np.asarray(params, dtype=np.float64))


@project_params.register
def _(spec: GeneticsSpec, params):
    return project_to_simplex(params)


@singledispatch
def free_coordinates(spec, params: np.ndarray) -> np.ndarray:
    """Unconstrained coordinates of params (identity unless the space is a simplex)."""
    return np.atleast_2d(np.asarray(params, dtype=np.float64))


@free_coordinates.register
def _(spec: GeneticsSpec, params):
    return np.atleast_2d(np.asarray(params, dtype=np.float64))[:, :-1]


@singledispatch
def full_coordinates(spec, free: np.ndarray) -> np.ndarray:
    """Inverse of free_coordinates."""
    return np.atleast_2d(np.asarray(free, dtype=np.float64))


@full_coordinates.register
def _(spec: GeneticsSpec, free):
    free = np.atleast_2d(np.asarray(free, dtype=np.float64))
    return np.concatenate([free, 1.0 - free.sum(axis=1, keepdims=True)], axis=1)


def draw_training_batch(spec, b: int, n: int, rng: np.random.Generator) -> SimulatedBatch:
    """b independent (theta, dataset) pairs at the common sample size n."""
    validate_count(b, "datasets per batch", 1)
    validate_count(n, "sample size", 1)
    params = draw_params(spec, rng, b)
    return SimulatedBatch(simulate_datasets(spec, params, n, rng), params, n)


# ==================== CSV EXPORT ====================

def batch_to_frame(data: np.ndarray, columns: list) -> pd.DataFrame:
    """Long table: one row per sample with dataset index first."""
    b, n, k = data.shape
    frame = pd.DataFrame(data.reshape(b * n, k), columns=columns)
    frame.insert(0, "dataset", np.repeat(np.arange(b), n))
    return frame


def params_to_frame(params: np.ndarray) -> pd.DataFrame:
    frame = pd.DataFrame(params, columns=[f"theta_{j}" for j in range(params.shape[1])])
    frame.insert(0, "dataset", np.arange(params.shape[0]))
    return frame


def frame_to_dataset(frame: pd.DataFrame, columns: list, dataset: Optional[int] = None) -> np.ndarray:
    """
    Extract one dataset (n, k) from a table written by batch_to_frame (or a
    plain table holding only the data columns).
    """
    missing = [column for column in columns if column not in frame.columns]
    if missing:
        raise InputError(f"data table lacks columns {missing}")
    if "dataset" in frame.columns:
        ids = frame["dataset"].unique()
        if dataset is None:
            if len(ids) != 1:
                raise InputError(f"data table holds {len(ids)} datasets; choose one with --dataset")
            dataset = ids[0]
        frame = frame[frame["dataset"] == dataset]
        if frame.empty:
            raise InputError(f"dataset {dataset} not found in data table")
    values = frame[columns].to_numpy(dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise InputError("data table contains non-numeric or missing cells")
    return values
