"""
Tests for simulators.py

Regression data with missingness, haplotype/genotype generation, the
normal-mean toy model and the generic dispatch functions.
"""

import math

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy import special

import simulators as sim
from utils import ConfigurationError, DimensionError, InferenceError, InputError

MISSING = sim.MissingnessSpec()


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


# ==================== REGRESSION ====================

def test_draw_regression_params_moments(rng):
    draws = sim.draw_regression_params(sim.RegressionSpec(), rng, size=100_000)
    assert draws.shape == (100_000, 4)
    assert np.all((draws.var(axis=0) > 1.9) & (draws.var(axis=0) < 2.1))
    assert np.all(np.abs(draws.mean(axis=0)) < 0.03)


def test_draw_regression_params_seeded():
    spec = sim.RegressionSpec()
    a = sim.draw_regression_params(spec, np.random.default_rng(1))
    b = sim.draw_regression_params(spec, np.random.default_rng(1))
    assert a.shape == (4,)
    assert_array_equal(a, b)


def test_simulate_covariates_intercept_and_covariance(rng):
    X = sim.simulate_covariates(100_000, sim.RegressionSpec(), rng)
    assert X.shape == (100_000, 4)
    assert_array_equal(X[:, 0], 1.0)
    cov = np.cov(X[:, 1:], rowvar=False)
    assert 0.08 <= cov[0, 1] <= 0.12


def test_simulate_covariates_independent_when_offdiag_zero(rng):
    X = sim.simulate_covariates(100_000, sim.RegressionSpec(covariate_offdiag=0.0), rng)
    corr = np.corrcoef(X[:, 1:], rowvar=False)
    assert np.all(np.abs(corr[np.triu_indices(3, 1)]) <= 0.01)


def test_simulate_covariates_rejects_indefinite_covariance(rng):
    with pytest.raises(ConfigurationError, match="positive definite"):
        sim.simulate_covariates(10, sim.RegressionSpec(covariate_offdiag=1.5), rng)


def test_simulate_covariates_needs_a_row(rng):
    with pytest.raises(ConfigurationError):
        sim.simulate_covariates(0, sim.RegressionSpec(), rng)


def test_simulate_outcome_noiseless_limit(rng):
    spec = sim.RegressionSpec(error_sd=1e-12)
    X = sim.simulate_covariates(50, spec, rng)
    theta = np.array([0.5, -1.0, 2.0, 0.25])
    assert_allclose(sim.simulate_outcome(X, theta, spec, rng), X @ theta, atol=1e-9)


def test_simulate_outcome_logistic_rates(rng):
    spec = sim.RegressionSpec(outcome="logistic")
    X = sim.simulate_covariates(100_000, spec, rng)
    y = sim.simulate_outcome(X, np.zeros(4), spec, rng)
    assert set(np.unique(y)) <= {0.0, 1.0}
    assert 0.49 <= y.mean() <= 0.51

    ones = np.ones((100_000, 4))
    y = sim.simulate_outcome(ones, np.array([-1.0, 0.0, 0.0, 0.0]), spec, rng)
    assert 0.26 <= y.mean() <= 0.28


def test_simulate_outcome_parameter_length(rng):
    with pytest.raises(DimensionError):
        sim.simulate_outcome(np.ones((3, 4)), np.zeros(3), sim.RegressionSpec(), rng)


def test_missingness_rate_for_x1(rng):
    """Test x2 = 0 gives x1-missingness probability invlogit(-1)."""
    X = np.zeros((100_000, 4))
    X[:, 0] = 1.0
    X[:, 1] = 5.0
    masked = sim.apply_missingness(X, MISSING, rng)
    assert 0.26 <= masked[:, 4].mean() <= 0.28
    p1, p2 = sim.missingness_probabilities(X[:1], MISSING)
    assert_allclose(p1, special.expit(-1.0))
    assert_allclose(p2, special.expit(2.5))


def test_missingness_probability_for_x2_symmetric():
    X = np.array([[1.0, 0.0, 3.0, 0.0]])
    _, p2 = sim.missingness_probabilities(X, MISSING)
    assert_allclose(p2, 0.5)


def test_missingness_indicators_match_zeroed_cells(rng):
    X = sim.simulate_covariates(5000, sim.RegressionSpec(), rng)
    masked = sim.apply_missingness(X, MISSING, rng)
    assert masked.shape == (5000, 6)
    m1, m2 = masked[:, 4] == 1.0, masked[:, 5] == 1.0
    assert_array_equal(masked[m1, 1], 0.0)
    assert_array_equal(masked[m2, 2], 0.0)
    assert_array_equal(masked[~m1, 1], X[~m1, 1])
    assert_array_equal(masked[~m2, 2], X[~m2, 2])
    assert_array_equal(masked[:, 3], X[:, 3])


def test_mask_uses_pre_masking_values():
    """Test x2-missingness depends on the original x1 even when x1 is masked."""
    X = np.array([[1.0, 4.0, 1.0, 1.0]])
    uniforms = np.array([[0.0, 0.98]])
    masked = sim.mask_covariates(X, uniforms, MISSING)
    # p2 = invlogit(0.5*4 + 0.25 + 0.5*4) ~ 0.986; with x1 masked it would be ~ 0.56
    assert masked[0, 4] == 1.0 and masked[0, 5] == 1.0
    again = sim.mask_covariates(X, uniforms, MISSING)
    assert_array_equal(again, masked)


def test_assemble_regression_dataset_layout(rng):
    spec = sim.RegressionSpec(missingness=MISSING)
    data = sim.simulate_regression(spec, np.zeros((2, 4)), 30, rng)
    assert data.shape == (2, 30, 7)
    assert sim.data_columns(spec) == ["y", "intercept", "x1", "x2", "x3", "m1", "m2"]
    assert_array_equal(data[:, :, 1], 1.0)

    complete = sim.simulate_regression(sim.RegressionSpec(), np.zeros((1, 4)), 10, rng)
    assert complete.shape == (1, 10, 5)


def test_assemble_regression_dataset_round_trip():
    y = np.arange(3.0)
    Xm = np.arange(18.0).reshape(3, 6)
    data = sim.assemble_regression_dataset(y, Xm)
    assert_array_equal(data[:, 0], y)
    assert_array_equal(data[:, 1:5], Xm[:, :4])
    with pytest.raises(DimensionError):
        sim.assemble_regression_dataset(np.arange(2.0), Xm)


def test_ols_estimate_recovers_noiseless_coefficients(rng):
    spec = sim.RegressionSpec(error_sd=1e-12)
    theta = sim.draw_regression_params(spec, rng, size=3)
    data = sim.simulate_regression(spec, theta, 40, rng)
    assert_allclose(sim.ols_estimate(data), theta, atol=1e-8)


def test_regression_spec_validation():
    with pytest.raises(ConfigurationError, match="outcome"):
        sim.RegressionSpec(outcome="poisson").validate()
    with pytest.raises(ConfigurationError, match="error_sd"):
        sim.RegressionSpec(error_sd=0.0).validate()
    with pytest.raises(ConfigurationError, match="3 covariates"):
        sim.RegressionSpec(n_covariates=2, missingness=MISSING).validate()
    with pytest.raises(ConfigurationError, match="beta_m2"):
        sim.MissingnessSpec(beta_m2=(0.0, 1.0)).validate()


# ==================== GENETICS ====================

def test_int2bin_examples():
    assert_array_equal(sim.int2bin(5, 3), [1, 0, 1])
    assert_array_equal(sim.int2bin(0, 4), [0, 0, 0, 0])
    with pytest.raises(InputError):
        sim.int2bin(8, 3)


def test_int2bin_round_trip():
    for i in range(2 ** 6):
        assert sim.bin2int(sim.int2bin(i, 6)) == i


def test_simulate_htfs_on_simplex(rng):
    spec = sim.GeneticsSpec(n_loci=3, alpha=0.5)
    draws = sim.simulate_htfs(spec, rng, size=1000)
    assert draws.shape == (1000, 8)
    assert np.all(draws >= 0.0)
    assert np.all(np.abs(draws.sum(axis=1) - 1.0) <= 1e-12)


def test_simulate_htfs_uniform_marginal(rng):
    draws = sim.simulate_htfs(sim.GeneticsSpec(n_loci=1, alpha=1.0), rng, size=100_000)
    assert 0.49 <= draws[:, 0].mean() <= 0.51


def test_simulate_htfs_concentrates_for_large_alpha(rng):
    draws = sim.simulate_htfs(sim.GeneticsSpec(n_loci=2, alpha=1e4), rng, size=1000)
    assert np.max(np.abs(draws - 0.25)) < 0.05


def test_simulate_genotypes_degenerate(rng):
    g = sim.simulate_genotypes(50, sim.GeneticsSpec(), [1.0, 0.0, 0.0, 0.0], rng)
    assert g.shape == (50, 2)
    assert_array_equal(g, 0)


def test_simulate_genotypes_hardy_weinberg(rng):
    g = sim.simulate_genotypes(100_000, sim.GeneticsSpec(n_loci=1), [0.5, 0.5], rng)
    freqs = np.bincount(g[:, 0], minlength=3) / g.shape[0]
    assert_allclose(freqs, [0.25, 0.5, 0.25], atol=0.01)


def test_simulate_genotypes_column_means(rng):
    """Test column means estimate twice the allele-1 frequency at each locus."""
    htfs = np.array([0.1, 0.2, 0.3, 0.4])
    g = sim.simulate_genotypes(100_000, sim.GeneticsSpec(), htfs, rng)
    assert set(np.unique(g)) <= {0, 1, 2}
    bits = sim.haplotype_bits(2)
    assert_allclose(g.mean(axis=0), 2 * htfs @ bits, atol=0.02)


def test_simulate_genotypes_rejects_off_simplex(rng):
    with pytest.raises(InputError):
        sim.simulate_genotypes(5, sim.GeneticsSpec(), [0.5, 0.5, 0.5, 0.0], rng)
    with pytest.raises(InputError):
        sim.simulate_genotypes(5, sim.GeneticsSpec(), [1.2, -0.2, 0.0, 0.0], rng)
    with pytest.raises(DimensionError):
        sim.simulate_genotypes(5, sim.GeneticsSpec(), [0.5, 0.5], rng)


def test_haplotype_bits_leading_locus_first():
    assert_array_equal(sim.haplotype_bits(2), [[0, 0], [0, 1], [1, 0], [1, 1]])


def test_project_to_simplex():
    assert_allclose(sim.project_to_simplex([0.5, -0.1, 0.3, 0.2]), [[0.5, 0.0, 0.3, 0.2]])
    assert_allclose(sim.project_to_simplex([2.0, 2.0]), [[0.5, 0.5]])
    with pytest.raises(InferenceError):
        sim.project_to_simplex([-0.1, -0.2])


def test_free_and_full_coordinates():
    spec = sim.GeneticsSpec()
    params = np.array([[0.1, 0.2, 0.3, 0.4]])
    assert_allclose(sim.full_coordinates(spec, sim.free_coordinates(spec, params)), params)
    assert sim.free_coordinates(sim.NormalMeanSpec(), [[1.5]]).shape == (1, 1)


# ==================== NORMAL MEAN ====================

def test_normal_mean_posterior_is_conjugate():
    spec = sim.NormalMeanSpec(prior_mean=0.0, prior_sd=math.sqrt(2.0), noise_sd=1.0)
    data = np.full(50, 0.4)
    mean, sd = sim.normal_mean_posterior(spec, data)
    precision = 0.5 + 50.0
    assert_allclose(mean, 50 * 0.4 / precision)
    assert_allclose(sd, 1 / math.sqrt(precision))


# ==================== GENERIC INTERFACE ====================

@pytest.mark.parametrize("spec", [sim.RegressionSpec(missingness=MISSING), sim.GeneticsSpec(n_loci=3),
                                  sim.NormalMeanSpec()])
def test_draw_training_batch_shapes_and_determinism(spec):
    a = sim.draw_training_batch(spec, 5, 12, np.random.default_rng(9))
    b = sim.draw_training_batch(spec, 5, 12, np.random.default_rng(9))
    assert a.data.shape == (5, 12, len(sim.data_columns(spec)))
    assert a.params.shape == (5, sim.param_dim(spec))
    assert a.sample_size == 12
    assert_array_equal(a.data, b.data)
    assert_array_equal(a.params, b.params)


def test_draw_training_batch_single_dataset(rng):
    batch = sim.draw_training_batch(sim.RegressionSpec(), 1, 30, rng)
    assert batch.data.shape == (1, 30, 5)
    assert batch.params.shape == (1, 4)


def test_genetics_batch_params_on_simplex(rng):
    batch = sim.draw_training_batch(sim.GeneticsSpec(), 200, 10, rng)
    assert np.all(batch.params >= 0)
    assert np.all(np.abs(batch.params.sum(axis=1) - 1.0) <= 1e-12)


def test_prior_density_values():
    assert_allclose(sim.prior_density(sim.NormalMeanSpec(prior_sd=1.0), [[0.0]]), [1 / math.sqrt(2 * math.pi)])
    spec = sim.GeneticsSpec(n_loci=1, alpha=1.0)
    # Dirichlet(1, 1) is uniform on the segment: density 1
    assert_allclose(sim.prior_density(spec, [[0.3, 0.7]]), [1.0])
    assert_array_equal(sim.prior_density(spec, [[1.2, -0.2], [0.5, 0.6]]), [0.0, 0.0])
    regression = sim.prior_density(sim.RegressionSpec(), np.zeros((1, 4)))
    assert_allclose(regression, [(1 / math.sqrt(2 * math.pi * 2.0)) ** 4])


def test_spec_dict_round_trip():
    for spec in (sim.RegressionSpec(missingness=MISSING), sim.GeneticsSpec(n_loci=3, alpha=2.0),
                 sim.NormalMeanSpec(noise_sd=0.5)):
        assert sim.spec_from_dict(sim.spec_to_dict(spec)) == spec


def test_spec_from_dict_errors():
    with pytest.raises(ConfigurationError, match="simulator.kind"):
        sim.spec_from_dict({"kind": "poisson"})
    with pytest.raises(ConfigurationError, match="simulator.n_loc"):
        sim.spec_from_dict({"kind": "genetics", "n_loc": 2})
    with pytest.raises(ConfigurationError, match="simulator.missingness.beta"):
        sim.spec_from_dict({"kind": "regression", "missingness": {"beta": [1, 2]}})


# ==================== CSV ====================

def test_batch_frame_round_trip(rng):
    spec = sim.GeneticsSpec()
    batch = sim.draw_training_batch(spec, 3, 4, rng)
    frame = sim.batch_to_frame(batch.data, sim.data_columns(spec))
    assert list(frame.columns) == ["dataset", "g1", "g2"]
    assert len(frame) == 12
    assert_array_equal(sim.frame_to_dataset(frame, sim.data_columns(spec), 2), batch.data[2])
    with pytest.raises(InputError, match="3 datasets"):
        sim.frame_to_dataset(frame, sim.data_columns(spec))


def test_frame_to_dataset_errors():
    frame = pd.DataFrame({"g1": [0, 1], "g2": [1, np.nan]})
    with pytest.raises(InputError, match="lacks columns"):
        sim.frame_to_dataset(frame, ["g1", "g3"])
    with pytest.raises(InputError, match="non-numeric"):
        sim.frame_to_dataset(frame, ["g1", "g2"])
