"""
Tests for trainer.py
"""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

import netbuilder as nb
import trainer
from simulators import GeneticsSpec, NormalMeanSpec
from utils import ConfigurationError, DimensionError, TrainingDivergedError, read_csv

TOY = NormalMeanSpec()


def _toy_model():
    """Single mean-collapse branch; zero weights start far from the optimum."""
    model = nb.build_network(nb.HyperParams(), 1, 1, seed=0)
    model.set_parameters(np.zeros(model.n_parameters))
    return model


@pytest.fixture(scope="module")
def trained_toy():
    cfg = trainer.TrainingConfig(epochs=50, batches_per_epoch=20, datasets_per_batch=100,
                                 sample_size_range=(50, 200), learning_rate=0.01, seed=11)
    return trainer.train(_toy_model(), TOY, cfg)


# ==================== CONFIGURATION ====================

def test_config_validation():
    with pytest.raises(ConfigurationError, match="epochs"):
        trainer.TrainingConfig(epochs=-1).validate()
    with pytest.raises(ConfigurationError, match="n_min"):
        trainer.TrainingConfig(sample_size_range=(100, 50)).validate()
    with pytest.raises(ConfigurationError, match="learning_rate"):
        trainer.TrainingConfig(learning_rate=0.0).validate()
    with pytest.raises(ConfigurationError, match="loss"):
        trainer.TrainingConfig(loss="gof").validate()


def test_config_from_dict():
    cfg = trainer.TrainingConfig.from_dict({"epochs": 3, "sample_size_range": [10, 20]})
    assert cfg.epochs == 3
    assert cfg.sample_size_range == (10, 20)
    assert trainer.TrainingConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigurationError, match="training.epochss"):
        trainer.TrainingConfig.from_dict({"epochss": 3})


def test_config_defaults_use_training_recipe():
    cfg = trainer.TrainingConfig().validate()
    assert cfg.sample_size_range == (30, 200)
    assert cfg.learning_rate == 1e-3


def test_config_rejects_empty_batches():
    with pytest.raises(ConfigurationError, match="datasets_per_batch must be >= 1"):
        trainer.TrainingConfig(datasets_per_batch=0).validate()
    with pytest.raises(ConfigurationError, match="training: datasets_per_batch"):
        trainer.TrainingConfig.from_dict({"datasets_per_batch": 0})


def test_total_datasets():
    cfg = trainer.TrainingConfig(epochs=2, batches_per_epoch=3, datasets_per_batch=5)
    assert cfg.total_datasets == 30


# ==================== TRAINING ====================

def test_zero_epochs_leaves_weights_untouched():
    model = nb.build_network(nb.HyperParams(), 1, 1, seed=4)
    before = model.parameters()
    _, trace = trainer.train(model, TOY, trainer.TrainingConfig(epochs=0))
    assert_array_equal(model.parameters(), before)
    assert trace.batch_losses == []
    assert trace.datasets_generated == 0


def test_training_is_seed_deterministic():
    cfg = trainer.TrainingConfig(epochs=2, batches_per_epoch=3, datasets_per_batch=10,
                                 sample_size_range=(5, 9), seed=3)
    a, trace_a = trainer.train(_toy_model(), TOY, cfg)
    b, trace_b = trainer.train(_toy_model(), TOY, cfg)
    assert_array_equal(a.parameters(), b.parameters())
    assert trace_a.batch_losses == trace_b.batch_losses
    assert trace_a.sample_sizes == trace_b.sample_sizes
    assert all(5 <= n <= 9 for n in trace_a.sample_sizes)
    assert trace_a.datasets_generated == 60
    assert len(trace_a.epoch_losses) == 2


def test_training_records_sample_range():
    cfg = trainer.TrainingConfig(epochs=1, batches_per_epoch=1, datasets_per_batch=4,
                                 sample_size_range=(7, 7))
    model, trace = trainer.train(_toy_model(), TOY, cfg)
    assert model.trained_sample_range == (7, 7)
    assert trace.sample_sizes == [7]


def test_training_rejects_dimension_mismatch():
    model = nb.build_network(nb.HyperParams(), 2, 1, seed=0)
    with pytest.raises(DimensionError, match="column axis"):
        trainer.train(model, TOY, trainer.TrainingConfig(epochs=1))
    model = nb.build_network(nb.HyperParams(), 2, 3, seed=0)
    with pytest.raises(DimensionError, match="parameter axis"):
        trainer.train(model, GeneticsSpec(), trainer.TrainingConfig(epochs=1))


def test_training_rejects_single_sample_with_sdev():
    model = nb.build_network(nb.HyperParams(collapsing=("sdev",)), 1, 1, seed=0)
    cfg = trainer.TrainingConfig(epochs=1, sample_size_range=(1, 10))
    with pytest.raises(ConfigurationError, match="n_min"):
        trainer.train(model, TOY, cfg)


def test_training_divergence_is_reported():
    exploding = NormalMeanSpec(prior_sd=1e200)
    cfg = trainer.TrainingConfig(epochs=1, batches_per_epoch=2, datasets_per_batch=5,
                                 sample_size_range=(3, 3))
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(TrainingDivergedError, match="batch 0"):
            trainer.train(_toy_model(), exploding, cfg)


def test_toy_training_reduces_loss(trained_toy):
    _, trace = trained_toy
    assert len(trace.epoch_losses) == 50
    assert trace.epoch_losses[-1] < 0.25 * trace.epoch_losses[0]


def test_toy_model_estimates_sample_mean(trained_toy):
    model, _ = trained_toy
    data = np.linspace(0.2, 1.2, 100).reshape(1, 100, 1)
    assert abs(nb.estimate(model, data)[0, 0] - 0.7) < 0.1


def test_toy_model_rmse_near_analytic(trained_toy):
    model, _ = trained_toy
    result = trainer.evaluate_mse(model, TOY, 2000, 100, np.random.default_rng(5))
    assert result.rmse.shape == (1,)
    assert abs(result.rmse[0] - 0.1) < 0.025


# ==================== EVALUATION ====================

def test_evaluate_mse_with_sample_mean_oracle():
    result = trainer.evaluate_mse(lambda data: data.mean(axis=1), TOY, 5000, 100, np.random.default_rng(0))
    assert_allclose(result.rmse, [1 / math.sqrt(100)], rtol=0.05)
    assert abs(result.bias[0]) < 0.01
    assert result.sample_size == 100
    assert result.n_datasets == 5000


def test_evaluate_mse_needs_datasets():
    with pytest.raises(ConfigurationError):
        trainer.evaluate_mse(lambda data: data.mean(axis=1), TOY, 0, 10, np.random.default_rng(0))


# ==================== EXPORT ====================

def test_write_trace(tmp_path):
    trace = trainer.TrainingTrace(batch_losses=[3.0, 2.0, 1.5, 1.0, 0.5], sample_sizes=[5, 6, 7, 8, 9])
    path = tmp_path / "trace.csv"
    trainer.write_trace(trace, 2, str(path))
    frame = read_csv(path)
    assert list(frame.columns) == ["epoch", "batch", "n", "loss"]
    assert frame["epoch"].tolist() == [0, 0, 1, 1, 2]
    assert frame["batch"].tolist() == [0, 1, 0, 1, 0]
    assert frame["loss"].tolist() == [3.0, 2.0, 1.5, 1.0, 0.5]
