"""
Training loop for simsmith estimator networks.

Each batch draws one sample size uniformly from the configured range,
simulates datasets_per_batch (theta, dataset) pairs at that size, and takes
one Adam step on the mean squared error between the network's estimates
and the true parameters. Batches run strictly in sequence.

Randomness comes from a single generator; the same seed gives
bit-identical weights and loss trace.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

import tensor_core as tc
from netbuilder import NetworkModel, as_estimator, forward
from simulators import data_columns, draw_training_batch, param_dim
from utils import (
    ConfigurationError,
    DimensionError,
    TrainingDivergedError,
    check_keys,
    stream_rng,
    validate_count,
    validate_positive,
    write_csv,
)

logger = logging.getLogger(__name__)

SMALL_SAMPLE_COLLAPSES = ("sdev", "cov")


# ==================== CONFIGURATION ====================

@dataclass
class TrainingConfig:
    epochs: int = 10
    batches_per_epoch: int = 100
    datasets_per_batch: int = 300
    sample_size_range: tuple = (30, 200)
    learning_rate: float = 1e-3
    seed: int = 0
    loss: str = "mse"

    def __post_init__(self):
        self.sample_size_range = tuple(self.sample_size_range)

    def validate(self) -> "TrainingConfig":
        validate_count(self.epochs, "epochs")
        validate_count(self.batches_per_epoch, "batches_per_epoch")
        validate_count(self.datasets_per_batch, "datasets_per_batch", 1)
        validate_positive(self.learning_rate, "learning_rate")
        if len(self.sample_size_range) != 2:
            raise ConfigurationError(f"sample_size_range must be a pair, got {self.sample_size_range}")
        n_min, n_max = (validate_count(value, "sample_size_range", 1) for value in self.sample_size_range)
        if n_min > n_max:
            raise ConfigurationError(f"sample_size_range: n_min {n_min} exceeds n_max {n_max}")
        if self.loss != "mse":
            raise ConfigurationError(f"loss must be 'mse', got {self.loss!r}")
        return self

    @property
    def total_datasets(self) -> int:
        return self.epochs * self.batches_per_epoch * self.datasets_per_batch

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batches_per_epoch": self.batches_per_epoch,
            "datasets_per_batch": self.datasets_per_batch,
            "sample_size_range": list(self.sample_size_range),
            "learning_rate": self.learning_rate,
            "seed": self.seed,
            "loss": self.loss,
        }

    @classmethod
    def from_dict(cls, data: dict, path: str = "training") -> "TrainingConfig":
        check_keys(data, set(cls.__dataclass_fields__), path)
        try:
            return cls(**data).validate()
        except ConfigurationError as e:
            raise ConfigurationError(f"{path}: {e}") from e


@dataclass
class TrainingTrace:
    batch_losses: list = field(default_factory=list)
    epoch_losses: list = field(default_factory=list)
    sample_sizes: list = field(default_factory=list)
    wall_time: float = 0.0
    datasets_generated: int = 0


@dataclass
class EvaluationResult:
    """Per-coordinate root mean squared error and mean error (estimate - truth)."""
    rmse: np.ndarray
    bias: np.ndarray
    sample_size: int
    n_datasets: int


# ==================== TRAINING ====================

def _check_dimensions(model: NetworkModel, spec) -> None:
    cols, dim = len(data_columns(spec)), param_dim(spec)
    if model.input_cols != cols:
        raise DimensionError(f"column axis: model expects {model.input_cols} columns, "
                             f"simulator produces {cols}")
    if model.output_dim != dim:
        raise DimensionError(f"parameter axis: model outputs {model.output_dim} values, "
                             f"simulator has {dim} parameters")


def train(model: NetworkModel, spec, cfg: TrainingConfig,
          rng: Optional[np.random.Generator] = None) -> tuple:
    """
    Fit model weights on simulated data.

    The model is updated in place and returned together with the trace.
    With epochs = 0 the weights are untouched.

    Args:
        model: NetworkModel matching the simulator's dimensions
        spec: simulator spec
        cfg: TrainingConfig
        rng: generator; defaults to the "train" stream of cfg.seed

    Returns:
        (model, TrainingTrace)

    Raises:
        DimensionError: model and simulator disagree on shapes
        ConfigurationError: invalid config, or n_min < 2 with sdev/cov collapsing
        TrainingDivergedError: non-finite loss or weights
    """
    cfg.validate()
    _check_dimensions(model, spec)
    n_min, n_max = cfg.sample_size_range
    if n_min < 2 and set(model.hyperparams.collapsing) & set(SMALL_SAMPLE_COLLAPSES):
        raise ConfigurationError("sample_size_range: sdev/cov collapsing needs n_min >= 2")
    rng = rng if rng is not None else stream_rng(cfg.seed, "train")

    trace = TrainingTrace()
    started = time.perf_counter()
    params = model.parameters()
    state = tc.new_adam_state(params.size, lr=cfg.learning_rate)
    layers = model.layers()

    batch_index = 0
    for epoch in range(cfg.epochs):
        epoch_losses = []
        for _ in range(cfg.batches_per_epoch):
            n = int(rng.integers(n_min, n_max + 1))
            batch = draw_training_batch(spec, cfg.datasets_per_batch, n, rng)

            tape = tc.Tape(layers)
            output = forward(model, batch.data, tape)
            loss = tc.mse_loss(output.value, batch.params)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at batch {batch_index} (n={n})")

            grads = tc.backward(tape, tc.mse_loss_grad(output.value, batch.params))
            params, state = tc.adam_step(params, grads, state)
            if not np.all(np.isfinite(params)):
                raise TrainingDivergedError(f"non-finite weights after batch {batch_index} (n={n})")
            model.set_parameters(params)

            trace.batch_losses.append(loss)
            trace.sample_sizes.append(n)
            trace.datasets_generated += cfg.datasets_per_batch
            epoch_losses.append(loss)
            batch_index += 1

        mean_loss = float(np.mean(epoch_losses)) if epoch_losses else float("nan")
        trace.epoch_losses.append(mean_loss)
        logger.info(f"Epoch {epoch + 1}/{cfg.epochs}: mean loss {mean_loss:.6g}, n in [{n_min}, {n_max}]")

    model.trained_sample_range = (n_min, n_max)
    trace.wall_time = time.perf_counter() - started
    logger.info(f"Trained model on {trace.datasets_generated} datasets in {trace.wall_time:.1f}s")
    return model, trace


# ==================== EVALUATION ====================

def evaluate_mse(model, spec, n_eval_datasets: int, n: int, rng: np.random.Generator) -> EvaluationResult:
    """
    Error of an estimator on fresh simulated pairs at sample size n.

    model may be a NetworkModel or any callable batch -> (b, p).
    """
    validate_count(n_eval_datasets, "n_eval_datasets", 1)
    batch = draw_training_batch(spec, n_eval_datasets, n, rng)
    errors = as_estimator(model)(batch.data) - batch.params
    return EvaluationResult(
        rmse=np.sqrt(np.mean(errors ** 2, axis=0)),
        bias=np.mean(errors, axis=0),
        sample_size=n,
        n_datasets=n_eval_datasets,
    )


# ==================== EXPORT ====================

def trace_to_frame(trace: TrainingTrace, batches_per_epoch: int) -> pd.DataFrame:
    """One row per batch: epoch, batch, n, loss."""
    count = len(trace.batch_losses)
    index = np.arange(count)
    per_epoch = max(batches_per_epoch, 1)
    return pd.DataFrame({
        "epoch": index // per_epoch,
        "batch": index % per_epoch,
        "n": trace.sample_sizes,
        "loss": trace.batch_losses,
    })


def write_trace(trace: TrainingTrace, batches_per_epoch: int, path: str) -> None:
    try:
        write_csv(trace_to_frame(trace, batches_per_epoch), path)
        logger.info(f"Training trace written to {path}")
    except Exception as e:
        logger.error(f"Failed to write training trace to {path}: {e}")
        raise
