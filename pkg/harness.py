"""
Scenario configuration, coverage experiments and reports for simsmith.

A scenario is a JSON document (see README for the schema) naming the
simulator, network hyperparameters, training budget and the coverage
study grid. Unknown keys anywhere in the document are rejected with the
path to the offending key.

Coverage experiments derive one random stream per replication from the
master seed, so results do not depend on the number of workers.

Report CSV schema: scenario, parameter_index, sample_size, coverage,
mc_se, bias, rmse (one row per parameter and sample size).
"""

import json
import logging
import os
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
import pandas as pd
import scipy

import em_baseline
from inference import bootstrap_confidence
from netbuilder import HyperParams, NetworkModel, as_estimator, build_network, model_to_text
from simulators import (
    GeneticsSpec,
    RegressionSpec,
    data_columns,
    draw_params,
    ols_estimate,
    param_dim,
    simulate_datasets,
    spec_from_dict,
    spec_to_dict,
)
from trainer import TrainingConfig
from utils import (
    ConfigurationError,
    canonical_json,
    check_keys,
    read_csv,
    sha256_text,
    stream_rng,
    stream_seed,
    validate_count,
    validate_positive,
    validate_probability,
    write_csv,
)

logger = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "SIMSMITH_OUTPUT_DIR"
REPORT_COLUMNS = ["scenario", "parameter_index", "sample_size", "coverage", "mc_se", "bias", "rmse"]


# ==================== CONFIGURATION ====================

@dataclass
class AbcSettings:
    n_draws: int = 20000
    accept_quantile: float = 0.05
    scale: float = 1.0
    refine_draws: int = 20000

    def validate(self) -> "AbcSettings":
        validate_count(self.n_draws, "n_draws", 1)
        validate_count(self.refine_draws, "refine_draws", 1)
        validate_positive(self.scale, "scale")
        if not 0.0 < self.accept_quantile <= 1.0:
            raise ConfigurationError(f"accept_quantile must lie in (0, 1], got {self.accept_quantile}")
        return self


@dataclass
class ScenarioConfig:
    scenario: str
    simulator: object
    network: HyperParams
    training: TrainingConfig
    seed: int = 0
    evaluation_sample_sizes: tuple = (25, 50, 100, 200, 300)
    replications: int = 200
    bootstrap_replicates: int = 1000
    level: float = 0.95
    workers: int = 1
    output_dir: str = "output"
    abc: AbcSettings = field(default_factory=AbcSettings)

    def validate(self) -> "ScenarioConfig":
        if not isinstance(self.scenario, str) or not self.scenario:
            raise ConfigurationError("scenario: must be a non-empty string")
        validate_count(self.seed, "seed")
        validate_count(self.replications, "replications", 1)
        validate_count(self.bootstrap_replicates, "bootstrap_replicates", 10)
        validate_count(self.workers, "workers", 1)
        validate_probability(self.level, "level")
        if not self.evaluation_sample_sizes:
            raise ConfigurationError("evaluation_sample_sizes: must not be empty")
        for n in self.evaluation_sample_sizes:
            validate_count(n, "evaluation_sample_sizes", 1)
        return self

    @property
    def input_cols(self) -> int:
        return len(data_columns(self.simulator))

    @property
    def output_dim(self) -> int:
        return param_dim(self.simulator)


SECTION_KEYS = {"scenario", "seed", "simulator", "network", "training", "evaluation_sample_sizes",
                "replications", "bootstrap_replicates", "level", "workers", "output_dir", "abc"}


def config_from_dict(data: dict) -> ScenarioConfig:
    """
    Build a ScenarioConfig from its JSON form.

    The training seed defaults to the master seed.

    Raises:
        ConfigurationError: message starts with the path into the document
    """
    check_keys(data, SECTION_KEYS, "config")
    for key in ("scenario", "simulator"):
        if key not in data:
            raise ConfigurationError(f"config.{key}: required key missing")

    simulator = spec_from_dict(data["simulator"], "simulator")
    network = HyperParams.from_dict(data.get("network", {}), "network")
    training_data = dict(data.get("training", {}))
    check_keys(training_data, set(TrainingConfig.__dataclass_fields__), "training")
    training_data.setdefault("seed", data.get("seed", 0))
    training = TrainingConfig.from_dict(training_data, "training")

    abc_data = data.get("abc", {})
    check_keys(abc_data, set(AbcSettings.__dataclass_fields__), "abc")
    try:
        abc = AbcSettings(**abc_data).validate()
    except ConfigurationError as e:
        raise ConfigurationError(f"abc: {e}") from e

    scalars = {key: data[key] for key in ("seed", "replications", "bootstrap_replicates", "level",
                                          "workers", "output_dir") if key in data}
    if "evaluation_sample_sizes" in data:
        scalars["evaluation_sample_sizes"] = tuple(data["evaluation_sample_sizes"])
    try:
        return ScenarioConfig(data["scenario"], simulator, network, training, abc=abc, **scalars).validate()
    except ConfigurationError as e:
        raise ConfigurationError(f"config: {e}") from e


def config_to_dict(cfg: ScenarioConfig) -> dict:
    """Normalized JSON form (every field explicit)."""
    return {
        "scenario": cfg.scenario,
        "seed": cfg.seed,
        "simulator": spec_to_dict(cfg.simulator),
        "network": cfg.network.to_dict(),
        "training": cfg.training.to_dict(),
        "evaluation_sample_sizes": list(cfg.evaluation_sample_sizes),
        "replications": cfg.replications,
        "bootstrap_replicates": cfg.bootstrap_replicates,
        "level": cfg.level,
        "workers": cfg.workers,
        "output_dir": cfg.output_dir,
        "abc": {"n_draws": cfg.abc.n_draws, "accept_quantile": cfg.abc.accept_quantile,
                "scale": cfg.abc.scale, "refine_draws": cfg.abc.refine_draws},
    }


def read_config(path: str) -> ScenarioConfig:
    """Load a scenario file; SIMSMITH_OUTPUT_DIR overrides output_dir."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{path}: invalid JSON ({e})") from e
    cfg = config_from_dict(data)
    if os.environ.get(OUTPUT_DIR_ENV):
        cfg.output_dir = os.environ[OUTPUT_DIR_ENV]
    logger.info(f"Scenario '{cfg.scenario}' loaded from {path}")
    return cfg


def write_config(cfg: ScenarioConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(config_to_dict(cfg), f, indent=2, sort_keys=True)
        f.write("\n")


def build_scenario_network(cfg: ScenarioConfig) -> NetworkModel:
    """Untrained network sized for the scenario's simulator."""
    model = build_network(cfg.network, cfg.input_cols, cfg.output_dim, stream_seed(cfg.seed, "network"))
    model.metadata = {"scenario": cfg.scenario, "simulator": spec_to_dict(cfg.simulator)}
    return model


# ==================== COVERAGE ====================

@dataclass
class CoverageReport:
    scenario: str
    parameter_count: int
    sample_sizes: tuple
    replications: int
    coverage: np.ndarray  # (sample sizes, parameters)
    mc_se: np.ndarray
    bias: np.ndarray
    rmse: np.ndarray
    metadata: dict = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for j in range(self.parameter_count):
            for s, n in enumerate(self.sample_sizes):
                rows.append([self.scenario, j, n, self.coverage[s, j], self.mc_se[s, j],
                             self.bias[s, j], self.rmse[s, j]])
        return pd.DataFrame(rows, columns=REPORT_COLUMNS)


def _bootstrap_intervals(cfg: ScenarioConfig, model, data: np.ndarray, rng: np.random.Generator) -> tuple:
    result = bootstrap_confidence(model, cfg.simulator, data, cfg.level, cfg.bootstrap_replicates, rng)
    return result.point, result.intervals


def _run_replication(cfg: ScenarioConfig, model, master_seed: int, replication: int,
                     interval_fn: Optional[Callable] = None) -> tuple:
    # one stream per replication: theta, then one dataset + intervals per sample size
    rng = stream_rng(master_seed, "coverage", replication)
    theta = draw_params(cfg.simulator, rng, 1)[0]
    contains, errors = [], []
    for n in cfg.evaluation_sample_sizes:
        data = simulate_datasets(cfg.simulator, theta[None], n, rng)[0]
        if interval_fn is None:
            point, intervals = _bootstrap_intervals(cfg, model, data, rng)
        else:
            point, intervals = interval_fn(data, theta, rng)
        contains.append((intervals[:, 0] <= theta) & (theta <= intervals[:, 1]))
        errors.append(point - theta)
    return np.array(contains), np.array(errors)


def _replication_job(job: tuple) -> tuple:
    return _run_replication(*job)


def model_fingerprint(model) -> str:
    if isinstance(model, NetworkModel):
        return sha256_text(model_to_text(model))
    return "callable"


def coverage_experiment(cfg: ScenarioConfig, model: Union[NetworkModel, Callable],
                        rng: Optional[np.random.Generator] = None,
                        interval_fn: Optional[Callable] = None) -> CoverageReport:
    """
    Monte Carlo coverage of bootstrap intervals.

    Per replication: draw theta from the simulator's parameter
    distribution, simulate one dataset at each evaluation sample size,
    compute intervals and record whether each coordinate contains theta.

    interval_fn(data, theta, rng) -> (point, intervals) replaces the
    bootstrap (oracle intervals in tests). The master seed is cfg.seed
    unless rng is given, in which case it is drawn from rng.
    """
    cfg.validate()
    master_seed = cfg.seed if rng is None else int(rng.integers(0, 2 ** 63))
    jobs = [(cfg, model, master_seed, r, interval_fn) for r in range(cfg.replications)]

    try:
        if cfg.workers > 1 and isinstance(model, NetworkModel) and interval_fn is None:
            with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
                results = list(pool.map(_replication_job, jobs, chunksize=max(1, len(jobs) // (4 * cfg.workers))))
        else:
            if cfg.workers > 1:
                logger.warning("Callable estimators run in-process; ignoring workers setting")
            results = [_replication_job(job) for job in jobs]
    except Exception as e:
        logger.error(f"Failed to run coverage experiment for '{cfg.scenario}': {e}")
        raise

    contains = np.stack([r[0] for r in results]).astype(np.float64)
    errors = np.stack([r[1] for r in results])
    coverage = contains.mean(axis=0)
    report = CoverageReport(
        scenario=cfg.scenario,
        parameter_count=contains.shape[2],
        sample_sizes=tuple(cfg.evaluation_sample_sizes),
        replications=cfg.replications,
        coverage=coverage,
        mc_se=np.sqrt(coverage * (1.0 - coverage) / cfg.replications),
        bias=errors.mean(axis=0),
        rmse=np.sqrt(np.mean(errors ** 2, axis=0)),
        metadata={"scenario": cfg.scenario, "seed": master_seed, "model": model_fingerprint(model)},
    )
    logger.info(f"Coverage experiment '{cfg.scenario}': {cfg.replications} replications, "
                f"mean coverage {coverage.mean():.3f}")
    return report


def write_report(report: CoverageReport, path) -> None:
    try:
        write_csv(report.to_frame(), path, report.metadata)
        logger.info(f"Coverage report written to {path}")
    except Exception as e:
        logger.error(f"Failed to write coverage report to {path}: {e}")
        raise


def read_report(path) -> pd.DataFrame:
    frame = read_csv(path)
    if list(frame.columns) != REPORT_COLUMNS:
        raise ConfigurationError(f"{path}: not a coverage report (columns {list(frame.columns)})")
    return frame


def format_report(frame: pd.DataFrame) -> str:
    """Fixed-width coverage table followed by average coverage per parameter."""
    lines = [f"{'param':>5} {'n':>6} {'coverage':>9} {'mc_se':>7} {'bias':>9} {'rmse':>9}"]
    for row in frame.itertuples(index=False):
        lines.append(f"{row.parameter_index:>5} {row.sample_size:>6} {row.coverage:>9.3f} "
                     f"{row.mc_se:>7.3f} {row.bias:>9.4f} {row.rmse:>9.4f}")
    lines.append("")
    lines.append("average coverage per parameter")
    for index, value in frame.groupby("parameter_index")["coverage"].mean().items():
        lines.append(f"{index:>5} {value:>9.3f}")
    return "\n".join(lines) + "\n"


# ==================== REFERENCE ESTIMATORS ====================

@dataclass
class ReferenceComparison:
    correlation: np.ndarray
    mean_linf_gap: float
    n_datasets: int
    sample_size: int


def reference_estimator(spec) -> Callable:
    """Classical estimator for the simulator: EM for genetics, least squares for complete linear data."""
    if isinstance(spec, GeneticsSpec):
        return em_baseline.em_estimator
    if isinstance(spec, RegressionSpec) and spec.outcome == "linear" and spec.missingness is None:
        return ols_estimate
    raise ConfigurationError(f"no reference estimator for simulator {spec_to_dict(spec)['kind']} "
                             f"with these settings")


def compare_with_reference(model, spec, n_datasets: int, n: int, rng: np.random.Generator,
                           reference: Optional[Callable] = None) -> ReferenceComparison:
    """Per-coordinate correlation and mean L-infinity gap between two estimators on fresh data."""
    validate_count(n_datasets, "n_datasets", 2)
    reference = reference or reference_estimator(spec)
    params = draw_params(spec, rng, n_datasets)
    data = simulate_datasets(spec, params, n, rng)
    ours = as_estimator(model)(data)
    theirs = np.asarray(reference(data), dtype=np.float64)
    correlation = np.array([np.corrcoef(ours[:, j], theirs[:, j])[0, 1] for j in range(ours.shape[1])])
    gap = float(np.mean(np.max(np.abs(ours - theirs), axis=1)))
    return ReferenceComparison(correlation, gap, n_datasets, n)


# ==================== RUN MANIFEST ====================

def run_manifest(cfg: Optional[ScenarioConfig], command: str, arguments: dict, seeds: dict = None) -> dict:
    """
    Everything needed to replay a run: config echo, seeds and library versions.

    Commands run without a scenario file (em, report, or estimate with a
    model alone) echo a null config; seeds then holds only the streams the
    command drew from.
    """
    run_seeds = {}
    if cfg is not None:
        run_seeds = {
            "master": cfg.seed,
            "training": cfg.training.seed,
            "network": stream_seed(cfg.seed, "network"),
        }
    run_seeds.update(seeds or {})
    return {
        "command": command,
        "arguments": arguments,
        "config": config_to_dict(cfg) if cfg is not None else None,
        "seeds": run_seeds,
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pandas": pd.__version__,
        },
    }


def write_manifest(manifest: dict, path: str) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(canonical_json(manifest) + "\n")
        logger.info(f"Run manifest written to {path}")
    except Exception as e:
        logger.error(f"Failed to write run manifest to {path}: {e}")
        raise


def config_from_manifest(manifest: dict) -> ScenarioConfig:
    if manifest.get("config") is None:
        raise ConfigurationError(f"{manifest.get('command')} manifest carries no scenario config")
    return config_from_dict(manifest["config"])
