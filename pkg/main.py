"""
Command line entry point for simsmith.

Subcommands: simulate, train, estimate, bootstrap, abc, em, coverage, report.
CSV payloads go to standard output (or --out); logging goes to standard error.

Every subcommand writes a run manifest (config echo, seeds, library versions)
next to its --out file, or into the output directory when writing to stdout.

Exit codes: 0 success, 2 configuration or usage error, 1 any other failure
(unreadable model files and malformed data included).
"""

import argparse
import logging
import logging.config
import os
import sys
from dataclasses import replace

import numpy as np
import pandas as pd

import em_baseline
import harness
import inference
import netbuilder
import simulators
import trainer
from utils import ConfigurationError, read_csv, stream_rng, stream_seed, write_csv

logger = logging.getLogger(__name__)

LOG_CONFIG = os.path.join(os.path.dirname(os.path.abspath(__file__)), "logging_config.ini")


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting, so run_cli owns the exit code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigurationError(f"{self.prog}: {message}")


def setup_logging(verbose: bool = False) -> None:
    if os.path.exists(LOG_CONFIG):
        logging.config.fileConfig(LOG_CONFIG, disable_existing_loggers=False)
    if verbose:
        logging.getLogger().setLevel(logging.DEBUG)


# ==================== ARGUMENTS ====================

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="simsmith", description="Simulation-based estimation, bootstrap and ABC.")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("simulate", help="emit simulated datasets")
    p.add_argument("--config", required=True)
    p.add_argument("--datasets", type=int, default=1)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--params-out")

    p = sub.add_parser("train", help="train an estimator network")
    p.add_argument("--config", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--trace")

    p = sub.add_parser("estimate", help="estimate parameters of datasets in a CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")

    p = sub.add_parser("bootstrap", help="parametric bootstrap intervals for one dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--dataset", type=int)
    p.add_argument("--replicates", type=int)
    p.add_argument("--level", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--replicates-out")

    p = sub.add_parser("abc", help="ABC posterior for one dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--dataset", type=int)
    p.add_argument("--draws", type=int)
    p.add_argument("--quantile", type=float)
    p.add_argument("--scale", type=float)
    p.add_argument("--refine-draws", type=int, help="0 skips the importance refinement")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = sub.add_parser("em", help="EM haplotype frequencies from a genotype CSV")
    p.add_argument("--input", required=True)
    p.add_argument("--loci", type=int, required=True)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--max-iter", type=int, default=100)
    p.add_argument("--out")

    p = sub.add_parser("coverage", help="Monte Carlo coverage study")
    p.add_argument("--config", required=True)
    p.add_argument("--model", help="trained model; trained from the config when omitted")
    p.add_argument("--replications", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = sub.add_parser("report", help="print a coverage report table")
    p.add_argument("--input", required=True)
    return parser


# ==================== HELPERS ====================

def _emit(frame: pd.DataFrame, out, metadata: dict = None) -> None:
    write_csv(frame, out if out else sys.stdout, metadata)
    if out:
        logger.info(f"Wrote {len(frame)} rows to {out}")


def _load_config(path: str, seed=None) -> harness.ScenarioConfig:
    cfg = harness.read_config(path)
    if seed is not None:
        cfg.seed = seed
        cfg.training = replace(cfg.training, seed=seed)
    return cfg


def _output_path(cfg: harness.ScenarioConfig, name: str) -> str:
    os.makedirs(cfg.output_dir, exist_ok=True)
    return os.path.join(cfg.output_dir, name)


def _model_simulator(model: netbuilder.NetworkModel, cfg=None):
    if cfg is not None:
        return cfg.simulator
    if "simulator" not in model.metadata:
        raise ConfigurationError("model carries no simulator description; pass --config")
    return simulators.spec_from_dict(model.metadata["simulator"], "model.simulator")


def _read_dataset(path: str, spec, dataset=None) -> np.ndarray:
    frame = read_csv(path)
    if dataset is None and "dataset" in frame.columns and frame["dataset"].nunique() > 1:
        raise ConfigurationError(f"{path} holds {frame['dataset'].nunique()} datasets; choose one with --dataset")
    return simulators.frame_to_dataset(frame, simulators.data_columns(spec), dataset)


def _manifest_path(cfg, command: str, out) -> str:
    if out:
        return out + ".manifest.json"
    directory = cfg.output_dir if cfg is not None else os.environ.get(harness.OUTPUT_DIR_ENV) or "output"
    os.makedirs(directory, exist_ok=True)
    return os.path.join(directory, f"{command}.manifest.json")


def _write_manifest(args, cfg, out=None, seeds: dict = None) -> None:
    arguments = {key: value for key, value in sorted(vars(args).items()) if key not in ("command", "verbose")}
    manifest = harness.run_manifest(cfg, args.command, arguments, seeds)
    harness.write_manifest(manifest, _manifest_path(cfg, args.command, out))


def _train(cfg: harness.ScenarioConfig) -> tuple:
    model = harness.build_scenario_network(cfg)
    rng = stream_rng(cfg.training.seed, "train")
    return trainer.train(model, cfg.simulator, cfg.training, rng)


# ==================== SUBCOMMANDS ====================

def cmd_simulate(args) -> None:
    cfg = _load_config(args.config, args.seed)
    rng = stream_rng(cfg.seed, "simulate")
    batch = simulators.draw_training_batch(cfg.simulator, args.datasets, args.n, rng)
    _emit(simulators.batch_to_frame(batch.data, simulators.data_columns(cfg.simulator)), args.out)
    if args.params_out:
        _emit(simulators.params_to_frame(batch.params), args.params_out)
    _write_manifest(args, cfg, args.out, {"simulate": stream_seed(cfg.seed, "simulate")})


def cmd_train(args) -> None:
    cfg = _load_config(args.config, args.seed)
    if args.epochs is not None:
        cfg.training = replace(cfg.training, epochs=args.epochs).validate()
    model, trace = _train(cfg)
    netbuilder.save_model(model, args.out)
    if args.trace:
        trainer.write_trace(trace, cfg.training.batches_per_epoch, args.trace)
    _write_manifest(args, cfg, args.out, {"train": stream_seed(cfg.training.seed, "train")})


def cmd_estimate(args) -> None:
    model = netbuilder.load_model(args.model)
    spec = _model_simulator(model)
    frame = read_csv(args.data)
    columns = simulators.data_columns(spec)
    ids = sorted(frame["dataset"].unique()) if "dataset" in frame.columns else [None]
    rows = []
    for dataset in ids:
        data = simulators.frame_to_dataset(frame, columns, dataset)
        rows.append(netbuilder.estimate(model, data[None])[0])
    out = pd.DataFrame(np.array(rows), columns=[f"theta_{j}" for j in range(model.output_dim)])
    out.insert(0, "dataset", [0 if d is None else int(d) for d in ids])
    _emit(out, args.out)
    _write_manifest(args, None, args.out, {"model": model.seed})


def cmd_bootstrap(args) -> None:
    cfg = _load_config(args.config, args.seed) if args.config else None
    model = netbuilder.load_model(args.model)
    spec = _model_simulator(model, cfg)
    data = _read_dataset(args.data, spec, args.dataset)
    level = args.level if args.level is not None else (cfg.level if cfg else 0.95)
    R = args.replicates if args.replicates is not None else (cfg.bootstrap_replicates if cfg else 1000)
    seed = args.seed if args.seed is not None else (cfg.seed if cfg else 0)
    result = inference.bootstrap_confidence(model, spec, data, level, R, stream_rng(seed, "bootstrap"))
    _emit(inference.confidence_frame(result), args.out)
    if args.replicates_out:
        metadata = {"sample_size": result.sample_size, "level": result.level, "seed": seed}
        _emit(inference.replicates_frame(result), args.replicates_out, metadata)
    _write_manifest(args, cfg, args.out, {"bootstrap": stream_seed(seed, "bootstrap"), "model": model.seed})


def cmd_abc(args) -> None:
    cfg = _load_config(args.config, args.seed) if args.config else None
    settings = cfg.abc if cfg else harness.AbcSettings()
    settings = harness.AbcSettings(
        n_draws=args.draws if args.draws is not None else settings.n_draws,
        accept_quantile=args.quantile if args.quantile is not None else settings.accept_quantile,
        scale=args.scale if args.scale is not None else settings.scale,
        refine_draws=args.refine_draws if args.refine_draws is not None else settings.refine_draws,
    )
    model = netbuilder.load_model(args.model)
    spec = _model_simulator(model, cfg)
    data = _read_dataset(args.data, spec, args.dataset)
    seed = args.seed if args.seed is not None else (cfg.seed if cfg else 0)

    posterior = inference.abc_sample(model, spec, data, settings.n_draws, settings.accept_quantile,
                                     stream_rng(seed, "abc"))
    if settings.refine_draws > 0 and posterior.draws.shape[0] >= 2:
        posterior = inference.abc_importance_refine(model, spec, data, posterior, settings.scale,
                                                    settings.refine_draws, stream_rng(seed, "abc", "refine"))
    _emit(inference.posterior_frame(posterior), args.out, inference.posterior_metadata(posterior))
    _write_manifest(args, cfg, args.out, {
        "abc": stream_seed(seed, "abc"),
        "refine": stream_seed(seed, "abc", "refine"),
        "model": model.seed,
    })


def cmd_em(args) -> None:
    genotypes = em_baseline.read_genotypes(args.input)
    if genotypes.shape[1] != args.loci:
        raise ConfigurationError(f"--loci {args.loci} but the genotype table has {genotypes.shape[1]} loci")
    result = em_baseline.em_estimate(genotypes, eps=args.eps, max_iter=args.max_iter)
    _emit(em_baseline.em_result_frame(result), args.out)
    _write_manifest(args, None, args.out)


def cmd_coverage(args) -> None:
    cfg = _load_config(args.config, args.seed)
    if args.replications is not None:
        cfg.replications = args.replications
    if args.workers is not None:
        cfg.workers = args.workers
    cfg.validate()
    if args.model:
        model = netbuilder.load_model(args.model)
    else:
        model, _ = _train(cfg)
    report = harness.coverage_experiment(cfg, model)
    out = args.out or _output_path(cfg, f"{cfg.scenario}_coverage.csv")
    harness.write_report(report, out)
    _write_manifest(args, cfg, out)


def cmd_report(args) -> None:
    sys.stdout.write(harness.format_report(harness.read_report(args.input)))
    _write_manifest(args, None)


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "estimate": cmd_estimate,
    "bootstrap": cmd_bootstrap,
    "abc": cmd_abc,
    "em": cmd_em,
    "coverage": cmd_coverage,
    "report": cmd_report,
}


def run_cli(args) -> int:
    """Run one subcommand; returns the process exit code."""
    parser = build_parser()
    try:
        parsed = parser.parse_args(args)
    except ConfigurationError as e:
        sys.stderr.write(f"{e}\n")
        return 2
    except SystemExit as e:  # --help
        return int(e.code or 0)
    if parsed.command is None:
        parser.print_usage(sys.stderr)
        return 2

    setup_logging(parsed.verbose)
    try:
        COMMANDS[parsed.command](parsed)
        return 0
    except ConfigurationError as e:
        logger.error(f"{parsed.command} failed: {e}")
        return 2
    except Exception as e:
        logger.error(f"{parsed.command} failed: {e}")
        return 1


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
