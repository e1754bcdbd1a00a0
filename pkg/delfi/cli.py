"""Command-line entry point: synth, featurize, train, predict, evaluate and gradcheck."""

import argparse
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Any, Callable

import numpy as np
from dotenv import dotenv_values

from . import cache, settings
from .data_model import DEFAULT_BINS, FEATURES, PROBABILISTIC_HORIZONS, DelfiError, ForecastMode, Horizon, UsageError
from .dataset import (
    DatasetBundle,
    PointDataset,
    ResidualScale,
    build_histogram_dataset,
    build_point_dataset,
    group_stations_by_residual_variance,
    split_train_test,
)
from .evaluation import nef_ablation, run_benchmark
from .forecaster import (
    ModelRegistry,
    histogram_rows,
    iterate_point_forecast,
    model_residual_scale,
    point_rows,
    short_step,
    write_predictions,
)
from .ingest import FeatureSet, featurize, load_features, load_stations, store_features
from .model import LONG, SHORT, VARIANTS, ModelConfig, forward_long, init_model, loss_and_grad
from .neural import grad_check
from .storage import NoArtifactFound
from .synth import DEFAULT_HOURS, DEFAULT_STATIONS, generate, write_dataset
from .trainer import TrainConfig, train_model

_logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(command)s - %(message)s"
EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

# Shared options: name -> (type, default). Config files use the same names.
OPTIONS: dict[str, tuple[Callable[[str], Any], Any]] = {
    "out": (str, "out"),
    "seed": (int, settings.DELFI_SEED),
    "threads": (int, settings.DELFI_THREADS),
    "hidden_size": (int, settings.DELFI_HIDDEN_SIZE),
    "num_layers": (int, settings.DELFI_NUM_LAYERS),
    "batch_size": (int, settings.DELFI_BATCH_SIZE),
    "epochs": (int, settings.DELFI_EPOCHS),
    "n_t": (int, settings.DELFI_N_T),
    "m_t": (int, settings.DELFI_M_T),
    "pretrain_epochs": (int, settings.DELFI_PRETRAIN_EPOCHS),
    "lr": (float, settings.DELFI_LR),
    "clip_norm": (float, settings.DELFI_CLIP_NORM),
    "k": (int, settings.DELFI_KNN_K),
    "log_level": (str, settings.DELFI_LOG_LEVEL),
}


class CommandFormatter(logging.Formatter):
    """Formatter that stamps the running subcommand on every record."""

    def __init__(self, command: str, fmt: str = LOG_FORMAT):
        super().__init__(fmt)
        self.command = command

    def format(self, record):
        record.command = self.command
        return super().format(record)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value file with option defaults")
    for name, (kind, _) in OPTIONS.items():
        common.add_argument(f"--{name.replace('_', '-')}", dest=name, type=kind, default=None)

    parser = argparse.ArgumentParser(prog="delfi", description="PM2.5 forecasting pipeline")
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", parents=[common], help="generate a synthetic station dataset")
    synth.add_argument("--stations", type=int, default=DEFAULT_STATIONS)
    synth.add_argument("--hours", type=int, default=DEFAULT_HOURS)

    feat = commands.add_parser("featurize", parents=[common], help="ingest station CSVs and compute features")
    feat.add_argument("--data", help="directory holding stations.csv (default: <out>/raw)")
    feat.add_argument("--no-nef", action="store_true", help="zero the NEF column")

    train = commands.add_parser("train", parents=[common], help="train a mixture model")
    train.add_argument("--variant", choices=VARIANTS, required=True)
    train.add_argument("--horizon", type=int)
    train.add_argument("--resume", action="store_true", help="continue from the last checkpoint")

    predict = commands.add_parser("predict", parents=[common], help="forecast the test windows")
    predict.add_argument("--variant", choices=VARIANTS, required=True)
    predict.add_argument("--horizon", type=int, required=True)

    evaluate = commands.add_parser("evaluate", parents=[common], help="benchmark DELFI against the baselines")
    evaluate.add_argument(
        "--nef-ablation", type=int, metavar="S", help="also train long-term models for S with and without NEF"
    )

    gradcheck = commands.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    gradcheck.add_argument("--samples", type=int, default=20, help="entries checked per parameter block")
    return parser


def resolve_config(args: argparse.Namespace) -> dict[str, Any]:
    """Defaults (environment aware) < config file < explicit flags."""
    config = {name: default for name, (_, default) in OPTIONS.items()}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"Config file not found: {path}")
        for key, value in dotenv_values(path).items():
            name = key.strip().replace("-", "_")
            if name not in OPTIONS:
                raise UsageError(f"Unknown config key {key!r} in {path}")
            try:
                config[name] = OPTIONS[name][0](value)
            except (TypeError, ValueError) as e:
                raise UsageError(f"Bad value for {key} in {path}: {value!r}") from e
    for name in OPTIONS:
        if getattr(args, name) is not None:
            config[name] = getattr(args, name)
    return config


def setup_logging(command: str, out: Path, level: str):
    out.mkdir(parents=True, exist_ok=True)
    logging.basicConfig(level=level.upper(), format=LOG_FORMAT, force=True)
    root = logging.getLogger()
    root.addHandler(logging.FileHandler(out / "run.log"))
    for handler in root.handlers:
        handler.setFormatter(CommandFormatter(command))


def write_effective_config(out: Path, command: str, args: argparse.Namespace, config: dict[str, Any]):
    values = {**vars(args), **config, "command": command}
    lines = [f"{key} = {values[key]}" for key in sorted(values) if key != "config" or values[key]]
    (out / "effective_config.txt").write_text("\n".join(lines) + "\n")
    _logger.info(f"Effective configuration: {', '.join(lines)}")


# Pipeline helpers


def _features_path(out: Path) -> Path:
    return out / "features" / "features.bin"


def _load_features(out: Path) -> FeatureSet:
    path = _features_path(out)
    if not path.exists():
        raise UsageError(f"No features at {path}; run featurize first")
    return load_features(path)


def _cached(out: Path, kind: str, horizon: int | None, build: Callable[[], Any]):
    root = out / "cache"
    key = cache.dataset_key(_features_path(out), kind, horizon)
    if cache.exists_dataset(root, key):
        _logger.info(f"Dataset cache hit for {key}")
        return cache.load_dataset(root, key)
    dataset = build()
    cache.store_dataset(root, key, dataset)
    return dataset


def _point_split(out: Path, features: FeatureSet) -> tuple[PointDataset, PointDataset]:
    dataset = _cached(out, "point", None, lambda: build_point_dataset(features))
    return split_train_test(dataset, features.timestamps)


def _histogram_split(out: Path, features: FeatureSet, s: int):
    dataset = _cached(out, "histogram", s, lambda: build_histogram_dataset(features, s))
    return split_train_test(dataset, features.timestamps)


def _model_config(config: dict[str, Any]) -> ModelConfig:
    return ModelConfig(hidden_size=config["hidden_size"], num_layers=config["num_layers"])


def _train_config(config: dict[str, Any]) -> TrainConfig:
    return TrainConfig(
        n_epochs=config["epochs"],
        n_t=config["n_t"],
        m_t=config["m_t"],
        pretrain_epochs=config["pretrain_epochs"],
        lr=config["lr"],
        batch_size=config["batch_size"],
        clip_norm=config["clip_norm"],
        seed=config["seed"],
    )


def _long_horizon(horizon: int | None) -> int:
    if horizon is None:
        raise UsageError("--horizon is required for long-term models")
    try:
        return Horizon(horizon, ForecastMode.PROBABILISTIC).s
    except DelfiError as e:
        raise UsageError(str(e)) from e


# Commands


def cmd_synth(args: argparse.Namespace, config: dict[str, Any]) -> int:
    out = Path(config["out"])
    stations, records = generate(args.stations, args.hours, config["seed"])
    write_dataset(out / "raw", stations, records)
    return EXIT_OK


def cmd_featurize(args: argparse.Namespace, config: dict[str, Any]) -> int:
    out = Path(config["out"])
    meta_path = Path(args.data or out / "raw") / "stations.csv"
    if not meta_path.exists():
        raise UsageError(f"No stations.csv under {meta_path.parent}")
    stations, frames = load_stations(meta_path, config["threads"])
    features = featurize(frames, stations, use_nef=not args.no_nef)
    store_features(_features_path(out), features)
    return EXIT_OK


def cmd_train(args: argparse.Namespace, config: dict[str, Any]) -> int:
    out = Path(config["out"])
    horizon = _long_horizon(args.horizon) if args.variant == LONG else None
    features = _load_features(out)
    point_train, point_test = _point_split(out, features)
    grouping = group_stations_by_residual_variance(point_train)
    metadata = {
        "standardizer": features.standardizer.to_header(),
        "features": list(FEATURES),
        "bins": {"edges": [e if np.isfinite(e) else "inf" for e in DEFAULT_BINS.edges], "labels": list(DEFAULT_BINS.labels)},
        "use_nef": features.use_nef,
    }
    if args.variant == SHORT:
        train, test = point_train, point_test
        name = "short"
    else:
        train, test = _histogram_split(out, features, horizon)
        name = f"long_s{horizon}"
    model, log = train_model(
        args.variant,
        train,
        grouping,
        _train_config(config),
        _model_config(config),
        residual_scale=ResidualScale.fit(point_train.residuals),
        horizon=horizon,
        test=test,
        metadata=metadata,
        checkpoint_path=out / "models" / "checkpoints" / f"{name}.bin",
        resume=args.resume,
    )
    ModelRegistry(out / "models").save(model)
    log.to_csv(out / "logs" / f"train_{name}.csv")
    return EXIT_OK


def cmd_predict(args: argparse.Namespace, config: dict[str, Any]) -> int:
    out = Path(config["out"])
    features = _load_features(out)
    registry = ModelRegistry(out / "models")
    if args.variant == SHORT:
        Horizon(args.horizon, ForecastMode.POINT)
        model = registry.load(SHORT)
        _, test = _point_split(out, features)
        trajectory = iterate_point_forecast(
            short_step(model), test.windows, test.last_pm, args.horizon, features.standardizer, model_residual_scale(model)
        )
        rows = point_rows(test.station_ids, test.end_timestamps, args.horizon, trajectory[:, -1])
    else:
        s = _long_horizon(args.horizon)
        model = registry.load(LONG, s)
        _, test = _histogram_split(out, features, s)
        rows = histogram_rows(test.station_ids, test.end_timestamps, s, forward_long(model, test.windows))
    write_predictions(out / "predictions" / f"{args.variant}_s{args.horizon}.csv", rows)
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace, config: dict[str, Any]) -> int:
    out = Path(config["out"])
    ablation_s = _long_horizon(args.nef_ablation) if args.nef_ablation is not None else None
    features = _load_features(out)
    point_train, point_test = _point_split(out, features)
    hist_train, hist_test = {}, {}
    for s in PROBABILISTIC_HORIZONS:
        hist_train[s], hist_test[s] = _histogram_split(out, features, s)
    bundle = DatasetBundle(point_train, point_test, hist_train, hist_test, ResidualScale.fit(point_train.residuals))
    report = run_benchmark(
        bundle,
        ModelRegistry(out / "models"),
        features.standardizer,
        k=config["k"],
        seed=config["seed"],
        threads=config["threads"],
    )
    report.to_csv(out / "reports" / "report.csv")
    tables = report.format_tables()
    (out / "reports" / "tables.txt").write_text(tables)
    print(tables)
    if ablation_s is not None:
        ablation = nef_ablation(features, ablation_s, _train_config(config), _model_config(config))
        ablation.to_csv(out / "reports" / "nef_ablation.csv")
        print(f"NEF ablation s={ablation_s}: KL {ablation.kl_with_nef:.4f} with NEF, {ablation.kl_without_nef:.4f} without")
    return EXIT_OK


def run_gradcheck(model_config: ModelConfig, seed: int, samples: int, batch: int = 4) -> dict[str, Any]:
    """Gradient check of both variants on random windows; returns reports keyed by variant."""
    rng = np.random.default_rng(seed)
    windows = rng.normal(size=(batch, model_config.window, model_config.n_features))
    reports = {}
    for variant in VARIANTS:
        model = init_model(variant, model_config, seed, horizon=12 if variant == LONG else None)
        if variant == SHORT:
            targets = rng.normal(size=batch)
        else:
            targets = rng.dirichlet(np.ones(model_config.n_bins), size=batch)
        _, analytic = loss_and_grad(model, windows, targets)
        reports[variant] = grad_check(
            lambda params: loss_and_grad(model, windows, targets)[0],
            model.params,
            analytic,
            max_entries=samples,
            rng=np.random.default_rng(seed),
        )
    return reports


def cmd_gradcheck(args: argparse.Namespace, config: dict[str, Any]) -> int:
    reports = run_gradcheck(_model_config(config), config["seed"], args.samples)
    for variant, report in reports.items():
        for line in report.lines():
            print(f"{variant} {line}")
        print(f"{variant} max relative error: {report.max_error:.3e}")
    passed = all(r.passed for r in reports.values())
    return EXIT_OK if passed else EXIT_FAILURE


COMMANDS = {
    "synth": cmd_synth,
    "featurize": cmd_featurize,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE

    try:
        config = resolve_config(args)
    except UsageError as e:
        print(f"delfi: error: {e}", file=sys.stderr)
        return EXIT_USAGE

    try:
        out = Path(config["out"])
        setup_logging(args.command, out, config["log_level"])
        write_effective_config(out, args.command, args, config)
        return COMMANDS[args.command](args, config)
    except (UsageError, NoArtifactFound) as e:
        _logger.error(f"{args.command} failed: {e}")
        print(f"delfi: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DelfiError as e:
        _logger.error(f"{args.command} failed: {e}")
        print(f"delfi: error: {e}", file=sys.stderr)
        return EXIT_FAILURE
    except Exception as e:
        _logger.exception(f"{args.command} failed unexpectedly")
        print(f"delfi: error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
