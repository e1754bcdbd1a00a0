"""MAE and KL metrics on the test split, the benchmark grids and the NEF ablation."""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import pandas as pd

from . import settings
from .baselines import KnnBaseline, LinearBaseline
from .data_model import POINT_HORIZONS, PROBABILISTIC_HORIZONS, DelfiError, ForecastMode, UsageError
from .dataset import (
    TEST,
    DatasetBundle,
    HistogramDataset,
    PointDataset,
    ResidualScale,
    build_histogram_dataset,
    build_point_dataset,
    group_stations_by_residual_variance,
    split_train_test,
)
from .forecaster import ModelRegistry, iterate_point_forecast, model_residual_scale, short_step
from .ingest import FeatureSet, Standardizer
from .model import LONG, SHORT, ModelConfig, forward_long
from .neural import kl_divergence
from .storage import NoArtifactFound
from .trainer import TrainConfig, train_model

_logger = logging.getLogger(__name__)

KNN, LINEAR, DELFI = "KNN", "Linear", "DELFI"
POINT_METHODS = (KNN, LINEAR, DELFI)
PROBABILISTIC_METHODS = (KNN, DELFI)
MAE, KL = "MAE", "KL"
REPORT_COLUMNS = ["method", "horizon", "mode", "metric", "value", "n_examples", "k", "seed"]
PREDICT_CHUNK = 2048


class LeakageError(DelfiError):
    pass


def mae(predictions: np.ndarray, actuals: np.ndarray) -> float:
    predictions = np.asarray(predictions, dtype=np.float64)
    actuals = np.asarray(actuals, dtype=np.float64)
    if predictions.shape != actuals.shape or predictions.size == 0:
        raise UsageError(f"mae needs equal non-empty inputs, got {predictions.shape} and {actuals.shape}")
    return float(np.mean(np.abs(predictions - actuals)))


def mean_kl(predicted: np.ndarray, actual: np.ndarray) -> float:
    """Mean smoothed KL(actual || predicted) over examples."""
    predicted = np.asarray(predicted, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if predicted.shape != actual.shape or len(predicted) == 0:
        raise UsageError(f"mean_kl needs equal non-empty inputs, got {predicted.shape} and {actual.shape}")
    return float(np.mean(kl_divergence(actual, predicted)))


def assert_test_split(dataset: PointDataset | HistogramDataset):
    leaked = int(np.sum(dataset.split != TEST))
    if leaked:
        raise LeakageError(f"{leaked} non-test examples reached a metric")


@dataclass(frozen=True)
class ReportCell:
    method: str
    horizon: int
    mode: str
    metric: str
    value: float
    n_examples: int
    k: int | None = None
    seed: int = settings.DELFI_SEED

    @property
    def absent(self) -> bool:
        return self.n_examples == 0


@dataclass
class ForecastReport:
    cells: list[ReportCell] = field(default_factory=list)

    def frame(self) -> pd.DataFrame:
        df = pd.DataFrame([asdict(c) for c in self.cells], columns=REPORT_COLUMNS)
        df["k"] = df["k"].astype("Int64")
        return df

    def to_csv(self, path: str | Path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        self.frame().to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def from_csv(cls, path: str | Path) -> "ForecastReport":
        df = pd.read_csv(path, dtype={"method": str, "mode": str, "metric": str})
        cells = [
            ReportCell(
                method=row.method,
                horizon=int(row.horizon),
                mode=row.mode,
                metric=row.metric,
                value=float(row.value),
                n_examples=int(row.n_examples),
                k=None if pd.isna(row.k) else int(row.k),
                seed=int(row.seed),
            )
            for row in df.itertuples(index=False)
        ]
        return cls(cells)

    def _table(self, mode: ForecastMode, methods: Sequence[str], horizons: Sequence[int]) -> pd.DataFrame:
        df = self.frame()
        df = df[df["mode"] == mode.value]
        if df.empty:
            return pd.DataFrame(np.nan, index=list(methods), columns=list(horizons))
        table = df.set_index(["method", "horizon"])["value"].unstack("horizon")
        return table.reindex(index=list(methods), columns=list(horizons))

    def point_table(self) -> pd.DataFrame:
        """MAE grid, methods by horizon; absent cells are NaN."""
        return self._table(ForecastMode.POINT, POINT_METHODS, POINT_HORIZONS)

    def probabilistic_table(self) -> pd.DataFrame:
        return self._table(ForecastMode.PROBABILISTIC, PROBABILISTIC_METHODS, PROBABILISTIC_HORIZONS)

    def format_tables(self) -> str:
        point = self.point_table().to_string(float_format="{:.3f}".format, na_rep="-")
        prob = self.probabilistic_table().to_string(float_format="{:.4f}".format, na_rep="-")
        return f"Point forecast MAE (ug/m3) by horizon (h)\n{point}\n\nProbabilistic forecast KL by horizon (h)\n{prob}\n"


def _absent(method: str, horizon: int, mode: ForecastMode, k: int | None, seed: int) -> ReportCell:
    metric = MAE if mode is ForecastMode.POINT else KL
    return ReportCell(method, horizon, mode.value, metric, float("nan"), 0, k, seed)


def _point_cells(
    method: str,
    step_fn: Callable[[np.ndarray], np.ndarray] | None,
    test: PointDataset,
    standardizer: Standardizer,
    residual_scale,
    horizons: Sequence[int],
    k: int | None,
    seed: int,
) -> list[ReportCell]:
    if step_fn is None or len(test) == 0:
        return [_absent(method, s, ForecastMode.POINT, k, seed) for s in horizons]
    assert_test_split(test)
    trajectory = iterate_point_forecast(step_fn, test.windows, test.last_pm, max(horizons), standardizer, residual_scale)
    cells = []
    for s in horizons:
        observed = np.isfinite(test.future_pm[:, s - 1])
        if not observed.any():
            cells.append(_absent(method, s, ForecastMode.POINT, k, seed))
            continue
        value = mae(trajectory[observed, s - 1], test.future_pm[observed, s - 1])
        cells.append(ReportCell(method, s, ForecastMode.POINT.value, MAE, value, int(observed.sum()), k, seed))
    _logger.info(f"Evaluated {method} point forecasts on {len(test)} test windows")
    return cells


def _predict_long(model, windows: np.ndarray) -> np.ndarray:
    return np.concatenate(
        [forward_long(model, windows[i : i + PREDICT_CHUNK]) for i in range(0, len(windows), PREDICT_CHUNK)]
    )


def _histogram_cell(
    method: str,
    s: int,
    bundle: DatasetBundle,
    registry: ModelRegistry,
    k: int,
    seed: int,
) -> ReportCell:
    test = bundle.histogram_test.get(s)
    cell_k = k if method == KNN else None
    if test is None or len(test) == 0:
        return _absent(method, s, ForecastMode.PROBABILISTIC, cell_k, seed)
    assert_test_split(test)
    if method == KNN:
        train = bundle.histogram_train[s]
        if len(train) == 0:
            return _absent(method, s, ForecastMode.PROBABILISTIC, cell_k, seed)
        predicted = KnnBaseline(k).fit(train).predict_histogram(test.windows)
    else:
        try:
            predicted = _predict_long(registry.load(LONG, s), test.windows)
        except NoArtifactFound as e:
            _logger.warning(f"{e}; reporting the cell as absent")
            return _absent(method, s, ForecastMode.PROBABILISTIC, cell_k, seed)
    value = mean_kl(predicted, test.targets)
    return ReportCell(method, s, ForecastMode.PROBABILISTIC.value, KL, value, len(test), cell_k, seed)


def run_benchmark(
    bundle: DatasetBundle,
    registry: ModelRegistry,
    standardizer: Standardizer,
    k: int = settings.DELFI_KNN_K,
    seed: int = settings.DELFI_SEED,
    threads: int = settings.DELFI_THREADS,
    point_horizons: Sequence[int] = POINT_HORIZONS,
    probabilistic_horizons: Sequence[int] = PROBABILISTIC_HORIZONS,
) -> ForecastReport:
    """Point MAE over {KNN, Linear, DELFI} and KL over {KNN, DELFI} on the test split.

    A method without a model or data for a horizon yields an absent (NaN, n=0) cell.
    Cells are computed on up to `threads` workers and assembled in method/horizon order.
    """
    test = bundle.point_test
    train = bundle.point_train

    def point_task(method: str) -> list[ReportCell]:
        cell_k = k if method == KNN else None
        if method == KNN:
            if len(train) == 0:
                return _point_cells(method, None, test, standardizer, None, point_horizons, cell_k, seed)
            return _point_cells(
                method, KnnBaseline(k).fit(train).predict, test, standardizer,
                ResidualScale(), point_horizons, cell_k, seed,
            )
        if method == LINEAR:
            if len(train) == 0:
                return _point_cells(method, None, test, standardizer, None, point_horizons, cell_k, seed)
            return _point_cells(
                method, LinearBaseline().fit(train).predict, test, standardizer,
                ResidualScale(), point_horizons, cell_k, seed,
            )
        try:
            model = registry.load(SHORT)
        except NoArtifactFound as e:
            _logger.warning(f"{e}; reporting DELFI point cells as absent")
            return _point_cells(method, None, test, standardizer, None, point_horizons, cell_k, seed)
        return _point_cells(
            method, short_step(model), test, standardizer, model_residual_scale(model), point_horizons, cell_k, seed
        )

    tasks: list[Callable[[], list[ReportCell]]] = [lambda m=m: point_task(m) for m in POINT_METHODS]
    tasks += [
        lambda m=m, s=s: [_histogram_cell(m, s, bundle, registry, k, seed)]
        for m in PROBABILISTIC_METHODS
        for s in probabilistic_horizons
    ]
    with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        results = list(executor.map(lambda task: task(), tasks))

    report = ForecastReport([cell for cells in results for cell in cells])
    _logger.info(f"Benchmark finished with {sum(not c.absent for c in report.cells)}/{len(report.cells)} cells")
    return report


@dataclass(frozen=True)
class NefAblation:
    horizon: int
    kl_with_nef: float
    kl_without_nef: float

    @property
    def difference(self) -> float:
        """Positive when dropping NEF hurts."""
        return self.kl_without_nef - self.kl_with_nef

    def to_csv(self, path: str | Path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        row = {**asdict(self), "difference": self.difference}
        pd.DataFrame([row]).to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def from_csv(cls, path: str | Path) -> "NefAblation":
        row = pd.read_csv(path).iloc[0]
        return cls(int(row.horizon), float(row.kl_with_nef), float(row.kl_without_nef))


def nef_ablation(
    features: FeatureSet,
    s: int,
    cfg: TrainConfig,
    model_config: ModelConfig | None = None,
) -> NefAblation:
    """Trains a long-term model for s with and without the NEF column and compares test KL."""
    if not features.use_nef:
        raise UsageError("NEF ablation needs features built with NEF")
    results = []
    for variant in (features, features.without_nef()):
        point_train, _ = split_train_test(build_point_dataset(variant), variant.timestamps)
        grouping = group_stations_by_residual_variance(point_train)
        train, test = split_train_test(build_histogram_dataset(variant, s), variant.timestamps)
        model, _ = train_model(LONG, train, grouping, cfg, model_config, horizon=s, test=test)
        results.append(mean_kl(_predict_long(model, test.windows), test.targets) if len(test) else float("nan"))
    ablation = NefAblation(s, results[0], results[1])
    _logger.info(f"NEF ablation at s={s}: KL {ablation.kl_with_nef:.4f} with, {ablation.kl_without_nef:.4f} without")
    return ablation
