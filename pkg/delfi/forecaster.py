"""Iterated next-hour point forecasts, histogram forecasts and the on-disk model registry."""

import logging
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import pandas as pd

from .data_model import DEFAULT_BINS, MAX_POINT_HORIZON, PM25, DelfiError, ForecastMode, UsageError
from .dataset import ResidualScale
from .ingest import Standardizer
from .model import LONG, SHORT, MixtureModel, forward_long, forward_short, load_model, save_model
from .storage import NoArtifactFound

_logger = logging.getLogger(__name__)

StepFn = Callable[[np.ndarray], np.ndarray]

POINT_COLUMNS = ["station_id", "t", "horizon", "mode", "prediction"]
HISTOGRAM_COLUMNS = ["station_id", "t", "horizon", "mode"] + [f"prediction_{k}" for k in range(DEFAULT_BINS.n_bins)]


class ForecastError(DelfiError):
    pass


def slide_window(windows: np.ndarray, pm_pred: np.ndarray, standardizer: Standardizer) -> np.ndarray:
    """Drops the oldest hour and appends a copy of the newest with PM2.5 set to pm_pred."""
    slid = np.concatenate([windows[:, 1:], windows[:, -1:]], axis=1)
    slid[:, -1, PM25] = standardizer.transform_feature(pm_pred, "pm25")
    return slid


def iterate_point_forecast(
    step_fn: StepFn,
    windows: np.ndarray,
    last_pm: np.ndarray,
    horizon: int,
    standardizer: Standardizer,
    residual_scale: ResidualScale = ResidualScale(),
) -> np.ndarray:
    """PM2.5 trajectories (N, horizon) from repeated one-hour residual predictions.

    step_fn maps (N, 6, 9) windows to residuals in residual_scale units. Every step is
    clamped at zero before the window slides.
    """
    if not 1 <= horizon <= MAX_POINT_HORIZON:
        raise UsageError(f"Point horizon must be in [1, {MAX_POINT_HORIZON}], got {horizon}")
    windows = np.array(windows, dtype=np.float64)
    pm = np.array(last_pm, dtype=np.float64)
    trajectory = np.empty((len(windows), horizon))
    for step in range(horizon):
        delta = residual_scale.invert(step_fn(windows))
        pm = np.maximum(pm + delta, 0.0)
        if not np.all(np.isfinite(pm)):
            raise ForecastError(f"Non-finite prediction at step {step + 1} of {horizon}")
        trajectory[:, step] = pm
        if step + 1 < horizon:
            windows = slide_window(windows, pm, standardizer)
    return trajectory


def model_standardizer(model: MixtureModel) -> Standardizer:
    if "standardizer" not in model.metadata:
        raise UsageError("Model carries no standardizer statistics")
    return Standardizer.from_header(model.metadata["standardizer"])


def model_residual_scale(model: MixtureModel) -> ResidualScale:
    return ResidualScale(float(model.metadata.get("residual_scale", 1.0)))


def short_step(model: MixtureModel) -> StepFn:
    return lambda windows: forward_short(model, windows)


def predict_point(
    model: MixtureModel,
    window: np.ndarray,
    s: int,
    standardizer: Standardizer | None = None,
    last_pm: float | None = None,
) -> float:
    """PM2.5 at t+s in ug/m3.

    last_pm defaults to the window's un-standardized last PM2.5. That round trip through the
    standardizer can be off by a few ULP, so callers holding the raw reading should pass it.
    """
    if model.variant != SHORT:
        raise UsageError("Point forecasts need a short-term model")
    standardizer = standardizer or model_standardizer(model)
    if last_pm is None:
        last_pm = float(standardizer.inverse_feature(window[-1, PM25], "pm25"))
    trajectory = iterate_point_forecast(
        short_step(model), window[None], np.array([last_pm]), s, standardizer, model_residual_scale(model)
    )
    return float(trajectory[0, -1])


def predict_histogram(model: MixtureModel, window: np.ndarray, horizon: int | None = None) -> np.ndarray:
    if model.variant != LONG:
        raise UsageError("Probabilistic forecasts need a long-term model")
    if horizon is not None and horizon != model.horizon:
        raise UsageError(f"Model was trained for s={model.horizon}, asked for s={horizon}")
    return forward_long(model, window)


class ModelRegistry:
    """Model files under root, one per (variant, s); short-term models ignore s."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def path(self, variant: str, s: int | None = None) -> Path:
        if variant == SHORT:
            return self.root / "short.bin"
        if variant == LONG:
            if s is None:
                raise UsageError("Long-term models are registered per horizon")
            return self.root / f"long_s{s}.bin"
        raise UsageError(f"Unknown model variant {variant!r}")

    def save(self, model: MixtureModel) -> Path:
        path = self.path(model.variant, model.horizon)
        save_model(path, model)
        return path

    def has(self, variant: str, s: int | None = None) -> bool:
        return self.path(variant, s).exists()

    def load(self, variant: str, s: int | None = None) -> MixtureModel:
        path = self.path(variant, s)
        if not path.exists():
            raise NoArtifactFound(f"No {variant}-term model for s={s} at {path}")
        model = load_model(path)
        if variant == LONG and model.horizon != s:
            raise UsageError(f"{path} holds a model for s={model.horizon}")
        return model

    def horizons(self) -> list[int]:
        return sorted(int(p.stem.removeprefix("long_s")) for p in self.root.glob("long_s*.bin"))


def point_rows(
    station_ids: Iterable[str], end_timestamps: Iterable[int], horizon: int, predictions: Iterable[float]
) -> list[dict]:
    return [
        {"station_id": sid, "t": int(t), "horizon": horizon, "mode": ForecastMode.POINT.value, "prediction": float(p)}
        for sid, t, p in zip(station_ids, end_timestamps, predictions)
    ]


def histogram_rows(
    station_ids: Iterable[str], end_timestamps: Iterable[int], horizon: int, histograms: np.ndarray
) -> list[dict]:
    return [
        {
            "station_id": sid,
            "t": int(t),
            "horizon": horizon,
            "mode": ForecastMode.PROBABILISTIC.value,
            **{f"prediction_{k}": float(p) for k, p in enumerate(row)},
        }
        for sid, t, row in zip(station_ids, end_timestamps, histograms)
    ]


def write_predictions(path: str | Path, rows: list[Mapping]):
    """Writes prediction rows as CSV; the column set follows the rows' mode."""
    probabilistic = bool(rows) and rows[0]["mode"] == ForecastMode.PROBABILISTIC.value
    columns = HISTOGRAM_COLUMNS if probabilistic else POINT_COLUMNS
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(list(rows), columns=columns).to_csv(path, index=False, float_format="%.17g")
    _logger.info(f"Wrote {len(rows)} predictions to {path}")
