"""Point (residual) and histogram datasets, the 85/15 per-station split and variance grouping."""

import logging
from dataclasses import dataclass, field, fields, replace
from typing import Iterable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data_model import (
    DEFAULT_BINS,
    FEATURES,
    MAX_POINT_HORIZON,
    PM25,
    WINDOW_HOURS,
    BinScheme,
    FeatureWindow,
    ForecastMode,
    HistogramTarget,
    Horizon,
    train_count,
)
from .ingest import FeatureSet

_logger = logging.getLogger(__name__)

N_COMPONENTS = 3
UNSPLIT, TRAIN, TEST = "", "train", "test"
SPLITS = (UNSPLIT, TRAIN, TEST)


@dataclass(frozen=True)
class PointExample:
    window: FeatureWindow
    target: float
    split: str = UNSPLIT


@dataclass(frozen=True)
class HistogramExample:
    window: FeatureWindow
    horizon: int
    target: HistogramTarget
    split: str = UNSPLIT


@dataclass
class _Examples:
    """Columnar example storage ordered by (station_id, end timestamp).

    first_pos / last_pos are row positions within the station's series of the first
    window row and the last target row; the split rule is decided from them.
    """

    station_ids: np.ndarray
    end_timestamps: np.ndarray
    windows: np.ndarray
    first_pos: np.ndarray
    last_pos: np.ndarray
    split: np.ndarray

    def __len__(self) -> int:
        return len(self.end_timestamps)

    def subset(self, mask: np.ndarray):
        return replace(self, **{f.name: getattr(self, f.name)[mask] for f in fields(self) if f.name != "horizon"})

    def for_stations(self, station_ids: Iterable[str]):
        return self.subset(np.isin(self.station_ids, list(station_ids)))

    def flat_windows(self) -> np.ndarray:
        return self.windows.reshape(len(self), -1)

    def _window(self, i: int) -> FeatureWindow:
        return FeatureWindow(str(self.station_ids[i]), int(self.end_timestamps[i]), self.windows[i])


@dataclass
class PointDataset(_Examples):
    residuals: np.ndarray = field(default_factory=lambda: np.empty(0))
    last_pm: np.ndarray = field(default_factory=lambda: np.empty(0))
    future_pm: np.ndarray = field(default_factory=lambda: np.empty((0, MAX_POINT_HORIZON)))

    def __getitem__(self, i: int) -> PointExample:
        return PointExample(self._window(i), float(self.residuals[i]), str(self.split[i]))


@dataclass
class HistogramDataset(_Examples):
    targets: np.ndarray = field(default_factory=lambda: np.empty((0, DEFAULT_BINS.n_bins)))
    horizon: int = 0

    def __getitem__(self, i: int) -> HistogramExample:
        return HistogramExample(
            self._window(i), self.horizon, HistogramTarget.from_array(self.targets[i]), str(self.split[i])
        )


def _window_ends(timestamps: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Positions p whose rows p-5..p are consecutive hours with every feature present."""
    n = len(timestamps)
    if n < WINDOW_HOURS:
        return np.empty(0, dtype=np.int64)
    span = WINDOW_HOURS - 1
    contiguous = timestamps[span:] - timestamps[:-span] == span
    complete = sliding_window_view(np.all(np.isfinite(z), axis=1), WINDOW_HOURS).all(axis=1)
    return np.flatnonzero(contiguous & complete) + span


def _gather_windows(z: np.ndarray, ends: np.ndarray) -> np.ndarray:
    return z[ends[:, None] + np.arange(-WINDOW_HOURS + 1, 1)]


def _lookup(timestamps: np.ndarray, wanted: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Positions of wanted hours and a mask of which are present."""
    if len(timestamps) == 0:
        return np.zeros(wanted.shape, dtype=np.int64), np.zeros(wanted.shape, dtype=bool)
    pos = np.searchsorted(timestamps, wanted)
    clipped = np.minimum(pos, len(timestamps) - 1)
    return clipped, (pos < len(timestamps)) & (timestamps[clipped] == wanted)


def build_point_dataset(features: FeatureSet) -> PointDataset:
    """One example per (station, t) with a full window ending at t and an observation at t+1."""
    parts = []
    for sid in sorted(features.station_ids):
        ts = features.timestamps[sid]
        z = features.standardized(sid)
        pm = features.values[sid][:, PM25]

        ends = _window_ends(ts, z)
        next_pos, has_next = _lookup(ts, ts[ends] + 1)
        ends, next_pos = ends[has_next], next_pos[has_next]

        future_pos, present = _lookup(ts, ts[ends][:, None] + np.arange(1, MAX_POINT_HORIZON + 1))
        future_pm = np.where(present, pm[future_pos], np.nan)

        parts.append(
            PointDataset(
                station_ids=np.full(len(ends), sid, dtype=object),
                end_timestamps=ts[ends],
                windows=_gather_windows(z, ends),
                first_pos=ends - WINDOW_HOURS + 1,
                last_pos=next_pos,
                split=np.full(len(ends), UNSPLIT, dtype=object),
                residuals=pm[next_pos] - pm[ends],
                last_pm=pm[ends],
                future_pm=future_pm,
            )
        )
    dataset = _concat(PointDataset, parts)
    _logger.info(f"Built {len(dataset)} point examples")
    return dataset


def build_histogram_dataset(
    features: FeatureSet, s: int, bins: BinScheme = DEFAULT_BINS
) -> HistogramDataset:
    """Histogram targets over PM2.5 at offsets [s/2, 3s/2) after each window end."""
    horizon = Horizon(s, ForecastMode.PROBABILISTIC)
    offsets = horizon.window_offsets()
    parts = []
    for sid in sorted(features.station_ids):
        ts = features.timestamps[sid]
        z = features.standardized(sid)
        pm = features.values[sid][:, PM25]

        ends = _window_ends(ts, z)
        start, has_start = _lookup(ts, ts[ends] + offsets.start)
        stop = start + s - 1
        complete = has_start & (stop < len(ts))
        complete[complete] &= ts[stop[complete]] - ts[start[complete]] == s - 1
        ends, start, stop = ends[complete], start[complete], stop[complete]

        values = pm[start[:, None] + np.arange(s)]
        idx = bins.bin_indices(values) if len(values) else np.empty((0, s), dtype=np.int64)
        counts = (idx[:, :, None] == np.arange(bins.n_bins)).sum(axis=1)

        parts.append(
            HistogramDataset(
                station_ids=np.full(len(ends), sid, dtype=object),
                end_timestamps=ts[ends],
                windows=_gather_windows(z, ends),
                first_pos=ends - WINDOW_HOURS + 1,
                last_pos=stop,
                split=np.full(len(ends), UNSPLIT, dtype=object),
                targets=counts / s,
                horizon=s,
            )
        )
    dataset = _concat(HistogramDataset, parts, horizon=s)
    _logger.info(f"Built {len(dataset)} histogram examples for s={s}")
    return dataset


def _concat(cls, parts: list, **extra):
    if not parts:
        return cls(
            station_ids=np.empty(0, dtype=object),
            end_timestamps=np.empty(0, dtype=np.int64),
            windows=np.empty((0, WINDOW_HOURS, len(FEATURES))),
            first_pos=np.empty(0, dtype=np.int64),
            last_pos=np.empty(0, dtype=np.int64),
            split=np.empty(0, dtype=object),
            **extra,
        )
    return cls(
        **{
            f.name: np.concatenate([getattr(p, f.name) for p in parts])
            for f in fields(cls)
            if f.name != "horizon"
        },
        **extra,
    )


def split_train_test(examples, timestamps: Mapping[str, np.ndarray]):
    """Train: everything inside the first 85% of the station's hours; test: inside the last 15%.

    Examples straddling the boundary are dropped from both.
    """
    boundary = np.array([train_count(len(timestamps[sid])) for sid in examples.station_ids], dtype=np.int64)
    train_mask = examples.last_pos < boundary
    test_mask = examples.first_pos >= boundary
    split = np.full(len(examples), UNSPLIT, dtype=object)
    split[train_mask] = TRAIN
    split[test_mask] = TEST
    tagged = replace(examples, split=split)
    train, test = tagged.subset(train_mask), tagged.subset(test_mask)
    dropped = len(examples) - len(train) - len(test)
    _logger.info(f"Split {len(examples)} examples: {len(train)} train, {len(test)} test, {dropped} straddling")
    return train, test


@dataclass(frozen=True)
class StationGrouping:
    assignment: Mapping[str, int]

    def component(self, station_id: str) -> int:
        return self.assignment[station_id]

    def members(self, k: int) -> list[str]:
        return sorted(sid for sid, c in self.assignment.items() if c == k)


def residual_variances(train: PointDataset) -> dict[str, float]:
    return {
        sid: float(np.var(train.residuals[train.station_ids == sid]))
        for sid in sorted(set(train.station_ids))
    }


def group_stations_by_residual_variance(train: PointDataset) -> StationGrouping:
    """Equal-count terciles of residual variance (low/mid/high -> components 0/1/2).

    Larger groups come first; ties are broken by station_id.
    """
    variances = residual_variances(train)
    ordered = sorted(variances, key=lambda sid: (variances[sid], sid))
    n = len(ordered)
    if n < N_COMPONENTS:
        _logger.warning(f"Only {n} stations; all assigned to component 0")
        return StationGrouping({sid: 0 for sid in ordered})

    base, extra = divmod(n, N_COMPONENTS)
    sizes = [base + (1 if k < extra else 0) for k in range(N_COMPONENTS)]
    assignment, start = {}, 0
    for k, size in enumerate(sizes):
        for sid in ordered[start : start + size]:
            assignment[sid] = k
        start += size
    _logger.info(f"Station groups by residual variance: {[sizes[k] for k in range(N_COMPONENTS)]}")
    return StationGrouping(assignment)


@dataclass(frozen=True)
class ResidualScale:
    """Scale-only z-scoring of residual targets; a zero residual stays zero."""

    scale: float = 1.0

    @classmethod
    def fit(cls, residuals: np.ndarray) -> "ResidualScale":
        std = float(np.std(residuals)) if len(residuals) else 0.0
        if not std > 0:
            _logger.warning("Residual standard deviation is zero; using unit scale")
            return cls(1.0)
        return cls(std)

    def apply(self, residuals: np.ndarray) -> np.ndarray:
        return np.asarray(residuals, dtype=np.float64) / self.scale

    def invert(self, scaled: np.ndarray) -> np.ndarray:
        return np.asarray(scaled, dtype=np.float64) * self.scale


@dataclass
class DatasetBundle:
    point_train: PointDataset
    point_test: PointDataset
    histogram_train: dict[int, HistogramDataset]
    histogram_test: dict[int, HistogramDataset]
    residual_scale: ResidualScale


def build_datasets(features: FeatureSet, horizons: Iterable[int] = ()) -> DatasetBundle:
    point_train, point_test = split_train_test(build_point_dataset(features), features.timestamps)
    hist_train, hist_test = {}, {}
    for s in horizons:
        hist_train[s], hist_test[s] = split_train_test(
            build_histogram_dataset(features, s), features.timestamps
        )
    return DatasetBundle(
        point_train, point_test, hist_train, hist_test, ResidualScale.fit(point_train.residuals)
    )
