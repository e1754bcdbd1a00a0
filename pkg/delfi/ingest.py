"""Station CSV ingestion, WGS84 bearings, the net-external-flow (NEF) feature and standardization."""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .data_model import (
    FEATURE_INDEX,
    FEATURES,
    RAW_FEATURES,
    DelfiError,
    DomainError,
    StationMeta,
    StationRecord,
    UsageError,
    train_count,
)
from .neural import sigmoid
from .storage import load_arrays, store_arrays

_logger = logging.getLogger(__name__)

TIMESTAMP_COLUMN = "timestamp"
META_COLUMNS = ("station_id", "latitude", "longitude", "path")
EPOCH = pd.Timestamp(0, tz="UTC")
NEF_CLIP = 1e-15


class IngestionError(DelfiError):
    pass


@dataclass(frozen=True)
class DroppedRow:
    line: int
    reason: str


@dataclass
class StationFrame:
    """Parsed station series: raw features indexed by integer epoch hour."""

    station_id: str
    frame: pd.DataFrame
    dropped: list[DroppedRow] = field(default_factory=list)


def _parse_timestamps(raw: pd.Series) -> pd.Series:
    """Epoch hours as float64 (NaN when blank, unparseable or not on the hour)."""
    stripped = raw.str.strip()
    blank = stripped == ""
    numeric = pd.to_numeric(stripped.where(~blank), errors="coerce")
    if numeric[~blank].notna().all():
        return numeric.where(numeric == np.floor(numeric)).astype(np.float64)

    parsed = pd.to_datetime(stripped.where(~blank), errors="coerce", utc=True, format="ISO8601")
    offset = parsed - EPOCH
    hours = (offset // pd.Timedelta(hours=1)).astype(np.float64)
    on_the_hour = (offset % pd.Timedelta(hours=1)) == pd.Timedelta(0)
    return hours.where(parsed.notna() & on_the_hour)


def _invalid_reason(row: pd.Series) -> str | None:
    missing = [name for name in (TIMESTAMP_COLUMN,) + RAW_FEATURES if pd.isna(row[name])]
    if missing:
        return f"missing or unparseable {', '.join(missing)}"
    for name in ("pm1", "pm10", "pm25", "visibility", "wind_speed"):
        if row[name] < 0:
            return f"negative {name}"
    if not 0.0 <= row["humidity"] <= 100.0:
        return "humidity outside [0, 100]"
    if not 0.0 <= row["wind_bearing"] < 360.0:
        return "wind_bearing outside [0, 360)"
    return None


def read_station_frame(path: str | Path, station_id: str | None = None) -> StationFrame:
    """Parses one station CSV, dropping (and reporting) rows that cannot be used."""
    path = Path(path)
    station_id = station_id or path.stem
    if not path.exists():
        raise IngestionError(f"Station file not found: {path}")

    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise IngestionError(f"Cannot parse {path}: {e}") from e

    columns = [c.strip() for c in raw.columns]
    missing = [c for c in (TIMESTAMP_COLUMN,) + RAW_FEATURES if c not in columns]
    if missing:
        raise IngestionError(f"Malformed header in {path}: missing {', '.join(missing)}")
    raw.columns = columns

    parsed = pd.DataFrame(index=raw.index)
    parsed[TIMESTAMP_COLUMN] = _parse_timestamps(raw[TIMESTAMP_COLUMN])
    for name in RAW_FEATURES:
        parsed[name] = pd.to_numeric(raw[name].str.strip(), errors="coerce").astype(np.float64)

    dropped = []
    keep = np.ones(len(parsed), dtype=bool)
    for pos, (_, row) in enumerate(parsed.iterrows()):
        reason = _invalid_reason(row)
        if reason is not None:
            dropped.append(DroppedRow(line=pos + 2, reason=reason))
            keep[pos] = False
    for drop in dropped:
        _logger.warning(f"{path}:{drop.line} dropped: {drop.reason}")

    parsed = parsed[keep]
    timestamps = parsed[TIMESTAMP_COLUMN].astype(np.int64)
    duplicated = timestamps[timestamps.duplicated()]
    if len(duplicated):
        line = int(duplicated.index[0]) + 2
        raise IngestionError(
            f"Duplicate timestamp {int(duplicated.iloc[0])} in {path} (line {line})"
        )

    frame = parsed[list(RAW_FEATURES)].copy()
    frame.index = pd.Index(timestamps.to_numpy(), name=TIMESTAMP_COLUMN)
    frame = frame.sort_index()
    _logger.info(f"Loaded {len(frame)} rows for station {station_id} ({len(dropped)} dropped)")
    return StationFrame(station_id=station_id, frame=frame, dropped=dropped)


def frame_to_records(station_id: str, frame: pd.DataFrame) -> list[StationRecord]:
    return [
        StationRecord(station_id, int(ts), *(float(v) for v in row))
        for ts, row in zip(frame.index, frame[list(RAW_FEATURES)].to_numpy())
    ]


def records_to_frame(records: Sequence[StationRecord]) -> pd.DataFrame:
    frame = pd.DataFrame(
        [r.raw_values() for r in records],
        columns=list(RAW_FEATURES),
        index=pd.Index([r.timestamp for r in records], name=TIMESTAMP_COLUMN, dtype=np.int64),
        dtype=np.float64,
    )
    if not frame.index.is_monotonic_increasing or frame.index.has_duplicates:
        raise IngestionError("Record timestamps must be strictly increasing")
    return frame


def load_station_csv(path: str | Path, station_id: str | None = None) -> list[StationRecord]:
    """Loads one station file as records sorted by timestamp."""
    station = read_station_frame(path, station_id)
    return frame_to_records(station.station_id, station.frame)


def load_station_meta(path: str | Path) -> list[tuple[StationMeta, Path]]:
    """Reads station_id,latitude,longitude,path rows; relative paths resolve next to the file."""
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"Station metadata not found: {path}")
    meta = pd.read_csv(path, dtype={"station_id": str, "path": str})
    missing = [c for c in META_COLUMNS if c not in meta.columns]
    if missing:
        raise IngestionError(f"Malformed header in {path}: missing {', '.join(missing)}")
    if meta["station_id"].duplicated().any():
        dup = meta.loc[meta["station_id"].duplicated(), "station_id"].iloc[0]
        raise IngestionError(f"Duplicate station_id {dup} in {path}")

    sources = []
    for line, row in enumerate(meta.itertuples(index=False), start=2):
        try:
            station = StationMeta(str(row.station_id), float(row.latitude), float(row.longitude))
        except (DomainError, ValueError) as e:
            raise IngestionError(f"{path}:{line}: {e}") from e
        source = Path(row.path)
        sources.append((station, source if source.is_absolute() else path.parent / source))
    return sources


def load_stations(
    meta_path: str | Path, threads: int = 1
) -> tuple[list[StationMeta], dict[str, pd.DataFrame]]:
    """Loads every station listed in the metadata file, ordered by station_id."""
    sources = sorted(load_station_meta(meta_path), key=lambda s: s[0].station_id)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        loaded = list(
            executor.map(lambda s: read_station_frame(s[1], s[0].station_id), sources)
        )
    return [s[0] for s in sources], {st.station_id: st.frame for st in loaded}


# Bearings


def initial_bearing(origin: tuple[float, float], target: tuple[float, float]) -> float:
    """Great-circle forward azimuth in degrees [0, 360) from origin to target (lat, lon)."""
    if tuple(origin) == tuple(target):
        raise DomainError("Bearing between identical points is undefined")
    lat_a, lon_a = np.deg2rad(origin)
    lat_b, lon_b = np.deg2rad(target)
    delta_lon = lon_b - lon_a
    angle = np.arctan2(
        np.sin(delta_lon) * np.cos(lat_b),
        np.cos(lat_a) * np.sin(lat_b) - np.sin(lat_a) * np.cos(lat_b) * np.cos(delta_lon),
    )
    bearing = float(np.rad2deg(angle)) % 360.0
    return 0.0 if bearing >= 360.0 else bearing


@dataclass(frozen=True)
class BearingMatrix:
    """theta[a, i] is the bearing from station a to station i; the diagonal is NaN."""

    station_ids: tuple[str, ...]
    theta: np.ndarray = field(repr=False)

    def index(self, station_id: str) -> int:
        return self.station_ids.index(station_id)

    def bearing(self, origin: str, target: str) -> float:
        a, i = self.index(origin), self.index(target)
        if a == i:
            raise DomainError("Bearing from a station to itself is undefined")
        return float(self.theta[a, i])


def bearing_matrix(stations: Sequence[StationMeta]) -> BearingMatrix:
    n = len(stations)
    theta = np.full((n, n), np.nan)
    for a, origin in enumerate(stations):
        for i, target in enumerate(stations):
            if a != i:
                theta[a, i] = initial_bearing(
                    (origin.latitude, origin.longitude), (target.latitude, target.longitude)
                )
    return BearingMatrix(tuple(s.station_id for s in stations), theta)


# NEF


def _clip_nef(x: np.ndarray | float) -> np.ndarray:
    return np.clip(sigmoid(x), NEF_CLIP, 1.0 - NEF_CLIP)


def compute_nef(
    all_stations_at_t: Sequence[tuple[float, float, float] | None],
    target: int | str,
    bearings: BearingMatrix,
) -> float:
    """NEF for one station at one hour from standardized (PM, V, wind bearing) of every station.

    Entries follow bearings.station_ids order; the target's own entry is ignored. Returns NaN
    when any other station's values are missing.
    """
    a = bearings.index(target) if isinstance(target, str) else target
    if len(all_stations_at_t) != len(bearings.station_ids):
        raise UsageError("One (PM, V, bearing) entry per station is required")
    x = 0.0
    for i, values in enumerate(all_stations_at_t):
        if i == a:
            continue
        if values is None or not np.all(np.isfinite(values)):
            return float("nan")
        pm, speed, phi = values
        x += pm * speed * np.cos(np.deg2rad(bearings.theta[a, i] - phi))
    return float(_clip_nef(x))


def _panel(frames: Mapping[str, pd.DataFrame], station_ids: Sequence[str], column: str, hours: np.ndarray):
    return np.vstack([frames[sid][column].reindex(hours).to_numpy(np.float64) for sid in station_ids])


def compute_nef_series(
    frames: Mapping[str, pd.DataFrame], bearings: BearingMatrix, standardizer: "Standardizer"
) -> dict[str, pd.Series]:
    """NEF for every (station, hour) using PM2.5 and wind speed z-scored by standardizer."""
    station_ids = bearings.station_ids
    hours = np.unique(np.concatenate([frames[sid].index.to_numpy() for sid in station_ids]))
    pm = standardizer.transform_feature(_panel(frames, station_ids, "pm25", hours), "pm25")
    speed = standardizer.transform_feature(_panel(frames, station_ids, "wind_speed", hours), "wind_speed")
    phi = _panel(frames, station_ids, "wind_bearing", hours)

    flow = pm * speed
    n = len(station_ids)
    nef = {}
    for a, sid in enumerate(station_ids):
        others = np.arange(n) != a
        angles = np.deg2rad(bearings.theta[a, others][:, None] - phi[others])
        x = np.sum(flow[others] * np.cos(angles), axis=0)
        series = pd.Series(_clip_nef(x), index=hours)
        nef[sid] = series.reindex(frames[sid].index)
    return nef


# Standardization


@dataclass(frozen=True)
class Standardizer:
    """Per-feature mean and standard deviation fitted on the training split."""

    features: tuple[str, ...] = FEATURES
    means: np.ndarray | None = field(default=None, repr=False)
    stds: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def fit(cls, values: np.ndarray, features: Sequence[str] = FEATURES) -> "Standardizer":
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] != len(features) or len(values) == 0:
            raise UsageError(f"Standardizer.fit expects (N>0, {len(features)}) values")
        means = np.nanmean(values, axis=0)
        stds = np.nanstd(values, axis=0)
        constant = [f for f, s in zip(features, stds) if not s > 0]
        if constant:
            raise DomainError(f"Constant features cannot be standardized: {', '.join(constant)}")
        return cls(tuple(features), means, stds)

    @property
    def fitted(self) -> bool:
        return self.means is not None and self.stds is not None

    def _require_fitted(self):
        if not self.fitted:
            raise UsageError("Standardizer has not been fitted")

    def transform(self, values: np.ndarray) -> np.ndarray:
        self._require_fitted()
        return (np.asarray(values, dtype=np.float64) - self.means) / self.stds

    def inverse(self, values: np.ndarray) -> np.ndarray:
        self._require_fitted()
        return np.asarray(values, dtype=np.float64) * self.stds + self.means

    def transform_feature(self, values: np.ndarray, name: str) -> np.ndarray:
        self._require_fitted()
        k = self.features.index(name)
        return (np.asarray(values, dtype=np.float64) - self.means[k]) / self.stds[k]

    def inverse_feature(self, values: np.ndarray, name: str) -> np.ndarray:
        self._require_fitted()
        k = self.features.index(name)
        return np.asarray(values, dtype=np.float64) * self.stds[k] + self.means[k]

    def restrict(self, features: Sequence[str]) -> "Standardizer":
        self._require_fitted()
        idx = [self.features.index(f) for f in features]
        return Standardizer(tuple(features), self.means[idx], self.stds[idx])

    def to_header(self) -> dict:
        self._require_fitted()
        return {
            "features": list(self.features),
            "means": [float(m) for m in self.means],
            "stds": [float(s) for s in self.stds],
        }

    @classmethod
    def from_header(cls, header: Mapping) -> "Standardizer":
        return cls(
            tuple(header["features"]),
            np.asarray(header["means"], dtype=np.float64),
            np.asarray(header["stds"], dtype=np.float64),
        )


def standardize(values: np.ndarray | pd.DataFrame, stats: Standardizer) -> np.ndarray:
    """(x - mean) / std per feature column."""
    if isinstance(values, pd.DataFrame):
        values = values[list(stats.features)].to_numpy(np.float64)
    return stats.transform(values)


# Feature sets


@dataclass
class FeatureSet:
    """Featurized station series: unstandardized 9-feature rows plus the fitted Standardizer."""

    stations: list[StationMeta]
    timestamps: dict[str, np.ndarray]
    values: dict[str, np.ndarray]
    standardizer: Standardizer
    use_nef: bool = True

    @property
    def station_ids(self) -> list[str]:
        return [s.station_id for s in self.stations]

    def standardized(self, station_id: str) -> np.ndarray:
        z = self.standardizer.transform(self.values[station_id])
        if not self.use_nef:
            z[:, FEATURE_INDEX["nef"]] = 0.0
        return z

    def without_nef(self) -> "FeatureSet":
        return FeatureSet(self.stations, self.timestamps, self.values, self.standardizer, use_nef=False)


def featurize(
    frames: Mapping[str, pd.DataFrame], stations: Sequence[StationMeta], use_nef: bool = True
) -> FeatureSet:
    """Fits raw stats on each station's training prefix, derives NEF, then fits NEF stats."""
    stations = sorted(stations, key=lambda s: s.station_id)
    missing = [s.station_id for s in stations if s.station_id not in frames]
    if missing:
        raise IngestionError(f"No data for stations: {', '.join(missing)}")

    train_rows = [
        frames[s.station_id].iloc[: train_count(len(frames[s.station_id]))] for s in stations
    ]
    raw_stats = Standardizer.fit(
        pd.concat(train_rows)[list(RAW_FEATURES)].to_numpy(np.float64), RAW_FEATURES
    )

    bearings = bearing_matrix(stations)
    nef = compute_nef_series(frames, bearings, raw_stats)

    timestamps, values = {}, {}
    nef_train = []
    for station in stations:
        sid = station.station_id
        frame = frames[sid]
        timestamps[sid] = frame.index.to_numpy(np.int64)
        values[sid] = np.column_stack([frame[list(RAW_FEATURES)].to_numpy(np.float64), nef[sid].to_numpy()])
        nef_train.append(values[sid][: train_count(len(frame)), -1])
        n_missing = int(np.isnan(values[sid][:, -1]).sum())
        if n_missing:
            _logger.warning(f"Station {sid}: NEF missing at {n_missing} hours")

    nef_stats = Standardizer.fit(np.concatenate(nef_train)[:, None], ("nef",))
    standardizer = Standardizer(
        FEATURES,
        np.concatenate([raw_stats.means, nef_stats.means]),
        np.concatenate([raw_stats.stds, nef_stats.stds]),
    )
    _logger.info(f"Featurized {len(stations)} stations (use_nef={use_nef})")
    return FeatureSet(list(stations), timestamps, values, standardizer, use_nef)


def store_features(path: str | Path, features: FeatureSet):
    header = {
        "kind": "features",
        "stations": [
            {"station_id": s.station_id, "latitude": s.latitude, "longitude": s.longitude}
            for s in features.stations
        ],
        "standardizer": features.standardizer.to_header(),
        "use_nef": features.use_nef,
    }
    arrays: dict[str, np.ndarray] = {}
    for sid in features.station_ids:
        arrays[f"{sid}.timestamps"] = features.timestamps[sid]
        arrays[f"{sid}.values"] = features.values[sid]
    store_arrays(path, header, arrays)


def load_features(path: str | Path) -> FeatureSet:
    header, arrays = load_arrays(path)
    if header.get("kind") != "features":
        raise IngestionError(f"{path} is not a features file")
    stations = [StationMeta(**s) for s in header["stations"]]
    return FeatureSet(
        stations=stations,
        timestamps={s.station_id: arrays[f"{s.station_id}.timestamps"] for s in stations},
        values={s.station_id: arrays[f"{s.station_id}.values"] for s in stations},
        standardizer=Standardizer.from_header(header["standardizer"]),
        use_nef=header["use_nef"],
    )
