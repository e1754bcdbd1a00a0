"""Domain types shared across the pipeline: stations, records, windows, bins and horizons."""

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

RAW_FEATURES = (
    "pm1",
    "pm10",
    "pm25",
    "temperature",
    "humidity",
    "visibility",
    "wind_speed",
    "wind_bearing",
)
FEATURES = RAW_FEATURES + ("nef",)
FEATURE_INDEX = {name: i for i, name in enumerate(FEATURES)}
PM25 = FEATURE_INDEX["pm25"]

WINDOW_HOURS = 6
MAX_POINT_HORIZON = 24
POINT_HORIZONS = (1, 2, 3, 4, 5, 6, 8, 12, 24)
PROBABILISTIC_HORIZONS = (6, 8, 12, 24, 48)
HISTOGRAM_TOLERANCE = 1e-9
TRAIN_PERCENT = 85


def train_count(n_timestamps: int) -> int:
    """Number of leading timestamps of a station that belong to the training split."""
    return TRAIN_PERCENT * n_timestamps // 100


class DelfiError(Exception):
    pass


class DomainError(DelfiError):
    pass


class UsageError(DelfiError):
    pass


@dataclass(frozen=True)
class StationMeta:
    station_id: str
    latitude: float
    longitude: float

    def __post_init__(self):
        if not -90.0 <= self.latitude <= 90.0:
            raise DomainError(f"Latitude out of range for {self.station_id}: {self.latitude}")
        if not -180.0 <= self.longitude <= 180.0:
            raise DomainError(f"Longitude out of range for {self.station_id}: {self.longitude}")


@dataclass(frozen=True)
class StationRecord:
    """One hourly observation at one station; timestamp is hours since epoch."""

    station_id: str
    timestamp: int
    pm1: float
    pm10: float
    pm25: float
    temperature: float
    humidity: float
    visibility: float
    wind_speed: float
    wind_bearing: float

    def __post_init__(self):
        for name in ("pm1", "pm10", "pm25", "visibility", "wind_speed"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be non-negative at {self.station_id}@{self.timestamp}")
        if not 0.0 <= self.humidity <= 100.0:
            raise DomainError(f"humidity out of [0, 100] at {self.station_id}@{self.timestamp}")
        if not 0.0 <= self.wind_bearing < 360.0:
            raise DomainError(f"wind_bearing out of [0, 360) at {self.station_id}@{self.timestamp}")

    def raw_values(self) -> tuple[float, ...]:
        return tuple(getattr(self, name) for name in RAW_FEATURES)


@dataclass(frozen=True)
class FeatureWindow:
    """Six standardized hourly rows of the nine features, ending at end_timestamp."""

    station_id: str
    end_timestamp: int
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.values.shape != (WINDOW_HOURS, len(FEATURES)):
            raise DomainError(
                f"Window must be {WINDOW_HOURS}x{len(FEATURES)}, got {self.values.shape}"
            )

    def flatten(self) -> np.ndarray:
        return self.values.reshape(-1)


@dataclass(frozen=True)
class BinScheme:
    """Regulatory PM2.5 categories as left-closed, right-open intervals."""

    edges: tuple[float, ...] = (0.0, 30.0, 60.0, 90.0, 120.0, 250.0, math.inf)
    labels: tuple[str, ...] = (
        "Good",
        "Satisfactory",
        "Moderately polluted",
        "Poor",
        "Very poor",
        "Severe",
    )

    def __post_init__(self):
        if len(self.edges) != len(self.labels) + 1:
            raise DomainError("BinScheme needs one more edge than labels")
        if any(b <= a for a, b in zip(self.edges, self.edges[1:])):
            raise DomainError("BinScheme edges must be strictly increasing")

    @property
    def n_bins(self) -> int:
        return len(self.labels)

    def bin_index(self, pm25: float) -> int:
        if not math.isfinite(pm25) or pm25 < 0:
            raise DomainError(f"PM2.5 must be finite and non-negative, got {pm25}")
        return int(np.searchsorted(self.edges, pm25, side="right")) - 1

    def bin_indices(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise DomainError("PM2.5 values must be finite and non-negative")
        return np.searchsorted(self.edges, values, side="right") - 1

    def histogram(self, values: np.ndarray) -> np.ndarray:
        """Normalized counts over the bins; integer counts divided by len(values)."""
        values = np.asarray(values, dtype=np.float64)
        counts = np.bincount(self.bin_indices(values), minlength=self.n_bins)
        return counts / len(values)

    def label(self, k: int) -> str:
        return self.labels[k]


DEFAULT_BINS = BinScheme()


def bin_index(pm25: float) -> int:
    return DEFAULT_BINS.bin_index(pm25)


@dataclass(frozen=True)
class HistogramTarget:
    probabilities: tuple[float, ...]

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=np.float64)
        if p.shape != (DEFAULT_BINS.n_bins,):
            raise DomainError(f"Histogram must have {DEFAULT_BINS.n_bins} entries")
        if np.any(p < 0) or np.any(p > 1):
            raise DomainError("Histogram probabilities must lie in [0, 1]")
        if abs(p.sum() - 1.0) > HISTOGRAM_TOLERANCE:
            raise DomainError(f"Histogram must sum to 1, got {p.sum()!r}")

    @classmethod
    def from_array(cls, values: np.ndarray) -> "HistogramTarget":
        return cls(tuple(float(v) for v in values))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.probabilities, dtype=np.float64)


class ForecastMode(str, Enum):
    POINT = "point"
    PROBABILISTIC = "probabilistic"


@dataclass(frozen=True)
class Horizon:
    s: int
    mode: ForecastMode

    def __post_init__(self):
        if self.s < 1:
            raise DomainError(f"Horizon must be at least 1 hour, got {self.s}")
        if self.mode is ForecastMode.PROBABILISTIC and self.s % 2:
            raise DomainError(f"Probabilistic horizon must be even, got {self.s}")

    def window_offsets(self) -> range:
        """Hour offsets after t covered by the histogram target, i.e. [s/2, 3s/2)."""
        if self.mode is not ForecastMode.PROBABILISTIC:
            raise UsageError("Only probabilistic horizons have a target window")
        return range(self.s // 2, 3 * self.s // 2)
