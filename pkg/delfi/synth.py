"""Seeded multi-station hourly data with diurnal cycles, spikes, haze episodes and wind advection."""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from . import settings
from .data_model import RAW_FEATURES, StationMeta, StationRecord, UsageError
from .ingest import EPOCH, TIMESTAMP_COLUMN, bearing_matrix, frame_to_records, records_to_frame

_logger = logging.getLogger(__name__)

START = pd.Timestamp("2018-11-01T00:00:00Z")
LAT_RANGE = (28.45, 28.65)
LON_RANGE = (77.07, 77.33)
DEFAULT_STATIONS = 13
DEFAULT_HOURS = 3552
MIN_STATIONS = 3
MIN_HOURS = 200


@dataclass(frozen=True)
class SynthProfile:
    """Knobs of the generator; spike_rates[g] applies to stations with index % 3 == g.

    PM10 is PM2.5 plus coarse_ratio times the primary (non-haze) PM2.5. The haze anomaly
    grows by haze_growth per hour and is damped by a fog anomaly that it drives and that
    shows up in humidity; haze_dynamics() must have spectral radius below 1.
    """

    spike_rates: tuple[float, float, float] = (0.001, 0.01, 0.05)
    spike_magnitude: tuple[float, float] = (1.0, 3.0)
    spike_decay_hours: float = 3.0
    base_levels: tuple[float, float] = (35.0, 160.0)
    diurnal_amplitude: float = 0.35
    ar_coef: float = 0.9
    noise_scale: float = 0.08
    advection_strength: float = 0.6
    lag_range: tuple[int, int] = (1, 3)
    gap_rate: float = 0.0
    coarse_ratio: float = 0.75
    haze_level: float = 20.0
    haze_growth: float = 1.4
    fog_damping: float = 0.5
    fog_coupling: float = 0.68
    fog_memory: float = 0.4
    haze_noise: float = 0.03
    fog_noise: float = 0.06
    fog_humidity: float = 8.0

    def __post_init__(self):
        if len(self.spike_rates) != 3 or not all(0.0 <= r <= 1.0 for r in self.spike_rates):
            raise UsageError("spike_rates needs three probabilities")
        if not 1 <= self.lag_range[0] <= self.lag_range[1]:
            raise UsageError(f"Invalid lag range {self.lag_range}")
        if not 0.0 <= self.diurnal_amplitude < 1.0:
            raise UsageError("diurnal_amplitude must lie in [0, 1)")
        if self.advection_strength < 0 or not 0.0 <= self.gap_rate < 1.0:
            raise UsageError("advection_strength must be non-negative and gap_rate in [0, 1)")
        if self.coarse_ratio <= 0 or self.haze_level < 0:
            raise UsageError("coarse_ratio must be positive and haze_level non-negative")
        if np.abs(np.linalg.eigvals(self.haze_dynamics())).max() >= 1.0:
            raise UsageError("Haze and fog coupling must be a stable system")

    def haze_dynamics(self) -> np.ndarray:
        """Hourly transition matrix of the (haze, fog) anomaly pair."""
        return np.array([[self.haze_growth, -self.fog_damping], [self.fog_coupling, self.fog_memory]])


def _ar1(rng: np.random.Generator, shape: tuple[int, int], coef: float, scale: float) -> np.ndarray:
    shocks = rng.normal(0.0, scale, size=shape)
    out = np.empty(shape)
    out[:, 0] = shocks[:, 0]
    for t in range(1, shape[1]):
        out[:, t] = coef * out[:, t - 1] + shocks[:, t]
    return out


def _lagged(series: np.ndarray, lag: int) -> np.ndarray:
    return np.concatenate([np.full(lag, series[0]), series[:-lag]])


def _haze_cycle(dynamics: np.ndarray, shocks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Haze and fog anomalies (n, T) driven by shocks (2, n, T) under the hourly transition."""
    state = np.zeros((2, shocks.shape[1]))
    out = np.empty_like(shocks)
    for t in range(shocks.shape[2]):
        state = dynamics @ state + shocks[:, :, t]
        out[:, :, t] = state
    return out[0], out[1]


def generate(
    n_stations: int = DEFAULT_STATIONS,
    n_hours: int = DEFAULT_HOURS,
    seed: int = settings.DELFI_SEED,
    profile: SynthProfile = SynthProfile(),
) -> tuple[list[StationMeta], dict[str, list[StationRecord]]]:
    """Stations in a Delhi-sized box with hourly records starting 2018-11-01.

    The random draws do not depend on the profile's continuous knobs, so two profiles
    differing only in e.g. advection_strength share every underlying process.
    """
    if n_stations < MIN_STATIONS or n_hours < MIN_HOURS:
        raise UsageError(f"Need at least {MIN_STATIONS} stations and {MIN_HOURS} hours")
    rng = np.random.default_rng(seed)
    n, T = n_stations, n_hours

    stations = [
        StationMeta(f"S{i:02d}", float(lat), float(lon))
        for i, (lat, lon) in enumerate(
            zip(rng.uniform(*LAT_RANGE, size=n), rng.uniform(*LON_RANGE, size=n))
        )
    ]
    theta = bearing_matrix(stations).theta
    first_hour = (START - EPOCH) // pd.Timedelta(hours=1)
    hours = first_hour + np.arange(T)
    hour_of_day = (hours % 24).astype(np.float64)

    # primary PM2.5: baseline x diurnal cycle x AR(1) log-noise x decaying spikes
    base = np.linspace(*profile.base_levels, n)[:, None]
    diurnal = 1.0 + profile.diurnal_amplitude * np.cos(2 * np.pi * (hour_of_day - 22.0) / 24.0)
    noise = np.exp(_ar1(rng, (n, T), profile.ar_coef, profile.noise_scale))
    rates = np.array([profile.spike_rates[i % 3] for i in range(n)])[:, None]
    impulses = (rng.random((n, T)) < rates) * rng.uniform(*profile.spike_magnitude, size=(n, T))
    kernel = np.exp(-np.arange(int(6 * profile.spike_decay_hours) + 1) / profile.spike_decay_hours)
    spikes = np.vstack([np.convolve(row, kernel)[:T] for row in impulses])
    local = base * diurnal * noise * (1.0 + spikes)

    # regional wind with per-station jitter
    direction = np.cumsum(rng.normal(0.0, 10.0, size=T)) + rng.uniform(0.0, 360.0)
    bearing = (direction + rng.normal(0.0, 15.0, size=(n, T))) % 360.0
    speed = np.clip(2.5 + _ar1(rng, (1, T), 0.95, 0.3), 0.2, None) * rng.uniform(0.8, 1.2, size=(n, 1))
    lags = rng.integers(profile.lag_range[0], profile.lag_range[1] + 1, size=(n, n))

    advected = np.zeros((n, T))
    mean_speed = speed.mean()
    for a in range(n):
        for i in range(n):
            if i == a:
                continue
            lag = int(lags[a, i])
            alignment = np.clip(np.cos(np.deg2rad(theta[a, i] - _lagged(bearing[i], lag))), 0.0, None)
            advected[a] += alignment * _lagged(speed[i], lag) / mean_speed * _lagged(local[i], lag)
    primary = local + profile.advection_strength * advected / (n - 1)

    # secondary fine-mode haze that feeds on itself until the fog it raises scavenges it
    shocks = rng.normal(size=(2, n, T)) * np.array([profile.haze_noise, profile.fog_noise])[:, None, None]
    haze, fog = _haze_cycle(profile.haze_dynamics(), shocks)
    pm25 = primary + profile.haze_level * np.clip(1.0 + haze, 0.0, None)

    pm1 = pm25 * rng.uniform(0.55, 0.7, size=(n, 1)) * np.exp(rng.normal(0.0, 0.05, size=(n, T)))
    # the coarse fraction comes from primary sources only
    pm10 = pm25 + profile.coarse_ratio * primary * np.exp(rng.normal(0.0, 0.005, size=(n, T)))
    temperature = (
        20.0
        + 7.0 * np.cos(2 * np.pi * (hour_of_day - 14.0) / 24.0)
        + _ar1(rng, (n, T), 0.98, 0.3)
        + rng.normal(0.0, 1.0, size=(n, 1))
    )
    humidity = np.clip(60.0 - 1.5 * (temperature - 20.0) + profile.fog_humidity * fog, 5.0, 100.0)
    visibility = np.clip(8.0 - pm25 / 60.0 + _ar1(rng, (n, T), 0.9, 0.3), 0.1, None)
    present = rng.random((n, T)) >= profile.gap_rate

    columns = {
        "pm1": pm1,
        "pm10": pm10,
        "pm25": pm25,
        "temperature": temperature,
        "humidity": humidity,
        "visibility": visibility,
        "wind_speed": speed,
        "wind_bearing": bearing,
    }
    values = np.stack([np.round(columns[name], 3) for name in RAW_FEATURES], axis=-1)
    values[..., RAW_FEATURES.index("wind_bearing")] %= 360.0

    records = {}
    for a, station in enumerate(stations):
        frame = pd.DataFrame(values[a][present[a]], columns=list(RAW_FEATURES), index=hours[present[a]])
        records[station.station_id] = frame_to_records(station.station_id, frame)
    _logger.info(f"Generated {n} stations x {T} hours (seed={seed})")
    return stations, records


def write_dataset(
    out_dir: str | Path, stations: Sequence[StationMeta], records: Mapping[str, Sequence[StationRecord]]
) -> Path:
    """Writes one CSV per station plus stations.csv; returns the metadata path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for station in stations:
        frame = records_to_frame(records[station.station_id])
        stamps = (EPOCH + pd.to_timedelta(frame.index, unit="h")).strftime("%Y-%m-%dT%H:%M:%SZ")
        frame = frame.reset_index(drop=True)
        frame.insert(0, TIMESTAMP_COLUMN, stamps)
        frame.to_csv(out_dir / f"{station.station_id}.csv", index=False)
    meta = pd.DataFrame(
        {
            "station_id": [s.station_id for s in stations],
            "latitude": [s.latitude for s in stations],
            "longitude": [s.longitude for s in stations],
            "path": [f"{s.station_id}.csv" for s in stations],
        }
    )
    meta_path = out_dir / "stations.csv"
    meta.to_csv(meta_path, index=False)
    _logger.info(f"Wrote {len(stations)} station files to {out_dir}")
    return meta_path
