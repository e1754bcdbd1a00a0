import math

import numpy as np
import pytest

from delfi.data_model import (
    DEFAULT_BINS,
    FEATURES,
    DomainError,
    FeatureWindow,
    ForecastMode,
    HistogramTarget,
    Horizon,
    StationMeta,
    StationRecord,
    UsageError,
    bin_index,
    train_count,
)


def _record(**overrides):
    values = dict(
        station_id="S00",
        timestamp=100,
        pm1=10.0,
        pm10=30.0,
        pm25=20.0,
        temperature=15.0,
        humidity=50.0,
        visibility=4.0,
        wind_speed=2.0,
        wind_bearing=90.0,
    )
    values.update(overrides)
    return StationRecord(**values)


@pytest.mark.parametrize(
    "pm25, expected",
    [(0.0, 0), (29.999, 0), (30.0, 1), (59.9, 1), (60.0, 2), (90.0, 3), (120.0, 4), (249.99, 4), (250.0, 5), (1e6, 5)],
)
def test_bin_index_boundaries(pm25, expected):
    """Test bins are left-closed and the last one is unbounded."""
    assert bin_index(pm25) == expected


@pytest.mark.parametrize("pm25", [-0.1, math.nan, math.inf])
def test_bin_index_rejects_bad_values(pm25):
    """Test negative and non-finite concentrations are domain errors."""
    with pytest.raises(DomainError):
        bin_index(pm25)


def test_bin_indices_matches_scalar():
    """Test the vectorised bin lookup agrees with the scalar one."""
    values = np.array([0.0, 15.0, 30.0, 89.9, 121.0, 300.0])
    assert DEFAULT_BINS.bin_indices(values).tolist() == [bin_index(v) for v in values]


def test_histogram_counts():
    """Test histogram of [10, 40, 40, 300] is [0.25, 0.5, 0, 0, 0, 0.25]."""
    hist = DEFAULT_BINS.histogram(np.array([10.0, 40.0, 40.0, 300.0]))
    assert hist.tolist() == [0.25, 0.5, 0.0, 0.0, 0.0, 0.25]
    assert DEFAULT_BINS.label(5) == "Severe"


def test_histogram_target_validation():
    """Test histogram targets must be six probabilities summing to one."""
    HistogramTarget((1 / 6,) * 6)
    with pytest.raises(DomainError):
        HistogramTarget((0.5, 0.5, 0.1, 0.0, 0.0, 0.0))
    with pytest.raises(DomainError):
        HistogramTarget((0.5, 0.5))
    with pytest.raises(DomainError):
        HistogramTarget((1.5, -0.5, 0.0, 0.0, 0.0, 0.0))


def test_histogram_target_array_conversion():
    """Test from_array and as_array agree."""
    values = np.array([0.1, 0.2, 0.3, 0.4, 0.0, 0.0])
    np.testing.assert_array_equal(HistogramTarget.from_array(values).as_array(), values)


def test_station_record_validation():
    """Test record invariants on concentrations, humidity and wind bearing."""
    assert _record().raw_values()[2] == 20.0
    with pytest.raises(DomainError):
        _record(pm25=-1.0)
    with pytest.raises(DomainError):
        _record(humidity=101.0)
    with pytest.raises(DomainError):
        _record(wind_bearing=360.0)


def test_station_meta_validation():
    """Test coordinates outside WGS84 ranges are rejected."""
    StationMeta("S00", 28.5, 77.2)
    with pytest.raises(DomainError):
        StationMeta("S00", 91.0, 77.2)
    with pytest.raises(DomainError):
        StationMeta("S00", 28.5, -181.0)


def test_feature_window_shape():
    """Test a window is 6 hours by 9 features."""
    window = FeatureWindow("S00", 10, np.zeros((6, len(FEATURES))))
    assert window.flatten().shape == (54,)
    with pytest.raises(DomainError):
        FeatureWindow("S00", 10, np.zeros((5, len(FEATURES))))


def test_horizon_window_offsets():
    """Test probabilistic horizons cover [s/2, 3s/2) and must be even."""
    assert Horizon(12, ForecastMode.PROBABILISTIC).window_offsets() == range(6, 18)
    with pytest.raises(DomainError):
        Horizon(7, ForecastMode.PROBABILISTIC)
    with pytest.raises(DomainError):
        Horizon(0, ForecastMode.POINT)
    with pytest.raises(UsageError):
        Horizon(3, ForecastMode.POINT).window_offsets()


def test_train_count():
    """Test the training prefix is the first 85% of timestamps."""
    assert train_count(100) == 85
    assert train_count(3552) == 3019
