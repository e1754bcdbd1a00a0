import numpy as np
import pandas as pd
import pytest

from delfi.data_model import FEATURES, RAW_FEATURES, DomainError, StationMeta, UsageError, train_count
from delfi.ingest import (
    BearingMatrix,
    IngestionError,
    Standardizer,
    bearing_matrix,
    compute_nef,
    compute_nef_series,
    featurize,
    initial_bearing,
    load_features,
    load_station_csv,
    load_stations,
    read_station_frame,
    standardize,
    store_features,
)
from delfi.neural import sigmoid

HEADER = "timestamp,pm1,pm10,pm25,temperature,humidity,visibility,wind_speed,wind_bearing\n"


def _write(path, rows):
    path.write_text(HEADER + "".join(row + "\n" for row in rows))
    return path


def _oracle_bearing(origin, target):
    """Chord direction projected onto the local east/north plane."""
    lat_a, lon_a = np.deg2rad(origin)
    lat_b, lon_b = np.deg2rad(target)

    def unit(lat, lon):
        return np.array([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)])

    chord = unit(lat_b, lon_b) - unit(lat_a, lon_a)
    east = np.array([-np.sin(lon_a), np.cos(lon_a), 0.0])
    north = np.array([-np.sin(lat_a) * np.cos(lon_a), -np.sin(lat_a) * np.sin(lon_a), np.cos(lat_a)])
    return np.rad2deg(np.arctan2(chord @ east, chord @ north)) % 360.0


def _pair_bearings(theta_ai):
    return BearingMatrix(("A", "B"), np.array([[np.nan, theta_ai], [0.0, np.nan]]))


def test_load_station_csv_sorts_rows(tmp_path):
    """Test a well-formed 3-row file gives 3 records in timestamp order."""
    path = _write(
        tmp_path / "S01.csv",
        [
            "12,5,20,10,15,50,4,2,90",
            "10,5,20,11,15,50,4,2,90",
            "11,5,20,12,15,50,4,2,90",
        ],
    )
    records = load_station_csv(path)
    assert [r.timestamp for r in records] == [10, 11, 12]
    assert [r.pm25 for r in records] == [11.0, 12.0, 10.0]
    assert records[0].station_id == "S01"


def test_load_station_csv_iso_timestamps(tmp_path):
    """Test ISO-8601 hours parse to hours since epoch."""
    path = _write(
        tmp_path / "S01.csv",
        ["1970-01-01T05:00:00Z,5,20,10,15,50,4,2,90", "1970-01-01T06:00:00Z,5,20,10,15,50,4,2,90"],
    )
    assert [r.timestamp for r in load_station_csv(path)] == [5, 6]


def test_load_station_csv_drops_blank_cell(tmp_path, caplog):
    """Test a blank pm25 cell drops that row with a report."""
    path = _write(
        tmp_path / "S01.csv",
        ["10,5,20,10,15,50,4,2,90", "11,5,20,,15,50,4,2,90", "12,5,20,10,15,50,4,2,90"],
    )
    station = read_station_frame(path)
    assert len(station.frame) == 2
    assert len(station.dropped) == 1
    assert station.dropped[0].line == 3
    assert "pm25" in station.dropped[0].reason
    assert "dropped" in caplog.text


def test_load_station_csv_duplicate_timestamp(tmp_path):
    """Test duplicate timestamps raise an error naming the timestamp."""
    path = _write(tmp_path / "S01.csv", ["10,5,20,10,15,50,4,2,90", "10,5,20,11,15,50,4,2,90"])
    with pytest.raises(IngestionError, match="10"):
        load_station_csv(path)


def test_load_station_csv_malformed_header(tmp_path):
    """Test a header without the raw feature columns is rejected."""
    path = tmp_path / "S01.csv"
    path.write_text("timestamp,pm25\n10,5\n")
    with pytest.raises(IngestionError, match="Malformed header"):
        load_station_csv(path)


def test_load_station_csv_missing_file(tmp_path):
    """Test a missing file raises an ingestion error."""
    with pytest.raises(IngestionError):
        load_station_csv(tmp_path / "nope.csv")


def test_load_stations_from_metadata(tmp_path):
    """Test the metadata file resolves relative paths and orders stations."""
    _write(tmp_path / "b.csv", ["10,5,20,10,15,50,4,2,90"])
    _write(tmp_path / "a.csv", ["10,5,20,10,15,50,4,2,90", "11,5,20,10,15,50,4,2,90"])
    (tmp_path / "stations.csv").write_text(
        "station_id,latitude,longitude,path\nB,28.6,77.2,b.csv\nA,28.5,77.1,a.csv\n"
    )
    stations, frames = load_stations(tmp_path / "stations.csv", threads=2)
    assert [s.station_id for s in stations] == ["A", "B"]
    assert len(frames["A"]) == 2
    assert len(frames["B"]) == 1


@pytest.mark.parametrize(
    "origin, target, expected",
    [((0.0, 0.0), (1.0, 0.0), 0.0), ((0.0, 0.0), (0.0, 1.0), 90.0), ((1.0, 0.0), (0.0, 0.0), 180.0)],
)
def test_initial_bearing_cardinal(origin, target, expected):
    """Test bearings along meridians and the equator."""
    assert initial_bearing(origin, target) == pytest.approx(expected, abs=1e-9)


def test_initial_bearing_matches_oracle(rng):
    """Test bearings agree with a vector-geometry oracle on random pairs."""
    assert initial_bearing((28.5, 77.1), (28.6, 77.3)) == pytest.approx(
        _oracle_bearing((28.5, 77.1), (28.6, 77.3)), abs=0.01
    )
    for _ in range(100):
        origin = (rng.uniform(-80, 80), rng.uniform(-180, 180))
        target = (rng.uniform(-80, 80), rng.uniform(-180, 180))
        got = initial_bearing(origin, target)
        want = _oracle_bearing(origin, target)
        assert 0.0 <= got < 360.0
        assert min(abs(got - want), 360.0 - abs(got - want)) < 0.01


def test_initial_bearing_identical_points():
    """Test identical points are a domain error."""
    with pytest.raises(DomainError):
        initial_bearing((28.5, 77.1), (28.5, 77.1))


def test_bearing_matrix_diagonal():
    """Test the matrix holds pairwise bearings with an undefined diagonal."""
    stations = [StationMeta("A", 0.0, 0.0), StationMeta("B", 1.0, 0.0)]
    bearings = bearing_matrix(stations)
    assert np.isnan(bearings.theta[0, 0])
    assert bearings.bearing("A", "B") == pytest.approx(0.0, abs=1e-9)
    assert bearings.bearing("B", "A") == pytest.approx(180.0)
    with pytest.raises(DomainError):
        bearings.bearing("A", "A")


def test_compute_nef_examples():
    """Test NEF at zero flow, aligned unit flow and perpendicular flow."""
    bearings = _pair_bearings(40.0)
    assert compute_nef([None, (0.0, 2.0, 10.0)], "A", bearings) == 0.5
    assert compute_nef([None, (1.0, 1.0, 40.0)], "A", bearings) == pytest.approx(float(sigmoid(1.0)), abs=1e-15)
    assert compute_nef([None, (1.0, 1.0, 130.0)], "A", bearings) == pytest.approx(0.5, abs=1e-12)


def test_compute_nef_bounds_and_periodicity():
    """Test NEF stays strictly inside (0, 1) and ignores full turns of the wind bearing."""
    bearings = _pair_bearings(40.0)
    assert 0.0 < compute_nef([None, (500.0, 500.0, 40.0)], "A", bearings) < 1.0
    assert 0.0 < compute_nef([None, (500.0, 500.0, 220.0)], "A", bearings) < 1.0
    assert compute_nef([None, (0.7, 1.3, 25.0)], "A", bearings) == pytest.approx(
        compute_nef([None, (0.7, 1.3, 385.0)], "A", bearings), abs=1e-12
    )


def test_compute_nef_missing_contributor():
    """Test missing data at another station marks NEF as missing."""
    bearings = _pair_bearings(40.0)
    assert np.isnan(compute_nef([None, None], "A", bearings))
    assert np.isnan(compute_nef([None, (np.nan, 1.0, 0.0)], "A", bearings))


def test_compute_nef_series_matches_scalar(small_features):
    """Test the vectorised NEF panel agrees with the per-hour formula."""
    stations = small_features.stations
    frames = {
        sid: pd.DataFrame(small_features.values[sid][:, : len(RAW_FEATURES)], columns=list(RAW_FEATURES),
                          index=small_features.timestamps[sid])
        for sid in small_features.station_ids
    }
    raw_stats = small_features.standardizer.restrict(RAW_FEATURES)
    bearings = bearing_matrix(stations)
    series = compute_nef_series(frames, bearings, raw_stats)
    target = stations[0].station_id
    for hour in frames[target].index[:20]:
        values = []
        for sid in bearings.station_ids:
            row = frames[sid].loc[hour]
            values.append(
                (
                    float(raw_stats.transform_feature(row["pm25"], "pm25")),
                    float(raw_stats.transform_feature(row["wind_speed"], "wind_speed")),
                    float(row["wind_bearing"]),
                )
            )
        assert series[target].loc[hour] == pytest.approx(compute_nef(values, target, bearings), abs=1e-12)


def test_standardizer_examples():
    """Test the mean maps to 0, mean + std to 1, and inverse undoes transform."""
    values = np.array([[1.0, 10.0], [3.0, 30.0], [5.0, 20.0]])
    stats = Standardizer.fit(values, ("a", "b"))
    z = stats.transform(np.array([[3.0, 20.0]]))
    np.testing.assert_allclose(z, [[0.0, 0.0]], atol=1e-12)
    assert stats.transform_feature(stats.means[0] + stats.stds[0], "a") == pytest.approx(1.0)
    np.testing.assert_allclose(stats.inverse(stats.transform(values)), values, atol=1e-12)


def test_standardizer_errors():
    """Test constant features and unfitted use are rejected."""
    with pytest.raises(DomainError):
        Standardizer.fit(np.array([[1.0, 2.0], [1.0, 3.0]]), ("a", "b"))
    with pytest.raises(UsageError):
        Standardizer().transform(np.zeros((1, len(FEATURES))))


def test_featurize_uses_training_prefix_only(small_features):
    """Test standardized training rows have zero mean and unit std per feature."""
    train_rows = np.vstack(
        [small_features.values[sid][: train_count(len(small_features.timestamps[sid]))]
         for sid in small_features.station_ids]
    )
    z = standardize(train_rows, small_features.standardizer)
    np.testing.assert_allclose(np.nanmean(z, axis=0), 0.0, atol=1e-9)
    np.testing.assert_allclose(np.nanstd(z, axis=0), 1.0, atol=1e-9)


def test_featurize_nef_in_unit_interval(small_features):
    """Test every computed NEF lies strictly in (0, 1)."""
    for sid in small_features.station_ids:
        nef = small_features.values[sid][:, -1]
        nef = nef[np.isfinite(nef)]
        assert len(nef) > 0
        assert np.all((nef > 0.0) & (nef < 1.0))


def test_featurize_without_nef_zeroes_column(small_features):
    """Test the ablation switch zeroes the standardized NEF column."""
    sid = small_features.station_ids[0]
    z = small_features.without_nef().standardized(sid)
    assert np.all(z[:, -1] == 0.0)
    np.testing.assert_array_equal(z[:, :-1], small_features.standardized(sid)[:, :-1])


def test_store_and_load_features(tmp_path, small_features):
    """Test featurized data survives the container unchanged."""
    path = tmp_path / "features.bin"
    store_features(path, small_features)
    loaded = load_features(path)
    assert loaded.station_ids == small_features.station_ids
    sid = loaded.station_ids[1]
    np.testing.assert_array_equal(loaded.values[sid], small_features.values[sid])
    np.testing.assert_array_equal(loaded.standardizer.means, small_features.standardizer.means)


def test_featurize_missing_station_data(small_features):
    """Test featurize refuses stations without data."""
    with pytest.raises(IngestionError):
        featurize({}, small_features.stations)
