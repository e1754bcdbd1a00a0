from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from delfi.cli import EXIT_OK, main
from delfi.data_model import POINT_HORIZONS, PROBABILISTIC_HORIZONS, UsageError
from delfi.dataset import build_datasets
from delfi.evaluation import (
    DELFI,
    KL,
    KNN,
    LINEAR,
    MAE,
    POINT_METHODS,
    PROBABILISTIC_METHODS,
    ForecastReport,
    LeakageError,
    NefAblation,
    ReportCell,
    assert_test_split,
    mae,
    mean_kl,
    nef_ablation,
    run_benchmark,
)
from delfi.forecaster import ModelRegistry
from delfi.model import LONG, SHORT, init_model, zero_output_heads
from delfi.trainer import MONITOR, TrainConfig


@pytest.fixture(scope="module")
def bundle(small_features):
    return build_datasets(small_features, horizons=PROBABILISTIC_HORIZONS)


def _cell(report, method, horizon, metric):
    matches = [c for c in report.cells if (c.method, c.horizon, c.metric) == (method, horizon, metric)]
    assert len(matches) == 1
    return matches[0]


def test_mae_examples(rng):
    """Test MAE on a worked example and against an explicit loop."""
    assert mae(np.array([10.0, 20.0]), np.array([12.0, 16.0])) == 3.0
    p, a = rng.normal(size=50), rng.normal(size=50)
    total = 0.0
    for x, y in zip(p, a):
        total += abs(x - y)
    assert mae(p, a) == pytest.approx(total / 50, abs=1e-12)
    with pytest.raises(UsageError):
        mae(np.zeros(2), np.zeros(3))


def test_mean_kl():
    """Test the mean KL of point masses against the uniform histogram is about ln 6."""
    actual = np.eye(6)
    predicted = np.full((6, 6), 1 / 6)
    assert mean_kl(predicted, actual) == pytest.approx(np.log(6), abs=1e-4)
    assert mean_kl(actual, actual) == pytest.approx(0.0, abs=1e-9)


def test_assert_test_split(bundle):
    """Test training examples reaching a metric are reported as leakage."""
    assert_test_split(bundle.point_test)
    with pytest.raises(LeakageError):
        assert_test_split(bundle.point_train)


def test_report_csv_round_trip(tmp_path):
    """Test a report survives its CSV file, absent cells included."""
    report = ForecastReport(
        [
            ReportCell(KNN, 1, "point", MAE, 12.25, 40, k=5, seed=7),
            ReportCell(DELFI, 1, "point", MAE, float("nan"), 0, seed=7),
            ReportCell(DELFI, 6, "probabilistic", KL, 0.5, 30, seed=7),
        ]
    )
    report.to_csv(tmp_path / "report.csv")
    loaded = ForecastReport.from_csv(tmp_path / "report.csv")
    assert loaded.cells[0] == report.cells[0]
    assert loaded.cells[2] == report.cells[2]
    assert loaded.cells[1].absent
    assert loaded.cells[1].k is None
    assert np.isnan(loaded.cells[1].value)


def test_report_tables():
    """Test the grids are laid out methods by horizons with blanks for absent cells."""
    report = ForecastReport([ReportCell(LINEAR, 3, "point", MAE, 4.0, 10), ReportCell(KNN, 8, "probabilistic", KL, 0.2, 5)])
    point = report.point_table()
    assert point.shape == (3, 9)
    assert list(point.index) == list(POINT_METHODS)
    assert point.loc[LINEAR, 3] == 4.0
    assert np.isnan(point.loc[DELFI, 3])
    prob = report.probabilistic_table()
    assert list(prob.columns) == list(PROBABILISTIC_HORIZONS)
    assert prob.loc[KNN, 8] == 0.2
    text = report.format_tables()
    assert "4.000" in text
    assert "-" in text
    assert ForecastReport().point_table().isna().all().all()


def test_benchmark_without_models(tmp_path, bundle, small_features):
    """Test an empty registry leaves DELFI cells absent while the baselines are filled."""
    report = run_benchmark(bundle, ModelRegistry(tmp_path), small_features.standardizer, k=5, seed=3, threads=2)
    assert len(report.cells) == len(POINT_METHODS) * len(POINT_HORIZONS) + len(PROBABILISTIC_METHODS) * len(
        PROBABILISTIC_HORIZONS
    )
    assert [c.method for c in report.cells[:9]] == [KNN] * 9
    for s in POINT_HORIZONS:
        assert _cell(report, DELFI, s, MAE).absent
        knn = _cell(report, KNN, s, MAE)
        assert knn.n_examples > 0 and knn.value >= 0 and knn.k == 5
        assert _cell(report, LINEAR, s, MAE).k is None
    assert _cell(report, DELFI, 6, KL).absent
    assert not _cell(report, KNN, 6, KL).absent
    assert _cell(report, KNN, 48, KL).absent
    assert all(c.seed == 3 for c in report.cells)


def test_benchmark_zero_residual_model_is_persistence(tmp_path, bundle, small_features):
    """Test a model predicting no change scores the persistence MAE at every horizon."""
    registry = ModelRegistry(tmp_path)
    registry.save(zero_output_heads(init_model(SHORT, seed=1, metadata={"residual_scale": 4.0})))
    registry.save(init_model(LONG, seed=1, horizon=6))
    test = bundle.point_test
    report = run_benchmark(
        bundle, registry, small_features.standardizer, point_horizons=(1, 6, 24), probabilistic_horizons=(6, 8)
    )
    for s in (1, 6, 24):
        observed = np.isfinite(test.future_pm[:, s - 1])
        expected = np.mean(np.abs(test.last_pm[observed] - test.future_pm[observed, s - 1]))
        assert _cell(report, DELFI, s, MAE).value == pytest.approx(expected, abs=1e-9)
    assert np.isfinite(_cell(report, DELFI, 6, KL).value)
    assert _cell(report, DELFI, 8, KL).absent


def test_nef_ablation(small_features, tiny_config):
    """Test the ablation trains both feature variants and reports their KL difference."""
    cfg = TrainConfig(n_epochs=1, n_t=2, m_t=1, pretrain_epochs=1, batch_size=64, seed=2)
    ablation = nef_ablation(small_features, 6, cfg, tiny_config)
    assert np.isfinite(ablation.kl_with_nef)
    assert np.isfinite(ablation.kl_without_nef)
    assert ablation.difference == pytest.approx(ablation.kl_without_nef - ablation.kl_with_nef)
    with pytest.raises(UsageError):
        nef_ablation(small_features.without_nef(), 6, cfg, tiny_config)


TREND_FLAGS = [
    "--hidden-size", "8", "--num-layers", "1", "--batch-size", "32", "--lr", "0.01",
    "--epochs", "8", "--n-t", "10", "--m-t", "10", "--pretrain-epochs", "3",
]
TREND_LONG_HORIZONS = (8, 12, 24, 48)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("pipeline"))
    assert main(["synth", "--stations", "6", "--hours", "1500", "--seed", "0", "--out", out]) == EXIT_OK
    assert main(["featurize", "--out", out]) == EXIT_OK
    assert main(["train", "--variant", "short", "--out", out, *TREND_FLAGS]) == EXIT_OK
    for s in TREND_LONG_HORIZONS:
        assert main(["train", "--variant", "long", "--horizon", str(s), "--out", out, *TREND_FLAGS]) == EXIT_OK
    assert main(["evaluate", "--nef-ablation", "12", "--out", out, *TREND_FLAGS]) == EXIT_OK
    return Path(out)


@pytest.mark.slow
def test_linear_baseline_error_grows_fastest(pipeline):
    """Test linear MAE never falls with horizon and is at least twice KNN and DELFI at 12h and 24h."""
    table = ForecastReport.from_csv(pipeline / "reports" / "report.csv").point_table()
    linear = table.loc[LINEAR, list(POINT_HORIZONS)].to_numpy()
    assert np.all(np.diff(linear) >= 0)
    for s in (12, 24):
        assert table.loc[LINEAR, s] >= 2 * table.loc[KNN, s]
        assert table.loc[LINEAR, s] >= 2 * table.loc[DELFI, s]


@pytest.mark.slow
def test_delfi_kl_not_worse_than_knn(pipeline):
    """Test DELFI histograms are at least as close as KNN at the long horizons."""
    table = ForecastReport.from_csv(pipeline / "reports" / "report.csv").probabilistic_table()
    for s in TREND_LONG_HORIZONS:
        assert table.loc[DELFI, s] <= table.loc[KNN, s]


@pytest.mark.slow
def test_dropping_nef_hurts(pipeline):
    """Test removing NEF raises the 12h KL."""
    ablation = NefAblation.from_csv(pipeline / "reports" / "nef_ablation.csv")
    assert ablation.horizon == 12
    assert ablation.difference > 0


@pytest.mark.slow
def test_training_loss_falls(pipeline):
    """Test the monitored training loss ends below its first-epoch value for both variants."""
    names = ["train_short.csv"] + [f"train_long_s{s}.csv" for s in TREND_LONG_HORIZONS]
    for name in names:
        log = pd.read_csv(pipeline / "logs" / name)
        monitored = log[log["phase"] == MONITOR]["loss"].to_numpy()
        assert len(monitored) == 8, name
        assert monitored[-1] < monitored[0], name
