from dataclasses import replace
from unittest.mock import patch

import numpy as np
import pytest

from delfi.data_model import UsageError
from delfi.dataset import TRAIN, PointDataset, StationGrouping, build_datasets, group_stations_by_residual_variance
from delfi.model import AGGREGATOR, COMPONENTS, LONG, SHORT, batch_loss, init_model
from delfi.neural import adam_step
from delfi.trainer import (
    TrainConfig,
    TrainingError,
    MONITOR,
    TrainLog,
    evaluate_loss,
    load_checkpoint,
    pretrain,
    train_alternating,
    train_model,
)


@pytest.fixture(scope="module")
def bundle(small_features):
    return build_datasets(small_features, horizons=[6])


@pytest.fixture
def cfg():
    return TrainConfig(n_epochs=2, n_t=3, m_t=2, pretrain_epochs=1, lr=0.01, batch_size=64, seed=11)


def _learnable(n=256, seed=0):
    rng = np.random.default_rng(seed)
    windows = rng.normal(size=(n, 6, 9))
    return PointDataset(
        station_ids=np.array(["A"] * n, dtype=object),
        end_timestamps=np.arange(n, dtype=np.int64),
        windows=windows,
        first_pos=np.zeros(n, dtype=np.int64),
        last_pos=np.zeros(n, dtype=np.int64),
        split=np.full(n, TRAIN, dtype=object),
        residuals=0.8 * windows[:, -1, 0] - 0.3 * windows[:, -1, 7],
        last_pm=np.zeros(n),
        future_pm=np.zeros((n, 24)),
    )


def _assert_same_params(a, b):
    assert list(a.params) == list(b.params)
    for key in a.params:
        np.testing.assert_array_equal(a.params[key], b.params[key], err_msg=key)


def test_train_config_validation():
    """Test non-positive budgets and rates are rejected."""
    with pytest.raises(UsageError):
        TrainConfig(n_t=0)
    with pytest.raises(UsageError):
        TrainConfig(lr=0.0)


def test_alternating_step_counts(bundle, tiny_config, cfg):
    """Test each epoch performs n_t component steps then m_t aggregator steps."""
    model = init_model(SHORT, tiny_config, seed=0)
    _, log = train_alternating(model, bundle.point_train, cfg)
    assert log.steps(COMPONENTS) == cfg.n_epochs * cfg.n_t
    assert log.steps(AGGREGATOR) == cfg.n_epochs * cfg.m_t
    phases = [e[0] for e in log.entries if e[1] == 0 and e[0] != MONITOR]
    assert phases == [COMPONENTS] * 3 + [AGGREGATOR] * 2


def test_alternating_updates_one_group_per_phase(bundle, tiny_config, cfg):
    """Test component steps only touch component parameters and aggregator steps only the aggregator."""
    model = init_model(SHORT, tiny_config, seed=0)
    with patch("delfi.trainer.adam_step", wraps=adam_step) as spy:
        train_alternating(model, bundle.point_train, cfg)
    keys = [call.args[2].keys for call in spy.call_args_list]
    assert len(keys) == cfg.n_epochs * (cfg.n_t + cfg.m_t)
    assert keys[0] == tuple(model.group_keys(COMPONENTS))
    assert keys[3] == tuple(model.group_keys(AGGREGATOR))


def test_pretrain_leaves_aggregator_unchanged(bundle, tiny_config, cfg):
    """Test pretraining only moves component parameters."""
    train = bundle.point_train
    model = init_model(SHORT, tiny_config, seed=1)
    before = model.copy()
    log = TrainLog()
    pretrain(model, group_stations_by_residual_variance(train), train, cfg, log)
    for key in model.group_keys(AGGREGATOR):
        np.testing.assert_array_equal(model.params[key], before.params[key])
    for k in range(3):
        assert any(not np.array_equal(model.params[key], before.params[key]) for key in model.component_keys(k))
        assert log.steps(f"pretrain_{k}") > 0


def _separable(n=256, seed=0):
    """Three stations with residual variances 1, 10 and 100 around distinct levels."""
    rng = np.random.default_rng(seed)
    ids, residuals = [], []
    for sid, level, std in (("A", 0.0, 1.0), ("B", 30.0, np.sqrt(10.0)), ("C", 60.0, 10.0)):
        ids += [sid] * n
        residuals.append(level + std * rng.normal(size=n))
    m = 3 * n
    return PointDataset(
        station_ids=np.array(ids, dtype=object),
        end_timestamps=np.arange(m, dtype=np.int64),
        windows=rng.normal(size=(m, 6, 9)),
        first_pos=np.zeros(m, dtype=np.int64),
        last_pos=np.zeros(m, dtype=np.int64),
        split=np.full(m, TRAIN, dtype=object),
        residuals=np.concatenate(residuals),
        last_pm=np.zeros(m),
        future_pm=np.zeros((m, 24)),
    )


def test_pretrain_routes_groups_to_their_component(bundle, tiny_config, cfg):
    """Test changing one group's residuals only changes that group's component."""
    train = bundle.point_train
    grouping = group_stations_by_residual_variance(train)
    in_group = np.isin(train.station_ids, grouping.members(1))
    shifted = replace(train, residuals=np.where(in_group, train.residuals + 5.0, train.residuals))
    a = pretrain(init_model(SHORT, tiny_config, seed=3), grouping, train, cfg)
    b = pretrain(init_model(SHORT, tiny_config, seed=3), grouping, shifted, cfg)
    for k in (0, 2):
        for key in a.component_keys(k):
            np.testing.assert_array_equal(a.params[key], b.params[key], err_msg=key)
    assert any(not np.array_equal(a.params[key], b.params[key]) for key in a.component_keys(1))


def test_pretrain_separates_components(tiny_config):
    """Test each pretrained component fits its own group better than the other groups."""
    train = _separable()
    grouping = StationGrouping({"A": 0, "B": 1, "C": 2})
    model = init_model(SHORT, tiny_config, seed=7, metadata={"residual_scale": 30.0})
    cfg = TrainConfig(pretrain_epochs=40, lr=0.05, batch_size=64, seed=7)
    pretrain(model, grouping, train, cfg)
    targets = train.residuals / 30.0
    losses = np.empty((3, 3))
    for k in range(3):
        for j, sid in enumerate(("A", "B", "C")):
            mask = train.station_ids == sid
            losses[k, j] = batch_loss(model, train.windows[mask], targets[mask], np.eye(3)[k])
    for k in range(3):
        assert all(losses[k, k] < losses[k, j] for j in range(3) if j != k)


def test_pretrain_skips_empty_group(bundle, tiny_config, cfg, caplog):
    """Test a component with no stations keeps its initial weights."""
    train = bundle.point_train
    ids = sorted(set(train.station_ids))
    grouping = StationGrouping({sid: 0 if i % 2 == 0 else 1 for i, sid in enumerate(ids)})
    model = init_model(SHORT, tiny_config, seed=2)
    before = model.copy()
    pretrain(model, grouping, train, cfg)
    for key in model.component_keys(2):
        np.testing.assert_array_equal(model.params[key], before.params[key])
    assert "component 2" in caplog.text


def test_training_is_deterministic(bundle, tiny_config, cfg):
    """Test identical seeds and data give identical weights."""
    train = bundle.point_train
    grouping = group_stations_by_residual_variance(train)
    a, log_a = train_model(SHORT, train, grouping, cfg, tiny_config, bundle.residual_scale)
    b, log_b = train_model(SHORT, train, grouping, cfg, tiny_config, bundle.residual_scale)
    _assert_same_params(a, b)
    assert [e[3] for e in log_a.entries] == [e[3] for e in log_b.entries]
    assert a.metadata["residual_scale"] == bundle.residual_scale.scale


def test_resume_matches_uninterrupted_run(tmp_path, bundle, tiny_config, cfg):
    """Test resuming from an end-of-epoch checkpoint reproduces the full run bit-exactly."""
    train = bundle.point_train
    grouping = group_stations_by_residual_variance(train)
    full, _ = train_model(SHORT, train, grouping, cfg, tiny_config, bundle.residual_scale)

    path = tmp_path / "ckpt.bin"
    train_model(SHORT, train, grouping, replace(cfg, n_epochs=1), tiny_config, bundle.residual_scale,
                checkpoint_path=path)
    assert load_checkpoint(path).epoch == 1
    resumed, log = train_model(SHORT, train, grouping, cfg, tiny_config, bundle.residual_scale,
                               checkpoint_path=path, resume=True)
    _assert_same_params(full, resumed)
    assert log.steps(COMPONENTS) == cfg.n_epochs * cfg.n_t


def test_long_term_training(bundle, tiny_config, cfg):
    """Test long-term models train on histogram datasets of their own horizon."""
    train = bundle.histogram_train[6]
    grouping = group_stations_by_residual_variance(bundle.point_train)
    model, log = train_model(LONG, train, grouping, cfg, tiny_config, horizon=6, test=bundle.histogram_test[6])
    assert model.horizon == 6
    assert np.isfinite(log.final_train_loss)
    assert np.isfinite(log.final_test_loss)
    with pytest.raises(UsageError):
        train_model(LONG, train, grouping, cfg, tiny_config, horizon=12)


def test_wrong_dataset_kind(bundle, tiny_config, cfg):
    """Test short-term models refuse histogram datasets."""
    with pytest.raises(UsageError):
        train_alternating(init_model(SHORT, tiny_config), bundle.histogram_train[6], cfg)


def test_non_finite_input_raises(bundle, tiny_config, cfg):
    """Test NaN in a training window aborts with a training error."""
    train = bundle.point_train
    windows = train.windows.copy()
    windows[0, 2, 3] = np.nan
    poisoned = replace(train, windows=windows)
    with pytest.raises(TrainingError, match="batch"):
        train_model(SHORT, poisoned, group_stations_by_residual_variance(train), cfg, tiny_config)


def test_training_reduces_loss(tiny_config):
    """Test alternating training lowers the loss on a learnable target."""
    train = _learnable()
    model = init_model(SHORT, tiny_config, seed=5)
    before = evaluate_loss(model, train)
    cfg = TrainConfig(n_epochs=6, n_t=10, m_t=5, lr=0.01, batch_size=32, seed=5)
    model, log = train_alternating(model, train, cfg)
    assert evaluate_loss(model, train) < before
    means = log.epoch_means()
    assert len(means) == 6
    assert means[-1] < means[0]
    monitored = log.epoch_train_losses()
    assert len(monitored) == 6
    assert monitored[-1] < monitored[0]


def test_evaluate_loss_empty(tiny_config, bundle):
    """Test the loss of an empty dataset is NaN."""
    empty = bundle.point_train.subset(np.zeros(len(bundle.point_train), dtype=bool))
    assert np.isnan(evaluate_loss(init_model(SHORT, tiny_config), empty))


def test_train_log_csv_and_epoch_means(tmp_path):
    """Test the log table and per-epoch means of the alternating phases."""
    log = TrainLog()
    log.record("pretrain_0", 0, 0, 9.0)
    log.record(COMPONENTS, 0, 0, 1.0)
    log.record(AGGREGATOR, 0, 0, 3.0)
    log.record(COMPONENTS, 1, 0, 0.5)
    assert log.epoch_means() == [2.0, 0.5]
    log.to_csv(tmp_path / "logs" / "train.csv")
    lines = (tmp_path / "logs" / "train.csv").read_text().splitlines()
    assert lines[0] == "phase,epoch,iter,loss"
    assert lines[1] == "pretrain_0,0,0,9"
    assert len(lines) == 5
