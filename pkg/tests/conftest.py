import numpy as np
import pytest

from delfi.data_model import FEATURES
from delfi.ingest import Standardizer, featurize, records_to_frame
from delfi.model import ModelConfig
from delfi.synth import generate


def make_features(n_stations=4, n_hours=300, seed=0, use_nef=True):
    stations, records = generate(n_stations, n_hours, seed)
    frames = {sid: records_to_frame(recs) for sid, recs in records.items()}
    return featurize(frames, stations, use_nef=use_nef)


@pytest.fixture(scope="session")
def small_features():
    """Four synthetic stations over 300 hours, featurized."""
    return make_features()


@pytest.fixture
def unit_standardizer():
    return Standardizer(FEATURES, np.zeros(len(FEATURES)), np.ones(len(FEATURES)))


@pytest.fixture
def tiny_config():
    return ModelConfig(hidden_size=4, num_layers=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
