"""On-disk cache of built datasets, keyed by the featurized input and the dataset kind."""

import hashlib
import logging
from dataclasses import fields
from pathlib import Path

import numpy as np

from .dataset import SPLITS, HistogramDataset, PointDataset
from .storage import delete_artifact, has_artifact, load_arrays, store_arrays

_logger = logging.getLogger(__name__)

CACHE_VERSION = 1


def dataset_key(features_path: str | Path, kind: str, horizon: int | None = None) -> str:
    """Key derived from the features file content, the kind ("point"/"histogram") and s."""
    digest = hashlib.sha256(Path(features_path).read_bytes()).hexdigest()[:16]
    suffix = f"s{horizon}" if horizon is not None else "all"
    return f"{kind}:{suffix}:{digest}"


def _entry_path(root: str | Path, key: str) -> Path:
    return Path(root) / (key.replace(":", "_") + ".bin")


def exists_dataset(root: str | Path, key: str) -> bool:
    """Check if a dataset is cached under key."""
    return has_artifact(_entry_path(root, key))


def store_dataset(root: str | Path, key: str, dataset: PointDataset | HistogramDataset):
    """Cache dataset under key."""
    station_table = sorted(set(dataset.station_ids))
    codes = {sid: i for i, sid in enumerate(station_table)}
    arrays: dict[str, np.ndarray] = {
        "station_codes": np.array([codes[s] for s in dataset.station_ids], dtype=np.int64),
        "split_codes": np.array([SPLITS.index(s) for s in dataset.split], dtype=np.int64),
    }
    for f in fields(dataset):
        if f.name not in ("station_ids", "split", "horizon"):
            arrays[f.name] = getattr(dataset, f.name)
    header = {
        "cache_version": CACHE_VERSION,
        "kind": "histogram" if isinstance(dataset, HistogramDataset) else "point",
        "horizon": getattr(dataset, "horizon", None),
        "stations": station_table,
        "key": key,
    }
    store_arrays(_entry_path(root, key), header, arrays)


def load_dataset(root: str | Path, key: str) -> PointDataset | HistogramDataset:
    """Load a cached dataset; raises NoArtifactFound on a miss."""
    header, arrays = load_arrays(_entry_path(root, key))
    stations = np.array(header["stations"], dtype=object)
    station_codes = arrays.pop("station_codes")
    split_codes = arrays.pop("split_codes")
    columns = {
        "station_ids": stations[station_codes] if len(stations) else np.empty(0, dtype=object),
        "split": np.array(SPLITS, dtype=object)[split_codes],
        **arrays,
    }
    if header["kind"] == "histogram":
        return HistogramDataset(**columns, horizon=header["horizon"])
    return PointDataset(**columns)


def delete_dataset(root: str | Path, key: str):
    """Delete a cached dataset."""
    delete_artifact(_entry_path(root, key))
