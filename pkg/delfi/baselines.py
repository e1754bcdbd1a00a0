"""KNN and least-squares baselines on flattened standardized windows.

Both predict the same targets as the mixture model (raw next-hour residuals, or
histograms for KNN), so their predict methods plug straight into
forecaster.iterate_point_forecast.
"""

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist

from . import settings
from .data_model import DelfiError, UsageError
from .dataset import HistogramDataset, PointDataset

_logger = logging.getLogger(__name__)

LINEAR_RIDGE = 1e-8
QUERY_CHUNK = 256


class LinearFitError(DelfiError):
    pass


def _flat(windows: np.ndarray) -> np.ndarray:
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim == 2:
        windows = windows[None]
    return windows.reshape(len(windows), -1)


def _clamp_k(k: int, n_train: int) -> int:
    if k < 1:
        raise UsageError(f"k must be at least 1, got {k}")
    if n_train == 0:
        raise UsageError("KNN needs a non-empty training set")
    if k > n_train:
        _logger.warning(f"k={k} exceeds the {n_train} training examples; using k={n_train}")
        return n_train
    return k


def nearest_neighbors(train_flat: np.ndarray, queries_flat: np.ndarray, k: int) -> np.ndarray:
    """Indices (Q, k) of the k nearest training rows, ordered by (distance, index)."""
    n = len(train_flat)
    out = np.empty((len(queries_flat), k), dtype=np.int64)
    for start in range(0, len(queries_flat), QUERY_CHUNK):
        d = cdist(queries_flat[start : start + QUERY_CHUNK], train_flat, "sqeuclidean")
        if k < n:
            chosen = np.argpartition(d, k - 1, axis=1)[:, :k]
            kth = np.take_along_axis(d, chosen, axis=1).max(axis=1)
            # a tie at the k-th distance must resolve to the lowest indices
            tied = np.flatnonzero((d <= kth[:, None]).sum(axis=1) > k)
            for row in tied:
                chosen[row] = np.argsort(d[row], kind="stable")[:k]
        else:
            chosen = np.broadcast_to(np.arange(n), (len(d), n)).copy()
        chosen = np.sort(chosen, axis=1)
        order = np.argsort(np.take_along_axis(d, chosen, axis=1), axis=1, kind="stable")
        out[start : start + len(d)] = np.take_along_axis(chosen, order, axis=1)
    return out


class KnnBaseline:
    """Mean target of the k nearest training windows under Euclidean distance."""

    def __init__(self, k: int = settings.DELFI_KNN_K):
        self.k = k
        self._flat: np.ndarray | None = None
        self._targets: np.ndarray | None = None

    def fit(self, train: PointDataset | HistogramDataset) -> "KnnBaseline":
        self._flat = train.flat_windows()
        self._targets = train.residuals if isinstance(train, PointDataset) else train.targets
        self.k = _clamp_k(self.k, len(self._flat))
        _logger.info(f"KNN fitted on {len(self._flat)} examples with k={self.k}")
        return self

    def _neighbor_mean(self, windows: np.ndarray) -> np.ndarray:
        if self._flat is None:
            raise UsageError("KnnBaseline has not been fitted")
        idx = nearest_neighbors(self._flat, _flat(windows), self.k)
        return np.mean(self._targets[idx], axis=1)

    def predict(self, windows: np.ndarray) -> np.ndarray:
        return self._neighbor_mean(windows)

    def predict_histogram(self, windows: np.ndarray) -> np.ndarray:
        return self._neighbor_mean(windows)


def knn_predict_point(train: PointDataset, query: np.ndarray, k: int = settings.DELFI_KNN_K) -> np.ndarray | float:
    predictions = KnnBaseline(k).fit(train).predict(query)
    return float(predictions[0]) if np.ndim(query) == 2 else predictions


def knn_predict_histogram(train: HistogramDataset, query: np.ndarray, k: int = settings.DELFI_KNN_K) -> np.ndarray:
    predictions = KnnBaseline(k).fit(train).predict_histogram(query)
    return predictions[0] if np.ndim(query) == 2 else predictions


@dataclass(frozen=True)
class LinearModel:
    """Coefficients over the flattened window followed by the intercept."""

    coef: np.ndarray

    def predict(self, windows: np.ndarray) -> np.ndarray:
        return _flat(windows) @ self.coef[:-1] + self.coef[-1]


def design_matrix(windows: np.ndarray) -> np.ndarray:
    flat = _flat(windows)
    return np.column_stack([flat, np.ones(len(flat))])


def linear_fit(train: PointDataset, ridge: float = LINEAR_RIDGE) -> LinearModel:
    """Solves (X'X + ridge*I) w = X'y over flattened windows plus an intercept column."""
    if len(train) == 0:
        raise LinearFitError("Cannot fit a linear model on an empty dataset")
    X = design_matrix(train.windows)
    y = np.asarray(train.residuals, dtype=np.float64)
    gram = X.T @ X + ridge * np.eye(X.shape[1])
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", linalg.LinAlgWarning)
            coef = linalg.solve(gram, X.T @ y, assume_a="pos")
    except (linalg.LinAlgError, linalg.LinAlgWarning) as e:
        raise LinearFitError(f"Normal equations are singular even with ridge {ridge}: {e}") from e
    if not np.all(np.isfinite(coef)):
        raise LinearFitError("Linear fit produced non-finite coefficients")
    _logger.info(f"Linear baseline fitted on {len(train)} examples")
    return LinearModel(coef)


def linear_predict(model: LinearModel, window: np.ndarray) -> np.ndarray | float:
    predictions = model.predict(window)
    return float(predictions[0]) if np.ndim(window) == 2 else predictions


class LinearBaseline:
    def __init__(self, ridge: float = LINEAR_RIDGE):
        self.ridge = ridge
        self.model: LinearModel | None = None

    def fit(self, train: PointDataset) -> "LinearBaseline":
        self.model = linear_fit(train, self.ridge)
        return self

    def predict(self, windows: np.ndarray) -> np.ndarray:
        if self.model is None:
            raise UsageError("LinearBaseline has not been fitted")
        return self.model.predict(windows)
