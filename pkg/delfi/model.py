"""The three-component stacked-LSTM mixture with a dense attention aggregator.

Short-term variant: each component's dense head reads the final top-layer hidden state
and predicts a (scaled) residual; the aggregator's softmax weights mix the three.
Long-term variant: the attention weights scale each component's top-layer hidden
sequence; the concatenation goes through a dense layer and a softmax over the bins.

Parameters live in one flat dict. The component group is every ``comp{k}.*`` entry;
the aggregator group is ``agg.*`` plus ``long_head.*``.
"""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import settings
from .data_model import DEFAULT_BINS, FEATURES, WINDOW_HOURS, UsageError
from .neural import (
    LstmCache,
    NonFiniteError,
    Params,
    ShapeError,
    dense_backward,
    dense_forward,
    init_dense_params,
    init_lstm_params,
    kl_loss,
    lstm_backward,
    lstm_forward,
    mse_loss,
    softmax,
    softmax_backward,
)
from .storage import load_arrays, store_arrays

_logger = logging.getLogger(__name__)

SHORT = "short"
LONG = "long"
VARIANTS = (SHORT, LONG)
COMPONENTS = "components"
AGGREGATOR = "aggregator"


@dataclass(frozen=True)
class ModelConfig:
    hidden_size: int = settings.DELFI_HIDDEN_SIZE
    num_layers: int = settings.DELFI_NUM_LAYERS
    window: int = WINDOW_HOURS
    n_features: int = len(FEATURES)
    n_components: int = 3
    n_bins: int = DEFAULT_BINS.n_bins

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 1:
                raise UsageError(f"ModelConfig.{name} must be at least 1, got {value}")


@dataclass
class MixtureModel:
    variant: str
    config: ModelConfig
    params: Params
    horizon: int | None = None
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise UsageError(f"Unknown model variant {self.variant!r}")
        if self.variant == LONG and self.horizon is None:
            raise UsageError("Long-term models need a horizon")

    def component_keys(self, k: int) -> list[str]:
        return [key for key in self.params if key.startswith(f"comp{k}.")]

    def group_keys(self, group: str) -> list[str]:
        if group == COMPONENTS:
            return [key for key in self.params if key.startswith("comp")]
        if group == AGGREGATOR:
            return [key for key in self.params if key.startswith(("agg.", "long_head."))]
        raise UsageError(f"Unknown parameter group {group!r}")

    def copy(self) -> "MixtureModel":
        return MixtureModel(
            self.variant,
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            self.horizon,
            dict(self.metadata),
        )


def init_model(
    variant: str,
    config: ModelConfig | None = None,
    seed: int = settings.DELFI_SEED,
    horizon: int | None = None,
    metadata: dict[str, Any] | None = None,
) -> MixtureModel:
    """Uniform(+-1/sqrt(fan)) weights, zero biases, forget-gate bias 1, from a seeded generator."""
    config = config or ModelConfig()
    rng = np.random.default_rng(seed)
    H = config.hidden_size
    params: Params = {}
    for k in range(config.n_components):
        for layer in range(config.num_layers):
            input_size = config.n_features if layer == 0 else H
            for name, value in init_lstm_params(input_size, H, rng).items():
                params[f"comp{k}.lstm{layer}.{name}"] = value
        if variant == SHORT:
            for name, value in init_dense_params(H, 1, rng).items():
                params[f"comp{k}.head.{name}"] = value
    for name, value in init_dense_params(config.window * config.n_features, config.n_components, rng).items():
        params[f"agg.{name}"] = value
    if variant == LONG:
        fan_in = config.n_components * config.window * H
        for name, value in init_dense_params(fan_in, config.n_bins, rng).items():
            params[f"long_head.{name}"] = value
    return MixtureModel(variant, config, params, horizon, dict(metadata or {}))


def zero_output_heads(model: MixtureModel) -> MixtureModel:
    """Zeroes the residual heads (short) or the histogram head (long), in place."""
    prefixes = ("long_head.",) if model.variant == LONG else tuple(
        f"comp{k}.head." for k in range(model.config.n_components)
    )
    for key in model.params:
        if key.startswith(prefixes):
            model.params[key][...] = 0.0
    return model


def permute_components(model: MixtureModel, perm: list[int]) -> MixtureModel:
    """New model whose component k is the old component perm[k], with aggregator rows moved along."""
    n = model.config.n_components
    if sorted(perm) != list(range(n)):
        raise UsageError(f"Not a permutation of {n} components: {perm}")
    params: Params = {}
    for k, src in enumerate(perm):
        for key in model.component_keys(src):
            params[f"comp{k}." + key.split(".", 1)[1]] = model.params[key].copy()
    params["agg.W"] = model.params["agg.W"][:, perm].copy()
    params["agg.b"] = model.params["agg.b"][perm].copy()
    if model.variant == LONG:
        block = model.config.window * model.config.hidden_size
        rows = np.concatenate([np.arange(src * block, (src + 1) * block) for src in perm])
        params["long_head.W"] = model.params["long_head.W"][rows].copy()
        params["long_head.b"] = model.params["long_head.b"].copy()
    return MixtureModel(model.variant, model.config, params, model.horizon, dict(model.metadata))


# Forward / backward


@dataclass
class ForwardCache:
    flat: np.ndarray
    attention: np.ndarray
    overridden: bool
    layer_caches: list[list[LstmCache]]
    top_hseq: list[np.ndarray]
    component_out: np.ndarray | None = None
    concat: np.ndarray | None = None
    probs: np.ndarray | None = None


def _check_windows(model: MixtureModel, windows: np.ndarray) -> np.ndarray:
    expected = (model.config.window, model.config.n_features)
    if windows.ndim != 3 or windows.shape[1:] != expected:
        raise ShapeError(f"Expected windows of shape (B, {expected[0]}, {expected[1]}), got {windows.shape}")
    return np.asarray(windows, dtype=np.float64)


def _layer(model: MixtureModel, k: int, layer: int) -> dict[str, np.ndarray]:
    prefix = f"comp{k}.lstm{layer}."
    return {name: model.params[prefix + name] for name in ("W", "U", "b")}


def _dense(model: MixtureModel, prefix: str) -> dict[str, np.ndarray]:
    return {"W": model.params[prefix + "W"], "b": model.params[prefix + "b"]}


def attention_weights(model: MixtureModel, windows: np.ndarray) -> np.ndarray:
    windows = _check_windows(model, windows)
    return softmax(dense_forward(_dense(model, "agg."), windows.reshape(len(windows), -1)))


def _forward(
    model: MixtureModel, windows: np.ndarray, attention_override: np.ndarray | None = None
) -> tuple[np.ndarray, ForwardCache]:
    windows = _check_windows(model, windows)
    B = len(windows)
    flat = windows.reshape(B, -1)
    if attention_override is None:
        attention = softmax(dense_forward(_dense(model, "agg."), flat))
    else:
        attention = np.broadcast_to(np.asarray(attention_override, dtype=np.float64), (B, model.config.n_components)).copy()

    layer_caches, top_hseq = [], []
    for k in range(model.config.n_components):
        seq, caches = windows, []
        for layer in range(model.config.num_layers):
            seq, _, _, cache = lstm_forward(_layer(model, k, layer), seq)
            caches.append(cache)
        layer_caches.append(caches)
        top_hseq.append(seq)

    cache = ForwardCache(flat, attention, attention_override is not None, layer_caches, top_hseq)
    if model.variant == SHORT:
        cache.component_out = np.column_stack(
            [dense_forward(_dense(model, f"comp{k}.head."), top_hseq[k][:, -1])[:, 0] for k in range(len(top_hseq))]
        )
        output = np.sum(attention * cache.component_out, axis=1)
    else:
        cache.concat = np.concatenate(
            [(attention[:, k, None, None] * top_hseq[k]).reshape(B, -1) for k in range(len(top_hseq))], axis=1
        )
        cache.probs = softmax(dense_forward(_dense(model, "long_head."), cache.concat))
        output = cache.probs

    if not np.all(np.isfinite(output)):
        raise NonFiniteError(f"Non-finite {model.variant}-term model output")
    return output, cache


def forward_short(model: MixtureModel, windows: np.ndarray, attention_override=None) -> np.ndarray | float:
    """Predicted scaled residual(s); a single (6, 9) window gives a float."""
    if model.variant != SHORT:
        raise UsageError("forward_short needs a short-term model")
    single = np.ndim(windows) == 2
    output, _ = _forward(model, windows[None] if single else windows, attention_override)
    return float(output[0]) if single else output


def forward_long(model: MixtureModel, windows: np.ndarray, attention_override=None) -> np.ndarray:
    """Predicted histogram(s) over the bins; a single window gives one row."""
    if model.variant != LONG:
        raise UsageError("forward_long needs a long-term model")
    single = np.ndim(windows) == 2
    output, _ = _forward(model, windows[None] if single else windows, attention_override)
    return output[0] if single else output


def backward(model: MixtureModel, cache: ForwardCache, doutput: np.ndarray) -> Params:
    """Gradients for every parameter given d(loss)/d(output) of the cached forward pass."""
    B = len(cache.flat)
    H = model.config.hidden_size
    grads: Params = {key: np.zeros_like(value) for key, value in model.params.items()}
    dhseq_top: list[np.ndarray] = []

    if model.variant == SHORT:
        if doutput.shape != (B,):
            raise ShapeError(f"Short-term upstream gradient must be ({B},), got {doutput.shape}")
        dattention = doutput[:, None] * cache.component_out
        for k, hseq in enumerate(cache.top_hseq):
            dy = (doutput * cache.attention[:, k])[:, None]
            head = _dense(model, f"comp{k}.head.")
            head_grads, dh_last = dense_backward(head, hseq[:, -1], dy)
            grads[f"comp{k}.head.W"] += head_grads["W"]
            grads[f"comp{k}.head.b"] += head_grads["b"]
            dhseq = np.zeros_like(hseq)
            dhseq[:, -1] = dh_last
            dhseq_top.append(dhseq)
    else:
        if doutput.shape != cache.probs.shape:
            raise ShapeError(f"Long-term upstream gradient must be {cache.probs.shape}, got {doutput.shape}")
        dlogits = softmax_backward(cache.probs, doutput)
        head_grads, dconcat = dense_backward(_dense(model, "long_head."), cache.concat, dlogits)
        grads["long_head.W"] += head_grads["W"]
        grads["long_head.b"] += head_grads["b"]
        T = model.config.window
        dconcat = dconcat.reshape(B, model.config.n_components, T, H)
        dattention = np.empty_like(cache.attention)
        for k, hseq in enumerate(cache.top_hseq):
            dattention[:, k] = np.sum(dconcat[:, k] * hseq, axis=(1, 2))
            dhseq_top.append(cache.attention[:, k, None, None] * dconcat[:, k])

    for k, dhseq in enumerate(dhseq_top):
        for layer in reversed(range(model.config.num_layers)):
            layer_grads, dhseq, _, _ = lstm_backward(cache.layer_caches[k][layer], dhseq)
            for name, value in layer_grads.items():
                grads[f"comp{k}.lstm{layer}.{name}"] += value

    if not cache.overridden:
        dlogits = softmax_backward(cache.attention, dattention)
        agg_grads, _ = dense_backward(_dense(model, "agg."), cache.flat, dlogits)
        grads["agg.W"] += agg_grads["W"]
        grads["agg.b"] += agg_grads["b"]
    return grads


def loss_and_grad(
    model: MixtureModel,
    windows: np.ndarray,
    targets: np.ndarray,
    attention_override: np.ndarray | None = None,
) -> tuple[float, Params]:
    """MSE on scaled residuals (short) or smoothed KL(target || predicted) (long)."""
    output, cache = _forward(model, windows, attention_override)
    if model.variant == SHORT:
        loss, doutput = mse_loss(output, np.asarray(targets, dtype=np.float64))
    else:
        loss, doutput = kl_loss(np.asarray(targets, dtype=np.float64), output)
    return loss, backward(model, cache, doutput)


def batch_loss(
    model: MixtureModel, windows: np.ndarray, targets: np.ndarray, attention_override: np.ndarray | None = None
) -> float:
    output, _ = _forward(model, windows, attention_override)
    if model.variant == SHORT:
        return mse_loss(output, np.asarray(targets, dtype=np.float64))[0]
    return kl_loss(np.asarray(targets, dtype=np.float64), output)[0]


# Serialization


def save_model(path: str | Path, model: MixtureModel, extra_arrays: dict[str, np.ndarray] | None = None, extra_header: dict[str, Any] | None = None):
    header = {
        "kind": "model",
        "variant": model.variant,
        "horizon": model.horizon,
        "config": asdict(model.config),
        "metadata": model.metadata,
        "param_order": list(model.params),
        **(extra_header or {}),
    }
    store_arrays(path, header, {**model.params, **(extra_arrays or {})})
    _logger.info(f"Saved {model.variant}-term model to {path}")


def load_model(path: str | Path) -> MixtureModel:
    header, arrays = load_arrays(path)
    if header.get("kind") != "model":
        raise UsageError(f"{path} is not a model file")
    params = {key: arrays[key] for key in header["param_order"]}
    return MixtureModel(
        header["variant"], ModelConfig(**header["config"]), params, header["horizon"], header["metadata"]
    )
