"""Differentiable building blocks: LSTM with BPTT, dense layers, softmax, losses, Adam and a gradient checker.

All arrays are float64. Sequences are batch-first (B, T, D). LSTM gate blocks are laid
out along the last axis in the order input, forget, cell, output.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np
from scipy.special import expit, softmax as _softmax

from .data_model import DelfiError

_logger = logging.getLogger(__name__)

ADAM_LR = 0.005
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8
KL_SMOOTHING = 1e-6
GRAD_CHECK_STEP = 1e-5
GRAD_CHECK_TOLERANCE = 1e-4
GRAD_CHECK_FLOOR = 1e-6

Params = dict[str, np.ndarray]


class NonFiniteError(DelfiError):
    pass


class ShapeError(DelfiError):
    pass


def check_finite(name: str, *arrays: np.ndarray):
    for array in arrays:
        if not np.all(np.isfinite(array)):
            raise NonFiniteError(f"Non-finite values in {name}")


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def softmax(logits: np.ndarray) -> np.ndarray:
    return _softmax(logits, axis=-1)


def softmax_backward(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. logits given the gradient w.r.t. softmax outputs."""
    return probs * (dprobs - np.sum(probs * dprobs, axis=-1, keepdims=True))


# Initialization


def init_lstm_params(input_size: int, hidden_size: int, rng: np.random.Generator) -> Params:
    bound = 1.0 / np.sqrt(hidden_size)
    b = np.zeros(4 * hidden_size)
    b[hidden_size : 2 * hidden_size] = 1.0  # forget gate
    return {
        "W": rng.uniform(-bound, bound, size=(input_size, 4 * hidden_size)),
        "U": rng.uniform(-bound, bound, size=(hidden_size, 4 * hidden_size)),
        "b": b,
    }


def init_dense_params(fan_in: int, fan_out: int, rng: np.random.Generator) -> Params:
    bound = 1.0 / np.sqrt(fan_in)
    return {
        "W": rng.uniform(-bound, bound, size=(fan_in, fan_out)),
        "b": np.zeros(fan_out),
    }


# LSTM


@dataclass
class LstmCache:
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    gates: np.ndarray
    tanh_c: np.ndarray
    W: np.ndarray
    U: np.ndarray


def _lstm_shapes(params: Mapping[str, np.ndarray]) -> tuple[int, int]:
    W, U, b = params["W"], params["U"], params["b"]
    hidden_size = U.shape[0]
    if (
        W.ndim != 2
        or U.shape != (hidden_size, 4 * hidden_size)
        or W.shape[1] != 4 * hidden_size
        or b.shape != (4 * hidden_size,)
    ):
        raise ShapeError(f"Inconsistent LSTM params W{W.shape} U{U.shape} b{b.shape}")
    return W.shape[0], hidden_size


def lstm_forward(
    params: Mapping[str, np.ndarray],
    x: np.ndarray,
    h0: np.ndarray | None = None,
    c0: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, LstmCache]:
    """Runs the recurrence over x (B, T, D); returns (hidden sequence, h_T, c_T, cache)."""
    input_size, H = _lstm_shapes(params)
    if x.ndim != 3 or x.shape[2] != input_size or x.shape[1] < 1:
        raise ShapeError(f"LSTM expects (B, T>=1, {input_size}) input, got {x.shape}")
    B, T, _ = x.shape
    W, U, b = params["W"], params["U"], params["b"]

    h = np.zeros((B, H)) if h0 is None else h0
    c = np.zeros((B, H)) if c0 is None else c0
    if h.shape != (B, H) or c.shape != (B, H):
        raise ShapeError(f"Initial state must be ({B}, {H})")

    hseq = np.empty((B, T, H))
    h_prev = np.empty((B, T, H))
    c_prev = np.empty((B, T, H))
    gates = np.empty((B, T, 4 * H))
    tanh_c = np.empty((B, T, H))

    x_proj = x @ W + b
    for t in range(T):
        h_prev[:, t] = h
        c_prev[:, t] = c
        z = x_proj[:, t] + h @ U
        gates[:, t, : 2 * H] = sigmoid(z[:, : 2 * H])
        gates[:, t, 2 * H : 3 * H] = np.tanh(z[:, 2 * H : 3 * H])
        gates[:, t, 3 * H :] = sigmoid(z[:, 3 * H :])
        i = gates[:, t, :H]
        f = gates[:, t, H : 2 * H]
        g = gates[:, t, 2 * H : 3 * H]
        o = gates[:, t, 3 * H :]
        c = f * c + i * g
        tanh_c[:, t] = np.tanh(c)
        h = o * tanh_c[:, t]
        hseq[:, t] = h

    check_finite("lstm_forward", hseq, c)
    cache = LstmCache(x=x, h_prev=h_prev, c_prev=c_prev, gates=gates, tanh_c=tanh_c, W=W, U=U)
    return hseq, h, c, cache


def lstm_backward(
    cache: LstmCache,
    dhseq: np.ndarray,
    dh_last: np.ndarray | None = None,
    dc_last: np.ndarray | None = None,
) -> tuple[Params, np.ndarray, np.ndarray, np.ndarray]:
    """Exact BPTT; returns (param grads, dx, dh0, dc0)."""
    B, T, H = cache.h_prev.shape
    if dhseq.shape != (B, T, H):
        raise ShapeError(f"Upstream gradient must be {(B, T, H)}, got {dhseq.shape}")

    dW = np.zeros_like(cache.W)
    dU = np.zeros_like(cache.U)
    db = np.zeros(4 * H)
    dx = np.empty_like(cache.x)
    dh_next = np.zeros((B, H)) if dh_last is None else dh_last.copy()
    dc_next = np.zeros((B, H)) if dc_last is None else dc_last.copy()
    dz = np.empty((B, 4 * H))

    for t in reversed(range(T)):
        i = cache.gates[:, t, :H]
        f = cache.gates[:, t, H : 2 * H]
        g = cache.gates[:, t, 2 * H : 3 * H]
        o = cache.gates[:, t, 3 * H :]
        tc = cache.tanh_c[:, t]

        dh = dhseq[:, t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc**2)
        dz[:, :H] = dc * g * i * (1.0 - i)
        dz[:, H : 2 * H] = dc * cache.c_prev[:, t] * f * (1.0 - f)
        dz[:, 2 * H : 3 * H] = dc * i * (1.0 - g**2)
        dz[:, 3 * H :] = dh * tc * o * (1.0 - o)

        dW += cache.x[:, t].T @ dz
        dU += cache.h_prev[:, t].T @ dz
        db += dz.sum(axis=0)
        dx[:, t] = dz @ cache.W.T
        dh_next = dz @ cache.U.T
        dc_next = dc * f

    return {"W": dW, "U": dU, "b": db}, dx, dh_next, dc_next


# Dense


def dense_forward(params: Mapping[str, np.ndarray], x: np.ndarray) -> np.ndarray:
    W, b = params["W"], params["b"]
    if x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(f"Dense layer W{W.shape} b{b.shape} cannot take input {x.shape}")
    y = x @ W + b
    check_finite("dense_forward", y)
    return y


def dense_backward(
    params: Mapping[str, np.ndarray], x: np.ndarray, dy: np.ndarray
) -> tuple[Params, np.ndarray]:
    return {"W": x.T @ dy, "b": dy.sum(axis=0)}, dy @ params["W"].T


# Losses


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shapes differ: {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def smooth_histogram(p: np.ndarray, eps: float = KL_SMOOTHING) -> np.ndarray:
    """Adds eps to every bin and renormalizes along the last axis."""
    shifted = np.asarray(p, dtype=np.float64) + eps
    return shifted / shifted.sum(axis=-1, keepdims=True)


def kl_divergence(target: np.ndarray, pred: np.ndarray, eps: float = KL_SMOOTHING) -> np.ndarray:
    """Row-wise smoothed KL(target || pred)."""
    t = smooth_histogram(target, eps)
    p = smooth_histogram(pred, eps)
    return np.sum(t * (np.log(t) - np.log(p)), axis=-1)


def kl_loss(
    target: np.ndarray, pred: np.ndarray, eps: float = KL_SMOOTHING
) -> tuple[float, np.ndarray]:
    """Mean smoothed KL(target || pred) over rows and its gradient w.r.t. pred."""
    if pred.shape != target.shape:
        raise ShapeError(f"kl_loss shapes differ: {pred.shape} vs {target.shape}")
    t = smooth_histogram(target, eps)
    shifted = pred + eps
    total = shifted.sum(axis=-1, keepdims=True)
    p = shifted / total
    rows = 1 if pred.ndim == 1 else pred.shape[0]
    loss = float(np.sum(t * (np.log(t) - np.log(p)))) / rows
    dp = -t / p / rows
    dpred = (dp - np.sum(dp * p, axis=-1, keepdims=True)) / total
    return loss, dpred


# Optimizer


@dataclass
class AdamState:
    """Moments for a subset of a parameter dict; the step counter advances once per update."""

    keys: tuple[str, ...]
    m: Params
    v: Params
    step: int = 0
    lr: float = ADAM_LR
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    epsilon: float = ADAM_EPSILON

    @classmethod
    def zeros(
        cls, params: Mapping[str, np.ndarray], keys: Iterable[str] | None = None, lr: float = ADAM_LR
    ) -> "AdamState":
        keys = tuple(params) if keys is None else tuple(keys)
        return cls(
            keys=keys,
            m={k: np.zeros_like(params[k]) for k in keys},
            v={k: np.zeros_like(params[k]) for k in keys},
            lr=lr,
        )


def adam_step(params: Params, grads: Mapping[str, np.ndarray], state: AdamState) -> tuple[Params, AdamState]:
    """Bias-corrected Adam update of params[k] for every k in state.keys, in place."""
    for k in state.keys:
        if grads[k].shape != params[k].shape or state.m[k].shape != params[k].shape:
            raise ShapeError(f"Adam shape mismatch for {k}")

    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for k in state.keys:
        g = grads[k]
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[k] / bc1
        v_hat = state.v[k] / bc2
        params[k] -= state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return params, state


def clip_by_global_norm(grads: Params, keys: Iterable[str], max_norm: float) -> float:
    """Rescales grads[k] for k in keys so their joint L2 norm is at most max_norm; returns the norm."""
    keys = tuple(keys)
    norm = float(np.sqrt(sum(float(np.sum(grads[k] ** 2)) for k in keys)))
    if norm > max_norm:
        scale = max_norm / norm
        for k in keys:
            grads[k] = grads[k] * scale
    return norm


# Gradient checking


@dataclass
class GradCheckReport:
    block_errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = GRAD_CHECK_TOLERANCE

    @property
    def max_error(self) -> float:
        return max(self.block_errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def lines(self) -> list[str]:
        return [f"{name}: {err:.3e}" for name, err in self.block_errors.items()]


def grad_check(
    loss_fn: Callable[[Params], float],
    params: Params,
    analytic: Mapping[str, np.ndarray],
    step: float = GRAD_CHECK_STEP,
    tolerance: float = GRAD_CHECK_TOLERANCE,
    keys: Iterable[str] | None = None,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compares analytic gradients against central differences of loss_fn.

    Relative error per entry is |a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR). With max_entries
    set, a seeded random subset of each block is checked. params is restored on return.
    """
    rng = rng or np.random.default_rng(0)
    report = GradCheckReport(tolerance=tolerance)
    for k in keys or params:
        block = params[k] = np.ascontiguousarray(params[k])
        flat = block.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            indices = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        for idx in indices:
            original = flat[idx]
            flat[idx] = original + step
            plus = loss_fn(params)
            flat[idx] = original - step
            minus = loss_fn(params)
            flat[idx] = original
            numeric = (plus - minus) / (2.0 * step)
            a = analytic[k].reshape(-1)[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), GRAD_CHECK_FLOOR)
            worst = max(worst, err)
        report.block_errors[k] = worst
    _logger.info(f"Gradient check max relative error {report.max_error:.3e} over {len(report.block_errors)} blocks")
    return report
