"""Deterministic float64 kernel: forward ops, their analytic backward passes and a
finite-difference gradient checker.

Every forward op is a pure function of its inputs. Its ``*_backward`` counterpart takes
the upstream gradient plus whatever the forward needed and returns input gradients.
There is no tape: composite modules call backward functions in reverse order themselves.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field
from typing import Final, Literal

import numpy as np
import numpy.typing as npt
from numpy.lib.stride_tricks import sliding_window_view

from .const import BN_EPSILON, BN_MOMENTUM, GRAD_CHECK_STEP
from .exceptions import DegenerateBatchError, DimensionError, GradCheckError

logger: Final[logging.Logger] = logging.getLogger(name=__name__)

Array = npt.NDArray[np.float64]
Mask = npt.NDArray[np.bool_]


def as_tensor(values: npt.ArrayLike) -> Array:
    array = np.array(values, dtype=np.float64)
    if array.ndim > 3:
        raise DimensionError(f"Tensors have at most 3 axes, got shape {array.shape}")
    return array


@dataclass(slots=True, eq=False)
class Parameter:
    name: str
    value: Array
    grad: Array = field(init=False)

    def __post_init__(self) -> None:
        self.value = np.array(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def accumulate(self, grad: Array) -> None:
        if grad.shape != self.value.shape:
            raise DimensionError(
                f"Gradient shape {grad.shape} does not match {self.name} {self.value.shape}"
            )
        self.grad += grad


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Array:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def zero_grads(params: Iterable[Parameter]) -> None:
    for param in params:
        param.zero_grad()


# Convolution and pooling. Layout is [B, C, T]; stride is 1 for convolution.


def _check_rank3(x: Array, name: str) -> None:
    if x.ndim != 3:
        raise DimensionError(f"{name} must be [B, C, T], got shape {x.shape}")


def conv1d(x: Array, w: Array, b: Array, padding: int = 0) -> Array:
    """Cross-correlation (no kernel flip) with zero padding and stride 1."""
    _check_rank3(x, "conv1d input")
    c_out, c_in, kernel = w.shape
    if x.shape[1] != c_in:
        raise DimensionError(f"conv1d expects {c_in} input channels, got {x.shape[1]}")
    if kernel < 1 or padding < 0 or x.shape[2] + 2 * padding < kernel:
        raise DimensionError(
            f"conv1d kernel {kernel} with padding {padding} does not fit length {x.shape[2]}"
        )
    padded = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
    windows = sliding_window_view(padded, kernel, axis=2)  # [B, Cin, T', K]
    out = np.tensordot(windows, w, axes=([1, 3], [1, 2]))  # [B, T', Cout]
    return np.ascontiguousarray(out.transpose(0, 2, 1)) + b[None, :, None]


def conv1d_backward(
    grad_out: Array, x: Array, w: Array, padding: int = 0
) -> tuple[Array, Array, Array]:
    kernel = w.shape[2]
    length = x.shape[2]
    out_length = grad_out.shape[2]
    padded = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
    windows = sliding_window_view(padded, kernel, axis=2)
    grad_w = np.tensordot(grad_out, windows, axes=([0, 2], [0, 2]))  # [Cout, Cin, K]
    grad_b = grad_out.sum(axis=(0, 2))
    grad_padded = np.zeros_like(padded)
    for k in range(kernel):
        grad_padded[:, :, k : k + out_length] += np.einsum("bot,oc->bct", grad_out, w[:, :, k])
    return grad_padded[:, :, padding : padding + length], grad_w, grad_b


def _pool_output_length(length: int, kernel: int, stride: int, padding: int) -> int:
    if kernel < 1 or stride < 1 or padding < 0:
        raise DimensionError(f"Invalid pooling: kernel={kernel} stride={stride} pad={padding}")
    if kernel > length + 2 * padding:
        raise DimensionError(
            f"Pooling kernel {kernel} exceeds padded length {length + 2 * padding}"
        )
    return (length + 2 * padding - kernel) // stride + 1


def avg_pool1d(x: Array, kernel: int, stride: int = 1, padding: int = 0) -> Array:
    """Average pooling whose divisor counts in-bounds elements only (count-exclude-pad)."""
    _check_rank3(x, "avg_pool1d input")
    out_length = _pool_output_length(x.shape[2], kernel, stride, padding)
    padded = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
    sums = sliding_window_view(padded, kernel, axis=2)[:, :, ::stride].sum(axis=3)
    return sums[:, :, :out_length] / _pool_counts(x.shape[2], kernel, stride, padding)


def _pool_counts(length: int, kernel: int, stride: int, padding: int) -> Array:
    ones = np.pad(np.ones(length), (padding, padding))
    counts = sliding_window_view(ones, kernel)[::stride].sum(axis=1)
    return counts[: _pool_output_length(length, kernel, stride, padding)]


def avg_pool1d_backward(
    grad_out: Array, input_length: int, kernel: int, stride: int = 1, padding: int = 0
) -> Array:
    counts = _pool_counts(input_length, kernel, stride, padding)
    scaled = grad_out / counts
    batch, channels, out_length = grad_out.shape
    grad_padded = np.zeros((batch, channels, input_length + 2 * padding))
    span = stride * (out_length - 1) + 1
    for k in range(kernel):
        grad_padded[:, :, k : k + span : stride] += scaled
    return grad_padded[:, :, padding : padding + input_length]


def max_pool1d(
    x: Array, kernel: int, stride: int = 1, padding: int = 0
) -> tuple[Array, npt.NDArray[np.intp]]:
    """Max pooling with a -inf padding sentinel. Returns the output and argmax positions
    (indices into the unpadded input) needed by the backward pass."""
    _check_rank3(x, "max_pool1d input")
    if padding > kernel // 2:
        raise DimensionError(f"max_pool1d padding {padding} exceeds half kernel {kernel}")
    out_length = _pool_output_length(x.shape[2], kernel, stride, padding)
    padded = np.pad(x, ((0, 0), (0, 0), (padding, padding)), constant_values=-np.inf)
    windows = sliding_window_view(padded, kernel, axis=2)[:, :, ::stride][:, :, :out_length]
    offsets = windows.argmax(axis=3)
    out = np.take_along_axis(windows, offsets[..., None], axis=3)[..., 0]
    starts = np.arange(out_length) * stride
    return out, offsets + starts[None, None, :] - padding


def max_pool1d_backward(
    grad_out: Array, argmax: npt.NDArray[np.intp], input_length: int
) -> Array:
    batch, channels, _ = grad_out.shape
    grad = np.zeros((batch, channels, input_length))
    b_idx, c_idx, _ = np.indices(grad_out.shape)
    np.add.at(grad, (b_idx, c_idx, argmax), grad_out)
    return grad


def global_avg_pool(x: Array, mask: Mask | None = None) -> Array:
    """Mean over T -> [B, C]. With a [B, T] validity mask only valid frames count."""
    _check_rank3(x, "global_avg_pool input")
    if x.shape[2] < 1:
        raise DimensionError("global_avg_pool needs T >= 1")
    if mask is None:
        return x.mean(axis=2)
    weights = mask.astype(np.float64)
    return (x * weights[:, None, :]).sum(axis=2) / weights.sum(axis=1)[:, None]


def global_avg_pool_backward(grad_out: Array, length: int, mask: Mask | None = None) -> Array:
    if mask is None:
        return np.repeat(grad_out[:, :, None] / length, length, axis=2)
    weights = mask.astype(np.float64)
    weights /= weights.sum(axis=1, keepdims=True)
    return grad_out[:, :, None] * weights[:, None, :]


def global_max_pool(x: Array, mask: Mask | None = None) -> tuple[Array, npt.NDArray[np.intp]]:
    """Max over T -> [B, C], with the argmax frame per (b, c)."""
    _check_rank3(x, "global_max_pool input")
    masked = x if mask is None else np.where(mask[:, None, :], x, -np.inf)
    argmax = masked.argmax(axis=2)
    return np.take_along_axis(x, argmax[..., None], axis=2)[..., 0], argmax


def global_max_pool_backward(
    grad_out: Array, argmax: npt.NDArray[np.intp], length: int
) -> Array:
    grad = np.zeros((*grad_out.shape, length))
    np.put_along_axis(grad, argmax[..., None], grad_out[..., None], axis=2)
    return grad


# Dense ops


def linear(x: Array, w: Array, b: Array) -> Array:
    """Affine map along the trailing axis: x @ w.T + b."""
    if x.shape[-1] != w.shape[1]:
        raise DimensionError(f"linear expects trailing dim {w.shape[1]}, got {x.shape[-1]}")
    return x @ w.T + b


def linear_backward(grad_out: Array, x: Array, w: Array) -> tuple[Array, Array, Array]:
    flat_grad = grad_out.reshape(-1, w.shape[0])
    flat_x = x.reshape(-1, w.shape[1])
    return grad_out @ w, flat_grad.T @ flat_x, flat_grad.sum(axis=0)


def softmax(x: Array, axis: int = -1) -> Array:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for shape {x.shape}")
    shifted = np.exp(x - x.max(axis=axis, keepdims=True))
    return shifted / shifted.sum(axis=axis, keepdims=True)


def softmax_backward(grad_out: Array, out: Array, axis: int = -1) -> Array:
    return out * (grad_out - (grad_out * out).sum(axis=axis, keepdims=True))


def sigmoid(x: Array) -> Array:
    x = np.asarray(x, dtype=np.float64)
    positive = x >= 0
    exp_neg = np.exp(-np.abs(x))
    return np.where(positive, 1.0 / (1.0 + exp_neg), exp_neg / (1.0 + exp_neg))


def sigmoid_backward(grad_out: Array, out: Array) -> Array:
    return grad_out * out * (1.0 - out)


def relu(x: Array) -> Array:
    return np.maximum(x, 0.0)


def relu_backward(grad_out: Array, x: Array) -> Array:
    return grad_out * (x > 0)


# Batch normalization


@dataclass(slots=True)
class BatchNormState:
    running_mean: Array
    running_var: Array

    @classmethod
    def fresh(cls, channels: int) -> BatchNormState:
        return cls(running_mean=np.zeros(channels), running_var=np.ones(channels))


@dataclass(slots=True)
class BatchNormCache:
    mode: Literal["train", "eval"]
    centered: Array
    inv_std: Array
    normalized: Array
    weights: Array | None


def batch_norm1d(
    x: Array,
    gamma: Array,
    beta: Array,
    state: BatchNormState,
    mode: Literal["train", "eval"],
    mask: Mask | None = None,
) -> tuple[Array, BatchNormCache]:
    """Per-channel normalization over (B, T). Train mode uses batch statistics over the
    valid frames and updates ``state`` with momentum; eval mode uses ``state``."""
    _check_rank3(x, "batch_norm1d input")
    if mode == "train":
        weights = np.ones(x.shape[0::2]) if mask is None else mask.astype(np.float64)
        count = weights.sum()
        if count < 2:
            raise DegenerateBatchError(
                f"Batch norm in train mode needs at least 2 values per channel, got {count:g}"
            )
        w3 = weights[:, None, :]
        mean = (x * w3).sum(axis=(0, 2)) / count
        centered = x - mean[None, :, None]
        var = (centered**2 * w3).sum(axis=(0, 2)) / count
        state.running_mean = BN_MOMENTUM * state.running_mean + (1 - BN_MOMENTUM) * mean
        state.running_var = BN_MOMENTUM * state.running_var + (1 - BN_MOMENTUM) * var
        norm_weights: Array | None = w3 / count
    else:
        centered = x - state.running_mean[None, :, None]
        var = state.running_var
        norm_weights = None
    inv_std = 1.0 / np.sqrt(var + BN_EPSILON)
    normalized = centered * inv_std[None, :, None]
    out = normalized * gamma[None, :, None] + beta[None, :, None]
    return out, BatchNormCache(mode, centered, inv_std, normalized, norm_weights)


def batch_norm1d_backward(
    grad_out: Array, gamma: Array, cache: BatchNormCache
) -> tuple[Array, Array, Array]:
    grad_gamma = (grad_out * cache.normalized).sum(axis=(0, 2))
    grad_beta = grad_out.sum(axis=(0, 2))
    grad_norm = grad_out * gamma[None, :, None]
    inv_std = cache.inv_std[None, :, None]
    if cache.mode == "eval" or cache.weights is None:
        return grad_norm * inv_std, grad_gamma, grad_beta
    # var and mean are weighted sums over valid frames; padded frames still receive the
    # gradient of their own normalized output.
    grad_var = (grad_norm * cache.centered).sum(axis=(0, 2)) * -0.5 * cache.inv_std**3
    grad_mean = -(grad_norm * inv_std).sum(axis=(0, 2))
    grad_x = (
        grad_norm * inv_std
        + 2.0 * cache.weights * cache.centered * grad_var[None, :, None]
        + cache.weights * grad_mean[None, :, None]
    )
    return grad_x, grad_gamma, grad_beta


# Gradient checking


@dataclass(slots=True)
class GradCheckReport:
    max_relative_error: float
    per_parameter: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_relative_error <= self.tolerance


def _sample_indices(
    size: int, max_entries: int | None, rng: np.random.Generator
) -> npt.NDArray[np.intp]:
    if max_entries is None or size <= max_entries:
        return np.arange(size)
    return np.sort(rng.choice(size, size=max_entries, replace=False))


def grad_check(
    forward_backward: Callable[[], float],
    params: Sequence[Parameter],
    tolerance: float = 1e-5,
    step: float = GRAD_CHECK_STEP,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``forward_backward`` must zero the gradients of ``params``, run forward and backward
    and return the scalar loss. The error per parameter is ``|a - n| / (|a| + |n|)``
    taken over the checked entries as vectors; the report holds the maximum.
    """
    loss = forward_backward()
    if not np.isfinite(loss):
        raise GradCheckError(f"Loss is not finite ({loss}); gradient check aborted")
    analytic = {param.name: param.grad.copy() for param in params}
    rng = np.random.default_rng(seed)
    per_parameter: dict[str, float] = {}
    for param in params:
        flat = param.value.reshape(-1)
        indices = _sample_indices(flat.size, max_entries, rng)
        numeric = np.empty(indices.size)
        for slot, index in enumerate(indices):
            original = flat[index]
            flat[index] = original + step
            loss_plus = forward_backward()
            flat[index] = original - step
            loss_minus = forward_backward()
            flat[index] = original
            if not (np.isfinite(loss_plus) and np.isfinite(loss_minus)):
                raise GradCheckError(f"Non-finite loss while perturbing {param.name}[{index}]")
            numeric[slot] = (loss_plus - loss_minus) / (2.0 * step)
        expected = analytic[param.name].reshape(-1)[indices]
        scale = np.linalg.norm(expected) + np.linalg.norm(numeric)
        error = float(np.linalg.norm(expected - numeric) / scale) if scale > 0 else 0.0
        per_parameter[param.name] = error
        logger.debug("grad check %s: relative error %.3e", param.name, error)
    forward_backward()
    return GradCheckReport(
        max_relative_error=max(per_parameter.values(), default=0.0),
        per_parameter=per_parameter,
        tolerance=tolerance,
    )
