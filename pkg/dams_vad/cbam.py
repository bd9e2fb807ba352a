"""Block attention on [B, C, T] sequences: channel attention, then temporal attention.

The image formulation squeezes and unsqueezes a spatial axis around each gate; here the
sequence axis is the only spatial axis, so the gates act on [B, C, T] directly with maps
of shape [B, C, 1] and [B, 1, T].
"""

from __future__ import annotations

from collections.abc import Iterator
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt

from .config import CbamConfig
from .exceptions import ConfigError, DimensionError
from .tensor import (
    Array,
    Mask,
    Parameter,
    conv1d,
    conv1d_backward,
    global_avg_pool,
    global_avg_pool_backward,
    global_max_pool,
    global_max_pool_backward,
    linear,
    linear_backward,
    relu,
    relu_backward,
    sigmoid,
    sigmoid_backward,
    uniform_init,
)


@dataclass(slots=True)
class ChannelCache:
    pooled: tuple[Array, Array]
    hidden_pre: tuple[Array, Array]
    hidden: tuple[Array, Array]
    argmax: npt.NDArray[np.intp]
    gate: Array


@dataclass(slots=True)
class TemporalCache:
    pooled: Array
    argmax: npt.NDArray[np.intp]
    gate: Array


@dataclass(slots=True)
class CbamCache:
    features: Array
    channel: ChannelCache | None
    channel_gate: Array
    gated: Array
    temporal: TemporalCache | None
    temporal_gate: Array
    mask: Mask | None


class Cbam:
    def __init__(
        self,
        channels: int,
        config: CbamConfig,
        rng: np.random.Generator,
        *,
        use_ca: bool = True,
        use_sa: bool = True,
        prefix: str = "cbam",
    ) -> None:
        if channels % config.reduction:
            raise ConfigError(
                f"Reduction ratio {config.reduction} does not divide {channels} channels"
            )
        self.channels = channels
        self.kernel_size = config.kernel_size
        self.use_ca = use_ca
        self.use_sa = use_sa
        hidden = channels // config.reduction
        c = channels
        self.channel_params: list[Parameter] = []
        if use_ca:
            self.mlp_w1 = Parameter(f"{prefix}.ca.w1", uniform_init(rng, (hidden, c), c))
            self.mlp_b1 = Parameter(f"{prefix}.ca.b1", uniform_init(rng, (hidden,), c))
            self.mlp_w2 = Parameter(f"{prefix}.ca.w2", uniform_init(rng, (c, hidden), hidden))
            self.mlp_b2 = Parameter(f"{prefix}.ca.b2", uniform_init(rng, (c,), hidden))
            self.channel_params = [self.mlp_w1, self.mlp_b1, self.mlp_w2, self.mlp_b2]
        self.temporal_params: list[Parameter] = []
        if use_sa:
            fan_in = 2 * config.kernel_size
            self.conv_w = Parameter(
                f"{prefix}.sa.conv.w", uniform_init(rng, (1, 2, config.kernel_size), fan_in)
            )
            self.conv_b = Parameter(f"{prefix}.sa.conv.b", uniform_init(rng, (1,), fan_in))
            self.temporal_params = [self.conv_w, self.conv_b]

    def parameters(self) -> Iterator[Parameter]:
        yield from self.channel_params
        yield from self.temporal_params

    def _mlp(self, pooled: Array) -> tuple[Array, Array, Array]:
        hidden_pre = linear(pooled, self.mlp_w1.value, self.mlp_b1.value)
        hidden = relu(hidden_pre)
        return hidden_pre, hidden, linear(hidden, self.mlp_w2.value, self.mlp_b2.value)

    def channel_attention(
        self, features: Array, mask: Mask | None = None
    ) -> tuple[Array, ChannelCache]:
        """M_c = sigmoid(mlp(avg_T f) + mlp(max_T f)) -> [B, C, 1]."""
        avg = global_avg_pool(features, mask)
        peak, argmax = global_max_pool(features, mask)
        avg_pre, avg_hidden, avg_logit = self._mlp(avg)
        max_pre, max_hidden, max_logit = self._mlp(peak)
        gate = sigmoid(avg_logit + max_logit)
        cache = ChannelCache(
            (avg, peak), (avg_pre, max_pre), (avg_hidden, max_hidden), argmax, gate
        )
        return gate[:, :, None], cache

    def channel_attention_backward(
        self, grad_gate: Array, cache: ChannelCache, length: int, mask: Mask | None = None
    ) -> Array:
        grad_logit = sigmoid_backward(grad_gate[:, :, 0], cache.gate)
        grad_pooled: list[Array] = []
        for pooled, hidden_pre, hidden in zip(
            cache.pooled, cache.hidden_pre, cache.hidden, strict=True
        ):
            grad_hidden, grad_w2, grad_b2 = linear_backward(grad_logit, hidden, self.mlp_w2.value)
            self.mlp_w2.accumulate(grad_w2)
            self.mlp_b2.accumulate(grad_b2)
            grad_pre = relu_backward(grad_hidden, hidden_pre)
            grad_in, grad_w1, grad_b1 = linear_backward(grad_pre, pooled, self.mlp_w1.value)
            self.mlp_w1.accumulate(grad_w1)
            self.mlp_b1.accumulate(grad_b1)
            grad_pooled.append(grad_in)
        return global_avg_pool_backward(grad_pooled[0], length, mask) + global_max_pool_backward(
            grad_pooled[1], cache.argmax, length
        )

    def temporal_attention(self, features: Array) -> tuple[Array, TemporalCache]:
        """M_t = sigmoid(conv_k([mean_C f; max_C f])) -> [B, 1, T]."""
        mean_map = features.mean(axis=1)
        argmax = features.argmax(axis=1)
        max_map = np.take_along_axis(features, argmax[:, None, :], axis=1)[:, 0, :]
        pooled = np.stack([mean_map, max_map], axis=1)
        logits = conv1d(pooled, self.conv_w.value, self.conv_b.value, self.kernel_size // 2)
        gate = sigmoid(logits)
        return gate, TemporalCache(pooled, argmax, gate)

    def temporal_attention_backward(self, grad_gate: Array, cache: TemporalCache) -> Array:
        grad_logits = sigmoid_backward(grad_gate, cache.gate)
        grad_pooled, grad_w, grad_b = conv1d_backward(
            grad_logits, cache.pooled, self.conv_w.value, self.kernel_size // 2
        )
        self.conv_w.accumulate(grad_w)
        self.conv_b.accumulate(grad_b)
        batch, length = cache.argmax.shape
        grad = np.repeat(grad_pooled[:, 0:1, :] / self.channels, self.channels, axis=1)
        np.add.at(
            grad,
            (np.arange(batch)[:, None], cache.argmax, np.arange(length)[None, :]),
            grad_pooled[:, 1, :],
        )
        return grad

    def forward(self, features: Array, mask: Mask | None = None) -> tuple[Array, CbamCache]:
        if features.ndim != 3 or features.shape[1] != self.channels:
            raise DimensionError(f"CBAM expects [B, {self.channels}, T], got {features.shape}")
        batch, _, length = features.shape
        channel_cache: ChannelCache | None = None
        temporal_cache: TemporalCache | None = None
        if self.use_ca:
            channel_gate, channel_cache = self.channel_attention(features, mask)
        else:
            channel_gate = np.ones((batch, self.channels, 1))
        gated = features * channel_gate
        if self.use_sa:
            temporal_gate, temporal_cache = self.temporal_attention(gated)
        else:
            temporal_gate = np.ones((batch, 1, length))
        out = gated * temporal_gate
        return out, CbamCache(
            features, channel_cache, channel_gate, gated, temporal_cache, temporal_gate, mask
        )

    def backward(self, grad_out: Array, cache: CbamCache) -> Array:
        grad_gated = grad_out * cache.temporal_gate
        if cache.temporal is not None:
            grad_temporal = (grad_out * cache.gated).sum(axis=1, keepdims=True)
            grad_gated = grad_gated + self.temporal_attention_backward(
                grad_temporal, cache.temporal
            )
        grad_features = grad_gated * cache.channel_gate
        if cache.channel is not None:
            grad_channel = (grad_gated * cache.features).sum(axis=2, keepdims=True)
            grad_features = grad_features + self.channel_attention_backward(
                grad_channel, cache.channel, cache.features.shape[2], cache.mask
            )
        return grad_features
