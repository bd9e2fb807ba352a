"""Adaptive multiscale temporal pyramid: pooling branches, learned fusion and channel
context gating. All tensors are [B, C, T]; every stage preserves T."""

from __future__ import annotations

from collections.abc import Iterator
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .config import PyramidConfig
from .exceptions import ConfigError, DimensionError
from .tensor import (
    Array,
    BatchNormCache,
    BatchNormState,
    Mask,
    Parameter,
    avg_pool1d,
    avg_pool1d_backward,
    batch_norm1d,
    batch_norm1d_backward,
    conv1d,
    conv1d_backward,
    global_avg_pool,
    global_avg_pool_backward,
    linear,
    linear_backward,
    relu,
    relu_backward,
    sigmoid,
    sigmoid_backward,
    softmax,
    softmax_backward,
    uniform_init,
)

Mode = Literal["train", "eval"]


@dataclass(slots=True)
class BranchCache:
    pooled: Array
    bn: BatchNormCache
    pre_relu: Array


@dataclass(slots=True)
class AffCache:
    branches: list[Array]
    pooled: list[Array]
    hidden_pre: list[Array]
    hidden: list[Array]
    descriptors: Array
    weights: Array
    mixed: Array


@dataclass(slots=True)
class TceCache:
    features: Array
    pooled: Array
    hidden_pre: Array
    hidden: Array
    gate: Array


@dataclass(slots=True)
class AmtpnCache:
    length: int
    mask: Mask | None
    branches: list[BranchCache]
    aff: AffCache
    tce: TceCache


class Amtpn:
    """TPP branches -> AFF fusion -> TCE gating.

    Switches mirror the ablations: ``use_tpp=False`` keeps only the unit scale,
    ``use_aff=False`` fixes uniform fusion weights and ``use_tce=False`` fixes the gate at 1.
    """

    def __init__(
        self,
        channels: int,
        config: PyramidConfig,
        rng: np.random.Generator,
        *,
        use_tpp: bool = True,
        use_aff: bool = True,
        use_tce: bool = True,
        prefix: str = "amtpn",
    ) -> None:
        if channels % config.reduction:
            raise ConfigError(
                f"Reduction ratio {config.reduction} does not divide {channels} channels"
            )
        self.channels = channels
        self.scales: tuple[int, ...] = config.scales if use_tpp else (1,)
        self.use_aff = use_aff
        self.use_tce = use_tce
        hidden = channels // config.reduction
        self.hidden = hidden
        c = channels

        self.branch_conv_w: list[Parameter] = []
        self.branch_conv_b: list[Parameter] = []
        self.branch_gamma: list[Parameter] = []
        self.branch_beta: list[Parameter] = []
        self.branch_state: list[BatchNormState] = []
        for scale in self.scales:
            name = f"{prefix}.tpp.s{scale}"
            self.branch_conv_w.append(Parameter(f"{name}.conv.w", uniform_init(rng, (c, c, 1), c)))
            self.branch_conv_b.append(Parameter(f"{name}.conv.b", uniform_init(rng, (c,), c)))
            self.branch_gamma.append(Parameter(f"{name}.bn.gamma", np.ones(c)))
            self.branch_beta.append(Parameter(f"{name}.bn.beta", np.zeros(c)))
            self.branch_state.append(BatchNormState.fresh(c))

        k = len(self.scales)
        self.aff_params: list[Parameter] = []
        if use_aff:
            self.desc1_w = Parameter(f"{prefix}.aff.desc1.w", uniform_init(rng, (hidden, c), c))
            self.desc1_b = Parameter(f"{prefix}.aff.desc1.b", uniform_init(rng, (hidden,), c))
            self.desc2_w = Parameter(
                f"{prefix}.aff.desc2.w", uniform_init(rng, (hidden, hidden), hidden)
            )
            self.desc2_b = Parameter(f"{prefix}.aff.desc2.b", uniform_init(rng, (hidden,), hidden))
            self.head_w = Parameter(
                f"{prefix}.aff.head.w", uniform_init(rng, (k, k * hidden), k * hidden)
            )
            self.head_b = Parameter(f"{prefix}.aff.head.b", uniform_init(rng, (k,), k * hidden))
            self.aff_params = [
                self.desc1_w,
                self.desc1_b,
                self.desc2_w,
                self.desc2_b,
                self.head_w,
                self.head_b,
            ]
        self.refine_w = Parameter(f"{prefix}.aff.refine.w", uniform_init(rng, (c, c, 1), c))
        self.refine_b = Parameter(f"{prefix}.aff.refine.b", uniform_init(rng, (c,), c))

        self.tce_params: list[Parameter] = []
        if use_tce:
            self.tce_w1 = Parameter(f"{prefix}.tce.w1", uniform_init(rng, (hidden, c), c))
            self.tce_b1 = Parameter(f"{prefix}.tce.b1", uniform_init(rng, (hidden,), c))
            self.tce_w2 = Parameter(f"{prefix}.tce.w2", uniform_init(rng, (c, hidden), hidden))
            self.tce_b2 = Parameter(f"{prefix}.tce.b2", uniform_init(rng, (c,), hidden))
            self.tce_params = [self.tce_w1, self.tce_b1, self.tce_w2, self.tce_b2]

    def parameters(self) -> Iterator[Parameter]:
        for params in zip(
            self.branch_conv_w,
            self.branch_conv_b,
            self.branch_gamma,
            self.branch_beta,
            strict=True,
        ):
            yield from params
        yield from self.aff_params
        yield self.refine_w
        yield self.refine_b
        yield from self.tce_params

    def buffers(self) -> dict[str, BatchNormState]:
        return {
            gamma.name.removesuffix(".gamma"): state
            for gamma, state in zip(self.branch_gamma, self.branch_state, strict=True)
        }

    # Temporal pyramid pooling

    def tpp_forward(
        self, x: Array, mode: Mode = "eval", mask: Mask | None = None
    ) -> tuple[list[Array], list[BranchCache]]:
        if x.ndim != 3 or x.shape[1] != self.channels:
            raise DimensionError(f"AMTPN expects [B, {self.channels}, T], got {x.shape}")
        branches: list[Array] = []
        caches: list[BranchCache] = []
        for k, scale in enumerate(self.scales):
            pooled = avg_pool1d(x, scale, stride=1, padding=scale // 2)
            conv = conv1d(pooled, self.branch_conv_w[k].value, self.branch_conv_b[k].value)
            normed, bn_cache = batch_norm1d(
                conv,
                self.branch_gamma[k].value,
                self.branch_beta[k].value,
                self.branch_state[k],
                mode,
                mask,
            )
            branches.append(relu(normed))
            caches.append(BranchCache(pooled=pooled, bn=bn_cache, pre_relu=normed))
        return branches, caches

    def tpp_backward(self, grads: list[Array], caches: list[BranchCache], length: int) -> Array:
        grad_x = np.zeros((grads[0].shape[0], self.channels, length))
        for k, scale in enumerate(self.scales):
            cache = caches[k]
            grad_norm = relu_backward(grads[k], cache.pre_relu)
            grad_conv, grad_gamma, grad_beta = batch_norm1d_backward(
                grad_norm, self.branch_gamma[k].value, cache.bn
            )
            self.branch_gamma[k].accumulate(grad_gamma)
            self.branch_beta[k].accumulate(grad_beta)
            grad_pooled, grad_w, grad_b = conv1d_backward(
                grad_conv, cache.pooled, self.branch_conv_w[k].value
            )
            self.branch_conv_w[k].accumulate(grad_w)
            self.branch_conv_b[k].accumulate(grad_b)
            grad_x += avg_pool1d_backward(grad_pooled, length, scale, stride=1, padding=scale // 2)
        return grad_x

    # Adaptive feature fusion

    def fusion_weights(
        self, branches: list[Array], mask: Mask | None = None
    ) -> tuple[Array, list[Array], list[Array], list[Array], Array]:
        """Softmax weights over scales from per-branch descriptors -> [B, K]."""
        pooled = [global_avg_pool(branch, mask) for branch in branches]
        hidden_pre = [linear(p, self.desc1_w.value, self.desc1_b.value) for p in pooled]
        hidden = [relu(h) for h in hidden_pre]
        descriptors = np.concatenate(
            [linear(h, self.desc2_w.value, self.desc2_b.value) for h in hidden], axis=1
        )
        logits = linear(descriptors, self.head_w.value, self.head_b.value)
        return softmax(logits, axis=1), pooled, hidden_pre, hidden, descriptors

    def aff_forward(
        self, branches: list[Array], mask: Mask | None = None
    ) -> tuple[Array, Array, AffCache]:
        if not branches:
            raise DimensionError("Adaptive fusion needs at least one pyramid branch")
        if len(branches) != len(self.scales):
            raise DimensionError(f"Expected {len(self.scales)} branches, got {len(branches)}")
        batch = branches[0].shape[0]
        if self.use_aff:
            weights, pooled, hidden_pre, hidden, descriptors = self.fusion_weights(branches, mask)
        else:
            weights = np.full((batch, len(branches)), 1.0 / len(branches))
            pooled, hidden_pre, hidden, descriptors = [], [], [], np.empty((batch, 0))
        mixed = np.zeros_like(branches[0])
        for k, branch in enumerate(branches):
            mixed += weights[:, k, None, None] * branch
        fused = conv1d(mixed, self.refine_w.value, self.refine_b.value)
        cache = AffCache(branches, pooled, hidden_pre, hidden, descriptors, weights, mixed)
        return fused, weights, cache

    def aff_backward(
        self, grad_fused: Array, cache: AffCache, mask: Mask | None = None
    ) -> list[Array]:
        grad_mixed, grad_w, grad_b = conv1d_backward(grad_fused, cache.mixed, self.refine_w.value)
        self.refine_w.accumulate(grad_w)
        self.refine_b.accumulate(grad_b)
        grads = [cache.weights[:, k, None, None] * grad_mixed for k in range(len(cache.branches))]
        if not self.use_aff:
            return grads

        grad_weights = np.stack(
            [(grad_mixed * branch).sum(axis=(1, 2)) for branch in cache.branches], axis=1
        )
        grad_logits = softmax_backward(grad_weights, cache.weights, axis=1)
        grad_desc, grad_hw, grad_hb = linear_backward(
            grad_logits, cache.descriptors, self.head_w.value
        )
        self.head_w.accumulate(grad_hw)
        self.head_b.accumulate(grad_hb)
        length = grad_fused.shape[2]
        for k in range(len(cache.branches)):
            grad_e = grad_desc[:, k * self.hidden : (k + 1) * self.hidden]
            grad_h, grad_w2, grad_b2 = linear_backward(grad_e, cache.hidden[k], self.desc2_w.value)
            self.desc2_w.accumulate(grad_w2)
            self.desc2_b.accumulate(grad_b2)
            grad_pre = relu_backward(grad_h, cache.hidden_pre[k])
            grad_p, grad_w1, grad_b1 = linear_backward(
                grad_pre, cache.pooled[k], self.desc1_w.value
            )
            self.desc1_w.accumulate(grad_w1)
            self.desc1_b.accumulate(grad_b1)
            grads[k] = grads[k] + global_avg_pool_backward(grad_p, length, mask)
        return grads

    # Temporal context enhancement

    def tce_forward(self, features: Array, mask: Mask | None = None) -> tuple[Array, TceCache]:
        if not self.use_tce:
            gate = np.ones(features.shape[:2])
            empty = np.empty((features.shape[0], 0))
            return features, TceCache(features, empty, empty, empty, gate)
        pooled = global_avg_pool(features, mask)
        hidden_pre = linear(pooled, self.tce_w1.value, self.tce_b1.value)
        hidden = relu(hidden_pre)
        gate = sigmoid(linear(hidden, self.tce_w2.value, self.tce_b2.value))
        out = features * gate[:, :, None]
        return out, TceCache(features, pooled, hidden_pre, hidden, gate)

    def tce_backward(self, grad_out: Array, cache: TceCache, mask: Mask | None = None) -> Array:
        if not self.use_tce:
            return grad_out
        grad_features = grad_out * cache.gate[:, :, None]
        grad_gate = (grad_out * cache.features).sum(axis=2)
        grad_logit = sigmoid_backward(grad_gate, cache.gate)
        grad_hidden, grad_w2, grad_b2 = linear_backward(
            grad_logit, cache.hidden, self.tce_w2.value
        )
        self.tce_w2.accumulate(grad_w2)
        self.tce_b2.accumulate(grad_b2)
        grad_pre = relu_backward(grad_hidden, cache.hidden_pre)
        grad_pooled, grad_w1, grad_b1 = linear_backward(grad_pre, cache.pooled, self.tce_w1.value)
        self.tce_w1.accumulate(grad_w1)
        self.tce_b1.accumulate(grad_b1)
        return grad_features + global_avg_pool_backward(
            grad_pooled, cache.features.shape[2], mask
        )

    # Full pipeline

    def forward(
        self, x: Array, mode: Mode = "eval", mask: Mask | None = None
    ) -> tuple[Array, AmtpnCache]:
        branches, branch_caches = self.tpp_forward(x, mode, mask)
        fused, _, aff_cache = self.aff_forward(branches, mask)
        out, tce_cache = self.tce_forward(fused, mask)
        return out, AmtpnCache(x.shape[2], mask, branch_caches, aff_cache, tce_cache)

    def backward(self, grad_out: Array, cache: AmtpnCache) -> Array:
        grad_fused = self.tce_backward(grad_out, cache.tce, cache.mask)
        grad_branches = self.aff_backward(grad_fused, cache.aff, cache.mask)
        return self.tpp_backward(grad_branches, cache.branches, cache.length)
