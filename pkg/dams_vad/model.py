from __future__ import annotations

import logging
from collections.abc import Iterator
from dataclasses import dataclass
from typing import Final, Literal

import numpy as np

from .amtpn import Amtpn, AmtpnCache
from .cbam import Cbam, CbamCache
from .config import AblationSwitches, ModelConfig
from .exceptions import DimensionError
from .tensor import (
    Array,
    BatchNormCache,
    BatchNormState,
    Mask,
    Parameter,
    batch_norm1d,
    batch_norm1d_backward,
    conv1d,
    conv1d_backward,
    relu,
    relu_backward,
    sigmoid,
    sigmoid_backward,
    uniform_init,
)

logger: Final[logging.Logger] = logging.getLogger(name=__name__)

Mode = Literal["train", "eval"]
LOSS_TERMS = ("l_pse", "l_cls", "l_trip")


@dataclass(slots=True)
class ForwardOutput:
    frame_logits: Array
    frame_scores: Array
    embeddings: Array


@dataclass(slots=True)
class BlockCache:
    inputs: Array
    bn: BatchNormCache
    pre_relu: Array


@dataclass(slots=True)
class ModelCache:
    inputs: Array
    mask: Mask | None
    backbone_blocks: list[BlockCache]
    backbone_out: Array
    amtpn: AmtpnCache | None
    amtpn_out: Array
    cbam: CbamCache | None
    embeddings: Array
    head_hidden_pre: Array
    head_hidden: Array
    dropout_keep: Array | None
    scores: Array


class DamsModel:
    """Backbone -> AMTPN -> CBAM -> head, plus the uncertainty log-variances of the three
    loss terms, which train with the rest of the parameters."""

    def __init__(
        self,
        config: ModelConfig,
        rng: np.random.Generator,
        switches: AblationSwitches | None = None,
    ) -> None:
        switches = switches or AblationSwitches()
        self.config = config
        self.switches = switches
        din, c, h = config.input_dim, config.width, config.hidden

        self.proj_w = Parameter("backbone.proj.w", uniform_init(rng, (c, din, 1), din))
        self.proj_b = Parameter("backbone.proj.b", uniform_init(rng, (c,), din))
        self.block_w: list[Parameter] = []
        self.block_b: list[Parameter] = []
        self.block_gamma: list[Parameter] = []
        self.block_beta: list[Parameter] = []
        self.block_state: list[BatchNormState] = []
        for layer in range(config.depth):
            name = f"backbone.block{layer}"
            self.block_w.append(Parameter(f"{name}.conv.w", uniform_init(rng, (c, c, 3), 3 * c)))
            self.block_b.append(Parameter(f"{name}.conv.b", uniform_init(rng, (c,), 3 * c)))
            self.block_gamma.append(Parameter(f"{name}.bn.gamma", np.ones(c)))
            self.block_beta.append(Parameter(f"{name}.bn.beta", np.zeros(c)))
            self.block_state.append(BatchNormState.fresh(c))

        self.amtpn: Amtpn | None = None
        if switches.use_amtpn:
            self.amtpn = Amtpn(
                c,
                config.pyramid,
                rng,
                use_tpp=switches.use_tpp,
                use_aff=switches.use_aff,
                use_tce=switches.use_tce,
            )
        self.cbam: Cbam | None = None
        if switches.use_cbam:
            self.cbam = Cbam(c, config.cbam, rng, use_ca=switches.use_ca, use_sa=switches.use_sa)

        self.head1_w = Parameter("head.fc1.w", uniform_init(rng, (h, c, 1), c))
        self.head1_b = Parameter("head.fc1.b", uniform_init(rng, (h,), c))
        self.head2_w = Parameter("head.fc2.w", uniform_init(rng, (1, h, 1), h))
        self.head2_b = Parameter("head.fc2.b", uniform_init(rng, (1,), h))
        self.log_vars = Parameter("uncertainty.log_var", np.zeros(len(LOSS_TERMS)))
        logger.debug(
            "Model built with %d parameters (%s)",
            sum(param.value.size for param in self.parameters()),
            ", ".join(name for name, on in switches.model_dump().items() if not on) or "full",
        )

    # Parameter plumbing

    def backbone_parameters(self) -> Iterator[Parameter]:
        yield self.proj_w
        yield self.proj_b
        for params in zip(
            self.block_w, self.block_b, self.block_gamma, self.block_beta, strict=True
        ):
            yield from params

    def head_parameters(self) -> Iterator[Parameter]:
        yield from (self.head1_w, self.head1_b, self.head2_w, self.head2_b)

    def network_parameters(self) -> Iterator[Parameter]:
        yield from self.backbone_parameters()
        if self.amtpn is not None:
            yield from self.amtpn.parameters()
        if self.cbam is not None:
            yield from self.cbam.parameters()
        yield from self.head_parameters()

    def parameters(self) -> Iterator[Parameter]:
        yield from self.network_parameters()
        yield self.log_vars

    def buffers(self) -> dict[str, BatchNormState]:
        buffers = {
            gamma.name.removesuffix(".gamma"): state
            for gamma, state in zip(self.block_gamma, self.block_state, strict=True)
        }
        if self.amtpn is not None:
            buffers.update(self.amtpn.buffers())
        return buffers

    def zero_grads(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def state_dict(self) -> dict[str, Array]:
        state = {param.name: param.value.copy() for param in self.parameters()}
        for name, buffer in self.buffers().items():
            state[f"{name}.running_mean"] = buffer.running_mean.copy()
            state[f"{name}.running_var"] = buffer.running_var.copy()
        return state

    def load_state_dict(self, state: dict[str, Array]) -> None:
        expected = set(self.state_dict())
        if set(state) != expected:
            missing = sorted(expected - set(state))
            unexpected = sorted(set(state) - expected)
            raise DimensionError(
                f"State does not match model: missing {missing}, unexpected {unexpected}"
            )
        for param in self.parameters():
            if state[param.name].shape != param.value.shape:
                raise DimensionError(f"Shape mismatch for {param.name}")
            param.value[...] = state[param.name]
        for name, buffer in self.buffers().items():
            buffer.running_mean = np.array(state[f"{name}.running_mean"], dtype=np.float64)
            buffer.running_var = np.array(state[f"{name}.running_var"], dtype=np.float64)

    # Backbone

    def backbone_forward(
        self, x: Array, mode: Mode = "eval", mask: Mask | None = None
    ) -> tuple[Array, list[BlockCache]]:
        """1x1 projection to C channels, then residual {conv k=3 -> BN -> relu} blocks."""
        if x.ndim != 3 or x.shape[1] != self.config.input_dim:
            raise DimensionError(
                f"Model expects [B, {self.config.input_dim}, T] features, got {x.shape}"
            )
        h = conv1d(x, self.proj_w.value, self.proj_b.value)
        caches: list[BlockCache] = []
        for layer in range(self.config.depth):
            conv = conv1d(h, self.block_w[layer].value, self.block_b[layer].value, padding=1)
            normed, bn_cache = batch_norm1d(
                conv,
                self.block_gamma[layer].value,
                self.block_beta[layer].value,
                self.block_state[layer],
                mode,
                mask,
            )
            caches.append(BlockCache(inputs=h, bn=bn_cache, pre_relu=normed))
            h = h + relu(normed)
        return h, caches

    def backbone_backward(self, grad_out: Array, x: Array, caches: list[BlockCache]) -> Array:
        grad = grad_out
        for layer in reversed(range(self.config.depth)):
            cache = caches[layer]
            grad_norm = relu_backward(grad, cache.pre_relu)
            grad_conv, grad_gamma, grad_beta = batch_norm1d_backward(
                grad_norm, self.block_gamma[layer].value, cache.bn
            )
            self.block_gamma[layer].accumulate(grad_gamma)
            self.block_beta[layer].accumulate(grad_beta)
            grad_in, grad_w, grad_b = conv1d_backward(
                grad_conv, cache.inputs, self.block_w[layer].value, padding=1
            )
            self.block_w[layer].accumulate(grad_w)
            self.block_b[layer].accumulate(grad_b)
            grad = grad + grad_in
        grad_x, grad_w, grad_b = conv1d_backward(grad, x, self.proj_w.value)
        self.proj_w.accumulate(grad_w)
        self.proj_b.accumulate(grad_b)
        return grad_x

    # Full model

    def forward(
        self,
        x: Array,
        mode: Mode = "eval",
        mask: Mask | None = None,
        dropout_rng: np.random.Generator | None = None,
    ) -> tuple[ForwardOutput, ModelCache]:
        backbone_out, block_caches = self.backbone_forward(x, mode, mask)
        amtpn_cache: AmtpnCache | None = None
        if self.amtpn is not None:
            amtpn_out, amtpn_cache = self.amtpn.forward(backbone_out, mode, mask)
        else:
            amtpn_out = backbone_out
        cbam_cache: CbamCache | None = None
        if self.cbam is not None:
            embeddings, cbam_cache = self.cbam.forward(amtpn_out, mask)
        else:
            embeddings = amtpn_out

        hidden_pre = conv1d(embeddings, self.head1_w.value, self.head1_b.value)
        hidden = relu(hidden_pre)
        keep: Array | None = None
        if mode == "train" and self.config.dropout > 0:
            if dropout_rng is None:
                raise ValueError("Dropout in train mode needs a generator")
            survive = 1.0 - self.config.dropout
            keep = (dropout_rng.random(hidden.shape) < survive) / survive
            hidden = hidden * keep
        logits = conv1d(hidden, self.head2_w.value, self.head2_b.value)[:, 0, :]
        scores = sigmoid(logits)
        output = ForwardOutput(frame_logits=logits, frame_scores=scores, embeddings=embeddings)
        cache = ModelCache(
            inputs=x,
            mask=mask,
            backbone_blocks=block_caches,
            backbone_out=backbone_out,
            amtpn=amtpn_cache,
            amtpn_out=amtpn_out,
            cbam=cbam_cache,
            embeddings=embeddings,
            head_hidden_pre=hidden_pre,
            head_hidden=hidden,
            dropout_keep=keep,
            scores=scores,
        )
        return output, cache

    def backward(
        self,
        cache: ModelCache,
        grad_logits: Array | None = None,
        grad_embeddings: Array | None = None,
        grad_scores: Array | None = None,
    ) -> Array:
        """Accumulate parameter gradients and return the gradient w.r.t. the input.

        Gradients may arrive on the frame logits, the frame scores (chained through the
        sigmoid here) and the embeddings that feed the triplet loss.
        """
        total_logits = np.zeros_like(cache.scores)
        if grad_logits is not None:
            total_logits += grad_logits
        if grad_scores is not None:
            total_logits += sigmoid_backward(grad_scores, cache.scores)

        grad_hidden, grad_w, grad_b = conv1d_backward(
            total_logits[:, None, :], cache.head_hidden, self.head2_w.value
        )
        self.head2_w.accumulate(grad_w)
        self.head2_b.accumulate(grad_b)
        if cache.dropout_keep is not None:
            grad_hidden = grad_hidden * cache.dropout_keep
        grad_pre = relu_backward(grad_hidden, cache.head_hidden_pre)
        grad_emb, grad_w, grad_b = conv1d_backward(grad_pre, cache.embeddings, self.head1_w.value)
        self.head1_w.accumulate(grad_w)
        self.head1_b.accumulate(grad_b)
        if grad_embeddings is not None:
            grad_emb = grad_emb + grad_embeddings

        grad = grad_emb
        if self.cbam is not None and cache.cbam is not None:
            grad = self.cbam.backward(grad, cache.cbam)
        if self.amtpn is not None and cache.amtpn is not None:
            grad = self.amtpn.backward(grad, cache.amtpn)
        return self.backbone_backward(grad, cache.inputs, cache.backbone_blocks)

    # Diagnostics

    def pyramid_branches(self, x: Array) -> list[Array]:
        """Per-scale TPP outputs in eval mode, [B, C, T] each."""
        if self.amtpn is None:
            raise DimensionError("Model was built without AMTPN; no pyramid branches")
        backbone_out, _ = self.backbone_forward(x, "eval")
        branches, _ = self.amtpn.tpp_forward(backbone_out, "eval")
        return branches

    def fused_features(self, x: Array) -> Array:
        backbone_out, _ = self.backbone_forward(x, "eval")
        if self.amtpn is None:
            return backbone_out
        fused, _ = self.amtpn.forward(backbone_out, "eval")
        return fused
