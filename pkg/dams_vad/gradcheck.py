"""Finite-difference checks of every analytic backward pass, at reduced shapes.

Each check builds its parameters from a seeded generator and returns a closure that
zeroes their gradients, runs forward and backward and returns a scalar loss. Raw ops are
turned into scalars by an inner product with a fixed random upstream gradient.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import Final

import click
import numpy as np

from .amtpn import Amtpn
from .cbam import Cbam
from .cli import cli
from .config import AblationSwitches, CbamConfig, ModelConfig, PyramidConfig
from .exceptions import GradCheckError
from .losses import (
    batch_topk_scores,
    build_triplet,
    focal_loss,
    topk_scatter,
    total_loss,
    triplet_loss,
    video_cls_loss,
)
from .model import DamsModel
from .tensor import (
    BatchNormState,
    GradCheckReport,
    Parameter,
    avg_pool1d,
    avg_pool1d_backward,
    batch_norm1d,
    batch_norm1d_backward,
    conv1d,
    conv1d_backward,
    global_avg_pool,
    global_avg_pool_backward,
    global_max_pool,
    global_max_pool_backward,
    grad_check,
    linear,
    linear_backward,
    max_pool1d,
    max_pool1d_backward,
    relu,
    relu_backward,
    sigmoid,
    sigmoid_backward,
    softmax,
    softmax_backward,
    zero_grads,
)

logger: Final[logging.Logger] = logging.getLogger(name=__name__)

BATCH = 2
CHANNELS = 8
LENGTH = 12
SCALES = (1, 3, 5)

Closure = Callable[[], float]
Builder = Callable[[np.random.Generator], tuple[list[Parameter], Closure]]


def _mask() -> np.ndarray:
    mask = np.ones((BATCH, LENGTH), dtype=bool)
    mask[1, 9:] = False
    return mask


def _input(rng: np.random.Generator, name: str = "x") -> Parameter:
    return Parameter(name, rng.normal(size=(BATCH, CHANNELS, LENGTH)))


def _model_config(depth: int = 2, dropout: float = 0.0) -> ModelConfig:
    return ModelConfig(
        input_dim=6,
        width=CHANNELS,
        depth=depth,
        pyramid=PyramidConfig(scales=SCALES, reduction=4),
        cbam=CbamConfig(reduction=4, kernel_size=3),
        dropout=dropout,
    )


# Ops


def _conv1d(rng: np.random.Generator) -> tuple[list[Parameter], Closure]:
    x = _input(rng)
    w = Parameter("w", rng.normal(size=(6, CHANNELS, 3)))
    b = Parameter("b", rng.normal(size=6))
    upstream = rng.normal(size=(BATCH, 6, LENGTH))
    params = [x, w, b]

    def run() -> float:
        zero_grads(params)
        out = conv1d(x.value, w.value, b.value, padding=1)
        dx, dw, db = conv1d_backward(upstream, x.value, w.value, padding=1)
        x.accumulate(dx)
        w.accumulate(dw)
        b.accumulate(db)
        return float((out * upstream).sum())

    return params, run


def _avg_pool1d(rng: np.random.Generator) -> tuple[list[Parameter], Closure]:
    x = _input(rng)
    shape = avg_pool1d(x.value, 3, stride=2, padding=1).shape
    upstream = rng.normal(size=shape)

    def run() -> float:
        x.zero_grad()
        out = avg_pool1d(x.value, 3, stride=2, padding=1)
        x.accumulate(avg_pool1d_backward(upstream, LENGTH, 3, stride=2, padding=1))
        return float((out * upstream).sum())

    return [x], run


def _max_pool1d(rng: np.random.Generator) -> tuple[list[Parameter], Closure]:
    x = _input(rng)
    upstream = rng.normal(size=(BATCH, CHANNELS, LENGTH))

    def run() -> float:
        x.zero_grad()
        out, argmax = max_pool1d(x.value, 3, stride=1, padding=1)
        x.accumulate(max_pool1d_backward(upstream, argmax, LENGTH))
        return float((out * upstream).sum())

    return [x], run


def _global_pools(rng: np.random.Generator) -> tuple[list[Parameter], Closure]:
    x = _input(rng)
    mask = _mask()
    upstream_avg = rng.normal(size=(BATCH, CHANNELS))
    upstream_max = rng.normal(size=(BATCH, CHANNELS))

    def run() -> float:
        x.zero_grad()
        avg = global_avg_pool(x.value, mask)
        peak, argmax = global_max_pool(x.value, mask)
        x.accumulate(global_avg_pool_backward(upstream_avg, LENGTH, mask))
        x.accumulate(global_max_pool_backward(upstream_max, argmax, LENGTH))
        return float((avg * upstream_avg).sum() + (peak * upstream_max).sum())

    return [x], run


def _linear(rng: np.random.Generator) -> tuple[list[Parameter], Closure]:
    x = Parameter("x", rng.normal(size=(3, CHANNELS)))
    w = Parameter("w", rng.normal(size=(5, CHANNELS)))
    b = Parameter("b", rng.normal(size=5))
    upstream = rng.normal(size=(3, 5))
    params = [x, w, b]

    def run() -> float:
        zero_grads(params)
        out = linear(x.value, w.value, b.value)
        dx, dw, db = linear_backward(upstream, x.value, w.value)
        x.accumulate(dx)
        w.accumulate(dw)
        b.accumulate(db)
        return float((out * upstream).sum())

    return params, run


def _elementwise(
    forward: Callable[[np.ndarray], np.ndarray],
    backward: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray],
) -> Builder:
    def build(rng: np.random.Generator) -> tuple[list[Parameter], Closure]:
        x = Parameter("x", rng.normal(size=(3, 5)))
        upstream = rng.normal(size=(3, 5))

        def run() -> float:
            x.zero_grad()
            out = forward(x.value)
            x.accumulate(backward(upstream, out, x.value))
            return float((out * upstream).sum())

        return [x], run

    return build


def _batch_norm1d(rng: np.random.Generator) -> tuple[list[Parameter], Closure]:
    x = _input(rng)
    gamma = Parameter("gamma", rng.uniform(0.5, 1.5, size=CHANNELS))
    beta = Parameter("beta", rng.normal(size=CHANNELS))
    mask = _mask()
    upstream = rng.normal(size=(BATCH, CHANNELS, LENGTH))
    params = [x, gamma, beta]

    def run() -> float:
        zero_grads(params)
        state = BatchNormState.fresh(CHANNELS)
        out, cache = batch_norm1d(x.value, gamma.value, beta.value, state, "train", mask)
        dx, dgamma, dbeta = batch_norm1d_backward(upstream, gamma.value, cache)
        x.accumulate(dx)
        gamma.accumulate(dgamma)
        beta.accumulate(dbeta)
        return float((out * upstream).sum())

    return params, run


# Modules


def _amtpn(rng: np.random.Generator) -> Amtpn:
    return Amtpn(CHANNELS, PyramidConfig(scales=SCALES, reduction=4), rng)


def _tpp(rng: np.random.Generator) -> tuple[list[Parameter], Closure]:
    module = _amtpn(rng)
    x = _input(rng)
    mask = _mask()
    upstreams = [rng.normal(size=(BATCH, CHANNELS, LENGTH)) for _ in SCALES]
    params = [x, *(p for p in module.parameters() if ".tpp." in p.name)]

    def run() -> float:
        zero_grads(params)
        branches, caches = module.tpp_forward(x.value, "train", mask)
        x.accumulate(module.tpp_backward(upstreams, caches, LENGTH))
        return float(sum((b * p).sum() for b, p in zip(branches, upstreams, strict=True)))

    return params, run


def _aff(rng: np.random.Generator) -> tuple[list[Parameter], Closure]:
    module = _amtpn(rng)
    branches = [_input(rng, f"branch{k}") for k in range(len(SCALES))]
    mask = _mask()
    upstream = rng.normal(size=(BATCH, CHANNELS, LENGTH))
    aff_params = [*module.aff_params, module.refine_w, module.refine_b]
    params = [*branches, *aff_params]

    def run() -> float:
        zero_grads(params)
        fused, _, cache = module.aff_forward([b.value for b in branches], mask)
        for branch, grad in zip(branches, module.aff_backward(upstream, cache, mask), strict=True):
            branch.accumulate(grad)
        return float((fused * upstream).sum())

    return params, run


def _tce(rng: np.random.Generator) -> tuple[list[Parameter], Closure]:
    module = _amtpn(rng)
    x = _input(rng)
    mask = _mask()
    upstream = rng.normal(size=(BATCH, CHANNELS, LENGTH))
    params = [x, *module.tce_params]

    def run() -> float:
        zero_grads(params)
        out, cache = module.tce_forward(x.value, mask)
        x.accumulate(module.tce_backward(upstream, cache, mask))
        return float((out * upstream).sum())

    return params, run


def _cbam(rng: np.random.Generator) -> tuple[list[Parameter], Closure]:
    module = Cbam(CHANNELS, CbamConfig(reduction=4, kernel_size=3), rng)
    x = _input(rng)
    mask = _mask()
    upstream = rng.normal(size=(BATCH, CHANNELS, LENGTH))
    params = [x, *module.parameters()]

    def run() -> float:
        zero_grads(params)
        out, cache = module.forward(x.value, mask)
        x.accumulate(module.backward(upstream, cache))
        return float((out * upstream).sum())

    return params, run


def _backbone(rng: np.random.Generator) -> tuple[list[Parameter], Closure]:
    model = DamsModel(_model_config(), rng)
    x = Parameter("x", rng.normal(size=(BATCH, 6, LENGTH)))
    mask = _mask()
    upstream = rng.normal(size=(BATCH, CHANNELS, LENGTH))
    params = [x, *model.backbone_parameters()]

    def run() -> float:
        zero_grads(params)
        out, caches = model.backbone_forward(x.value, "train", mask)
        x.accumulate(model.backbone_backward(upstream, x.value, caches))
        return float((out * upstream).sum())

    return params, run


def _model(
    switches: AblationSwitches | None = None, depth: int = 2, dropout: float = 0.0
) -> Builder:
    def build(rng: np.random.Generator) -> tuple[list[Parameter], Closure]:
        model = DamsModel(_model_config(depth, dropout), rng, switches)
        x = Parameter("x", rng.normal(size=(BATCH, 6, LENGTH)))
        mask = _mask()
        upstream_logits = rng.normal(size=(BATCH, LENGTH))
        upstream_scores = rng.normal(size=(BATCH, LENGTH))
        upstream_embeddings = rng.normal(size=(BATCH, CHANNELS, LENGTH))
        params = [x, *model.network_parameters()]

        def run() -> float:
            zero_grads(params)
            out, cache = model.forward(x.value, "train", mask, np.random.default_rng(0))
            x.accumulate(
                model.backward(
                    cache,
                    grad_logits=upstream_logits,
                    grad_embeddings=upstream_embeddings,
                    grad_scores=upstream_scores,
                )
            )
            return float(
                (out.frame_logits * upstream_logits).sum()
                + (out.frame_scores * upstream_scores).sum()
                + (out.embeddings * upstream_embeddings).sum()
            )

        return params, run

    return build


# Losses


def _focal(rng: np.random.Generator) -> tuple[list[Parameter], Closure]:
    scores = Parameter("scores", rng.uniform(0.05, 0.95, size=(BATCH, LENGTH)))
    pseudo = rng.random((BATCH, LENGTH)) < 0.4
    mask = _mask()

    def run() -> float:
        scores.zero_grad()
        loss, grad = focal_loss(scores.value, pseudo, mask, alpha=0.75, gamma=2.0)
        scores.accumulate(grad)
        return loss

    return [scores], run


def _topk_bce(rng: np.random.Generator) -> tuple[list[Parameter], Closure]:
    logits = Parameter("logits", rng.normal(size=(3, LENGTH)))
    lengths = np.array([LENGTH, 9, 5])
    labels = np.array([1, 0, 1])

    def run() -> float:
        logits.zero_grad()
        pooled, picked = batch_topk_scores(logits.value, lengths, 0.25)
        loss, grad_pooled = video_cls_loss(pooled, labels)
        logits.accumulate(topk_scatter(grad_pooled, picked, logits.value.shape))
        return loss

    return [logits], run


def _triplet(rng: np.random.Generator) -> tuple[list[Parameter], Closure]:
    embeddings = Parameter("embeddings", rng.normal(size=(4, CHANNELS, LENGTH)))
    frame_values = rng.normal(size=(4, LENGTH))
    pseudo = rng.random((4, LENGTH)) < 0.3
    labels = np.array([1, 1, 0, 0])
    mask = np.ones((4, LENGTH), dtype=bool)
    mask[3, 8:] = False

    def run() -> float:
        embeddings.zero_grad()
        selection = build_triplet(embeddings.value, frame_values, pseudo, labels, mask, 0.25)
        if selection is None:
            raise GradCheckError("Triplet check batch must hold both classes")
        value, grad_a, grad_p, grad_n = triplet_loss(
            selection.anchor, selection.positive, selection.negative, margin=50.0
        )
        embeddings.accumulate(
            selection.embedding_grad(embeddings.value.shape, grad_a, grad_p, grad_n)
        )
        return value

    return [embeddings], run


def _total_loss(rng: np.random.Generator) -> tuple[list[Parameter], Closure]:
    terms = Parameter("terms", rng.uniform(0.1, 2.0, size=3))
    log_vars = Parameter("log_vars", rng.normal(scale=0.5, size=3))

    def run() -> float:
        terms.zero_grad()
        log_vars.zero_grad()
        breakdown = total_loss(*terms.value, log_vars.value)
        terms.accumulate(breakdown.grad_terms)
        log_vars.accumulate(breakdown.grad_log_vars)
        return breakdown.total

    return [terms, log_vars], run


CHECKS: dict[str, Builder] = {
    "conv1d": _conv1d,
    "avg_pool1d": _avg_pool1d,
    "max_pool1d": _max_pool1d,
    "global_pools": _global_pools,
    "linear": _linear,
    "softmax": _elementwise(
        lambda x: softmax(x, axis=1), lambda g, out, _: softmax_backward(g, out, axis=1)
    ),
    "sigmoid": _elementwise(sigmoid, lambda g, out, _: sigmoid_backward(g, out)),
    "relu": _elementwise(relu, lambda g, _, x: relu_backward(g, x)),
    "batch_norm1d": _batch_norm1d,
    "tpp": _tpp,
    "aff": _aff,
    "tce": _tce,
    "cbam": _cbam,
    "backbone": _backbone,
    "head": _model(AblationSwitches(use_amtpn=False, use_cbam=False), depth=0),
    "model": _model(dropout=0.25),
    "focal": _focal,
    "topk_bce": _topk_bce,
    "triplet": _triplet,
    "total_loss": _total_loss,
}


@dataclass(slots=True)
class CheckResult:
    name: str
    seed: int
    report: GradCheckReport


def run_checks(
    names: Sequence[str] | None = None,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    tolerance: float = 1e-4,
    max_entries: int | None = 24,
) -> list[CheckResult]:
    results: list[CheckResult] = []
    for name in names or list(CHECKS):
        if name not in CHECKS:
            raise GradCheckError(f"Unknown gradient check {name!r}")
        for seed in seeds:
            params, closure = CHECKS[name](np.random.default_rng(seed))
            report = grad_check(closure, params, tolerance, max_entries=max_entries, seed=seed)
            logger.info("%s seed %d: %.3e", name, seed, report.max_relative_error)
            results.append(CheckResult(name, seed, report))
    return results


@cli.command(
    help="Checks every analytic backward pass against central finite differences at "
    "reduced shapes. Exits with code 8 if any check exceeds the tolerance."
)
@click.option(
    "--check",
    "names",
    multiple=True,
    type=click.Choice(list(CHECKS)),
    help="Check to run; repeatable. By default all checks.",
)
@click.option("--seeds", type=click.IntRange(min=1), default=5, show_default=True)
@click.option("--tolerance", type=float, default=1e-4, show_default=True)
@click.option(
    "--max-entries",
    type=click.IntRange(min=1),
    default=24,
    show_default=True,
    help="Entries sampled per parameter.",
)
def gradcheck(names: tuple[str, ...], seeds: int, tolerance: float, max_entries: int) -> None:
    results = run_checks(list(names) or None, range(seeds), tolerance, max_entries)
    worst: dict[str, float] = {}
    for result in results:
        worst[result.name] = max(worst.get(result.name, 0.0), result.report.max_relative_error)
    failed = [name for name, error in worst.items() if error > tolerance]
    for name, error in worst.items():
        status = "FAIL" if name in failed else "ok"
        click.echo(f"{name:<14} {error:.3e}  {status}")
    if failed:
        raise GradCheckError(f"Gradient mismatch above {tolerance:g} in: {', '.join(failed)}")
