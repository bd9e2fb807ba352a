"""Loss terms and their homoscedastic-uncertainty combination.

Each loss returns its value together with the gradient(s) w.r.t. its inputs so the trainer
can chain them into ``DamsModel.backward``.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt

from .const import PROBABILITY_CLAMP
from .exceptions import DegenerateBatchError, DimensionError, TrainingAbortedError
from .tensor import Array, Mask, sigmoid

MAX_LOG_LOSS = -math.log(PROBABILITY_CLAMP)


def topk_count(length: int, fraction: float) -> int:
    # round() keeps e.g. 0.1 * 30 from landing just above 3.0 before ceil
    return max(1, math.ceil(round(fraction * length, 9)))


def focal_loss(
    frame_scores: Array,
    pseudo: npt.ArrayLike,
    mask: Mask | None,
    alpha: float = 0.75,
    gamma: float = 2.0,
) -> tuple[float, Array]:
    """Mean over valid frames of -alpha_t (1 - p_t)^gamma ln p_t, p_t clamped to
    [1e-7, 1 - 1e-7]. Returns the loss and its gradient w.r.t. ``frame_scores``."""
    scores = np.asarray(frame_scores, dtype=np.float64)
    targets = np.asarray(pseudo).astype(bool)
    valid = np.ones(scores.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if scores.shape != targets.shape or scores.shape != valid.shape:
        raise DimensionError("Scores, pseudo-labels and mask must share one shape")
    count = int(valid.sum())
    if count == 0:
        raise DegenerateBatchError("Focal loss over a batch with no valid frames")

    raw = np.where(targets, scores, 1.0 - scores)
    p = np.clip(raw, PROBABILITY_CLAMP, 1.0 - PROBABILITY_CLAMP)
    weight = np.where(targets, alpha, 1.0 - alpha)
    modulator = (1.0 - p) ** gamma
    log_p = np.log(p)
    per_frame = -weight * modulator * log_p
    loss = float(per_frame[valid].sum() / count)

    grad_p = -weight * modulator / p
    if gamma > 0:
        grad_p = grad_p + weight * gamma * (1.0 - p) ** (gamma - 1.0) * log_p
    inside = (raw > PROBABILITY_CLAMP) & (raw < 1.0 - PROBABILITY_CLAMP)
    grad = np.where(targets, grad_p, -grad_p) * inside * valid / count
    return loss, grad


def topk_video_score(frame_values: Array, fraction: float) -> tuple[float, npt.NDArray[np.intp]]:
    """Mean of the k = ceil(fraction * T) largest values; ties go to the earlier frame.
    Returns the pooled value and the selected frame indices."""
    values = np.asarray(frame_values, dtype=np.float64)
    if values.ndim != 1 or values.size == 0:
        raise DimensionError(f"Top-k pooling needs a non-empty sequence, got {values.shape}")
    k = topk_count(values.size, fraction)
    indices = np.argsort(-values, kind="stable")[:k]
    return float(values[indices].mean()), indices


def batch_topk_scores(
    values: Array, lengths: npt.ArrayLike, fraction: float
) -> tuple[Array, list[npt.NDArray[np.intp]]]:
    """Top-k pooling of each row of [B, T] over its first ``lengths[b]`` frames."""
    pooled = np.empty(values.shape[0])
    picked: list[npt.NDArray[np.intp]] = []
    for row, length in enumerate(np.asarray(lengths)):
        pooled[row], indices = topk_video_score(values[row, : int(length)], fraction)
        picked.append(indices)
    return pooled, picked


def topk_scatter(
    grad_pooled: Array, picked: Sequence[npt.NDArray[np.intp]], shape: tuple[int, ...]
) -> Array:
    """Gradient of ``batch_topk_scores`` w.r.t. the [B, T] values."""
    grad = np.zeros(shape)
    for row, indices in enumerate(picked):
        grad[row, indices] += grad_pooled[row] / indices.size
    return grad


def video_cls_loss(video_logits: Array, labels: npt.ArrayLike) -> tuple[float, Array]:
    """Mean binary cross-entropy of sigmoid(video logit); each term is capped at -ln 1e-7.
    Returns the loss and its gradient w.r.t. the logits."""
    logits = np.asarray(video_logits, dtype=np.float64)
    targets = np.asarray(labels, dtype=np.float64)
    if logits.shape != targets.shape or logits.size == 0:
        raise DimensionError("Video logits and labels must be non-empty and equally long")
    # softplus(z) - y z is -ln sigmoid(z) for y=1 and -ln(1 - sigmoid(z)) for y=0
    softplus = np.logaddexp(0.0, logits)
    per_video = softplus - targets * logits
    capped = per_video >= MAX_LOG_LOSS
    per_video = np.minimum(per_video, MAX_LOG_LOSS)
    n = logits.size
    grad = np.where(capped, 0.0, (sigmoid(logits) - targets) / n)
    return float(per_video.mean()), grad


def triplet_loss(
    anchor: Array, positive: Array, negative: Array, margin: float = 1.0
) -> tuple[float, Array, Array, Array]:
    """max(0, |a - p|^2 - |a - n|^2 + m) with gradients w.r.t. (a, p, n)."""
    if not (anchor.shape == positive.shape == negative.shape):
        raise DimensionError("Triplet embeddings must share one shape")
    to_positive = anchor - positive
    to_negative = anchor - negative
    value = float(to_positive @ to_positive - to_negative @ to_negative + margin)
    if value <= 0:
        zero = np.zeros_like(anchor)
        return 0.0, zero, zero.copy(), zero.copy()
    grad_anchor = 2.0 * (to_positive - to_negative)
    return value, grad_anchor, -2.0 * to_positive, 2.0 * to_negative


@dataclass(slots=True)
class TripletSelection:
    """Frames feeding each triplet role, as (video, frame) index pairs into [B, C, T]."""

    anchor_frames: tuple[npt.NDArray[np.intp], npt.NDArray[np.intp]]
    positive_frames: tuple[npt.NDArray[np.intp], npt.NDArray[np.intp]]
    negative_frames: tuple[npt.NDArray[np.intp], npt.NDArray[np.intp]]
    anchor: Array
    positive: Array
    negative: Array

    def embedding_grad(
        self,
        shape: tuple[int, ...],
        grad_anchor: Array,
        grad_positive: Array,
        grad_negative: Array,
    ) -> Array:
        grad = np.zeros(shape)
        for (videos, frames), role_grad in (
            (self.anchor_frames, grad_anchor),
            (self.positive_frames, grad_positive),
            (self.negative_frames, grad_negative),
        ):
            share = role_grad / videos.size
            np.add.at(grad, (videos, slice(None), frames), share[None, :].repeat(videos.size, 0))
        return grad


def _role_mean(
    embeddings: Array, frames: tuple[npt.NDArray[np.intp], npt.NDArray[np.intp]]
) -> Array:
    videos, times = frames
    return embeddings[videos, :, times].mean(axis=0)


def build_triplet(
    embeddings: Array,
    frame_values: Array,
    pseudo: npt.ArrayLike,
    video_labels: npt.ArrayLike,
    mask: Mask | None,
    fraction: float,
) -> TripletSelection | None:
    """Anchor: top-k frames of anomalous videos. Positive: pseudo-positive frames of
    anomalous videos, or the anchor frames when there are none. Negative: all valid frames
    of normal videos. Returns None unless the batch holds both classes."""
    labels = np.asarray(video_labels).astype(bool)
    if labels.all() or not labels.any():
        return None
    batch, _, length = embeddings.shape
    valid = np.ones((batch, length), dtype=bool) if mask is None else np.asarray(mask, bool)
    pseudo_arr = np.asarray(pseudo).astype(bool) & valid

    anchor_v: list[npt.NDArray[np.intp]] = []
    anchor_t: list[npt.NDArray[np.intp]] = []
    for video in np.flatnonzero(labels):
        valid_frames = np.flatnonzero(valid[video])
        _, picked = topk_video_score(frame_values[video, valid_frames], fraction)
        anchor_t.append(valid_frames[picked])
        anchor_v.append(np.full(picked.size, video))
    anchor_frames = (np.concatenate(anchor_v), np.concatenate(anchor_t))

    positive_mask = pseudo_arr & labels[:, None]
    positive_frames = anchor_frames
    if positive_mask.any():
        pos_v, pos_t = np.nonzero(positive_mask)
        positive_frames = (pos_v, pos_t)
    neg_v, neg_t = np.nonzero(valid & ~labels[:, None])
    negative_frames = (neg_v, neg_t)

    return TripletSelection(
        anchor_frames=anchor_frames,
        positive_frames=positive_frames,
        negative_frames=negative_frames,
        anchor=_role_mean(embeddings, anchor_frames),
        positive=_role_mean(embeddings, positive_frames),
        negative=_role_mean(embeddings, negative_frames),
    )


@dataclass(slots=True)
class LossBreakdown:
    l_pse: float
    l_cls: float
    l_trip: float
    total: float
    sigma2: tuple[float, float, float]
    weights: tuple[float, float, float]
    grad_terms: Array
    grad_log_vars: Array


def total_loss(
    l_pse: float,
    l_cls: float,
    l_trip: float,
    log_vars: Array,
    active: Sequence[bool] = (True, True, True),
) -> LossBreakdown:
    """sum_i [l_i / (2 sigma_i^2) + ln(1 + sigma_i^2)] with sigma_i^2 = exp(rho_i).

    Inactive terms (ablated losses) contribute nothing and receive no gradient.
    """
    terms = np.array([l_pse, l_cls, l_trip], dtype=np.float64)
    if not np.all(np.isfinite(terms)):
        raise TrainingAbortedError(f"Non-finite loss component: {terms.tolist()}")
    sigma2 = np.exp(np.asarray(log_vars, dtype=np.float64))
    on = np.asarray(active, dtype=bool)
    weights = 1.0 / (2.0 * sigma2)
    per_term = np.where(on, terms * weights + np.log1p(sigma2), 0.0)
    total = float(per_term.sum())
    if not math.isfinite(total):
        raise TrainingAbortedError(f"Non-finite total loss from log-variances {log_vars}")
    grad_terms = np.where(on, weights, 0.0)
    grad_log_vars = np.where(on, -terms * weights + sigma2 / (1.0 + sigma2), 0.0)
    return LossBreakdown(
        l_pse=float(terms[0]),
        l_cls=float(terms[1]),
        l_trip=float(terms[2]),
        total=total,
        sigma2=(float(sigma2[0]), float(sigma2[1]), float(sigma2[2])),
        weights=(float(weights[0]), float(weights[1]), float(weights[2])),
        grad_terms=grad_terms,
        grad_log_vars=grad_log_vars,
    )
