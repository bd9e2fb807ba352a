"""Frame-level ranking metrics and the Complementarity Index diagnostic.

Tie conventions are fixed: ROC-AUC counts a tied positive/negative pair as one half, and
average precision moves all items sharing a score into the ranking together.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import numpy.typing as npt

from .config import MiEstimatorConfig
from .exceptions import DimensionError, UndefinedMetricError
from .tensor import Array


@dataclass(slots=True)
class ScoredFrames:
    scores: Array
    labels: npt.NDArray[np.int8]

    def __post_init__(self) -> None:
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.labels = (np.asarray(self.labels).ravel() > 0).astype(np.int8)
        if self.scores.shape != self.labels.shape:
            raise DimensionError("Scores and labels must have equal lengths")


def _tie_blocks(sf: ScoredFrames) -> tuple[npt.NDArray[np.int64], npt.NDArray[np.int64]]:
    """Positive and negative counts per distinct score, highest score first."""
    unique, inverse = np.unique(-sf.scores, return_inverse=True)
    positives = np.bincount(inverse, weights=sf.labels, minlength=unique.size).astype(np.int64)
    totals = np.bincount(inverse, minlength=unique.size).astype(np.int64)
    return positives, totals - positives


def roc_auc(sf: ScoredFrames) -> float:
    """P(score_pos > score_neg) + 1/2 P(tie), from a sorted sweep over tie blocks."""
    positives, negatives = _tie_blocks(sf)
    n_pos, n_neg = int(positives.sum()), int(negatives.sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC-AUC needs at least one positive and one negative frame")
    positives_above = np.concatenate([[0], np.cumsum(positives)[:-1]])
    # exact integer numerator: every negative beats nothing above it and ties half with its block
    twice_wins = int((negatives * (2 * positives_above + positives)).sum())
    return twice_wins / (2 * n_pos * n_neg)


def average_precision(sf: ScoredFrames) -> float:
    """sum_n (R_n - R_{n-1}) P_n over the descending sweep, one step per tie block."""
    positives, negatives = _tie_blocks(sf)
    n_pos = int(positives.sum())
    if n_pos == 0:
        raise UndefinedMetricError("Average precision needs at least one positive frame")
    tp = np.cumsum(positives)
    fp = np.cumsum(negatives)
    precision = tp / (tp + fp)
    return float((positives / n_pos * precision).sum())


# Mutual information


def quantile_bins(values: npt.ArrayLike, bins: int) -> npt.NDArray[np.intp]:
    """Bin by per-dimension quantile edges; equal values always share a bin."""
    array = np.asarray(values, dtype=np.float64)
    edges = np.unique(np.quantile(array, np.linspace(0.0, 1.0, bins + 1)[1:-1]))
    return np.searchsorted(edges, array, side="left")


def _as_bins(values: npt.ArrayLike, config: MiEstimatorConfig) -> npt.NDArray[np.intp]:
    array = np.asarray(values)
    if np.issubdtype(array.dtype, np.integer) or array.dtype == np.bool_:
        _, codes = np.unique(array, return_inverse=True)
        return codes.ravel()
    return quantile_bins(array, config.bins)


def entropy(bins: npt.ArrayLike) -> float:
    _, counts = np.unique(np.asarray(bins), return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def mi_discrete(
    a: npt.ArrayLike, b: npt.ArrayLike, config: MiEstimatorConfig | None = None
) -> float:
    """Plug-in mutual information in nats. Integer inputs are used as bins; real inputs are
    quantile-binned first."""
    config = config or MiEstimatorConfig()
    x = _as_bins(a, config)
    y = _as_bins(b, config)
    if x.size != y.size or x.size < 2:
        raise DimensionError("Mutual information needs two equal-length samples, M >= 2")
    nx, ny = int(x.max()) + 1, int(y.max()) + 1
    joint = np.bincount(x * ny + y, minlength=nx * ny).reshape(nx, ny) / x.size
    px = joint.sum(axis=1, keepdims=True)
    py = joint.sum(axis=0, keepdims=True)
    nonzero = joint > 0
    ratio = joint[nonzero] / (px @ py)[nonzero]
    return max(float((joint[nonzero] * np.log(ratio)).sum()), 0.0)


@dataclass(slots=True)
class ComplementarityReport:
    mi_i: float
    mi_j: float
    mi_joint: float
    index: float


def complementarity_index(
    feat_i: Array,
    feat_j: Array,
    labels: npt.ArrayLike,
    config: MiEstimatorConfig | None = None,
) -> ComplementarityReport:
    """(I(phi_i, phi_j; Y) - max(I(phi_i; Y), I(phi_j; Y))) / (I(phi_i; Y) + I(phi_j; Y)).

    Each branch is reduced to its channel mean per frame ([M, C] -> [M]) and quantile
    binned; the joint term bins the pair of scalars.
    """
    config = config or MiEstimatorConfig()
    y = np.asarray(labels).astype(np.int64)
    scalar_i = np.asarray(feat_i, dtype=np.float64).reshape(len(y), -1).mean(axis=1)
    scalar_j = np.asarray(feat_j, dtype=np.float64).reshape(len(y), -1).mean(axis=1)
    bins_i = quantile_bins(scalar_i, config.bins)
    bins_j = quantile_bins(scalar_j, config.bins)
    joint = bins_i * (int(bins_j.max()) + 1) + bins_j
    mi_i = mi_discrete(bins_i, y, config)
    mi_j = mi_discrete(bins_j, y, config)
    mi_joint = mi_discrete(joint, y, config)
    denominator = mi_i + mi_j
    if denominator < 1e-9:
        raise UndefinedMetricError("Neither branch carries label information; CI undefined")
    return ComplementarityReport(
        mi_i=mi_i,
        mi_j=mi_j,
        mi_joint=mi_joint,
        index=(mi_joint - max(mi_i, mi_j)) / denominator,
    )
