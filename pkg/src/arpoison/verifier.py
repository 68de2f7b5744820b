"""A three-layer CNN whose weights are written down, not trained.

conv (one AR filter per class, no bias) -> ReLU -> global spatial max ->
linear with W = -I, b = 1.  A plane from process ``i`` gives a zero map
under filter ``i``, so logit ``i`` is exactly 1 and every other logit is
at most 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ar
from .ar import channel_rng, derive_seed
from ._kernels import fill_planes
from .errors import ChannelOutOfRange, DimensionTooSmall, ValidationError
from .filters import ar_filter, cross_correlate_valid
from .search import ARProcessSet


@dataclass(frozen=True)
class ManualCNN:
    conv_filters: np.ndarray  # (K, V, V)
    linear_weights: np.ndarray  # (K, K)
    linear_bias: np.ndarray  # (K,)

    @property
    def num_classes(self) -> int:
        return self.conv_filters.shape[0]


def build_manual_cnn(pset: ARProcessSet, channel: int = 0) -> ManualCNN:
    if not 0 <= channel < pset.channels:
        raise ChannelOutOfRange(f"channel {channel} not in [0, {pset.channels})")
    kernels = np.stack([ar_filter(p).kernel for p in pset.channel(channel)])
    k = kernels.shape[0]
    return ManualCNN(kernels, -np.eye(k), np.ones(k))


def logits_batch(cnn: ManualCNN, deltas: np.ndarray) -> np.ndarray:
    """(..., H, W) -> (..., K) logits."""
    deltas = np.asarray(deltas, dtype=np.float64)
    pooled = []
    for kernel in cnn.conv_filters:
        fmap = np.maximum(cross_correlate_valid(deltas, kernel), 0.0)
        pooled.append(fmap.max(axis=(-2, -1)))
    pooled = np.stack(pooled, axis=-1)
    return pooled @ cnn.linear_weights.T + cnn.linear_bias


def forward(cnn: ManualCNN, delta: np.ndarray):
    """Return ``(logits, predicted_class)`` for one plane; ties go to the lowest index."""
    delta = np.asarray(delta, dtype=np.float64)
    if delta.ndim != 2:
        raise ValidationError("forward expects a single H x W plane")
    v = cnn.conv_filters.shape[1]
    if min(delta.shape) < v:
        raise DimensionTooSmall(f"plane {delta.shape} smaller than the {v}x{v} filters")
    logits = logits_batch(cnn, delta)
    return logits, int(np.argmax(logits))


def generate_planes(coeffs, seeds, height: int, width: int, extra: int = ar.DEFAULT_EXTRA_CROP) -> np.ndarray:
    """Batch of cropped single-channel planes, one per seed, shape (N, H, W)."""
    v = coeffs.window_side
    cut = v - 1 + extra
    planes = np.zeros((len(seeds), height + cut, width + cut))
    for plane, seed in zip(planes, seeds):
        ar._fill_init_band(plane, v, channel_rng(seed, 0))
    weights = np.broadcast_to(coeffs.weights, (len(seeds), v, v)).copy()
    fill_planes(planes, weights)
    return planes[:, cut:, cut:]


@dataclass
class AuditResult:
    channel: int
    per_class: int
    height: int
    width: int
    confusion: np.ndarray
    gap_min: np.ndarray
    gap_mean: np.ndarray
    matching_logit_min: np.ndarray

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.confusion) / self.confusion.sum())

    @property
    def class_accuracy(self) -> np.ndarray:
        return np.diag(self.confusion) / self.confusion.sum(axis=1)

    def to_dict(self) -> dict:
        return {
            "channel": self.channel,
            "per_class": self.per_class,
            "height": self.height,
            "width": self.width,
            "accuracy": self.accuracy,
            "class_accuracy": self.class_accuracy.tolist(),
            "confusion": self.confusion.tolist(),
            "gap_min": self.gap_min.tolist(),
            "gap_mean": self.gap_mean.tolist(),
            "matching_logit_min": self.matching_logit_min.tolist(),
        }


def verify_separability(
    pset: ARProcessSet,
    per_class: int,
    height: int = 32,
    width: int = 32,
    channel: int = 0,
    seed: int = 0,
    extra: int = ar.DEFAULT_EXTRA_CROP,
) -> AuditResult:
    """Classify ``per_class`` fresh cropped planes per class with the manual CNN."""
    if per_class < 1:
        raise ValidationError("per_class must be >= 1")
    cnn = build_manual_cnn(pset, channel)
    k = cnn.num_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    gap_min, gap_mean, match_min = np.zeros(k), np.zeros(k), np.zeros(k)
    chunk = 2000
    for cls, coeffs in enumerate(pset.channel(channel)):
        gaps, matches = [], []
        for start in range(0, per_class, chunk):
            seeds = [
                derive_seed(seed, ar.STREAM_AUDIT, channel, cls, s)
                for s in range(start, min(start + chunk, per_class))
            ]
            logits = logits_batch(cnn, generate_planes(coeffs, seeds, height, width, extra))
            pred = np.argmax(logits, axis=1)
            np.add.at(confusion[cls], pred, 1)
            others = np.delete(logits, cls, axis=1)
            best_other = others.max(axis=1) if k > 1 else np.full(len(seeds), -np.inf)
            gaps.append(logits[:, cls] - best_other)
            matches.append(logits[:, cls])
        gaps = np.concatenate(gaps)
        gap_min[cls], gap_mean[cls] = gaps.min(), gaps.mean()
        match_min[cls] = np.concatenate(matches).min()
    return AuditResult(channel, per_class, height, width, confusion, gap_min, gap_mean, match_min)
