"""Training objectives: weighted cross-entropy, per-pixel-minimum photometric
reprojection with SSIM, edge-aware smoothness, and their combination.

Images are NCHW on the normalized [0, 1] scale unless stated otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ContractError, DimensionError, Tensor

ALPHA = 0.85
BETA = 1e-3
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
LOG_CLAMP = 1e-7
ENET_C = 1.02
IGNORE_LABEL = 255


def class_weights(label_histogram, c: float = ENET_C) -> np.ndarray:
    """ENet-style weights ``1 / ln(c + p_s)`` from per-class pixel counts."""
    counts = np.asarray(label_histogram, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise ContractError("class_weights needs a histogram with a positive total")
    return 1.0 / np.log(c + counts / total)


def label_histogram(labels: np.ndarray, num_classes: int) -> np.ndarray:
    flat = np.asarray(labels).ravel()
    flat = flat[flat != IGNORE_LABEL]
    return np.bincount(flat, minlength=num_classes)[:num_classes]


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float64) -> np.ndarray:
    """(N, H, W) integer labels -> (N, S, H, W); ignored pixels get all zeros."""
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], num_classes) + labels.shape[1:], dtype=dtype)
    for s in range(num_classes):
        out[:, s] = labels == s
    return out


def weighted_cross_entropy(probs: Tensor, target_one_hot, weights=None) -> Tensor:
    """Mean over labelled pixels of ``-sum_s w_s * ybar_s * log(y_s)``.

    ``probs`` and ``target_one_hot`` are (N, S, H, W); the log is clamped at
    ``log(1e-7)``. Pixels whose one-hot row is all zero (ignore label) do not
    count towards the pixel total.
    """
    target = np.asarray(target_one_hot.data if isinstance(target_one_hot, Tensor) else target_one_hot)
    if probs.shape != target.shape:
        raise DimensionError(f"probs {probs.shape} vs targets {target.shape}")
    s = probs.shape[1]
    w = np.ones(s) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (s,):
        raise DimensionError(f"expected {s} class weights, got {w.shape}")
    n_pix = max(int(round(float(target.sum()))), 1)
    coeff = (target * w.reshape(1, s, 1, 1)).astype(probs.dtype)
    logp = T.log(T.maximum(probs, LOG_CLAMP))
    return -(logp * coeff).sum() * (1.0 / n_pix)


def ssim_map(a: Tensor, b: Tensor) -> Tensor:
    """Per-pixel SSIM from 3x3 local statistics (reflection padded).

    Each channel is clipped to [0, 1], then the channels are averaged, giving
    an (N, 1, H, W) map.
    """
    if a.shape != b.shape:
        raise DimensionError(f"ssim: {a.shape} vs {b.shape}")
    a = T.pad2d(a, 1)
    b = T.pad2d(b, 1)
    mu_a = T.avg_pool(a)
    mu_b = T.avg_pool(b)
    var_a = T.avg_pool(a * a) - mu_a * mu_a
    var_b = T.avg_pool(b * b) - mu_b * mu_b
    cov = T.avg_pool(a * b) - mu_a * mu_b
    num = (mu_a * mu_b * 2.0 + SSIM_C1) * (cov * 2.0 + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return T.clip(num / den, 0.0, 1.0).mean(axis=1, keepdims=True)


def reprojection_error(target: Tensor, warped: Tensor, alpha: float = ALPHA) -> Tensor:
    """(N, 1, H, W) map of ``alpha/2 (1 - SSIM) + (1 - alpha) mean_c |diff|``."""
    l1 = T.abs_(target - warped).mean(axis=1, keepdims=True)
    return (1.0 - ssim_map(target, warped)) * (alpha / 2.0) + l1 * (1.0 - alpha)


def photometric_loss(target, warped: Sequence[Tensor], alpha: float = ALPHA) -> Tensor:
    """Per-pixel minimum over candidate warps, averaged over all pixels."""
    warped = list(warped)
    if not warped:
        raise ContractError("photometric_loss needs at least one warped frame")
    target = T.as_tensor(target, like=warped[0])
    errors = [reprojection_error(target, w, alpha) for w in warped]
    best = errors[0]
    for e in errors[1:]:
        best = T.minimum(best, e)
    return best.mean()


def smoothness_loss(disparity: Tensor, image) -> Tensor:
    """Edge-aware first-order smoothness of the mean-normalized disparity.

    ``disparity`` is (N, 1, H, W) and positive; ``image`` is (N, C, H, W) at
    the same resolution. Each axis term is averaged over its valid forward
    difference positions and the two terms are summed.
    """
    image = T.as_tensor(image, like=disparity)
    if disparity.shape[2:] != image.shape[2:]:
        raise DimensionError(f"disparity {disparity.shape} vs image {image.shape}")
    norm = disparity / disparity.mean(axis=(2, 3), keepdims=True)
    total = None
    for axis in (2, 3):
        if disparity.shape[axis] < 2:
            continue  # no differences along a singleton axis
        lo = [slice(None)] * 4
        hi = [slice(None)] * 4
        lo[axis], hi[axis] = slice(None, -1), slice(1, None)
        lo, hi = tuple(lo), tuple(hi)
        grad = T.abs_(norm[hi] - norm[lo])
        weight = T.exp(-T.abs_(image[hi] - image[lo]).mean(axis=1, keepdims=True))
        term = (grad * weight).mean()
        total = term if total is None else total + term
    if total is None:
        raise DimensionError(f"smoothness needs at least 2 pixels along one axis, got {disparity.shape}")
    return total


def depth_loss(photometric, smoothness, beta: float = BETA):
    return photometric + smoothness * beta


@dataclass
class ScaleLoss:
    scale: int
    j_ph: float
    j_sm: float


@dataclass
class LossReport:
    j_ce: float = float("nan")
    j_ph: float = float("nan")
    j_sm: float = float("nan")
    j_depth: float = float("nan")
    per_scale: list[ScaleLoss] = field(default_factory=list)

    def csv_row(self, epoch: int, step: int) -> str:
        return f"{epoch},{step},{self.j_ce!r},{self.j_ph!r},{self.j_sm!r},{self.j_depth!r}"


def multiscale_depth_loss(photometric: Sequence[Tensor], smoothness: Sequence[Tensor],
                          beta: float = BETA) -> tuple[Tensor, LossReport]:
    """Combine per-scale terms: smoothness weighted by ``1/2^s``, then the mean
    over scales of ``J_ph + beta * J_sm``.

    The reported ``j_sm`` is the scale-weighted mean. The reported
    ``j_depth`` is recombined in float64 from the reported parts, so
    ``j_depth == j_ph + beta * j_sm`` holds exactly whatever the tensor dtype.
    """
    if len(photometric) != len(smoothness) or not photometric:
        raise ContractError("need one photometric and one smoothness term per scale")
    n = len(photometric)
    ph = photometric[0]
    sm = smoothness[0]
    for s in range(1, n):
        ph = ph + photometric[s]
        sm = sm + smoothness[s] * (1.0 / 2 ** s)
    ph = ph * (1.0 / n)
    sm = sm * (1.0 / n)
    total = depth_loss(ph, sm, beta)
    j_ph, j_sm = ph.item(), sm.item()
    report = LossReport(
        j_ph=j_ph, j_sm=j_sm, j_depth=j_ph + beta * j_sm,
        per_scale=[ScaleLoss(s, photometric[s].item(), smoothness[s].item()) for s in range(n)])
    return total, report
