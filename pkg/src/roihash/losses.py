"""Training objectives: pairwise contrastive loss on continuous codes,
quantization and classification terms for stage 1, consistency and
diversity terms for stage 2, and the visual-similarity weight.

All losses stay finite for any input because the soft distance is clamped
away from {0, 1} before entering a log.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (Tensor, _accumulate, _as_tensor, _node, absolute, add, clamp,
                       div, exp, log, mul, neg, reshape, sub, tmean, tsum)

DIST_EPS = 1e-6

STAGE1_QUANT_WEIGHT = 0.5
STAGE1_CE_WEIGHT = 0.5
STAGE2_REG_WEIGHT = 0.1


@dataclass
class PairBatch:
    """One training pair: continuous codes, same-class flag, similarity
    score in [0,1], and a positive pair weight."""

    h_i: Tensor
    h_j: Tensor
    y: int
    similarity: float
    weight: float = 1.0

    def __post_init__(self):
        if self.y not in (0, 1):
            raise ValueError(f"y must be 0 or 1, got {self.y}")
        if not 0.0 <= self.similarity <= 1.0:
            raise ValueError(f"similarity must lie in [0,1], got {self.similarity}")
        if self.weight <= 0.0:
            raise ValueError(f"weight must be positive, got {self.weight}")


def soft_distance(h_i: Tensor, h_j: Tensor) -> Tensor:
    """(q - h_i . h_j) / 2q clamped into [eps, 1-eps].

    On exact +-1 codes this equals HammingDistance / q before clamping.
    """
    if h_i.data.shape != h_j.data.shape or h_i.data.ndim != 1:
        raise ValueError(f"soft_distance expects equal-length vectors, "
                         f"got {h_i.data.shape} and {h_j.data.shape}")
    q = h_i.data.shape[0]
    dot = tsum(mul(h_i, h_j))
    d = div(sub(_as_tensor(float(q)), dot), _as_tensor(2.0 * q))
    return clamp(d, DIST_EPS, 1.0 - DIST_EPS)


def soft_distance_matrix(codes: Tensor) -> Tensor:
    """All-pairs soft distance for a code matrix [N, q]."""
    q = codes.data.shape[1]
    d = div(sub(_as_tensor(float(q)), _gram(codes)), _as_tensor(2.0 * q))
    return clamp(d, DIST_EPS, 1.0 - DIST_EPS)


def _gram(codes: Tensor) -> Tensor:
    """codes @ codes.T with gradient routed to `codes` through both factors."""
    out = codes.data @ codes.data.T

    def backward(g):
        _accumulate(codes, (g + g.T) @ codes.data)

    return _node(out, (codes,), backward, "gram")


def contrastive_pair_loss(pair: PairBatch) -> Tensor:
    """w * (L_pos - L_neg) with
    L_pos = S * y * (-log(1 - d)) and L_neg = e^S * (1 - y) * log(d)."""
    d = soft_distance(pair.h_i, pair.h_j)
    s = pair.similarity
    l_pos = mul(_as_tensor(s * pair.y), neg(log(sub(_as_tensor(1.0), d))))
    l_neg = mul(_as_tensor(np.exp(s) * (1 - pair.y)), log(d))
    return mul(_as_tensor(pair.weight), sub(l_pos, l_neg))


def contrastive_batch(codes: Tensor, labels: np.ndarray, sim: np.ndarray,
                      weights: np.ndarray | None = None) -> Tensor:
    """Mean contrastive loss over all within-batch pairs i < j.

    `sim` is the [N, N] visual-similarity matrix; `weights` defaults to 1.
    """
    n = codes.data.shape[0]
    if n < 2:
        raise ValueError("contrastive_batch needs at least 2 codes")
    labels = np.asarray(labels)
    y = (labels[:, None] == labels[None, :]).astype(np.float64)
    mask = np.triu(np.ones((n, n)), k=1)
    if weights is None:
        weights = np.ones((n, n))
    d = soft_distance_matrix(codes)
    pos = mul(_as_tensor(sim * y * mask * weights), neg(log(sub(_as_tensor(1.0), d))))
    negt = mul(_as_tensor(np.exp(sim) * (1.0 - y) * mask * weights), log(d))
    total = sub(tsum(pos), tsum(negt))
    return div(total, _as_tensor(mask.sum()))


def quantization_loss(u: Tensor) -> Tensor:
    """log(1 + mean_i |1 - |u_i||), averaged over the batch for 2-D input.

    Zero exactly on +-1 codes; log(2) for the all-zero code.
    """
    dev = absolute(sub(_as_tensor(1.0), absolute(u)))
    if u.data.ndim == 1:
        inner = tmean(dev)
        return log(add(_as_tensor(1.0), inner))
    inner = tmean(dev, axis=1)
    return tmean(log(add(_as_tensor(1.0), inner)))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """-log softmax(z)[label]; accepts [C] + int or [N, C] + int array."""
    single = logits.data.ndim == 1
    z = logits if not single else _reshape_row(logits)
    n, c = z.data.shape
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if lab.shape[0] != n:
        raise ValueError(f"cross_entropy: {n} logit rows vs {lab.shape[0]} labels")
    if lab.min() < 0 or lab.max() >= c:
        raise ValueError(f"label out of range [0, {c}): {lab}")
    zmax = z.data.max(axis=1, keepdims=True)  # constant shift, exact for grads
    shifted = sub(z, _as_tensor(zmax))
    lse = log(tsum(exp(shifted), axis=1, keepdims=True))
    log_softmax = sub(shifted, lse)
    onehot = np.zeros((n, c))
    onehot[np.arange(n), lab] = 1.0
    picked = tsum(mul(_as_tensor(onehot), log_softmax))
    return div(neg(picked), _as_tensor(float(n)))


def _reshape_row(t: Tensor) -> Tensor:
    return reshape(t, (1, t.data.shape[0]))


def consistency_loss(h_orig: Tensor, h_trans: Tensor) -> Tensor:
    """Mean soft distance between original and transformed codes.

    Both arguments are [q] vectors or [N, q] batches with rows paired.
    """
    if h_orig.data.shape != h_trans.data.shape:
        raise ValueError(f"consistency_loss shape mismatch: "
                         f"{h_orig.data.shape} vs {h_trans.data.shape}")
    if h_orig.data.ndim == 1:
        return soft_distance(h_orig, h_trans)
    q = h_orig.data.shape[1]
    dots = tsum(mul(h_orig, h_trans), axis=1)
    d = div(sub(_as_tensor(float(q)), dots), _as_tensor(2.0 * q))
    return tmean(clamp(d, DIST_EPS, 1.0 - DIST_EPS))


def diversity_regularizer(codes: Tensor) -> Tensor:
    """-(1/N^2) * sum_{i != j} soft_distance(h_i, h_j); strictly negative
    whenever any pair differs."""
    n = codes.data.shape[0]
    if n < 2:
        raise ValueError(f"diversity_regularizer needs a batch of >= 2, got {n}")
    d = soft_distance_matrix(codes)
    off = 1.0 - np.eye(n)
    return div(neg(tsum(mul(_as_tensor(off), d))), _as_tensor(float(n * n)))


def stage1_total(contrast: Tensor, quant: Tensor, ce: Tensor) -> Tensor:
    """contrast + 0.5 * quant + 0.5 * ce."""
    return add(contrast, add(mul(_as_tensor(STAGE1_QUANT_WEIGHT), quant),
                             mul(_as_tensor(STAGE1_CE_WEIGHT), ce)))


def stage2_total(consist: Tensor, reg: Tensor,
                 reg_weight: float = STAGE2_REG_WEIGHT) -> Tensor:
    """consist + reg_weight * reg."""
    return add(consist, mul(_as_tensor(reg_weight), reg))


# ---------------------------------------------------------------------------
# Visual similarity weight (plain numpy; enters losses as constant data)

_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2


def downsample_8x8(img: np.ndarray) -> np.ndarray:
    """Average-pool a square grayscale image down to 8x8."""
    img = np.asarray(img, dtype=np.float64)
    img = img.reshape(img.shape[-2], img.shape[-1])
    h, w = img.shape
    if h % 8 or w % 8:
        raise ValueError(f"image size {img.shape} not divisible into 8x8 blocks")
    bh, bw = h // 8, w // 8
    return img.reshape(8, bh, 8, bw).mean(axis=(1, 3))


def _ssim_stats(a: np.ndarray, b: np.ndarray) -> float:
    mu_a, mu_b = a.mean(), b.mean()
    var_a, var_b = a.var(), b.var()
    cov = ((a - mu_a) * (b - mu_b)).mean()
    lum = (2 * mu_a * mu_b + _SSIM_C1) / (mu_a ** 2 + mu_b ** 2 + _SSIM_C1)
    struct = (2 * cov + _SSIM_C2) / (var_a + var_b + _SSIM_C2)
    return float(lum * struct)


def visual_similarity(img_a: np.ndarray, img_b: np.ndarray) -> float:
    """Structural similarity of the 8x8 thumbnails, mapped to [0, 1]."""
    a = downsample_8x8(img_a)
    b = downsample_8x8(img_b)
    s = _ssim_stats(a, b)
    return float(np.clip((s + 1.0) / 2.0, 0.0, 1.0))


def similarity_matrix(thumbs: np.ndarray) -> np.ndarray:
    """Pairwise visual similarity for a stack of 8x8 thumbnails [N, 8, 8]."""
    t = np.asarray(thumbs, dtype=np.float64).reshape(len(thumbs), -1)
    mu = t.mean(axis=1)
    var = t.var(axis=1)
    centered = t - mu[:, None]
    cov = centered @ centered.T / t.shape[1]
    lum = (2 * np.outer(mu, mu) + _SSIM_C1) / (mu[:, None] ** 2 + mu[None, :] ** 2 + _SSIM_C1)
    struct = (2 * cov + _SSIM_C2) / (var[:, None] + var[None, :] + _SSIM_C2)
    return np.clip((lum * struct + 1.0) / 2.0, 0.0, 1.0)
