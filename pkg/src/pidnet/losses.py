"""Training losses and the derived boundary targets.

Label maps are integer arrays with 255 as the ignore id. Losses take logits
at label resolution (callers upsample the head outputs first) and return
scalar tensors wired into the autodiff graph. Selection masks (hard-pixel
sets, boundary gates) are computed outside the graph, so they weight the
loss surface without contributing gradient paths of their own.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import Tensor

IGNORE_ID = 255


@dataclass(frozen=True)
class LossWeights:
    """Term multipliers for the composite objective, plus the gate threshold
    deciding which pixels the boundary-gated semantic term sees."""

    lambda0: float = 0.4
    lambda1: float = 20.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    boundary_threshold: float = 0.8

    def __post_init__(self):
        for name in ("lambda0", "lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 < self.boundary_threshold < 1.0:
            raise ValueError(
                f"boundary_threshold must lie in (0, 1), got {self.boundary_threshold}"
            )


@dataclass
class LossBreakdown:
    """The four weighted terms and their combination, all scalar tensors."""

    l0: Tensor
    l1: Tensor
    l2: Tensor
    l3: Tensor
    total: Tensor

    def values(self) -> tuple[float, float, float, float, float]:
        return (self.l0.item(), self.l1.item(), self.l2.item(),
                self.l3.item(), self.total.item())


def _checked_labels(logits: Tensor, labels, ignore_id: int) -> np.ndarray:
    labels = np.asarray(labels)
    if logits.ndim != 4:
        raise ValueError(f"logits must be N,K,H,W, got shape {logits.shape}")
    n, k, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ValueError(
            f"labels shape {labels.shape} does not match logits {logits.shape}"
        )
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"labels must be integers, got {labels.dtype}")
    bad = (labels != ignore_id) & ((labels < 0) | (labels >= k))
    if bad.any():
        raise ValueError(
            f"label value {labels[bad].flat[0]} outside [0, {k}) and not ignore"
        )
    return labels


def _log_prob_at_truth(logits: Tensor, labels: np.ndarray, ignore_id: int):
    """Per-pixel log probability of the true class, zero at ignored pixels.

    Returns (tensor of shape N,1,H,W, valid bool array of shape N,H,W).
    """
    n, k, h, w = logits.shape
    valid = labels != ignore_id
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    ni, hi, wi = np.nonzero(valid)
    onehot[ni, labels[valid], hi, wi] = 1.0
    picked = ops.sum_channels(ops.mul(ops.log_softmax_channels(logits),
                                      Tensor(onehot)))
    return picked, valid


def cross_entropy(logits: Tensor, labels, ignore_id: int = IGNORE_ID) -> Tensor:
    """Mean negative log-likelihood over non-ignored pixels."""
    labels = _checked_labels(logits, labels, ignore_id)
    picked, valid = _log_prob_at_truth(logits, labels, ignore_id)
    count = int(valid.sum())
    if count == 0:
        warnings.warn("cross_entropy: every pixel is ignored; returning 0",
                      RuntimeWarning, stacklevel=2)
        return Tensor(np.zeros((), dtype=logits.dtype))
    return ops.scale(ops.reduce_sum(picked), -1.0 / count)


def ohem_cross_entropy(logits: Tensor, labels, ignore_id: int = IGNORE_ID,
                       keep_threshold: float = 0.9,
                       min_kept_fraction: float = 1.0 / 16.0) -> Tensor:
    """Cross entropy averaged over hard pixels only.

    A pixel is hard when its true-class probability falls below
    keep_threshold. When fewer than min_kept_fraction of the valid pixels are
    hard, the highest-loss valid pixels fill the quota instead, so the term
    never collapses to an empty average.
    """
    if not 0.0 < keep_threshold <= 1.0:
        raise ValueError(f"keep_threshold must lie in (0, 1], got {keep_threshold}")
    if not 0.0 < min_kept_fraction <= 1.0:
        raise ValueError(
            f"min_kept_fraction must lie in (0, 1], got {min_kept_fraction}"
        )
    labels = _checked_labels(logits, labels, ignore_id)
    picked, valid = _log_prob_at_truth(logits, labels, ignore_id)
    count = int(valid.sum())
    if count == 0:
        warnings.warn("ohem_cross_entropy: every pixel is ignored; returning 0",
                      RuntimeWarning, stacklevel=2)
        return Tensor(np.zeros((), dtype=logits.dtype))
    min_kept = max(1, int(count * min_kept_fraction))
    true_prob = np.exp(picked.data[:, 0])
    hard = valid & (true_prob < keep_threshold)
    if hard.sum() >= min_kept:
        kept = hard
    else:
        losses = np.where(valid, -picked.data[:, 0], -np.inf)
        order = np.argsort(losses, axis=None)[::-1][:min_kept]
        kept = np.zeros(valid.shape, dtype=bool)
        kept.flat[order] = True
    weight = kept.astype(logits.dtype)[:, None]
    total = ops.reduce_sum(ops.mul(picked, Tensor(weight)))
    return ops.scale(total, -1.0 / int(kept.sum()))


def weighted_bce(boundary_logits: Tensor, boundary_gt) -> Tensor:
    """Binary cross entropy with the positive class upweighted by the batch
    negative:positive ratio, clamped to [1, 50]."""
    gt = np.asarray(boundary_gt)
    if gt.ndim == boundary_logits.ndim - 1:
        gt = gt[:, None]
    if tuple(gt.shape) != tuple(boundary_logits.shape):
        raise ValueError(
            f"boundary gt shape {gt.shape} does not match logits "
            f"{boundary_logits.shape}"
        )
    if not np.isin(gt, (0, 1)).all():
        raise ValueError("boundary gt must be binary")
    y = gt.astype(boundary_logits.dtype)
    n_pos = float(y.sum())
    n_neg = float(y.size - n_pos)
    w_pos = 1.0 if n_pos == 0 else float(np.clip(n_neg / n_pos, 1.0, 50.0))
    pos_term = ops.mul(Tensor(w_pos * y),
                       ops.softplus(ops.scale(boundary_logits, -1.0)))
    neg_term = ops.mul(Tensor(1.0 - y), ops.softplus(boundary_logits))
    return ops.scale(ops.reduce_sum(ops.add(pos_term, neg_term)), 1.0 / y.size)


def bas_loss(seg_logits: Tensor, labels, boundary_logits: Tensor,
             threshold: float = 0.8, ignore_id: int = IGNORE_ID) -> Tensor:
    """Semantic cross entropy restricted to pixels the boundary head is
    confident about, normalized by the selected count.

    The gate is read from the boundary head's values, not its graph, so this
    term trains the segmentation logits only.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    labels = _checked_labels(seg_logits, labels, ignore_id)
    if boundary_logits.shape != (seg_logits.shape[0], 1, *seg_logits.shape[2:]):
        raise ValueError(
            f"boundary logits shape {boundary_logits.shape} does not match "
            f"segmentation logits {seg_logits.shape}"
        )
    picked, valid = _log_prob_at_truth(seg_logits, labels, ignore_id)
    with np.errstate(over="ignore"):
        gate = 1.0 / (1.0 + np.exp(-boundary_logits.data[:, 0]))
    selected = valid & (gate > threshold)
    weight = selected.astype(seg_logits.dtype)[:, None]
    total = ops.reduce_sum(ops.mul(picked, Tensor(weight)))
    return ops.scale(total, -1.0 / max(1, int(selected.sum())))


def composite_loss(l0: Tensor, l1: Tensor, l2: Tensor, l3: Tensor,
                   weights: LossWeights = LossWeights()) -> LossBreakdown:
    """Weighted sum of the four terms; the breakdown keeps each term live."""
    total = ops.add(
        ops.add(ops.scale(l0, weights.lambda0), ops.scale(l1, weights.lambda1)),
        ops.add(ops.scale(l2, weights.lambda2), ops.scale(l3, weights.lambda3)),
    )
    return LossBreakdown(l0=l0, l1=l1, l2=l2, l3=l3, total=total)


# ---------------------------------------------------------------------------
# boundary targets


def chebyshev_dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation with a square structuring element of the given radius."""
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    mask = np.asarray(mask, dtype=bool)
    squeeze = mask.ndim == 2
    if squeeze:
        mask = mask[None]
    h, w = mask.shape[1:]
    for _ in range(radius):
        padded = np.pad(mask, ((0, 0), (1, 1), (1, 1)))
        grown = np.zeros_like(mask)
        for di in range(3):
            for dj in range(3):
                grown |= padded[:, di:di + h, dj:dj + w]
        mask = grown
    return mask[0] if squeeze else mask


def extract_boundary_gt(labels, radius: int = 2,
                        ignore_id: int = IGNORE_ID) -> np.ndarray:
    """Mark pixels whose 4-neighborhood crosses a class edge, then thicken.

    A pixel is a boundary seed iff it and a horizontal or vertical neighbor
    hold different non-ignore labels; the seed set is dilated by the
    Chebyshev radius. Uniform maps produce all zeros.
    """
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    arr = np.asarray(labels)
    if not np.issubdtype(arr.dtype, np.integer):
        raise ValueError(f"labels must be integers, got {arr.dtype}")
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"labels must be H,W or N,H,W, got shape {arr.shape}")
    valid = arr != ignore_id
    mask = np.zeros(arr.shape, dtype=bool)
    horiz = (arr[:, :, 1:] != arr[:, :, :-1]) & valid[:, :, 1:] & valid[:, :, :-1]
    mask[:, :, 1:] |= horiz
    mask[:, :, :-1] |= horiz
    vert = (arr[:, 1:, :] != arr[:, :-1, :]) & valid[:, 1:, :] & valid[:, :-1, :]
    mask[:, 1:, :] |= vert
    mask[:, :-1, :] |= vert
    mask = chebyshev_dilate(mask, radius)
    out = mask.astype(np.uint8)
    return out[0] if squeeze else out


def maxpool_mask(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Downsample a binary mask by block maximum, preserving any hit."""
    mask = np.asarray(mask)
    squeeze = mask.ndim == 2
    if squeeze:
        mask = mask[None]
    n, h, w = mask.shape
    if h % out_h or w % out_w:
        raise ValueError(
            f"mask extent {h}x{w} is not a multiple of target {out_h}x{out_w}"
        )
    fh, fw = h // out_h, w // out_w
    out = mask.reshape(n, out_h, fh, out_w, fw).max(axis=(2, 4))
    return out[0] if squeeze else out
