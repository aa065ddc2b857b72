"""Training objectives as pure differentiable functions.

The contrastive terms operate on paired feature sets sampled at identical
spatial locations from the synthetic image (anchors) and the original
image (positives). Everything is computed in log-sum-exp form: at the
default temperature 0.07 the plain exponential fraction overflows float32.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class ContrastConfig:
    tau: float = 0.07
    beta: float = 0.1
    patches_per_layer: int = 256
    layer_ids: tuple[int, ...] | None = None
    proj_dim: int = 256
    identity_weight: float = 1.0

    def __post_init__(self):
        if self.tau <= 0 or self.beta <= 0:
            raise ValueError("temperatures tau and beta must be positive")
        if self.patches_per_layer < 2:
            raise ValueError("patches_per_layer must be at least 2")


@dataclass
class PatchFeatureSet:
    """L2-normalized feature pairs sampled at shared spatial locations.

    anchors come from the synthetic image's encoding, positives from the
    original image's encoding at the same locations.
    """

    anchors: torch.Tensor
    positives: torch.Tensor
    layer_id: int = 0
    locations: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.anchors.ndim != 2 or self.anchors.shape != self.positives.shape:
            raise ValueError(
                f"anchors/positives must be matching (N, D), got "
                f"{tuple(self.anchors.shape)} and {tuple(self.positives.shape)}"
            )
        with torch.no_grad():
            for name, t in (("anchors", self.anchors), ("positives", self.positives)):
                norms = t.norm(dim=1)
                err = (norms - 1.0).abs().max().item()
                if err > 1e-5:
                    raise ValueError(f"{name} are not unit-norm (max deviation {err:.2e})")

    @property
    def n(self) -> int:
        return self.anchors.shape[0]


def _require_negatives(n: int) -> None:
    if n < 2:
        raise ValueError("contrastive loss needs negatives (N >= 2)")


def patch_nce(fs: PatchFeatureSet, tau: float = 0.07) -> torch.Tensor:
    """Noise-contrastive loss over patch pairs.

    For each anchor i the positive is y_i and the negatives are the other
    y_j; returns the sum over anchors of -log softmax at the positive.
    """
    _require_negatives(fs.n)
    logits = fs.anchors @ fs.positives.T / tau
    target = torch.arange(fs.n, device=logits.device)
    return F.cross_entropy(logits, target, reduction="sum")


def contrast_weights(sims: torch.Tensor, beta: float = 0.1) -> torch.Tensor:
    """Similarity-softmax weights over negatives only.

    Row i is softmax(sims[i, j != i] / beta): harder (more similar)
    negatives get larger weights, rows sum to 1 over j != i, and the
    diagonal is 0 by convention.
    """
    n = sims.shape[0]
    _require_negatives(n)
    masked = sims / beta
    eye = torch.eye(n, dtype=torch.bool, device=sims.device)
    masked = masked.masked_fill(eye, float("-inf"))
    return torch.softmax(masked, dim=1)


def _log_contrast_weights(sims: torch.Tensor, beta: float) -> torch.Tensor:
    n = sims.shape[0]
    eye = torch.eye(n, dtype=torch.bool, device=sims.device)
    masked = (sims / beta).masked_fill(eye, float("-inf"))
    return F.log_softmax(masked, dim=1)


def weight_nce_with_log_weights(
    fs: PatchFeatureSet, log_weights: torch.Tensor, tau: float = 0.07
) -> torch.Tensor:
    """Weighted NCE with a fixed (already detached) log-weight matrix."""
    _require_negatives(fs.n)
    logits = fs.anchors @ fs.positives.T / tau
    pos = logits.diagonal()
    n = fs.n
    eye = torch.eye(n, dtype=torch.bool, device=logits.device)
    # denominator terms: the positive itself plus weighted negatives
    weighted = logits + log_weights
    terms = torch.where(eye, logits, weighted)
    log_denom = torch.logsumexp(terms, dim=1)
    return (log_denom - pos).sum()


def weight_nce(fs: PatchFeatureSet, tau: float = 0.07, beta: float = 0.1) -> torch.Tensor:
    """Contrastive loss whose negatives are re-weighted by similarity.

    The weights are a softmax over negatives at temperature beta and are
    treated as constants (detached) so they only rescale the pushing
    force, not redefine the gradient targets.
    """
    _require_negatives(fs.n)
    with torch.no_grad():
        sims = fs.anchors @ fs.positives.T
        log_w = _log_contrast_weights(sims, beta)
    return weight_nce_with_log_weights(fs, log_w, tau)


def cycle_loss(x: torch.Tensor, x_reconstructed: torch.Tensor) -> torch.Tensor:
    """Mean absolute reconstruction error."""
    if x.shape != x_reconstructed.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_reconstructed.shape)}")
    return (x - x_reconstructed).abs().mean()


def adversarial_loss(disc_out: torch.Tensor, target_is_real: bool) -> torch.Tensor:
    """Least-squares GAN objective: mean((d - t)^2), t = 1 real / 0 fake."""
    target = 1.0 if target_is_real else 0.0
    return ((disc_out - target) ** 2).mean()


def aux_seg_loss(
    pred_logits: torch.Tensor, target: torch.Tensor, smooth: float = 1e-5
) -> torch.Tensor:
    """Soft Dice plus cross-entropy, equally weighted.

    Accepts (C, *spatial) with (*spatial) targets, or batched
    (B, C, *spatial) with (B, *spatial); spatial rank is arbitrary.
    """
    if pred_logits.ndim == target.ndim + 1 and pred_logits.shape[-target.ndim:] == target.shape:
        pred_logits = pred_logits.unsqueeze(0)
        target = target.unsqueeze(0)
    if pred_logits.shape[0] != target.shape[0] or pred_logits.shape[2:] != target.shape[1:]:
        raise ValueError(
            f"logits {tuple(pred_logits.shape)} do not match target {tuple(target.shape)}"
        )
    n_classes = pred_logits.shape[1]
    target = target.long()
    if target.numel() and (target.min() < 0 or target.max() >= n_classes):
        raise ValueError(f"target classes outside [0, {n_classes})")

    log_probs = F.log_softmax(pred_logits, dim=1)
    ce = F.nll_loss(log_probs, target, reduction="mean")

    probs = log_probs.exp()
    one_hot = F.one_hot(target, n_classes).movedim(-1, 1).to(probs.dtype)
    dims = (0, *range(2, probs.ndim))
    intersect = (probs * one_hot).sum(dim=dims)
    denom = probs.sum(dim=dims) + one_hot.sum(dim=dims)
    dice_per_class = (2.0 * intersect + smooth) / (denom + smooth)
    dice = 1.0 - dice_per_class.mean()
    return dice + ce
