"""Loss functions for contrast conversion and segmentation training.

Every loss returns a mean-reduced scalar tensor.
"""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn.functional as F

from .data import FOREGROUND_CLASSES, N_CLASSES

DICE_EPS = 1e-5


def _check_same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _check_labels(labels: torch.Tensor, n_classes: int = N_CLASSES) -> None:
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes - 1}], got range [{int(labels.min())}, {int(labels.max())}]")


def one_hot(labels: torch.Tensor, n_classes: int = N_CLASSES) -> torch.Tensor:
    """(B, *spatial) integer labels -> (B, C, *spatial) float one-hot."""
    _check_labels(labels, n_classes)
    oh = F.one_hot(labels.long(), n_classes)
    return oh.movedim(-1, 1).to(torch.get_default_dtype())


def dice_loss(probs: torch.Tensor, onehot: torch.Tensor, classes: Sequence[int] = FOREGROUND_CLASSES, eps: float = DICE_EPS) -> torch.Tensor:
    """Batch soft-Dice loss over the foreground classes.

    Intersections and sums are pooled over batch and space before the
    division, then the per-class Dice values are averaged.
    """
    _check_same_shape(probs, onehot)
    dims = (0,) + tuple(range(2, probs.ndim))
    p = probs[:, list(classes)]
    g = onehot[:, list(classes)].to(probs.dtype)
    inter = (p * g).sum(dims)
    denom = p.sum(dims) + g.sum(dims)
    dice = (2 * inter + eps) / (denom + eps)
    return 1 - dice.mean()


def ce_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    _check_labels(labels, logits.shape[1])
    return F.cross_entropy(logits, labels.long())


def dice_ce_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Soft Dice (classes 1, 2) + cross-entropy, equally weighted."""
    if logits.shape[2:] != labels.shape[1:]:
        raise ValueError(f"spatial shapes differ: logits {tuple(logits.shape[2:])} vs labels {tuple(labels.shape[1:])}")
    probs = torch.softmax(logits, dim=1)
    return dice_loss(probs, one_hot(labels, logits.shape[1])) + ce_loss(logits, labels)


def deep_supervision_weights(n_heads: int, max_heads: int = 3) -> list[float]:
    """Weights proportional to 2^-k on the top `max_heads` heads, normalised."""
    raw = [2.0 ** -k if k < max_heads else 0.0 for k in range(n_heads)]
    s = sum(raw)
    return [w / s for w in raw]


def downsample_labels(labels: torch.Tensor, size: Sequence[int]) -> torch.Tensor:
    if tuple(labels.shape[1:]) == tuple(size):
        return labels
    lab = labels[:, None].float()
    return F.interpolate(lab, size=tuple(size), mode="nearest")[:, 0].long()


def deep_supervision_loss(logits: Sequence[torch.Tensor], labels: torch.Tensor, max_heads: int = 3) -> torch.Tensor:
    """Weighted Dice+CE over multi-resolution heads (highest resolution first)."""
    if isinstance(logits, torch.Tensor):
        logits = [logits]
    weights = deep_supervision_weights(len(logits), max_heads)
    total = logits[0].new_zeros(())
    for w, lg in zip(weights, logits):
        if w == 0:
            continue
        total = total + w * dice_ce_loss(lg, downsample_labels(labels, lg.shape[2:]))
    return total


# ---------------------------------------------------------------- GAN terms


def adversarial_loss(scores: torch.Tensor, target_is_real: bool) -> torch.Tensor:
    """Least-squares GAN loss: mean squared distance of patch scores to 1 or 0."""
    target = 1.0 if target_is_real else 0.0
    return ((scores - target) ** 2).mean()


def cycle_loss(x: torch.Tensor, x_rec: torch.Tensor) -> torch.Tensor:
    _check_same_shape(x, x_rec)
    return (x - x_rec).abs().mean()


def identity_loss(x: torch.Tensor, same_domain_out: torch.Tensor) -> torch.Tensor:
    _check_same_shape(x, same_domain_out)
    return (x - same_domain_out).abs().mean()


def kspace_cycle_loss(x: torch.Tensor, x_rec: torch.Tensor, p: int = 1) -> torch.Tensor:
    """Cycle consistency between the orthonormal 2D DFTs of two images.

    p=1: mean absolute difference over the stacked real and imaginary parts.
    p=2: mean squared modulus of the k-space difference per frequency bin;
    with the orthonormal DFT this equals the image-domain mean squared error.
    """
    _check_same_shape(x, x_rec)
    dk = torch.fft.fft2(x - x_rec, norm="ortho")
    if p == 1:
        return torch.view_as_real(dk).abs().mean()
    if p == 2:
        return (dk.real**2 + dk.imag**2).mean()
    raise ValueError(f"p must be 1 or 2, got {p}")
