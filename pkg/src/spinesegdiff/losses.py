"""Training objectives: the composite mask loss and the plain MSE noise loss.

The composite objective sums three unweighted terms:
    - MSE between the raw network output and the scaled target mask
      (the reconstruction term)
    - soft Dice on softmax probabilities, foreground channels only
    - per-channel binary cross-entropy on softmax probabilities

The MSE target is the signed one-hot mask scaled by TARGET_SCALE. The
scale is large enough that a network output matching the target exactly
also saturates the softmax, so a perfect prediction drives all three
terms to ~0 simultaneously. (The [-1, 1] scaling used for *noising* is
a separate convention; see diffusion.scale_mask.)
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

# Clamp for probabilities before logs, and additive Dice smoothing.
EPS_CLAMP = 1e-7
EPS_SMOOTH = 1e-5
# Signed-mask amplitude for the reconstruction MSE target.
TARGET_SCALE = 10.0


@dataclass
class LossBreakdown:
    """Individual terms plus their sum; total == mse + dice + bce exactly."""

    mse: torch.Tensor
    dice: torch.Tensor
    bce: torch.Tensor
    total: torch.Tensor


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.get_default_dtype())


def _check_shapes(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def mse_loss(pred, target) -> torch.Tensor:
    """Mean squared error over all elements."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    _check_shapes(pred, target)
    return torch.mean((pred - target) ** 2)


def dice_loss(probs, target_onehot, foreground_only: bool = True) -> torch.Tensor:
    """Soft Dice loss, 1 - 2|P.T| / (|P| + |T|), averaged over channels.

    Background (channel 0) is excluded by default since only the three
    anatomical structures are scored. Smoothing keeps empty masks finite.
    Accepts [C, H, W] or batched [B, C, H, W] input.
    """
    probs, target_onehot = _as_tensor(probs), _as_tensor(target_onehot)
    _check_shapes(probs, target_onehot)
    if probs.ndim == 3:
        probs, target_onehot = probs[None], target_onehot[None]
    if foreground_only:
        probs, target_onehot = probs[:, 1:], target_onehot[:, 1:]
    inter = torch.sum(probs * target_onehot, dim=(0, 2, 3))
    sizes = torch.sum(probs, dim=(0, 2, 3)) + torch.sum(target_onehot, dim=(0, 2, 3))
    dice = (2.0 * inter + EPS_SMOOTH) / (sizes + EPS_SMOOTH)
    return 1.0 - dice.mean()


def bce_loss(probs, target) -> torch.Tensor:
    """Mean binary cross-entropy; probabilities clamped away from {0, 1}."""
    probs, target = _as_tensor(probs), _as_tensor(target)
    _check_shapes(probs, target)
    p = torch.clamp(probs, EPS_CLAMP, 1.0 - EPS_CLAMP)
    return -torch.mean(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p))


def composite_loss(x0_logits, x0_target_onehot, target_scale: float = TARGET_SCALE) -> LossBreakdown:
    """Composite objective: MSE on raw output, Dice + BCE on softmax.

    ``x0_logits`` is the raw network output ([C, H, W] or [B, C, H, W]);
    ``x0_target_onehot`` is the {0,1} one-hot ground truth of the same
    shape. Softmax runs over the class axis.
    """
    logits, target = _as_tensor(x0_logits), _as_tensor(x0_target_onehot)
    _check_shapes(logits, target)
    class_dim = 0 if logits.ndim == 3 else 1
    scaled_target = target_scale * (2.0 * target - 1.0)
    mse = mse_loss(logits, scaled_target)
    probs = torch.softmax(logits, dim=class_dim)
    dice = dice_loss(probs, target)
    bce = bce_loss(probs, target)
    return LossBreakdown(mse=mse, dice=dice, bce=bce, total=mse + dice + bce)
