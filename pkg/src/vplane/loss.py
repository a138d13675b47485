"""Weighted multi-task objective: VP heatmap MSE plus lane cross-entropy."""
from dataclasses import dataclass
from typing import NamedTuple, Tuple

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class LossWeights:
    lambda_vp: float = 15.0
    lambda_lane: float = 1.0

    def __post_init__(self):
        if self.lambda_vp < 0 or self.lambda_lane < 0:
            raise ValueError("loss weights must be non-negative")


class LossBreakdown(NamedTuple):
    l_vp: torch.Tensor
    l_lane: torch.Tensor
    total: torch.Tensor
    has_vp: bool

    def as_floats(self) -> dict:
        return {"l_vp": self.l_vp.item(), "l_lane": self.l_lane.item(), "total": self.total.item()}


def heatmap_loss(pred: torch.Tensor, target: torch.Tensor, mask=None) -> Tuple[torch.Tensor, bool]:
    """Mean squared error over every cell of the unmasked samples.

    Returns ``(loss, has_vp)``; with every sample masked out the loss is an
    exact zero that still carries a (zero) graph back to ``pred``.
    """
    if pred.shape != target.shape:
        raise ValueError(f"heatmap shapes differ: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if mask is None:
        mask = torch.ones(pred.shape[0], dtype=torch.bool)
    mask = torch.as_tensor(mask, dtype=torch.bool, device=pred.device)
    if mask.shape != (pred.shape[0],):
        raise ValueError(f"mask must have one entry per sample ({pred.shape[0]}), got {tuple(mask.shape)}")
    if not bool(mask.any()):
        return (pred * 0.0).sum(), False
    diff = pred[mask] - target[mask].to(pred.dtype)
    return (diff * diff).mean(), True


def lane_loss(seg_logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    num_classes = seg_logits.shape[1]
    target = torch.as_tensor(target, device=seg_logits.device).long()
    if target.shape != (seg_logits.shape[0],) + tuple(seg_logits.shape[2:]):
        raise ValueError(f"target shape {tuple(target.shape)} inconsistent with logits {tuple(seg_logits.shape)}")
    if target.numel() and (int(target.max()) >= num_classes or int(target.min()) < 0):
        raise ValueError(f"labels must lie in [0, {num_classes - 1}]")
    return F.cross_entropy(seg_logits, target, reduction="mean")


def total_loss(outputs, seg_target, heatmap_target, vp_mask=None,
               weights: LossWeights = LossWeights()) -> LossBreakdown:
    """``lambda_vp * l_vp + lambda_lane * l_lane`` for one forward pass."""
    l_vp, has_vp = heatmap_loss(outputs.vp_heatmap, heatmap_target, vp_mask)
    l_lane = lane_loss(outputs.seg_logits, seg_target)
    total = weights.lambda_vp * l_vp + weights.lambda_lane * l_lane
    return LossBreakdown(l_vp, l_lane, total, has_vp)
