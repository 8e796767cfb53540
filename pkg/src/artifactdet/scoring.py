"""Anchor scoring, stage-I heads, patch-to-pixel upsampling and losses."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

PROB_FLOOR = 1e-12


@dataclass
class Predictions:
    """Batched predictions; channel 0 is the clean class throughout."""

    class_probs: torch.Tensor  # B x (K+1)
    patch_probs: torch.Tensor  # B x (K+1) x gh x gw
    pixel_probs: torch.Tensor | None = None  # B x (K+1) x H x W
    anomaly_map: torch.Tensor | None = None  # B x H x W

    def upsample(self, size: tuple[int, int]) -> "Predictions":
        pixel = upsample_patch_map(self.patch_probs, size)
        return Predictions(self.class_probs, self.patch_probs, pixel, 1.0 - pixel[:, 0])


@dataclass
class LossBreakdown:
    cls: torch.Tensor
    dice: torch.Tensor
    focal: torch.Tensor
    total: torch.Tensor
    lam: float

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("cls", "dice", "focal", "total")}


def _unit(x: torch.Tensor) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True).clamp_min(1e-12)


def score_against_anchors(image_feat: torch.Tensor, patch_feat: torch.Tensor, anchors: torch.Tensor,
                          grid: tuple[int, int], temperature: float = 1.0) -> Predictions:
    """Softmax over cosine similarities to the anchors.

    ``image_feat`` is B x E, ``patch_feat`` B x N x E with N = gh * gw in
    row-major order, ``anchors`` (K+1) x E or B x (K+1) x E.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    E = anchors.shape[-1]
    if image_feat.shape[-1] != E or patch_feat.shape[-1] != E:
        raise ValueError(
            f"embedding dims differ: image {image_feat.shape[-1]}, patches {patch_feat.shape[-1]}, anchors {E}")
    gh, gw = grid
    B, N, _ = patch_feat.shape
    if N != gh * gw:
        raise ValueError(f"{N} patch tokens cannot form a {gh}x{gw} grid")
    a = _unit(anchors)
    if a.ndim == 2:
        a = a.unsqueeze(0).expand(B, -1, -1)
    img_cos = torch.einsum("be,bke->bk", _unit(image_feat), a)
    patch_cos = torch.einsum("bne,bke->bnk", _unit(patch_feat), a)
    class_probs = torch.softmax(img_cos / temperature, dim=-1)
    patch_probs = torch.softmax(patch_cos / temperature, dim=-1)
    patch_probs = patch_probs.transpose(1, 2).reshape(B, -1, gh, gw)
    return Predictions(class_probs, patch_probs)


class ClassificationHead(nn.Linear):
    pass


class SegmentationHead(nn.Linear):
    """Token-wise linear map embed_dim -> K+1; reshaped onto the patch grid by ``segment``."""


def make_heads(embed_dim: int, num_classes: int, seed: int = 0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    cls_head = ClassificationHead(embed_dim, num_classes, dtype=dtype)
    seg_head = SegmentationHead(embed_dim, num_classes, dtype=dtype)
    with torch.no_grad():
        for head in (cls_head, seg_head):
            head.weight.normal_(0.0, 0.02, generator=g)
            head.bias.zero_()
    return cls_head, seg_head


def classify(head: nn.Linear, image_feat: torch.Tensor) -> torch.Tensor:
    if image_feat.shape[-1] != head.in_features:
        raise ValueError(f"feature dim {image_feat.shape[-1]} != head input {head.in_features}")
    return head(image_feat)


def segment(head: nn.Linear, patch_feat: torch.Tensor, grid: tuple[int, int]) -> torch.Tensor:
    if patch_feat.shape[-1] != head.in_features:
        raise ValueError(f"feature dim {patch_feat.shape[-1]} != head input {head.in_features}")
    B, N, _ = patch_feat.shape
    return head(patch_feat).transpose(1, 2).reshape(B, -1, *grid)


def head_predictions(cls_head, seg_head, image_feat, patch_feat, grid) -> Predictions:
    return Predictions(
        torch.softmax(classify(cls_head, image_feat), dim=-1),
        torch.softmax(segment(seg_head, patch_feat, grid), dim=1),
    )


def upsample_patch_map(patch_probs: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear (half-pixel centres) upsampling per channel, renormalised to the simplex."""
    H, W = size
    if H < 1 or W < 1:
        raise ValueError(f"degenerate target size {size}")
    if patch_probs.shape[-2] < 1 or patch_probs.shape[-1] < 1:
        raise ValueError("empty patch grid")
    squeeze = patch_probs.ndim == 3
    x = patch_probs.unsqueeze(0) if squeeze else patch_probs
    if tuple(x.shape[-2:]) != (H, W):
        x = F.interpolate(x, size=(H, W), mode="bilinear", align_corners=False)
        x = x / x.sum(dim=1, keepdim=True)
    return x[0] if squeeze else x


def classification_loss(class_probs: torch.Tensor, target: torch.Tensor | int) -> torch.Tensor:
    """Mean of -log p[y] over the batch; probabilities are floored at 1e-12."""
    probs = class_probs.unsqueeze(0) if class_probs.ndim == 1 else class_probs
    target = torch.as_tensor(target, device=probs.device).reshape(-1)
    C = probs.shape[-1]
    if ((target < 0) | (target >= C)).any():
        raise ValueError(f"class label outside 0..{C - 1}: {target.tolist()}")
    p = probs.gather(1, target.long().unsqueeze(1)).squeeze(1)
    return -torch.log(p.clamp_min(PROB_FLOOR)).mean()


def pixel_targets(masks: torch.Tensor, classes: torch.Tensor, num_classes: int) -> torch.Tensor:
    """Per-pixel class index: masked pixels take the sample class, the rest are clean."""
    masks = masks.bool()
    classes = torch.as_tensor(classes, device=masks.device).reshape(-1)
    if ((classes == 0) & masks.flatten(1).any(1)).any():
        raise ValueError("clean sample (class 0) with a nonzero mask")
    if ((classes < 0) | (classes >= num_classes)).any():
        raise ValueError("class label out of range")
    return torch.where(masks, classes.view(-1, 1, 1).long(), torch.zeros_like(masks, dtype=torch.long))


def segmentation_loss(pixel_probs: torch.Tensor, masks: torch.Tensor, classes, *,
                      gamma: float = 2.0, alpha: float = 0.25, eps: float = 1.0
                      ) -> tuple[torch.Tensor, torch.Tensor]:
    """(Dice, Focal) against one-hot pixel targets, averaged over the batch.

    Dice is ``1 - mean_c (2 * overlap_c + eps) / (sum_c + eps)`` per image;
    focal is the pixel mean of ``-alpha (1 - p_t)^gamma log p_t``.
    """
    if pixel_probs.ndim == 3:
        pixel_probs, masks = pixel_probs.unsqueeze(0), torch.as_tensor(masks).unsqueeze(0)
    masks = torch.as_tensor(masks, device=pixel_probs.device)
    if pixel_probs.shape[0] != masks.shape[0] or pixel_probs.shape[-2:] != masks.shape[-2:]:
        raise ValueError(f"probabilities {tuple(pixel_probs.shape)} do not match masks {tuple(masks.shape)}")
    C = pixel_probs.shape[1]
    target = pixel_targets(masks, classes, C)
    onehot = F.one_hot(target, C).permute(0, 3, 1, 2).to(pixel_probs.dtype)

    overlap = (pixel_probs * onehot).flatten(2).sum(-1)
    total = (pixel_probs + onehot).flatten(2).sum(-1)
    dice = 1.0 - ((2.0 * overlap + eps) / (total + eps)).mean(dim=1)

    p_t = (pixel_probs * onehot).sum(dim=1).clamp_min(PROB_FLOOR)
    focal = -alpha * (1.0 - p_t) ** gamma * torch.log(p_t)
    return dice.mean(), focal.flatten(1).mean(1).mean()


def total_loss(cls, dice, focal, lam: float = 4.0) -> LossBreakdown:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    cls, dice, focal = (torch.as_tensor(v) for v in (cls, dice, focal))
    return LossBreakdown(cls, dice, focal, lam * cls + dice + focal, lam)
