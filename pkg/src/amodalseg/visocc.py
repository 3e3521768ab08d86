"""Occlusion-aware visible segmentation: occluding branch, visible branch and
category classifier over ROI features."""
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import group_norm


@dataclass
class BranchOutput:
    mask_logits: torch.Tensor  # n x 1 x 2H x 2W
    branch_feature: torch.Tensor  # n x C x H x W


@dataclass
class VisOccPrediction:
    visible_logits: torch.Tensor
    occluding_logits: torch.Tensor
    class_logits: torch.Tensor  # n x num_classes
    visible_feature: torch.Tensor = None
    occluding_feature: torch.Tensor = None


class GCNBlock(nn.Module):
    """Non-local graph reasoning over the H*W spatial nodes.

    ``X' = X + W_out(A g(X))`` with ``A = softmax_rows(theta(X) phi(X)^T / sqrt(d))``.
    """

    def __init__(self, channels: int, inter_channels: int = None):
        super().__init__()
        d = inter_channels or max(1, channels // 2)
        self.inter_channels = d
        self.theta = nn.Conv2d(channels, d, 1)
        self.phi = nn.Conv2d(channels, d, 1)
        self.g = nn.Conv2d(channels, d, 1)
        self.w_out = nn.Conv2d(d, channels, 1)

    def adjacency(self, x: torch.Tensor) -> torch.Tensor:
        n = x.shape[0]
        q = self.theta(x).reshape(n, self.inter_channels, -1).transpose(1, 2)
        k = self.phi(x).reshape(n, self.inter_channels, -1)
        return torch.softmax(q @ k / math.sqrt(self.inter_channels), dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, _, h, w = x.shape
        a = self.adjacency(x)
        v = self.g(x).reshape(n, self.inter_channels, -1).transpose(1, 2)
        y = (a @ v).transpose(1, 2).reshape(n, self.inter_channels, h, w)
        return x + self.w_out(y)


class MaskBranch(nn.Module):
    """conv3x3 -> GCN -> conv3x3 for features, then deconv2x2(s2) -> conv1x1 for the mask."""

    def __init__(self, channels: int = 64):
        super().__init__()
        self.conv_in = nn.Conv2d(channels, channels, 3, padding=1)
        self.gcn = GCNBlock(channels)
        self.conv_out = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm_in = group_norm(channels)
        self.norm_out = group_norm(channels)
        self.deconv = nn.ConvTranspose2d(channels, channels, 2, stride=2)
        self.predictor = nn.Conv2d(channels, 1, 1)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        x = F.silu(self.norm_in(self.conv_in(x)))
        x = self.gcn(x)
        return F.silu(self.norm_out(self.conv_out(x)))

    def predict(self, feature: torch.Tensor) -> torch.Tensor:
        return self.predictor(F.silu(self.deconv(feature)))

    def forward(self, x: torch.Tensor) -> BranchOutput:
        feature = self.features(x)
        return BranchOutput(mask_logits=self.predict(feature), branch_feature=feature)


class VisOccHead(nn.Module):
    def __init__(self, channels: int = 64, num_classes: int = 5):
        super().__init__()
        self.num_classes = num_classes
        self.occluding = MaskBranch(channels)
        self.visible = MaskBranch(channels)
        self.fuse = nn.Conv2d(channels, channels, 1)
        self.classifier = nn.Linear(channels, num_classes)

    def forward(self, roi_features: torch.Tensor) -> VisOccPrediction:
        squeeze = roi_features.dim() == 3
        if squeeze:
            roi_features = roi_features.unsqueeze(0)
        occ = self.occluding(roi_features)
        vis = self.visible(roi_features + self.fuse(occ.branch_feature))
        class_logits = self.classifier(vis.branch_feature.mean(dim=(2, 3)))
        pred = VisOccPrediction(
            visible_logits=vis.mask_logits,
            occluding_logits=occ.mask_logits,
            class_logits=class_logits,
            visible_feature=vis.branch_feature,
            occluding_feature=occ.branch_feature,
        )
        if squeeze:
            pred = VisOccPrediction(*(t[0] for t in (pred.visible_logits, pred.occluding_logits,
                                                      pred.class_logits, pred.visible_feature,
                                                      pred.occluding_feature)))
        return pred
