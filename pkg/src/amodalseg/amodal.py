"""Shape-prior amodal predictor: the prior gates a learned spatial attention
over the amodal feature before mask prediction."""
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import group_norm


@dataclass
class AmodalPrediction:
    amodal_logits: torch.Tensor  # n x 1 x 2H x 2W
    attention_map: torch.Tensor  # n x 1 x H x W, sigmoid output before the prior product
    spatial_attention: torch.Tensor = None  # attention_map * prior


def _conv_stack(channels_in: int, channels: int, depth: int, out_last: int = None) -> nn.ModuleList:
    layers = []
    for i in range(depth):
        c_in = channels_in if i == 0 else channels
        c_out = out_last if (out_last is not None and i == depth - 1) else channels
        layers.append(nn.Conv2d(c_in, c_out, 3, padding=1))
    return nn.ModuleList(layers)


class AmodalHead(nn.Module):
    def __init__(self, channels: int = 64, feature_depth: int = 2, attention_depth: int = 2):
        super().__init__()
        self.feature_convs = _conv_stack(channels, channels, feature_depth)
        self.feature_norms = nn.ModuleList(group_norm(channels) for _ in range(feature_depth))
        self.attention_convs = _conv_stack(channels, channels, attention_depth, out_last=1)
        self.deconv = nn.ConvTranspose2d(channels, channels, 2, stride=2)
        self.predictor = nn.Conv2d(channels, 1, 1)

    def amodal_feature(self, x: torch.Tensor) -> torch.Tensor:
        for conv, norm in zip(self.feature_convs, self.feature_norms):
            x = F.silu(norm(conv(x)))
        return x

    def attention(self, feature: torch.Tensor) -> torch.Tensor:
        x = feature
        for i, conv in enumerate(self.attention_convs):
            x = conv(x)
            if i < len(self.attention_convs) - 1:
                x = F.silu(x)
        return torch.sigmoid(x)

    def predict(self, attended: torch.Tensor) -> torch.Tensor:
        return self.predictor(F.silu(self.deconv(attended)))

    def forward(self, roi_features: torch.Tensor, prior: torch.Tensor) -> AmodalPrediction:
        """``prior`` is ``n x M x M`` (or ``n x 1 x M x M``) in [0, 1]; it is
        resized to the feature grid and treated as a constant input."""
        squeeze = roi_features.dim() == 3
        if squeeze:
            roi_features, prior = roi_features.unsqueeze(0), prior.unsqueeze(0)
        if prior.dim() == 3:
            prior = prior.unsqueeze(1)
        if prior.shape[0] != roi_features.shape[0]:
            raise ValueError(f"{prior.shape[0]} priors for {roi_features.shape[0]} ROIs")
        hw = roi_features.shape[-2:]
        if prior.shape[-2:] != hw:
            prior = F.interpolate(prior, size=hw, mode="bilinear", align_corners=False)
        feature = self.amodal_feature(roi_features)
        a = self.attention(feature)
        spatial = a * prior.to(feature.dtype)
        logits = self.predict(feature * spatial)
        if squeeze:
            return AmodalPrediction(logits[0], a[0], spatial[0])
        return AmodalPrediction(logits, a, spatial)
