"""Backbone + occlusion-aware visible head + shape-prior amodal head."""
from typing import Sequence, Tuple

import torch
from torch import nn

from .amodal import AmodalHead, AmodalPrediction
from .backbone import Backbone, roi_pool_batch
from .visocc import VisOccHead, VisOccPrediction


class AISModel(nn.Module):
    def __init__(self, num_classes: int = 5, feature_channels: int = 64, roi_size: int = 14,
                 backbone_width: int = 16):
        super().__init__()
        self.hparams = dict(num_classes=num_classes, feature_channels=feature_channels,
                            roi_size=roi_size, backbone_width=backbone_width)
        self.roi_size = roi_size
        self.backbone = Backbone(feature_channels, backbone_width)
        self.visocc = VisOccHead(feature_channels, num_classes)
        self.amodal = AmodalHead(feature_channels)

    @property
    def mask_size(self) -> int:
        return 2 * self.roi_size

    def roi_features(self, image: torch.Tensor, boxes: Sequence[Sequence[float]]) -> torch.Tensor:
        """``image`` is ``3 x S x S`` in [0, 1]; returns ``n x C x H_r x W_r``."""
        fmap = self.backbone(image)
        return roi_pool_batch(fmap, boxes, (self.roi_size, self.roi_size), image_size=image.shape[-1])

    def forward(self, image: torch.Tensor, boxes, priors: torch.Tensor) -> Tuple[VisOccPrediction, AmodalPrediction]:
        rois = self.roi_features(image, boxes)
        return self.visocc(rois), self.amodal(rois, priors)

    def component_states(self):
        return {"backbone": self.backbone.state_dict(), "visocc_head": self.visocc.state_dict(),
                "amodal_head": self.amodal.state_dict()}

    def load_component_states(self, states) -> None:
        self.backbone.load_state_dict(states["backbone"])
        self.visocc.load_state_dict(states["visocc_head"])
        self.amodal.load_state_dict(states["amodal_head"])
