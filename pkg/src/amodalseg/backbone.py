"""Small convolutional backbone, bilinear ROI pooling and ROI crops."""
import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torchvision.ops import roi_align

logger = logging.getLogger(__name__)

FEATURE_STRIDE = 4

Box = Tuple[float, float, float, float]  # x, y, w, h in image pixels


class NumericError(FloatingPointError):
    pass


class BoxError(ValueError):
    pass


@dataclass
class RoiFeature:
    tensor: torch.Tensor  # C_e x H_r x W_r
    source_bbox: Box
    scene_id: int = -1
    instance_id: int = -1


@dataclass
class RoiCrop:
    visible_pixels_image: torch.Tensor  # 3 x R x R, centred so neutral grey is 0
    occluding_mask_crop: torch.Tensor  # R x R in {0, 1}
    category_id: int
    empty_visible: bool = False


def group_norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


class Backbone(nn.Module):
    """Three 3x3 conv blocks; the last two downsample by 2."""

    def __init__(self, out_channels: int = 64, width: int = 32):
        super().__init__()
        self.out_channels = out_channels
        self.conv1 = nn.Conv2d(3, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, out_channels, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(out_channels, out_channels, 3, stride=2, padding=1)
        self.norm1 = group_norm(width)
        self.norm2 = group_norm(out_channels)
        self.norm3 = group_norm(out_channels)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        squeeze = image.dim() == 3
        if squeeze:
            image = image.unsqueeze(0)
        if image.shape[-1] % FEATURE_STRIDE or image.shape[-2] % FEATURE_STRIDE:
            raise ValueError(f"spatial size {tuple(image.shape[-2:])} not a multiple of {FEATURE_STRIDE}")
        x = (image - 0.5) * 2.0
        x = F.silu(self.norm1(self.conv1(x)))
        x = F.silu(self.norm2(self.conv2(x)))
        x = F.silu(self.norm3(self.conv3(x)))
        if not torch.isfinite(x).all():
            raise NumericError("backbone produced non-finite activations")
        return x.squeeze(0) if squeeze else x


def clip_box(bbox: Sequence[float], image_size: int) -> Box:
    x, y, w, h = (float(v) for v in bbox)
    x1, y1 = max(x, 0.0), max(y, 0.0)
    x2, y2 = min(x + w, float(image_size)), min(y + h, float(image_size))
    if x2 - x1 < 1.0 or y2 - y1 < 1.0:
        raise BoxError(f"degenerate box {tuple(bbox)} (needs w, h >= 1 inside the image)")
    return (x1, y1, x2 - x1, y2 - y1)


def _xyxy(boxes: Sequence[Sequence[float]], dtype, device) -> torch.Tensor:
    rows = [[0.0, b[0], b[1], b[0] + b[2], b[1] + b[3]] for b in boxes]
    return torch.tensor(rows, dtype=dtype, device=device).reshape(-1, 5)


def roi_pool_batch(
    feature_map: torch.Tensor,
    boxes: Sequence[Sequence[float]],
    out_hw: Tuple[int, int] = (14, 14),
    stride: int = FEATURE_STRIDE,
    image_size: Optional[int] = None,
) -> torch.Tensor:
    """Bilinear crop-resize of every box; one sample per output cell at the
    cell centre. Returns ``n x C x H_r x W_r``."""
    if feature_map.dim() == 3:
        feature_map = feature_map.unsqueeze(0)
    if image_size is None:
        image_size = feature_map.shape[-1] * stride
    clipped = [clip_box(b, image_size) for b in boxes]
    if not clipped:
        return feature_map.new_zeros((0, feature_map.shape[1]) + tuple(out_hw))
    rois = _xyxy(clipped, feature_map.dtype, feature_map.device)
    return roi_align(feature_map, rois, output_size=tuple(out_hw), spatial_scale=1.0 / stride,
                     sampling_ratio=1, aligned=True)


def roi_pool(feature_map: torch.Tensor, bbox: Sequence[float], out_hw: Tuple[int, int] = (14, 14),
             scene_id: int = -1, instance_id: int = -1) -> RoiFeature:
    tensor = roi_pool_batch(feature_map, [bbox], out_hw)[0]
    return RoiFeature(tensor=tensor, source_bbox=tuple(float(v) for v in bbox),
                      scene_id=scene_id, instance_id=instance_id)


def crop_nearest(mask: np.ndarray, bbox: Sequence[float], out: int) -> np.ndarray:
    """Nearest-neighbour crop-resize sampling the box at output cell centres."""
    x, y, w, h = (float(v) for v in bbox)
    centres = (np.arange(out) + 0.5) / out
    rows = np.clip(np.floor(y + centres * h).astype(int), 0, mask.shape[0] - 1)
    cols = np.clip(np.floor(x + centres * w).astype(int), 0, mask.shape[1] - 1)
    return mask[np.ix_(rows, cols)]


def crop_bilinear(image: np.ndarray, bbox: Sequence[float], out: int) -> torch.Tensor:
    """Bilinear crop-resize of an H x W x 3 image to ``3 x out x out``."""
    tensor = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float()
    rois = _xyxy([clip_box(bbox, image.shape[0])], tensor.dtype, tensor.device)
    return roi_align(tensor.unsqueeze(0), rois, output_size=(out, out), spatial_scale=1.0,
                     sampling_ratio=1, aligned=True)[0]


def make_roi_crop(scene, instance, predicted_visible: np.ndarray, predicted_occluding: np.ndarray,
                  size: int = 32, bbox: Optional[Sequence[float]] = None,
                  category_id: Optional[int] = None) -> RoiCrop:
    """Crop the ROI, keep only visible pixels, and resize the occluding mask."""
    bbox = instance.bbox if bbox is None else bbox
    image_crop = (crop_bilinear(scene.image, bbox, size) - 0.5) * 2.0
    vis = torch.from_numpy(crop_nearest(np.asarray(predicted_visible, bool), bbox, size).astype(np.float32))
    occ = torch.from_numpy(crop_nearest(np.asarray(predicted_occluding, bool), bbox, size).astype(np.float32))
    empty = not bool(vis.any())
    if empty:
        logger.warning("scene %s instance %s: empty visible mask, crop is all background",
                       scene.scene_id, instance.instance_id)
    return RoiCrop(
        visible_pixels_image=image_crop * vis,
        occluding_mask_crop=occ,
        category_id=int(instance.category_id if category_id is None else category_id),
        empty_visible=empty,
    )


def make_amodal_target(scene, instance, size: int = 32, bbox: Optional[Sequence[float]] = None) -> torch.Tensor:
    """Full unoccluded rendering of the instance in its box (centred, flat colour).

    The colour is the mean of the instance's visible pixels, so the target is
    recoverable from the dataset alone.
    """
    bbox = instance.bbox if bbox is None else bbox
    vis = instance.visible_mask
    if vis.any():
        colour = (scene.image[vis].mean(axis=0) - 0.5) * 2.0
    else:
        colour = np.zeros(3, dtype=np.float32)
    amodal = crop_nearest(instance.amodal_mask, bbox, size).astype(np.float32)
    target = colour.astype(np.float32)[:, None, None] * amodal[None]
    return torch.from_numpy(np.ascontiguousarray(target))


def jitter_box(bbox: Sequence[float], seed: int, max_shift_frac: float = 0.1,
               image_size: Optional[int] = None) -> Box:
    """Shift each edge by ``uniform(-f, f) * side``; clipped and kept >= 1 px."""
    x, y, w, h = (float(v) for v in bbox)
    if max_shift_frac == 0:
        return (x, y, w, h)
    rng = np.random.default_rng(seed)
    dx1, dx2 = rng.uniform(-max_shift_frac, max_shift_frac, size=2) * w
    dy1, dy2 = rng.uniform(-max_shift_frac, max_shift_frac, size=2) * h
    x1, x2 = x + dx1, x + w + dx2
    y1, y2 = y + dy1, y + h + dy2
    if image_size is not None:
        x1, y1 = max(x1, 0.0), max(y1, 0.0)
        x2, y2 = min(x2, float(image_size)), min(y2, float(image_size))
    if x2 - x1 < 1.0:
        x1, x2 = x, x + w
    if y2 - y1 < 1.0:
        y1, y2 = y, y + h
    return (x1, y1, x2 - x1, y2 - y1)


def paste_masks(probs: torch.Tensor, boxes: Sequence[Sequence[float]], image_size: int,
                threshold: float = 0.5) -> np.ndarray:
    """Bilinearly paste ``n x M x M`` probabilities into full-image binary masks."""
    n = probs.shape[0]
    out = np.zeros((n, image_size, image_size), dtype=bool)
    if n == 0:
        return out
    centres = torch.arange(image_size, dtype=torch.float32) + 0.5
    grids, inside = [], []
    for x, y, w, h in boxes:
        gx = (centres - x) / w * 2.0 - 1.0
        gy = (centres - y) / h * 2.0 - 1.0
        yy, xx = torch.meshgrid(gy, gx, indexing="ij")
        grids.append(torch.stack([xx, yy], dim=-1))
        inside.append((xx.abs() <= 1.0) & (yy.abs() <= 1.0))
    sampled = F.grid_sample(probs.float().unsqueeze(1), torch.stack(grids), mode="bilinear",
                            padding_mode="border", align_corners=False)[:, 0]
    mask = (sampled > threshold) & torch.stack(inside)
    return mask.numpy()
