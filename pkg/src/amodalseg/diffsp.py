"""Shape prior estimation from diffusion attention maps.

Cross-attention to the category token gives a coarse object map; the
self-attention affinity, applied ``tau_exponent`` times, propagates it into a
sharper prior.
"""
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from .diffusion import CATEGORY_TOKEN, AttentionStack, denoise_with_capture


@dataclass
class ShapePrior:
    map: torch.Tensor  # target_h x target_w in [0, 1]
    raw_resolution: int
    provenance: dict = field(default_factory=dict)


def resize_bilinear(x: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
    """Half-pixel bilinear resize over the last two axes (edges clamped)."""
    size = tuple(int(s) for s in size)
    if tuple(x.shape[-2:]) == size:
        return x
    lead = x.shape[:-2]
    flat = x.reshape(-1, 1, *x.shape[-2:])
    out = F.interpolate(flat, size=size, mode="bilinear", align_corners=False)
    return out.reshape(*lead, *size)


def resize_self_map(a: torch.Tensor, hw: Tuple[int, int], R: int) -> torch.Tensor:
    """Resize a ``B x N_l x N_l`` affinity to ``B x R^2 x R^2``: key axis, then
    query axis, each as an ``h x w`` image; rows renormalized to sum 1."""
    h, w = hw
    b, n, m = a.shape
    if n != h * w or m != h * w:
        raise ValueError(f"self map of shape {tuple(a.shape)} does not match resolution {hw}")
    if (h, w) == (R, R):
        return a
    keys = resize_bilinear(a.reshape(b, n, h, w), (R, R)).reshape(b, n, R * R)
    queries = resize_bilinear(keys.transpose(1, 2).reshape(b, R * R, h, w), (R, R))
    out = queries.reshape(b, R * R, R * R).transpose(1, 2)
    return out / out.sum(dim=-1, keepdim=True)


def resize_cross_column(a: torch.Tensor, hw: Tuple[int, int], R: int, token: int = CATEGORY_TOKEN) -> torch.Tensor:
    h, w = hw
    b = a.shape[0]
    return resize_bilinear(a[..., token].reshape(b, h, w), (R, R)).reshape(b, R * R)


class RunningAggregate:
    """Recorder that resizes and sums maps on arrival instead of storing them.

    Produces the same means as :func:`aggregate_attention` on a full stack,
    with memory independent of the number of steps.
    """

    def __init__(self, layer_resolutions: Sequence[Tuple[int, int]], R: int = 16):
        self.layer_resolutions = list(layer_resolutions)
        self.R = R
        self.self_sum = None
        self.cross_sum = None
        self.self_count = 0
        self.cross_count = 0
        self.num_tokens = None

    def begin_step(self, step: int) -> None:
        pass

    def record(self, layer: int, kind: str, probs: torch.Tensor, logits: torch.Tensor) -> None:
        hw = self.layer_resolutions[layer]
        if kind == "self":
            resized = resize_self_map(probs, hw, self.R)
            self.self_sum = resized.clone() if self.self_sum is None else self.self_sum + resized
            self.self_count += 1
        else:
            if self.num_tokens is None:
                self.num_tokens = probs.shape[-1]
            elif probs.shape[-1] != self.num_tokens:
                raise ValueError(f"inconsistent token count: {probs.shape[-1]} vs {self.num_tokens}")
            resized = resize_cross_column(probs, hw, self.R)
            self.cross_sum = resized.clone() if self.cross_sum is None else self.cross_sum + resized
            self.cross_count += 1

    def result(self) -> Tuple[torch.Tensor, torch.Tensor]:
        if not self.self_count or not self.cross_count:
            raise ValueError("no attention maps recorded")
        return self.self_sum / self.self_count, self.cross_sum / self.cross_count


def aggregate_attention(stack: AttentionStack, R: int = 16) -> Tuple[torch.Tensor, torch.Tensor]:
    """Average self maps (``B x N x N``) and category-token cross maps
    (``B x N``) over layers and steps at the common resolution ``R x R``."""
    if not stack.self_maps or not stack.cross_maps:
        raise ValueError("empty attention stack")
    agg = RunningAggregate(stack.layer_resolutions, R)
    for (layer, _), probs in stack.self_maps.items():
        agg.record(layer, "self", probs, None)
    for (layer, _), probs in stack.cross_maps.items():
        agg.record(layer, "cross", probs, None)
    return agg.result()


def shape_prior(a_s: torch.Tensor, a_c: torch.Tensor, tau_exponent: int) -> torch.Tensor:
    """``(A_S)^tau . A_C`` by ``tau`` matrix-vector products."""
    if tau_exponent < 0 or int(tau_exponent) != tau_exponent:
        raise ValueError("tau_exponent must be a nonnegative integer")
    if a_s.shape[-1] != a_s.shape[-2] or a_s.shape[-1] != a_c.shape[-1]:
        raise ValueError(f"dimension mismatch: A_S {tuple(a_s.shape)}, A_C {tuple(a_c.shape)}")
    v = a_c
    for _ in range(int(tau_exponent)):
        v = (a_s @ v.unsqueeze(-1)).squeeze(-1)
    return v


def _minmax(x: torch.Tensor) -> torch.Tensor:
    flat = x.reshape(x.shape[0], -1)
    lo = flat.min(dim=1).values[:, None, None]
    hi = flat.max(dim=1).values[:, None, None]
    span = hi - lo
    safe = torch.where(span > 0, span, torch.ones_like(span))
    return torch.where(span > 0, (x - lo) / safe, torch.zeros_like(x))


def finalize_priors(vectors: torch.Tensor, R: int, target_hw: Tuple[int, int] = (28, 28)) -> torch.Tensor:
    """``B x R^2`` -> ``B x H x W``: min-max normalize, bilinear resize, and
    renormalize so every non-constant map spans exactly [0, 1]."""
    if vectors.dim() == 1:
        vectors = vectors.unsqueeze(0)
    if vectors.shape[-1] != R * R:
        raise ValueError(f"vector length {vectors.shape[-1]} != R^2 = {R * R}")
    grid = _minmax(vectors.reshape(-1, R, R))
    return _minmax(resize_bilinear(grid, target_hw))


def finalize_prior(vector: torch.Tensor, R: int, target_hw: Tuple[int, int] = (28, 28),
                   provenance: Optional[dict] = None) -> ShapePrior:
    return ShapePrior(map=finalize_priors(vector, R, target_hw)[0], raw_resolution=R,
                      provenance=dict(provenance or {}))


def estimate_shape_priors(model, crops: Sequence, rng_seeds: Sequence[int], T_sample: int = 10,
                          tau_exponent: int = 4, R: int = 16, target_hw: Tuple[int, int] = (28, 28),
                          use_category_condition: bool = True, use_occluding_condition: bool = True,
                          batch_size: int = 64) -> torch.Tensor:
    """Batched DiffSP; returns ``n x H x W`` prior maps."""
    if len(crops) != len(rng_seeds):
        raise ValueError("one seed per crop required")
    out: List[torch.Tensor] = []
    for start in range(0, len(crops), batch_size):
        chunk = crops[start:start + batch_size]
        cond = model.encode_condition(list(chunk), use_category_condition, use_occluding_condition)
        agg = RunningAggregate(model.layer_resolutions, R)
        with torch.no_grad():
            denoise_with_capture(model, cond, T_sample, list(rng_seeds[start:start + batch_size]), agg)
            a_s, a_c = agg.result()
            out.append(finalize_priors(shape_prior(a_s, a_c, tau_exponent), R, target_hw))
    if not out:
        return torch.zeros((0,) + tuple(target_hw))
    return torch.cat(out)


def estimate_shape_prior(model, roi_crop, T_sample: int = 10, tau_exponent: int = 4, rng_seed: int = 0,
                         R: int = 16, target_hw: Tuple[int, int] = (28, 28),
                         use_category_condition: bool = True,
                         use_occluding_condition: bool = True) -> ShapePrior:
    """Denoise with capture, aggregate, refine and finalize for one ROI crop."""
    cond = model.encode_condition([roi_crop], use_category_condition, use_occluding_condition)
    _, stack = denoise_with_capture(model, cond, T_sample, [rng_seed])
    a_s, a_c = aggregate_attention(stack, R)
    vector = shape_prior(a_s, a_c, tau_exponent)
    provenance = {"T_sample": T_sample, "tau_exponent": tau_exponent,
                  "backend_id": getattr(model, "backend_id", "unknown"), "rng_seed": rng_seed,
                  "use_category_condition": use_category_condition,
                  "use_occluding_condition": use_occluding_condition}
    return finalize_prior(vector[0], R, target_hw, provenance)
