"""A small conditioned denoising-diffusion model with capturable attention.

The model works on a 16x16 "latent" obtained by 2x average pooling of a
32x32 ROI crop. Conditions enter twice: densely, as extra UNet input
channels, and as a 4-token sequence read by cross-attention.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

logger = logging.getLogger(__name__)

BACKEND_ID = "toy-unet/1"
NUM_TOKENS = 4  # category, visible summary, occluding summary, null
CATEGORY_TOKEN = 0


class DiffusionSchedule:
    """Linear beta schedule; ``alphas_bar[t] = prod_{i<=t} (1 - beta_i)``."""

    def __init__(self, T_train: int = 200, beta_min: float = 1e-4, beta_max: float = 0.02):
        self.T_train = int(T_train)
        self.beta_min = float(beta_min)
        self.beta_max = float(beta_max)
        self.betas = np.linspace(beta_min, beta_max, T_train, dtype=np.float64)
        self.alphas_bar = np.cumprod(1.0 - self.betas)

    def check_t(self, t) -> None:
        arr = np.asarray(t.cpu() if torch.is_tensor(t) else t)
        if np.any(arr < 0) or np.any(arr >= self.T_train):
            raise ValueError(f"timestep out of range [0, {self.T_train}): {arr}")

    def sampling_timesteps(self, T_sample: int) -> List[int]:
        """``T_sample`` uniformly spaced steps from ``T_train - 1`` down to 0."""
        if T_sample < 1:
            raise ValueError("T_sample must be >= 1")
        if T_sample > self.T_train:
            raise ValueError(f"T_sample {T_sample} exceeds T_train {self.T_train}")
        return [int(v) for v in np.round(np.linspace(self.T_train - 1, 0, T_sample))]

    def to_dict(self) -> dict:
        return {"T_train": self.T_train, "beta_min": self.beta_min, "beta_max": self.beta_max}


def _coef(values: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    if torch.is_tensor(t) and t.dim() > 0:
        c = torch.as_tensor(values[t.cpu().numpy()], dtype=like.dtype, device=like.device)
        return c.reshape(-1, *([1] * (like.dim() - 1)))
    return torch.as_tensor(float(values[int(t)]), dtype=like.dtype, device=like.device)


def q_sample(schedule: DiffusionSchedule, x0: torch.Tensor, t, noise: torch.Tensor) -> torch.Tensor:
    schedule.check_t(t)
    ab = schedule.alphas_bar
    return _coef(np.sqrt(ab), t, x0) * x0 + _coef(np.sqrt(1.0 - ab), t, x0) * noise


def q_step(schedule: DiffusionSchedule, x_prev: torch.Tensor, t, noise: torch.Tensor) -> torch.Tensor:
    """Single forward transition ``q(x_t | x_{t-1})``."""
    schedule.check_t(t)
    b = schedule.betas
    return _coef(np.sqrt(1.0 - b), t, x_prev) * x_prev + _coef(np.sqrt(b), t, x_prev) * noise


def ddim_step(x_t: torch.Tensor, eps: torch.Tensor, alpha_bar_t: float, alpha_bar_prev: float) -> torch.Tensor:
    """Deterministic (eta = 0) DDIM update."""
    x0 = (x_t - math.sqrt(1.0 - alpha_bar_t) * eps) / math.sqrt(alpha_bar_t)
    return math.sqrt(alpha_bar_prev) * x0 + math.sqrt(1.0 - alpha_bar_prev) * eps


@dataclass
class ConditionEncoding:
    token_sequence: torch.Tensor  # B x K x d_tok
    channel_condition: torch.Tensor  # B x 4 x h x w (visible rgb + occluding mask)
    token_roles: Tuple[str, ...] = ("category", "visible-summary", "occluding-summary", "null")

    def __len__(self):
        return self.token_sequence.shape[0]


class AttentionStack:
    """Every post-softmax attention matrix seen during a sampling run.

    Maps are keyed by ``(layer, step)`` and keep a leading batch dimension.
    """

    def __init__(self, layer_resolutions: Sequence[Tuple[int, int]], keep_logits: bool = False):
        self.layer_resolutions = list(layer_resolutions)
        self.keep_logits = keep_logits
        self.self_maps: Dict[Tuple[int, int], torch.Tensor] = {}
        self.cross_maps: Dict[Tuple[int, int], torch.Tensor] = {}
        self.self_logits: Dict[Tuple[int, int], torch.Tensor] = {}
        self.cross_logits: Dict[Tuple[int, int], torch.Tensor] = {}
        self.step = 0

    def begin_step(self, step: int) -> None:
        self.step = step

    def record(self, layer: int, kind: str, probs: torch.Tensor, logits: torch.Tensor) -> None:
        key = (layer, self.step)
        maps = self.self_maps if kind == "self" else self.cross_maps
        maps[key] = probs.detach().clone()
        if self.keep_logits:
            (self.self_logits if kind == "self" else self.cross_logits)[key] = logits.detach().clone()

    @property
    def num_layers(self) -> int:
        return len(self.layer_resolutions)

    def __len__(self):
        return len(self.self_maps)


class Recorder(Protocol):
    def begin_step(self, step: int) -> None: ...

    def record(self, layer: int, kind: str, probs: torch.Tensor, logits: torch.Tensor) -> None: ...


class DiffusionBackend(Protocol):
    """What DiffSP needs from a diffusion model; a large external model can be
    plugged in by implementing these with the same AttentionStack contract."""

    backend_id: str
    layer_resolutions: List[Tuple[int, int]]

    def encode_condition(self, crops, use_category_condition: bool = True,
                         use_occluding_condition: bool = True) -> ConditionEncoding: ...

    def predict_noise(self, x_t: torch.Tensor, t: torch.Tensor, condition: ConditionEncoding) -> torch.Tensor: ...


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(temb_dim, c_out)
        self.norm2 = nn.GroupNorm(8, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class AttentionBlock(nn.Module):
    """Single-head self-attention over pixels, then cross-attention to the
    condition tokens; both residual."""

    def __init__(self, channels: int, d_tok: int, layer_index: int):
        super().__init__()
        self.layer_index = layer_index
        self.scale = 1.0 / math.sqrt(channels)
        self.norm_self = nn.GroupNorm(8, channels)
        self.qkv = nn.Linear(channels, 3 * channels)
        self.proj_self = nn.Linear(channels, channels)
        self.norm_cross = nn.GroupNorm(8, channels)
        self.q_cross = nn.Linear(channels, channels)
        self.kv_cross = nn.Linear(d_tok, 2 * channels)
        self.proj_cross = nn.Linear(channels, channels)
        self.recorder: Optional[Recorder] = None

    def forward(self, x: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        seq = self.norm_self(x).reshape(b, c, h * w).transpose(1, 2)
        q, k, v = self.qkv(seq).chunk(3, dim=-1)
        logits = q @ k.transpose(1, 2) * self.scale
        probs = torch.softmax(logits, dim=-1)
        if self.recorder is not None:
            self.recorder.record(self.layer_index, "self", probs, logits)
        out = self.proj_self(probs @ v)
        x = x + out.transpose(1, 2).reshape(b, c, h, w)

        seq = self.norm_cross(x).reshape(b, c, h * w).transpose(1, 2)
        q = self.q_cross(seq)
        k, v = self.kv_cross(tokens).chunk(2, dim=-1)
        logits = q @ k.transpose(1, 2) * self.scale
        probs = torch.softmax(logits, dim=-1)
        if self.recorder is not None:
            self.recorder.record(self.layer_index, "cross", probs, logits)
        out = self.proj_cross(probs @ v)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class ConditionEncoder(nn.Module):
    def __init__(self, num_classes: int, d_tok: int = 32, summary_size: int = 4):
        super().__init__()
        self.num_classes = num_classes
        self.summary_size = summary_size
        self.category = nn.Embedding(num_classes, d_tok)
        self.null = nn.Parameter(torch.randn(d_tok) * 0.5)
        self.visible_proj = nn.Linear(3 * summary_size ** 2, d_tok)
        self.occluding_proj = nn.Linear(summary_size ** 2, d_tok)

    def forward(self, visible: torch.Tensor, occluding: torch.Tensor, category: torch.Tensor,
                use_category: Optional[torch.Tensor] = None) -> torch.Tensor:
        """``visible``: B x 3 x R x R, ``occluding``: B x 1 x R x R, ``category``: B."""
        if torch.any(category < 0) or torch.any(category >= self.num_classes):
            raise ValueError(f"category_id out of range [0, {self.num_classes})")
        b = visible.shape[0]
        s = self.summary_size
        cat_tok = self.category(category)
        null = self.null.expand(b, -1)
        if use_category is not None:
            cat_tok = torch.where(use_category[:, None], cat_tok, null)
        vis_tok = self.visible_proj(F.adaptive_avg_pool2d(visible, s).reshape(b, -1))
        occ_tok = self.occluding_proj(F.adaptive_avg_pool2d(occluding, s).reshape(b, -1))
        return torch.stack([cat_tok, vis_tok, occ_tok, null], dim=1)


class TinyUNet(nn.Module):
    """Two resolutions (16 and 8), four attention blocks: 16 -> 8 -> 8 -> 16."""

    def __init__(self, in_channels: int = 7, out_channels: int = 3, base: int = 32, d_tok: int = 32,
                 temb_dim: int = 128):
        super().__init__()
        self.temb_in = 64
        self.time_mlp = nn.Sequential(nn.Linear(64, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        c1, c2 = base, 2 * base
        self.conv_in = nn.Conv2d(in_channels, c1, 3, padding=1)
        self.res1 = ResBlock(c1, c1, temb_dim)
        self.attn1 = AttentionBlock(c1, d_tok, 0)
        self.down = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.res2 = ResBlock(c2, c2, temb_dim)
        self.attn2 = AttentionBlock(c2, d_tok, 1)
        self.res3 = ResBlock(c2, c2, temb_dim)
        self.attn3 = AttentionBlock(c2, d_tok, 2)
        self.up = nn.Conv2d(c2, c1, 3, padding=1)
        self.res4 = ResBlock(2 * c1, c1, temb_dim)
        self.attn4 = AttentionBlock(c1, d_tok, 3)
        self.norm_out = nn.GroupNorm(8, c1)
        self.conv_out = nn.Conv2d(c1, out_channels, 3, padding=1)

    @property
    def attention_blocks(self) -> List[AttentionBlock]:
        return [self.attn1, self.attn2, self.attn3, self.attn4]

    def forward(self, x: torch.Tensor, t: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        temb = self.time_mlp(timestep_embedding(t, self.temb_in))
        h1 = self.attn1(self.res1(self.conv_in(x), temb), tokens)
        h2 = self.attn2(self.res2(self.down(h1), temb), tokens)
        h3 = self.attn3(self.res3(h2, temb), tokens)
        u = self.up(F.interpolate(h3, scale_factor=2, mode="nearest"))
        h4 = self.attn4(self.res4(torch.cat([u, h1], dim=1), temb), tokens)
        return self.conv_out(F.silu(self.norm_out(h4)))


class DiffusionModel(nn.Module):
    backend_id = BACKEND_ID

    def __init__(self, num_classes: int = 5, crop_size: int = 32, latent_size: int = 16,
                 base_channels: int = 32, d_tok: int = 32, T_train: int = 200,
                 beta_min: float = 1e-4, beta_max: float = 0.02):
        super().__init__()
        if crop_size % latent_size:
            raise ValueError("crop_size must be a multiple of latent_size")
        self.hparams = dict(num_classes=num_classes, crop_size=crop_size, latent_size=latent_size,
                            base_channels=base_channels, d_tok=d_tok, T_train=T_train,
                            beta_min=beta_min, beta_max=beta_max)
        self.num_classes = num_classes
        self.crop_size = crop_size
        self.latent_size = latent_size
        self.schedule = DiffusionSchedule(T_train, beta_min, beta_max)
        self.encoder = ConditionEncoder(num_classes, d_tok)
        self.unet = TinyUNet(in_channels=7, out_channels=3, base=base_channels, d_tok=d_tok)
        half = latent_size // 2
        self.layer_resolutions = [(latent_size, latent_size), (half, half), (half, half),
                                  (latent_size, latent_size)]

    @property
    def num_attention_layers(self) -> int:
        return len(self.unet.attention_blocks)

    def to_latent(self, images: torch.Tensor) -> torch.Tensor:
        factor = images.shape[-1] // self.latent_size
        return F.avg_pool2d(images, factor) if factor > 1 else images

    def encode_tensors(self, visible: torch.Tensor, occluding: torch.Tensor, category: torch.Tensor,
                       use_category: Optional[torch.Tensor] = None,
                       use_occluding: Optional[torch.Tensor] = None,
                       use_visible_channels: Optional[torch.Tensor] = None) -> ConditionEncoding:
        """``use_visible_channels`` (training only) blanks the dense visible
        pixels while keeping the visible-summary token."""
        if occluding.dim() == 3:
            occluding = occluding.unsqueeze(1)
        if use_occluding is not None:
            occluding = occluding * use_occluding[:, None, None, None].to(occluding.dtype)
        tokens = self.encoder(visible, occluding, category, use_category)
        dense = visible
        if use_visible_channels is not None:
            dense = visible * use_visible_channels[:, None, None, None].to(visible.dtype)
        channels = torch.cat([self.to_latent(dense), self.to_latent(occluding)], dim=1)
        return ConditionEncoding(token_sequence=tokens, channel_condition=channels)

    def encode_condition(self, crops, use_category_condition: bool = True,
                         use_occluding_condition: bool = True) -> ConditionEncoding:
        """Encode one RoiCrop or a sequence of them."""
        if not isinstance(crops, (list, tuple)):
            crops = [crops]
        visible = torch.stack([c.visible_pixels_image for c in crops]).float()
        occluding = torch.stack([c.occluding_mask_crop for c in crops]).float()
        category = torch.tensor([c.category_id for c in crops], dtype=torch.long)
        b = len(crops)
        use_cat = torch.full((b,), bool(use_category_condition))
        use_occ = torch.full((b,), bool(use_occluding_condition))
        return self.encode_tensors(visible, occluding, category, use_cat, use_occ)

    def predict_noise(self, x_t: torch.Tensor, t: torch.Tensor, condition: ConditionEncoding) -> torch.Tensor:
        if t.dim() == 0:
            t = t.expand(x_t.shape[0])
        x = torch.cat([x_t, condition.channel_condition.to(x_t.dtype)], dim=1)
        return self.unet(x, t, condition.token_sequence)

    def set_recorder(self, recorder: Optional[Recorder]) -> None:
        for block in self.unet.attention_blocks:
            block.recorder = recorder


def _initial_noise(shape: Tuple[int, ...], seeds: Sequence[int]) -> torch.Tensor:
    out = []
    for s in seeds:
        g = torch.Generator().manual_seed(int(s) % (2**63))
        out.append(torch.randn(shape, generator=g))
    return torch.stack(out)


@torch.no_grad()
def denoise_with_capture(model, condition: ConditionEncoding, T_sample: int,
                         rng_seed: Union[int, Sequence[int]], recorder: Optional[Recorder] = None):
    """DDIM sampling with every attention matrix routed to ``recorder``.

    ``rng_seed`` is one seed per batch item (an int applies to a batch of one,
    or is offset by the item index for larger batches). Returns
    ``(generated_latent, recorder)``.
    """
    b = len(condition)
    if isinstance(rng_seed, (int, np.integer)):
        seeds = [int(rng_seed) + i for i in range(b)]
    else:
        seeds = [int(s) for s in rng_seed]
        if len(seeds) != b:
            raise ValueError(f"{len(seeds)} seeds for a batch of {b}")
    if recorder is None:
        recorder = AttentionStack(model.layer_resolutions)
    schedule = model.schedule
    steps = schedule.sampling_timesteps(T_sample)
    ab = schedule.alphas_bar
    x = _initial_noise((3, model.latent_size, model.latent_size), seeds)
    was_training = model.training
    model.eval()
    model.set_recorder(recorder)
    try:
        for k, t in enumerate(steps):
            recorder.begin_step(k)
            eps = model.predict_noise(x, torch.full((b,), t, dtype=torch.long), condition)
            ab_prev = ab[steps[k + 1]] if k + 1 < len(steps) else 1.0
            x = ddim_step(x, eps, float(ab[t]), float(ab_prev))
    finally:
        model.set_recorder(None)
        model.train(was_training)
    return x, recorder


@dataclass
class DiffusionBatch:
    x0: torch.Tensor  # B x 3 x h x w latent of the full object rendering
    visible: torch.Tensor  # B x 3 x R x R
    occluding: torch.Tensor  # B x 1 x R x R
    category: torch.Tensor  # B

    def __len__(self):
        return self.x0.shape[0]

    def index(self, idx: torch.Tensor) -> "DiffusionBatch":
        return DiffusionBatch(self.x0[idx], self.visible[idx], self.occluding[idx], self.category[idx])


class NonFiniteLoss(FloatingPointError):
    pass


def diffusion_loss(model, batch: DiffusionBatch, generator: torch.Generator,
                   condition_dropout: float = 0.0, visible_channel_dropout: float = 0.0) -> torch.Tensor:
    """Noise-prediction MSE. ``condition_dropout`` nulls the category and
    occluding conditions independently; ``visible_channel_dropout`` blanks the
    dense visible pixels so the object must be drawn from the tokens, which is
    what makes the category cross-attention column cover the whole object."""
    b = len(batch)
    t = torch.randint(0, model.schedule.T_train, (b,), generator=generator)
    noise = torch.randn(batch.x0.shape, generator=generator)
    u = torch.rand((3, b), generator=generator)
    keep = u[:2] >= condition_dropout
    cond = model.encode_tensors(batch.visible, batch.occluding, batch.category, keep[0], keep[1],
                                u[2] >= visible_channel_dropout)
    x_t = q_sample(model.schedule, batch.x0, t, noise)
    eps = model.predict_noise(x_t, t, cond)
    return ((noise - eps) ** 2).mean()


def diffusion_train_step(model, batch: DiffusionBatch, generator: torch.Generator,
                         optimizer: Optional[torch.optim.Optimizer] = None,
                         condition_dropout: float = 0.0, visible_channel_dropout: float = 0.0) -> float:
    """One noise-prediction step; returns the loss before the update."""
    loss = diffusion_loss(model, batch, generator, condition_dropout, visible_channel_dropout)
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"diffusion loss is {loss.item()} (batch of {len(batch)})")
    if optimizer is not None:
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
    return float(loss.item())


def build_diffusion_batch(scenes, crop_size: int = 32, latent_size: int = 16) -> DiffusionBatch:
    """Training pairs from ground truth: visible pixels + occluding mask -> full object."""
    from .backbone import make_amodal_target, make_roi_crop

    x0, vis, occ, cat = [], [], [], []
    factor = crop_size // latent_size
    for scene in scenes:
        for inst in scene.instances:
            crop = make_roi_crop(scene, inst, inst.visible_mask, inst.occluding_mask, crop_size)
            target = make_amodal_target(scene, inst, crop_size)
            x0.append(F.avg_pool2d(target[None], factor)[0] if factor > 1 else target)
            vis.append(crop.visible_pixels_image)
            occ.append(crop.occluding_mask_crop[None])
            cat.append(crop.category_id)
    if not x0:
        raise ValueError("no instances to build diffusion training data from")
    return DiffusionBatch(torch.stack(x0), torch.stack(vis), torch.stack(occ),
                          torch.tensor(cat, dtype=torch.long))


def train_diffusion(model: DiffusionModel, data: DiffusionBatch, iterations: int, batch_size: int = 64,
                    learning_rate: float = 1e-3, seed: int = 0, condition_dropout: float = 0.15,
                    visible_channel_dropout: float = 0.5,
                    log_interval: int = 500) -> List[float]:
    generator = torch.Generator().manual_seed(int(seed))
    optimizer = torch.optim.Adam(model.parameters(), lr=learning_rate)
    model.train()
    losses = []
    n = len(data)
    for it in range(iterations):
        idx = torch.randint(0, n, (min(batch_size, n),), generator=generator)
        loss = diffusion_train_step(model, data.index(idx), generator, optimizer, condition_dropout,
                                    visible_channel_dropout)
        losses.append(loss)
        if log_interval and (it + 1) % log_interval == 0:
            logger.info("diffusion it %d loss %.4f", it + 1, float(np.mean(losses[-log_interval:])))
    model.eval()
    return losses
