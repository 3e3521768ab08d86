"""Multi-task objective, prior caching, and the training loops."""
import base64
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt
from .backbone import crop_nearest, jitter_box, make_roi_crop
from .config import TrainConfig
from .diffsp import estimate_shape_priors
from .diffusion import DiffusionModel, build_diffusion_batch, train_diffusion
from .model import AISModel
from .scenes import dataset_categories, read_dataset

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class NumericError(FloatingPointError):
    pass


@dataclass
class LossBreakdown:
    l_cls: torch.Tensor
    l_v: torch.Tensor
    l_o: torch.Tensor
    l_a: torch.Tensor
    l_det: float = 0.0  # detector is out of scope: ground-truth boxes are used
    total: torch.Tensor = None

    def __post_init__(self):
        if self.total is None:
            self.total = self.l_det + self.l_cls + self.l_v + self.l_o + self.l_a

    def as_floats(self) -> Dict[str, float]:
        out = {}
        for k in ("l_det", "l_cls", "l_v", "l_o", "l_a", "total"):
            v = getattr(self, k)
            out[k] = float(v.detach()) if torch.is_tensor(v) else float(v)
        return out


@dataclass
class SceneTargets:
    scene_id: int
    image: torch.Tensor  # 3 x S x S
    boxes: List[Tuple[float, float, float, float]]
    visible: torch.Tensor  # n x M x M
    occluding: torch.Tensor
    amodal: torch.Tensor
    category: torch.Tensor  # n
    instance_ids: List[int]


def mask_targets(scene, mask_size: int = 28) -> SceneTargets:
    """Ground-truth masks cropped to each amodal box by nearest neighbour."""
    vis, occ, amo = [], [], []
    for inst in scene.instances:
        vis.append(crop_nearest(inst.visible_mask, inst.bbox, mask_size))
        occ.append(crop_nearest(inst.occluding_mask, inst.bbox, mask_size))
        amo.append(crop_nearest(inst.amodal_mask, inst.bbox, mask_size))

    def stack(ms):
        return torch.from_numpy(np.stack(ms).astype(np.float32))

    return SceneTargets(
        scene_id=scene.scene_id,
        image=torch.from_numpy(np.ascontiguousarray(scene.image.transpose(2, 0, 1))),
        boxes=[tuple(float(v) for v in inst.bbox) for inst in scene.instances],
        visible=stack(vis), occluding=stack(occ), amodal=stack(amo),
        category=torch.tensor([inst.category_id for inst in scene.instances], dtype=torch.long),
        instance_ids=[inst.instance_id for inst in scene.instances],
    )


def total_loss(visocc_pred, amodal_pred, targets) -> LossBreakdown:
    """Unit-weighted sum of class CE and per-pixel BCE on the three masks."""

    def bce(logits, target):
        return F.binary_cross_entropy_with_logits(logits.reshape(target.shape), target)

    parts = {
        "l_cls": F.cross_entropy(visocc_pred.class_logits, targets.category),
        "l_v": bce(visocc_pred.visible_logits, targets.visible),
        "l_o": bce(visocc_pred.occluding_logits, targets.occluding),
        "l_a": bce(amodal_pred.amodal_logits, targets.amodal),
    }
    for name, value in parts.items():
        if not torch.isfinite(value):
            raise NumericError(f"loss component {name} is non-finite ({float(value)})")
    return LossBreakdown(**parts)


# -- diffusion checkpoints ---------------------------------------------------

def build_diffusion(num_classes: int, config: TrainConfig) -> DiffusionModel:
    return DiffusionModel(num_classes=num_classes, crop_size=config.crop_size,
                          base_channels=config.diffusion_base_channels)


def save_diffusion(path, model: DiffusionModel, config: TrainConfig, extra: Optional[dict] = None) -> None:
    meta = {"kind": "diffusion", "backend_id": model.backend_id, "hparams": model.hparams,
            "config": config.to_dict()}
    meta.update(extra or {})
    ckpt.save_checkpoint(path, ckpt.prefixed(model.state_dict(), "toy_diffusion"), meta)


def diffusion_from_tensors(tensors, meta) -> DiffusionModel:
    backend = meta.get("diffusion_backend_id", meta.get("backend_id"))
    if backend != DiffusionModel.backend_id:
        raise ckpt.CheckpointError(f"unsupported diffusion backend {backend!r}")
    model = DiffusionModel(**meta.get("diffusion_hparams", meta.get("hparams")))
    model.load_state_dict(ckpt.unprefixed(tensors, "toy_diffusion"))
    model.eval()
    return model


def load_diffusion(path) -> DiffusionModel:
    tensors, meta = ckpt.load_checkpoint(path)
    return diffusion_from_tensors(tensors, meta)


def run_diffusion_training(config: TrainConfig, scenes=None, num_classes: Optional[int] = None) -> DiffusionModel:
    if scenes is None:
        scenes = read_dataset(config.train_dataset, config.train_split)
        num_classes = len(dataset_categories(config.train_dataset))
    torch.manual_seed(config.seed)
    model = build_diffusion(num_classes, config)
    data = build_diffusion_batch(scenes, config.crop_size, model.latent_size)
    losses = train_diffusion(model, data, config.diffusion_iterations, config.diffusion_batch_size,
                             config.diffusion_learning_rate, config.seed, config.condition_dropout,
                             config.visible_channel_dropout, log_interval=config.log_interval)
    tail = losses[-100:] if losses else [float("nan")]
    save_diffusion(config.diffusion_checkpoint, model, config,
                   {"iterations": config.diffusion_iterations, "final_loss": float(np.mean(tail))})
    return model


# -- prior cache -------------------------------------------------------------

def prior_seed(scene, instance) -> int:
    return (int(scene.seed_used) * 1000003 + int(instance.instance_id) * 7919) % (2**63)


def crop_digest(crop) -> str:
    h = hashlib.sha256()
    h.update(crop.visible_pixels_image.numpy().astype("<f4").tobytes())
    h.update(crop.occluding_mask_crop.numpy().astype("<f4").tobytes())
    h.update(str(crop.category_id).encode())
    return h.hexdigest()


def prior_key(weights_hash: str, crop_hash: str, config: TrainConfig, seed: int) -> str:
    payload = json.dumps([weights_hash, crop_hash, config.T_sample, config.tau_exponent,
                          config.use_category_condition, config.use_occluding_condition, seed])
    return hashlib.sha256(payload.encode()).hexdigest()


def _prior_path(cache_dir: Path, scene_id: int, instance_id: int) -> Path:
    return cache_dir / f"prior_{scene_id:06d}_{instance_id:03d}.npz"


def cache_priors(model: DiffusionModel, scenes, config: TrainConfig, cache_dir=None,
                 mask_size: int = 28) -> Dict:
    """Compute (or reuse) one prior per ground-truth instance.

    Priors are keyed by weights, crop content, sampling settings and seed;
    a stored key that differs from the expected one forces recomputation.
    Returns ``{"priors": {(scene, inst): tensor}, "computed": n, "hits": n}``.
    """
    cache_dir = Path(cache_dir or config.prior_cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    weights_hash = ckpt.weights_digest(model.state_dict())
    priors, pending = {}, []
    for scene in scenes:
        for inst in scene.instances:
            crop = make_roi_crop(scene, inst, inst.visible_mask, inst.occluding_mask, config.crop_size)
            seed = prior_seed(scene, inst)
            key = prior_key(weights_hash, crop_digest(crop), config, seed)
            path = _prior_path(cache_dir, scene.scene_id, inst.instance_id)
            if path.exists():
                with np.load(path) as stored:
                    if str(stored["key"]) == key:
                        priors[(scene.scene_id, inst.instance_id)] = torch.from_numpy(stored["prior"])
                        continue
            pending.append((scene.scene_id, inst.instance_id, crop, seed, key, path))
    if pending:
        maps = estimate_shape_priors(
            model, [p[2] for p in pending], [p[3] for p in pending], config.T_sample,
            config.tau_exponent, target_hw=(mask_size, mask_size),
            use_category_condition=config.use_category_condition,
            use_occluding_condition=config.use_occluding_condition,
            batch_size=config.prior_batch_size)
        for (sid, iid, _, seed, key, path), prior in zip(pending, maps):
            arr = prior.numpy().astype(np.float32)
            np.savez(path, prior=arr, key=np.array(key),
                     provenance=np.array(json.dumps({"T_sample": config.T_sample,
                                                     "tau_exponent": config.tau_exponent,
                                                     "backend_id": model.backend_id,
                                                     "rng_seed": seed})))
            priors[(sid, iid)] = torch.from_numpy(arr)
    logger.info("prior cache %s: %d computed, %d hits", cache_dir, len(pending),
                len(priors) - len(pending))
    return {"priors": priors, "computed": len(pending), "hits": len(priors) - len(pending)}


# -- AIS training --------------------------------------------------------------

def build_ais_model(num_classes: int, config: TrainConfig) -> AISModel:
    return AISModel(num_classes=num_classes, feature_channels=config.feature_channels,
                    roi_size=config.roi_size)


def _encode_torch_rng(state: torch.Tensor) -> str:
    return base64.b64encode(state.numpy().tobytes()).decode("ascii")


def _decode_torch_rng(text: str) -> torch.Tensor:
    return torch.from_numpy(np.frombuffer(base64.b64decode(text), dtype=np.uint8).copy())


def save_ais_checkpoint(path, model: AISModel, diffusion: DiffusionModel, config: TrainConfig,
                        iteration: int, rng: np.random.Generator, optimizer=None,
                        categories: Sequence[str] = (), sample_order: Sequence[int] = ()) -> None:
    tensors = {}
    for name, state in model.component_states().items():
        tensors.update(ckpt.prefixed(state, name))
    tensors.update(ckpt.prefixed(diffusion.state_dict(), "toy_diffusion"))
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                buf = optimizer.state.get(p, {}).get("momentum_buffer")
                if buf is not None:
                    tensors[f"optimizer.momentum.{names[id(p)]}"] = buf
    meta = {
        "kind": "ais",
        "format_version": ckpt.FORMAT_VERSION,
        "config": config.to_dict(),
        "iteration": int(iteration),
        "rng_state": rng.bit_generator.state,
        "torch_rng_state": _encode_torch_rng(torch.get_rng_state()),
        "sample_order": [int(k) for k in sample_order],  # rest of the current epoch
        "model_hparams": model.hparams,
        "diffusion_backend_id": diffusion.backend_id,
        "diffusion_hparams": diffusion.hparams,
        "categories": list(categories),
    }
    ckpt.save_checkpoint(path, tensors, meta)


def load_ais_checkpoint(path):
    """Returns ``(model, diffusion, metadata, tensors)``."""
    tensors, meta = ckpt.load_checkpoint(path)
    if meta.get("kind") != "ais":
        raise ckpt.CheckpointError(f"{path}: not an AIS checkpoint (kind={meta.get('kind')!r})")
    model = AISModel(**meta["model_hparams"])
    model.load_component_states({name: ckpt.unprefixed(tensors, name)
                                 for name in ("backbone", "visocc_head", "amodal_head")})
    model.eval()
    diffusion = diffusion_from_tensors(tensors, meta)
    return model, diffusion, meta, tensors


@dataclass
class TrainResult:
    model: AISModel
    diffusion: DiffusionModel
    log: List[dict]
    checkpoint_path: Optional[Path]
    iteration: int


def _scene_priors(targets: SceneTargets, priors: Dict) -> torch.Tensor:
    try:
        return torch.stack([priors[(targets.scene_id, iid)] for iid in targets.instance_ids])
    except KeyError as exc:
        raise TrainingError(f"missing cached prior for scene/instance {exc.args[0]}") from exc


def train(config: TrainConfig, scenes=None, diffusion: Optional[DiffusionModel] = None,
          categories: Optional[Sequence[str]] = None, resume=None, priors: Optional[Dict] = None,
          write_checkpoints: bool = True) -> TrainResult:
    """SGD over scenes (``batch_size`` scenes per iteration, all their ROIs).

    Everything that can fail on data or caching is resolved before the first
    step. Reference mode is single-threaded and deterministic in ``seed``.
    """
    config.validate()
    if scenes is None:
        scenes = read_dataset(config.train_dataset, config.train_split)
        categories = dataset_categories(config.train_dataset)
    if not scenes:
        raise TrainingError("training set is empty")
    categories = list(categories or [])
    num_classes = len(categories) or 1 + max(i.category_id for s in scenes for i in s.instances)
    if diffusion is None:
        diffusion = load_diffusion(config.diffusion_checkpoint)
    if priors is None:
        priors = cache_priors(diffusion, scenes, config)["priors"]
    targets = [mask_targets(s, 2 * config.roi_size) for s in scenes]
    scene_priors = [_scene_priors(t, priors) for t in targets]

    torch.manual_seed(config.seed)
    model = build_ais_model(num_classes, config)
    optimizer = torch.optim.SGD(model.parameters(), lr=config.learning_rate, momentum=config.momentum)
    rng = np.random.default_rng(config.seed)
    start = 0
    order: List[int] = []
    if resume is not None:
        tensors, meta = ckpt.load_checkpoint(resume)
        model.load_component_states({name: ckpt.unprefixed(tensors, name)
                                     for name in ("backbone", "visocc_head", "amodal_head")})
        named = dict(model.named_parameters())
        for name, buf in ckpt.unprefixed(tensors, "optimizer.momentum").items():
            optimizer.state[named[name]]["momentum_buffer"] = buf.clone()
        rng.bit_generator.state = meta["rng_state"]
        torch.set_rng_state(_decode_torch_rng(meta["torch_rng_state"]))
        start = int(meta["iteration"])
        order = [int(k) for k in meta.get("sample_order", [])]

    out_dir = Path(config.output_dir)
    log, window = [], []
    model.train()
    last_path = None
    for it in range(start, config.iterations):
        loss_sum = None
        parts = []
        for _ in range(config.batch_size):
            if not order:
                order = list(rng.permutation(len(targets)))
            k = int(order.pop(0))
            t = targets[k]
            boxes = t.boxes
            if config.box_jitter > 0:
                boxes = [jitter_box(b, int(rng.integers(2**63)), config.box_jitter, t.image.shape[-1])
                         for b in boxes]
            vo, am = model(t.image, boxes, scene_priors[k])
            lb = total_loss(vo, am, t)
            parts.append(lb)
            loss_sum = lb.total if loss_sum is None else loss_sum + lb.total
        loss = loss_sum / config.batch_size
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        window.append({k: float(np.mean([p.as_floats()[k] for p in parts])) for k in parts[0].as_floats()})
        if (it + 1) % config.log_interval == 0 or it + 1 == config.iterations:
            entry = {"iteration": it + 1}
            entry.update({k: float(np.mean([w[k] for w in window])) for k in window[0]})
            log.append(entry)
            window = []
            logger.info("ais it %d total %.4f (l_a %.4f)", it + 1, entry["total"], entry["l_a"])
        if write_checkpoints and ((it + 1) % config.checkpoint_interval == 0 or it + 1 == config.iterations):
            last_path = out_dir / f"ckpt_{it + 1:06d}.aisd"
            save_ais_checkpoint(last_path, model, diffusion, config, it + 1, rng, optimizer, categories,
                                order)
    model.eval()
    if write_checkpoints:
        out_dir.mkdir(parents=True, exist_ok=True)
        final = out_dir / "model_final.aisd"
        save_ais_checkpoint(final, model, diffusion, config, config.iterations, rng, optimizer, categories,
                            order)
        with open(out_dir / "metrics.jsonl", "a" if resume else "w") as fh:
            for entry in log:
                fh.write(json.dumps(entry) + "\n")
        (out_dir / "effective_config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
        last_path = final
    return TrainResult(model, diffusion, log, last_path, config.iterations)
