"""Command-line entry point.

Exit codes: 0 success, 1 invalid input (flags, config, dataset, checkpoint),
2 runtime failure.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
from PIL import Image

from . import ablation, plotting
from .backbone import make_roi_crop
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, TrainConfig
from .diffsp import estimate_shape_prior
from .pipeline import evaluate_predictions, predict_scenes
from .scenes import (DatasetError, SceneConfig, SceneError, dataset_categories, default_splits,
                     generate_scenes, read_dataset, write_dataset)
from .train import (cache_priors, diffusion_from_tensors, load_ais_checkpoint, load_diffusion,
                    prior_seed, run_diffusion_training, train)

logger = logging.getLogger("amodalseg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _write_json(path, payload) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, allow_nan=False))


def _load_config(args) -> TrainConfig:
    cfg = TrainConfig.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    torch.set_num_threads(1)


def _split_of(path: str, split: Optional[str]):
    return read_dataset(path, split), dataset_categories(path)


def _load_for_inference(path):
    """AIS checkpoint -> (model, diffusion, meta)."""
    model, diffusion, meta, _ = load_ais_checkpoint(path)
    return model, diffusion, meta


# -- subcommands -----------------------------------------------------------------

def cmd_gen_data(args) -> dict:
    cfg = SceneConfig(image_size=args.image_size, seed=args.seed,
                      instances_per_scene=(args.min_instances, args.max_instances))
    cfg.validate()
    scenes = generate_scenes(cfg, args.scenes)
    splits = default_splits(args.scenes, args.val_frac, args.test_frac)
    return write_dataset(scenes, args.out, cfg.categories, splits=splits, config=cfg.to_dict())


def cmd_train_diffusion(args) -> dict:
    cfg = _load_config(args)
    _seed_everything(cfg.seed)
    train_scenes, cats = _split_of(cfg.train_dataset, cfg.train_split)
    model = run_diffusion_training(cfg, train_scenes, len(cats))
    return {"checkpoint": cfg.diffusion_checkpoint, "backend_id": model.backend_id, "config": cfg.to_dict()}


def cmd_cache_priors(args) -> dict:
    cfg = _load_config(args)
    _seed_everything(cfg.seed)
    scenes, _ = _split_of(cfg.train_dataset, cfg.train_split)
    diffusion = load_diffusion(cfg.diffusion_checkpoint)
    out = cache_priors(diffusion, scenes, cfg)
    return {"cache_dir": cfg.prior_cache_dir, "computed": out["computed"], "hits": out["hits"],
            "config": cfg.to_dict()}


def cmd_train_ais(args) -> dict:
    cfg = _load_config(args)
    _seed_everything(cfg.seed)
    scenes, cats = _split_of(cfg.train_dataset, cfg.train_split)
    resume = args.resume
    if resume is not None and not Path(resume).exists():
        raise FileNotFoundError(f"resume checkpoint {resume} not found")
    result = train(cfg, scenes, None, cats, resume=resume)
    return {"checkpoint": str(result.checkpoint_path), "iterations": result.iteration,
            "final": result.log[-1] if result.log else None, "config": cfg.to_dict()}


def cmd_eval(args) -> dict:
    _seed_everything(args.seed)
    model, diffusion, meta = _load_for_inference(args.checkpoint)
    cfg = TrainConfig.from_dict(meta["config"])
    scenes, cats = _split_of(args.dataset, args.split)
    T = args.T_sample or cfg.T_sample
    tau = cfg.tau_exponent if args.tau_exponent is None else args.tau_exponent
    preds = predict_scenes(model, diffusion, scenes, T, tau, cfg.use_category_condition,
                           cfg.use_occluding_condition, cfg.crop_size, cfg.prior_batch_size)
    effective = {"checkpoint": str(args.checkpoint), "dataset": str(args.dataset), "split": args.split,
                 "seed": args.seed, "T_sample": T, "tau_exponent": tau, "train_config": cfg.to_dict()}
    report = evaluate_predictions(scenes, preds, cats, effective).to_dict()
    _write_json(args.out, report)
    figure = Path(args.out).with_suffix(".png")
    plotting.eval_figure(report, figure)
    return {"report": str(args.out), "figure": str(figure), "ap": report["ap"], "ar": report["ar"],
            "occluded": report["occluded"]}


def cmd_extract_prior(args) -> dict:
    _seed_everything(args.seed)
    tensors, meta = load_checkpoint(args.checkpoint)
    scenes, _ = _split_of(args.dataset, None)
    scene = next((s for s in scenes if s.scene_id == args.scene), None)
    if scene is None:
        raise DatasetError(f"scene {args.scene} not in {args.dataset}")
    inst = next((i for i in scene.instances if i.instance_id == args.instance), None)
    if inst is None:
        raise DatasetError(f"instance {args.instance} not in scene {args.scene}")
    cfg = TrainConfig.from_dict(meta["config"]) if "config" in meta else TrainConfig()
    T = args.T_sample or cfg.T_sample
    tau = cfg.tau_exponent if args.tau_exponent is None else args.tau_exponent
    if meta.get("kind") == "ais":
        model, diffusion, _ = _load_for_inference(args.checkpoint)
        pred = [p for p in predict_scenes(model, diffusion, [scene], T, tau, cfg.use_category_condition,
                                          cfg.use_occluding_condition, cfg.crop_size)
                if p.instance_id == inst.instance_id][0]
        crop = pred.roi_crop
        masks = "predicted"
    else:
        diffusion = diffusion_from_tensors(tensors, meta)
        crop = make_roi_crop(scene, inst, inst.visible_mask, inst.occluding_mask, cfg.crop_size)
        masks = "ground_truth"
    seed = prior_seed(scene, inst) if args.prior_seed is None else args.prior_seed
    prior = estimate_shape_prior(diffusion, crop, T, tau, seed,
                                 use_category_condition=cfg.use_category_condition,
                                 use_occluding_condition=cfg.use_occluding_condition)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"prior_{scene.scene_id}_{inst.instance_id}"
    img = np.round(prior.map.numpy().astype(np.float64) * 65535).astype(np.uint16)
    Image.fromarray(img).save(out / f"{stem}.png")
    sidecar = dict(prior.provenance, scene_id=scene.scene_id, instance_id=inst.instance_id,
                   checkpoint=str(args.checkpoint), masks=masks, raw_resolution=prior.raw_resolution,
                   shape=list(prior.map.shape), encoding="uint16 = round(prior * 65535)")
    _write_json(out / f"{stem}.json", sidecar)
    return {"image": str(out / f"{stem}.png"), "sidecar": str(out / f"{stem}.json")}


def cmd_viz_overlay(args) -> dict:
    _seed_everything(args.seed)
    model, diffusion, meta = _load_for_inference(args.checkpoint)
    cfg = TrainConfig.from_dict(meta["config"])
    scenes, _ = _split_of(args.dataset, args.split)
    scenes = scenes[:args.scenes]
    preds = predict_scenes(model, diffusion, scenes, cfg.T_sample, cfg.tau_exponent,
                           cfg.use_category_condition, cfg.use_occluding_condition, cfg.crop_size)
    by_id = {s.scene_id: s for s in scenes}
    files = []
    for p in preds:
        files.extend(str(f) for f in plotting.save_roi_panels(by_id[p.scene_id], p, args.out))
    composite = plotting.overlay_figure(by_id, preds, Path(args.out) / "overlay.png")
    _write_json(Path(args.out) / "overlay.json", {"panels": files, "composite": str(composite),
                                                   "checkpoint": str(args.checkpoint), "seed": args.seed,
                                                   "config": cfg.to_dict()})
    return {"panels": len(files), "composite": str(composite)}


def cmd_ablate(args) -> dict:
    cfg = _load_config(args)
    _seed_everything(cfg.seed)
    spec = ablation.AblationSpec()
    if args.spec:
        try:
            spec = ablation.AblationSpec.from_dict(json.loads(Path(args.spec).read_text()))
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise ConfigError(f"cannot read ablation spec {args.spec}: {exc}") from exc
    if not Path(cfg.diffusion_checkpoint).exists():
        raise FileNotFoundError(f"diffusion checkpoint {cfg.diffusion_checkpoint} not found")
    train_scenes, cats = _split_of(cfg.train_dataset, cfg.train_split)
    eval_scenes, _ = _split_of(cfg.eval_dataset, cfg.eval_split)
    report = ablation.run_ablation(spec, cfg, train_scenes, eval_scenes, cats)
    report["checks"] = ablation.ordering_checks(report)
    _write_json(args.out, report)
    figure = Path(args.out).with_suffix(".png")
    plotting.ablation_figure(report, figure)
    return {"report": str(args.out), "figure": str(figure), "checks": report["checks"]}


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="amodalseg", description="Amodal instance segmentation with diffusion shape priors.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render a synthetic occlusion dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--image-size", type=int, default=128)
    p.add_argument("--min-instances", type=int, default=2)
    p.add_argument("--max-instances", type=int, default=4)
    p.add_argument("--val-frac", type=float, default=0.1)
    p.add_argument("--test-frac", type=float, default=0.1)
    p.set_defaults(func=cmd_gen_data)

    for name, func, helptext in (("train-diffusion", cmd_train_diffusion, "train the toy diffusion model"),
                                 ("cache-priors", cmd_cache_priors, "precompute training-set shape priors"),
                                 ("train-ais", cmd_train_ais, "train backbone and mask heads")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        if name == "train-ais":
            p.add_argument("--resume", default=None)
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="AP/AR report for an AIS checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default=None)
    p.add_argument("--T-sample", dest="T_sample", type=int, default=None)
    p.add_argument("--tau-exponent", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("extract-prior", help="write one ROI's shape prior as a 16-bit PNG")
    p.add_argument("--checkpoint", required=True, help="AIS or diffusion checkpoint")
    p.add_argument("--dataset", required=True)
    p.add_argument("--scene", type=int, required=True)
    p.add_argument("--instance", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--T-sample", dest="T_sample", type=int, default=None)
    p.add_argument("--tau-exponent", type=int, default=None)
    p.add_argument("--prior-seed", type=int, default=None, help="defaults to the per-ROI seed")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_extract_prior)

    p = sub.add_parser("viz-overlay", help="per-ROI panels and a composite figure")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default=None)
    p.add_argument("--scenes", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_viz_overlay)

    p = sub.add_parser("ablate", help="condition and timestep ablations")
    p.add_argument("--config", required=True)
    p.add_argument("--spec", default=None, help="JSON AblationSpec; defaults to the 4 condition rows")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_ablate)
    return parser


VALIDATION_ERRORS = (ConfigError, SceneError, DatasetError, CheckpointError, FileNotFoundError)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "amodalseg: error: a subcommand is required")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"amodalseg {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        logger.debug("failure", exc_info=True)
        print(f"amodalseg {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
