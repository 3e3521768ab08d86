"""Figures: per-ROI overlay panels, evaluation scatter and ablation bars."""
from pathlib import Path
from typing import Dict, List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from .backbone import crop_bilinear, crop_nearest  # noqa: E402

PANELS = ("input", "visible", "occluding", "prior", "attention", "amodal")


def _to_rgb(arr: np.ndarray, cmap: str = "gray") -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == 3:
        return (np.clip(arr, 0, 1) * 255).round().astype(np.uint8)
    rgba = matplotlib.colormaps[cmap](np.clip(arr, 0, 1))
    return (rgba[..., :3] * 255).round().astype(np.uint8)


def _upscale(rgb: np.ndarray, size: int) -> np.ndarray:
    return np.asarray(Image.fromarray(rgb).resize((size, size), Image.NEAREST))


def roi_panels(scene, prediction, mask_size: int = 28) -> Dict[str, np.ndarray]:
    """Float maps for every panel, all on the ROI's ``mask_size`` grid."""
    box = prediction.bbox
    image = crop_bilinear(scene.image, box, mask_size).numpy().transpose(1, 2, 0)
    att = prediction.attention_map.detach().numpy()
    prior = prediction.prior.detach().numpy()
    return {
        "input": image,
        "visible": crop_nearest(prediction.visible_mask, box, mask_size).astype(np.float32),
        "occluding": crop_nearest(prediction.occluding_mask, box, mask_size).astype(np.float32),
        "prior": prior,
        "attention": np.asarray(Image.fromarray(att.astype(np.float32)).resize(prior.shape[::-1], Image.BILINEAR)),
        "amodal": crop_nearest(prediction.amodal_mask, box, mask_size).astype(np.float32),
    }


def save_roi_panels(scene, prediction, out_dir, upscale: int = 112) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, arr in roi_panels(scene, prediction).items():
        cmap = "magma" if name in ("prior", "attention") else "gray"
        path = out_dir / f"{prediction.scene_id}_{prediction.instance_id}_{name}.png"
        Image.fromarray(_upscale(_to_rgb(arr, cmap), upscale), mode="RGB").save(path)
        paths.append(path)
    return paths


def overlay_figure(scenes_by_id, predictions, path, max_rows: int = 8) -> Path:
    rows = predictions[:max_rows]
    fig, axes = plt.subplots(len(rows), len(PANELS), figsize=(1.6 * len(PANELS), 1.6 * len(rows)),
                             squeeze=False)
    for r, pred in enumerate(rows):
        panels = roi_panels(scenes_by_id[pred.scene_id], pred)
        for c, name in enumerate(PANELS):
            ax = axes[r][c]
            arr = panels[name]
            ax.imshow(arr, cmap=None if arr.ndim == 3 else ("magma" if name in ("prior", "attention") else "gray"),
                      vmin=0, vmax=1, interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(name, fontsize=8)
        axes[r][0].set_ylabel(f"{pred.scene_id}/{pred.instance_id}", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def eval_figure(report: dict, path) -> Path:
    """Amodal IoU against visible-copy IoU per instance, colored by occlusion."""
    recs = [r for r in report.get("instances", []) if "visible_copy_iou" in r]
    fig, ax = plt.subplots(figsize=(4.5, 4))
    if recs:
        x = [r["visible_copy_iou"] for r in recs]
        y = [r["amodal_iou"] for r in recs]
        occ = [r["occlusion_ratio"] for r in recs]
        sc = ax.scatter(x, y, c=occ, cmap="viridis", s=10, vmin=0, vmax=1)
        fig.colorbar(sc, ax=ax, label="occlusion ratio")
    ax.plot([0, 1], [0, 1], color="gray", lw=0.8, ls="--")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel("visible-copy IoU")
    ax.set_ylabel("amodal IoU")
    ax.set_title(f"AP {100 * report.get('ap', 0):.1f}  AR {100 * report.get('ar', 0):.1f}")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def ablation_figure(report: dict, path) -> Path:
    rows = report["rows"]
    labels = [("C" if r["use_category_condition"] else "-") + ("O" if r["use_occluding_condition"] else "-")
              for r in rows]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    xs = np.arange(len(rows))
    ax.bar(xs, [100 * r["median_ap"] for r in rows], color="tab:blue", label="median AP")
    for x, r in zip(xs, rows):
        ax.scatter([x] * len(r["runs"]), [100 * run["ap"] for run in r["runs"]], color="black", s=8, zorder=3)
    ax.set_xticks(xs, labels)
    ax.set_xlabel("conditions (C = category, O = occluding)")
    ax.set_ylabel("AP")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
