"""Mask IoU, COCO-style AP/AR over amodal masks and the visible-copy baseline."""
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

COCO_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
OCCLUDED_MIN_RATIO = 0.10


@dataclass
class DetectionRecord:
    scene_id: int
    instance_id: int
    score: float
    category_id: int
    amodal_mask: np.ndarray
    visible_mask: Optional[np.ndarray] = None
    occluding_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass
class GroundTruth:
    scene_id: int
    instance_id: int
    category_id: int
    mask: np.ndarray


@dataclass
class EvalReport:
    ap: float
    ar: float
    per_category: Dict[str, Dict[str, float]]
    mean_amodal_iou: float
    mean_visible_copy_iou: float
    occluded: Dict[str, float] = field(default_factory=dict)
    iou_thresholds: List[float] = field(default_factory=lambda: list(COCO_IOU_THRESHOLDS))
    max_detections: int = 100
    ap_per_threshold: List[float] = field(default_factory=list)
    instances: List[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """|a & b| / |a | b|, with two empty masks counting as a perfect match."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def greedy_match(scores: Sequence[float], ious: np.ndarray, threshold: float) -> np.ndarray:
    """Score-ordered greedy matching within one image and category.

    Returns a boolean true-positive flag per detection (in the input order).
    """
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="mergesort")
    n_gt = ious.shape[1] if ious.ndim == 2 else 0
    taken = np.zeros(n_gt, dtype=bool)
    tp = np.zeros(len(scores), dtype=bool)
    thr = min(threshold, 1.0 - 1e-10)
    for d in order:
        best, best_iou = -1, thr
        for g in range(n_gt):
            if taken[g] or ious[d, g] < best_iou:
                continue
            best, best_iou = g, ious[d, g]
        if best >= 0:
            taken[best] = True
            tp[d] = True
    return tp


def precision_recall_ap(scores: Sequence[float], tp: Sequence[bool], num_gt: int):
    """101-point interpolated AP and final recall for one category."""
    if num_gt == 0:
        return None, None
    if len(scores) == 0:
        return 0.0, 0.0
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="mergesort")
    hits = np.asarray(tp, dtype=np.float64)[order]
    tps = np.cumsum(hits)
    fps = np.cumsum(1.0 - hits)
    recall = tps / num_gt
    precision = tps / (tps + fps)
    for i in range(len(precision) - 1, 0, -1):
        precision[i - 1] = max(precision[i - 1], precision[i])
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(q.mean()), float(recall[-1])


def evaluate_groups(groups: Sequence[dict], iou_thresholds=COCO_IOU_THRESHOLDS, max_detections: int = 100):
    """AP/AR from precomputed IoUs.

    Each group is one (image, category) cell: ``{"category", "scores", "ious"
    (n_det x n_gt), "num_gt"}``. Returns ``(ap, ar, per_category, ap_per_threshold)``
    where the per-category values are means over thresholds.
    """
    cats = sorted({g["category"] for g in groups})
    ap_table, ar_table = {}, {}
    for c in cats:
        cells = [g for g in groups if g["category"] == c]
        num_gt = sum(g["num_gt"] for g in cells)
        for t in iou_thresholds:
            scores, flags = [], []
            for g in cells:
                s = np.asarray(g["scores"], dtype=np.float64)
                keep = np.argsort(-s, kind="mergesort")[:max_detections]
                ious = np.asarray(g["ious"], dtype=np.float64).reshape(len(s), g["num_gt"])[keep]
                flags.extend(greedy_match(s[keep], ious, t))
                scores.extend(s[keep])
            ap, ar = precision_recall_ap(scores, flags, num_gt)
            if ap is not None:
                ap_table[(c, t)] = ap
                ar_table[(c, t)] = ar
    valid_cats = sorted({c for c, _ in ap_table})
    if not valid_cats:
        return 0.0, 0.0, {}, [0.0] * len(iou_thresholds)
    per_category = {c: {"ap": float(np.mean([ap_table[(c, t)] for t in iou_thresholds])),
                        "ar": float(np.mean([ar_table[(c, t)] for t in iou_thresholds]))}
                    for c in valid_cats}
    ap = float(np.mean(list(ap_table.values())))
    ar = float(np.mean(list(ar_table.values())))
    per_t = [float(np.mean([ap_table[(c, t)] for c in valid_cats])) for t in iou_thresholds]
    return ap, ar, per_category, per_t


def build_groups(detections: Sequence[DetectionRecord], ground_truths: Sequence[GroundTruth]) -> List[dict]:
    cells: Dict[tuple, dict] = {}
    for gt in ground_truths:
        cells.setdefault((gt.scene_id, gt.category_id), {"dets": [], "gts": []})["gts"].append(gt)
    for det in detections:
        cells.setdefault((det.scene_id, det.category_id), {"dets": [], "gts": []})["dets"].append(det)
    groups = []
    for (_, cat), cell in sorted(cells.items()):
        ious = np.zeros((len(cell["dets"]), len(cell["gts"])))
        for i, d in enumerate(cell["dets"]):
            for j, g in enumerate(cell["gts"]):
                ious[i, j] = mask_iou(d.amodal_mask, g.mask)
        groups.append({"category": cat, "scores": [d.score for d in cell["dets"]],
                       "ious": ious, "num_gt": len(cell["gts"])})
    return groups


def compute_ap_ar(detections: Sequence[DetectionRecord], ground_truths: Sequence[GroundTruth],
                  iou_thresholds=COCO_IOU_THRESHOLDS, categories: Optional[Sequence[str]] = None,
                  max_detections: int = 100) -> EvalReport:
    ap, ar, per_cat, per_t = evaluate_groups(build_groups(detections, ground_truths),
                                             tuple(iou_thresholds), max_detections)
    names = list(categories) if categories else None
    per_category = {(names[c] if names else str(c)): v for c, v in per_cat.items()}
    return EvalReport(ap=ap, ar=ar, per_category=per_category, mean_amodal_iou=float("nan"),
                      mean_visible_copy_iou=float("nan"), iou_thresholds=list(iou_thresholds),
                      max_detections=max_detections, ap_per_threshold=per_t)


def instance_iou_records(scenes, detections: Sequence[DetectionRecord]) -> List[dict]:
    """Per-instance IoUs of the detection made on each ground-truth ROI."""
    by_key = {(d.scene_id, d.instance_id): d for d in detections}
    records = []
    for scene in scenes:
        for inst in scene.instances:
            det = by_key.get((scene.scene_id, inst.instance_id))
            if det is None:
                continue
            rec = {
                "scene_id": scene.scene_id,
                "instance_id": inst.instance_id,
                "category_id": inst.category_id,
                "predicted_category": det.category_id,
                "score": det.score,
                "occlusion_ratio": inst.occlusion_ratio,
                "amodal_iou": mask_iou(det.amodal_mask, inst.amodal_mask),
            }
            if det.visible_mask is not None:
                rec["visible_iou"] = mask_iou(det.visible_mask, inst.visible_mask)
                rec["visible_copy_iou"] = mask_iou(det.visible_mask, inst.amodal_mask)
            records.append(rec)
    return records


def visible_copy_baseline(scenes, detections: Sequence[DetectionRecord],
                          min_occlusion: float = OCCLUDED_MIN_RATIO) -> dict:
    """Compare predicted amodal masks against simply copying the predicted
    visible mask, on instances occluded by at least ``min_occlusion``."""
    recs = [r for r in instance_iou_records(scenes, detections)
            if r["occlusion_ratio"] >= min_occlusion and "visible_copy_iou" in r]
    if not recs:
        return {"count": 0, "mean_amodal_iou": 0.0, "mean_visible_copy_iou": 0.0,
                "paired_difference": 0.0, "min_occlusion": min_occlusion}
    amodal = np.array([r["amodal_iou"] for r in recs])
    copy = np.array([r["visible_copy_iou"] for r in recs])
    return {"count": len(recs), "mean_amodal_iou": float(amodal.mean()),
            "mean_visible_copy_iou": float(copy.mean()),
            "paired_difference": float((amodal - copy).mean()), "min_occlusion": min_occlusion}
