"""Segmentation IoU, Chamfer distance, instance AP and a fragmentation proxy."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import ShapeError
from .grid import CLASS_NAMES, NUM_CLASSES, GridSpec, Polyline, rasterize_mask
from .vectorize import MapInstance, connected_components, vectorize, vectorize_labels

CD_THRESHOLDS = (0.5, 1.0, 1.5)
AP_IOU_THRESHOLD = 0.2
RESAMPLE_STEP_M = 0.1
# line width used to rasterize single instances for the IoU gate of AP matching
INSTANCE_RASTER_WIDTH_M = 2.0


def iou(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """|A ∩ B| / |A ∪ B|; two empty masks score 1."""
    if pred_mask.shape != gt_mask.shape:
        raise ShapeError(f"mask shapes differ: {pred_mask.shape} vs {gt_mask.shape}")
    a, b = np.asarray(pred_mask, bool), np.asarray(gt_mask, bool)
    union = np.count_nonzero(a | b)
    return 1.0 if union == 0 else np.count_nonzero(a & b) / union


def class_counts(pred: np.ndarray, gt: np.ndarray, where: np.ndarray | None = None) -> np.ndarray:
    """``NUM_CLASSES x 2`` array of [intersection, union] cell counts."""
    if pred.shape != gt.shape:
        raise ShapeError(f"label maps differ: {pred.shape} vs {gt.shape}")
    if where is not None:
        pred, gt = pred[..., where], gt[..., where]
    out = np.zeros((NUM_CLASSES, 2), dtype=np.int64)
    for c in range(NUM_CLASSES):
        p, g = pred == c, gt == c
        out[c] = np.count_nonzero(p & g), np.count_nonzero(p | g)
    return out


def ious_from_counts(counts: np.ndarray) -> np.ndarray:
    inter, union = counts[:, 0].astype(float), counts[:, 1].astype(float)
    return np.where(union > 0, inter / np.maximum(union, 1), 1.0)


# Chamfer ---------------------------------------------------------------------------

def resample(points: np.ndarray, step: float = RESAMPLE_STEP_M) -> np.ndarray:
    """Points every ``step`` metres along a polyline, both endpoints included."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) < 2:
        return pts.copy()
    cl = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(pts, axis=0).T))])
    s = np.arange(0.0, cl[-1], step)
    if cl[-1] - s[-1] > 1e-9:
        s = np.append(s, cl[-1])
    return np.stack([np.interp(s, cl, pts[:, 0]), np.interp(s, cl, pts[:, 1])], axis=1)


def chamfer(a, b) -> float:
    """Symmetric Chamfer distance between two point sets (metres)."""
    a = np.asarray(a, dtype=float).reshape(-1, 2)
    b = np.asarray(b, dtype=float).reshape(-1, 2)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance is undefined for an empty point set")
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return 0.5 * (float(da.mean()) + float(db.mean()))


def polyline_chamfer(p: Polyline | np.ndarray, q: Polyline | np.ndarray,
                     step: float = RESAMPLE_STEP_M) -> float:
    pa = p.points if isinstance(p, Polyline) else p
    qa = q.points if isinstance(q, Polyline) else q
    return chamfer(resample(pa, step), resample(qa, step))


# average precision ---------------------------------------------------------------

def average_precision(tp: Sequence[bool], num_gt: int) -> float:
    """All-points interpolated AP for detections already sorted by confidence."""
    tp = np.asarray(tp, dtype=bool)
    if num_gt == 0:
        return 1.0 if tp.size == 0 else 0.0
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, tp.size + 1)
    recall = ctp / num_gt
    # precision envelope: max precision at any recall >= r
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * env))


@dataclass
class _Entry:
    scene: int
    index: int
    confidence: float
    points: np.ndarray
    mask: np.ndarray | None


def _instance_mask(poly: Polyline, grid: GridSpec | None) -> np.ndarray | None:
    if grid is None:
        return None
    return rasterize_mask([poly], grid, INSTANCE_RASTER_WIDTH_M)


def match_instances(preds: Sequence[_Entry], gts_by_scene: dict[int, list[_Entry]],
                    cd_threshold: float, iou_threshold: float,
                    cd_cache: dict | None = None) -> list[bool]:
    """Greedy matching in descending confidence; returns the TP flag per prediction."""
    order = sorted(range(len(preds)), key=lambda k: (-preds[k].confidence, preds[k].scene,
                                                     preds[k].index))
    taken = {s: [False] * len(g) for s, g in gts_by_scene.items()}
    flags = []
    for k in order:
        p = preds[k]
        best, best_cd = None, np.inf
        for gi, g in enumerate(gts_by_scene.get(p.scene, [])):
            if taken[p.scene][gi]:
                continue
            key = (p.scene, p.index, gi)
            if cd_cache is not None and key in cd_cache:
                cd = cd_cache[key]
            else:
                cd = chamfer(p.points, g.points)
                if cd_cache is not None:
                    cd_cache[key] = cd
            if cd > cd_threshold or cd >= best_cd:
                continue
            if p.mask is not None and g.mask is not None and \
                    iou(p.mask, g.mask) < iou_threshold:
                continue
            best, best_cd = gi, cd
        if best is not None:
            taken[p.scene][best] = True
        flags.append(best is not None)
    return flags


def instance_ap(pred_scenes: Sequence[Sequence[MapInstance]],
                gt_scenes: Sequence[Sequence[MapInstance]], grid: GridSpec | None = None,
                iou_threshold: float = AP_IOU_THRESHOLD,
                cd_thresholds: Sequence[float] = CD_THRESHOLDS) -> dict:
    """Per-class, per-threshold AP over a set of scenes.

    Returns ``{"ap": {class: {thr: ap}}, "map": ..., "map_thresholds_first": ...}``.
    With ``grid`` given, a match also needs rasterized IoU >= ``iou_threshold``
    between the two instances.
    """
    if len(pred_scenes) != len(gt_scenes):
        raise ValueError("prediction and ground-truth scene counts differ")
    ap = np.zeros((NUM_CLASSES, len(cd_thresholds)))
    for c in range(NUM_CLASSES):
        preds, gts = [], {}
        for s, (ps, gs) in enumerate(zip(pred_scenes, gt_scenes)):
            for i, inst in enumerate(x for x in ps if x.class_id == c):
                preds.append(_Entry(s, i, inst.confidence, resample(inst.polyline.points),
                                    _instance_mask(inst.polyline, grid)))
            gts[s] = [_Entry(s, i, 1.0, resample(g.polyline.points),
                             _instance_mask(g.polyline, grid))
                      for i, g in enumerate(x for x in gs if x.class_id == c)]
        num_gt = sum(len(v) for v in gts.values())
        cache: dict = {}
        for t, thr in enumerate(cd_thresholds):
            # flags come back in descending-confidence order
            flags = match_instances(preds, gts, thr, iou_threshold, cache)
            ap[c, t] = average_precision(flags, num_gt)
    per_class = {CLASS_NAMES[c]: {f"{thr:g}": float(ap[c, t]) for t, thr in enumerate(cd_thresholds)}
                 for c in range(NUM_CLASSES)}
    return {"ap": per_class,
            "map": float(ap.mean(axis=0).mean()),
            "map_thresholds_first": float(ap.mean(axis=1).mean()),
            "map_per_threshold": {f"{thr:g}": float(ap[:, t].mean())
                                  for t, thr in enumerate(cd_thresholds)}}


# fragmentation and range split ---------------------------------------------------

def component_counts(labels: np.ndarray) -> list[int]:
    return [connected_components(labels == c)[1] for c in range(NUM_CLASSES)]


def fragmentation_score(pred_labels: np.ndarray, gt_labels: np.ndarray) -> float:
    """Excess predicted components over GT, summed over the foreground classes."""
    if pred_labels.shape != gt_labels.shape:
        raise ShapeError(f"label maps differ: {pred_labels.shape} vs {gt_labels.shape}")
    cp, cg = component_counts(pred_labels), component_counts(gt_labels)
    return float(sum(max(0, p - g) for p, g in zip(cp, cg)))


def near_mask(grid: GridSpec) -> np.ndarray:
    """Columns whose forward coordinate satisfies |x| <= range_forward / 4."""
    x, _ = grid.cell_centers()
    return np.abs(x) <= grid.range_forward_m / 4


def split_far_near(pred: np.ndarray, gt: np.ndarray, grid: GridSpec) -> tuple[dict, dict]:
    """IoU/mIoU restricted to the near and far halves of the forward range."""
    near = near_mask(grid)
    out = []
    for cols in (near, ~near):
        ious = ious_from_counts(class_counts(pred, gt, cols))
        out.append({"iou": [float(v) for v in ious], "miou": float(ious.mean())})
    return out[0], out[1]


# report ----------------------------------------------------------------------------

@dataclass
class EvalReport:
    iou: list[float]
    miou: float
    near: dict
    far: dict
    ap: dict = field(default_factory=dict)
    map: float = 0.0
    map_thresholds_first: float = 0.0
    fragmentation: float = 0.0
    num_scenes: int = 0
    label: str = ""

    def to_dict(self) -> dict:
        return {"label": self.label, "num_scenes": self.num_scenes,
                "iou": dict(zip(CLASS_NAMES, self.iou)), "miou": self.miou,
                "near": {"iou": dict(zip(CLASS_NAMES, self.near["iou"])),
                         "miou": self.near["miou"]},
                "far": {"iou": dict(zip(CLASS_NAMES, self.far["iou"])),
                        "miou": self.far["miou"]},
                "ap": self.ap, "map": self.map,
                "map_thresholds_first": self.map_thresholds_first,
                "fragmentation": self.fragmentation}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def evaluate(pred_labels: Sequence[np.ndarray], gt_labels: Sequence[np.ndarray], grid: GridSpec,
             pred_logits: Sequence[np.ndarray] | None = None, label: str = "",
             with_ap: bool = True) -> EvalReport:
    """Dataset-level report; IoUs accumulate cell counts over all scenes.

    Predicted instances come from ``pred_logits`` when given (so confidences
    are graded), otherwise from the hard labels with confidence 1. Ground-truth
    instances are vectorized from the GT label maps with the same pipeline.
    """
    if len(pred_labels) != len(gt_labels) or not gt_labels:
        raise ValueError("need equally many (>= 1) predicted and GT label maps")
    near = near_mask(grid)
    total = np.zeros((NUM_CLASSES, 2), dtype=np.int64)
    tn, tf = total.copy(), total.copy()
    frag = []
    for p, g in zip(pred_labels, gt_labels):
        total += class_counts(p, g)
        tn += class_counts(p, g, near)
        tf += class_counts(p, g, ~near)
        frag.append(fragmentation_score(p, g))
    ious = ious_from_counts(total)
    iou_n, iou_f = ious_from_counts(tn), ious_from_counts(tf)
    report = EvalReport(iou=[float(v) for v in ious], miou=float(ious.mean()),
                        near={"iou": [float(v) for v in iou_n], "miou": float(iou_n.mean())},
                        far={"iou": [float(v) for v in iou_f], "miou": float(iou_f.mean())},
                        fragmentation=float(np.mean(frag)), num_scenes=len(gt_labels),
                        label=label)
    if with_ap:
        if pred_logits is not None:
            preds = [vectorize(lg, grid) for lg in pred_logits]
        else:
            preds = [vectorize_labels(p, grid) for p in pred_labels]
        gts = [vectorize_labels(g, grid) for g in gt_labels]
        res = instance_ap(preds, gts, grid)
        report.ap, report.map = res["ap"], res["map"]
        report.map_thresholds_first = res["map_thresholds_first"]
    return report


def format_table(reports: Sequence[EvalReport]) -> str:
    """Aligned plain-text table: Div. Ped. Bound. mIoU, far/near mIoU, mAP, fragmentation."""
    header = ["Method", "Div.", "Ped.", "Bound.", "mIoU", "Near", "Far", "mAP", "Frag."]
    rows = []
    for r in reports:
        rows.append([r.label or "-", *(f"{100 * v:.2f}" for v in r.iou), f"{100 * r.miou:.2f}",
                     f"{100 * r.near['miou']:.2f}", f"{100 * r.far['miou']:.2f}",
                     f"{100 * r.map:.2f}", f"{r.fragmentation:.3f}"])
    widths = [max(len(h), *(len(row[i]) for row in rows)) if rows else len(h)
              for i, h in enumerate(header)]

    def fmt(cells):
        return "  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                         for i, (c, w) in enumerate(zip(cells, widths)))

    lines = [fmt(header), fmt(["-" * w for w in widths])]
    lines.extend(fmt(row) for row in rows)
    return "\n".join(lines) + "\n"
