"""Detection metrics: rotated BEV IoU, distance- and IoU-threshold AP,
true-positive errors, the NDS-style composite and stratified mAP tables."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .boxes import Box3D, wrap_angle
from .numcore import ContractError

Scenes = Sequence[Sequence[Box3D]]

DISTANCE_BINS = ((0.0, 20.0), (20.0, 30.0), (30.0, math.inf))
SIZE_BINS = ((0.0, 4.0), (4.0, math.inf))


@dataclass
class EvalConfig:
    distance_thresholds: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0)
    iou_thresholds: dict[str, float] = field(
        default_factory=lambda: {"car": 0.7, "pedestrian": 0.5, "truck": 0.7}
    )
    default_iou_threshold: float = 0.5
    recall_points: int = 101
    min_recall: float = 0.1
    min_precision: float = 0.1
    tp_threshold: float = 2.0
    tp_normalizers: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        if list(self.distance_thresholds) != sorted(self.distance_thresholds):
            raise ValueError("distance thresholds must be sorted ascending")


# ---------------------------------------------------------------- geometry


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_polygon(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by the convex CCW ``clipper``."""
    out = [tuple(p) for p in subject]
    n = len(clipper)
    for i in range(n):
        if not out:
            break
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        def cross_point(p, q, sp, sq):
            t = sp / (sp - sq)
            return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))

        inp, out = out, []
        prev = inp[-1]
        s_prev = side(prev)
        for cur in inp:
            s_cur = side(cur)
            if s_cur >= 0:
                if s_prev < 0:
                    out.append(cross_point(prev, cur, s_prev, s_cur))
                out.append(cur)
            elif s_prev >= 0:
                out.append(cross_point(prev, cur, s_prev, s_cur))
            prev, s_prev = cur, s_cur
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def rotated_bev_iou(a: Box3D, b: Box3D) -> float:
    pa, pb = a.bev_corners(), b.bev_corners()
    area_a, area_b = polygon_area(pa), polygon_area(pb)
    if area_a <= 0 or area_b <= 0:
        raise ContractError("rotated_bev_iou: degenerate box with zero BEV area")
    # quick reject on circumscribed circles
    ra = 0.5 * math.hypot(a.size[0], a.size[1])
    rb = 0.5 * math.hypot(b.size[0], b.size[1])
    if math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1]) >= ra + rb:
        return 0.0
    inter = polygon_area(clip_polygon(pa, pb))
    union = area_a + area_b - inter
    return float(min(max(inter / union, 0.0), 1.0))


def aligned_iou_3d(a: Box3D, b: Box3D) -> float:
    """IoU of two boxes after translating and rotating one onto the other."""
    inter = float(np.prod(np.minimum(a.size, b.size)))
    return inter / (float(np.prod(a.size)) + float(np.prod(b.size)) - inter)


def bev_distance(a: Box3D, b: Box3D) -> float:
    return math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1])


# ---------------------------------------------------------------- matching / AP


def _as_scenes(boxes) -> list[list[Box3D]]:
    boxes = list(boxes)
    if boxes and isinstance(boxes[0], Box3D):
        return [boxes]
    return [list(s) for s in boxes]


def greedy_match(preds: Scenes, gts: Scenes, class_id: int, criterion, threshold: float):
    """Score-ordered greedy matching within each scene.

    Returns (matches, npos) where ``matches`` lists one tuple
    (score, tp_flag, pred box, matched gt box or None) per prediction in
    descending score order; ties keep the original (scene, index) order.
    ``criterion`` is "distance" (match if <= threshold, nearest wins) or
    "iou" (match if >= threshold, largest overlap wins).
    """
    preds, gts = _as_scenes(preds), _as_scenes(gts)
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} prediction scenes vs {len(gts)} ground-truth scenes")
    gt_cls = [[g for g in s if g.class_id == class_id] for s in gts]
    npos = sum(len(s) for s in gt_cls)
    flat = [(p.score if p.score is not None else 0.0, si, p)
            for si, s in enumerate(preds) for p in s if p.class_id == class_id]
    order = sorted(range(len(flat)), key=lambda i: -flat[i][0])
    claimed = [np.zeros(len(s), dtype=bool) for s in gt_cls]
    out = []
    for i in order:
        score, si, p = flat[i]
        best, best_j = None, -1
        for j, g in enumerate(gt_cls[si]):
            if claimed[si][j]:
                continue
            if criterion == "distance":
                d = bev_distance(p, g)
                if d <= threshold and (best is None or d < best):
                    best, best_j = d, j
            else:
                iou = rotated_bev_iou(p, g)
                if iou >= threshold and (best is None or iou > best):
                    best, best_j = iou, j
        if best_j >= 0:
            claimed[si][best_j] = True
            out.append((score, True, p, gt_cls[si][best_j]))
        else:
            out.append((score, False, p, None))
    return out, npos


def precision_recall(matches, npos: int, recall_points: int = 101):
    """Precision interpolated on a uniform recall grid (zero beyond max recall)."""
    rec_grid = np.linspace(0.0, 1.0, recall_points)
    if not matches or npos == 0:
        return rec_grid, np.zeros(recall_points)
    tp = np.cumsum([m[1] for m in matches]).astype(np.float64)
    fp = np.cumsum([not m[1] for m in matches]).astype(np.float64)
    prec = tp / (tp + fp)
    rec = tp / float(npos)
    # precision where each recall level is first reached; trailing false
    # positives at an unchanged recall must not drag the curve down
    _, first = np.unique(rec, return_index=True)
    return rec_grid, np.interp(rec_grid, rec[first], prec[first], right=0.0)


def _calc_ap(prec: np.ndarray, min_recall: float, min_precision: float) -> float:
    p = np.copy(prec)[round(100 * min_recall) + 1:]
    p -= min_precision
    p[p < 0] = 0.0
    return float(np.mean(p)) / (1.0 - min_precision)


def ap_distance(preds, gts, class_id: int, threshold: float,
                cfg: EvalConfig | None = None) -> float | None:
    """Center-distance AP for one class; None when the class has no ground truth."""
    cfg = cfg or EvalConfig()
    matches, npos = greedy_match(preds, gts, class_id, "distance", threshold)
    if npos == 0:
        return None
    _, prec = precision_recall(matches, npos, cfg.recall_points)
    return _calc_ap(prec, cfg.min_recall, cfg.min_precision)


def ap_iou(preds, gts, class_id: int, threshold: float) -> float | None:
    """Rotated-BEV-IoU AP with 40-point recall sampling and a monotone
    precision envelope, as in the KITTI protocol."""
    matches, npos = greedy_match(preds, gts, class_id, "iou", threshold)
    if npos == 0:
        return None
    if not matches:
        return 0.0
    tp = np.cumsum([m[1] for m in matches]).astype(np.float64)
    fp = np.cumsum([not m[1] for m in matches]).astype(np.float64)
    prec = tp / (tp + fp)
    rec = tp / float(npos)
    env = np.maximum.accumulate(prec[::-1])[::-1]
    total = 0.0
    for r in np.linspace(1.0 / 40, 1.0, 40):
        hit = np.nonzero(rec >= r - 1e-12)[0]
        total += env[hit[0]] if hit.size else 0.0
    return total / 40.0


def tp_errors(pairs: Sequence[tuple[Box3D, Box3D]]) -> tuple[float, float, float, float]:
    """(ATE, ASE, AOE, AVE) over (prediction, ground truth) pairs."""
    if not pairs:
        return (1.0, 1.0, 1.0, 1.0)
    ate = np.mean([bev_distance(p, g) for p, g in pairs])
    ase = np.mean([1.0 - aligned_iou_3d(p, g) for p, g in pairs])
    aoe = np.mean([abs(wrap_angle(p.yaw - g.yaw)) for p, g in pairs])
    ave = np.mean([math.hypot(p.velocity[0] - g.velocity[0], p.velocity[1] - g.velocity[1])
                   for p, g in pairs])
    return (float(ate), float(ase), float(aoe), float(ave))


def nds_lite(mAP: float, errors: Sequence[float],
             normalizers: Sequence[float] = (1.0, 1.0, 1.0, 1.0)) -> float:
    """mAP weighted 5x against each TP term, renormalised over the TP terms given."""
    terms = [1.0 - min(1.0, e / n) for e, n in zip(errors, normalizers)]
    return float((5.0 * mAP + sum(terms)) / (5.0 + len(terms)))


# ---------------------------------------------------------------- stratification


def _bin_of(value: float, bins) -> int:
    for k, (lo, hi) in enumerate(bins):
        if lo <= value < hi:
            return k
    return -1


def _strat_value(box: Box3D, mode: str) -> float:
    if mode == "distance":
        return math.hypot(box.center[0], box.center[1])
    if mode == "size":
        return box.longer_edge
    raise ValueError(f"unknown stratification mode {mode!r}")


def bin_label(lo: float, hi: float) -> str:
    fmt = lambda v: "inf" if math.isinf(v) else f"{v:g}"  # noqa: E731
    return f"[{fmt(lo)},{fmt(hi)})"


def _mean_ap(preds: Scenes, gts: Scenes, class_ids, cfg: EvalConfig) -> float | None:
    aps = []
    for c in class_ids:
        for thr in cfg.distance_thresholds:
            ap = ap_distance(preds, gts, c, thr, cfg)
            if ap is not None:
                aps.append(ap)
    return float(np.mean(aps)) if aps else None


def stratify(preds, gts, mode: str, class_ids: Sequence[int],
             cfg: EvalConfig | None = None) -> dict[str, float | None]:
    """Per-bin mAP. Predictions follow the bin of the ground truth they match
    at the TP threshold; unmatched ones are binned by their own value."""
    cfg = cfg or EvalConfig()
    preds, gts = _as_scenes(preds), _as_scenes(gts)
    bins = DISTANCE_BINS if mode == "distance" else SIZE_BINS
    if mode not in ("distance", "size"):
        raise ValueError(f"unknown stratification mode {mode!r}")
    assigned: dict[int, int] = {}
    for c in class_ids:
        matches, _ = greedy_match(preds, gts, c, "distance", cfg.tp_threshold)
        for _, ok, p, g in matches:
            if ok:
                assigned[id(p)] = _bin_of(_strat_value(g, mode), bins)
    result = {}
    for k, (lo, hi) in enumerate(bins):
        g_bin = [[g for g in s if _bin_of(_strat_value(g, mode), bins) == k] for s in gts]
        p_bin = [[p for p in s
                  if assigned.get(id(p), _bin_of(_strat_value(p, mode), bins)) == k]
                 for s in preds]
        if not any(g_bin):
            result[bin_label(lo, hi)] = None
        else:
            result[bin_label(lo, hi)] = _mean_ap(p_bin, g_bin, class_ids, cfg)
    return result


# ---------------------------------------------------------------- report


def evaluate(preds, gts, class_names: Sequence[str], cfg: EvalConfig | None = None) -> dict:
    """Full metric report as a plain, JSON-serialisable dict."""
    cfg = cfg or EvalConfig()
    preds, gts = _as_scenes(preds), _as_scenes(gts)
    class_ids = list(range(len(class_names)))
    per_class = {}
    aps, iou_aps, errs = [], [], []
    for c, name in enumerate(class_names):
        entry = {"ap": {}, "ap_iou": None}
        for thr in cfg.distance_thresholds:
            ap = ap_distance(preds, gts, c, thr, cfg)
            entry["ap"][f"{thr:g}"] = ap
            if ap is not None:
                aps.append(ap)
        thr_iou = cfg.iou_thresholds.get(name, cfg.default_iou_threshold)
        entry["ap_iou"] = ap_iou(preds, gts, c, thr_iou)
        entry["iou_threshold"] = thr_iou
        if entry["ap_iou"] is not None:
            iou_aps.append(entry["ap_iou"])
        matches, npos = greedy_match(preds, gts, c, "distance", cfg.tp_threshold)
        entry["num_gt"] = npos
        if npos:
            pairs = [(p, g) for _, ok, p, g in matches if ok]
            e = tp_errors(pairs)
            entry["tp_errors"] = dict(zip(("ate", "ase", "aoe", "ave"), e))
            errs.append(e)
        per_class[name] = entry
    mAP = float(np.mean(aps)) if aps else 0.0
    mean_err = tuple(float(v) for v in np.mean(errs, axis=0)) if errs else (1.0,) * 4
    map_by_thr = {}
    for thr in cfg.distance_thresholds:
        vals = [per_class[n]["ap"][f"{thr:g}"] for n in class_names]
        vals = [v for v in vals if v is not None]
        map_by_thr[f"{thr:g}"] = float(np.mean(vals)) if vals else 0.0
    return {
        "classes": list(class_names),
        "per_class": per_class,
        "mAP": mAP,
        "mAP_by_threshold": map_by_thr,
        "mAP_iou": float(np.mean(iou_aps)) if iou_aps else 0.0,
        "mATE": mean_err[0],
        "mASE": mean_err[1],
        "mAOE": mean_err[2],
        "mAVE": mean_err[3],
        "NDS_lite": nds_lite(mAP, mean_err, cfg.tp_normalizers),
        "stratified": {
            "distance": stratify(preds, gts, "distance", class_ids, cfg),
            "size": stratify(preds, gts, "size", class_ids, cfg),
        },
        "num_scenes": len(gts),
    }


def map_at(preds, gts, num_classes: int, threshold: float, cfg: EvalConfig | None = None) -> float:
    """mAP over classes (with ground truth) at a single distance threshold."""
    vals = [ap_distance(preds, gts, c, threshold, cfg) for c in range(num_classes)]
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else 0.0


def write_report(report: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return path


def read_report(path) -> dict:
    return json.loads(Path(path).read_text())
