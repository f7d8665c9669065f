"""Static figures: BEV detections and evaluation curves (Agg backend, files only)."""

from __future__ import annotations

import json
import re
import xml.etree.ElementTree as ET
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Polygon  # noqa: E402

from . import evalkit  # noqa: E402
from .boxes import Box3D  # noqa: E402

COLORS = ("tab:blue", "tab:orange", "tab:green", "tab:red", "tab:purple")
_SVG_NS = "{http://www.w3.org/2000/svg}"


def _save(fig, path: Path, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fmt = path.suffix.lstrip(".").lower() or "png"
    with plt.rc_context({"svg.hashsalt": "li3detr", "svg.fonttype": "none"}):
        if fmt == "svg":
            md = {"Date": None}
            if meta is not None:
                md["Description"] = json.dumps(meta, sort_keys=True)
            fig.savefig(path, format="svg", metadata=md)
        elif fmt == "png":
            fig.savefig(path, format="png", dpi=110, metadata={"Software": None})
        else:
            fig.savefig(path, format=fmt)
    plt.close(fig)
    return path


def plot_bev(path, points: np.ndarray, boxes: Sequence[Box3D], class_names: Sequence[str],
             pc_range, gts: Sequence[Box3D] = (), title: str = "") -> Path:
    """Point scatter plus box outlines. Detection ``i`` is the patch with
    gid ``box_i``; ground truth (if given) is drawn dashed as ``gt_i``."""
    fig, ax = plt.subplots(figsize=(6.4, 6.4))
    x0, y0, _, x1, y1, _ = pc_range
    if len(points):
        ax.scatter(points[:, 0], points[:, 1], s=0.6, c="0.45", linewidths=0, rasterized=False)
    for i, g in enumerate(gts):
        ax.add_patch(Polygon(g.bev_corners(), closed=True, fill=False, ec="k", ls="--",
                             lw=0.8, gid=f"gt_{i}"))
    for i, b in enumerate(boxes):
        c = COLORS[b.class_id % len(COLORS)]
        ax.add_patch(Polygon(b.bev_corners(), closed=True, fill=False, ec=c, lw=1.2,
                             gid=f"box_{i}"))
        head = b.center[:2] + 0.5 * b.size[0] * np.array([np.cos(b.yaw), np.sin(b.yaw)])
        ax.plot([b.center[0], head[0]], [b.center[1], head[1]], color=c, lw=0.8)
    for k, name in enumerate(class_names):
        ax.plot([], [], color=COLORS[k % len(COLORS)], label=name)
    ax.set_xlim(x0, x1)
    ax.set_ylim(y0, y1)
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.legend(loc="upper right", fontsize=7)
    if title:
        ax.set_title(title)
    fig.canvas.draw()
    # axes box in SVG user units (pt, origin top-left) so outlines can be mapped back
    bb = ax.get_window_extent()
    H = fig.bbox.height
    scale = 72.0 / fig.dpi
    meta = {"axes_px": [bb.x0 * scale, (H - bb.y1) * scale, bb.x1 * scale, (H - bb.y0) * scale],
            "data": [x0, y0, x1, y1], "num_boxes": len(boxes)}
    return _save(fig, path, meta)


def read_bev_svg(path) -> dict[str, np.ndarray]:
    """Recover outline polygons (world metres) keyed by gid from ``plot_bev`` SVG."""
    root = ET.parse(path).getroot()
    desc = root.find(f".//{_SVG_NS}metadata")
    text = "".join(desc.itertext()) if desc is not None else ""
    m = re.search(r"\{.*\"axes_px\".*\}", text, re.S)
    if not m:
        raise ValueError(f"{path}: no BEV geometry metadata")
    meta = json.loads(m.group(0))
    ax0, ay0, ax1, ay1 = meta["axes_px"]
    x0, y0, x1, y1 = meta["data"]
    out = {}
    for g in root.iter(f"{_SVG_NS}g"):
        gid = g.get("id", "")
        if not re.fullmatch(r"(box|gt)_\d+", gid):
            continue
        p = g.find(f"{_SVG_NS}path")
        nums = [float(v) for v in re.findall(r"-?\d+(?:\.\d+)?(?:e-?\d+)?", p.get("d"))]
        xy = np.array(nums).reshape(-1, 2)
        wx = x0 + (xy[:, 0] - ax0) / (ax1 - ax0) * (x1 - x0)
        wy = y1 - (xy[:, 1] - ay0) / (ay1 - ay0) * (y1 - y0)
        poly = np.stack([wx, wy], axis=1)
        if len(poly) > 1 and np.allclose(poly[0], poly[-1]):
            poly = poly[:-1]
        out[gid] = poly
    return out


def plot_eval(path, preds, gts, class_names: Sequence[str], report: dict,
              cfg: evalkit.EvalConfig | None = None) -> Path:
    """PR curves at the TP threshold per class, plus the stratified mAP bars."""
    cfg = cfg or evalkit.EvalConfig()
    fig, (a0, a1, a2) = plt.subplots(1, 3, figsize=(13, 4))
    for c, name in enumerate(class_names):
        matches, npos = evalkit.greedy_match(preds, gts, c, "distance", cfg.tp_threshold)
        if npos == 0:
            continue
        rec, prec = evalkit.precision_recall(matches, npos, cfg.recall_points)
        ap = report["per_class"][name]["ap"].get(f"{cfg.tp_threshold:g}")
        a0.plot(rec, prec, color=COLORS[c % len(COLORS)],
                label=f"{name} (AP {ap:.3f})" if ap is not None else name)
    a0.set_xlim(0, 1)
    a0.set_ylim(0, 1.02)
    a0.set_xlabel("recall")
    a0.set_ylabel("precision")
    a0.set_title(f"PR at {cfg.tp_threshold:g} m")
    a0.legend(fontsize=7, loc="lower left")
    for ax, mode in ((a1, "distance"), (a2, "size")):
        strat = report["stratified"][mode]
        labels = list(strat)
        vals = [strat[k] if strat[k] is not None else 0.0 for k in labels]
        bars = ax.bar(range(len(labels)), vals, color="tab:gray")
        for b, k in zip(bars, labels):
            if strat[k] is None:
                ax.annotate("n/a", (b.get_x() + b.get_width() / 2, 0.02), ha="center", fontsize=8)
        ax.set_xticks(range(len(labels)), labels)
        ax.set_ylim(0, 1)
        ax.set_title(f"mAP by {mode}")
    fig.tight_layout()
    return _save(fig, path)


def plot_losses(path, history: Sequence[dict]) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = [h["step"] for h in history]
    ax.plot(steps, [h["loss"] for h in history], lw=0.8)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    fig.tight_layout()
    return _save(fig, path)
