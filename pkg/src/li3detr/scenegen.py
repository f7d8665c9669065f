"""Synthetic LiDAR-like scenes, point-cloud/label file I/O and dataset manifests."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .boxes import Box3D
from .evalkit import rotated_bev_iou

DEFAULT_RANGE = (-25.6, -25.6, -5.0, 25.6, 25.6, 3.0)
LABEL_COLUMNS = ("class", "cx", "cy", "cz", "l", "w", "h", "yaw", "vx", "vy")


class GenerationError(RuntimeError):
    pass


class FormatError(ValueError):
    pass


class LabelParseError(ValueError):
    pass


@dataclass
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 4)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ValueError(f"point cloud must be N x 4, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains NaN or Inf")
        self.points = pts

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class Scene:
    cloud: PointCloud
    boxes: list[Box3D]
    scene_id: str


@dataclass
class ClassSpec:
    name: str
    size_mean: tuple[float, float, float]
    size_std: tuple[float, float, float]


DEFAULT_CLASSES = (
    ClassSpec("car", (4.5, 1.9, 1.6), (0.3, 0.1, 0.1)),
    ClassSpec("pedestrian", (0.8, 0.7, 1.75), (0.1, 0.08, 0.1)),
    ClassSpec("truck", (8.0, 2.6, 3.0), (0.8, 0.15, 0.2)),
)


@dataclass
class SceneConfig:
    num_objects: tuple[int, int] = (2, 5)
    classes: tuple[ClassSpec, ...] = DEFAULT_CLASSES
    pc_range: tuple[float, ...] = DEFAULT_RANGE
    clutter_density: float = 0.5  # ground points per square metre
    points_per_object: tuple[int, int] = (30, 250)
    density_ref_dist: float = 8.0  # objects closer than this get the maximum count
    density_cutoff: float = 30.0  # beyond this the minimum count is not enforced
    jitter: float = 0.03
    velocity_std: float = 1.0
    edge_margin: float = 1.0
    bev_gap: float = 0.3  # boxes are inflated by this much when testing overlap
    max_retries: int = 200

    @property
    def class_names(self) -> list[str]:
        return [c.name for c in self.classes]


def _sample_box(rng: np.random.Generator, cfg: SceneConfig) -> Box3D:
    cls = int(rng.integers(len(cfg.classes)))
    spec = cfg.classes[cls]
    size = np.maximum(rng.normal(spec.size_mean, spec.size_std), 0.2)
    x0, y0, _, x1, y1, _ = cfg.pc_range
    reach = 0.5 * math.hypot(size[0], size[1]) + cfg.edge_margin
    cx = rng.uniform(x0 + reach, x1 - reach)
    cy = rng.uniform(y0 + reach, y1 - reach)
    yaw = rng.uniform(-math.pi, math.pi)
    vel = rng.normal(0.0, cfg.velocity_std, size=2)
    return Box3D((cx, cy, size[2] / 2.0), tuple(size), yaw, tuple(vel), cls)


def _inflate(b: Box3D, gap: float) -> Box3D:
    return Box3D(b.center, (b.size[0] + gap, b.size[1] + gap, b.size[2]), b.yaw)


def _surface_points(rng: np.random.Generator, box: Box3D, n: int, jitter: float) -> np.ndarray:
    l, w, h = box.size
    # four side faces and the roof, picked in proportion to area
    areas = np.array([l * h, l * h, w * h, w * h, l * w])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    a = rng.uniform(-0.5, 0.5, size=n)
    b = rng.uniform(-0.5, 0.5, size=n)
    local = np.zeros((n, 3))
    local[:, 0] = np.select([face < 2, face < 4], [a * l, np.where(face == 2, 0.5, -0.5) * l], a * l)
    local[:, 1] = np.select([face < 2, face < 4], [np.where(face == 0, 0.5, -0.5) * w, a * w], b * w)
    local[:, 2] = np.where(face == 4, 0.5, b) * h
    local += rng.normal(0.0, jitter, size=local.shape)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    xy = local[:, :2] @ np.array([[c, s], [-s, c]])
    out = np.empty((n, 4))
    out[:, 0] = xy[:, 0] + box.center[0]
    out[:, 1] = xy[:, 1] + box.center[1]
    out[:, 2] = local[:, 2] + box.center[2]
    out[:, 3] = rng.uniform(0.4, 1.0, size=n)
    return out


def object_point_count(dist: float, cfg: SceneConfig) -> tuple[int, bool]:
    """Points for an object at BEV range ``dist`` and whether it is flagged sparse."""
    lo, hi = cfg.points_per_object
    raw = hi * (cfg.density_ref_dist / max(dist, cfg.density_ref_dist)) ** 2
    n = int(round(min(raw, hi)))
    if dist > cfg.density_cutoff:
        return max(n, 1), n < lo
    return max(n, lo), False


def in_range(points: np.ndarray, pc_range) -> np.ndarray:
    lo = np.asarray(pc_range[:3])
    hi = np.asarray(pc_range[3:])
    xyz = points[:, :3]
    return np.all((xyz >= lo) & (xyz < hi), axis=1)


def generate_scene(seed: int, cfg: SceneConfig | None = None, scene_id: str | None = None) -> Scene:
    """Deterministic synthetic scene for ``(seed, cfg)``."""
    cfg = cfg or SceneConfig()
    rng = np.random.default_rng(seed)
    lo, hi = cfg.num_objects
    n_obj = int(rng.integers(lo, hi + 1))
    boxes: list[Box3D] = []
    for _ in range(n_obj):
        for _attempt in range(cfg.max_retries):
            cand = _sample_box(rng, cfg)
            big = _inflate(cand, cfg.bev_gap)
            if all(rotated_bev_iou(big, _inflate(b, cfg.bev_gap)) == 0.0 for b in boxes):
                boxes.append(cand)
                break
        else:
            raise GenerationError(
                f"could not place {n_obj} non-overlapping boxes (seed={seed})"
            )

    parts = []
    x0, y0, z0, x1, y1, z1 = cfg.pc_range
    n_ground = int(round(cfg.clutter_density * (x1 - x0) * (y1 - y0)))
    ground = np.empty((n_ground, 4))
    ground[:, 0] = rng.uniform(x0, x1, n_ground)
    ground[:, 1] = rng.uniform(y0, y1, n_ground)
    ground[:, 2] = rng.normal(0.0, 0.05, n_ground)
    ground[:, 3] = rng.uniform(0.0, 0.3, n_ground)
    parts.append(ground)
    for i, b in enumerate(boxes):
        n, sparse = object_point_count(math.hypot(b.center[0], b.center[1]), cfg)
        b.sparse = sparse
        parts.append(_surface_points(rng, b, n, cfg.jitter))
    pts = np.concatenate(parts, axis=0)
    pts = pts[in_range(pts, cfg.pc_range)]
    pts[:, 3] = np.clip(pts[:, 3], 0.0, 1.0)
    # store at file precision so in-memory and on-disk scenes agree exactly
    pts = pts.astype("<f4").astype(np.float64)
    return Scene(PointCloud(pts), boxes, scene_id or f"scene_{seed:06d}")


# ---------------------------------------------------------------- point cloud files


def write_cloud(path, cloud: PointCloud | np.ndarray) -> None:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    pts.astype("<f4").reshape(-1).tofile(path)


def read_cloud(path) -> PointCloud:
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise FormatError(f"{path}: {len(raw)} bytes is not a whole number of 16-byte points")
    pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    try:
        return PointCloud(pts)
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from None


# ---------------------------------------------------------------- label files


def format_labels(boxes: Sequence[Box3D], class_names: Sequence[str],
                  with_score: bool = False, with_sparse: bool = False) -> str:
    cols = list(LABEL_COLUMNS)
    if with_score:
        cols.append("score")
    if with_sparse:
        cols.append("sparse")
    lines = ["# " + " ".join(cols)]
    for b in boxes:
        vals = [class_names[b.class_id]]
        vals += [f"{v:.9g}" for v in (*b.center, *b.size, b.yaw, *b.velocity)]
        if with_score:
            vals.append(f"{(b.score if b.score is not None else 0.0):.9g}")
        if with_sparse:
            vals.append("1" if b.sparse else "0")
        lines.append(" ".join(vals))
    return "\n".join(lines) + "\n"


def write_labels(path, boxes: Sequence[Box3D], class_names: Sequence[str],
                 with_score: bool = False, with_sparse: bool = False) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(format_labels(boxes, class_names, with_score, with_sparse))


def read_labels(path, class_names: Sequence[str]) -> list[Box3D]:
    lookup = {n: i for i, n in enumerate(class_names)}
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("#"):
        raise LabelParseError(f"{path}:1: missing header line")
    cols = text[0][1:].split()
    missing = [c for c in LABEL_COLUMNS if c not in cols]
    if missing:
        raise LabelParseError(f"{path}:1: header lacks fields {missing}")
    pos = {c: i for i, c in enumerate(cols)}
    boxes = []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != len(cols):
            raise LabelParseError(
                f"{path}:{lineno}: expected {len(cols)} fields, found {len(parts)}"
            )
        name = parts[pos["class"]]
        if name not in lookup:
            raise LabelParseError(f"{path}:{lineno}: unknown class {name!r}")
        try:
            v = {c: float(parts[pos[c]]) for c in LABEL_COLUMNS[1:]}
            score = float(parts[pos["score"]]) if "score" in pos else None
            sparse = parts[pos["sparse"]] == "1" if "sparse" in pos else False
            box = Box3D((v["cx"], v["cy"], v["cz"]), (v["l"], v["w"], v["h"]), v["yaw"],
                        (v["vx"], v["vy"]), lookup[name], score=score, sparse=sparse)
        except ValueError as e:
            raise LabelParseError(f"{path}:{lineno}: {e}") from None
        boxes.append(box)
    return boxes


# ---------------------------------------------------------------- manifests


@dataclass
class DatasetManifest:
    root: Path
    split: str
    items: list[tuple[str, str]]
    class_names: list[str]
    pc_range: tuple[float, ...]
    seed: int
    extra: dict = field(default_factory=dict)

    def paths(self) -> list[tuple[Path, Path]]:
        return [(self.root / c, self.root / lab) for c, lab in self.items]

    def load(self) -> list[Scene]:
        scenes = []
        for (cloud_path, label_path), (cloud_rel, _) in zip(self.paths(), self.items):
            scenes.append(Scene(read_cloud(cloud_path), read_labels(label_path, self.class_names),
                                Path(cloud_rel).stem))
        return scenes


MANIFEST_NAME = "manifest.json"


def write_manifest(root, splits: dict[str, list[tuple[str, str]]], class_names, pc_range,
                   seed: int, extra: dict | None = None) -> Path:
    root = Path(root)
    doc = {
        "version": 1,
        "classes": list(class_names),
        "point_cloud_range": list(pc_range),
        "seed": seed,
        "splits": {k: [list(p) for p in v] for k, v in splits.items()},
        "extra": extra or {},
    }
    path = root / MANIFEST_NAME
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(root, split: str) -> DatasetManifest:
    root = Path(root)
    path = root / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}; run `li3detr gen` first")
    doc = json.loads(path.read_text())
    if split not in doc["splits"]:
        raise KeyError(f"split {split!r} not in manifest (have {sorted(doc['splits'])})")
    items = [tuple(p) for p in doc["splits"][split]]
    m = DatasetManifest(root, split, items, doc["classes"], tuple(doc["point_cloud_range"]),
                        doc["seed"], doc.get("extra", {}))
    for cloud, label in m.paths():
        if not cloud.exists() or not label.exists():
            raise FileNotFoundError(f"manifest references missing file {cloud} or {label}")
    return m


def generate_dataset(root, counts: dict[str, int], cfg: SceneConfig, seed: int,
                     force: bool = False) -> Path:
    """Write every split to disk; each scene's seed derives from (seed, split, index)."""
    root = Path(root)
    if (root / MANIFEST_NAME).exists() and not force:
        raise FileExistsError(f"dataset already exists at {root}; pass --force to overwrite")
    splits = {}
    for k, (split, n) in enumerate(sorted(counts.items())):
        items = []
        for i in range(n):
            scene_seed = int(np.random.SeedSequence([seed, k, i]).generate_state(1)[0])
            scene = generate_scene(scene_seed, cfg, f"{split}_{i:05d}")
            cloud_rel = f"{split}/clouds/{scene.scene_id}.bin"
            label_rel = f"{split}/labels/{scene.scene_id}.txt"
            write_cloud(root / cloud_rel, scene.cloud)
            write_labels(root / label_rel, scene.boxes, cfg.class_names, with_sparse=True)
            items.append((cloud_rel, label_rel))
        splits[split] = items
    root.mkdir(parents=True, exist_ok=True)
    return write_manifest(root, splits, cfg.class_names, cfg.pc_range, seed)
