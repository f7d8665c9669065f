"""3D box type and the box <-> regression-vector encoding shared by the
model, the loss and the metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

CODE_SIZE = 10  # cx cy cz | log l, log w, log h | sin, cos | vx, vy


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    w = math.remainder(a, 2.0 * math.pi)
    return math.pi if w <= -math.pi else w


@dataclass
class Box3D:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float
    velocity: tuple[float, float] = (0.0, 0.0)
    class_id: int = 0
    score: float | None = None
    sparse: bool = field(default=False, compare=False)

    def __post_init__(self):
        self.center = tuple(float(c) for c in self.center)
        self.size = tuple(float(s) for s in self.size)
        self.velocity = tuple(float(v) for v in self.velocity)
        if len(self.center) != 3 or len(self.size) != 3 or len(self.velocity) != 2:
            raise ValueError("Box3D needs a 3D center, 3D size and 2D velocity")
        if not all(s > 0 for s in self.size):
            raise ValueError(f"box size must be strictly positive, got {self.size}")
        self.yaw = wrap_angle(float(self.yaw))
        self.class_id = int(self.class_id)
        if self.score is not None:
            self.score = float(self.score)

    def bev_corners(self) -> np.ndarray:
        """Counter-clockwise BEV rectangle corners, shape (4, 2)."""
        return rect_corners(self.center[0], self.center[1], self.size[0], self.size[1], self.yaw)

    @property
    def longer_edge(self) -> float:
        return max(self.size[0], self.size[1])


def rect_corners(cx, cy, length, width, yaw) -> np.ndarray:
    dx, dy = length / 2.0, width / 2.0
    local = np.array([[-dx, -dy], [dx, -dy], [dx, dy], [-dx, dy]])
    c, s = math.cos(yaw), math.sin(yaw)
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([cx, cy])


def normalize_center(center, pc_range) -> np.ndarray:
    lo = np.asarray(pc_range[:3], dtype=np.float64)
    hi = np.asarray(pc_range[3:], dtype=np.float64)
    return (np.asarray(center, dtype=np.float64) - lo) / (hi - lo)


def denormalize_center(norm, pc_range) -> np.ndarray:
    lo = np.asarray(pc_range[:3], dtype=np.float64)
    hi = np.asarray(pc_range[3:], dtype=np.float64)
    return lo + np.asarray(norm, dtype=np.float64) * (hi - lo)


def encode_boxes(boxes: list[Box3D], pc_range) -> np.ndarray:
    """Regression targets, one row of CODE_SIZE values per box."""
    out = np.zeros((len(boxes), CODE_SIZE))
    for i, b in enumerate(boxes):
        out[i, :3] = normalize_center(b.center, pc_range)
        out[i, 3:6] = np.log(b.size)
        out[i, 6] = math.sin(b.yaw)
        out[i, 7] = math.cos(b.yaw)
        out[i, 8:10] = b.velocity
    return out


def decode_box(code: np.ndarray, pc_range, class_id: int, score: float | None = None) -> Box3D:
    return Box3D(
        center=denormalize_center(code[:3], pc_range),
        size=np.exp(code[3:6]),
        yaw=math.atan2(code[6], code[7]),
        velocity=code[8:10],
        class_id=class_id,
        score=score,
    )
