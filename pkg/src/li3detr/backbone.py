"""Local feature extraction: voxel and pillar grids, submanifold sparse 3D
convolution, BEV collapse, the strided 2D backbone and the FPN."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .numcore import DimensionError, Tensor, ops
from .params import Params
from .scenegen import DEFAULT_RANGE


class ConfigError(ValueError):
    pass


@dataclass
class GridConfig:
    pc_range: tuple[float, ...] = DEFAULT_RANGE
    voxel_size: tuple[float, float, float] = (0.8, 0.8, 1.0)
    pillar_size: tuple[float, float] = (0.8, 0.8)
    max_points_per_pillar: int = 32
    seed: int = 0

    def dims(self, size) -> tuple[int, ...]:
        if any(s <= 0 for s in size):
            raise ConfigError(f"grid cell size must be positive, got {tuple(size)}")
        lo = np.asarray(self.pc_range[: len(size)])
        hi = np.asarray(self.pc_range[3: 3 + len(size)])
        return tuple(int(round(v)) for v in (hi - lo) / np.asarray(size))


@dataclass
class VoxelGrid:
    keys: np.ndarray  # (M, 3) int, lexicographically sorted
    features: Tensor  # (M, C)
    counts: np.ndarray  # (M,)
    dims: tuple[int, int, int]
    voxel_size: tuple[float, float, float]
    range_min: tuple[float, float, float]

    def linear_keys(self) -> np.ndarray:
        X, Y, Z = self.dims
        k = self.keys
        return (k[:, 0] * Y + k[:, 1]) * Z + k[:, 2]


@dataclass
class PillarGrid:
    keys: np.ndarray  # (P, 2)
    point_pillar: np.ndarray  # (N',) pillar index of every kept point
    decorated: Tensor  # (N', 9)
    dims: tuple[int, int]
    pillar_size: tuple[float, float]


def _as_points(pc) -> Tensor:
    if isinstance(pc, Tensor):
        return pc
    pts = getattr(pc, "points", pc)
    return Tensor(np.asarray(pts, dtype=np.float64).reshape(-1, 4))


def _canonical(points: Tensor) -> Tensor:
    # a fixed point order makes every reduction below independent of input order
    order = np.lexsort(points.data.T[::-1])
    return ops.gather(points, order)


def _cell_index(xyz: np.ndarray, lo, size, dims) -> tuple[np.ndarray, np.ndarray]:
    idx = np.floor((xyz - np.asarray(lo)) / np.asarray(size)).astype(np.int64)
    keep = np.all((idx >= 0) & (idx < np.asarray(dims)), axis=1)
    return idx, keep


# ---------------------------------------------------------------- voxel path


def voxelize(pc, cfg: GridConfig) -> VoxelGrid:
    """Mean (x, y, z, intensity) per occupied voxel; out-of-range points dropped."""
    dims = cfg.dims(cfg.voxel_size)
    pts = _canonical(_as_points(pc))
    idx, keep = _cell_index(pts.data[:, :3], cfg.pc_range[:3], cfg.voxel_size, dims)
    # upper range bound is exclusive
    keep &= np.all(pts.data[:, :3] < np.asarray(cfg.pc_range[3:]), axis=1)
    sel = np.nonzero(keep)[0]
    pts = ops.gather(pts, sel)
    idx = idx[sel]
    X, Y, Z = dims
    lin = (idx[:, 0] * Y + idx[:, 1]) * Z + idx[:, 2]
    uniq, inverse, counts = np.unique(lin, return_inverse=True, return_counts=True)
    summed = ops.scatter_add(pts, inverse, len(uniq))
    feats = summed / counts[:, None].astype(np.float64) if len(uniq) else summed
    keys = np.stack([uniq // (Y * Z), (uniq // Z) % Y, uniq % Z], axis=1) if len(uniq) \
        else np.zeros((0, 3), dtype=np.int64)
    return VoxelGrid(keys, feats, counts, dims, tuple(cfg.voxel_size), tuple(cfg.pc_range[:3]))


_OFFSETS = np.array([(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)])


def neighbor_index(vg: VoxelGrid) -> np.ndarray:
    """(M, 27) row of each 3x3x3 neighbour, or M where the site is empty."""
    M = len(vg.keys)
    dims = np.asarray(vg.dims)
    lin = vg.linear_keys()
    X, Y, Z = vg.dims
    nb = vg.keys[:, None, :] + _OFFSETS[None, :, :]
    valid = np.all((nb >= 0) & (nb < dims), axis=2)
    nlin = (nb[..., 0] * Y + nb[..., 1]) * Z + nb[..., 2]
    pos = np.searchsorted(lin, nlin)
    pos = np.minimum(pos, max(M - 1, 0))
    found = valid & (lin[pos] == nlin) if M else np.zeros_like(valid)
    return np.where(found, pos, M)


def submanifold_conv3d(vg: VoxelGrid, w: Tensor, b: Tensor | None = None,
                       nbr: np.ndarray | None = None) -> VoxelGrid:
    """3x3x3 convolution evaluated only at occupied sites; ``w`` is (27, Cin, Cout)
    with kernel offsets ordered as (dx, dy, dz) in row-major over {-1, 0, 1}."""
    cin = vg.features.shape[1]
    if w.ndim != 3 or w.shape[0] != 27 or w.shape[1] != cin:
        raise DimensionError(
            f"sparse_conv: weight shape {w.shape} incompatible with {cin} input channels"
        )
    M = len(vg.keys)
    nbr = neighbor_index(vg) if nbr is None else nbr
    padded = ops.concat([vg.features, Tensor(np.zeros((1, cin)))], axis=0)
    cols = ops.reshape(ops.gather(padded, nbr), (M, 27 * cin))
    out = cols @ ops.reshape(w, (27 * cin, w.shape[2]))
    if b is not None:
        out = out + b
    return VoxelGrid(vg.keys, out, vg.counts, vg.dims, vg.voxel_size, vg.range_min)


def pool_z(vg: VoxelGrid) -> VoxelGrid:
    """Stride-2 average pooling along z (absent voxels count as zero)."""
    X, Y, Z = vg.dims
    Z2 = (Z + 1) // 2
    keys = vg.keys.copy()
    keys[:, 2] //= 2
    lin = (keys[:, 0] * Y + keys[:, 1]) * Z2 + keys[:, 2]
    uniq, inverse = np.unique(lin, return_inverse=True)
    feats = ops.scatter_add(vg.features, inverse, len(uniq)) * 0.5
    new_keys = np.stack([uniq // (Y * Z2), (uniq // Z2) % Y, uniq % Z2], axis=1) \
        if len(uniq) else np.zeros((0, 3), dtype=np.int64)
    size = (vg.voxel_size[0], vg.voxel_size[1], vg.voxel_size[2] * 2)
    return VoxelGrid(new_keys, feats, np.bincount(inverse, minlength=len(uniq)), (X, Y, Z2),
                     size, vg.range_min)


def sparse_conv_stack(vg: VoxelGrid, p: Params, blocks: list[tuple[int, int, bool]],
                      prefix: str = "sparse") -> VoxelGrid:
    """Blocks of (channels, layers, pool z afterwards) submanifold conv + ReLU."""
    for bi, (_, layers, pool) in enumerate(blocks):
        nbr = neighbor_index(vg)
        for li in range(layers):
            name = f"{prefix}.{bi}.{li}"
            vg = submanifold_conv3d(vg, p[name + ".w"], p[name + ".b"], nbr)
            vg = VoxelGrid(vg.keys, ops.relu(vg.features), vg.counts, vg.dims,
                           vg.voxel_size, vg.range_min)
        if pool:
            vg = pool_z(vg)
    return vg


def collapse_to_bev(vg: VoxelGrid) -> Tensor:
    """Dense X x Y x (Z*C) map; z-slot k holds channels [k*C, (k+1)*C)."""
    X, Y, Z = vg.dims
    C = vg.features.shape[1]
    rows = vg.linear_keys()
    dense = ops.scatter_add(vg.features, rows, X * Y * Z)
    return ops.reshape(dense, (X, Y, Z * C))


# ---------------------------------------------------------------- pillar path


def pillarize(pc, cfg: GridConfig) -> PillarGrid:
    """Group points into BEV pillars and decorate them to 9 features:
    normalised (x, y, z), intensity, offsets to the pillar point mean and
    offsets to the pillar centre (the last five in metres)."""
    X, Y = cfg.dims(cfg.pillar_size)
    lo = np.asarray(cfg.pc_range[:3])
    hi = np.asarray(cfg.pc_range[3:])
    pts = _canonical(_as_points(pc))
    xyz = pts.data[:, :3]
    idx, keep = _cell_index(xyz[:, :2], lo[:2], cfg.pillar_size, (X, Y))
    keep &= np.all((xyz >= lo) & (xyz < hi), axis=1)
    sel = np.nonzero(keep)[0]
    lin = idx[sel, 0] * Y + idx[sel, 1]

    # cap each pillar at max_points_per_pillar with a pillar-seeded subsample
    cap = cfg.max_points_per_pillar
    order = np.argsort(lin, kind="stable")
    sel, lin = sel[order], lin[order]
    uniq, start, counts = np.unique(lin, return_index=True, return_counts=True)
    chosen = []
    for u, s, c in zip(uniq, start, counts):
        if c <= cap:
            chosen.append(np.arange(s, s + c))
        else:
            rng = np.random.default_rng([cfg.seed, int(u)])
            chosen.append(s + np.sort(rng.choice(c, size=cap, replace=False)))
    take = np.concatenate(chosen) if chosen else np.zeros(0, dtype=np.int64)
    sel, lin = sel[take], lin[take]
    uniq, inverse, counts = np.unique(lin, return_inverse=True, return_counts=True)

    p = ops.gather(pts, sel)
    n_p = len(uniq)
    mean = ops.scatter_add(p[:, :3], inverse, n_p) / np.maximum(counts, 1)[:, None].astype(float)
    keys = np.stack([uniq // Y, uniq % Y], axis=1) if n_p else np.zeros((0, 2), dtype=np.int64)
    centre = lo[:2] + (keys + 0.5) * np.asarray(cfg.pillar_size)
    norm_xyz = (p[:, :3] - lo) / (hi - lo)
    decorated = ops.concat([
        norm_xyz,
        p[:, 3:4],
        p[:, :3] - ops.gather(mean, inverse),
        p[:, :2] - centre[inverse],
    ], axis=1)
    return PillarGrid(keys, inverse, decorated, (X, Y), tuple(cfg.pillar_size))


def pillar_feature_net(pg: PillarGrid, p: Params, prefix: str = "pfn") -> Tensor:
    """Shared linear + ReLU per point, max over each pillar, scattered to a dense map."""
    X, Y = pg.dims
    h = ops.relu(nn.linear(p, prefix, pg.decorated))
    pooled = ops.segment_max(h, pg.point_pillar, len(pg.keys))
    rows = pg.keys[:, 0] * Y + pg.keys[:, 1]
    dense = ops.scatter_add(pooled, rows, X * Y)
    return ops.reshape(dense, (X, Y, h.shape[1]))


# ---------------------------------------------------------------- 2D backbone + FPN


@dataclass
class BackboneConfig:
    kind: str = "pillar"  # or "voxel"
    pfn_channels: int = 32
    sparse_blocks: list[tuple[int, int, bool]] = field(
        default_factory=lambda: [(16, 1, True), (32, 1, True)]
    )
    channels: tuple[int, int, int, int] = (32, 64, 64, 64)
    layers: tuple[int, int, int, int] = (1, 1, 1, 1)
    fpn_channels: int = 64
    fpn_out_conv: bool = True


def bev_channels(cfg: BackboneConfig, grid: GridConfig) -> int:
    if cfg.kind == "pillar":
        return cfg.pfn_channels
    if cfg.kind == "voxel":
        Z = grid.dims(grid.voxel_size)[2]
        for _, _, pool in cfg.sparse_blocks:
            if pool:
                Z = (Z + 1) // 2
        return Z * cfg.sparse_blocks[-1][0]
    raise ConfigError(f"unknown backbone kind {cfg.kind!r}")


def init_backbone(p: Params, cfg: BackboneConfig, grid: GridConfig) -> None:
    if cfg.kind == "pillar":
        p.linear("pfn", 9, cfg.pfn_channels)
    elif cfg.kind == "voxel":
        cin = 4
        for bi, (cout, layers, _) in enumerate(cfg.sparse_blocks):
            for li in range(layers):
                std = np.sqrt(2.0 / (27 * cin))
                p.add(f"sparse.{bi}.{li}.w", p.rng.normal(0.0, std, size=(27, cin, cout)))
                p.add(f"sparse.{bi}.{li}.b", np.zeros(cout))
                cin = cout
    else:
        raise ConfigError(f"unknown backbone kind {cfg.kind!r}")
    cin = bev_channels(cfg, grid)
    for j, (cout, layers) in enumerate(zip(cfg.channels, cfg.layers)):
        for li in range(layers):
            p.conv(f"bb.{j}.{li}", 3, cin, cout)
            cin = cout
        p.conv(f"fpn.lat.{j}", 1, cout, cfg.fpn_channels)
        if cfg.fpn_out_conv:
            p.conv(f"fpn.out.{j}", 3, cfg.fpn_channels, cfg.fpn_channels)


def upsample2(x: Tensor) -> Tensor:
    H, W, C = x.shape
    y = ops.reshape(x, (H, 1, W, 1, C)) * np.ones((1, 2, 1, 2, 1))
    return ops.reshape(y, (2 * H, 2 * W, C))


def second_backbone_and_fpn(bev: Tensor, p: Params, cfg: BackboneConfig) -> list[Tensor]:
    """Four strided conv stages (strides 1, 2, 2, 2) fused top-down into
    four maps with ``fpn_channels`` channels each."""
    H, W, _ = bev.shape
    if H % 8 or W % 8:
        raise ConfigError(f"BEV size {H}x{W} must be divisible by 8")
    feats = []
    x = bev
    for j, layers in enumerate(cfg.layers):
        for li in range(layers):
            stride = 2 if (j > 0 and li == 0) else 1
            x = ops.relu(nn.conv(p, f"bb.{j}.{li}", x, stride=stride, pad=1))
        feats.append(x)
    lat = [nn.conv(p, f"fpn.lat.{j}", f, pad=0) for j, f in enumerate(feats)]
    out = [None] * 4
    out[3] = lat[3]
    for j in (2, 1, 0):
        out[j] = lat[j] + upsample2(out[j + 1])
    if cfg.fpn_out_conv:
        out = [nn.conv(p, f"fpn.out.{j}", o, pad=1) for j, o in enumerate(out)]
    return out


def extract_bev(pc, p: Params, cfg: BackboneConfig, grid: GridConfig) -> Tensor:
    if cfg.kind == "pillar":
        return pillar_feature_net(pillarize(pc, grid), p)
    vg = voxelize(pc, grid)
    vg = sparse_conv_stack(vg, p, cfg.sparse_blocks)
    return collapse_to_bev(vg)
