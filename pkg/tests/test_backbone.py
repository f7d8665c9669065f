import numpy as np
import pytest

from li3detr.backbone import (
    BackboneConfig,
    ConfigError,
    GridConfig,
    VoxelGrid,
    collapse_to_bev,
    extract_bev,
    init_backbone,
    neighbor_index,
    pillar_feature_net,
    pillarize,
    pool_z,
    second_backbone_and_fpn,
    sparse_conv_stack,
    submanifold_conv3d,
    voxelize,
)
from li3detr.numcore import DimensionError, Tensor, grad_check
from li3detr.params import Params
from li3detr.scenegen import generate_scene

WIDE = (-51.2, -51.2, -5.0, 51.2, 51.2, 3.0)


def small_grid(rng, m=5, dims=(4, 4, 3), cin=2):
    lin = np.sort(rng.choice(int(np.prod(dims)), size=m, replace=False))
    X, Y, Z = dims
    keys = np.stack([lin // (Y * Z), (lin // Z) % Y, lin % Z], axis=1)
    feats = Tensor(rng.normal(size=(m, cin)))
    return VoxelGrid(keys, feats, np.ones(m, dtype=np.int64), dims, (1.0, 1.0, 1.0), (0.0, 0.0, 0.0))


def dense_conv3d(vg, w, b):
    """Zero-padded dense 3x3x3 convolution read out at the occupied sites."""
    X, Y, Z = vg.dims
    cin = vg.features.shape[1]
    dense = np.zeros((X + 2, Y + 2, Z + 2, cin))
    for (x, y, z), f in zip(vg.keys, vg.features.data):
        dense[x + 1, y + 1, z + 1] = f
    out = []
    for x, y, z in vg.keys:
        acc = b.copy()
        k = 0
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    acc = acc + dense[x + 1 + dx, y + 1 + dy, z + 1 + dz] @ w[k]
                    k += 1
        out.append(acc)
    return np.array(out)


# ---------------------------------------------------------------- voxels


def test_voxel_index_floor_arithmetic():
    cfg = GridConfig(pc_range=WIDE, voxel_size=(0.1, 0.1, 0.2))
    vg = voxelize(np.array([[0.05, -51.15, -4.9, 0.5]]), cfg)
    assert vg.keys.tolist() == [[512, 0, 0]]


def test_point_at_range_max_dropped():
    cfg = GridConfig()
    vg = voxelize(np.array([[25.6, 0.0, 0.0, 1.0], [0.0, 0.0, 0.0, 1.0]]), cfg)
    assert len(vg.keys) == 1


def test_voxel_mean_feature():
    vg = voxelize(np.array([[1.0, 0.1, 0.1, 0.0], [1.2, 0.2, 0.1, 0.0]]) + [0, 0, 0, 0], GridConfig())
    assert len(vg.keys) == 1
    assert vg.features.data[0, 0] == pytest.approx(1.1)
    vg = voxelize(np.array([[0.1, 0.1, 0.1, 1.0], [0.2, 0.2, 0.2, 3.0]]), GridConfig())
    assert vg.features.data[0, 3] == pytest.approx(2.0)


def test_nonpositive_voxel_size_is_config_error():
    with pytest.raises(ConfigError):
        voxelize(np.zeros((1, 4)), GridConfig(voxel_size=(0.0, 0.8, 1.0)))


def test_voxelize_and_pillarize_permutation_invariant():
    pts = generate_scene(3).cloud.points
    perm = np.random.default_rng(0).permutation(len(pts))
    cfg = GridConfig(max_points_per_pillar=4)
    a, b = voxelize(pts, cfg), voxelize(pts[perm], cfg)
    np.testing.assert_array_equal(a.keys, b.keys)
    np.testing.assert_array_equal(a.features.data, b.features.data)
    pa, pb = pillarize(pts, cfg), pillarize(pts[perm], cfg)
    np.testing.assert_array_equal(pa.keys, pb.keys)
    np.testing.assert_array_equal(pa.decorated.data, pb.decorated.data)


# ---------------------------------------------------------------- sparse conv


def test_identity_kernel():
    vg = small_grid(np.random.default_rng(1))
    w = np.zeros((27, 2, 2))
    w[13] = np.eye(2)
    out = submanifold_conv3d(vg, Tensor(w))
    np.testing.assert_array_equal(out.features.data, vg.features.data)
    np.testing.assert_array_equal(out.keys, vg.keys)


def test_isolated_voxel_sees_only_centre():
    vg = VoxelGrid(np.array([[1, 1, 1]]), Tensor([[2.0, -1.0]]), np.ones(1), (3, 3, 3),
                   (1.0, 1.0, 1.0), (0.0, 0.0, 0.0))
    out = submanifold_conv3d(vg, Tensor(np.ones((27, 2, 3))))
    np.testing.assert_allclose(out.features.data, [[1.0, 1.0, 1.0]])


def test_sparse_conv_equals_dense_oracle():
    rng = np.random.default_rng(2)
    for trial in range(20):
        vg = small_grid(rng, m=5 if trial < 10 else 12)
        w = rng.normal(size=(27, 2, 3))
        b = rng.normal(size=3)
        out = submanifold_conv3d(vg, Tensor(w), Tensor(b))
        np.testing.assert_allclose(out.features.data, dense_conv3d(vg, w, b), rtol=0, atol=1e-10)


def test_sparse_conv_weight_mismatch():
    vg = small_grid(np.random.default_rng(3))
    with pytest.raises(DimensionError):
        submanifold_conv3d(vg, Tensor(np.zeros((27, 3, 2))))
    with pytest.raises(DimensionError):
        submanifold_conv3d(vg, Tensor(np.zeros((9, 2, 2))))


def test_neighbor_index_marks_absent_sites():
    vg = VoxelGrid(np.array([[0, 0, 0], [0, 0, 1]]), Tensor(np.ones((2, 1))), np.ones(2), (2, 2, 2),
                   (1.0,) * 3, (0.0,) * 3)
    nbr = neighbor_index(vg)
    assert nbr[0, 13] == 0 and nbr[0, 14] == 1 and nbr[1, 12] == 0
    assert np.sum(nbr < 2) == 4


def test_sparse_conv_gradients():
    rng = np.random.default_rng(4)
    vg = small_grid(rng, m=6)
    w = rng.normal(size=(27, 2, 2)) * 0.3

    def via_w(x):
        return (submanifold_conv3d(vg, x).features ** 2).sum()

    def via_f(x):
        g = VoxelGrid(vg.keys, x, vg.counts, vg.dims, vg.voxel_size, vg.range_min)
        return (submanifold_conv3d(g, Tensor(w)).features ** 2).sum()

    assert grad_check(via_w, w) <= 1e-4
    assert grad_check(via_f, vg.features.data) <= 1e-4


def test_pool_z_and_collapse():
    vg = VoxelGrid(np.array([[0, 0, 0], [0, 0, 1], [1, 1, 2]]), Tensor([[1.0], [3.0], [5.0]]),
                   np.ones(3), (2, 2, 3), (1.0,) * 3, (0.0,) * 3)
    pooled = pool_z(vg)
    assert pooled.dims == (2, 2, 2)
    np.testing.assert_allclose(pooled.features.data[:, 0], [2.0, 2.5])
    bev = collapse_to_bev(vg)
    assert bev.shape == (2, 2, 3)
    assert bev.data[0, 0].tolist() == [1.0, 3.0, 0.0]
    assert bev.data[1, 1].tolist() == [0.0, 0.0, 5.0]
    assert bev.data.sum() == pytest.approx(vg.features.data.sum())


def test_collapse_empty_grid_is_zero():
    vg = voxelize(np.zeros((0, 4)), GridConfig())
    bev = collapse_to_bev(vg)
    assert bev.shape == (64, 64, 8 * 4) and not bev.data.any()


def test_voxel_backbone_end_to_end_shape():
    grid = GridConfig()
    cfg = BackboneConfig(kind="voxel")
    p = Params(np.random.default_rng(0))
    init_backbone(p, cfg, grid)
    vg = sparse_conv_stack(voxelize(generate_scene(1).cloud, grid), p, cfg.sparse_blocks)
    assert vg.features.shape[1] == 32
    bev = extract_bev(generate_scene(1).cloud, p, cfg, grid)
    assert bev.shape == (64, 64, 2 * 32)


# ---------------------------------------------------------------- pillars


def test_single_point_at_pillar_centre():
    cfg = GridConfig()
    pg = pillarize(np.array([[0.4, 0.4, 0.5, 0.7]]), cfg)
    d = pg.decorated.data[0]
    np.testing.assert_allclose(d[4:9], 0.0, atol=1e-12)
    assert d[3] == 0.7


def test_duplicate_points_pool_to_point_feature():
    cfg = GridConfig()
    p = Params(np.random.default_rng(0))
    init_backbone(p, BackboneConfig(), cfg)
    one = pillar_feature_net(pillarize(np.array([[3.1, -2.2, 0.4, 0.5]]), cfg), p)
    two = pillar_feature_net(pillarize(np.array([[3.1, -2.2, 0.4, 0.5]] * 2), cfg), p)
    np.testing.assert_allclose(one.data, two.data, rtol=0, atol=1e-12)


def test_pillar_cap_is_seeded_and_applied():
    pts = np.tile([[1.0, 1.0, 0.0, 0.1]], (50, 1))
    pts[:, 2] = np.linspace(-1, 1, 50)
    cfg = GridConfig(max_points_per_pillar=8)
    a = pillarize(pts, cfg)
    assert len(a.point_pillar) == 8
    np.testing.assert_array_equal(a.decorated.data, pillarize(pts[::-1], cfg).decorated.data)


def test_pillar_net_gradients():
    rng = np.random.default_rng(5)
    cfg = GridConfig()
    p = Params(rng)
    init_backbone(p, BackboneConfig(), cfg)
    pts = np.concatenate([rng.uniform(-3, 3, (30, 3)), rng.uniform(0, 1, (30, 1))], axis=1)
    pg = pillarize(pts, cfg)

    def f(x):
        return (pillar_feature_net(pg, {"pfn.w": x, "pfn.b": p["pfn.b"]}) ** 2).sum()

    assert grad_check(f, p["pfn.w"].data) <= 1e-4


# ---------------------------------------------------------------- 2D backbone + FPN


def _bb(seed=0, cin=32):
    grid = GridConfig()
    cfg = BackboneConfig()
    p = Params(np.random.default_rng(seed))
    init_backbone(p, cfg, grid)
    return p, cfg


def test_pyramid_shapes_and_zero_input():
    p, cfg = _bb()
    out = second_backbone_and_fpn(Tensor(np.random.default_rng(0).normal(size=(64, 64, 32))), p, cfg)
    assert [o.shape for o in out] == [(64, 64, 64), (32, 32, 64), (16, 16, 64), (8, 8, 64)]
    out = second_backbone_and_fpn(Tensor(np.zeros((64, 64, 32))), p, cfg)
    assert all(not o.data.any() for o in out)  # biases start at zero
    for H, W in [(8, 8), (16, 24), (40, 32)]:
        out = second_backbone_and_fpn(Tensor(np.zeros((H, W, 32))), p, cfg)
        assert [o.shape[:2] for o in out] == [(H >> j, W >> j) for j in range(4)]


def test_pyramid_size_must_divide_by_eight():
    p, cfg = _bb()
    with pytest.raises(ConfigError):
        second_backbone_and_fpn(Tensor(np.zeros((12, 16, 32))), p, cfg)


def test_pyramid_gradient_through_all_levels():
    rng = np.random.default_rng(6)
    grid = GridConfig()
    cfg = BackboneConfig(pfn_channels=2, channels=(2, 3, 3, 3), fpn_channels=2)
    p = Params(rng)
    init_backbone(p, cfg, grid)
    probes = [rng.normal(size=(16 >> j, 16 >> j, 2)) for j in range(4)]

    def f(x):
        out = second_backbone_and_fpn(x, p, cfg)
        return sum(((o * pr).sum() for o, pr in zip(out[1:], probes[1:])), (out[0] * probes[0]).sum())

    assert grad_check(f, rng.normal(size=(16, 16, 2)), indices=list(range(0, 512, 7))) <= 1e-4
