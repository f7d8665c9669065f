import math

import numpy as np
import pytest

from li3detr.boxes import Box3D
from li3detr.evalkit import rotated_bev_iou
from li3detr.scenegen import (
    FormatError,
    LabelParseError,
    PointCloud,
    SceneConfig,
    generate_dataset,
    generate_scene,
    read_cloud,
    read_labels,
    read_manifest,
    write_cloud,
    write_labels,
)

NAMES = SceneConfig().class_names


def test_empty_scene_is_clutter_only():
    s = generate_scene(0, SceneConfig(num_objects=(0, 0)))
    assert s.boxes == [] and len(s.cloud) > 0


def test_generation_is_deterministic():
    a, b = generate_scene(42), generate_scene(42)
    assert a.cloud.points.tobytes() == b.cloud.points.tobytes()
    assert a.boxes == b.boxes
    assert generate_scene(43).cloud.points.tobytes() != a.cloud.points.tobytes()


def test_objects_do_not_overlap_and_stay_in_range():
    cfg = SceneConfig(num_objects=(3, 5))
    for seed in range(15):
        s = generate_scene(seed, cfg)
        for i, a in enumerate(s.boxes):
            for b in s.boxes[i + 1:]:
                assert rotated_bev_iou(a, b) == 0.0
        lo, hi = np.array(cfg.pc_range[:3]), np.array(cfg.pc_range[3:])
        xyz = s.cloud.points[:, :3]
        assert np.all((xyz >= lo) & (xyz < hi))
        assert 3 <= len(s.boxes) <= 5


def test_cloud_roundtrip(tmp_path):
    write_cloud(tmp_path / "e.bin", np.zeros((0, 4)))
    assert (tmp_path / "e.bin").stat().st_size == 0
    assert len(read_cloud(tmp_path / "e.bin")) == 0
    write_cloud(tmp_path / "one.bin", np.array([[1.0, 2.0, 3.0, 0.5]]))
    assert (tmp_path / "one.bin").stat().st_size == 16
    np.testing.assert_array_equal(read_cloud(tmp_path / "one.bin").points, [[1.0, 2.0, 3.0, 0.5]])
    pts = np.random.default_rng(0).normal(0, 20, size=(100_000, 4))
    write_cloud(tmp_path / "big.bin", pts)
    back = read_cloud(tmp_path / "big.bin").points
    assert np.max(np.abs(back - pts) / np.maximum(np.abs(pts), 1e-30)) <= 2.0 ** -24


def test_cloud_format_errors(tmp_path):
    (tmp_path / "bad.bin").write_bytes(b"\0" * 15)
    with pytest.raises(FormatError):
        read_cloud(tmp_path / "bad.bin")
    np.array([np.nan, 0, 0, 0], dtype="<f4").tofile(tmp_path / "nan.bin")
    with pytest.raises(FormatError):
        read_cloud(tmp_path / "nan.bin")
    with pytest.raises(ValueError):
        PointCloud(np.zeros((3, 3)))


def test_label_roundtrip(tmp_path):
    write_labels(tmp_path / "e.txt", [], NAMES)
    assert (tmp_path / "e.txt").read_text().count("\n") == 1
    assert read_labels(tmp_path / "e.txt", NAMES) == []
    b = Box3D((1.5, -2.25, 0.5), (4.0, 1.8, 1.5), 0.75, (0.5, -1.0), 2)
    write_labels(tmp_path / "one.txt", [b], NAMES)
    (r,) = read_labels(tmp_path / "one.txt", NAMES)
    assert r.center == b.center and r.size == b.size and r.yaw == b.yaw
    assert r.velocity == b.velocity and r.class_id == 2


def test_label_yaw_wraps(tmp_path):
    (tmp_path / "w.txt").write_text("# class cx cy cz l w h yaw vx vy\ncar 0 0 0 1 1 1 3.2 0 0\n")
    (r,) = read_labels(tmp_path / "w.txt", NAMES)
    assert r.yaw == pytest.approx(3.2 - 2 * math.pi, abs=1e-12)


@pytest.mark.parametrize("text,where", [
    ("car 0 0 0 1 1 1 0 0 0\n", ":1:"),
    ("# class cx cy cz l w h yaw vx\ncar 0 0 0 1 1 1 0 0\n", ":1:"),
    ("# class cx cy cz l w h yaw vx vy\ncar 0 0 0 1 1 1 0 0\n", ":2:"),
    ("# class cx cy cz l w h yaw vx vy\ncar 0 0 0 1 1 1 0 0 0\nbus 0 0 0 1 1 1 0 0 0\n", ":3:"),
    ("# class cx cy cz l w h yaw vx vy\ncar 0 0 zero 1 1 1 0 0 0\n", ":2:"),
])
def test_label_parse_errors_name_the_line(tmp_path, text, where):
    (tmp_path / "bad.txt").write_text(text)
    with pytest.raises(LabelParseError, match=where):
        read_labels(tmp_path / "bad.txt", NAMES)


def test_dataset_on_disk_matches_memory(tmp_path):
    cfg = SceneConfig()
    generate_dataset(tmp_path, {"train": 3, "val": 2}, cfg, seed=5)
    m = read_manifest(tmp_path, "train")
    scenes = m.load()
    assert len(scenes) == 3 and m.class_names == NAMES
    again = tmp_path / "again"
    generate_dataset(again, {"train": 3, "val": 2}, cfg, seed=5)
    for (c1, l1), (c2, l2) in zip(m.paths(), read_manifest(again, "train").paths()):
        assert c1.read_bytes() == c2.read_bytes() and l1.read_bytes() == l2.read_bytes()
    with pytest.raises(FileExistsError):
        generate_dataset(tmp_path, {"train": 1}, cfg, seed=5)
    generate_dataset(tmp_path, {"train": 1}, cfg, seed=5, force=True)
    assert len(read_manifest(tmp_path, "train").items) == 1


def test_manifest_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_manifest(tmp_path, "train")
    generate_dataset(tmp_path, {"train": 1}, SceneConfig(), seed=0)
    with pytest.raises(KeyError):
        read_manifest(tmp_path, "test")
    next((tmp_path / "train" / "clouds").iterdir()).unlink()
    with pytest.raises(FileNotFoundError):
        read_manifest(tmp_path, "train")


def test_zero_count_split(tmp_path):
    generate_dataset(tmp_path, {"train": 0}, SceneConfig(), seed=0)
    assert read_manifest(tmp_path, "train").load() == []
