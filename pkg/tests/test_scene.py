import json

import numpy as np
import pytest

from autoalign.errors import PlacementError, SceneParseError
from autoalign.geometry import Box3D, project_box3d, project_points
from autoalign.scene import (
    Dataset, SceneConfig, generate_dataset, generate_scene, load_scene, save_scene, scene_seed,
    tree_digest,
)


def _scene_bytes(scene, tmp_path, name):
    save_scene(scene, tmp_path / name)
    return {f: (tmp_path / name / f).read_bytes() for f in ("scene.json", "points.f32", "image.ppm")}


def test_empty_scene():
    cfg = SceneConfig(object_count=(0, 0), clutter_count=(0, 0))
    s = generate_scene(5, cfg)
    assert s.gt_boxes3d == [] and s.gt_boxes2d == []
    assert np.all(s.labels == -1) and len(s.points) == cfg.ground_points


def test_same_seed_same_bytes(tmp_path):
    a = _scene_bytes(generate_scene(11), tmp_path, "a")
    b = _scene_bytes(generate_scene(11), tmp_path, "b")
    assert a == b
    assert _scene_bytes(generate_scene(12), tmp_path, "c") != a


@pytest.mark.parametrize("seed", range(40))
def test_projection_consistency(seed):
    s = generate_scene(seed)
    for i, (b3, b2) in enumerate(zip(s.gt_boxes3d, s.gt_boxes2d)):
        assert b2 == project_box3d(s.projection, b3, s.config.image_size)
        pts = s.points[s.labels == i, :3].astype(np.float64)
        assert len(pts) >= s.config.min_points
        u, v, _ = project_points(s.projection, pts)
        inside = b2.dilate(2.0).contains(u, v)
        assert inside.mean() >= 0.9


def test_class_balance():
    counts = np.zeros(2)
    for seed in range(1000):
        for b in generate_scene(seed).gt_boxes3d:
            counts[b.class_id] += 1
    freq = counts / counts.sum()
    np.testing.assert_allclose(freq, [0.5, 0.5], atol=0.03)


def test_pedestrians_are_sparser():
    per_class = {0: [], 1: []}
    for seed in range(60):
        s = generate_scene(seed)
        for i, b in enumerate(s.gt_boxes3d):
            per_class[b.class_id].append((s.labels == i).sum())
    assert np.median(per_class[1]) < np.median(per_class[0]) / 3


def test_round_trip_idempotent(tmp_path):
    s = generate_scene(21)
    first = _scene_bytes(s, tmp_path, "one")
    loaded = load_scene(tmp_path / "one")
    assert loaded.equals(s)
    assert _scene_bytes(loaded, tmp_path, "two") == first


def test_truncated_points(tmp_path):
    save_scene(generate_scene(3), tmp_path / "s")
    p = tmp_path / "s" / "points.f32"
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(SceneParseError, match="points.f32"):
        load_scene(tmp_path / "s")


def test_malformed_box_field(tmp_path):
    save_scene(generate_scene(3), tmp_path / "s")
    meta = json.loads((tmp_path / "s" / "scene.json").read_text())
    meta["boxes3d"] = [{"center": [1, 2]}]
    (tmp_path / "s" / "scene.json").write_text(json.dumps(meta))
    with pytest.raises(SceneParseError) as err:
        load_scene(tmp_path / "s")
    assert err.value.field == "boxes3d"


def test_hand_written_fixture(tmp_path):
    d = tmp_path / "mini"
    d.mkdir()
    cfg = SceneConfig(image_size=(2, 3))
    meta = {
        "seed": 42, "prng": "handmade", "config": cfg.to_dict(), "config_hash": "x",
        "image_size": [2, 3],
        "projection": [1, 0, 1.5, 0, 0, 1, 1, 0, 0, 0, 1, 0],
        "boxes3d": [{"center": [0, 0, 5], "size": [1, 1, 1], "yaw": 0.0, "class_id": 1}],
        "boxes2d": [{"box": [1.0, 0.5, 2.0, 1.5], "class_id": 1}],
        "num_points": 2,
    }
    (d / "scene.json").write_text(json.dumps(meta))
    (d / "points.f32").write_bytes(np.array([[1, 2, 3, 0.5], [4, 5, 6, 0.25]], dtype="<f4").tobytes())
    (d / "image.ppm").write_bytes(b"P6\n3 2\n255\n" + bytes(range(0, 18 * 10, 10)))
    s = load_scene(d)
    assert s.seed == 42 and s.prng == "handmade"
    assert s.gt_boxes3d == [Box3D((0, 0, 5), (1, 1, 1), 0.0, 1)]
    assert s.gt_boxes2d[0].as_array().tolist() == [1.0, 0.5, 2.0, 1.5]
    assert s.points.tolist() == [[1, 2, 3, 0.5], [4, 5, 6, 0.25]]
    assert s.image.shape == (3, 2, 3)
    assert s.image[0, 0, 0] == 0.0 and s.image[1, 0, 0] == 10 / 255 and s.image[0, 0, 1] == 30 / 255
    assert s.projection.m[0, 2] == 1.5


def test_placement_error():
    cfg = SceneConfig(object_count=(40, 40), max_retries=5)
    with pytest.raises(PlacementError):
        generate_scene(0, cfg)


def test_dataset_determinism(tmp_path):
    m = generate_dataset(tmp_path / "a", 6, seed=7)
    generate_dataset(tmp_path / "b", 6, seed=7)
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    assert len(m["splits"]["train"]) == 4 and len(m["splits"]["eval"]) == 2
    ds = Dataset(tmp_path / "a")
    assert ds.scene("scene_00001").seed == scene_seed(7, 1)


def test_scene_metadata_records_prng(tmp_path):
    save_scene(generate_scene(1), tmp_path / "s")
    meta = json.loads((tmp_path / "s" / "scene.json").read_text())
    assert meta["seed"] == 1 and "PCG64" in meta["prng"]
    assert meta["config_hash"] == SceneConfig().config_hash()


def test_background_varies_across_columns():
    # an empty scene shows only background; every column must get its own colour
    cfg = SceneConfig(object_count=(0, 0), clutter_count=(0, 0))
    img = generate_scene(3, cfg).image
    col = img.mean(axis=1)  # (3, W), averages out pixel noise
    W = col.shape[1]
    left, right = col[:, : W // 8].mean(1), col[:, W // 2 : W // 2 + W // 8].mean(1)
    assert np.abs(left - right).max() > 0.1
    flat = generate_scene(3, SceneConfig(object_count=(0, 0), clutter_count=(0, 0),
                                         texture_amplitude=0.0)).image.mean(axis=1)
    assert np.abs(flat[:, : W // 8].mean(1) - flat[:, W // 2 : W // 2 + W // 8].mean(1)).max() < 0.02
