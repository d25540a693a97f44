import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from toc3d.scene import (
    SCENE_MAGIC,
    CameraRig,
    Frame,
    HeatmapTarget,
    HistoryQuerySet,
    Projection,
    SceneObject,
    build_dataset,
    dump_dataset,
    gaussian_radius,
    generate_sequence,
    invert_rigid,
    is_rigid,
    lattice_provenance,
    load_dataset,
    load_record,
    make_pose,
    project_boxes,
    render_gaussian_targets,
    save_record,
    simulate_history_queries,
    yaw_rotation,
)


def pinhole_rig(f=500.0, size=(480, 800)):
    k = np.array([[f, 0, size[1] / 2], [0, f, size[0] / 2], [0, 0, 1.0]])
    return CameraRig(k[None], np.eye(4)[None], size)


def test_empty_scene_has_no_objects():
    seq = generate_sequence(0, 0, 3)
    assert all(f.world_objects == [] for f in seq.frames)


def test_generation_is_deterministic():
    a, b = generate_sequence(4, 5, 4), generate_sequence(4, 5, 4)
    for fa, fb in zip(a.frames, b.frames):
        np.testing.assert_array_equal(fa.ego_pose, fb.ego_pose)
        for oa, ob in zip(fa.world_objects, fb.world_objects):
            np.testing.assert_array_equal(oa.center, ob.center)


def test_constant_velocity_integration():
    seq = generate_sequence(1, 20, 3, dt=0.5)
    for o0, o1 in zip(seq.frames[0].world_objects, seq.frames[1].world_objects):
        np.testing.assert_allclose(o1.center - o0.center, 0.5 * o0.velocity, atol=1e-12)
    obj = SceneObject([0, 0, 0], [1, 1, 1], [1, 0, 0])
    assert obj.center[0] + obj.velocity[0] * 0.5 == 0.5


def test_velocity_cap_and_positive_sizes():
    seq = generate_sequence(2, 200, 2, v_max=4.0)
    for o in seq.frames[0].world_objects:
        assert np.linalg.norm(o.velocity) <= 4.0 + 1e-12
        assert np.all(o.size > 0)
    with pytest.raises(ValueError):
        SceneObject([0, 0, 0], [1, 0, 1], [0, 0, 0])
    with pytest.raises(ValueError):
        generate_sequence(0, 1, 1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_ego_transforms_are_rigid(seed):
    seq = generate_sequence(seed, 3, 5)
    for prev, cur in zip(seq.frames, seq.frames[1:]):
        e = invert_rigid(cur.ego_pose) @ prev.ego_pose
        r = e[:3, :3]
        assert np.abs(r.T @ r - np.eye(3)).max() <= 1e-10
        assert abs(np.linalg.det(r) - 1) <= 1e-10


def test_rig_invariants(rig):
    assert rig.n_views == 6 and rig.n_tokens(16) == 240 and rig.lattice_shape(16) == (4, 10)
    assert all(is_rigid(e) for e in rig.extrinsics)
    with pytest.raises(ValueError):
        CameraRig(np.zeros((1, 3, 3)), np.eye(4)[None], (4, 4))
    with pytest.raises(ValueError):
        rig.lattice_shape(7)


def test_projection_hand_cases():
    rig = pinhole_rig()
    (p,) = project_boxes([SceneObject([2, 0, 10], [1, 1, 1], [0, 0, 0])], 0, rig)
    assert p.center_px[0] == pytest.approx(400 + 500 * 2 / 10)
    assert p.center_px[1] == pytest.approx(240)
    (axis,) = project_boxes([SceneObject([0, 0, 5], [1, 1, 1], [0, 0, 0])], 0, rig)
    np.testing.assert_allclose(axis.center_px, [400, 240])
    assert project_boxes([SceneObject([0, 0, -5], [1, 1, 1], [0, 0, 0])], 0, rig) == []
    assert project_boxes([SceneObject([100, 0, 5], [1, 1, 1], [0, 0, 0])], 0, rig) == []
    with pytest.raises(IndexError):
        project_boxes([], 3, rig)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 5), st.floats(0, 159.99), st.floats(0, 63.99), st.floats(0.5, 80))
def test_backprojection_round_trip(view, u, v, depth):
    rig = CameraRig.surround()
    p = rig.pixel_to_ego(u, v, depth, view)
    cam = rig.to_camera(p[None], view)[0]
    uvw = rig.intrinsics[view] @ cam
    assert cam[2] == pytest.approx(depth, abs=1e-9)
    np.testing.assert_allclose(uvw[:2] / uvw[2], [u, v], atol=1e-9)
    np.testing.assert_allclose(rig.pixel_to_ego(*(uvw[:2] / uvw[2]), cam[2], view), p, atol=1e-9)


def _proj(u, v, w=40.0, h=30.0):
    return Projection(np.array([u, v]), np.array([w, h]), 10.0)


def test_empty_and_single_targets(rig):
    t = render_gaussian_targets([[] for _ in range(6)], rig, 16)
    assert t.grid.shape == (6, 4, 10) and not t.grid.any()
    projs = [[] for _ in range(6)]
    projs[2] = [_proj(3 * 16 + 8, 1 * 16 + 8)]
    t = render_gaussian_targets(projs, rig, 16)
    assert t.grid[2, 1, 3] == 1.0
    assert np.count_nonzero(t.grid == 1.0) == 1
    assert t.grid.max() <= 1 and t.grid.min() >= 0


def test_overlapping_targets_match_per_cell_oracle(rig):
    projs = [[] for _ in range(6)]
    a, b = _proj(40, 20, 60, 40), _proj(72, 30, 30, 50)
    projs[0] = [a, b]
    got = render_gaussian_targets(projs, rig, 16).grid[0]
    want = np.zeros((4, 10))
    for p in (a, b):
        r = gaussian_radius(p.extent_px[1] / 16, p.extent_px[0] / 16)
        sigma = (2 * r + 1) / 6
        cr, cc = int(p.center_px[1] // 16), int(p.center_px[0] // 16)
        for i in range(4):
            for j in range(10):
                val = 1.0 if (i, j) == (cr, cc) else math.exp(-((i - cr) ** 2 + (j - cc) ** 2) / (2 * sigma**2))
                want[i, j] = max(want[i, j], val)
    np.testing.assert_allclose(got, want, atol=1e-15)


def test_gaussian_radius_grows_with_box():
    assert gaussian_radius(2, 2) < gaussian_radius(4, 4) < gaussian_radius(8, 8)
    assert gaussian_radius(0, 0) == 0.0


def test_target_flattening_matches_lattice(rig, records):
    prov = lattice_provenance(6, 4, 10)
    rec = records[0]
    flat = rec.target.flat
    for i in range(0, 240, 17):
        v, r, c = prov[i]
        assert flat[i] == rec.target.grid[v, r, c]


def _two_frames(seed=3, n=10):
    seq = generate_sequence(seed, n, 2)
    return seq.frames[0], seq.frames[1]


def test_zero_noise_refpoints_hit_object_centers():
    prev, cur = _two_frames()
    q = simulate_history_queries(prev, cur, 64, 0.0, 1, query_dim=8)
    centers = np.stack([o.center for o in prev.objects])
    fg = q.refpoints[q.is_foreground, :3]
    assert len(fg) == len(centers)
    for c in centers:
        assert np.any(np.all(fg == c, axis=1))


def test_query_set_fields(records):
    q = records[0].queries
    assert len(q) == 256 and q.query_dim == 256
    np.testing.assert_allclose(np.linalg.norm(q.contents, axis=1), 1.0)
    assert np.all(q.refpoints[:, 3] == 1) and is_rigid(q.ego_transform)
    assert np.all(q.dt == 0.5)


def test_too_few_queries_rejected():
    prev, cur = _two_frames(n=10)
    with pytest.raises(ValueError):
        simulate_history_queries(prev, cur, 5, 0.1, 0)


def test_foreground_confidence_higher_over_many_seeds():
    prev, cur = _two_frames(n=6)
    fg, bg = [], []
    for seed in range(1000):
        q = simulate_history_queries(prev, cur, 20, 0.5, seed, query_dim=4)
        fg.append(q.confidences[q.is_foreground].mean())
        bg.append(q.confidences[~q.is_foreground].mean())
    assert np.mean(fg) > np.mean(bg)


def test_history_query_validation():
    ok = dict(contents=np.zeros((2, 3)), refpoints=np.ones((2, 4)), velocities=np.zeros((2, 3)),
              confidences=[0.5, 0.5], dt=0.5, ego_transform=np.eye(4))
    HistoryQuerySet(**ok)
    with pytest.raises(ValueError):
        HistoryQuerySet(**{**ok, "confidences": [0.5, 1.5]})
    with pytest.raises(ValueError):
        HistoryQuerySet(**{**ok, "ego_transform": np.diag([2.0, 1, 1, 1])})
    bad_ref = np.ones((2, 4))
    bad_ref[0, 3] = 2
    with pytest.raises(ValueError):
        HistoryQuerySet(**{**ok, "refpoints": bad_ref})


def test_record_round_trip(tmp_path, rig, records):
    rec = records[1]
    path = tmp_path / "one.toc3d"
    save_record(rec, path)
    assert path.read_bytes().startswith(SCENE_MAGIC)
    back = load_record(path, rig)
    np.testing.assert_array_equal(back.target.grid, rec.target.grid)
    np.testing.assert_array_equal(back.features, rec.features)
    np.testing.assert_array_equal(back.queries.contents, rec.queries.contents)
    np.testing.assert_array_equal(back.queries.ego_transform, rec.queries.ego_transform)
    np.testing.assert_array_equal(back.frame.ego_pose, rec.frame.ego_pose)
    assert len(back.frame.world_objects) == len(rec.frame.world_objects)


def test_bad_magic_rejected(tmp_path, rig):
    path = tmp_path / "bad.toc3d"
    path.write_bytes(b"NOT A SCENE\n")
    with pytest.raises(ValueError):
        load_record(path, rig)


def test_dataset_dump_load(tmp_path, rig, records):
    paths = dump_dataset(records, tmp_path / "d")
    assert [p.name for p in paths] == [f"frame_{i:05d}.toc3d" for i in range(len(records))]
    back = load_dataset(tmp_path / "d", rig)
    assert len(back) == len(records)


def test_build_dataset_deterministic(rig):
    a = build_dataset(9, 2, rig)
    b = build_dataset(9, 2, rig)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.tokens(32), y.tokens(32))
        np.testing.assert_array_equal(x.queries.refpoints, y.queries.refpoints)


def test_tokens_carry_foreground_signal(records):
    # foreground patches should be distinguishable from clutter in token space
    rec = records[0]
    tok = rec.tokens(64)
    fg = rec.target.flat >= 0.8
    bg = rec.target.flat == 0
    assert fg.any() and bg.any()
    centroid_gap = np.linalg.norm(tok[fg].mean(0) - tok[bg].mean(0))
    assert centroid_gap > tok[bg].std(0).mean()


def test_pose_helpers():
    p = make_pose(yaw_rotation(0.3), [1, 2, 3])
    np.testing.assert_allclose(invert_rigid(p) @ p, np.eye(4), atol=1e-15)
    assert is_rigid(p) and not is_rigid(np.diag([1, 1, -1, 1.0]))
    f = Frame(0, 0.0, p, [SceneObject([1, 2, 3], [1, 1, 1], [0, 0, 0])])
    np.testing.assert_allclose(f.objects[0].center, [0, 0, 0], atol=1e-12)
