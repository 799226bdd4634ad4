import numpy as np
import pytest

from mvconsist.corresploss import sobel_edge_map
from mvconsist.geometry import CameraIntrinsics
from mvconsist.scenegen import (
    DatasetParseError,
    Primitive,
    SceneError,
    SceneSpec,
    Texture,
    TrajectorySpec,
    decode_sample,
    encode_sample,
    gt_correspondences,
    random_sample,
    read_dataset,
    render,
    write_dataset,
)

INTR = CameraIntrinsics.from_fov(32, 32, 60)


def plane_scene(period=0.4):
    return SceneSpec((Primitive("plane", (0.0, 0.0, 4.0), (20.0, 20.0), Texture("checker", period=period), axis=2),))


def test_static_camera_identical_frames():
    traj = TrajectorySpec("dolly", 2, 0.0, (0.0, 0.0, 0.0), (0.0, 0.0, 4.0))
    vid = render(plane_scene(), traj, INTR)
    np.testing.assert_array_equal(vid.frames[0], vid.frames[1])
    np.testing.assert_array_equal(vid.pointmaps[0].coords, vid.pointmaps[1].coords)
    assert np.median(vid.depth(0)[vid.pointmaps[0].valid]) == pytest.approx(1.0)


def test_orbit_sphere_silhouette_constant():
    scene = SceneSpec((Primitive("sphere", (0.0, 0.0, 4.0), (1.0,), Texture("gradient")),))
    traj = TrajectorySpec("orbit", 6, 1.5, (0.0, 0.0, 0.0), (0.0, 0.0, 4.0))
    vid = render(scene, traj, INTR)
    area = np.array([pm.valid.sum() for pm in vid.pointmaps])
    assert area.min() > 0
    assert (area.max() - area.min()) / area.mean() < 0.05


def test_render_deterministic():
    a = random_sample(11, size=32, n_frames=3)
    b = random_sample(11, size=32, n_frames=3)
    assert encode_sample(a) == encode_sample(b)


def test_camera_inside_primitive_rejected():
    scene = SceneSpec((Primitive("sphere", (0.0, 0.0, 0.0), (1.0,)),))
    with pytest.raises(SceneError):
        render(scene, TrajectorySpec("dolly", 2, 0.1, (0.0, 0.0, 0.0), (0.0, 0.0, 4.0)), INTR)


def test_validity_mask_matches_hits():
    scene = SceneSpec((Primitive("sphere", (0.0, 0.0, 4.0), (0.8,)),), background=(0.0, 0.0, 0.0))
    vid = render(scene, TrajectorySpec("dolly", 2, 0.0, (0.0, 0.0, 0.0), (0.0, 0.0, 4.0)), INTR)
    lit = vid.frames[0].sum(-1) > 0
    np.testing.assert_array_equal(lit, vid.pointmaps[0].valid)


def test_checker_has_sobel_edges():
    vid = render(plane_scene(0.4), TrajectorySpec("dolly", 2, 0.0, (0.0, 0.0, 0.0), (0.0, 0.0, 4.0)), INTR)
    assert sobel_edge_map(vid.frames[0]).max() > 0.5


def test_gt_correspondences_identity(sample):
    px = np.argwhere(sample.pointmaps[0].valid)[:, ::-1]
    c = gt_correspondences(sample, 0, 0, px)
    assert c[:, 2].all()
    np.testing.assert_allclose(c[:, :2], px, atol=1e-4)


def test_gt_correspondences_truck_disparity():
    traj = TrajectorySpec("truck", 2, 0.3, (0.0, 0.0, 0.0), (0.0, 0.0, 4.0))
    vid = render(plane_scene(), traj, INTR)
    v, u = np.mgrid[0:32, 0:32]
    px = np.column_stack([u.ravel(), v.ravel()])
    c = gt_correspondences(vid, 0, 1, px)
    ok = c[:, 2] > 0
    baseline = np.linalg.norm(vid.cameras[1][0].center - vid.cameras[0][0].center)
    assert ok.mean() > 0.5
    np.testing.assert_allclose(c[ok, 0] - px[ok, 0], -INTR.fx * baseline / 1.0, atol=1e-4)
    np.testing.assert_allclose(c[ok, 1], px[ok, 1], atol=1e-4)


def test_gt_correspondences_occlusion():
    # a small sphere in front of a wall; wall pixels behind the sphere from frame 1 are occluded
    wall = Primitive("plane", (0.0, 0.0, 4.0), (20.0, 20.0), Texture("checker"), axis=2)
    ball = Primitive("sphere", (0.0, 0.0, 2.5), (0.4,), Texture("gradient"))
    traj = TrajectorySpec("truck", 2, 0.6, (0.0, 0.0, 0.0), (0.0, 0.0, 4.0))
    vid = render(SceneSpec((wall, ball)), traj, INTR)
    depth0 = vid.depth(0)
    v, u = np.mgrid[0:32, 0:32]
    px = np.column_stack([u.ravel(), v.ravel()])
    c = gt_correspondences(vid, 0, 1, px)
    wall_px = depth0.ravel() > 0.9  # wall ~1 after normalisation, ball ~0.6
    # some wall pixels must now be hidden by the ball
    tgt = np.rint(c[:, :2]).astype(int)
    inside = (tgt >= 0).all(1) & (tgt < 32).all(1)
    hidden = wall_px & inside & (vid.depth(1)[tgt[:, 1].clip(0, 31), tgt[:, 0].clip(0, 31)] < 0.8)
    assert hidden.sum() > 0
    assert not c[hidden, 2].any()


def test_round_trip_a_b_a(sample):
    px = np.argwhere(sample.pointmaps[0].valid)[:, ::-1].astype(float)
    ab = gt_correspondences(sample, 0, 2, px)
    ok = ab[:, 2] > 0
    ba = gt_correspondences(sample, 2, 0, ab[ok, :2])
    back = ba[:, 2] > 0
    assert back.sum() > 0
    assert np.abs(ba[back, :2] - px[ok][back]).max() <= 0.5


def test_dataset_round_trip(tmp_path):
    samples = [random_sample(s, size=16, n_frames=3) for s in range(3)]
    write_dataset(samples, tmp_path, seeds=[0, 1, 2])
    back = list(read_dataset(tmp_path))
    for a, b in zip(samples, back):
        np.testing.assert_array_equal(a.frames, b.frames)
        for pa, pb in zip(a.pointmaps, b.pointmaps):
            np.testing.assert_array_equal(pa.coords, pb.coords)
            np.testing.assert_array_equal(pa.valid, pb.valid)
        for (qa, ia), (qb, ib) in zip(a.cameras, b.cameras):
            np.testing.assert_array_equal(qa.as_array(), qb.as_array())
            assert ia == ib
        assert a.caption == b.caption


def test_truncated_record_raises(tmp_path):
    buf = encode_sample(random_sample(0, size=16, n_frames=2))
    with pytest.raises(DatasetParseError) as err:
        decode_sample(buf[: len(buf) // 2])
    assert err.value.offset >= 0
    corrupt = bytearray(buf)
    corrupt[100] ^= 0xFF
    with pytest.raises(DatasetParseError):
        decode_sample(bytes(corrupt))
    with pytest.raises(DatasetParseError):
        decode_sample(b"NOPE!" + buf[5:])


def test_reader_is_lazy(tmp_path):
    write_dataset((random_sample(s, size=8, n_frames=2) for s in range(100)), tmp_path)
    reader = read_dataset(tmp_path)
    assert len(reader) == 100 and reader.loaded == 0
    peak = 0
    for k, s in enumerate(reader):
        assert s.frames.shape == (2, 8, 8, 3)
        peak = max(peak, reader.loaded - k)
    assert reader.loaded == 100 and peak == 1
