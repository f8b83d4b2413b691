import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from das3d.assign import LevelConfig, build_targets
from das3d.camgeom import CameraIntrinsics, CameraPose3D, Pose3D, back_project
from das3d.decode import (Detection, PredictionMaps, decode_maps, extract_positives, match_poses,
                          mpjpe, pck, pose_nms, reconstruct)
from das3d.harness.scenes import SyntheticSceneConfig, gen_dataset

INTR = CameraIntrinsics(320.0, 160.0, 160.0)


def _det(cam_joints, score, pixel_index=0):
    cam = CameraPose3D(np.asarray(cam_joints, float), 0)
    from das3d.camgeom import project
    return Detection(Pose3D(project(cam.joints, INTR), 0), cam, score, 0, (0, pixel_index),
                     pixel_index)


def _person(shift=(0.0, 0.0, 0.0), K=15):
    base = np.zeros((K, 3))
    base[:, 0] = np.linspace(-200, 200, K)
    base[:, 1] = np.linspace(-700, 800, K)
    base[0] = 0.0
    return base + np.array([0.0, 0.0, 4000.0]) + np.asarray(shift)


# -- extraction --------------------------------------------------------------------

def test_extract_positives_cases():
    zero = np.zeros((3, 3, 1))
    assert extract_positives(zero, zero) == []
    conf = zero.copy()
    conf[1, 2] = 0.9
    ctr = np.full_like(zero, 0.5)
    assert extract_positives(conf, ctr) == [((1, 2), pytest.approx(0.45))]
    conf[0, 0] = 0.05
    assert [p for p, _ in extract_positives(conf, ctr, 0.05)] == [(1, 2)]


# -- reconstruction ------------------------------------------------------------------

def test_zero_offsets_joints_at_center():
    root = np.zeros((2, 2, 3))
    root[1, 0] = (0.25, -0.5, 3000.0 / INTR.f)
    joints = np.zeros((2, 2, 9))
    det = reconstruct([((1, 0), 1.0)], root, joints, 8, INTR)[0]
    np.testing.assert_allclose(det.pose.joints, [[2.0, 4.0, 3000.0]] * 3, atol=1e-12)


def test_stride_equivariance():
    root = np.zeros((4, 4, 3))
    root[2, 1] = (0.5, 0.25, 10.0)
    joints = np.zeros((4, 4, 6))
    joints[2, 1] = (1.0, -2.0, 50.0, 0.5, 0.5, -30.0)
    a = reconstruct([((2, 1), 1.0)], root, joints, 8, INTR)[0]
    # doubling the stride with halved map coordinates: same image pose;
    # center at image (12, 18) is stride-16 cell (1, 0) plus (0.75, 0.125)
    root2 = np.zeros((4, 4, 3))
    root2[1, 0] = (0.75, 0.125, 10.0)
    joints2 = np.zeros((4, 4, 6))
    joints2[1, 0] = (0.5, -1.0, 50.0, 0.25, 0.25, -30.0)
    b = reconstruct([((1, 0), 1.0)], root2, joints2, 16, INTR)[0]
    np.testing.assert_allclose(a.pose.joints, b.pose.joints, atol=1e-12)


def test_non_positive_depth_dropped():
    root = np.zeros((1, 1, 3))
    root[0, 0, 2] = 1000.0 / INTR.f
    joints = np.zeros((1, 1, 6))
    joints[0, 0, 5] = -2000.0
    stats = {}
    assert reconstruct([((0, 0), 1.0)], root, joints, 8, INTR, stats=stats) == []
    assert stats["dropped"] == 1


def test_roundtrip_known_scene():
    scenes = gen_dataset(SyntheticSceneConfig(), 5, 11)
    for scene in scenes:
        tm = build_targets(scene.persons, scene.intr, LevelConfig(), scene.image_size)
        dets = decode_maps(PredictionMaps.from_targets(tm), scene.intr, 0.05, 150.0)
        assert len(dets) == len(scene.persons)
        m = match_poses([d.camera_pose for d in dets], scene.camera_persons)
        assert len(m.pairs) == len(scene.persons)
        for i, j in m.pairs:
            assert np.abs(dets[i].pose.joints - scene.persons[j].joints).max() < 1e-6
            assert mpjpe(dets[i].camera_pose, scene.camera_persons[j], False) < 1e-6


def test_refine_hook_replaces_offsets():
    scene = gen_dataset(SyntheticSceneConfig(persons_max=1), 1, 2)[0]
    tm = build_targets(scene.persons, scene.intr, LevelConfig(), scene.image_size)
    maps = PredictionMaps.from_targets(tm)
    K = scene.K
    dets = decode_maps(maps, scene.intr, refine=lambda li, r, c: np.zeros((len(r), K, 3)))
    assert len(dets) == 1
    spread = dets[0].pose.joints - dets[0].pose.joints[0]
    np.testing.assert_allclose(spread, 0.0, atol=1e-9)


# -- NMS --------------------------------------------------------------------------

def test_nms_duplicate_keeps_best():
    a, b = _det(_person(), 0.9, 1), _det(_person(), 0.8, 2)
    assert pose_nms([b, a]) == [a]


def test_nms_far_apart_kept():
    a, b = _det(_person(), 0.9), _det(_person((10_000, 0, 0)), 0.8, 1)
    assert pose_nms([a, b]) == [a, b]


def test_nms_chain():
    a = _det(_person(), 0.9, 0)
    b = _det(_person((100, 0, 0)), 0.8, 1)
    c = _det(_person((200, 0, 0)), 0.7, 2)
    assert pose_nms([c, b, a], 150.0) == [a, c]


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_nms_order_independent(seed):
    rng = np.random.default_rng(seed)
    dets = [_det(_person(rng.uniform(-300, 300, 3)), float(s), i)
            for i, s in enumerate(rng.permutation(np.linspace(0.1, 0.9, 6)))]
    ref = pose_nms(dets)
    for perm in itertools.islice(itertools.permutations(dets), 12):
        assert pose_nms(list(perm)) == ref


# -- metrics ---------------------------------------------------------------------

def test_mpjpe_cases():
    g = _person()
    assert mpjpe(g, g) == 0.0
    assert mpjpe(g + [40.0, -10.0, 300.0], g, True) == pytest.approx(0.0, abs=1e-12)
    p = g.copy()
    p[3, 0] += 15.0
    assert mpjpe(p, g, False) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        mpjpe(g[:5], g)


@settings(max_examples=30, deadline=None)
@given(st.tuples(st.floats(-1e4, 1e4), st.floats(-1e4, 1e4), st.floats(-1e4, 1e4)))
def test_mpjpe_root_aligned_translation_invariant(t):
    rng = np.random.default_rng(0)
    g = _person()
    p = g + rng.normal(0, 20, g.shape)
    assert mpjpe(p + np.asarray(t), g) == pytest.approx(mpjpe(p, g), abs=1e-6)


def test_pck_cases():
    g = [CameraPose3D(_person(), 0)]
    assert pck(g, g, "rel") == 100.0
    assert pck(g, g, "abs") == 100.0
    shifted = [CameraPose3D(_person((200.0, 0, 0)), 0)]
    assert pck(shifted, g, "rel", 150.0) == 100.0
    assert pck(shifted, g, "abs", 150.0) == 0.0
    assert pck([], g, "rel") == 0.0
    with pytest.raises(ValueError):
        pck(g, g, "both")


def test_pck_unmatched_gt_counts_incorrect():
    gts = [CameraPose3D(_person(), 0), CameraPose3D(_person((3000, 0, 0)), 0)]
    assert pck([gts[0]], gts, "abs") == 50.0


def test_match_cases():
    g = [_person()]
    assert match_poses([_person((10, 0, 0))], g).pairs == [(0, 0)]
    m = match_poses([_person((300, 0, 0)), _person((20, 0, 0))], g)
    assert m.pairs == [(1, 0)] and m.unmatched_preds == [0] and m.unmatched_gts == []
    m = match_poses([_person()], [])
    assert m.pairs == [] and m.unmatched_preds == [0]
    m = match_poses([_person((600, 0, 0))], g)
    assert m.pairs == [] and m.unmatched_gts == [0]


def test_detection_json_fields():
    d = _det(_person(), 0.5).to_dict()
    assert set(d) == {"score", "level", "pixel", "joints_image", "joints_camera"}
    np.testing.assert_allclose(back_project(np.array(d["joints_image"]), INTR),
                               d["joints_camera"], atol=1e-9)
