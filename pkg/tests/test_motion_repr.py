import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pressure_motion.motion_repr import (
    DEFAULT_SKELETON, FEAT_DIM, FPS, KEY_JOINTS, N_JOINTS, PARENTS, SL_RIC, Skeleton, crop_pose,
    detect_foot_contacts, encode_motion, extract_trajectory_targets, foot_displacement, recover_global_joints,
    recover_root, rot_y_np, rotation_from_6d, rotation_to_6d,
)
from pressure_motion.synth import MotionRecipe, synthesize

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def _hand_gram_schmidt(d6):
    a1, a2 = d6[:3], d6[3:]
    n1 = math.sqrt(sum(v * v for v in a1))
    b1 = [v / n1 for v in a1]
    dot = sum(x * y for x, y in zip(b1, a2))
    u2 = [y - dot * x for x, y in zip(b1, a2)]
    n2 = math.sqrt(sum(v * v for v in u2))
    b2 = [v / n2 for v in u2]
    b3 = [b1[1] * b2[2] - b1[2] * b2[1], b1[2] * b2[0] - b1[0] * b2[2], b1[0] * b2[1] - b1[1] * b2[0]]
    return [[b1[i], b2[i], b3[i]] for i in range(3)]


def _static_rest(frames=5):
    joints = np.tile(DEFAULT_SKELETON.rest_positions(), (frames, 1, 1))
    joints[..., 1] -= 0.0
    rots = np.tile(np.eye(3), (frames, N_JOINTS, 1, 1))
    return joints, rots


class TestSkeleton:
    def test_default_layout(self):
        assert DEFAULT_SKELETON.parents == PARENTS
        assert DEFAULT_SKELETON.rest_offsets.shape == (22, 3)

    def test_rejects_cycle(self):
        parents = list(PARENTS)
        parents[4] = 7  # knee under its own descendant
        with pytest.raises(ValueError):
            Skeleton(tuple(parents))

    def test_scaled_rest_positions(self):
        assert np.allclose(DEFAULT_SKELETON.scaled(1.1).rest_positions(), 1.1 * DEFAULT_SKELETON.rest_positions())


class TestRotation6D:
    def test_identity_roundtrip(self):
        d6 = rotation_to_6d(np.eye(3))
        assert np.array_equal(d6, [1, 0, 0, 0, 1, 0])
        assert np.allclose(rotation_from_6d(d6), np.eye(3))

    def test_matches_hand_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            d6 = rng.normal(size=6)
            assert np.allclose(rotation_from_6d(d6), _hand_gram_schmidt(d6.tolist()), atol=1e-12)

    @pytest.mark.parametrize("d6", [[0, 0, 0, 0, 1, 0], [1, 0, 0, 2, 0, 0], [1, 2, 3, 0, 0, 0]])
    def test_degenerate_inputs_rejected(self, d6):
        with pytest.raises(ValueError):
            rotation_from_6d(np.array(d6, dtype=float))

    @given(arrays(np.float64, (6,), elements=finite))
    def test_decode_is_proper_rotation(self, d6):
        a1, a2 = d6[:3], d6[3:]
        if np.linalg.norm(a1) < 1e-3 or np.linalg.norm(np.cross(a1, a2)) < 1e-3 * max(1, np.linalg.norm(a2)):
            return
        r = rotation_from_6d(d6)
        assert np.allclose(r.T @ r, np.eye(3), atol=1e-6)
        assert abs(np.linalg.det(r) - 1) < 1e-6

    def test_torch_path_differentiable(self):
        d6 = torch.randn(4, 6, dtype=torch.float64, requires_grad=True)
        rotation_from_6d(d6).sum().backward()
        assert torch.isfinite(d6.grad).all()


class TestRecovery:
    def test_static_pose_recovers_rest(self):
        joints, rots = _static_rest()
        pose = encode_motion(joints, rots)
        assert np.allclose(recover_global_joints(pose), joints, atol=1e-12)

    def test_root_velocity_integrates(self):
        # constant forward velocity with zero heading moves the root along +Z
        pose = np.zeros((4, FEAT_DIM))
        pose[1:, 2] = 1.0
        _, root = recover_root(torch.tensor(pose))
        assert np.allclose(root[:, 2].numpy(), np.arange(4) / FPS)

    def test_root_matches_stepwise_integration(self):
        rng = np.random.default_rng(0)
        pose = rng.normal(size=(12, FEAT_DIM))
        yaw, root = recover_root(torch.tensor(pose))
        x = z = h = 0.0
        for n in range(12):
            h += pose[n, 0] / FPS
            if n > 0:
                vx, vz = pose[n, 1], pose[n, 2]
                x += (math.cos(h) * vx + math.sin(h) * vz) / FPS
                z += (-math.sin(h) * vx + math.cos(h) * vz) / FPS
            assert abs(yaw[n].item() - h) < 1e-12
            assert abs(root[n, 0].item() - x) < 1e-12 and abs(root[n, 2].item() - z) < 1e-12

    @pytest.mark.parametrize("kind", ["walk", "turn", "jump", "squat", "sway", "stand"])
    def test_synthetic_roundtrip(self, kind):
        joints, rots, _, _ = synthesize(MotionRecipe(kind, 100, seed=11))
        pose = encode_motion(joints, rots)
        assert np.abs(recover_global_joints(pose) - joints).max() < 1e-4

    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float64, (6, FEAT_DIM), elements=finite))
    def test_first_frame_root_on_origin(self, pose):
        out = recover_global_joints(pose)
        assert np.array_equal(out[0, 0, [0, 2]], [0.0, 0.0])
        assert np.array_equal(out, recover_global_joints(pose))

    def test_rejects_bad_width_and_nan(self):
        with pytest.raises(ValueError):
            recover_global_joints(np.zeros((3, 262)))
        bad = np.zeros((3, FEAT_DIM))
        bad[1, 5] = np.nan
        with pytest.raises(ValueError):
            recover_global_joints(bad)

    def test_encode_requires_origin(self):
        joints, rots = _static_rest()
        joints[..., 0] += 0.3
        with pytest.raises(ValueError):
            encode_motion(joints, rots)

    def test_initial_heading_in_row_zero(self):
        joints, rots, _, params = synthesize(MotionRecipe("stand", 40, seed=5))
        pose = encode_motion(joints, rots)
        assert abs(pose[0, 0] / FPS - params["yaw0"]) < 1e-9


class TestTrajectoryTargets:
    def test_width_and_positions(self):
        rng = np.random.default_rng(1)
        pose = rng.normal(size=(7, FEAT_DIM))
        tgt = extract_trajectory_targets(pose)
        assert tgt.shape == (7, 39)
        joints = recover_global_joints(pose)
        assert np.array_equal(tgt[:, :15], joints[:, list(KEY_JOINTS)].reshape(7, 15))

    def test_static_stand_identity_rotations(self):
        joints, rots = _static_rest(6)
        tgt = extract_trajectory_targets(encode_motion(joints, rots))
        assert np.allclose(tgt, tgt[0])
        assert np.allclose(tgt[:, 15:], np.tile([1, 0, 0, 0, 1, 0], 4))

    def test_rotations_are_global(self):
        joints, rots, _, _ = synthesize(MotionRecipe("turn", 60, seed=2))
        tgt = extract_trajectory_targets(encode_motion(joints, rots))
        for k, j in enumerate((7, 8, 10, 11)):
            assert np.allclose(tgt[:, 15 + 6 * k:21 + 6 * k], rotation_to_6d(rots[:, j]), atol=1e-9)


class TestContacts:
    def test_static_feet_on_ground(self):
        joints = np.zeros((5, 22, 3))
        assert detect_foot_contacts(joints).min() == 1.0

    def test_airborne_frames(self):
        joints = np.zeros((5, 22, 3))
        joints[2, [7, 8, 10, 11], 1] = 0.4
        c = detect_foot_contacts(joints)
        assert c[2].sum() == 0

    def test_matches_brute_force(self):
        joints, _, _, _ = synthesize(MotionRecipe("walk", 80, seed=4))
        c = detect_foot_contacts(joints)
        ids = (7, 10, 8, 11)
        n = joints.shape[0]
        for f in range(n):
            g = f + 1 if f < n - 1 else f
            src = f if f < n - 1 else f - 1
            for k, j in enumerate(ids):
                d = math.dist(joints[g if f < n - 1 else f, j], joints[src if f < n - 1 else f - 1, j])
                want = float(joints[f, j, 1] < 0.05 and d < 0.005)
                assert c[f, k] == want

    def test_rejects_empty_and_bad_thresholds(self):
        with pytest.raises(ValueError):
            detect_foot_contacts(np.zeros((0, 22, 3)))
        with pytest.raises(ValueError):
            detect_foot_contacts(np.zeros((2, 22, 3)), height_thresh=0)

    def test_displacement_last_frame_repeats(self):
        joints = np.zeros((3, 22, 3))
        joints[1, 7, 0] = 0.1
        d = foot_displacement(joints)
        assert d[0, 0] == pytest.approx(0.1) and d[2, 0] == d[1, 0]


class TestCrop:
    def test_crop_reanchors(self):
        joints, rots, _, _ = synthesize(MotionRecipe("walk", 90, seed=8))
        pose = encode_motion(joints, rots)
        crop = crop_pose(pose, 30, 40)
        got = recover_global_joints(crop)
        want = joints[30:70].copy()
        want[..., 0] -= joints[30, 0, 0]
        want[..., 2] -= joints[30, 0, 2]
        assert np.abs(got - want).max() < 1e-6

    def test_crop_bounds(self):
        with pytest.raises(ValueError):
            crop_pose(np.zeros((10, FEAT_DIM)), 5, 6)

    def test_heading_preserved(self):
        joints, rots, _, _ = synthesize(MotionRecipe("turn", 80, seed=1))
        pose = encode_motion(joints, rots)
        crop = crop_pose(pose, 20, 30)
        yaw_full, _ = recover_root(torch.tensor(pose))
        yaw_crop, _ = recover_root(torch.tensor(crop))
        diff = (yaw_full[20:50] - yaw_crop).numpy()
        assert np.allclose(np.angle(np.exp(1j * diff)), 0, atol=1e-9)


def test_ric_block_is_heading_relative():
    # rotating the whole motion leaves every feature but the initial heading unchanged
    joints, rots, _, _ = synthesize(MotionRecipe("walk", 50, seed=9))
    r = rot_y_np(np.array(0.7))
    pose_a = encode_motion(joints, rots)
    pose_b = encode_motion(np.einsum("ij,nkj->nki", r, joints), np.einsum("ij,nkjl->nkil", r, rots))
    assert np.allclose(pose_a[:, SL_RIC], pose_b[:, SL_RIC], atol=1e-9)
    assert np.allclose(pose_a[1:], pose_b[1:], atol=1e-9)
