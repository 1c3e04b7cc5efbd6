"""Rotation encoding, forward kinematics, camera projection, motion IO."""
import numpy as np
import pytest

import pgmocap as pg
from pgmocap.motion import (BehindCameraError, MotionFormatError,
                            fk_from_rotations, motion_to_state, state_dim,
                            state_to_motion, unproject_pixel)

from oracles import fk_ref, rot6d_to_matrix_ref


# ---------------------------------------------------------------------------
# 6D rotation representation
# ---------------------------------------------------------------------------

def test_rot6d_scaled_axes_decode_to_identity():
    # Gram-Schmidt normalizes away the column scales.
    v = np.array([2.0, 0, 0, 0, 3.0, 0])
    np.testing.assert_allclose(pg.rot6d_to_matrix(v), np.eye(3), atol=1e-12)


def test_rot6d_of_z_rotation():
    Rz = pg.rotation_about("z", np.pi / 2)
    np.testing.assert_allclose(pg.matrix_to_rot6d(Rz),
                               [0, 1, 0, -1, 0, 0], atol=1e-12)


def test_rot6d_round_trip_1000_random_rotations():
    rng = np.random.default_rng(42)
    R = pg.so3_exp(rng.normal(0.0, 1.2, size=(1000, 3)))
    back = pg.rot6d_to_matrix(pg.matrix_to_rot6d(R))
    assert np.max(np.abs(back - R)) < 1e-9


def test_rot6d_matches_reference_gram_schmidt(rng):
    for _ in range(20):
        v = rng.normal(size=6)
        np.testing.assert_allclose(pg.rot6d_to_matrix(v),
                                   rot6d_to_matrix_ref(v), atol=1e-12)


def test_rot6d_rejects_degenerate_input():
    with pytest.raises(ValueError):
        pg.rot6d_to_matrix(np.array([0.0, 0, 0, 0, 1, 0]))
    with pytest.raises(ValueError):
        # parallel columns leave no second direction
        pg.rot6d_to_matrix(np.array([1.0, 0, 0, 2.0, 0, 0]))


def test_so3_exp_log_round_trip(rng):
    w = rng.normal(0.0, 0.9, size=(50, 3))
    np.testing.assert_allclose(pg.so3_log(pg.so3_exp(w)), w, atol=1e-9)


# ---------------------------------------------------------------------------
# Forward kinematics
# ---------------------------------------------------------------------------

def identity_motion(skeleton, num_frames=1, tau=None):
    J = skeleton.joint_count
    rot6d = np.tile(np.array([1.0, 0, 0, 0, 1, 0]), (num_frames, J, 1))
    t = np.zeros((num_frames, 3)) if tau is None else np.asarray(tau, float)
    return pg.Motion(rot6d=rot6d, tau=t, fps=30.0)


def test_fk_identity_rotations_accumulate_rest_offsets(biped):
    pos = pg.forward_kinematics(biped, identity_motion(biped), frame=0)
    expect = np.zeros((biped.joint_count, 3))
    scaled = biped.offsets * biped.beta[:, None]
    for j in range(1, biped.joint_count):
        expect[j] = expect[biped.parents[j]] + scaled[j]
    np.testing.assert_allclose(pos, expect, atol=1e-12)


def test_fk_translation_equivariance(biped, random_motion):
    m = random_motion(biped, num_frames=4)
    base = pg.forward_kinematics(biped, m)
    shifted = pg.Motion(rot6d=m.rot6d, tau=m.tau + np.array([1.0, 2.0, 3.0]),
                        fps=m.fps)
    np.testing.assert_allclose(pg.forward_kinematics(biped, shifted),
                               base + np.array([1.0, 2.0, 3.0]), atol=1e-12)


def test_fk_two_joint_chain_rotated_root():
    """Root rotated 90 deg about x carries a (0,0,1) bone to (0,-1,0)."""
    skel = pg.Skeleton(parents=np.array([-1, 0]),
                       offsets=np.array([[0.0, 0, 0], [0.0, 0, 1.0]]),
                       beta=np.ones(2), foot_joints=())
    rots = np.stack([pg.rotation_about("x", np.pi / 2), np.eye(3)])[None]
    motion = pg.Motion(rot6d=pg.matrix_to_rot6d(rots), tau=np.zeros((1, 3)),
                       fps=30.0)
    pos = pg.forward_kinematics(skel, motion, frame=0)
    np.testing.assert_allclose(pos[1], [0.0, -1.0, 0.0], atol=1e-12)
    oracle = fk_ref(skel.parents, skel.offsets, skel.beta, motion.rot6d,
                    motion.tau)
    np.testing.assert_allclose(pos, oracle[0], atol=1e-12)


def test_fk_against_brute_force_oracle(biped, random_motion):
    m = random_motion(biped, num_frames=5)
    got = pg.forward_kinematics(biped, m)
    want = fk_ref(biped.parents, biped.offsets, biped.beta, m.rot6d, m.tau)
    np.testing.assert_allclose(got, want, atol=1e-10)


def test_fk_respects_beta_scaling(random_motion):
    skel = pg.make_skeleton("biped9")
    scaled = skel.with_beta(np.full(skel.joint_count, 1.5))
    m = identity_motion(skel)
    a = pg.forward_kinematics(skel, m, frame=0)
    b = pg.forward_kinematics(scaled, m, frame=0)
    np.testing.assert_allclose(b, 1.5 * a, atol=1e-12)


def test_fk_frame_out_of_range(biped):
    with pytest.raises(ValueError, match="frame"):
        pg.forward_kinematics(biped, identity_motion(biped), frame=5)


# ---------------------------------------------------------------------------
# Camera
# ---------------------------------------------------------------------------

def test_projection_pinhole_formula(camera):
    pt = np.array([0.2, -0.1, 1.3])
    cam = camera.rot @ pt + camera.trans
    want = [camera.fx * cam[0] / cam[2] + camera.cx,
            camera.fy * cam[1] / cam[2] + camera.cy]
    np.testing.assert_allclose(pg.project_points(camera, pt[None])[0], want,
                               atol=1e-12)


def test_project_unproject_round_trip(camera, rng):
    pts = rng.normal(0.0, 0.5, size=(30, 3)) + [0.0, 0.0, 1.0]
    px = pg.project_points(camera, pts)
    for i in range(len(pts)):
        cam_depth = (camera.rot @ pts[i] + camera.trans)[2]
        back = unproject_pixel(camera, px[i], cam_depth)
        np.testing.assert_allclose(back, pts[i], atol=1e-9)


def test_projection_behind_camera(camera):
    # default camera sits at y = -3.5 looking toward +y
    with pytest.raises(BehindCameraError):
        pg.project_points(camera, np.array([[0.0, -5.0, 1.0]]))


# ---------------------------------------------------------------------------
# Motion container, state vectors, files
# ---------------------------------------------------------------------------

def test_motion_validates_shapes():
    with pytest.raises(ValueError):
        pg.Motion(rot6d=np.zeros((4, 3, 6)), tau=np.zeros((5, 3)), fps=30.0)
    with pytest.raises(ValueError):
        pg.Motion(rot6d=np.zeros((4, 3, 5)), tau=np.zeros((4, 3)), fps=30.0)


def test_motion_rejects_undecodable_rotations():
    rot6d = np.tile(np.array([1.0, 0, 0, 0, 1, 0]), (2, 2, 1))
    rot6d[1, 1] = 0.0
    with pytest.raises(ValueError):
        pg.Motion(rot6d=rot6d, tau=np.zeros((2, 3)), fps=30.0)


def test_state_round_trip(biped, random_motion):
    m = random_motion(biped, num_frames=7)
    state = motion_to_state(m)
    assert state.shape == (7, state_dim(biped.joint_count))
    back = state_to_motion(state, biped.joint_count, fps=m.fps)
    np.testing.assert_allclose(back.rot6d, m.rot6d, atol=1e-12)
    np.testing.assert_allclose(back.tau, m.tau, atol=1e-12)


def test_state_to_motion_reorthonormalizes(biped, random_motion):
    """Noisy state channels still decode: rotations are re-orthonormalized."""
    m = random_motion(biped, num_frames=3)
    state = motion_to_state(m) + 0.05
    noisy = state_to_motion(state, biped.joint_count)
    R = noisy.rotations()
    eye = np.swapaxes(R, -1, -2) @ R
    np.testing.assert_allclose(eye, np.broadcast_to(np.eye(3), eye.shape),
                               atol=1e-9)


def test_motion_file_round_trip(tmp_path, biped, random_motion):
    m = random_motion(biped, num_frames=4)
    path = tmp_path / "m.json"
    pg.save_motion(path, m, biped)
    back, skel = pg.load_motion(path)
    np.testing.assert_allclose(back.rot6d, m.rot6d, atol=1e-15)
    np.testing.assert_allclose(back.tau, m.tau, atol=1e-15)
    assert skel.joint_count == biped.joint_count
    np.testing.assert_allclose(skel.offsets, biped.offsets)
    assert tuple(skel.foot_joints) == tuple(biped.foot_joints)


def test_motion_file_rejects_unknown_version(tmp_path, biped, random_motion):
    path = tmp_path / "m.json"
    pg.save_motion(path, random_motion(biped, num_frames=2), biped)
    doc = path.read_text().replace("pgm-motion/1", "pgm-motion/9")
    path.write_text(doc)
    with pytest.raises(MotionFormatError):
        pg.load_motion(path)


def test_fk_from_rotations_matches_forward_kinematics(biped, random_motion):
    m = random_motion(biped, num_frames=3)
    pos, glob = fk_from_rotations(biped, m.rotations(), m.tau)
    np.testing.assert_allclose(pos, pg.forward_kinematics(biped, m),
                               atol=1e-12)
    # accumulated rotations stay orthonormal
    eye = np.swapaxes(glob, -1, -2) @ glob
    np.testing.assert_allclose(eye, np.broadcast_to(np.eye(3), eye.shape),
                               atol=1e-10)
