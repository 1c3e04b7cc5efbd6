"""Physics-guided capture: analytic reprojection gradients against finite
differences, step placement, oracle-denoiser exactness, determinism, and
the ablation harness.
"""
import dataclasses
import logging

import numpy as np
import pytest

import pgmocap as pg
from pgmocap.diffusion import StateGaussian
from pgmocap.guidance import (ABLATE_FORMAT_VERSION, REFERENCE_FULL_SCALE,
                              ArmSpec, GuidanceConfig, build_condition,
                              capture, default_arms, guided_step_set,
                              parse_arm, projection_gradient)

from oracles import fd_grad, reprojection_loss_ref


def points_in_view(camera, rng, H=3, J=4):
    """Random world points comfortably inside the viewing frustum."""
    pts = rng.normal(0.0, 0.3, (H, J, 3))
    pts[..., 2] += 1.0
    return pts


# ---------------------------------------------------------------------------
# Reprojection gradient
# ---------------------------------------------------------------------------

def test_projection_gradient_matches_finite_differences(camera, rng):
    pts = points_in_view(camera, rng)
    kp2d = rng.normal(320.0, 60.0, (3, 4, 2))
    conf = rng.uniform(0.1, 1.0, (3, 4))
    grads = projection_gradient(pts, kp2d, conf, camera)

    def loss(p):
        return reprojection_loss_ref(p, kp2d, conf, camera.fx, camera.fy,
                                     camera.cx, camera.cy, camera.rot,
                                     camera.trans)

    fd = fd_grad(loss, pts)
    np.testing.assert_allclose(grads, fd, rtol=1e-4, atol=1e-8)


def test_projection_gradient_masks_frames(camera, rng):
    pts = points_in_view(camera, rng)
    kp2d = rng.normal(320.0, 60.0, (3, 4, 2))
    conf = rng.uniform(0.1, 1.0, (3, 4))
    full = projection_gradient(pts, kp2d, conf, camera)
    mask = np.array([True, False, True])
    masked = projection_gradient(pts, kp2d, conf, camera, frame_mask=mask)
    np.testing.assert_array_equal(masked[1], 0.0)
    np.testing.assert_array_equal(masked[0], full[0])
    np.testing.assert_array_equal(masked[2], full[2])
    assert np.any(full[1] != 0.0)


def test_projection_gradient_zeroes_points_behind_camera(camera, rng, caplog):
    pts = points_in_view(camera, rng, H=1, J=2)
    # drag one joint far behind the image plane
    behind = camera.rot.T @ (np.array([0.0, 0.0, -1.0]) - camera.trans)
    pts[0, 1] = behind
    kp2d = np.full((1, 2, 2), 320.0)
    conf = np.ones((1, 2))
    with caplog.at_level(logging.WARNING):
        grads = projection_gradient(pts, kp2d, conf, camera)
    np.testing.assert_array_equal(grads[0, 1], 0.0)
    assert np.any(grads[0, 0] != 0.0)
    assert "behind the camera" in caplog.text


def test_projection_gradient_validation(camera):
    good = np.zeros((2, 3, 3))
    with pytest.raises(ValueError, match="joints"):
        projection_gradient(np.zeros((2, 3)), np.zeros((2, 3, 2)),
                            np.zeros((2, 3)), camera)
    with pytest.raises(ValueError, match="shapes"):
        projection_gradient(good, np.zeros((2, 2, 2)), np.zeros((2, 3)), camera)
    with pytest.raises(ValueError, match="frame_mask"):
        projection_gradient(good, np.zeros((2, 3, 2)), np.zeros((2, 3)),
                            camera, frame_mask=np.ones(3, dtype=bool))


def test_build_condition_forces_zero_when_not_executed(rng):
    emb = rng.normal(size=(4, 6))
    grads = rng.normal(size=(4, 2, 3))
    off = build_condition(emb, grads, executed=False)
    assert not off.executed
    np.testing.assert_array_equal(off.gradients, 0.0)
    on = build_condition(emb, grads, executed=True)
    assert on.executed
    assert np.sqrt(np.mean(on.gradients ** 2)) == pytest.approx(1.0, rel=1e-12)
    with pytest.raises(ValueError, match="frames"):
        build_condition(emb, grads[:3], executed=True)


# ---------------------------------------------------------------------------
# Step placement and config validation
# ---------------------------------------------------------------------------

def test_guided_step_placements():
    base = dict(num_steps=5, guided_steps=3)
    assert guided_step_set(GuidanceConfig(**base, placement="last")) \
        == frozenset({1, 2, 3})
    assert guided_step_set(GuidanceConfig(**base, placement="first")) \
        == frozenset({3, 4, 5})
    assert guided_step_set(GuidanceConfig(**base, placement="even")) \
        == frozenset({1, 3, 5})
    assert guided_step_set(GuidanceConfig(num_steps=5, guided_steps=0)) \
        == frozenset()
    assert guided_step_set(GuidanceConfig(**base, tracking="none")) \
        == frozenset()
    assert guided_step_set(GuidanceConfig(num_steps=4, guided_steps=4,
                                          placement="even")) \
        == frozenset({1, 2, 3, 4})


def test_guidance_config_validation():
    with pytest.raises(ValueError, match="guided_steps"):
        GuidanceConfig(num_steps=5, guided_steps=6)
    with pytest.raises(ValueError, match="placement"):
        GuidanceConfig(placement="middle")
    with pytest.raises(ValueError, match="init_mode"):
        GuidanceConfig(init_mode="prior")
    with pytest.raises(ValueError, match="tracking"):
        GuidanceConfig(tracking="always")


# ---------------------------------------------------------------------------
# Capture
# ---------------------------------------------------------------------------

def test_capture_rejects_schedule_mismatch(small_dataset, trained_vae,
                                           trained_denoiser, sched5):
    _, obs = small_dataset.samples[0]
    cfg = GuidanceConfig(num_steps=4, guided_steps=0, tracking="none")
    with pytest.raises(ValueError, match="steps"):
        capture(obs, small_dataset.camera, small_dataset.skeleton,
                trained_vae, trained_denoiser, sched5, cfg)


def test_capture_with_oracle_denoiser_recovers_truth(small_dataset,
                                                     trained_vae,
                                                     trained_denoiser, sched5):
    """A denoiser that always answers with the true clean state must land
    on it: the last reverse step returns the clean prediction (up to the
    float cancellation in its beta_1 / (1 - cumprod) coefficient).
    """
    gt, obs = small_dataset.samples[0]
    x0 = pg.motion_to_state(gt)
    cfg = GuidanceConfig(num_steps=5, guided_steps=0, tracking="none",
                         stochastic=False)
    out = capture(obs, small_dataset.camera, small_dataset.skeleton,
                  trained_vae, trained_denoiser, sched5, cfg, seed=3,
                  fps=gt.fps, denoise_fn=lambda x_t, t, cond: x0)
    np.testing.assert_allclose(out.motion.rot6d, gt.rot6d, atol=1e-12)
    np.testing.assert_allclose(out.motion.tau, gt.tau, atol=1e-12)
    assert out.track_result is None


def test_capture_tracking_modes_share_the_denoised_motion(
        small_dataset, trained_vae, trained_denoiser, sched5):
    """post_hoc only adds physics on top of the none-mode output; with the
    same seed the denoised motion must be identical and the tracked motion
    must differ from it.
    """
    _, obs = small_dataset.samples[1]
    kw = dict(seed=11, fps=small_dataset.fps)
    plain = capture(obs, small_dataset.camera, small_dataset.skeleton,
                    trained_vae, trained_denoiser, sched5,
                    GuidanceConfig(guided_steps=0, tracking="none"), **kw)
    posthoc = capture(obs, small_dataset.camera, small_dataset.skeleton,
                      trained_vae, trained_denoiser, sched5,
                      GuidanceConfig(guided_steps=0, tracking="post_hoc"), **kw)
    np.testing.assert_array_equal(plain.motion.rot6d, posthoc.motion.rot6d)
    np.testing.assert_array_equal(plain.motion.tau, posthoc.motion.tau)
    assert posthoc.track_result is not None
    assert posthoc.track_result.motion.num_frames == plain.motion.num_frames
    assert not np.array_equal(posthoc.track_result.motion.tau, plain.motion.tau)


def test_capture_is_deterministic_per_seed(small_dataset, trained_vae,
                                           trained_denoiser, sched5):
    _, obs = small_dataset.samples[2]
    cfg = GuidanceConfig()            # guided, stochastic, the full path
    runs = [capture(obs, small_dataset.camera, small_dataset.skeleton,
                    trained_vae, trained_denoiser, sched5, cfg, seed=21,
                    fps=small_dataset.fps) for _ in range(2)]
    np.testing.assert_array_equal(runs[0].motion.rot6d, runs[1].motion.rot6d)
    np.testing.assert_array_equal(runs[0].motion.tau, runs[1].motion.tau)
    assert runs[0].diagnostics["steps"] == runs[1].diagnostics["steps"]

    other = capture(obs, small_dataset.camera, small_dataset.skeleton,
                    trained_vae, trained_denoiser, sched5, cfg, seed=22,
                    fps=small_dataset.fps)
    assert not np.array_equal(other.motion.tau, runs[0].motion.tau)


def test_capture_diagnostics_mark_guided_steps(small_dataset, trained_vae,
                                               trained_denoiser, sched5):
    _, obs = small_dataset.samples[0]
    cfg = GuidanceConfig(num_steps=5, guided_steps=2, placement="last")
    out = capture(obs, small_dataset.camera, small_dataset.skeleton,
                  trained_vae, trained_denoiser, sched5, cfg, seed=4,
                  fps=small_dataset.fps)
    steps = out.diagnostics["steps"]
    assert [s["t"] for s in steps] == [5, 4, 3, 2, 1]
    assert [s["guided"] for s in steps] == [False, False, False, True, True]
    executed = [s["executed"] for s in steps if s["guided"]]
    fallbacks = out.diagnostics["fallbacks"]
    assert sum(not e for e in executed) == fallbacks
    assert out.diagnostics["guided_steps_at"] == [2, 1]
    assert out.track_result is not None


# ---------------------------------------------------------------------------
# Arm parsing and the ablation harness
# ---------------------------------------------------------------------------

def test_parse_arm_forms():
    assert parse_arm("vae") == ArmSpec("vae", "vae")
    assert parse_arm("vae_tracked") == ArmSpec("vae_tracked", "vae",
                                               tracking="post_hoc")
    assert parse_arm("latent_T5_s0") == ArmSpec(
        "latent_T5_s0", "diffusion", 5, 0, "latent", "none")
    assert parse_arm("standard_T10_s0") == ArmSpec(
        "standard_T10_s0", "diffusion", 10, 0, "standard", "none")
    assert parse_arm("posthoc_T5") == ArmSpec(
        "posthoc_T5", "diffusion", 5, 0, "latent", "post_hoc")
    guided = parse_arm("guided_T5_s3")
    assert (guided.num_steps, guided.guided_steps) == (5, 3)
    assert guided.tracking == "guided" and guided.gradient_condition
    assert parse_arm("standard_T5_s3").init_mode == "standard"
    nograd = parse_arm("guided_T5_s3_nograd")
    assert nograd.tracking == "guided" and not nograd.gradient_condition


def test_parse_arm_rejects_unknown_names():
    for bad in ("junk", "latent_T5_sx", "guided_T5_s0", "vae_T5"):
        with pytest.raises(ValueError):
            parse_arm(bad)


def test_reference_table_covers_default_arms():
    for name in default_arms():
        assert name in REFERENCE_FULL_SCALE
    table = REFERENCE_FULL_SCALE
    assert (table["guided_T5_s1"]["success_rate"]
            < table["guided_T5_s2"]["success_rate"]
            < table["guided_T5_s3"]["success_rate"])
    assert (table["guided_T5_s3_nograd"]["success_rate"]
            < table["guided_T5_s3"]["success_rate"])
    assert (table["guided_T5_s3_nograd"]["pa_mpjpe_mm"]
            > table["guided_T5_s3"]["pa_mpjpe_mm"])


def test_ablate_report_schema(small_dataset, trained_vae, trained_denoiser,
                              sched5):
    subset = dataclasses.replace(small_dataset,
                                 samples=small_dataset.samples[:3])
    report = pg.ablate(subset, trained_vae, {5: (trained_denoiser, sched5)},
                       ["vae", "vae_tracked", "latent_T5_s0", "guided_T5_s1",
                        "latent_T3_s0"],
                       seed=2)
    assert report["version"] == ABLATE_FORMAT_VERSION
    assert report["num_sequences"] == 3
    assert report["skipped"] == [{"arm": "latent_T3_s0",
                                  "reason": "no 3-step model"}]
    rows = {r["arm"]: r for r in report["arms"]}
    assert set(rows) == {"vae", "vae_tracked", "latent_T5_s0", "guided_T5_s1"}
    for row in rows.values():
        m = row["metrics"]
        assert set(m) == {"mpjpe", "pa_mpjpe", "pck", "vel_err",
                          "vel_err_std", "foot_z_err", "success_rate"}
        assert m["pa_mpjpe"] <= m["mpjpe"]
        assert row["num_sequences"] == 3
    assert rows["vae"]["metrics"]["success_rate"] is None
    assert rows["latent_T5_s0"]["metrics"]["success_rate"] is None
    for tracked in ("vae_tracked", "guided_T5_s1"):
        rate = rows[tracked]["metrics"]["success_rate"]
        assert 0.0 <= rate <= 1.0
    assert rows["vae"]["reference_full_scale"] == REFERENCE_FULL_SCALE["vae"]


def test_ablate_same_seed_reproduces(small_dataset, trained_vae,
                                     trained_denoiser, sched5):
    subset = dataclasses.replace(small_dataset,
                                 samples=small_dataset.samples[:2])
    a = pg.ablate(subset, trained_vae, {5: (trained_denoiser, sched5)},
                  ["guided_T5_s2"], seed=9)
    b = pg.ablate(subset, trained_vae, {5: (trained_denoiser, sched5)},
                  ["guided_T5_s2"], seed=9)
    assert a == b
