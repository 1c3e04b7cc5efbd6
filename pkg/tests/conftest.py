"""Shared fixtures: skeletons, a camera, tiny corpora and once-trained
small models reused across test modules (session scope, treated as frozen).
"""
import numpy as np
import pytest

import pgmocap as pg
from pgmocap.diffusion import DenoiserSpec, DiffusionTrainConfig
from pgmocap.vae import VaeSpec, VaeTrainConfig


@pytest.fixture(scope="session")
def biped():
    return pg.make_skeleton("biped9")


@pytest.fixture(scope="session")
def chain3():
    return pg.make_skeleton("chain3")


@pytest.fixture(scope="session")
def camera():
    return pg.default_camera()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def random_motion(rng):
    """Factory for valid random motions (proper rotations, sane root)."""
    def make(skeleton, num_frames=6, rot_scale=0.4, fps=30.0):
        J = skeleton.joint_count
        axis_angle = rng.normal(0.0, rot_scale, size=(num_frames, J, 3))
        rots = pg.so3_exp(axis_angle)
        tau = rng.normal(0.0, 0.3, size=(num_frames, 3))
        tau[:, 2] += 1.0
        return pg.Motion(rot6d=pg.matrix_to_rot6d(rots), tau=tau, fps=fps)
    return make


@pytest.fixture(scope="session")
def small_dataset(biped, camera):
    """Six short sequences with the default noise model."""
    return pg.generate_dataset(biped, camera, pg.NoiseConfig(),
                               ["walk", "squat", "idle"],
                               num_sequences=6, num_frames=45, seed=7)


@pytest.fixture(scope="session")
def trained_vae(small_dataset):
    cfg = VaeTrainConfig(spec=VaeSpec(num_joints=9), epochs=40,
                         batch_size=6, seed=3)
    model, history = pg.train_vae(small_dataset, cfg)
    return model


@pytest.fixture(scope="session")
def sched5():
    return pg.make_schedule(5)


@pytest.fixture(scope="session")
def trained_denoiser(small_dataset, trained_vae, sched5):
    cfg = DiffusionTrainConfig(spec=DenoiserSpec(num_joints=9), epochs=8,
                               batch_size=6, seed=5)
    model, history = pg.train_diffusion(small_dataset, trained_vae, sched5,
                                        cfg, pg.TrackerConfig())
    return model
